#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ca3net/errors.hpp"
#include "ca3net/tensor.hpp"

namespace ca3net {

/// Reverse-mode gradient tape. Each recorded node is a closure that pulls the
/// gradient of its output and accumulates into the gradients of its inputs.
/// Replaying the nodes in reverse order after seeding the loss gradient with
/// 1.0 yields gradients for every tensor with requires_grad set.
class GradTape {
public:
    void record(const TensorPtr& output, std::function<void()> backward_fn) {
        nodes_.push_back({output, std::move(backward_fn)});
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    /// Seed the scalar loss with gradient 1.0 and replay the tape backwards.
    /// Gradients accumulate; callers reset them between passes.
    void backward(const TensorPtr& loss) {
        if (!loss || !loss->is_scalar())
            throw UsageError("backward expects a scalar loss tensor");
        loss->ensure_grad();
        loss->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();
    }

    /// Reset the gradients of every tensor produced on this tape. Leaf
    /// tensors (parameters, inputs) are the caller's responsibility.
    void zero_grads() {
        for (auto& n : nodes_) n.output->zero_grad();
    }

private:
    struct Node {
        TensorPtr output;
        std::function<void()> backward_fn;
    };
    std::vector<Node> nodes_;
};

inline void backward(const TensorPtr& loss, GradTape& tape) { tape.backward(loss); }

} // namespace ca3net

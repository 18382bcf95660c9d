#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ca3net/errors.hpp"
#include "ca3net/rng.hpp"
#include "ca3net/tensor.hpp"

namespace ca3net {

/// Named parameter store. Keeps registration order so iteration (and thus
/// checkpoint layout and optimizer traversal) is deterministic. Non-trainable
/// entries hold running statistics and other persistent buffers.
class ModelParams {
public:
    struct Entry {
        std::string name;
        TensorPtr tensor;
        bool trainable;
    };

    TensorPtr add(const std::string& name, TensorPtr t, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
        t->requires_grad = trainable;
        index_[name] = entries_.size();
        entries_.push_back({name, t, trainable});
        return entries_.back().tensor;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const TensorPtr& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return entries_[it->second].tensor;
    }

    const std::vector<Entry>& entries() const { return entries_; }

    std::size_t total_trainable() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.tensor->size();
        return n;
    }

    /// Zero (and allocate) gradients of trainable parameters passing `filter`.
    void zero_grads(const std::function<bool(const std::string&)>& filter = {}) {
        for (auto& e : entries_) {
            if (!e.trainable) continue;
            if (filter && !filter(e.name)) continue;
            e.tensor->ensure_grad();
            e.tensor->zero_grad();
        }
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace init {

/// Fan-in scaled normal init for weights feeding a ReLU (He).
inline void he_normal(Rng& rng, Tensor& t, int fan_in) {
    const double s = std::sqrt(2.0 / fan_in);
    for (auto& v : t.data) v = rng.normal(0.0, s);
}

/// Fan-in scaled normal init for plain linear maps.
inline void xavier_normal(Rng& rng, Tensor& t, int fan_in) {
    const double s = std::sqrt(1.0 / fan_in);
    for (auto& v : t.data) v = rng.normal(0.0, s);
}

} // namespace init

} // namespace ca3net

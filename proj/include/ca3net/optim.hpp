#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ca3net/errors.hpp"
#include "ca3net/params.hpp"

namespace ca3net {

/// Stochastic gradient descent with Nesterov momentum and classic L2 weight
/// decay folded into the gradient:
///     g      = grad + weight_decay * theta
///     v      = momentum * v + g
///     theta -= lr * (g + momentum * v)   (Nesterov)
///     theta -= lr * v                    (plain momentum)
/// Gradients are left untouched; the caller resets them between steps.
class SgdState {
public:
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool nesterov = true;

    SgdState() = default;
    SgdState(double lr, double mom, double wd, bool nest)
        : learning_rate(lr), momentum(mom), weight_decay(wd), nesterov(nest) {}

    /// One update over trainable parameters passing `active` (all when empty).
    /// `lr_override` < 0 means use the configured learning rate.
    void step(ModelParams& params, const std::function<bool(const std::string&)>& active = {},
              double lr_override = -1.0) {
        const double lr = lr_override >= 0.0 ? lr_override : learning_rate;
        for (const auto& e : params.entries()) {
            if (!e.trainable) continue;
            if (active && !active(e.name)) continue;
            Tensor& t = *e.tensor;
            if (!t.has_grad())
                throw OptimError("sgd_step: missing gradient for parameter '" + e.name + "'");
            auto& v = velocity_[e.name];
            if (v.size() != t.size()) v.assign(t.size(), 0.0);
            for (std::size_t i = 0; i < t.size(); ++i) {
                double g = t.grad[i] + weight_decay * t.data[i];
                v[i] = momentum * v[i] + g;
                t.data[i] -= lr * (nesterov ? g + momentum * v[i] : v[i]);
            }
        }
    }

    const std::unordered_map<std::string, std::vector<double>>& velocities() const {
        return velocity_;
    }
    std::unordered_map<std::string, std::vector<double>>& velocities() { return velocity_; }

private:
    std::unordered_map<std::string, std::vector<double>> velocity_;
};

inline void sgd_step(ModelParams& params, SgdState& state,
                     const std::function<bool(const std::string&)>& active = {},
                     double lr_override = -1.0) {
    state.step(params, active, lr_override);
}

} // namespace ca3net

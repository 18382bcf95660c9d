#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ca3net/errors.hpp"
#include "ca3net/ops.hpp"
#include "ca3net/params.hpp"
#include "ca3net/tape.hpp"
#include "ca3net/tensor.hpp"

namespace ca3net {

/// Per-channel batch normalization over [N,C], [N,C,L] or [N,C,H,W].
/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running statistics with momentum 0.1 (running variance is unbiased);
/// eval mode normalizes with the stored running statistics.
class BatchNorm {
public:
    BatchNorm() = default;

    BatchNorm(ModelParams& store, const std::string& prefix, int channels, double eps = 1e-5,
              double momentum = 0.1)
        : eps_(eps), momentum_(momentum) {
        gamma_ = store.add(prefix + ".gamma", make_tensor(Shape{channels}, 1.0), true);
        beta_ = store.add(prefix + ".beta", make_tensor(Shape{channels}, 0.0), true);
        running_mean_ = store.add(prefix + ".running_mean", make_tensor(Shape{channels}, 0.0), false);
        running_var_ = store.add(prefix + ".running_var", make_tensor(Shape{channels}, 1.0), false);
    }

    int channels() const { return gamma_ ? gamma_->dim(0) : 0; }
    const TensorPtr& gamma() const { return gamma_; }
    const TensorPtr& beta() const { return beta_; }
    const TensorPtr& running_mean() const { return running_mean_; }
    const TensorPtr& running_var() const { return running_var_; }

    TensorPtr forward(GradTape* tape, const TensorPtr& x, bool train) const {
        if (x->ndim() < 2)
            throw ShapeError("batch_norm: input must have a leading batch axis, got " +
                             shape_str(x->shape));
        const int n = x->dim(0);
        const int c = x->dim(1);
        if (c != channels())
            throw ShapeError("batch_norm: channel axis is " + std::to_string(c) + " but layer has " +
                             std::to_string(channels()) + " channels");
        std::size_t plane = 1;
        for (int d = 2; d < x->ndim(); ++d) plane *= static_cast<std::size_t>(x->shape[d]);
        const std::size_t count = static_cast<std::size_t>(n) * plane;
        if (train && n < 2)
            throw ConfigError("batch_norm: train mode requires batch size >= 2, got " +
                              std::to_string(n));

        std::vector<double> mu(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
        if (train) {
            for (int ci = 0; ci < c; ++ci) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double* src = x->data.data() + (static_cast<std::size_t>(i) * c + ci) * plane;
                    for (std::size_t p = 0; p < plane; ++p) s += src[p];
                }
                mu[ci] = s / static_cast<double>(count);
                double v = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double* src = x->data.data() + (static_cast<std::size_t>(i) * c + ci) * plane;
                    for (std::size_t p = 0; p < plane; ++p) {
                        double d = src[p] - mu[ci];
                        v += d * d;
                    }
                }
                var[ci] = v / static_cast<double>(count);
            }
            // Running stats track the unbiased variance.
            const double unbias =
                count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
            for (int ci = 0; ci < c; ++ci) {
                running_mean_->data[ci] = (1.0 - momentum_) * running_mean_->data[ci] + momentum_ * mu[ci];
                running_var_->data[ci] =
                    (1.0 - momentum_) * running_var_->data[ci] + momentum_ * var[ci] * unbias;
            }
        } else {
            for (int ci = 0; ci < c; ++ci) {
                mu[ci] = running_mean_->data[ci];
                var[ci] = running_var_->data[ci];
            }
        }

        auto out = make_tensor(x->shape);
        std::vector<double> invstd(static_cast<std::size_t>(c));
        for (int ci = 0; ci < c; ++ci) invstd[ci] = 1.0 / std::sqrt(var[ci] + eps_);
        for (int i = 0; i < n; ++i)
            for (int ci = 0; ci < c; ++ci) {
                const std::size_t base = (static_cast<std::size_t>(i) * c + ci) * plane;
                const double g = gamma_->data[ci], b = beta_->data[ci];
                for (std::size_t p = 0; p < plane; ++p)
                    out->data[base + p] = (x->data[base + p] - mu[ci]) * invstd[ci] * g + b;
            }

        auto gamma = gamma_;
        auto beta = beta_;
        if (detail::recording(tape, {x, gamma, beta})) {
            out->requires_grad = true;
            if (train) {
                tape->record(out, [x, out, gamma, beta, mu, invstd, n, c, plane, count] {
                    if (!out->has_grad()) return;
                    const double inv_count = 1.0 / static_cast<double>(count);
                    for (int ci = 0; ci < c; ++ci) {
                        // Gather per-channel sums of dy and dy*xhat.
                        double sum_dy = 0.0, sum_dy_xhat = 0.0;
                        for (int i = 0; i < n; ++i) {
                            const std::size_t base = (static_cast<std::size_t>(i) * c + ci) * plane;
                            for (std::size_t p = 0; p < plane; ++p) {
                                const double dy = out->grad[base + p];
                                const double xh = (x->data[base + p] - mu[ci]) * invstd[ci];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xh;
                            }
                        }
                        if (gamma->requires_grad) {
                            gamma->ensure_grad();
                            gamma->grad[ci] += sum_dy_xhat;
                        }
                        if (beta->requires_grad) {
                            beta->ensure_grad();
                            beta->grad[ci] += sum_dy;
                        }
                        if (x->requires_grad) {
                            x->ensure_grad();
                            const double g = gamma->data[ci];
                            for (int i = 0; i < n; ++i) {
                                const std::size_t base = (static_cast<std::size_t>(i) * c + ci) * plane;
                                for (std::size_t p = 0; p < plane; ++p) {
                                    const double dy = out->grad[base + p];
                                    const double xh = (x->data[base + p] - mu[ci]) * invstd[ci];
                                    x->grad[base + p] +=
                                        g * invstd[ci] *
                                        (dy - inv_count * (sum_dy + xh * sum_dy_xhat));
                                }
                            }
                        }
                    }
                });
            } else {
                tape->record(out, [x, out, gamma, beta, mu, invstd, n, c, plane] {
                    if (!out->has_grad()) return;
                    for (int ci = 0; ci < c; ++ci) {
                        double sum_dy = 0.0, sum_dy_xhat = 0.0;
                        for (int i = 0; i < n; ++i) {
                            const std::size_t base = (static_cast<std::size_t>(i) * c + ci) * plane;
                            for (std::size_t p = 0; p < plane; ++p) {
                                const double dy = out->grad[base + p];
                                sum_dy += dy;
                                sum_dy_xhat += dy * (x->data[base + p] - mu[ci]) * invstd[ci];
                            }
                        }
                        if (gamma->requires_grad) {
                            gamma->ensure_grad();
                            gamma->grad[ci] += sum_dy_xhat;
                        }
                        if (beta->requires_grad) {
                            beta->ensure_grad();
                            beta->grad[ci] += sum_dy;
                        }
                        if (x->requires_grad) {
                            x->ensure_grad();
                            const double scale = gamma->data[ci] * invstd[ci];
                            for (int i = 0; i < n; ++i) {
                                const std::size_t base = (static_cast<std::size_t>(i) * c + ci) * plane;
                                for (std::size_t p = 0; p < plane; ++p)
                                    x->grad[base + p] += scale * out->grad[base + p];
                            }
                        }
                    }
                });
            }
        }
        return out;
    }

private:
    TensorPtr gamma_, beta_, running_mean_, running_var_;
    double eps_ = 1e-5;
    double momentum_ = 0.1;
};

} // namespace ca3net

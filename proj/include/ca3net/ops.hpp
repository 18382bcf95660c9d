#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "ca3net/errors.hpp"
#include "ca3net/gemm.hpp"
#include "ca3net/tape.hpp"
#include "ca3net/tensor.hpp"

namespace ca3net {

namespace detail {

inline bool recording(GradTape* tape, std::initializer_list<TensorPtr> inputs) {
    if (!tape) return false;
    for (const auto& t : inputs)
        if (t && t->requires_grad) return true;
    return false;
}

// im2col for one CHW image: cols is [C*kh*kw, OH*OW].
inline void im2col(const double* x, int c_in, int h_in, int w_in, int kh, int kw, int stride,
                   int pad, int oh, int ow, double* cols) {
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int c = 0; c < c_in; ++c) {
        const double* xc = x + static_cast<std::size_t>(c) * h_in * w_in;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* row = cols + (static_cast<std::size_t>(c) * kh * kw + ki * kw + kj) * plane;
                for (int oi = 0; oi < oh; ++oi) {
                    int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= h_in) {
                        std::fill(row + static_cast<std::size_t>(oi) * ow,
                                  row + static_cast<std::size_t>(oi + 1) * ow, 0.0);
                        continue;
                    }
                    for (int oj = 0; oj < ow; ++oj) {
                        int jj = oj * stride - pad + kj;
                        row[static_cast<std::size_t>(oi) * ow + oj] =
                            (jj >= 0 && jj < w_in) ? xc[static_cast<std::size_t>(ii) * w_in + jj] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* cols, int c_in, int h_in, int w_in, int kh, int kw, int stride,
                       int pad, int oh, int ow, double* dx) {
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int c = 0; c < c_in; ++c) {
        double* xc = dx + static_cast<std::size_t>(c) * h_in * w_in;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* row = cols + (static_cast<std::size_t>(c) * kh * kw + ki * kw + kj) * plane;
                for (int oi = 0; oi < oh; ++oi) {
                    int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= h_in) continue;
                    for (int oj = 0; oj < ow; ++oj) {
                        int jj = oj * stride - pad + kj;
                        if (jj >= 0 && jj < w_in)
                            xc[static_cast<std::size_t>(ii) * w_in + jj] +=
                                row[static_cast<std::size_t>(oi) * ow + oj];
                    }
                }
            }
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline TensorPtr add(GradTape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (!same_shape(*a, *b))
        throw ShapeError("add: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (detail::recording(tape, {a, b})) {
        out->requires_grad = true;
        tape->record(out, [a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr sub(GradTape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (!same_shape(*a, *b))
        throw ShapeError("sub: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (detail::recording(tape, {a, b})) {
        out->requires_grad = true;
        tape->record(out, [a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] -= out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr scale(GradTape* tape, const TensorPtr& a, double s) {
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * s;
    if (detail::recording(tape, {a})) {
        out->requires_grad = true;
        tape->record(out, [a, out, s] {
            if (!out->has_grad() || !a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += s * out->grad[i];
        });
    }
    return out;
}

inline TensorPtr mul(GradTape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (!same_shape(*a, *b))
        throw ShapeError("mul: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (detail::recording(tape, {a, b})) {
        out->requires_grad = true;
        tape->record(out, [a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += b->data[i] * out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += a->data[i] * out->grad[i];
            }
        });
    }
    return out;
}

/// Elementwise product. Either both operands share a shape, or `b` is a
/// spatial map broadcast across the channel axis of `a`:
/// a [C,H,W] * b [H,W], or a [N,C,H,W] * b [N,H,W].
inline TensorPtr elementwise_mul(GradTape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (same_shape(*a, *b)) return mul(tape, a, b);
    const bool batched = a->ndim() == 4 && b->ndim() == 3;
    const bool single = a->ndim() == 3 && b->ndim() == 2;
    if (!batched && !single)
        throw ShapeError("elementwise_mul: cannot broadcast " + shape_str(b->shape) + " over " +
                         shape_str(a->shape) + " (only channel-axis broadcast is supported)");
    int n = batched ? a->dim(0) : 1;
    int c = batched ? a->dim(1) : a->dim(0);
    int h = batched ? a->dim(2) : a->dim(1);
    int w = batched ? a->dim(3) : a->dim(2);
    int bh = batched ? b->dim(1) : b->dim(0);
    int bw = batched ? b->dim(2) : b->dim(1);
    if ((batched && b->dim(0) != n) || bh != h || bw != w)
        throw ShapeError("elementwise_mul: map shape " + shape_str(b->shape) +
                         " does not match spatial axes of " + shape_str(a->shape));
    auto out = make_tensor(a->shape);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int ni = 0; ni < n; ++ni) {
        const double* map = b->data.data() + static_cast<std::size_t>(ni) * plane;
        for (int ci = 0; ci < c; ++ci) {
            std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (std::size_t p = 0; p < plane; ++p) out->data[base + p] = a->data[base + p] * map[p];
        }
    }
    if (detail::recording(tape, {a, b})) {
        out->requires_grad = true;
        tape->record(out, [a, b, out, n, c, plane] {
            if (!out->has_grad()) return;
            for (int ni = 0; ni < n; ++ni) {
                const double* map = b->data.data() + static_cast<std::size_t>(ni) * plane;
                for (int ci = 0; ci < c; ++ci) {
                    std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
                    if (a->requires_grad) {
                        a->ensure_grad();
                        for (std::size_t p = 0; p < plane; ++p)
                            a->grad[base + p] += map[p] * out->grad[base + p];
                    }
                    if (b->requires_grad) {
                        b->ensure_grad();
                        double* dmap = b->grad.data() + static_cast<std::size_t>(ni) * plane;
                        for (std::size_t p = 0; p < plane; ++p)
                            dmap[p] += a->data[base + p] * out->grad[base + p];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

enum class Pointwise { relu, tanh_fn, sigmoid };

inline TensorPtr pointwise(GradTape* tape, const TensorPtr& x, Pointwise kind) {
    auto out = make_tensor(x->shape);
    switch (kind) {
        case Pointwise::relu:
            for (std::size_t i = 0; i < x->size(); ++i)
                out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
            break;
        case Pointwise::tanh_fn:
            for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = std::tanh(x->data[i]);
            break;
        case Pointwise::sigmoid:
            for (std::size_t i = 0; i < x->size(); ++i) {
                double v = x->data[i];
                out->data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                        : std::exp(v) / (1.0 + std::exp(v));
            }
            break;
    }
    if (detail::recording(tape, {x})) {
        out->requires_grad = true;
        tape->record(out, [x, out, kind] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            switch (kind) {
                case Pointwise::relu:
                    for (std::size_t i = 0; i < x->size(); ++i)
                        if (x->data[i] > 0.0) x->grad[i] += out->grad[i];
                    break;
                case Pointwise::tanh_fn:
                    for (std::size_t i = 0; i < x->size(); ++i)
                        x->grad[i] += (1.0 - out->data[i] * out->data[i]) * out->grad[i];
                    break;
                case Pointwise::sigmoid:
                    for (std::size_t i = 0; i < x->size(); ++i)
                        x->grad[i] += out->data[i] * (1.0 - out->data[i]) * out->grad[i];
                    break;
            }
        });
    }
    return out;
}

inline TensorPtr relu(GradTape* tape, const TensorPtr& x) { return pointwise(tape, x, Pointwise::relu); }
inline TensorPtr tanh_op(GradTape* tape, const TensorPtr& x) { return pointwise(tape, x, Pointwise::tanh_fn); }
inline TensorPtr sigmoid(GradTape* tape, const TensorPtr& x) { return pointwise(tape, x, Pointwise::sigmoid); }

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline TensorPtr reshape(GradTape* tape, const TensorPtr& x, Shape new_shape) {
    if (shape_numel(new_shape) != x->size())
        throw ShapeError("reshape: " + shape_str(x->shape) + " has " + std::to_string(x->size()) +
                         " elements, target " + shape_str(new_shape));
    auto out = make_tensor(std::move(new_shape), x->data);
    if (detail::recording(tape, {x})) {
        out->requires_grad = true;
        tape->record(out, [x, out] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

inline TensorPtr flatten(GradTape* tape, const TensorPtr& x) {
    return reshape(tape, x, Shape{static_cast<int>(x->size())});
}

inline TensorPtr concat(GradTape* tape, const std::vector<TensorPtr>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no tensors given");
    const Shape& ref = parts.front()->shape;
    if (axis < 0 || axis >= static_cast<int>(ref.size()))
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
    int total_axis = 0;
    for (const auto& p : parts) {
        if (p->ndim() != static_cast<int>(ref.size()))
            throw ShapeError("concat: rank mismatch " + shape_str(p->shape) + " vs " + shape_str(ref));
        for (int d = 0; d < p->ndim(); ++d)
            if (d != axis && p->shape[d] != ref[d])
                throw ShapeError("concat: extent mismatch on axis " + std::to_string(d) + ": " +
                                 shape_str(p->shape) + " vs " + shape_str(ref));
        total_axis += p->shape[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total_axis;
    auto out = make_tensor(out_shape);

    std::size_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(ref[d]);
    std::size_t inner = 1;
    for (int d = axis + 1; d < static_cast<int>(ref.size()); ++d) inner *= static_cast<std::size_t>(ref[d]);

    std::size_t axis_offset = 0;
    for (const auto& p : parts) {
        std::size_t block = static_cast<std::size_t>(p->shape[axis]) * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out->data.data() + (o * static_cast<std::size_t>(total_axis) + axis_offset) * inner,
                        p->data.data() + o * block, block * sizeof(double));
        axis_offset += static_cast<std::size_t>(p->shape[axis]);
    }

    bool rec = false;
    if (tape)
        for (const auto& p : parts)
            if (p->requires_grad) rec = true;
    if (rec) {
        out->requires_grad = true;
        tape->record(out, [parts, out, axis, outer, inner, total_axis] {
            if (!out->has_grad()) return;
            std::size_t axis_offset = 0;
            for (const auto& p : parts) {
                std::size_t block = static_cast<std::size_t>(p->shape[axis]) * inner;
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src =
                            out->grad.data() +
                            (o * static_cast<std::size_t>(total_axis) + axis_offset) * inner;
                        double* dst = p->grad.data() + o * block;
                        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                }
                axis_offset += static_cast<std::size_t>(p->shape[axis]);
            }
        });
    }
    return out;
}

inline TensorPtr slice(GradTape* tape, const TensorPtr& x, int axis, int start, int len) {
    if (axis < 0 || axis >= x->ndim())
        throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(x->shape));
    if (len <= 0 || start < 0 || start + len > x->shape[axis])
        throw RangeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") invalid on axis " + std::to_string(axis) + " of " + shape_str(x->shape));
    Shape out_shape = x->shape;
    out_shape[axis] = len;
    auto out = make_tensor(out_shape);
    std::size_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(x->shape[d]);
    std::size_t inner = 1;
    for (int d = axis + 1; d < x->ndim(); ++d) inner *= static_cast<std::size_t>(x->shape[d]);
    const std::size_t src_axis = static_cast<std::size_t>(x->shape[axis]);
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out->data.data() + o * static_cast<std::size_t>(len) * inner,
                    x->data.data() + (o * src_axis + static_cast<std::size_t>(start)) * inner,
                    static_cast<std::size_t>(len) * inner * sizeof(double));
    if (detail::recording(tape, {x})) {
        out->requires_grad = true;
        tape->record(out, [x, out, outer, inner, src_axis, start, len] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = out->grad.data() + o * static_cast<std::size_t>(len) * inner;
                double* dst =
                    x->grad.data() + (o * src_axis + static_cast<std::size_t>(start)) * inner;
                for (std::size_t i = 0; i < static_cast<std::size_t>(len) * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

/// Select one index along an axis, dropping that axis.
inline TensorPtr select(GradTape* tape, const TensorPtr& x, int axis, int index) {
    auto s = slice(tape, x, axis, index, 1);
    Shape out_shape;
    for (int d = 0; d < x->ndim(); ++d)
        if (d != axis) out_shape.push_back(x->shape[d]);
    if (out_shape.empty()) out_shape.push_back(1);
    return reshape(tape, s, out_shape);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline TensorPtr sum(GradTape* tape, const TensorPtr& x) {
    double s = 0.0;
    for (double v : x->data) s += v;
    auto out = make_scalar(s);
    if (detail::recording(tape, {x})) {
        out->requires_grad = true;
        tape->record(out, [x, out] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[0];
        });
    }
    return out;
}

inline TensorPtr mean(GradTape* tape, const TensorPtr& x) {
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x->size()));
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

/// a [m,k] x b [k,n] -> [m,n], or a [m,k] x b [k] -> [m].
inline TensorPtr matmul(GradTape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->ndim() != 2) throw ShapeError("matmul: left operand must be 2-d, got " + shape_str(a->shape));
    const bool vec = b->ndim() == 1;
    if (!vec && b->ndim() != 2)
        throw ShapeError("matmul: right operand must be 1-d or 2-d, got " + shape_str(b->shape));
    const int m = a->dim(0), k = a->dim(1);
    const int n = vec ? 1 : b->dim(1);
    const int bk = b->dim(0);
    if (bk != k)
        throw ShapeError("matmul: inner axis mismatch, left axis 1 is " + std::to_string(k) +
                         " but right axis 0 is " + std::to_string(bk));
    auto out = make_tensor(vec ? Shape{m} : Shape{m, n});
    detail::gemm(false, false, m, n, k, 1.0, a->data.data(), k, b->data.data(), n, 0.0,
                 out->data.data(), n);
    if (detail::recording(tape, {a, b})) {
        out->requires_grad = true;
        tape->record(out, [a, b, out, m, n, k] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                detail::gemm(false, true, m, k, n, 1.0, out->grad.data(), n, b->data.data(), n, 1.0,
                             a->grad.data(), k);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                detail::gemm(true, false, k, n, m, 1.0, a->data.data(), k, out->grad.data(), n, 1.0,
                             b->grad.data(), n);
            }
        });
    }
    return out;
}

/// Fully connected map. x [in] -> [out], or x [s,in] -> [s,out].
/// w is [out,in]; bias (optional) is [out].
inline TensorPtr linear(GradTape* tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    if (w->ndim() != 2) throw ShapeError("linear: weight must be 2-d, got " + shape_str(w->shape));
    const int out_dim = w->dim(0), in_dim = w->dim(1);
    const bool batched = x->ndim() == 2;
    if (!batched && x->ndim() != 1)
        throw ShapeError("linear: input must be 1-d or 2-d, got " + shape_str(x->shape));
    const int s = batched ? x->dim(0) : 1;
    const int xin = batched ? x->dim(1) : x->dim(0);
    if (xin != in_dim)
        throw ShapeError("linear: input feature axis is " + std::to_string(xin) +
                         " but weight expects " + std::to_string(in_dim));
    if (b && b->size() != static_cast<std::size_t>(out_dim))
        throw ShapeError("linear: bias length " + std::to_string(b->size()) + " != out dim " +
                         std::to_string(out_dim));
    auto out = make_tensor(batched ? Shape{s, out_dim} : Shape{out_dim});
    // y = x * w^T
    detail::gemm(false, true, s, out_dim, in_dim, 1.0, x->data.data(), in_dim, w->data.data(),
                 in_dim, 0.0, out->data.data(), out_dim);
    if (b)
        for (int i = 0; i < s; ++i)
            for (int j = 0; j < out_dim; ++j)
                out->data[static_cast<std::size_t>(i) * out_dim + j] += b->data[j];
    if (detail::recording(tape, {x, w, b})) {
        out->requires_grad = true;
        tape->record(out, [x, w, b, out, s, out_dim, in_dim] {
            if (!out->has_grad()) return;
            if (x->requires_grad) {
                x->ensure_grad();
                detail::gemm(false, false, s, in_dim, out_dim, 1.0, out->grad.data(), out_dim,
                             w->data.data(), in_dim, 1.0, x->grad.data(), in_dim);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                detail::gemm(true, false, out_dim, in_dim, s, 1.0, out->grad.data(), out_dim,
                             x->data.data(), in_dim, 1.0, w->grad.data(), in_dim);
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < s; ++i)
                    for (int j = 0; j < out_dim; ++j)
                        b->grad[j] += out->grad[static_cast<std::size_t>(i) * out_dim + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

/// 2-d convolution, im2col + matrix product. x is [C,H,W] or [N,C,H,W];
/// w is [O,C,kh,kw]. Output spatial extent: floor((in + 2*pad - k)/stride)+1.
inline TensorPtr conv2d(GradTape* tape, const TensorPtr& x, const TensorPtr& w, int stride = 1,
                        int pad = 0) {
    if (w->ndim() != 4)
        throw ShapeError("conv2d: weight must be [out,in,kh,kw], got " + shape_str(w->shape));
    const bool batched = x->ndim() == 4;
    if (!batched && x->ndim() != 3)
        throw ShapeError("conv2d: input must be [C,H,W] or [N,C,H,W], got " + shape_str(x->shape));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
    const int n = batched ? x->dim(0) : 1;
    const int c_in = batched ? x->dim(1) : x->dim(0);
    const int h_in = batched ? x->dim(2) : x->dim(1);
    const int w_in = batched ? x->dim(3) : x->dim(2);
    const int c_out = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    if (w->dim(1) != c_in)
        throw ShapeError("conv2d: input channel axis is " + std::to_string(c_in) +
                         " but weight axis 1 expects " + std::to_string(w->dim(1)));
    const int oh = (h_in + 2 * pad - kh) / stride + 1;
    const int ow = (w_in + 2 * pad - kw) / stride + 1;
    if (h_in + 2 * pad < kh || w_in + 2 * pad < kw)
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + std::to_string(h_in + 2 * pad) + "x" +
                         std::to_string(w_in + 2 * pad));
    const int ckk = c_in * kh * kw;
    const std::size_t plane_in = static_cast<std::size_t>(c_in) * h_in * w_in;
    const std::size_t plane_out = static_cast<std::size_t>(c_out) * oh * ow;

    auto out = make_tensor(batched ? Shape{n, c_out, oh, ow} : Shape{c_out, oh, ow});
    std::vector<double> cols(static_cast<std::size_t>(ckk) * oh * ow);
    for (int i = 0; i < n; ++i) {
        detail::im2col(x->data.data() + static_cast<std::size_t>(i) * plane_in, c_in, h_in, w_in, kh,
                       kw, stride, pad, oh, ow, cols.data());
        detail::gemm(false, false, c_out, oh * ow, ckk, 1.0, w->data.data(), ckk, cols.data(),
                     oh * ow, 0.0, out->data.data() + static_cast<std::size_t>(i) * plane_out,
                     oh * ow);
    }
    if (detail::recording(tape, {x, w})) {
        out->requires_grad = true;
        tape->record(out, [x, w, out, n, c_in, h_in, w_in, c_out, kh, kw, stride, pad, oh, ow, ckk,
                      plane_in, plane_out] {
            if (!out->has_grad()) return;
            std::vector<double> cols(static_cast<std::size_t>(ckk) * oh * ow);
            std::vector<double> dcols;
            if (x->requires_grad) {
                dcols.resize(cols.size());
                x->ensure_grad();
            }
            if (w->requires_grad) w->ensure_grad();
            for (int i = 0; i < n; ++i) {
                const double* dy = out->grad.data() + static_cast<std::size_t>(i) * plane_out;
                if (w->requires_grad) {
                    detail::im2col(x->data.data() + static_cast<std::size_t>(i) * plane_in, c_in,
                                   h_in, w_in, kh, kw, stride, pad, oh, ow, cols.data());
                    detail::gemm(false, true, c_out, ckk, oh * ow, 1.0, dy, oh * ow, cols.data(),
                                 oh * ow, 1.0, w->grad.data(), ckk);
                }
                if (x->requires_grad) {
                    detail::gemm(true, false, ckk, oh * ow, c_out, 1.0, w->data.data(), ckk, dy,
                                 oh * ow, 0.0, dcols.data(), oh * ow);
                    detail::col2im_add(dcols.data(), c_in, h_in, w_in, kh, kw, stride, pad, oh, ow,
                                       x->grad.data() + static_cast<std::size_t>(i) * plane_in);
                }
            }
        });
    }
    return out;
}

/// Add a per-channel bias to [C,H,W] or [N,C,H,W].
inline TensorPtr add_channel_bias(GradTape* tape, const TensorPtr& x, const TensorPtr& b) {
    const bool batched = x->ndim() == 4;
    if (!batched && x->ndim() != 3)
        throw ShapeError("add_channel_bias: input must be 3-d or 4-d, got " + shape_str(x->shape));
    const int n = batched ? x->dim(0) : 1;
    const int c = batched ? x->dim(1) : x->dim(0);
    const std::size_t plane = x->size() / (static_cast<std::size_t>(n) * c);
    if (b->size() != static_cast<std::size_t>(c))
        throw ShapeError("add_channel_bias: bias length " + std::to_string(b->size()) +
                         " != channel axis " + std::to_string(c));
    auto out = make_tensor(x->shape);
    for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < c; ++ci) {
            std::size_t base = (static_cast<std::size_t>(i) * c + ci) * plane;
            for (std::size_t p = 0; p < plane; ++p) out->data[base + p] = x->data[base + p] + b->data[ci];
        }
    if (detail::recording(tape, {x, b})) {
        out->requires_grad = true;
        tape->record(out, [x, b, out, n, c, plane] {
            if (!out->has_grad()) return;
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int ci = 0; ci < c; ++ci) {
                        std::size_t base = (static_cast<std::size_t>(i) * c + ci) * plane;
                        double s = 0.0;
                        for (std::size_t p = 0; p < plane; ++p) s += out->grad[base + p];
                        b->grad[ci] += s;
                    }
            }
        });
    }
    return out;
}

/// Per-channel arithmetic mean over a rectangular region.
/// x [C,H,W] -> [C], or x [N,C,H,W] -> [N,C]. Ranges are half-open.
inline TensorPtr avg_pool_region(GradTape* tape, const TensorPtr& x, int r0, int r1, int c0, int c1) {
    const bool batched = x->ndim() == 4;
    if (!batched && x->ndim() != 3)
        throw ShapeError("avg_pool_region: input must be 3-d or 4-d, got " + shape_str(x->shape));
    const int n = batched ? x->dim(0) : 1;
    const int c = batched ? x->dim(1) : x->dim(0);
    const int h = batched ? x->dim(2) : x->dim(1);
    const int w = batched ? x->dim(3) : x->dim(2);
    if (r0 < 0 || c0 < 0 || r1 > h || c1 > w || r0 >= r1 || c0 >= c1)
        throw RangeError("avg_pool_region: region rows [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") cols [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") empty or outside " + std::to_string(h) + "x" +
                         std::to_string(w));
    const double inv = 1.0 / (static_cast<double>(r1 - r0) * (c1 - c0));
    auto out = make_tensor(batched ? Shape{n, c} : Shape{c});
    for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < c; ++ci) {
            const double* src =
                x->data.data() + ((static_cast<std::size_t>(i) * c + ci) * h) * static_cast<std::size_t>(w);
            double s = 0.0;
            for (int r = r0; r < r1; ++r)
                for (int cc = c0; cc < c1; ++cc) s += src[static_cast<std::size_t>(r) * w + cc];
            out->data[static_cast<std::size_t>(i) * c + ci] = s * inv;
        }
    if (detail::recording(tape, {x})) {
        out->requires_grad = true;
        tape->record(out, [x, out, n, c, h, w, r0, r1, c0, c1, inv] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int ci = 0; ci < c; ++ci) {
                    double g = out->grad[static_cast<std::size_t>(i) * c + ci] * inv;
                    double* dst = x->grad.data() +
                                  ((static_cast<std::size_t>(i) * c + ci) * h) * static_cast<std::size_t>(w);
                    for (int r = r0; r < r1; ++r)
                        for (int cc = c0; cc < c1; ++cc) dst[static_cast<std::size_t>(r) * w + cc] += g;
                }
        });
    }
    return out;
}

/// Mean-pool equal stripes of a feature tensor. x [N,C,H,W] -> [N,C,parts].
/// Horizontal stripes split the row axis; vertical stripes split the column
/// axis. Each output column vector averages all positions of its stripe.
inline TensorPtr pool_stripes(GradTape* tape, const TensorPtr& x, int parts, bool horizontal) {
    if (x->ndim() != 4)
        throw ShapeError("pool_stripes: input must be [N,C,H,W], got " + shape_str(x->shape));
    const int n = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    const int extent = horizontal ? h : w;
    if (parts < 1 || extent % parts != 0)
        throw ConfigError("pool_stripes: axis extent " + std::to_string(extent) +
                          " not divisible into " + std::to_string(parts) + " equal stripes");
    const int band = extent / parts;
    const double inv = 1.0 / (static_cast<double>(band) * (horizontal ? w : h));
    auto out = make_tensor(Shape{n, c, parts});
    for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < c; ++ci) {
            const double* src =
                x->data.data() + ((static_cast<std::size_t>(i) * c + ci) * h) * static_cast<std::size_t>(w);
            for (int p = 0; p < parts; ++p) {
                double s = 0.0;
                if (horizontal) {
                    for (int r = p * band; r < (p + 1) * band; ++r)
                        for (int cc = 0; cc < w; ++cc) s += src[static_cast<std::size_t>(r) * w + cc];
                } else {
                    for (int r = 0; r < h; ++r)
                        for (int cc = p * band; cc < (p + 1) * band; ++cc)
                            s += src[static_cast<std::size_t>(r) * w + cc];
                }
                out->data[(static_cast<std::size_t>(i) * c + ci) * parts + p] = s * inv;
            }
        }
    if (detail::recording(tape, {x})) {
        out->requires_grad = true;
        tape->record(out, [x, out, n, c, h, w, parts, band, horizontal, inv] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int ci = 0; ci < c; ++ci) {
                    double* dst = x->grad.data() +
                                  ((static_cast<std::size_t>(i) * c + ci) * h) * static_cast<std::size_t>(w);
                    for (int p = 0; p < parts; ++p) {
                        double g = out->grad[(static_cast<std::size_t>(i) * c + ci) * parts + p] * inv;
                        if (horizontal) {
                            for (int r = p * band; r < (p + 1) * band; ++r)
                                for (int cc = 0; cc < w; ++cc) dst[static_cast<std::size_t>(r) * w + cc] += g;
                        } else {
                            for (int r = 0; r < h; ++r)
                                for (int cc = p * band; cc < (p + 1) * band; ++cc)
                                    dst[static_cast<std::size_t>(r) * w + cc] += g;
                        }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Numerically stabilized softmax over a 1-d tensor.
inline TensorPtr softmax_vec(GradTape* tape, const TensorPtr& x) {
    if (x->ndim() != 1) throw ShapeError("softmax_vec: input must be 1-d, got " + shape_str(x->shape));
    auto out = make_tensor(x->shape);
    double m = x->data[0];
    for (double v : x->data) m = std::max(m, v);
    double z = 0.0;
    for (std::size_t i = 0; i < x->size(); ++i) {
        out->data[i] = std::exp(x->data[i] - m);
        z += out->data[i];
    }
    const double invz = 1.0 / z;
    for (auto& v : out->data) v *= invz;
    if (detail::recording(tape, {x})) {
        out->requires_grad = true;
        tape->record(out, [x, out] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            double dot = 0.0;
            for (std::size_t i = 0; i < x->size(); ++i) dot += out->grad[i] * out->data[i];
            for (std::size_t i = 0; i < x->size(); ++i)
                x->grad[i] += out->data[i] * (out->grad[i] - dot);
        });
    }
    return out;
}

namespace detail {
inline double cross_entropy_row(const double* logits, int k, int label, double* probs_out) {
    double m = logits[0];
    for (int i = 1; i < k; ++i) m = std::max(m, logits[i]);
    double z = 0.0;
    for (int i = 0; i < k; ++i) z += std::exp(logits[i] - m);
    if (probs_out)
        for (int i = 0; i < k; ++i) probs_out[i] = std::exp(logits[i] - m) / z;
    return std::log(z) - (logits[label] - m);
}
} // namespace detail

/// -log softmax probability of the true class; max-subtraction stabilized.
inline TensorPtr softmax_cross_entropy(GradTape* tape, const TensorPtr& logits, int label) {
    if (logits->ndim() != 1)
        throw ShapeError("softmax_cross_entropy: logits must be 1-d, got " + shape_str(logits->shape));
    const int k = logits->dim(0);
    if (label < 0 || label >= k)
        throw LabelError("softmax_cross_entropy: label " + std::to_string(label) +
                         " outside [0, " + std::to_string(k) + ")");
    auto out = make_scalar(detail::cross_entropy_row(logits->data.data(), k, label, nullptr));
    if (detail::recording(tape, {logits})) {
        out->requires_grad = true;
        tape->record(out, [logits, out, k, label] {
            if (!out->has_grad() || !logits->requires_grad) return;
            logits->ensure_grad();
            std::vector<double> p(static_cast<std::size_t>(k));
            detail::cross_entropy_row(logits->data.data(), k, label, p.data());
            const double g = out->grad[0];
            for (int i = 0; i < k; ++i) logits->grad[i] += (p[i] - (i == label ? 1.0 : 0.0)) * g;
        });
    }
    return out;
}

/// Batch-averaged cross-entropy: logits [S,K], one label per row.
inline TensorPtr softmax_cross_entropy_batch(GradTape* tape, const TensorPtr& logits,
                                             const std::vector<int>& labels) {
    if (logits->ndim() != 2)
        throw ShapeError("softmax_cross_entropy_batch: logits must be [S,K], got " +
                         shape_str(logits->shape));
    const int s = logits->dim(0), k = logits->dim(1);
    if (static_cast<int>(labels.size()) != s)
        throw LabelError("softmax_cross_entropy_batch: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(s));
    double total = 0.0;
    for (int i = 0; i < s; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            throw LabelError("softmax_cross_entropy_batch: label " + std::to_string(labels[i]) +
                             " outside [0, " + std::to_string(k) + ") at row " + std::to_string(i));
        total += detail::cross_entropy_row(logits->data.data() + static_cast<std::size_t>(i) * k, k,
                                           labels[i], nullptr);
    }
    auto out = make_scalar(total / s);
    if (detail::recording(tape, {logits})) {
        out->requires_grad = true;
        tape->record(out, [logits, out, labels, s, k] {
            if (!out->has_grad() || !logits->requires_grad) return;
            logits->ensure_grad();
            std::vector<double> p(static_cast<std::size_t>(k));
            const double g = out->grad[0] / s;
            for (int i = 0; i < s; ++i) {
                detail::cross_entropy_row(logits->data.data() + static_cast<std::size_t>(i) * k, k,
                                          labels[i], p.data());
                for (int j = 0; j < k; ++j)
                    logits->grad[static_cast<std::size_t>(i) * k + j] +=
                        (p[j] - (j == labels[i] ? 1.0 : 0.0)) * g;
            }
        });
    }
    return out;
}

} // namespace ca3net

#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ca3net/errors.hpp"

namespace ca3net {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("tensor extents must be positive, got " + std::to_string(d));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major tensor of doubles with an optional same-shape gradient
/// buffer. The gradient is allocated lazily by ensure_grad(); ops accumulate
/// into it during backward replay.
class Tensor {
public:
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until ensure_grad()
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    bool is_scalar() const { return data.size() == 1; }
    double item() const {
        if (!is_scalar()) throw UsageError("item() on non-scalar tensor " + shape_str(shape));
        return data[0];
    }

    double& at2(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at2(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double& at3(int c, int h, int w) {
        return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
    }
    double at3(int c, int h, int w) const {
        return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
    }
    double& at4(int n, int c, int h, int w) {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * static_cast<std::size_t>(shape[2]) + h) *
                        static_cast<std::size_t>(shape[3]) +
                    w];
    }
    double at4(int n, int c, int h, int w) const {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * static_cast<std::size_t>(shape[2]) + h) *
                        static_cast<std::size_t>(shape[3]) +
                    w];
    }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }
    bool has_grad() const { return !grad.empty(); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape s, double fill = 0.0, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>(std::move(s), fill);
    t->requires_grad = requires_grad;
    return t;
}

inline TensorPtr make_tensor(Shape s, std::vector<double> values, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>(std::move(s), std::move(values));
    t->requires_grad = requires_grad;
    return t;
}

inline TensorPtr make_scalar(double v, bool requires_grad = false) {
    return make_tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

} // namespace ca3net

#pragma once

// Independent reference implementations used only by tests. These stay
// deliberately naive (direct loops, no shared code with the library paths
// they check).

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "ca3net/tensor.hpp"

namespace oracle {

// Direct quadruple-loop convolution over [C,H,W] with [O,C,kh,kw] weights.
inline ca3net::TensorPtr naive_conv2d(const ca3net::TensorPtr& x, const ca3net::TensorPtr& w,
                                      int stride, int pad) {
    const int c_in = x->dim(0), h_in = x->dim(1), w_in = x->dim(2);
    const int c_out = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    const int oh = (h_in + 2 * pad - kh) / stride + 1;
    const int ow = (w_in + 2 * pad - kw) / stride + 1;
    auto out = ca3net::make_tensor({c_out, oh, ow});
    for (int o = 0; o < c_out; ++o)
        for (int oi = 0; oi < oh; ++oi)
            for (int oj = 0; oj < ow; ++oj) {
                double acc = 0.0;
                for (int c = 0; c < c_in; ++c)
                    for (int ki = 0; ki < kh; ++ki)
                        for (int kj = 0; kj < kw; ++kj) {
                            int ii = oi * stride - pad + ki;
                            int jj = oj * stride - pad + kj;
                            if (ii < 0 || ii >= h_in || jj < 0 || jj >= w_in) continue;
                            acc += x->at3(c, ii, jj) *
                                   w->data[((static_cast<std::size_t>(o) * c_in + c) * kh + ki) * kw + kj];
                        }
                out->at3(o, oi, oj) = acc;
            }
    return out;
}

// Cross-entropy by direct formula in extended precision.
inline double direct_cross_entropy(const std::vector<double>& logits, int label) {
    long double z = 0.0L;
    for (double v : logits) z += expl(static_cast<long double>(v));
    long double p = expl(static_cast<long double>(logits[static_cast<std::size_t>(label)])) / z;
    return static_cast<double>(-logl(p));
}

// Relative error with a unit floor, so near-zero gradients are compared
// absolutely.
inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// Central finite differences against already-populated analytic gradients.
// `loss_fn` must run a fresh forward pass using the current parameter values.
// Returns the worst relative error across all checked entries.
inline double max_grad_rel_err(const std::vector<ca3net::TensorPtr>& params,
                               const std::function<double()>& loss_fn, double step = 1e-5,
                               std::size_t max_per_tensor = static_cast<std::size_t>(-1)) {
    double worst = 0.0;
    for (const auto& t : params) {
        const std::size_t n = t->size();
        const std::size_t stride = n > max_per_tensor ? (n + max_per_tensor - 1) / max_per_tensor : 1;
        for (std::size_t i = 0; i < n; i += stride) {
            const double saved = t->data[i];
            t->data[i] = saved + step;
            const double lp = loss_fn();
            t->data[i] = saved - step;
            const double lm = loss_fn();
            t->data[i] = saved;
            const double numeric = (lp - lm) / (2.0 * step);
            const double analytic = t->has_grad() ? t->grad[i] : 0.0;
            worst = std::max(worst, rel_err(analytic, numeric));
        }
    }
    return worst;
}

// Retrieval metrics by brute force: for every query row of `dist`, scan the
// whole gallery, count better-or-equal entries to derive ranks, and average
// precision by walking the sorted list.
struct RetrievalRef {
    std::vector<double> cmc; // indexed by k-1
    double map = 0.0;
};

inline RetrievalRef brute_force_retrieval(const std::vector<std::vector<double>>& dist,
                                          const std::vector<int>& query_ids,
                                          const std::vector<int>& gallery_ids) {
    const std::size_t nq = dist.size(), ng = gallery_ids.size();
    RetrievalRef ref;
    ref.cmc.assign(ng, 0.0);
    double ap_sum = 0.0;
    for (std::size_t q = 0; q < nq; ++q) {
        std::vector<std::size_t> order(ng);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (dist[q][a] != dist[q][b]) return dist[q][a] < dist[q][b];
            return a < b;
        });
        std::size_t first_hit = ng;
        std::size_t hits = 0;
        double ap = 0.0;
        for (std::size_t r = 0; r < ng; ++r) {
            if (gallery_ids[order[r]] == query_ids[q]) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(r + 1);
                if (first_hit == ng) first_hit = r;
            }
        }
        if (hits > 0) ap /= static_cast<double>(hits);
        ap_sum += ap;
        for (std::size_t k = first_hit; k < ng; ++k) ref.cmc[k] += 1.0;
    }
    for (auto& v : ref.cmc) v /= static_cast<double>(nq);
    ref.map = ap_sum / static_cast<double>(nq);
    return ref;
}

} // namespace oracle

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode autodiff over dense double tensors. Design constraints:
//  - 64-bit floats everywhere; accumulation order is fixed, so identical
//    inputs give bit-identical outputs and gradients run to run.
//  - Ops are coarse (whole-matrix), so graphs stay small even for batched
//    encoder forwards.
//  - Gradients accumulate across backward() calls until zeroed; leaves with
//    requires_grad=false never receive gradient storage.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "twostage/errors.hpp"

namespace twostage {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Thread-local autodiff switch. Evaluation passes run with it off so no graph
// is built and no gradient flows.
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    // Graph links; empty for leaves. backward reads this->grad and
    // accumulates into parents' grad.
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backprop;

    std::size_t size() const { return values.size(); }
    bool is_scalar() const { return values.size() == 1; }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

    double item() const {
        if (!is_scalar()) throw dimension_error("item: tensor is not scalar");
        return values[0];
    }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }
};

inline std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline TensorPtr make_tensor(std::vector<std::size_t> shape) {
    auto t = std::make_shared<Tensor>();
    t->values.assign(shape_size(shape), 0.0);
    t->shape = std::move(shape);
    return t;
}

inline TensorPtr make_tensor(std::vector<double> values, std::vector<std::size_t> shape) {
    if (values.size() != shape_size(shape))
        throw dimension_error("make_tensor: value count does not match shape");
    auto t = std::make_shared<Tensor>();
    t->values = std::move(values);
    t->shape = std::move(shape);
    return t;
}

inline TensorPtr make_scalar(double v) { return make_tensor({v}, {std::size_t(1)}); }

inline TensorPtr make_param(std::vector<double> values, std::vector<std::size_t> shape) {
    auto t = make_tensor(std::move(values), std::move(shape));
    t->requires_grad = true;
    return t;
}

// ===== graph plumbing =====

namespace detail {

inline bool track(const std::initializer_list<TensorPtr>& parents) {
    if (!grad_enabled()) return false;
    for (const auto& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

inline void attach(TensorPtr& out, std::initializer_list<TensorPtr> parents,
                   std::function<void(Tensor&)> fn) {
    out->requires_grad = true;
    out->parents.assign(parents.begin(), parents.end());
    out->backprop = std::move(fn);
}

inline void accumulate(Tensor* p, const std::vector<double>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
}

}  // namespace detail

// Runs reverse-mode accumulation from a scalar root. Interior nodes get
// transient grad storage; leaf gradients persist on the leaves. Topological
// order comes from an iterative post-order DFS, so evaluation order is a pure
// function of graph structure.
inline void backward(const TensorPtr& root) {
    if (!root) throw argument_error("backward: null root");
    if (!root->is_scalar()) throw dimension_error("backward: root must be scalar");
    if (!root->requires_grad) throw state_error("backward: root does not require grad");

    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (node->backprop) {
            node->ensure_grad();
            node->backprop(*node);
        }
    }
}

// ===== elementwise and linear ops =====

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) throw dimension_error("add: shape mismatch");
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] + b->values[i];
    if (detail::track({a, b})) {
        Tensor* pa = a.get();
        Tensor* pb = b.get();
        detail::attach(out, {a, b}, [pa, pb](Tensor& self) {
            detail::accumulate(pa, self.grad);
            detail::accumulate(pb, self.grad);
        });
    }
    return out;
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) throw dimension_error("sub: shape mismatch");
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] - b->values[i];
    if (detail::track({a, b})) {
        Tensor* pa = a.get();
        Tensor* pb = b.get();
        detail::attach(out, {a, b}, [pa, pb](Tensor& self) {
            detail::accumulate(pa, self.grad);
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) throw dimension_error("mul: shape mismatch");
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] * b->values[i];
    if (detail::track({a, b})) {
        Tensor* pa = a.get();
        Tensor* pb = b.get();
        detail::attach(out, {a, b}, [pa, pb](Tensor& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pa->grad[i] += self.grad[i] * pb->values[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pb->grad[i] += self.grad[i] * pa->values[i];
            }
        });
    }
    return out;
}

inline TensorPtr scale(const TensorPtr& a, double c) {
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] * c;
    if (detail::track({a})) {
        Tensor* pa = a.get();
        detail::attach(out, {a}, [pa, c](Tensor& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
        });
    }
    return out;
}

// out = m * s with s a trainable 1-element tensor (temperature-style scaling).
inline TensorPtr mul_scalar(const TensorPtr& m, const TensorPtr& s) {
    if (!s->is_scalar()) throw dimension_error("mul_scalar: scale must be 1-element");
    auto out = make_tensor(m->shape);
    const double sv = s->values[0];
    for (std::size_t i = 0; i < m->size(); ++i) out->values[i] = m->values[i] * sv;
    if (detail::track({m, s})) {
        Tensor* pm = m.get();
        Tensor* ps = s.get();
        detail::attach(out, {m, s}, [pm, ps, sv](Tensor& self) {
            if (pm->requires_grad) {
                pm->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pm->grad[i] += self.grad[i] * sv;
            }
            if (ps->requires_grad) {
                ps->ensure_grad();
                double acc = 0.0;
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    acc += self.grad[i] * pm->values[i];
                ps->grad[0] += acc;
            }
        });
    }
    return out;
}

inline TensorPtr expv(const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = std::exp(a->values[i]);
    if (detail::track({a})) {
        Tensor* pa = a.get();
        std::vector<double> y = out->values;
        detail::attach(out, {a}, [pa, y = std::move(y)](Tensor& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * y[i];
        });
    }
    return out;
}

// Exact GELU, erf form.
inline TensorPtr gelu(const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < a->size(); ++i) {
        const double x = a->values[i];
        out->values[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    if (detail::track({a})) {
        Tensor* pa = a.get();
        detail::attach(out, {a}, [pa](Tensor& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double x = pa->values[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                pa->grad[i] += self.grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2) throw dimension_error("matmul: operands must be rank-2");
    if (a->shape[1] != b->shape[0]) throw dimension_error("matmul: inner dimensions differ");
    const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_tensor({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a->values.data() + i * k;
        double* orow = out->values.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b->values.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (detail::track({a, b})) {
        Tensor* pa = a.get();
        Tensor* pb = b.get();
        detail::attach(out, {a, b}, [pa, pb, m, k, n](Tensor& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                // dA += dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = self.grad.data() + i * n;
                        const double* brow = pb->values.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        pa->grad[i * k + p] += acc;
                    }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                // dB += A^T * dC
                for (std::size_t i = 0; i < m; ++i) {
                    const double* arow = pa->values.data() + i * k;
                    const double* grow = self.grad.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        double* brow = pb->grad.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

// C = A * B^T; A is [m x k], B is [n x k], C is [m x n].
inline TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2)
        throw dimension_error("matmul_nt: operands must be rank-2");
    if (a->shape[1] != b->shape[1]) throw dimension_error("matmul_nt: inner dimensions differ");
    const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[0];
    auto out = make_tensor({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a->values.data() + i * k;
        double* orow = out->values.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b->values.data() + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            orow[j] = acc;
        }
    }
    if (detail::track({a, b})) {
        Tensor* pa = a.get();
        Tensor* pb = b.get();
        detail::attach(out, {a, b}, [pa, pb, m, k, n](Tensor& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                // dA += dC * B
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = self.grad.data() + i * n;
                    double* arow = pa->grad.data() + i * k;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = grow[j];
                        const double* brow = pb->values.data() + j * k;
                        for (std::size_t p = 0; p < k; ++p) arow[p] += gv * brow[p];
                    }
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                // dB += dC^T * A
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = self.grad.data() + i * n;
                    const double* arow = pa->values.data() + i * k;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = grow[j];
                        double* brow = pb->grad.data() + j * k;
                        for (std::size_t p = 0; p < k; ++p) brow[p] += gv * arow[p];
                    }
                }
            }
        });
    }
    return out;
}

inline TensorPtr transpose(const TensorPtr& a) {
    if (a->rank() != 2) throw dimension_error("transpose: operand must be rank-2");
    const std::size_t m = a->shape[0], n = a->shape[1];
    auto out = make_tensor({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->values[j * m + i] = a->values[i * n + j];
    if (detail::track({a})) {
        Tensor* pa = a.get();
        detail::attach(out, {a}, [pa, m, n](Tensor& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    pa->grad[i * n + j] += self.grad[j * m + i];
        });
    }
    return out;
}

// Adds a row vector v to every row of m.
inline TensorPtr add_rowvec(const TensorPtr& m, const TensorPtr& v) {
    if (m->rank() != 2 || v->rank() != 1) throw dimension_error("add_rowvec: want matrix + vector");
    if (m->shape[1] != v->shape[0]) throw dimension_error("add_rowvec: width mismatch");
    const std::size_t r = m->shape[0], c = m->shape[1];
    auto out = make_tensor({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out->values[i * c + j] = m->values[i * c + j] + v->values[j];
    if (detail::track({m, v})) {
        Tensor* pm = m.get();
        Tensor* pv = v.get();
        detail::attach(out, {m, v}, [pm, pv, r, c](Tensor& self) {
            detail::accumulate(pm, self.grad);
            if (pv->requires_grad) {
                pv->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) pv->grad[j] += self.grad[i * c + j];
            }
        });
    }
    return out;
}

// Same element count, new shape; used to view a 1-row matrix as a vector.
inline TensorPtr reshape(const TensorPtr& a, std::vector<std::size_t> shape) {
    if (shape_size(shape) != a->size()) throw dimension_error("reshape: element count mismatch");
    auto out = make_tensor(a->values, std::move(shape));
    if (detail::track({a})) {
        Tensor* pa = a.get();
        detail::attach(out, {a}, [pa](Tensor& self) { detail::accumulate(pa, self.grad); });
    }
    return out;
}

// Gathers rows of a [V x d] table by index; backward scatter-adds.
inline TensorPtr gather_rows(const TensorPtr& table, const std::vector<std::size_t>& ids) {
    if (table->rank() != 2) throw dimension_error("gather_rows: table must be rank-2");
    const std::size_t v = table->shape[0], d = table->shape[1];
    for (std::size_t id : ids)
        if (id >= v) throw argument_error("gather_rows: index out of range");
    auto out = make_tensor({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table->values.data() + ids[i] * d, d, out->values.data() + i * d);
    if (detail::track({table})) {
        Tensor* pt = table.get();
        std::vector<std::size_t> idc = ids;
        detail::attach(out, {table}, [pt, d, idc = std::move(idc)](Tensor& self) {
            if (!pt->requires_grad) return;
            pt->ensure_grad();
            for (std::size_t i = 0; i < idc.size(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    pt->grad[idc[i] * d + j] += self.grad[i * d + j];
        });
    }
    return out;
}

// Stacks pieces vertically. Vectors count as single rows; all widths must agree.
inline TensorPtr concat_rows(const std::vector<TensorPtr>& pieces) {
    if (pieces.empty()) throw argument_error("concat_rows: no pieces");
    const std::size_t d = pieces[0]->cols();
    std::size_t total = 0;
    for (const auto& p : pieces) {
        if (p->rank() > 2) throw dimension_error("concat_rows: rank > 2");
        if (p->cols() != d) throw dimension_error("concat_rows: width mismatch");
        total += p->rows();
    }
    auto out = make_tensor({total, d});
    std::size_t row = 0;
    for (const auto& p : pieces) {
        std::copy(p->values.begin(), p->values.end(), out->values.data() + row * d);
        row += p->rows();
    }
    bool need = false;
    if (grad_enabled())
        for (const auto& p : pieces)
            if (p->requires_grad) need = true;
    if (need) {
        out->requires_grad = true;
        out->parents = pieces;
        out->backprop = [d](Tensor& self) {
            std::size_t row = 0;
            for (auto& p : self.parents) {
                const std::size_t r = p->rows();
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < r * d; ++i)
                        p->grad[i] += self.grad[row * d + i];
                }
                row += r;
            }
        };
    }
    return out;
}

// ===== normalization, softmax, reductions =====

// Row-wise layer normalization with population variance (divide by d) and eps
// added under the square root. gamma/beta have length d. eps >= 0 here; model
// parameter structs enforce strict positivity.
inline TensorPtr layer_norm_rows(const TensorPtr& a, const TensorPtr& gamma,
                                 const TensorPtr& beta, double eps) {
    if (a->rank() > 2) throw dimension_error("layer_norm_rows: rank > 2");
    if (eps < 0.0) throw domain_error("layer_norm_rows: eps must be nonnegative");
    const std::size_t r = a->rows(), d = a->cols();
    if (d == 0) throw dimension_error("layer_norm_rows: empty rows");
    if (gamma->size() != d || beta->size() != d)
        throw dimension_error("layer_norm_rows: gamma/beta width mismatch");
    auto out = make_tensor(a->shape);
    std::vector<double> inv_std(r), norm(r * d);
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = a->values.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x[j];
        mean /= double(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x[j] - mean;
            var += c * c;
        }
        var /= double(d);
        const double denom = std::sqrt(var + eps);
        if (denom == 0.0) throw domain_error("layer_norm_rows: zero variance with eps=0");
        const double inv = 1.0 / denom;
        inv_std[i] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const double y = (x[j] - mean) * inv;
            norm[i * d + j] = y;
            out->values[i * d + j] = gamma->values[j] * y + beta->values[j];
        }
    }
    if (detail::track({a, gamma, beta})) {
        Tensor* pa = a.get();
        Tensor* pg = gamma.get();
        Tensor* pb = beta.get();
        detail::attach(out, {a, gamma, beta},
                       [pa, pg, pb, r, d, inv_std = std::move(inv_std),
                        norm = std::move(norm)](Tensor& self) {
            for (std::size_t i = 0; i < r; ++i) {
                const double* g = self.grad.data() + i * d;
                const double* y = norm.data() + i * d;
                if (pg->requires_grad) {
                    pg->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) pg->grad[j] += g[j] * y[j];
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) pb->grad[j] += g[j];
                }
                if (pa->requires_grad) {
                    pa->ensure_grad();
                    double sum_gy = 0.0, sum_gyy = 0.0;
                    std::vector<double> gy(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        gy[j] = g[j] * pg->values[j];
                        sum_gy += gy[j];
                        sum_gyy += gy[j] * y[j];
                    }
                    const double inv = inv_std[i];
                    const double mg = sum_gy / double(d);
                    const double mgy = sum_gyy / double(d);
                    for (std::size_t j = 0; j < d; ++j)
                        pa->grad[i * d + j] += inv * (gy[j] - mg - y[j] * mgy);
                }
            }
        });
    }
    return out;
}

inline TensorPtr row_softmax(const TensorPtr& a) {
    if (a->rank() > 2) throw dimension_error("row_softmax: rank > 2");
    const std::size_t r = a->rows(), d = a->cols();
    if (d == 0) throw domain_error("row_softmax: empty rows");
    auto out = make_tensor(a->shape);
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = a->values.data() + i * d;
        double* y = out->values.data() + i * d;
        double mx = x[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < d; ++j) y[j] /= z;
    }
    if (detail::track({a})) {
        Tensor* pa = a.get();
        std::vector<double> p = out->values;
        detail::attach(out, {a}, [pa, r, d, p = std::move(p)](Tensor& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const double* g = self.grad.data() + i * d;
                const double* pi = p.data() + i * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += g[j] * pi[j];
                for (std::size_t j = 0; j < d; ++j)
                    pa->grad[i * d + j] += pi[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// Means of consecutive row blocks: [n x d] with block size t -> [n/t x d].
inline TensorPtr block_mean(const TensorPtr& a, std::size_t t) {
    if (a->rank() != 2) throw dimension_error("block_mean: operand must be rank-2");
    if (t == 0 || a->shape[0] % t != 0)
        throw dimension_error("block_mean: rows not divisible by block size");
    const std::size_t nb = a->shape[0] / t, d = a->shape[1];
    auto out = make_tensor({nb, d});
    for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < d; ++j)
                out->values[b * d + j] += a->values[(b * t + i) * d + j];
    for (double& v : out->values) v /= double(t);
    if (detail::track({a})) {
        Tensor* pa = a.get();
        detail::attach(out, {a}, [pa, nb, t, d](Tensor& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            const double inv = 1.0 / double(t);
            for (std::size_t b = 0; b < nb; ++b)
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        pa->grad[(b * t + i) * d + j] += self.grad[b * d + j] * inv;
        });
    }
    return out;
}

// Single-head scaled dot-product attention applied independently to each
// consecutive t-row block of q/k/v (a batch of t-token sequences packed into
// one matrix). Scores use 1/sqrt(d).
inline TensorPtr block_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                                 std::size_t t) {
    if (q->rank() != 2 || k->rank() != 2 || v->rank() != 2)
        throw dimension_error("block_attention: operands must be rank-2");
    if (q->shape != k->shape || q->shape != v->shape)
        throw dimension_error("block_attention: q/k/v shape mismatch");
    if (t == 0 || q->shape[0] % t != 0)
        throw dimension_error("block_attention: rows not divisible by block size");
    const std::size_t nb = q->shape[0] / t, d = q->shape[1];
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
    auto out = make_tensor(q->shape);
    std::vector<double> probs(nb * t * t);
    for (std::size_t b = 0; b < nb; ++b) {
        const double* qb = q->values.data() + b * t * d;
        const double* kb = k->values.data() + b * t * d;
        const double* vb = v->values.data() + b * t * d;
        double* pb = probs.data() + b * t * t;
        for (std::size_t i = 0; i < t; ++i) {
            double* prow = pb + i * t;
            double mx = -1e300;
            for (std::size_t j = 0; j < t; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < d; ++c) s += qb[i * d + c] * kb[j * d + c];
                prow[j] = s * inv_sqrt_d;
                mx = std::max(mx, prow[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < t; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                z += prow[j];
            }
            double* orow = out->values.data() + (b * t + i) * d;
            for (std::size_t j = 0; j < t; ++j) {
                prow[j] /= z;
                for (std::size_t c = 0; c < d; ++c) orow[c] += prow[j] * vb[j * d + c];
            }
        }
    }
    if (detail::track({q, k, v})) {
        Tensor* pq = q.get();
        Tensor* pk = k.get();
        Tensor* pv = v.get();
        detail::attach(out, {q, k, v},
                       [pq, pk, pv, nb, t, d, inv_sqrt_d, probs = std::move(probs)](Tensor& self) {
            std::vector<double> dp(t * t), ds(t * t);
            for (std::size_t b = 0; b < nb; ++b) {
                const double* go = self.grad.data() + b * t * d;
                const double* pb = probs.data() + b * t * t;
                const double* vb = pv->values.data() + b * t * d;
                // dP = dO * V^T
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < t; ++j) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < d; ++c)
                            acc += go[i * d + c] * vb[j * d + c];
                        dp[i * t + j] = acc;
                    }
                // dS = P o (dP - rowsum(dP o P)), scaled by 1/sqrt(d)
                for (std::size_t i = 0; i < t; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < t; ++j)
                        dot += dp[i * t + j] * pb[i * t + j];
                    for (std::size_t j = 0; j < t; ++j)
                        ds[i * t + j] = pb[i * t + j] * (dp[i * t + j] - dot) * inv_sqrt_d;
                }
                if (pv->requires_grad) {
                    pv->ensure_grad();
                    double* dv = pv->grad.data() + b * t * d;
                    for (std::size_t j = 0; j < t; ++j)
                        for (std::size_t i = 0; i < t; ++i) {
                            const double pij = pb[i * t + j];
                            for (std::size_t c = 0; c < d; ++c)
                                dv[j * d + c] += pij * go[i * d + c];
                        }
                }
                if (pq->requires_grad) {
                    pq->ensure_grad();
                    double* dq = pq->grad.data() + b * t * d;
                    const double* kb = pk->values.data() + b * t * d;
                    for (std::size_t i = 0; i < t; ++i)
                        for (std::size_t j = 0; j < t; ++j) {
                            const double s = ds[i * t + j];
                            for (std::size_t c = 0; c < d; ++c)
                                dq[i * d + c] += s * kb[j * d + c];
                        }
                }
                if (pk->requires_grad) {
                    pk->ensure_grad();
                    double* dk = pk->grad.data() + b * t * d;
                    const double* qb = pq->values.data() + b * t * d;
                    for (std::size_t i = 0; i < t; ++i)
                        for (std::size_t j = 0; j < t; ++j) {
                            const double s = ds[i * t + j];
                            for (std::size_t c = 0; c < d; ++c)
                                dk[j * d + c] += s * qb[i * d + c];
                        }
                }
            }
        });
    }
    return out;
}

// Rows scaled to unit L2 norm. Zero rows are rejected.
inline TensorPtr l2_normalize_rows(const TensorPtr& a) {
    if (a->rank() > 2) throw dimension_error("l2_normalize_rows: rank > 2");
    const std::size_t r = a->rows(), d = a->cols();
    auto out = make_tensor(a->shape);
    std::vector<double> inv_norm(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = a->values.data() + i * d;
        double n2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) n2 += x[j] * x[j];
        if (n2 == 0.0) throw domain_error("l2_normalize_rows: zero-norm row");
        const double inv = 1.0 / std::sqrt(n2);
        inv_norm[i] = inv;
        for (std::size_t j = 0; j < d; ++j) out->values[i * d + j] = x[j] * inv;
    }
    if (detail::track({a})) {
        Tensor* pa = a.get();
        std::vector<double> y = out->values;
        detail::attach(out, {a},
                       [pa, r, d, inv_norm = std::move(inv_norm), y = std::move(y)](Tensor& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const double* g = self.grad.data() + i * d;
                const double* yi = y.data() + i * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += g[j] * yi[j];
                for (std::size_t j = 0; j < d; ++j)
                    pa->grad[i * d + j] += inv_norm[i] * (g[j] - dot * yi[j]);
            }
        });
    }
    return out;
}

inline TensorPtr dot(const TensorPtr& u, const TensorPtr& v) {
    if (u->shape != v->shape) throw dimension_error("dot: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < u->size(); ++i) acc += u->values[i] * v->values[i];
    auto out = make_scalar(acc);
    if (detail::track({u, v})) {
        Tensor* pu = u.get();
        Tensor* pv = v.get();
        detail::attach(out, {u, v}, [pu, pv](Tensor& self) {
            const double g = self.grad[0];
            if (pu->requires_grad) {
                pu->ensure_grad();
                for (std::size_t i = 0; i < pu->values.size(); ++i)
                    pu->grad[i] += g * pv->values[i];
            }
            if (pv->requires_grad) {
                pv->ensure_grad();
                for (std::size_t i = 0; i < pv->values.size(); ++i)
                    pv->grad[i] += g * pu->values[i];
            }
        });
    }
    return out;
}

// cos(u, v) for vectors; undefined (domain error) when either norm is zero.
inline TensorPtr cosine_similarity(const TensorPtr& u, const TensorPtr& v) {
    if (u->shape != v->shape) throw dimension_error("cosine_similarity: shape mismatch");
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t i = 0; i < u->size(); ++i) {
        uu += u->values[i] * u->values[i];
        vv += v->values[i] * v->values[i];
        uv += u->values[i] * v->values[i];
    }
    if (uu == 0.0 || vv == 0.0) throw domain_error("cosine_similarity: zero-norm operand");
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    const double c = uv / (nu * nv);
    auto out = make_scalar(c);
    if (detail::track({u, v})) {
        Tensor* pu = u.get();
        Tensor* pv = v.get();
        detail::attach(out, {u, v}, [pu, pv, c, nu, nv, uu, vv](Tensor& self) {
            const double g = self.grad[0];
            if (pu->requires_grad) {
                pu->ensure_grad();
                for (std::size_t i = 0; i < pu->values.size(); ++i)
                    pu->grad[i] += g * (pv->values[i] / (nu * nv) - c * pu->values[i] / uu);
            }
            if (pv->requires_grad) {
                pv->ensure_grad();
                for (std::size_t i = 0; i < pv->values.size(); ++i)
                    pv->grad[i] += g * (pu->values[i] / (nu * nv) - c * pv->values[i] / vv);
            }
        });
    }
    return out;
}

// Cross-entropy of one logit vector against an integer target, computed as
// logsumexp(x) - x[target] with max subtraction.
inline TensorPtr softmax_cross_entropy(const TensorPtr& logits, std::size_t target) {
    if (logits->rank() != 1) throw dimension_error("softmax_cross_entropy: logits must be rank-1");
    const std::size_t k = logits->shape[0];
    if (k == 0) throw domain_error("softmax_cross_entropy: empty logits");
    if (target >= k) throw argument_error("softmax_cross_entropy: target out of range");
    const double* x = logits->values.data();
    double mx = x[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    auto out = make_scalar(lse - x[target]);
    if (detail::track({logits})) {
        Tensor* pl = logits.get();
        std::vector<double> p(k);
        for (std::size_t j = 0; j < k; ++j) p[j] = std::exp(x[j] - mx) / z;
        detail::attach(out, {logits}, [pl, k, target, p = std::move(p)](Tensor& self) {
            if (!pl->requires_grad) return;
            pl->ensure_grad();
            const double g = self.grad[0];
            for (std::size_t j = 0; j < k; ++j)
                pl->grad[j] += g * (p[j] - (j == target ? 1.0 : 0.0));
        });
    }
    return out;
}

// Mean cross-entropy over rows of a [B x K] logit matrix.
inline TensorPtr cross_entropy_mean(const TensorPtr& logits,
                                    const std::vector<std::size_t>& targets) {
    if (logits->rank() != 2) throw dimension_error("cross_entropy_mean: logits must be rank-2");
    const std::size_t b = logits->shape[0], k = logits->shape[1];
    if (b == 0 || k == 0) throw domain_error("cross_entropy_mean: empty logits");
    if (targets.size() != b) throw dimension_error("cross_entropy_mean: target count mismatch");
    for (std::size_t t : targets)
        if (t >= k) throw argument_error("cross_entropy_mean: target out of range");
    std::vector<double> probs(b * k);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* x = logits->values.data() + i * k;
        double* p = probs.data() + i * k;
        double mx = x[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p[j] = std::exp(x[j] - mx);
            z += p[j];
        }
        loss += mx + std::log(z) - x[targets[i]];
        for (std::size_t j = 0; j < k; ++j) p[j] /= z;
    }
    auto out = make_scalar(loss / double(b));
    if (detail::track({logits})) {
        Tensor* pl = logits.get();
        std::vector<std::size_t> tg = targets;
        detail::attach(out, {logits},
                       [pl, b, k, tg = std::move(tg), probs = std::move(probs)](Tensor& self) {
            if (!pl->requires_grad) return;
            pl->ensure_grad();
            const double g = self.grad[0] / double(b);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < k; ++j)
                    pl->grad[i * k + j] +=
                        g * (probs[i * k + j] - (j == tg[i] ? 1.0 : 0.0));
        });
    }
    return out;
}

inline TensorPtr sum_all(const TensorPtr& a) {
    double acc = 0.0;
    for (double v : a->values) acc += v;
    auto out = make_scalar(acc);
    if (detail::track({a})) {
        Tensor* pa = a.get();
        detail::attach(out, {a}, [pa](Tensor& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            for (double& g : pa->grad) g += self.grad[0];
        });
    }
    return out;
}

inline TensorPtr mean_all(const TensorPtr& a) {
    if (a->size() == 0) throw domain_error("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / double(a->size()));
}

}  // namespace twostage

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "mudok/rng.hpp"

namespace mudok {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

// A node in the reverse-mode tape. Holds row-major values, an optional
// gradient accumulator of the same shape, and the closure that pushes this
// node's gradient into its parents. Graphs are ephemeral: each training step
// rebuilds one from the persistent parameter leaves.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool needs_grad = false;  // requires_grad or downstream of something that does
    std::vector<std::shared_ptr<Tensor<T>>> parents;
    std::function<void(Tensor<T>&)> backward_fn;
    bool backward_done = false;

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        std::fill(grad.begin(), grad.end(), T(0));
        backward_done = false;
    }
};

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.data) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

template <class T>
TensorPtr<T> make_tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    t->needs_grad = requires_grad;
    return t;
}

template <class T>
TensorPtr<T> zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), T(0));
    return make_tensor<T>(std::move(shape), std::move(d), requires_grad);
}

template <class T>
TensorPtr<T> full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), value);
    return make_tensor<T>(std::move(shape), std::move(d), requires_grad);
}

template <class T>
TensorPtr<T> randn(Shape shape, T stddev, RngStream& rng, bool requires_grad = true) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.normal()) * stddev;
    return make_tensor<T>(std::move(shape), std::move(d), requires_grad);
}

namespace detail {

template <class T>
TensorPtr<T> make_op(Shape shape, std::vector<T> data, std::vector<TensorPtr<T>> parents,
                     const char* name) {
    auto t = make_tensor<T>(std::move(shape), std::move(data));
    check_finite(*t, name);
    for (const auto& p : parents)
        if (p->needs_grad) t->needs_grad = true;
    t->parents = std::move(parents);
    return t;
}

// C(MxN) = op(A) * op(B), operands row-major, transposes materialized so the
// inner kernel always streams B rows.
template <class T>
void matmul_raw(const T* a, std::size_t ar, std::size_t ac, bool ta, const T* b, std::size_t br,
                std::size_t bc, bool tb, T* out) {
    const std::size_t m = ta ? ac : ar;
    const std::size_t k = ta ? ar : ac;
    const std::size_t n = tb ? br : bc;

    std::vector<T> at, bt;
    const T* A = a;
    const T* B = b;
    if (ta) {
        at.resize(m * k);
        for (std::size_t i = 0; i < ar; ++i)
            for (std::size_t j = 0; j < ac; ++j) at[j * ar + i] = a[i * ac + j];
        A = at.data();
    }
    if (tb) {
        bt.resize(k * n);
        for (std::size_t i = 0; i < br; ++i)
            for (std::size_t j = 0; j < bc; ++j) bt[j * br + i] = b[i * bc + j];
        B = bt.data();
    }

    std::fill(out, out + m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        T* crow = out + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            if (av == T(0)) continue;
            const T* brow = B + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op suite
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape)
        throw ShapeError("add: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
    auto t = detail::make_op<T>(a->shape, std::move(out), {a, b}, "add");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        Tensor<T>* pb = b.get();
        t->backward_fn = [pa, pb](Tensor<T>& self) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
            }
        };
    }
    return t;
}

template <class T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape)
        throw ShapeError("mul: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
    auto t = detail::make_op<T>(a->shape, std::move(out), {a, b}, "mul");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        Tensor<T>* pb = b.get();
        t->backward_fn = [pa, pb](Tensor<T>& self) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pa->grad[i] += self.grad[i] * pb->data[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pb->grad[i] += self.grad[i] * pa->data[i];
            }
        };
    }
    return t;
}

template <class T>
TensorPtr<T> scale(const TensorPtr<T>& a, T factor) {
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * factor;
    auto t = detail::make_op<T>(a->shape, std::move(out), {a}, "scale");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        t->backward_fn = [pa, factor](Tensor<T>& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * factor;
        };
    }
    return t;
}

// Broadcast-add a length-d vector to every row of a (B x d) matrix.
template <class T>
TensorPtr<T> add_rowvec(const TensorPtr<T>& a, const TensorPtr<T>& v) {
    if (a->rank() != 2 || v->numel() != a->cols())
        throw ShapeError("add_rowvec: " + shape_str(a->shape) + " vs " + shape_str(v->shape));
    const std::size_t r = a->rows(), c = a->cols();
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a->data[i * c + j] + v->data[j];
    auto t = detail::make_op<T>(a->shape, std::move(out), {a, v}, "add_rowvec");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        Tensor<T>* pv = v.get();
        t->backward_fn = [pa, pv, r, c](Tensor<T>& self) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            }
            if (pv->needs_grad) {
                pv->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) pv->grad[j] += self.grad[i * c + j];
            }
        };
    }
    return t;
}

template <class T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b, bool ta = false, bool tb = false) {
    if (a->rank() != 2 || b->rank() != 2)
        throw ShapeError("matmul: operands must be rank 2, got " + shape_str(a->shape) + " and " +
                         shape_str(b->shape));
    const std::size_t m = ta ? a->cols() : a->rows();
    const std::size_t k = ta ? a->rows() : a->cols();
    const std::size_t kb = tb ? b->cols() : b->rows();
    const std::size_t n = tb ? b->rows() : b->cols();
    if (k != kb)
        throw ShapeError("matmul: inner dims disagree, " + shape_str(a->shape) + (ta ? "^T" : "") +
                         " * " + shape_str(b->shape) + (tb ? "^T" : ""));
    std::vector<T> out(m * n);
    detail::matmul_raw(a->data.data(), a->rows(), a->cols(), ta, b->data.data(), b->rows(),
                       b->cols(), tb, out.data());
    auto t = detail::make_op<T>({m, n}, std::move(out), {a, b}, "matmul");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        Tensor<T>* pb = b.get();
        t->backward_fn = [pa, pb, ta, tb, m, k, n](Tensor<T>& self) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                // d(opA) = g * opB^T, then undo the A transpose.
                std::vector<T> da(m * k);
                detail::matmul_raw(self.grad.data(), m, n, false, pb->data.data(), pb->rows(),
                                   pb->cols(), !tb, da.data());
                if (!ta) {
                    for (std::size_t i = 0; i < da.size(); ++i) pa->grad[i] += da[i];
                } else {
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < k; ++j) pa->grad[j * m + i] += da[i * k + j];
                }
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                std::vector<T> db(k * n);
                detail::matmul_raw(pa->data.data(), pa->rows(), pa->cols(), !ta, self.grad.data(),
                                   m, n, false, db.data());
                if (!tb) {
                    for (std::size_t i = 0; i < db.size(); ++i) pb->grad[i] += db[i];
                } else {
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < n; ++j) pb->grad[j * k + i] += db[i * n + j];
                }
            }
        };
    }
    return t;
}

template <class T>
TensorPtr<T> relu(const TensorPtr<T>& a) {
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] > T(0) ? a->data[i] : T(0);
    auto t = detail::make_op<T>(a->shape, std::move(out), {a}, "relu");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        t->backward_fn = [pa](Tensor<T>& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (pa->data[i] > T(0)) pa->grad[i] += self.grad[i];
        };
    }
    return t;
}

template <class T>
TensorPtr<T> softplus(const TensorPtr<T>& a) {
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a->data[i];
        out[i] = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
    }
    auto t = detail::make_op<T>(a->shape, std::move(out), {a}, "softplus");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        t->backward_fn = [pa](Tensor<T>& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const T x = pa->data[i];
                const T sig = T(1) / (T(1) + std::exp(-x));
                pa->grad[i] += self.grad[i] * sig;
            }
        };
    }
    return t;
}

template <class T>
TensorPtr<T> softmax_rows(const TensorPtr<T>& a) {
    if (a->rank() != 2) throw ShapeError("softmax_rows: expected rank 2, got " + shape_str(a->shape));
    const std::size_t r = a->rows(), c = a->cols();
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < r; ++i) {
        const T* x = a->data.data() + i * c;
        T* y = out.data() + i * c;
        T mx = x[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < c; ++j) y[j] /= sum;
    }
    auto t = detail::make_op<T>(a->shape, std::move(out), {a}, "softmax_rows");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        t->backward_fn = [pa, r, c](Tensor<T>& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const T* y = self.data.data() + i * c;
                const T* g = self.grad.data() + i * c;
                T dot = T(0);
                for (std::size_t j = 0; j < c; ++j) dot += y[j] * g[j];
                for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += y[j] * (g[j] - dot);
            }
        };
    }
    return t;
}

// Row-wise layer norm with affine scale/shift over the last dimension.
template <class T>
TensorPtr<T> layer_norm(const TensorPtr<T>& a, const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                        T eps) {
    if (a->rank() != 2 || gamma->numel() != a->cols() || beta->numel() != a->cols())
        throw ShapeError("layer_norm: " + shape_str(a->shape) + " with gamma " +
                         shape_str(gamma->shape) + ", beta " + shape_str(beta->shape));
    const std::size_t r = a->rows(), c = a->cols();
    std::vector<T> out(a->numel());
    auto xhat = std::make_shared<std::vector<T>>(a->numel());
    auto inv_std = std::make_shared<std::vector<T>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        const T* x = a->data.data() + i * c;
        T mean = T(0);
        for (std::size_t j = 0; j < c; ++j) mean += x[j];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (std::size_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const T xh = (x[j] - mean) * is;
            (*xhat)[i * c + j] = xh;
            out[i * c + j] = gamma->data[j] * xh + beta->data[j];
        }
    }
    auto t = detail::make_op<T>(a->shape, std::move(out), {a, gamma, beta}, "layer_norm");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        Tensor<T>* pg = gamma.get();
        Tensor<T>* pb = beta.get();
        t->backward_fn = [pa, pg, pb, xhat, inv_std, r, c](Tensor<T>& self) {
            if (pg->needs_grad) pg->ensure_grad();
            if (pb->needs_grad) pb->ensure_grad();
            if (pa->needs_grad) pa->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const T* g = self.grad.data() + i * c;
                const T* xh = xhat->data() + i * c;
                if (pg->needs_grad)
                    for (std::size_t j = 0; j < c; ++j) pg->grad[j] += g[j] * xh[j];
                if (pb->needs_grad)
                    for (std::size_t j = 0; j < c; ++j) pb->grad[j] += g[j];
                if (pa->needs_grad) {
                    T sum_gg = T(0), sum_gx = T(0);
                    for (std::size_t j = 0; j < c; ++j) {
                        const T gg = g[j] * pg->data[j];
                        sum_gg += gg;
                        sum_gx += gg * xh[j];
                    }
                    const T inv_c = T(1) / static_cast<T>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const T gg = g[j] * pg->data[j];
                        pa->grad[i * c + j] +=
                            (*inv_std)[i] * (gg - inv_c * sum_gg - xh[j] * inv_c * sum_gx);
                    }
                }
            }
        };
    }
    return t;
}

// Inverted dropout. Train mode keeps each element with probability 1-rate and
// rescales by 1/(1-rate); eval mode (or rate 0) is the identity. The mask is a
// pure function of the stream's (seed, counter).
template <class T>
TensorPtr<T> dropout(const TensorPtr<T>& a, T rate, RngStream& rng, bool train) {
    if (rate < T(0) || rate >= T(1)) throw ShapeError("dropout: rate must be in [0,1)");
    if (!train || rate == T(0)) return a;
    const T keep = T(1) - rate;
    const T inv_keep = T(1) / keep;
    auto mask = std::make_shared<std::vector<std::uint8_t>>(a->numel());
    std::vector<T> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool kept = rng.uniform() >= static_cast<double>(rate);
        (*mask)[i] = kept;
        out[i] = kept ? a->data[i] * inv_keep : T(0);
    }
    auto t = detail::make_op<T>(a->shape, std::move(out), {a}, "dropout");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        t->backward_fn = [pa, mask, inv_keep](Tensor<T>& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if ((*mask)[i]) pa->grad[i] += self.grad[i] * inv_keep;
        };
    }
    return t;
}

constexpr std::size_t kPadIndex = static_cast<std::size_t>(-1);

// Gathers rows of a (N x d) table; kPadIndex yields a zero row and receives no
// gradient. Doubles as plain row gather for non-parameter tensors.
template <class T>
TensorPtr<T> embedding_lookup(const TensorPtr<T>& table, const std::vector<std::size_t>& ids) {
    if (table->rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2");
    const std::size_t d = table->cols();
    std::vector<T> out(ids.size() * d, T(0));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == kPadIndex) continue;
        if (ids[i] >= table->rows())
            throw ShapeError("embedding_lookup: index " + std::to_string(ids[i]) +
                             " out of range for table " + shape_str(table->shape));
        const T* src = table->data.data() + ids[i] * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    auto t = detail::make_op<T>({ids.size(), d}, std::move(out), {table}, "embedding_lookup");
    if (t->needs_grad) {
        Tensor<T>* pt = table.get();
        auto ids_copy = std::make_shared<std::vector<std::size_t>>(ids);
        t->backward_fn = [pt, ids_copy, d](Tensor<T>& self) {
            pt->ensure_grad();
            for (std::size_t i = 0; i < ids_copy->size(); ++i) {
                const std::size_t id = (*ids_copy)[i];
                if (id == kPadIndex) continue;
                const T* g = self.grad.data() + i * d;
                T* dst = pt->grad.data() + id * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
    }
    return t;
}

// out = base with rows[j] added at positions[j]; duplicated positions stack.
template <class T>
TensorPtr<T> row_scatter_add(const TensorPtr<T>& base, const TensorPtr<T>& rows,
                             const std::vector<std::size_t>& positions) {
    if (base->rank() != 2 || rows->rank() != 2 || base->cols() != rows->cols())
        throw ShapeError("row_scatter_add: " + shape_str(base->shape) + " vs " +
                         shape_str(rows->shape));
    if (positions.size() != rows->rows())
        throw ShapeError("row_scatter_add: position count does not match row count");
    const std::size_t d = base->cols();
    std::vector<T> out = base->data;
    for (std::size_t j = 0; j < positions.size(); ++j) {
        if (positions[j] >= base->rows()) throw ShapeError("row_scatter_add: position out of range");
        const T* src = rows->data.data() + j * d;
        T* dst = out.data() + positions[j] * d;
        for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
    }
    auto t = detail::make_op<T>(base->shape, std::move(out), {base, rows}, "row_scatter_add");
    if (t->needs_grad) {
        Tensor<T>* pb = base.get();
        Tensor<T>* pr = rows.get();
        auto pos = std::make_shared<std::vector<std::size_t>>(positions);
        t->backward_fn = [pb, pr, pos, d](Tensor<T>& self) {
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
            }
            if (pr->needs_grad) {
                pr->ensure_grad();
                for (std::size_t j = 0; j < pos->size(); ++j) {
                    const T* g = self.grad.data() + (*pos)[j] * d;
                    T* dst = pr->grad.data() + j * d;
                    for (std::size_t k = 0; k < d; ++k) dst[k] += g[k];
                }
            }
        };
    }
    return t;
}

template <class T>
TensorPtr<T> concat_rows(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->rank() != 2 || b->rank() != 2 || a->cols() != b->cols())
        throw ShapeError("concat_rows: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    const std::size_t d = a->cols();
    std::vector<T> out;
    out.reserve(a->numel() + b->numel());
    out.insert(out.end(), a->data.begin(), a->data.end());
    out.insert(out.end(), b->data.begin(), b->data.end());
    auto t = detail::make_op<T>({a->rows() + b->rows(), d}, std::move(out), {a, b}, "concat_rows");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        Tensor<T>* pb = b.get();
        const std::size_t na = a->numel();
        t->backward_fn = [pa, pb, na](Tensor<T>& self) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < na; ++i) pa->grad[i] += self.grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (std::size_t i = na; i < self.grad.size(); ++i) pb->grad[i - na] += self.grad[i];
            }
        };
    }
    return t;
}

template <class T>
TensorPtr<T> sum_all(const TensorPtr<T>& a) {
    T s = T(0);
    for (T v : a->data) s += v;
    auto t = detail::make_op<T>({1}, {s}, {a}, "sum_all");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        t->backward_fn = [pa](Tensor<T>& self) {
            pa->ensure_grad();
            for (auto& g : pa->grad) g += self.grad[0];
        };
    }
    return t;
}

template <class T>
TensorPtr<T> mean_all(const TensorPtr<T>& a) {
    if (a->numel() == 0) throw ShapeError("mean_all: empty tensor");
    return scale(sum_all(a), T(1) / static_cast<T>(a->numel()));
}

// Row-wise dot product of two (B x d) matrices -> length-B vector.
template <class T>
TensorPtr<T> row_dot(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape || a->rank() != 2)
        throw ShapeError("row_dot: shape mismatch " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    const std::size_t r = a->rows(), c = a->cols();
    std::vector<T> out(r, T(0));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += a->data[i * c + j] * b->data[i * c + j];
    auto t = detail::make_op<T>({r}, std::move(out), {a, b}, "row_dot");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        Tensor<T>* pb = b.get();
        t->backward_fn = [pa, pb, r, c](Tensor<T>& self) {
            if (pa->needs_grad) pa->ensure_grad();
            if (pb->needs_grad) pb->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const T g = self.grad[i];
                for (std::size_t j = 0; j < c; ++j) {
                    if (pa->needs_grad) pa->grad[i * c + j] += g * pb->data[i * c + j];
                    if (pb->needs_grad) pb->grad[i * c + j] += g * pa->data[i * c + j];
                }
            }
        };
    }
    return t;
}

// L2-normalizes each row; a zero-norm row is an error (cosine undefined).
template <class T>
TensorPtr<T> l2_normalize_rows(const TensorPtr<T>& a) {
    if (a->rank() != 2) throw ShapeError("l2_normalize_rows: expected rank 2");
    const std::size_t r = a->rows(), c = a->cols();
    std::vector<T> out(a->numel());
    auto inv_norm = std::make_shared<std::vector<T>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        T sq = T(0);
        for (std::size_t j = 0; j < c; ++j) sq += a->data[i * c + j] * a->data[i * c + j];
        const T norm = std::sqrt(sq);
        if (norm == T(0)) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
        (*inv_norm)[i] = T(1) / norm;
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a->data[i * c + j] * (*inv_norm)[i];
    }
    auto t = detail::make_op<T>(a->shape, std::move(out), {a}, "l2_normalize_rows");
    if (t->needs_grad) {
        Tensor<T>* pa = a.get();
        t->backward_fn = [pa, inv_norm, r, c](Tensor<T>& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const T* y = self.data.data() + i * c;
                const T* g = self.grad.data() + i * c;
                T dot = T(0);
                for (std::size_t j = 0; j < c; ++j) dot += y[j] * g[j];
                for (std::size_t j = 0; j < c; ++j)
                    pa->grad[i * c + j] += (*inv_norm)[i] * (g[j] - y[j] * dot);
            }
        };
    }
    return t;
}

// Row-wise cosine similarity between paired rows of a and b.
template <class T>
TensorPtr<T> cosine_similarity(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return row_dot(l2_normalize_rows(a), l2_normalize_rows(b));
}

// Per-row -log softmax(logits)[target]; the building block of every
// cross-entropy style loss here.
template <class T>
TensorPtr<T> cross_entropy_rows(const TensorPtr<T>& logits, const std::vector<std::size_t>& targets) {
    if (logits->rank() != 2) throw ShapeError("cross_entropy_rows: logits must be rank 2");
    const std::size_t r = logits->rows(), c = logits->cols();
    if (targets.size() != r) throw ShapeError("cross_entropy_rows: target count mismatch");
    std::vector<T> out(r);
    auto probs = std::make_shared<std::vector<T>>(logits->numel());
    for (std::size_t i = 0; i < r; ++i) {
        if (targets[i] >= c) throw ShapeError("cross_entropy_rows: target out of range");
        const T* z = logits->data.data() + i * c;
        T mx = z[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            (*probs)[i * c + j] = std::exp(z[j] - mx);
            sum += (*probs)[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= sum;
        out[i] = std::log(sum) + mx - z[targets[i]];
        if (out[i] < T(0)) out[i] = T(0);  // guard against -0 rounding
    }
    auto t = detail::make_op<T>({r}, std::move(out), {logits}, "cross_entropy_rows");
    if (t->needs_grad) {
        Tensor<T>* pl = logits.get();
        auto tg = std::make_shared<std::vector<std::size_t>>(targets);
        t->backward_fn = [pl, tg, probs, r, c](Tensor<T>& self) {
            pl->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const T g = self.grad[i];
                for (std::size_t j = 0; j < c; ++j) {
                    T d = (*probs)[i * c + j];
                    if (j == (*tg)[i]) d -= T(1);
                    pl->grad[i * c + j] += g * d;
                }
            }
        };
    }
    return t;
}

// Fused multi-head scaled dot-product attention over a batch of equal-length
// sequences stored as stacked rows ((batch*seq_len) x d_model). Invalid
// positions are excluded as keys; attention probabilities optionally get
// dropout. Output is the concatenated heads (apply W_o outside).
template <class T>
TensorPtr<T> masked_attention(const TensorPtr<T>& q, const TensorPtr<T>& k, const TensorPtr<T>& v,
                              const std::vector<std::uint8_t>& valid, std::size_t batch,
                              std::size_t seq_len, std::size_t heads, T drop_rate, RngStream* rng,
                              bool train) {
    const std::size_t d = q->cols();
    if (q->shape != k->shape || q->shape != v->shape || q->rank() != 2)
        throw ShapeError("masked_attention: q/k/v shape mismatch");
    if (q->rows() != batch * seq_len) throw ShapeError("masked_attention: rows != batch*seq_len");
    if (d % heads != 0) throw ShapeError("masked_attention: d_model not divisible by heads");
    if (valid.size() != batch * seq_len) throw ShapeError("masked_attention: mask size mismatch");
    const std::size_t dk = d / heads;
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
    const bool use_drop = train && drop_rate > T(0);
    const T inv_keep = use_drop ? T(1) / (T(1) - drop_rate) : T(1);

    // per (seq, head): post-softmax probs and dropout mask, kept for backward
    auto probs = std::make_shared<std::vector<T>>(batch * heads * seq_len * seq_len, T(0));
    auto dmask = std::make_shared<std::vector<std::uint8_t>>(
        use_drop ? batch * heads * seq_len * seq_len : 0);

    std::vector<T> out(q->numel(), T(0));
    std::vector<T> scores(seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::uint8_t* vm = valid.data() + b * seq_len;
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < seq_len; ++i) {
                const T* qrow = q->data.data() + (b * seq_len + i) * d + h * dk;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (!vm[j]) {
                        scores[j] = -std::numeric_limits<T>::infinity();
                        continue;
                    }
                    const T* krow = k->data.data() + (b * seq_len + j) * d + h * dk;
                    T s = T(0);
                    for (std::size_t x = 0; x < dk; ++x) s += qrow[x] * krow[x];
                    scores[j] = s * inv_sqrt_dk;
                    mx = std::max(mx, scores[j]);
                }
                T* arow = probs->data() + ((b * heads + h) * seq_len + i) * seq_len;
                T sum = T(0);
                for (std::size_t j = 0; j < seq_len; ++j) {
                    arow[j] = vm[j] ? std::exp(scores[j] - mx) : T(0);
                    sum += arow[j];
                }
                for (std::size_t j = 0; j < seq_len; ++j) arow[j] /= sum;

                T* orow = out.data() + (b * seq_len + i) * d + h * dk;
                for (std::size_t j = 0; j < seq_len; ++j) {
                    T a = arow[j];
                    if (use_drop) {
                        const bool kept = rng->uniform() >= static_cast<double>(drop_rate);
                        (*dmask)[((b * heads + h) * seq_len + i) * seq_len + j] = kept;
                        a = kept ? a * inv_keep : T(0);
                    }
                    if (a == T(0)) continue;
                    const T* vrow = v->data.data() + (b * seq_len + j) * d + h * dk;
                    for (std::size_t x = 0; x < dk; ++x) orow[x] += a * vrow[x];
                }
            }
        }
    }

    auto t = detail::make_op<T>(q->shape, std::move(out), {q, k, v}, "masked_attention");
    if (t->needs_grad) {
        Tensor<T>* pq = q.get();
        Tensor<T>* pk = k.get();
        Tensor<T>* pv = v.get();
        auto vmask = std::make_shared<std::vector<std::uint8_t>>(valid);
        t->backward_fn = [pq, pk, pv, probs, dmask, vmask, batch, seq_len, heads, dk, d,
                          inv_sqrt_dk, use_drop, inv_keep](Tensor<T>& self) {
            pq->ensure_grad();
            pk->ensure_grad();
            pv->ensure_grad();
            std::vector<T> da(seq_len), ds(seq_len);
            for (std::size_t b = 0; b < batch; ++b) {
                const std::uint8_t* vm = vmask->data() + b * seq_len;
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t i = 0; i < seq_len; ++i) {
                        const T* go = self.grad.data() + (b * seq_len + i) * d + h * dk;
                        const T* arow = probs->data() + ((b * heads + h) * seq_len + i) * seq_len;
                        // dV and d(dropped probs)
                        for (std::size_t j = 0; j < seq_len; ++j) {
                            if (!vm[j]) {
                                da[j] = T(0);
                                continue;
                            }
                            T ad = arow[j];
                            if (use_drop) {
                                const bool kept =
                                    (*dmask)[((b * heads + h) * seq_len + i) * seq_len + j];
                                ad = kept ? ad * inv_keep : T(0);
                            }
                            const T* vrow = pv->data.data() + (b * seq_len + j) * d + h * dk;
                            T dot = T(0);
                            for (std::size_t x = 0; x < dk; ++x) dot += go[x] * vrow[x];
                            if (ad != T(0)) {
                                T* gv = pv->grad.data() + (b * seq_len + j) * d + h * dk;
                                for (std::size_t x = 0; x < dk; ++x) gv[x] += ad * go[x];
                            }
                            // gradient w.r.t. pre-dropout prob
                            T g_prob = dot;
                            if (use_drop) {
                                const bool kept =
                                    (*dmask)[((b * heads + h) * seq_len + i) * seq_len + j];
                                g_prob = kept ? dot * inv_keep : T(0);
                            }
                            da[j] = g_prob;
                        }
                        // softmax backward over valid keys
                        T dsum = T(0);
                        for (std::size_t j = 0; j < seq_len; ++j)
                            if (vm[j]) dsum += da[j] * arow[j];
                        for (std::size_t j = 0; j < seq_len; ++j)
                            ds[j] = vm[j] ? arow[j] * (da[j] - dsum) * inv_sqrt_dk : T(0);
                        // dQ and dK
                        const T* qrow = pq->data.data() + (b * seq_len + i) * d + h * dk;
                        T* gq = pq->grad.data() + (b * seq_len + i) * d + h * dk;
                        for (std::size_t j = 0; j < seq_len; ++j) {
                            if (ds[j] == T(0)) continue;
                            const T* krow = pk->data.data() + (b * seq_len + j) * d + h * dk;
                            T* gk = pk->grad.data() + (b * seq_len + j) * d + h * dk;
                            for (std::size_t x = 0; x < dk; ++x) {
                                gq[x] += ds[j] * krow[x];
                                gk[x] += ds[j] * qrow[x];
                            }
                        }
                    }
                }
            }
        };
    }
    return t;
}

// out[dst] += coef * x[src] over an edge list; the propagation primitive for
// graph backbones. Nodes with no incident edge stay zero.
template <class T>
TensorPtr<T> edge_propagate(const TensorPtr<T>& x, std::size_t out_rows,
                            const std::vector<std::size_t>& dst, const std::vector<std::size_t>& src,
                            const std::vector<T>& coef) {
    if (x->rank() != 2) throw ShapeError("edge_propagate: input must be rank 2");
    if (dst.size() != src.size() || dst.size() != coef.size())
        throw ShapeError("edge_propagate: edge arrays disagree");
    const std::size_t d = x->cols();
    std::vector<T> out(out_rows * d, T(0));
    for (std::size_t e = 0; e < dst.size(); ++e) {
        if (dst[e] >= out_rows || src[e] >= x->rows())
            throw ShapeError("edge_propagate: edge index out of range");
        const T* s = x->data.data() + src[e] * d;
        T* o = out.data() + dst[e] * d;
        for (std::size_t j = 0; j < d; ++j) o[j] += coef[e] * s[j];
    }
    auto t = detail::make_op<T>({out_rows, d}, std::move(out), {x}, "edge_propagate");
    if (t->needs_grad) {
        Tensor<T>* px = x.get();
        auto dd = std::make_shared<std::vector<std::size_t>>(dst);
        auto ss = std::make_shared<std::vector<std::size_t>>(src);
        auto cc = std::make_shared<std::vector<T>>(coef);
        t->backward_fn = [px, dd, ss, cc, d](Tensor<T>& self) {
            px->ensure_grad();
            for (std::size_t e = 0; e < dd->size(); ++e) {
                const T* g = self.grad.data() + (*dd)[e] * d;
                T* dst_g = px->grad.data() + (*ss)[e] * d;
                for (std::size_t j = 0; j < d; ++j) dst_g[j] += (*cc)[e] * g[j];
            }
        };
    }
    return t;
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void topo_collect(Tensor<T>* node, std::unordered_set<Tensor<T>*>& seen,
                  std::vector<Tensor<T>*>& order) {
    std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
    stack.emplace_back(node, 0);
    seen.insert(node);
    while (!stack.empty()) {
        auto& [cur, next_child] = stack.back();
        if (next_child < cur->parents.size()) {
            Tensor<T>* p = cur->parents[next_child++].get();
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(cur);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// tensor on the path with needs_grad set; a second call on the same root
// without zero_grad() is an error.
template <class T>
void backward(const TensorPtr<T>& loss) {
    if (loss->numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!std::isfinite(loss->data[0])) throw NumericError("backward: loss is not finite");
    if (loss->backward_done) throw std::logic_error("backward: called twice without reset");
    loss->backward_done = true;
    if (!loss->needs_grad) return;
    std::unordered_set<Tensor<T>*> seen;
    std::vector<Tensor<T>*> order;
    detail::topo_collect(loss.get(), seen, order);
    loss->ensure_grad();
    loss->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

}  // namespace mudok

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "neuromoco/common.hpp"

namespace neuromoco {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

template <class S>
struct TensorData {
    Shape shape;
    std::vector<S> v;
    std::vector<S> g; // allocated iff requires_grad
    bool requires_grad = false;
};

// Dense row-major tensor. Copying a Tensor copies a handle; the underlying
// buffer is shared. Ops are free functions that record backward closures on
// the thread's active Tape (if any input requires grad).
template <class S>
class Tensor {
public:
    std::shared_ptr<TensorData<S>> d;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData<S>> data) : d(std::move(data)) {}

    static Tensor zeros(Shape shape) {
        auto td = std::make_shared<TensorData<S>>();
        int64_t n = shape_numel(shape);
        td->shape = std::move(shape);
        td->v.assign(static_cast<size_t>(n), S(0));
        return Tensor(std::move(td));
    }

    static Tensor full(Shape shape, S value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.d->v.begin(), t.d->v.end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> values) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("Tensor::from: " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        auto td = std::make_shared<TensorData<S>>();
        td->shape = std::move(shape);
        td->v = std::move(values);
        return Tensor(std::move(td));
    }

    static Tensor scalar(S value) { return full({}, value); }

    bool defined() const { return static_cast<bool>(d); }
    const Shape& shape() const { return d->shape; }
    int64_t rank() const { return static_cast<int64_t>(d->shape.size()); }
    int64_t dim(int64_t i) const { return d->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(d->v.size()); }

    std::vector<S>& values() { return d->v; }
    const std::vector<S>& values() const { return d->v; }
    std::vector<S>& grad() { return d->g; }
    const std::vector<S>& grad() const { return d->g; }

    bool requires_grad() const { return d && d->requires_grad; }

    void set_requires_grad(bool rg) {
        d->requires_grad = rg;
        if (rg && d->g.size() != d->v.size()) d->g.assign(d->v.size(), S(0));
        if (!rg) d->g.clear();
    }

    void zero_grad() {
        if (d->requires_grad) std::fill(d->g.begin(), d->g.end(), S(0));
    }

    S item() const {
        if (numel() != 1) throw ValidationError("item(): tensor is not scalar, shape " + shape_str(shape()));
        return d->v[0];
    }

    Tensor detach() const {
        auto td = std::make_shared<TensorData<S>>();
        td->shape = d->shape;
        td->v = d->v;
        return Tensor(std::move(td));
    }

    Tensor clone() const {
        Tensor t = detach();
        t.set_requires_grad(d->requires_grad);
        return t;
    }
};

// Define-by-run tape: ops append backward closures in execution order, and
// backward() replays them in reverse, which is a valid topological order.
// A tape is consumed by backward; clear() or destruction drops saved state.
template <class S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& current_slot() {
        thread_local Tape* cur = nullptr;
        return cur;
    }
    static Tape* current() { return current_slot(); }

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    size_t num_nodes() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void backward(const Tensor<S>& root) {
        if (root.numel() != 1)
            throw ValidationError("backward: root must be scalar, got " + shape_str(root.shape()));
        backward_seeded(root, {S(1)});
    }

    // Seeds root.grad with `seed` and replays the tape. Used directly by the
    // finite-difference harness to avoid reducing through tensor ops.
    void backward_seeded(const Tensor<S>& root, const std::vector<S>& seed) {
        if (!root.requires_grad())
            throw ValidationError("backward: root does not require grad (no recorded graph)");
        if (static_cast<int64_t>(seed.size()) != root.numel())
            throw ValidationError("backward: seed size mismatch");
        auto& g = root.d->g;
        for (size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
        for (size_t i = nodes_.size(); i-- > 0;) {
            nodes_[i]();
            nodes_[i] = nullptr; // release saved tensors as we go
        }
        nodes_.clear();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

template <class S>
class TapeScope {
public:
    explicit TapeScope(Tape<S>& tape) : prev_(Tape<S>::current_slot()) { Tape<S>::current_slot() = &tape; }
    ~TapeScope() { Tape<S>::current_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<S>* prev_;
};

namespace detail {

template <class S>
bool recording(std::initializer_list<const Tensor<S>*> inputs) {
    if (!Tape<S>::current()) return false;
    for (const Tensor<S>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class S>
void ensure_grad(const std::shared_ptr<TensorData<S>>& td) {
    if (td->requires_grad && td->g.size() != td->v.size()) td->g.assign(td->v.size(), S(0));
}

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using CMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = a.d->v.size();
    for (size_t i = 0; i < n; ++i) out.d->v[i] = a.d->v[i] + b.d->v[i];
    if (detail::recording<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.d, bd = b.d, od = out.d;
        Tape<S>::current()->record([ad, bd, od, n] {
            if (ad->requires_grad)
                for (size_t i = 0; i < n; ++i) ad->g[i] += od->g[i];
            if (bd->requires_grad)
                for (size_t i = 0; i < n; ++i) bd->g[i] += od->g[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = a.d->v.size();
    for (size_t i = 0; i < n; ++i) out.d->v[i] = a.d->v[i] - b.d->v[i];
    if (detail::recording<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.d, bd = b.d, od = out.d;
        Tape<S>::current()->record([ad, bd, od, n] {
            if (ad->requires_grad)
                for (size_t i = 0; i < n; ++i) ad->g[i] += od->g[i];
            if (bd->requires_grad)
                for (size_t i = 0; i < n; ++i) bd->g[i] -= od->g[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> mul_elementwise(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "mul_elementwise");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = a.d->v.size();
    for (size_t i = 0; i < n; ++i) out.d->v[i] = a.d->v[i] * b.d->v[i];
    if (detail::recording<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.d, bd = b.d, od = out.d;
        Tape<S>::current()->record([ad, bd, od, n] {
            if (ad->requires_grad)
                for (size_t i = 0; i < n; ++i) ad->g[i] += od->g[i] * bd->v[i];
            if (bd->requires_grad)
                for (size_t i = 0; i < n; ++i) bd->g[i] += od->g[i] * ad->v[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = a.d->v.size();
    for (size_t i = 0; i < n; ++i) out.d->v[i] = a.d->v[i] * c;
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        auto ad = a.d, od = out.d;
        Tape<S>::current()->record([ad, od, c, n] {
            for (size_t i = 0; i < n; ++i) ad->g[i] += od->g[i] * c;
        });
    }
    return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = a.d->v.size();
    for (size_t i = 0; i < n; ++i) out.d->v[i] = a.d->v[i] + c;
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        auto ad = a.d, od = out.d;
        Tape<S>::current()->record([ad, od, n] {
            for (size_t i = 0; i < n; ++i) ad->g[i] += od->g[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = a.d->v.size();
    for (size_t i = 0; i < n; ++i) out.d->v[i] = a.d->v[i] > S(0) ? a.d->v[i] : S(0);
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        auto ad = a.d, od = out.d;
        Tape<S>::current()->record([ad, od, n] {
            for (size_t i = 0; i < n; ++i)
                if (ad->v[i] > S(0)) ad->g[i] += od->g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// spike nonlinearity with arctan surrogate gradient
// ---------------------------------------------------------------------------

inline constexpr double kSurrogateAlpha = 2.0;

// d/du of the arctan surrogate: a / (2 (1 + (pi a u / 2)^2)); peak a/2 at u=0.
template <class S>
S arctan_surrogate_derivative(S u, S alpha = S(kSurrogateAlpha)) {
    S t = S(M_PI) * alpha * u / S(2);
    return alpha / (S(2) * (S(1) + t * t));
}

template <class S>
Tensor<S> spike(const Tensor<S>& v, S threshold) {
    Tensor<S> out = Tensor<S>::zeros(v.shape());
    const size_t n = v.d->v.size();
    for (size_t i = 0; i < n; ++i) out.d->v[i] = v.d->v[i] - threshold >= S(0) ? S(1) : S(0);
    if (detail::recording<S>({&v})) {
        out.set_requires_grad(true);
        auto vd = v.d, od = out.d;
        Tape<S>::current()->record([vd, od, threshold, n] {
            for (size_t i = 0; i < n; ++i)
                vd->g[i] += od->g[i] * arctan_surrogate_derivative(vd->v[i] - threshold);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    Tensor<S> out = Tensor<S>::from(std::move(new_shape), a.d->v);
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        auto ad = a.d, od = out.d;
        Tape<S>::current()->record([ad, od] {
            for (size_t i = 0; i < ad->g.size(); ++i) ad->g[i] += od->g[i];
        });
    }
    return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

} // namespace detail

template <class S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm) {
    const Shape& sh = a.shape();
    if (perm.size() != sh.size()) throw ShapeError("permute: rank mismatch");
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = sh[static_cast<size_t>(perm[i])];
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    auto in_strides = detail::row_major_strides(sh);
    // stride of input axis perm[i] as seen from the output index
    std::vector<int64_t> gather(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) gather[i] = in_strides[static_cast<size_t>(perm[i])];
    auto out_strides = detail::row_major_strides(out_shape);

    const int64_t n = a.numel();
    const size_t r = perm.size();
    for (int64_t o = 0; o < n; ++o) {
        int64_t rem = o, src = 0;
        for (size_t i = 0; i < r; ++i) {
            int64_t idx = rem / out_strides[i];
            rem -= idx * out_strides[i];
            src += idx * gather[i];
        }
        out.d->v[static_cast<size_t>(o)] = a.d->v[static_cast<size_t>(src)];
    }
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        auto ad = a.d, od = out.d;
        Tape<S>::current()->record([ad, od, out_strides, gather, n, r] {
            for (int64_t o = 0; o < n; ++o) {
                int64_t rem = o, src = 0;
                for (size_t i = 0; i < r; ++i) {
                    int64_t idx = rem / out_strides[i];
                    rem -= idx * out_strides[i];
                    src += idx * gather[i];
                }
                ad->g[static_cast<size_t>(src)] += od->g[static_cast<size_t>(o)];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& ts, int64_t axis) {
    if (ts.empty()) throw ShapeError("concat: empty input list");
    const Shape& s0 = ts[0].shape();
    if (axis < 0 || axis >= static_cast<int64_t>(s0.size())) throw ShapeError("concat: invalid axis");
    int64_t axis_total = 0;
    for (const auto& t : ts) {
        if (t.rank() != ts[0].rank()) throw ShapeError("concat: rank mismatch");
        for (int64_t i = 0; i < t.rank(); ++i)
            if (i != axis && t.dim(i) != s0[static_cast<size_t>(i)])
                throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(s0));
        axis_total += t.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = axis_total;
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];

    int64_t offset = 0;
    for (const auto& t : ts) {
        const int64_t len = t.dim(axis);
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.d->v.data() + (o * axis_total + offset) * inner,
                        t.d->v.data() + o * len * inner, static_cast<size_t>(len * inner) * sizeof(S));
        offset += len;
    }

    bool rec = false;
    for (const auto& t : ts)
        if (detail::recording<S>({&t})) rec = true;
    if (rec) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorData<S>>> ins;
        std::vector<int64_t> lens;
        for (const auto& t : ts) {
            ins.push_back(t.d);
            lens.push_back(t.dim(axis));
        }
        auto od = out.d;
        Tape<S>::current()->record([ins, lens, od, outer, inner, axis_total] {
            int64_t off = 0;
            for (size_t k = 0; k < ins.size(); ++k) {
                if (ins[k]->requires_grad) {
                    for (int64_t o = 0; o < outer; ++o) {
                        const S* src = od->g.data() + (o * axis_total + off) * inner;
                        S* dst = ins[k]->g.data() + o * lens[k] * inner;
                        for (int64_t i = 0; i < lens[k] * inner; ++i) dst[i] += src[i];
                    }
                }
                off += lens[k];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions and normalization
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Tensor<S> reduce_over(const Tensor<S>& a, int64_t axis, bool mean) {
    const Shape& sh = a.shape();
    if (axis < 0 || axis >= static_cast<int64_t>(sh.size()))
        throw ShapeError("reduce: invalid axis " + std::to_string(axis) + " for " + shape_str(sh));
    int64_t outer = 1, inner = 1;
    const int64_t len = sh[static_cast<size_t>(axis)];
    for (int64_t i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < sh.size(); ++i) inner *= sh[i];
    Shape out_shape;
    for (size_t i = 0; i < sh.size(); ++i)
        if (static_cast<int64_t>(i) != axis) out_shape.push_back(sh[i]);

    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const S* x = a.d->v.data();
    S* y = out.d->v.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len; ++j) {
            const S* row = x + (o * len + j) * inner;
            S* dst = y + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += row[i];
        }
    if (mean && len > 0) {
        const S inv = S(1) / static_cast<S>(len);
        for (int64_t i = 0; i < outer * inner; ++i) y[i] *= inv;
    }

    if (recording<S>({&a})) {
        out.set_requires_grad(true);
        auto ad = a.d, od = out.d;
        const S w = mean && len > 0 ? S(1) / static_cast<S>(len) : S(1);
        Tape<S>::current()->record([ad, od, outer, inner, len, w] {
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < len; ++j) {
                    S* dst = ad->g.data() + (o * len + j) * inner;
                    const S* src = od->g.data() + o * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * w;
                }
        });
    }
    return out;
}

} // namespace detail

template <class S>
Tensor<S> mean_over(const Tensor<S>& a, int64_t axis) {
    return detail::reduce_over(a, axis, true);
}

template <class S>
Tensor<S> sum_over(const Tensor<S>& a, int64_t axis) {
    return detail::reduce_over(a, axis, false);
}

template <class S>
Tensor<S> l2_normalize(const Tensor<S>& a, int64_t axis, S eps = S(1e-12)) {
    const Shape& sh = a.shape();
    if (axis < 0 || axis >= static_cast<int64_t>(sh.size()))
        throw ShapeError("l2_normalize: invalid axis for " + shape_str(sh));
    int64_t outer = 1, inner = 1;
    const int64_t len = sh[static_cast<size_t>(axis)];
    for (int64_t i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < sh.size(); ++i) inner *= sh[i];

    Tensor<S> out = Tensor<S>::zeros(sh);
    auto norms = std::make_shared<std::vector<S>>(static_cast<size_t>(outer * inner));
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            S ss = S(0);
            for (int64_t j = 0; j < len; ++j) {
                S x = a.d->v[(o * len + j) * inner + i];
                ss += x * x;
            }
            S n = std::sqrt(ss + eps);
            (*norms)[static_cast<size_t>(o * inner + i)] = n;
            for (int64_t j = 0; j < len; ++j)
                out.d->v[(o * len + j) * inner + i] = a.d->v[(o * len + j) * inner + i] / n;
        }

    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        auto ad = a.d, od = out.d;
        Tape<S>::current()->record([ad, od, norms, outer, inner, len] {
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    const S n = (*norms)[static_cast<size_t>(o * inner + i)];
                    S dot = S(0);
                    for (int64_t j = 0; j < len; ++j) {
                        const size_t idx = static_cast<size_t>((o * len + j) * inner + i);
                        dot += od->g[idx] * od->v[idx];
                    }
                    for (int64_t j = 0; j < len; ++j) {
                        const size_t idx = static_cast<size_t>((o * len + j) * inner + i);
                        ad->g[idx] += (od->g[idx] - od->v[idx] * dot) / n;
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    if (b.dim(0) != K)
        throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros({M, N});
    detail::CMatMap<S> A(a.d->v.data(), M, K), B(b.d->v.data(), K, N);
    detail::MatMap<S> C(out.d->v.data(), M, N);
    C.noalias() = A * B;

    if (detail::recording<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.d, bd = b.d, od = out.d;
        Tape<S>::current()->record([ad, bd, od, M, K, N] {
            detail::CMatMap<S> G(od->g.data(), M, N);
            if (ad->requires_grad) {
                detail::CMatMap<S> B(bd->v.data(), K, N);
                detail::MatMap<S> GA(ad->g.data(), M, K);
                GA.noalias() += G * B.transpose();
            }
            if (bd->requires_grad) {
                detail::CMatMap<S> A(ad->v.data(), M, K);
                detail::MatMap<S> GB(bd->g.data(), K, N);
                GB.noalias() += A.transpose() * G;
            }
        });
    }
    return out;
}

// a: (B, M, K); b: (B, K, N), or (B, N, K) when trans_b is set. Result (B, M, N).
template <class S>
Tensor<S> batched_matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_b = false) {
    if (a.rank() != 3 || b.rank() != 3)
        throw ShapeError("batched_matmul: expected rank-3 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t Bt = a.dim(0), M = a.dim(1), K = a.dim(2);
    const int64_t N = trans_b ? b.dim(1) : b.dim(2);
    const int64_t bK = trans_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != Bt || bK != K)
        throw ShapeError("batched_matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros({Bt, M, N});
    for (int64_t t = 0; t < Bt; ++t) {
        detail::CMatMap<S> A(a.d->v.data() + t * M * K, M, K);
        detail::MatMap<S> C(out.d->v.data() + t * M * N, M, N);
        if (trans_b) {
            detail::CMatMap<S> Bm(b.d->v.data() + t * N * K, N, K);
            C.noalias() = A * Bm.transpose();
        } else {
            detail::CMatMap<S> Bm(b.d->v.data() + t * K * N, K, N);
            C.noalias() = A * Bm;
        }
    }
    if (detail::recording<S>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.d, bd = b.d, od = out.d;
        Tape<S>::current()->record([ad, bd, od, Bt, M, K, N, trans_b] {
            for (int64_t t = 0; t < Bt; ++t) {
                detail::CMatMap<S> G(od->g.data() + t * M * N, M, N);
                if (ad->requires_grad) {
                    detail::MatMap<S> GA(ad->g.data() + t * M * K, M, K);
                    if (trans_b) {
                        detail::CMatMap<S> Bm(bd->v.data() + t * N * K, N, K);
                        GA.noalias() += G * Bm;
                    } else {
                        detail::CMatMap<S> Bm(bd->v.data() + t * K * N, K, N);
                        GA.noalias() += G * Bm.transpose();
                    }
                }
                if (bd->requires_grad) {
                    detail::CMatMap<S> A(ad->v.data() + t * M * K, M, K);
                    if (trans_b) {
                        detail::MatMap<S> GB(bd->g.data() + t * N * K, N, K);
                        GB.noalias() += G.transpose() * A;
                    } else {
                        detail::MatMap<S> GB(bd->g.data() + t * K * N, K, N);
                        GB.noalias() += A.transpose() * G;
                    }
                }
            }
        });
    }
    return out;
}

// x: (B, Cin); w: (Cout, Cin); bias: (Cout). Result (B, Cout).
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
    if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1)
        throw ShapeError("linear: bad operand ranks");
    const int64_t B = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
    if (w.dim(1) != Ci || bias.dim(0) != Co)
        throw ShapeError("linear: shape mismatch x=" + shape_str(x.shape()) + " w=" + shape_str(w.shape()));
    Tensor<S> out = Tensor<S>::zeros({B, Co});
    detail::CMatMap<S> X(x.d->v.data(), B, Ci), W(w.d->v.data(), Co, Ci);
    detail::MatMap<S> Y(out.d->v.data(), B, Co);
    Y.noalias() = X * W.transpose();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < Co; ++c) out.d->v[b * Co + c] += bias.d->v[static_cast<size_t>(c)];

    if (detail::recording<S>({&x, &w, &bias})) {
        out.set_requires_grad(true);
        auto xd = x.d, wd = w.d, bd = bias.d, od = out.d;
        Tape<S>::current()->record([xd, wd, bd, od, B, Ci, Co] {
            detail::CMatMap<S> G(od->g.data(), B, Co);
            if (xd->requires_grad) {
                detail::CMatMap<S> W(wd->v.data(), Co, Ci);
                detail::MatMap<S> GX(xd->g.data(), B, Ci);
                GX.noalias() += G * W;
            }
            if (wd->requires_grad) {
                detail::CMatMap<S> X(xd->v.data(), B, Ci);
                detail::MatMap<S> GW(wd->g.data(), Co, Ci);
                GW.noalias() += G.transpose() * X;
            }
            if (bd->requires_grad)
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < Co; ++c) bd->g[static_cast<size_t>(c)] += od->g[b * Co + c];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution and pooling (channels-last internals)
//
// The hot path keeps activations as (B, H, W, C): im2col rows are then plain
// memcpys and the GEMM writes the output layout directly. The public NCHW
// ops below wrap these with permutes.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void im2col_nhwc(const S* x, int64_t B, int64_t H, int64_t W, int64_t C, int64_t KH, int64_t KW,
                 int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, S* cols) {
    const int64_t K = KH * KW * C;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                S* row = cols + ((b * Ho + oy) * Wo + ox) * K;
                for (int64_t ky = 0; ky < KH; ++ky) {
                    const int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue; // cols pre-zeroed
                    for (int64_t kx = 0; kx < KW; ++kx) {
                        const int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        std::memcpy(row + (ky * KW + kx) * C, x + ((b * H + iy) * W + ix) * C,
                                    static_cast<size_t>(C) * sizeof(S));
                    }
                }
            }
}

template <class S>
void col2im_nhwc(const S* dcols, int64_t B, int64_t H, int64_t W, int64_t C, int64_t KH, int64_t KW,
                 int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, S* gx) {
    const int64_t K = KH * KW * C;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                const S* row = dcols + ((b * Ho + oy) * Wo + ox) * K;
                for (int64_t ky = 0; ky < KH; ++ky) {
                    const int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t kx = 0; kx < KW; ++kx) {
                        const int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        const S* src = row + (ky * KW + kx) * C;
                        S* dst = gx + ((b * H + iy) * W + ix) * C;
                        for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
            }
}

} // namespace detail

// x: (B, H, W, Cin); w: (KH, KW, Cin, Cout).
template <class S>
Tensor<S> conv2d_nhwc(const Tensor<S>& x, const Tensor<S>& w, int64_t stride = 1, int64_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expected rank-4 input and kernel");
    const int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    const int64_t KH = w.dim(0), KW = w.dim(1), Co = w.dim(3);
    if (w.dim(2) != Ci)
        throw ShapeError("conv2d: channel mismatch x=" + shape_str(x.shape()) + " w=" + shape_str(w.shape()));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const int64_t Ho = (H + 2 * pad - KH) / stride + 1;
    const int64_t Wo = (W + 2 * pad - KW) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input");

    const int64_t K = KH * KW * Ci, P = B * Ho * Wo;
    std::vector<S> cols(static_cast<size_t>(P * K), S(0));
    detail::im2col_nhwc(x.d->v.data(), B, H, W, Ci, KH, KW, stride, pad, Ho, Wo, cols.data());

    Tensor<S> out = Tensor<S>::zeros({B, Ho, Wo, Co});
    {
        detail::CMatMap<S> Cm(cols.data(), P, K), Wm(w.d->v.data(), K, Co);
        detail::MatMap<S> Y(out.d->v.data(), P, Co);
        Y.noalias() = Cm * Wm;
    }

    if (detail::recording<S>({&x, &w})) {
        out.set_requires_grad(true);
        auto xd = x.d, wd = w.d, od = out.d;
        Tape<S>::current()->record([xd, wd, od, B, H, W, Ci, KH, KW, Co, stride, pad, Ho, Wo, K, P] {
            // im2col is recomputed rather than saved: the col matrix is the
            // largest transient in the pipeline.
            std::vector<S> cols(static_cast<size_t>(P * K), S(0));
            detail::im2col_nhwc(xd->v.data(), B, H, W, Ci, KH, KW, stride, pad, Ho, Wo, cols.data());
            detail::CMatMap<S> G(od->g.data(), P, Co);
            if (wd->requires_grad) {
                detail::CMatMap<S> Cm(cols.data(), P, K);
                detail::MatMap<S> GW(wd->g.data(), K, Co);
                GW.noalias() += Cm.transpose() * G;
            }
            if (xd->requires_grad) {
                std::vector<S> dcols(static_cast<size_t>(P * K));
                detail::CMatMap<S> Wm(wd->v.data(), K, Co);
                detail::MatMap<S> DC(dcols.data(), P, K);
                DC.noalias() = G * Wm.transpose();
                detail::col2im_nhwc(dcols.data(), B, H, W, Ci, KH, KW, stride, pad, Ho, Wo, xd->g.data());
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> max_pool2d_nhwc(const Tensor<S>& x, int64_t kernel, int64_t stride) {
    if (x.rank() != 4) throw ShapeError("max_pool2d: expected rank-4 input");
    const int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (kernel < 1 || stride < 1 || kernel > H || kernel > W)
        throw ShapeError("max_pool2d: invalid kernel/stride for " + shape_str(x.shape()));
    const int64_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
    Tensor<S> out = Tensor<S>::zeros({B, Ho, Wo, C});
    auto argmax = std::make_shared<std::vector<int64_t>>(out.d->v.size());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox)
                for (int64_t c = 0; c < C; ++c) {
                    S best = -std::numeric_limits<S>::infinity();
                    int64_t best_idx = -1;
                    for (int64_t ky = 0; ky < kernel; ++ky)
                        for (int64_t kx = 0; kx < kernel; ++kx) {
                            const int64_t idx = ((b * H + oy * stride + ky) * W + ox * stride + kx) * C + c;
                            if (x.d->v[static_cast<size_t>(idx)] > best) {
                                best = x.d->v[static_cast<size_t>(idx)];
                                best_idx = idx;
                            }
                        }
                    const size_t o = static_cast<size_t>(((b * Ho + oy) * Wo + ox) * C + c);
                    out.d->v[o] = best;
                    (*argmax)[o] = best_idx;
                }
    if (detail::recording<S>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.d, od = out.d;
        Tape<S>::current()->record([xd, od, argmax] {
            for (size_t o = 0; o < od->g.size(); ++o) xd->g[static_cast<size_t>((*argmax)[o])] += od->g[o];
        });
    }
    return out;
}

template <class S>
Tensor<S> avg_pool2d_nhwc(const Tensor<S>& x, int64_t kernel, int64_t stride) {
    if (x.rank() != 4) throw ShapeError("avg_pool2d: expected rank-4 input");
    const int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (kernel < 1 || stride < 1 || kernel > H || kernel > W)
        throw ShapeError("avg_pool2d: invalid kernel/stride for " + shape_str(x.shape()));
    const int64_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
    const S inv = S(1) / static_cast<S>(kernel * kernel);
    Tensor<S> out = Tensor<S>::zeros({B, Ho, Wo, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox)
                for (int64_t c = 0; c < C; ++c) {
                    S acc = S(0);
                    for (int64_t ky = 0; ky < kernel; ++ky)
                        for (int64_t kx = 0; kx < kernel; ++kx)
                            acc += x.d->v[((b * H + oy * stride + ky) * W + ox * stride + kx) * C + c];
                    out.d->v[static_cast<size_t>(((b * Ho + oy) * Wo + ox) * C + c)] = acc * inv;
                }
    if (detail::recording<S>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.d, od = out.d;
        Tape<S>::current()->record([xd, od, B, H, W, C, Ho, Wo, kernel, stride, inv] {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t oy = 0; oy < Ho; ++oy)
                    for (int64_t ox = 0; ox < Wo; ++ox)
                        for (int64_t c = 0; c < C; ++c) {
                            const S g = od->g[static_cast<size_t>(((b * Ho + oy) * Wo + ox) * C + c)] * inv;
                            for (int64_t ky = 0; ky < kernel; ++ky)
                                for (int64_t kx = 0; kx < kernel; ++kx)
                                    xd->g[((b * H + oy * stride + ky) * W + ox * stride + kx) * C + c] += g;
                        }
        });
    }
    return out;
}

// Batch norm over (B, H, W) per channel, channels-last. Running stats are
// plain buffers owned by the caller; they are only written when `training`
// and `update_running` are both set.
template <class S>
Tensor<S> batch_norm_nhwc(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                          Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                          bool update_running = true, S momentum = S(0.1), S eps = S(1e-5)) {
    if (x.rank() != 4) throw ShapeError("batch_norm: expected rank-4 input");
    const int64_t C = x.dim(3);
    const int64_t P = x.dim(0) * x.dim(1) * x.dim(2);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
        throw ShapeError("batch_norm: parameter size mismatch for C=" + std::to_string(C));

    auto mean = std::make_shared<std::vector<S>>(static_cast<size_t>(C), S(0));
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(C), S(0));
    const S* xv = x.d->v.data();
    if (training) {
        std::vector<S> var(static_cast<size_t>(C), S(0));
        for (int64_t p = 0; p < P; ++p)
            for (int64_t c = 0; c < C; ++c) (*mean)[static_cast<size_t>(c)] += xv[p * C + c];
        for (int64_t c = 0; c < C; ++c) (*mean)[static_cast<size_t>(c)] /= static_cast<S>(P);
        for (int64_t p = 0; p < P; ++p)
            for (int64_t c = 0; c < C; ++c) {
                const S dlt = xv[p * C + c] - (*mean)[static_cast<size_t>(c)];
                var[static_cast<size_t>(c)] += dlt * dlt;
            }
        for (int64_t c = 0; c < C; ++c) {
            var[static_cast<size_t>(c)] /= static_cast<S>(P);
            (*inv_std)[static_cast<size_t>(c)] = S(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);
        }
        if (update_running) {
            const S unbias = P > 1 ? static_cast<S>(P) / static_cast<S>(P - 1) : S(1);
            for (int64_t c = 0; c < C; ++c) {
                auto ci = static_cast<size_t>(c);
                running_mean.d->v[ci] = (S(1) - momentum) * running_mean.d->v[ci] + momentum * (*mean)[ci];
                running_var.d->v[ci] = (S(1) - momentum) * running_var.d->v[ci] + momentum * var[ci] * unbias;
            }
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            auto ci = static_cast<size_t>(c);
            (*mean)[ci] = running_mean.d->v[ci];
            (*inv_std)[ci] = S(1) / std::sqrt(running_var.d->v[ci] + eps);
        }
    }

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t p = 0; p < P; ++p)
        for (int64_t c = 0; c < C; ++c) {
            auto ci = static_cast<size_t>(c);
            out.d->v[p * C + c] =
                gamma.d->v[ci] * ((xv[p * C + c] - (*mean)[ci]) * (*inv_std)[ci]) + beta.d->v[ci];
        }

    if (detail::recording<S>({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xd = x.d, gd = gamma.d, bd = beta.d, od = out.d;
        Tape<S>::current()->record([xd, gd, bd, od, mean, inv_std, P, C, training] {
            std::vector<S> sum_g(static_cast<size_t>(C), S(0)), sum_gx(static_cast<size_t>(C), S(0));
            for (int64_t p = 0; p < P; ++p)
                for (int64_t c = 0; c < C; ++c) {
                    auto ci = static_cast<size_t>(c);
                    const S xh = (xd->v[p * C + c] - (*mean)[ci]) * (*inv_std)[ci];
                    sum_g[ci] += od->g[p * C + c];
                    sum_gx[ci] += od->g[p * C + c] * xh;
                }
            if (gd->requires_grad)
                for (int64_t c = 0; c < C; ++c) gd->g[static_cast<size_t>(c)] += sum_gx[static_cast<size_t>(c)];
            if (bd->requires_grad)
                for (int64_t c = 0; c < C; ++c) bd->g[static_cast<size_t>(c)] += sum_g[static_cast<size_t>(c)];
            if (xd->requires_grad) {
                if (training) {
                    const S invP = S(1) / static_cast<S>(P);
                    for (int64_t p = 0; p < P; ++p)
                        for (int64_t c = 0; c < C; ++c) {
                            auto ci = static_cast<size_t>(c);
                            const S xh = (xd->v[p * C + c] - (*mean)[ci]) * (*inv_std)[ci];
                            xd->g[p * C + c] += gd->v[ci] * (*inv_std)[ci] *
                                                (od->g[p * C + c] - sum_g[ci] * invP - xh * sum_gx[ci] * invP);
                        }
                } else {
                    for (int64_t p = 0; p < P; ++p)
                        for (int64_t c = 0; c < C; ++c) {
                            auto ci = static_cast<size_t>(c);
                            xd->g[p * C + c] += od->g[p * C + c] * gd->v[ci] * (*inv_std)[ci];
                        }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// public NCHW wrappers (spec-shaped surfaces)
// ---------------------------------------------------------------------------

// x: (N, Cin, H, W); w: (Cout, Cin, KH, KW).
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int64_t stride = 1, int64_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expected rank-4 input and kernel");
    Tensor<S> xn = permute(x, {0, 2, 3, 1});
    Tensor<S> wn = permute(w, {2, 3, 1, 0});
    Tensor<S> on = conv2d_nhwc(xn, wn, stride, pad);
    return permute(on, {0, 3, 1, 2});
}

template <class S>
Tensor<S> max_pool2d(const Tensor<S>& x, int64_t kernel, int64_t stride) {
    Tensor<S> on = max_pool2d_nhwc(permute(x, {0, 2, 3, 1}), kernel, stride);
    return permute(on, {0, 3, 1, 2});
}

template <class S>
Tensor<S> avg_pool2d(const Tensor<S>& x, int64_t kernel, int64_t stride) {
    Tensor<S> on = avg_pool2d_nhwc(permute(x, {0, 2, 3, 1}), kernel, stride);
    return permute(on, {0, 3, 1, 2});
}

template <class S>
Tensor<S> batch_norm_2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                        Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                        bool update_running = true, S momentum = S(0.1), S eps = S(1e-5)) {
    Tensor<S> on = batch_norm_nhwc(permute(x, {0, 2, 3, 1}), gamma, beta, running_mean, running_var,
                                   training, update_running, momentum, eps);
    return permute(on, {0, 3, 1, 2});
}

template <class S>
Tensor<S> flatten(const Tensor<S>& x) {
    if (x.rank() < 1) throw ShapeError("flatten: scalar input");
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

// logits: (..., K); targets: one index per row (or a single shared index).
// Returns the mean over rows of -log softmax(logits)[target].
template <class S>
Tensor<S> cross_entropy_from_logits(const Tensor<S>& logits, const std::vector<int64_t>& targets) {
    if (logits.rank() < 1) throw ShapeError("cross_entropy: scalar logits");
    const int64_t K = logits.dim(logits.rank() - 1);
    const int64_t R = logits.numel() / K;
    if (static_cast<int64_t>(targets.size()) != R && targets.size() != 1)
        throw ValidationError("cross_entropy: expected 1 or " + std::to_string(R) + " targets, got " +
                              std::to_string(targets.size()));
    for (int64_t t : targets)
        if (t < 0 || t >= K)
            throw ValidationError("cross_entropy: target " + std::to_string(t) + " out of range for K=" +
                                  std::to_string(K));

    auto lse = std::make_shared<std::vector<S>>(static_cast<size_t>(R));
    const S* lv = logits.d->v.data();
    S total = S(0);
    for (int64_t r = 0; r < R; ++r) {
        const S* row = lv + r * K;
        S mx = row[0];
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        S sum = S(0);
        for (int64_t j = 0; j < K; ++j) sum += std::exp(row[j] - mx);
        const S l = mx + std::log(sum);
        (*lse)[static_cast<size_t>(r)] = l;
        const int64_t t = targets.size() == 1 ? targets[0] : targets[static_cast<size_t>(r)];
        total += l - row[t];
    }
    Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(R));

    if (detail::recording<S>({&logits})) {
        out.set_requires_grad(true);
        auto ld = logits.d, od = out.d;
        auto tgts = std::make_shared<std::vector<int64_t>>(targets);
        Tape<S>::current()->record([ld, od, lse, tgts, R, K] {
            const S coef = od->g[0] / static_cast<S>(R);
            for (int64_t r = 0; r < R; ++r) {
                const int64_t t = tgts->size() == 1 ? (*tgts)[0] : (*tgts)[static_cast<size_t>(r)];
                for (int64_t j = 0; j < K; ++j) {
                    const S p = std::exp(ld->v[r * K + j] - (*lse)[static_cast<size_t>(r)]);
                    ld->g[r * K + j] += coef * (p - (j == t ? S(1) : S(0)));
                }
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> cross_entropy_from_logits(const Tensor<S>& logits, int64_t target) {
    return cross_entropy_from_logits(logits, std::vector<int64_t>{target});
}

} // namespace neuromoco

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "vitkit/errors.hpp"
#include "vitkit/rng.hpp"

namespace vitkit {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Autograd mode. Ops record backward closures only while grads are enabled;
// eval-only paths (benchmarking, dataset probes) wrap forwards in NoGradGuard.
// ---------------------------------------------------------------------------
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---------------------------------------------------------------------------
// MAC counter. When a counter is installed (flops_oracle), every gemm and
// convolution inner product adds its multiply-accumulate count.
// ---------------------------------------------------------------------------
inline std::int64_t*& mac_counter() {
    thread_local std::int64_t* counter = nullptr;
    return counter;
}

struct MacCounterGuard {
    explicit MacCounterGuard(std::int64_t* c) : prev_(mac_counter()) { mac_counter() = c; }
    ~MacCounterGuard() { mac_counter() = prev_; }
    MacCounterGuard(const MacCounterGuard&) = delete;
    MacCounterGuard& operator=(const MacCounterGuard&) = delete;

private:
    std::int64_t* prev_;
};

inline void count_macs(std::int64_t m, std::int64_t k, std::int64_t n) {
    if (auto* c = mac_counter()) *c += m * k * n;
}

// ---------------------------------------------------------------------------
// Row-major GEMM helpers over raw buffers (Eigen does the arithmetic). All
// three count m*k*n MACs when a counter is installed.
// ---------------------------------------------------------------------------
template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C (+)= A[m x k] * B[k x n]
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate) {
    count_macs(m, k, n);
    ConstMatMap<S> A(a, m, k), B(b, k, n);
    MatMap<S> C(c, m, n);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C (+)= A[m x k] * B[n x k]^T
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate) {
    count_macs(m, k, n);
    ConstMatMap<S> A(a, m, k), B(b, n, k);
    MatMap<S> C(c, m, n);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C (+)= A[k x m]^T * B[k x n]
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n,
             bool accumulate) {
    count_macs(m, k, n);
    ConstMatMap<S> A(a, k, m), B(b, k, n);
    MatMap<S> C(c, m, n);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

// ---------------------------------------------------------------------------
// Tensor: dense row-major n-d array with optional gradient. Handles share the
// underlying node, so copying a Tensor aliases its storage and its place in
// the autodiff graph (parameters rely on this).
// ---------------------------------------------------------------------------
template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad; // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn; // scatters this->grad into parents

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), S(0));
    }
};

template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;
    explicit Tensor(Shape shape)
        : node_(std::make_shared<TensorNode<S>>()) {
        node_->shape = std::move(shape);
        node_->value.assign(static_cast<std::size_t>(numel_of(node_->shape)), S(0));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, S v) {
        Tensor t(std::move(shape));
        for (auto& x : t.node_->value) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> values) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<S>>();
        t.node_->shape = std::move(shape);
        if (static_cast<std::int64_t>(values.size()) != numel_of(t.node_->shape))
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(t.node_->shape));
        t.node_->value = std::move(values);
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        rng.fill_normal(std::span<S>(t.node_->value), stddev);
        return t;
    }

    static Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
        Tensor t(std::move(shape));
        rng.fill_trunc_normal(std::span<S>(t.node_->value), stddev);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    std::span<S> data() { return std::span<S>(node_->value); }
    std::span<const S> data() const { return std::span<const S>(node_->value); }
    S item() const {
        if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const S> grad() const { return std::span<const S>(node_->grad); }
    std::span<S> grad_mut() { return std::span<S>(node_->grad); }
    void zero_grad() { node_->grad.clear(); }

    // Deep copy of the value; detached from any graph.
    Tensor clone_detached() const {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<S>>();
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        return t;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Reverse-mode sweep from a scalar output.
    void backward() const {
        if (numel() != 1) throw DimensionError("backward() requires a scalar loss");
        if (!std::isfinite(static_cast<double>(node_->value[0])))
            throw EvalError("backward() on non-finite loss");
        std::vector<TensorNode<S>*> order;
        std::unordered_set<TensorNode<S>*> seen;
        topo(node_.get(), seen, order);
        node_->grad.assign(1, S(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn();
    }

    std::shared_ptr<TensorNode<S>>& node() { return node_; }
    const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

private:
    static void topo(TensorNode<S>* n, std::unordered_set<TensorNode<S>*>& seen,
                     std::vector<TensorNode<S>*>& order) {
        if (!n->requires_grad || seen.count(n)) return;
        // Iterative post-order DFS; parents precede consumers in `order`.
        std::vector<std::pair<TensorNode<S>*, std::size_t>> stack{{n, 0}};
        seen.insert(n);
        while (!stack.empty()) {
            auto& [cur, idx] = stack.back();
            if (idx < cur->parents.size()) {
                TensorNode<S>* p = cur->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(cur);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<TensorNode<S>> node_;
};

// Attach a backward closure to `out` if autodiff is active and any parent
// participates in the graph.
template <typename S, typename Fn>
void attach_backward_vec(Tensor<S>& out, const std::vector<Tensor<S>>& parents, Fn&& fn) {
    if (!grad_mode()) return;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return;
    auto& n = *out.node();
    n.requires_grad = true;
    for (const auto& p : parents) n.parents.push_back(p.node());
    n.backward_fn = std::forward<Fn>(fn);
}

template <typename S, typename Fn>
void attach_backward(Tensor<S>& out, std::initializer_list<Tensor<S>> parents, Fn&& fn) {
    attach_backward_vec(out, std::vector<Tensor<S>>(parents), std::forward<Fn>(fn));
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast primitives
// ---------------------------------------------------------------------------

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "add");
    Tensor<S> out(a.shape());
    const auto av = a.data(), bv = b.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] + bv[i];
    attach_backward(out, {a, b}, [o = out.node().get(), an = a.node(), bn = b.node()] {
        for (auto* p : {an.get(), bn.get()}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) p->grad[i] += o->grad[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "sub");
    Tensor<S> out(a.shape());
    const auto av = a.data(), bv = b.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] - bv[i];
    attach_backward(out, {a, b}, [o = out.node().get(), an = a.node(), bn = b.node()] {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) bn->grad[i] -= o->grad[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "mul");
    Tensor<S> out(a.shape());
    const auto av = a.data(), bv = b.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] * bv[i];
    attach_backward(out, {a, b}, [o = out.node().get(), an = a.node(), bn = b.node()] {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                an->grad[i] += o->grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                bn->grad[i] += o->grad[i] * an->value[i];
        }
    });
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out(a.shape());
    const auto av = a.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) ov[i] = av[i] * c;
    attach_backward(out, {a}, [o = out.node().get(), an = a.node(), c] {
        an->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i] * c;
    });
    return out;
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, S c) { return scale(a, c); }
template <typename S>
Tensor<S> operator*(S c, const Tensor<S>& a) { return scale(a, c); }

// x[..., n] + v[n]
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
    const std::int64_t n = v.numel();
    if (x.dim(x.ndim() - 1) != n)
        throw DimensionError("add_rowvec: last dim of " + shape_str(x.shape()) +
                             " does not match " + shape_str(v.shape()));
    Tensor<S> out(x.shape());
    const auto xv = x.data(), vv = v.data();
    auto ov = out.data();
    const std::int64_t rows = x.numel() / n;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] + vv[j];
    attach_backward(out, {x, v}, [o = out.node().get(), xn = x.node(), vn = v.node(), rows, n] {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < n; ++j) vn->grad[j] += o->grad[r * n + j];
        }
    });
    return out;
}

// x[..., n] * v[n]
template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
    const std::int64_t n = v.numel();
    if (x.dim(x.ndim() - 1) != n)
        throw DimensionError("mul_rowvec: last dim of " + shape_str(x.shape()) +
                             " does not match " + shape_str(v.shape()));
    Tensor<S> out(x.shape());
    const auto xv = x.data(), vv = v.data();
    auto ov = out.data();
    const std::int64_t rows = x.numel() / n;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] * vv[j];
    attach_backward(out, {x, v}, [o = out.node().get(), xn = x.node(), vn = v.node(), rows, n] {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < n; ++j)
                    xn->grad[r * n + j] += o->grad[r * n + j] * vn->value[j];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < n; ++j)
                    vn->grad[j] += o->grad[r * n + j] * xn->value[r * n + j];
        }
    });
    return out;
}

// x[b, ...rest] + y[...rest]  (broadcast over the leading dim)
template <typename S>
Tensor<S> add_broadcast0(const Tensor<S>& x, const Tensor<S>& y) {
    const std::int64_t inner = y.numel();
    if (x.numel() % inner != 0 ||
        !std::equal(y.shape().begin(), y.shape().end(), x.shape().end() - y.ndim()))
        throw DimensionError("add_broadcast0: " + shape_str(x.shape()) + " vs " +
                             shape_str(y.shape()));
    Tensor<S> out(x.shape());
    const auto xv = x.data(), yv = y.data();
    auto ov = out.data();
    const std::int64_t reps = x.numel() / inner;
    for (std::int64_t r = 0; r < reps; ++r)
        for (std::int64_t j = 0; j < inner; ++j) ov[r * inner + j] = xv[r * inner + j] + yv[j];
    attach_backward(out, {x, y},
                    [o = out.node().get(), xn = x.node(), yn = y.node(), reps, inner] {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i];
        }
        if (yn->requires_grad) {
            yn->ensure_grad();
            for (std::int64_t r = 0; r < reps; ++r)
                for (std::int64_t j = 0; j < inner; ++j) yn->grad[j] += o->grad[r * inner + j];
        }
    });
    return out;
}

// x[b, ...] scaled per leading index by s[b]. Carrier of stochastic depth.
template <typename S>
Tensor<S> mul_per_sample(const Tensor<S>& x, const Tensor<S>& s) {
    if (s.ndim() != 1 || s.dim(0) != x.dim(0))
        throw DimensionError("mul_per_sample: " + shape_str(x.shape()) + " vs " +
                             shape_str(s.shape()));
    Tensor<S> out(x.shape());
    const std::int64_t b = x.dim(0), inner = x.numel() / b;
    const auto xv = x.data(), sv = s.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < inner; ++j) ov[i * inner + j] = xv[i * inner + j] * sv[i];
    attach_backward(out, {x, s}, [o = out.node().get(), xn = x.node(), sn = s.node(), b, inner] {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t j = 0; j < inner; ++j)
                    xn->grad[i * inner + j] += o->grad[i * inner + j] * sn->value[i];
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t j = 0; j < inner; ++j)
                    sn->grad[i] += o->grad[i * inner + j] * xn->value[i * inner + j];
        }
    });
    return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    Tensor<S> out = Tensor<S>::from(std::move(shape), std::vector<S>(x.data().begin(), x.data().end()));
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node()] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul: a[..., k] x b[k, n]; leading dims of `a` are treated as stacked
// rows. dA = dC * B^T, dB = A^T * dC.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() < 2 || b.ndim() != 2)
        throw DimensionError("matmul: need [..,k] x [k,n], got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::int64_t k = a.dim(a.ndim() - 1);
    if (k != b.dim(0))
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    const std::int64_t n = b.dim(1);
    const std::int64_t m = a.numel() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor<S> out(std::move(out_shape));
    gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
    attach_backward(out, {a, b},
                    [o = out.node().get(), an = a.node(), bn = b.node(), m, k, n] {
        if (an->requires_grad) {
            an->ensure_grad();
            gemm_nt(o->grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            gemm_tn(an->value.data(), o->grad.data(), bn->grad.data(), k, m, n, true);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions. Summation is left-to-right over the flat buffer so repeated
// runs reduce in the same order.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    S acc = 0;
    for (auto v : x.data()) acc += v;
    Tensor<S> out = Tensor<S>::from({1}, {acc});
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node()] {
        xn->ensure_grad();
        const S g = o->grad[0];
        for (auto& gv : xn->grad) gv += g;
    });
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
    return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

// max-subtracted softmax along the last dim; rows sum to one.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
    const std::int64_t n = x.dim(x.ndim() - 1);
    const std::int64_t rows = x.numel() / n;
    Tensor<S> out(x.shape());
    const auto xv = x.data();
    auto ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * n;
        S mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        S denom = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            const S e = std::exp(row[j] - mx);
            ov[r * n + j] = e;
            denom += e;
        }
        for (std::int64_t j = 0; j < n; ++j) ov[r * n + j] /= denom;
    }
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node(), rows, n] {
        xn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* y = o->value.data() + r * n;
            const S* dy = o->grad.data() + r * n;
            S dot = 0;
            for (std::int64_t j = 0; j < n; ++j) dot += y[j] * dy[j];
            for (std::int64_t j = 0; j < n; ++j) xn->grad[r * n + j] += y[j] * (dy[j] - dot);
        }
    });
    return out;
}

// Rows of x[b, t, d] at a fixed token index -> [b, d].
template <typename S>
Tensor<S> select_token(const Tensor<S>& x, std::int64_t t) {
    const std::int64_t b = x.dim(0), T = x.dim(1), d = x.dim(2);
    Tensor<S> out({b, d});
    const auto xv = x.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < d; ++j) ov[i * d + j] = xv[(i * T + t) * d + j];
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node(), b, T, d, t] {
        xn->ensure_grad();
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t j = 0; j < d; ++j)
                xn->grad[(i * T + t) * d + j] += o->grad[i * d + j];
    });
    return out;
}

// Token rows [from, T) of x[b, t, d].
template <typename S>
Tensor<S> slice_tokens(const Tensor<S>& x, std::int64_t from) {
    const std::int64_t b = x.dim(0), T = x.dim(1), d = x.dim(2);
    const std::int64_t keep = T - from;
    Tensor<S> out({b, keep, d});
    const auto xv = x.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t t = 0; t < keep; ++t)
            for (std::int64_t j = 0; j < d; ++j)
                ov[(i * keep + t) * d + j] = xv[(i * T + t + from) * d + j];
    attach_backward(out, {x}, [o = out.node().get(), xn = x.node(), b, T, d, from, keep] {
        xn->ensure_grad();
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t t = 0; t < keep; ++t)
                for (std::int64_t j = 0; j < d; ++j)
                    xn->grad[(i * T + t + from) * d + j] += o->grad[(i * keep + t) * d + j];
    });
    return out;
}

// Prepend one learned token (shape [d] or [1, d]) to every sequence.
template <typename S>
Tensor<S> prepend_token(const Tensor<S>& x, const Tensor<S>& tok) {
    const std::int64_t b = x.dim(0), T = x.dim(1), d = x.dim(2);
    if (tok.numel() != d)
        throw DimensionError("prepend_token: token " + shape_str(tok.shape()) +
                             " does not match width " + std::to_string(d));
    Tensor<S> out({b, T + 1, d});
    const auto xv = x.data(), tv = tok.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t j = 0; j < d; ++j) ov[i * (T + 1) * d + j] = tv[j];
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t j = 0; j < d; ++j)
                ov[(i * (T + 1) + t + 1) * d + j] = xv[(i * T + t) * d + j];
    }
    attach_backward(out, {x, tok}, [o = out.node().get(), xn = x.node(), tn = tok.node(), b, T, d] {
        if (tn->requires_grad) {
            tn->ensure_grad();
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t j = 0; j < d; ++j) tn->grad[j] += o->grad[i * (T + 1) * d + j];
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t t = 0; t < T; ++t)
                    for (std::int64_t j = 0; j < d; ++j)
                        xn->grad[(i * T + t) * d + j] += o->grad[(i * (T + 1) + t + 1) * d + j];
        }
    });
    return out;
}

// Max |a - b| over both buffers.
template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0;
    const auto av = a.data(), bv = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
    return m;
}

template <typename S>
double l2_diff(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "l2_diff");
    double acc = 0;
    const auto av = a.data(), bv = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double diff = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

} // namespace vitkit

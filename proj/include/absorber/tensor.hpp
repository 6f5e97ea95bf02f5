#pragma once

// Dense row-major tensors with reverse-mode autodiff. The graph is dynamic:
// every op allocates a fresh node recording its parents and a backward
// closure; backward() walks the graph once in reverse topological order.
// Templated on the scalar type so gradient checks can run in double while
// model code runs in float.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "absorber/errors.hpp"

namespace absorber {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

enum class LossNormalize { per_position, per_element };

namespace detail {

// C[M,N] += A[M,K] * B[K,N]; the j-inner loop vectorizes and every C entry
// accumulates its K contributions in index order (summation order is part of
// the determinism contract).
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t i = 0; i < M; ++i) {
        T* crow = c + i * N;
        const T* arow = a + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            const T* brow = b + k * N;
            for (std::int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

// out[cols,rows] = in[rows,cols]^T for each consecutive block.
template <class T>
void transpose_blocks(const T* in, T* out, std::int64_t blocks, std::int64_t rows, std::int64_t cols) {
    for (std::int64_t b = 0; b < blocks; ++b) {
        const T* src = in + b * rows * cols;
        T* dst = out + b * rows * cols;
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        const T* brow = b + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            T* crow = c + k * N;
            for (std::int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// Softmax of one row with max-subtraction; writes probabilities into out.
template <class T>
void softmax_row(const T* in, T* out, std::int64_t n) {
    T mx = in[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    T sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        sum += out[i];
    }
    const T inv = T(1) / sum;
    for (std::int64_t i = 0; i < n; ++i) out[i] *= inv;
}

// log-sum-exp of one row, max-stabilized.
template <class T>
T logsumexp_row(const T* in, std::int64_t n) {
    T mx = in[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    T sum = 0;
    for (std::int64_t i = 0; i < n; ++i) sum += std::exp(in[i] - mx);
    return mx + std::log(sum);
}

// Root-mean-square of one row, accumulated in double so the float and double
// instantiations agree on what "unit RMS" means.
template <class T>
T rms_of_row(const T* in, std::int64_t n, T eps) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += double(in[i]) * double(in[i]);
    return T(std::sqrt(acc / double(n) + double(eps)));
}

// cos/sin for rotary pair `pair_index` at absolute position `pos`. Angles are
// computed in double so both the autograd and the KV-cache paths see
// identical rotations.
inline void rope_cos_sin(std::int64_t pos, std::int64_t pair_index, std::int64_t head_dim,
                         double base, double& c, double& s) {
    const double exponent = -2.0 * double(pair_index) / double(head_dim);
    const double angle = double(pos) * std::pow(base, exponent);
    c = std::cos(angle);
    s = std::sin(angle);
}

} // namespace detail

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    bool requires_grad = false;
    std::vector<T> grad; // allocated on first accumulation
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void()> backward_fn;
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor leaf(Shape shape, std::vector<T> data, bool requires_grad = false) {
        return make(std::move(shape), std::move(data), requires_grad, "leaf");
    }

    static Tensor make(Shape shape, std::vector<T> data, bool requires_grad, const char* op_name) {
        auto node = std::make_shared<TensorNode<T>>();
        if (numel_of(shape) != std::int64_t(data.size()))
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match data length " +
                                 std::to_string(data.size()));
        node->shape = std::move(shape);
        node->value = std::move(data);
        node->requires_grad = requires_grad;
        node->op = op_name;
        Tensor t(std::move(node));
        t.check_finite(op_name);
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel_of(shape);
        return leaf(std::move(shape), std::vector<T>(std::size_t(n), T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        auto n = numel_of(shape);
        return leaf(std::move(shape), std::vector<T>(std::size_t(n), v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return leaf({}, std::vector<T>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return std::int64_t(node_->value.size()); }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }

    const std::vector<T>& value() const { return node_->value; }
    // Mutable access is for leaves only (optimizer updates, weight merges);
    // op outputs are immutable.
    std::vector<T>& mutable_value() { return node_->value; }
    const std::vector<T>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
    void drop_grad() { node_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw ContractError("item: tensor is not scalar, shape " + shape_str(shape()));
        return node_->value[0];
    }

    std::shared_ptr<TensorNode<T>>& node() { return node_; }
    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

    void check_finite(const char* op_name) const {
        for (const T v : node_->value) {
            if (!std::isfinite(double(v)))
                throw NumericError(std::string("op '") + op_name + "' produced a non-finite value");
        }
    }

private:
    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

// Builds an op output node. Parents are only retained (and a backward
// closure later installed) when some parent requires grad; inference-only
// graphs free their intermediates as soon as values go out of scope.
template <class T>
Tensor<T> finish_op(const char* op, Shape shape, std::vector<T> value,
                    std::initializer_list<Tensor<T>> parents) {
    bool needs_grad = false;
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
    Tensor<T> out = Tensor<T>::make(std::move(shape), std::move(value), needs_grad, op);
    if (needs_grad) {
        for (const auto& p : parents) out.node()->parents.push_back(p.node());
    }
    return out;
}

template <class T>
void accumulate(const std::shared_ptr<TensorNode<T>>& node, const std::vector<T>& delta) {
    node->ensure_grad();
    for (std::size_t i = 0; i < delta.size(); ++i) node->grad[i] += delta[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// primitive ops
// ---------------------------------------------------------------------------

// Batched matrix product with numpy-style broadcasting over the leading
// (batch) dims. a: [..,M,K], b: [..,K,N] -> [..,M,N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw DimensionError("matmul: inputs must have rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
    const std::int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
    const std::int64_t Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
    if (K != Kb)
        throw DimensionError("matmul: inner extents differ, " + shape_str(sa) + " x " + shape_str(sb));

    Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
    const std::size_t brank = std::max(ba.size(), bb.size());
    Shape batch(brank, 1);
    for (std::size_t i = 0; i < brank; ++i) {
        const std::int64_t ea = i < brank - ba.size() ? 1 : ba[i - (brank - ba.size())];
        const std::int64_t eb = i < brank - bb.size() ? 1 : bb[i - (brank - bb.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw DimensionError("matmul: batch extents not broadcastable, " + shape_str(sa) + " x " + shape_str(sb));
        batch[i] = std::max(ea, eb);
    }
    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);

    const std::int64_t nbatch = numel_of(batch);
    // Per-output-batch offsets into a and b (broadcast dims contribute 0 stride).
    auto batch_offsets = [&](const Shape& bs, std::int64_t mat_elems) {
        std::vector<std::int64_t> offs(std::size_t(nbatch), 0);
        std::vector<std::int64_t> idx(brank, 0);
        for (std::int64_t lin = 0; lin < nbatch; ++lin) {
            std::int64_t off = 0;
            std::int64_t stride = mat_elems;
            for (std::size_t i = brank; i-- > 0;) {
                const bool present = i >= brank - bs.size();
                const std::int64_t extent = present ? bs[i - (brank - bs.size())] : 1;
                if (present && extent != 1) off += idx[i] * stride;
                if (present) stride *= extent;
            }
            offs[std::size_t(lin)] = off;
            for (std::size_t i = brank; i-- > 0;) {
                if (++idx[i] < batch[i]) break;
                idx[i] = 0;
            }
        }
        return offs;
    };
    const auto offs_a = batch_offsets(ba, M * K);
    const auto offs_b = batch_offsets(bb, K * N);

    std::vector<T> out(std::size_t(nbatch * M * N), T(0));
    for (std::int64_t bi = 0; bi < nbatch; ++bi) {
        detail::gemm_nn(a.value().data() + offs_a[std::size_t(bi)], b.value().data() + offs_b[std::size_t(bi)],
                        out.data() + bi * M * N, M, K, N);
    }

    Tensor<T> result = detail::finish_op<T>("matmul", out_shape, std::move(out), {a, b});
    if (result.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        TensorNode<T>* rn = result.node().get();
        rn->backward_fn = [an, bn, rn, offs_a, offs_b, M, K, N, nbatch]() {
            const T* g = rn->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = dC * B^T, done as gemm_nn against a transposed copy of
                // B (a direct dot-product kernel defeats vectorization)
                std::vector<T> bt(bn->value.size());
                detail::transpose_blocks(bn->value.data(), bt.data(),
                                         std::int64_t(bn->value.size()) / (K * N), K, N);
                for (std::int64_t bi = 0; bi < nbatch; ++bi)
                    detail::gemm_nn(g + bi * M * N, bt.data() + offs_b[std::size_t(bi)],
                                    an->grad.data() + offs_a[std::size_t(bi)], M, N, K);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t bi = 0; bi < nbatch; ++bi)
                    detail::gemm_tn(an->value.data() + offs_a[std::size_t(bi)], g + bi * M * N,
                                    bn->grad.data() + offs_b[std::size_t(bi)], M, K, N);
            }
        };
    }
    return result;
}

// Elementwise sum. The smaller input may be a trailing-shape broadcast of the
// larger one (e.g. a [T,T] mask added to [H,T,T] scores).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const bool a_big = a.numel() >= b.numel();
    const Tensor<T>& big = a_big ? a : b;
    const Tensor<T>& small = a_big ? b : a;
    const Shape& sb = big.shape();
    const Shape& ss = small.shape();
    if (ss.size() > sb.size() ||
        !std::equal(ss.rbegin(), ss.rend(), sb.rbegin()))
        throw DimensionError("add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

    const std::int64_t inner = small.numel();
    const std::int64_t repeat = inner == 0 ? 0 : big.numel() / inner;
    std::vector<T> out(big.value());
    for (std::int64_t r = 0; r < repeat; ++r) {
        T* dst = out.data() + r * inner;
        const T* src = small.value().data();
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }

    Tensor<T> result = detail::finish_op<T>("add", big.shape(), std::move(out), {a, b});
    if (result.requires_grad()) {
        auto bign = big.node();
        auto smalln = small.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [bign, smalln, rn, inner, repeat]() {
            if (bign->requires_grad) detail::accumulate(bign, rn->grad);
            if (smalln->requires_grad) {
                smalln->ensure_grad();
                const T* g = rn->grad.data();
                for (std::int64_t r = 0; r < repeat; ++r)
                    for (std::int64_t i = 0; i < inner; ++i) smalln->grad[std::size_t(i)] += g[r * inner + i];
            }
        };
    }
    return result;
}

// Elementwise product; shapes must match exactly.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    Tensor<T> result = detail::finish_op<T>("mul", a.shape(), std::move(out), {a, b});
    if (result.requires_grad()) {
        auto an = a.node(), bn = b.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [an, bn, rn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < rn->grad.size(); ++i) an->grad[i] += rn->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < rn->grad.size(); ++i) bn->grad[i] += rn->grad[i] * an->value[i];
            }
        };
    }
    return result;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.value());
    for (auto& v : out) v *= c;
    Tensor<T> result = detail::finish_op<T>("scale", a.shape(), std::move(out), {a});
    if (result.requires_grad()) {
        auto an = a.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [an, rn, c]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i) an->grad[i] += rn->grad[i] * c;
        };
    }
    return result;
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
    std::vector<T> out(x.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.value()[i];
        out[i] = v * detail::sigmoid(v);
    }
    Tensor<T> result = detail::finish_op<T>("silu", x.shape(), std::move(out), {x});
    if (result.requires_grad()) {
        auto xn = x.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [xn, rn]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i) {
                const T v = xn->value[i];
                const T s = detail::sigmoid(v);
                xn->grad[i] += rn->grad[i] * (s + v * s * (T(1) - s));
            }
        };
    }
    return result;
}

// RMS normalization over the last dim with a learned per-channel gain.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6)) {
    if (x.rank() < 1) throw DimensionError("rms_norm: input must have rank >= 1");
    const std::int64_t d = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != d)
        throw DimensionError("rms_norm: gain shape " + shape_str(gain.shape()) + " does not match last dim " +
                             std::to_string(d));
    const std::int64_t rows = x.numel() / d;
    std::vector<T> out(x.value().size());
    std::vector<T> inv_rms(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* in = x.value().data() + r * d;
        const T rms = detail::rms_of_row(in, d, eps);
        inv_rms[std::size_t(r)] = T(1) / rms;
        T* o = out.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) o[i] = in[i] * inv_rms[std::size_t(r)] * gain.value()[std::size_t(i)];
    }
    Tensor<T> result = detail::finish_op<T>("rms_norm", x.shape(), std::move(out), {x, gain});
    if (result.requires_grad()) {
        auto xn = x.node(), gn = gain.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [xn, gn, rn, rows, d, inv_rms]() {
            const T* g = rn->grad.data();
            if (gn->requires_grad) gn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* in = xn->value.data() + r * d;
                const T* gr = g + r * d;
                const T ir = inv_rms[std::size_t(r)];
                if (gn->requires_grad) {
                    for (std::int64_t i = 0; i < d; ++i) gn->grad[std::size_t(i)] += gr[i] * in[i] * ir;
                }
                if (xn->requires_grad) {
                    // dL/dx = ir * (g*gain) - x * ir^3/d * <g*gain, x>
                    T dot = 0;
                    for (std::int64_t i = 0; i < d; ++i) dot += gr[i] * gn->value[std::size_t(i)] * in[i];
                    const T k = dot * ir * ir * ir / T(d);
                    T* xg = xn->grad.data() + r * d;
                    for (std::int64_t i = 0; i < d; ++i)
                        xg[i] += gr[i] * gn->value[std::size_t(i)] * ir - in[i] * k;
                }
            }
        };
    }
    return result;
}

// Rows of `table` gathered by token id; out shape = ids_shape + [d].
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::int32_t>& ids, Shape ids_shape) {
    if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be [vocab,d]");
    if (numel_of(ids_shape) != std::int64_t(ids.size()))
        throw DimensionError("embedding_lookup: ids shape does not match id count");
    const std::int64_t vocab = table.dim(0), d = table.dim(1);
    std::vector<T> out(ids.size() * std::size_t(d));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::int32_t id = ids[i];
        if (id < 0 || id >= vocab)
            throw ContractError("embedding_lookup: token id " + std::to_string(id) + " out of range");
        std::copy_n(table.value().data() + std::int64_t(id) * d, d, out.data() + std::int64_t(i) * d);
    }
    Shape out_shape = std::move(ids_shape);
    out_shape.push_back(d);
    Tensor<T> result = detail::finish_op<T>("embedding_lookup", std::move(out_shape), std::move(out), {table});
    if (result.requires_grad()) {
        auto tn = table.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [tn, rn, ids, d]() {
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const T* g = rn->grad.data() + std::int64_t(i) * d;
                T* dst = tn->grad.data() + std::int64_t(ids[i]) * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
    }
    return result;
}

// Swap two dims (copying).
template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t dim_a, std::size_t dim_b) {
    if (dim_a >= x.rank() || dim_b >= x.rank())
        throw DimensionError("transpose: dim out of range for shape " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    std::swap(out_shape[dim_a], out_shape[dim_b]);

    const Shape& in_shape = x.shape();
    const std::size_t rank = in_shape.size();
    std::vector<std::int64_t> in_strides(rank, 1), out_strides(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    for (std::size_t i = rank - 1; i-- > 0;) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

    // permutation: out dim i reads from in dim perm[i]
    std::vector<std::size_t> perm(rank);
    for (std::size_t i = 0; i < rank; ++i) perm[i] = i;
    std::swap(perm[dim_a], perm[dim_b]);

    const std::int64_t n = x.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(rank, 0);
    std::vector<std::int64_t> src_map(static_cast<std::size_t>(n));
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t src = 0;
        for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[perm[i]];
        out[std::size_t(lin)] = x.value()[std::size_t(src)];
        src_map[std::size_t(lin)] = src;
        for (std::size_t i = rank; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    Tensor<T> result = detail::finish_op<T>("transpose", std::move(out_shape), std::move(out), {x});
    if (result.requires_grad()) {
        auto xn = x.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [xn, rn, src_map]() {
            xn->ensure_grad();
            for (std::size_t lin = 0; lin < src_map.size(); ++lin)
                xn->grad[std::size_t(src_map[lin])] += rn->grad[lin];
        };
    }
    return result;
}

// Same data, new shape.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    std::vector<T> out(x.value());
    Tensor<T> result = detail::finish_op<T>("reshape", std::move(new_shape), std::move(out), {x});
    if (result.requires_grad()) {
        auto xn = x.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [xn, rn]() { detail::accumulate(xn, rn->grad); };
    }
    return result;
}

// Concatenate along `dim`.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t dim) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (dim >= s0.size()) throw DimensionError("concat: dim out of range");
    Shape out_shape = s0;
    std::int64_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != dim && s[i] != s0[i])
                throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(s0));
        total += s[dim];
    }
    out_shape[dim] = total;

    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= s0[i];
    for (std::size_t i = dim + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
    std::int64_t col_off = 0;
    for (const auto& p : parts) {
        const std::int64_t cols = p.shape()[dim];
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(p.value().data() + o * cols * inner, cols * inner,
                        out.data() + (o * total + col_off) * inner);
        }
        col_off += cols;
    }

    bool needs_grad = false;
    for (const auto& p : parts) needs_grad = needs_grad || p.requires_grad();
    Tensor<T> result = Tensor<T>::make(std::move(out_shape), std::move(out), needs_grad, "concat");
    if (needs_grad) {
        std::vector<std::shared_ptr<TensorNode<T>>> pnodes;
        std::vector<std::int64_t> widths;
        for (const auto& p : parts) {
            pnodes.push_back(p.node());
            widths.push_back(p.shape()[dim]);
            result.node()->parents.push_back(p.node());
        }
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [pnodes, widths, rn, outer, inner, total]() {
            std::int64_t col_off2 = 0;
            for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                const std::int64_t cols = widths[pi];
                if (pnodes[pi]->requires_grad) {
                    pnodes[pi]->ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* src = rn->grad.data() + (o * total + col_off2) * inner;
                        T* dst = pnodes[pi]->grad.data() + o * cols * inner;
                        for (std::int64_t i = 0; i < cols * inner; ++i) dst[i] += src[i];
                    }
                }
                col_off2 += cols;
            }
        };
    }
    return result;
}

// Contiguous sub-range [start, start+len) along `dim`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t dim, std::int64_t start, std::int64_t len) {
    if (dim >= x.rank()) throw DimensionError("slice: dim out of range");
    const Shape& s = x.shape();
    if (start < 0 || len < 0 || start + len > s[dim])
        throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of bounds for extent " + std::to_string(s[dim]));
    Shape out_shape = s;
    out_shape[dim] = len;
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= s[i];
    for (std::size_t i = dim + 1; i < s.size(); ++i) inner *= s[i];
    const std::int64_t cols = s[dim];

    std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(x.value().data() + (o * cols + start) * inner, len * inner, out.data() + o * len * inner);

    Tensor<T> result = detail::finish_op<T>("slice", std::move(out_shape), std::move(out), {x});
    if (result.requires_grad()) {
        auto xn = x.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [xn, rn, outer, inner, cols, start, len]() {
            xn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* src = rn->grad.data() + o * len * inner;
                T* dst = xn->grad.data() + (o * cols + start) * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    }
    return result;
}

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    if (x.rank() < 1 || x.shape().back() < 1)
        throw DimensionError("softmax_lastdim: empty last dim in shape " + shape_str(x.shape()));
    const std::int64_t d = x.shape().back();
    const std::int64_t rows = x.numel() / d;
    std::vector<T> out(x.value().size());
    for (std::int64_t r = 0; r < rows; ++r)
        detail::softmax_row(x.value().data() + r * d, out.data() + r * d, d);
    Tensor<T> result = detail::finish_op<T>("softmax_lastdim", x.shape(), std::move(out), {x});
    if (result.requires_grad()) {
        auto xn = x.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [xn, rn, rows, d]() {
            xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* p = rn->value.data() + r * d;
                const T* g = rn->grad.data() + r * d;
                T dot = 0;
                for (std::int64_t i = 0; i < d; ++i) dot += p[i] * g[i];
                T* xg = xn->grad.data() + r * d;
                for (std::int64_t i = 0; i < d; ++i) xg[i] += p[i] * (g[i] - dot);
            }
        };
    }
    return result;
}

// Rotary position embedding over x [B,H,T,hd]; position of the t-th step is
// start_position + t. Pairs are adjacent lanes (2i, 2i+1).
namespace detail {

// cos/sin per (step, pair), shared across batch and heads
template <class T>
void rope_table(std::int64_t start_position, std::int64_t steps, std::int64_t hd, double base,
                std::vector<T>& cos_tab, std::vector<T>& sin_tab) {
    cos_tab.resize(std::size_t(steps * hd / 2));
    sin_tab.resize(std::size_t(steps * hd / 2));
    for (std::int64_t t = 0; t < steps; ++t)
        for (std::int64_t i = 0; i < hd / 2; ++i) {
            double c, s;
            rope_cos_sin(start_position + t, i, hd, base, c, s);
            cos_tab[std::size_t(t * (hd / 2) + i)] = T(c);
            sin_tab[std::size_t(t * (hd / 2) + i)] = T(s);
        }
}

} // namespace detail

template <class T>
Tensor<T> rope(const Tensor<T>& x, std::int64_t start_position, double base) {
    if (x.rank() != 4) throw DimensionError("rope: expected [B,H,T,hd], got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), H = x.dim(1), Tn = x.dim(2), hd = x.dim(3);
    if (hd % 2 != 0) throw DimensionError("rope: head_dim must be even");
    std::vector<T> cos_tab, sin_tab;
    detail::rope_table(start_position, Tn, hd, base, cos_tab, sin_tab);

    std::vector<T> out(x.value().size());
    const T* in = x.value().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t t = 0; t < Tn; ++t) {
                const std::int64_t off = ((b * H + h) * Tn + t) * hd;
                const T* ct = cos_tab.data() + t * (hd / 2);
                const T* st = sin_tab.data() + t * (hd / 2);
                for (std::int64_t i = 0; i < hd / 2; ++i) {
                    const T x0 = in[off + 2 * i], x1 = in[off + 2 * i + 1];
                    out[std::size_t(off + 2 * i)] = x0 * ct[i] - x1 * st[i];
                    out[std::size_t(off + 2 * i + 1)] = x0 * st[i] + x1 * ct[i];
                }
            }
    Tensor<T> result = detail::finish_op<T>("rope", x.shape(), std::move(out), {x});
    if (result.requires_grad()) {
        auto xn = x.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [xn, rn, B, H, Tn, hd, cos_tab, sin_tab]() {
            xn->ensure_grad();
            const T* g = rn->grad.data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t t = 0; t < Tn; ++t) {
                        const std::int64_t off = ((b * H + h) * Tn + t) * hd;
                        const T* ct = cos_tab.data() + t * (hd / 2);
                        const T* st = sin_tab.data() + t * (hd / 2);
                        for (std::int64_t i = 0; i < hd / 2; ++i) {
                            const T g0 = g[off + 2 * i], g1 = g[off + 2 * i + 1];
                            // transpose of the rotation: rotate grads by -angle
                            xn->grad[std::size_t(off + 2 * i)] += g0 * ct[i] + g1 * st[i];
                            xn->grad[std::size_t(off + 2 * i + 1)] += -g0 * st[i] + g1 * ct[i];
                        }
                    }
        };
    }
    return result;
}

// Sum of all elements -> scalar.
template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
    T acc = 0;
    for (const T v : x.value()) acc += v;
    Tensor<T> result = detail::finish_op<T>("reduce_sum", Shape{}, std::vector<T>{acc}, {x});
    if (result.requires_grad()) {
        auto xn = x.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [xn, rn]() {
            xn->ensure_grad();
            const T g = rn->grad[0];
            for (auto& v : xn->grad) v += g;
        };
    }
    return result;
}

namespace detail {

// Shared core of l1_loss / l2_loss: sum of |a-b| (or (a-b)^2) divided by the
// first extent (per_position) or by numel (per_element).
template <class T, bool squared>
Tensor<T> gap_loss(const Tensor<T>& a, const Tensor<T>& b, LossNormalize mode, const char* name) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(name) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a.rank() < 1) throw DimensionError(std::string(name) + ": input must have rank >= 1");
    const T denom = mode == LossNormalize::per_position ? T(a.dim(0)) : T(a.numel());
    T acc = 0;
    for (std::size_t i = 0; i < a.value().size(); ++i) {
        const T d = a.value()[i] - b.value()[i];
        acc += squared ? d * d : std::abs(d);
    }
    const T inv = T(1) / denom;
    Tensor<T> result = finish_op<T>(name, Shape{}, std::vector<T>{acc * inv}, {a, b});
    if (result.requires_grad()) {
        auto an = a.node(), bn = b.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [an, bn, rn, inv]() {
            const T g = rn->grad[0] * inv;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t i = 0; i < an->value.size(); ++i) {
                const T d = an->value[i] - bn->value[i];
                T dd;
                if constexpr (squared) {
                    dd = T(2) * d * g;
                } else {
                    dd = (d > T(0) ? g : (d < T(0) ? -g : T(0)));
                }
                if (an->requires_grad) an->grad[i] += dd;
                if (bn->requires_grad) bn->grad[i] -= dd;
            }
        };
    }
    return result;
}

} // namespace detail

template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b, LossNormalize mode) {
    return detail::gap_loss<T, false>(a, b, mode, "l1_loss");
}

// Squared-error counterpart under the same aggregation (no square root).
template <class T>
Tensor<T> l2_loss(const Tensor<T>& a, const Tensor<T>& b, LossNormalize mode) {
    return detail::gap_loss<T, true>(a, b, mode, "l2_loss");
}

// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
template <class T>
Tensor<T> kl_divergence_lastdim(const Tensor<T>& p_logits, const Tensor<T>& q_logits) {
    if (p_logits.shape() != q_logits.shape())
        throw DimensionError("kl_divergence_lastdim: shape " + shape_str(p_logits.shape()) + " vs " +
                             shape_str(q_logits.shape()));
    const std::int64_t d = p_logits.shape().back();
    const std::int64_t rows = p_logits.numel() / d;
    std::vector<T> p_prob(p_logits.value().size()), q_prob(q_logits.value().size());
    std::vector<T> row_kl(static_cast<std::size_t>(rows));
    T acc = 0;
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* pl = p_logits.value().data() + r * d;
        const T* ql = q_logits.value().data() + r * d;
        detail::softmax_row(pl, p_prob.data() + r * d, d);
        detail::softmax_row(ql, q_prob.data() + r * d, d);
        const T lse_p = detail::logsumexp_row(pl, d);
        const T lse_q = detail::logsumexp_row(ql, d);
        T kl = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            const T pp = p_prob[std::size_t(r * d + i)];
            if (pp > T(0)) kl += pp * ((pl[i] - lse_p) - (ql[i] - lse_q));
        }
        row_kl[std::size_t(r)] = kl;
        acc += kl;
    }
    const T inv = T(1) / T(rows);
    Tensor<T> result =
        detail::finish_op<T>("kl_divergence_lastdim", Shape{}, std::vector<T>{acc * inv}, {p_logits, q_logits});
    if (result.requires_grad()) {
        auto pn = p_logits.node(), qn = q_logits.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [pn, qn, rn, rows, d, p_prob, q_prob, row_kl, inv]() {
            const T g = rn->grad[0] * inv;
            if (pn->requires_grad) pn->ensure_grad();
            if (qn->requires_grad) qn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* pp = p_prob.data() + r * d;
                const T* qp = q_prob.data() + r * d;
                if (qn->requires_grad) {
                    T* qg = qn->grad.data() + r * d;
                    for (std::int64_t i = 0; i < d; ++i) qg[i] += g * (qp[i] - pp[i]);
                }
                if (pn->requires_grad) {
                    // d/dp_j sum_i p_i (logp_i - logq_i) = p_j (s_j - KL_row),
                    // s_j = logp_j - logq_j
                    const T kl = row_kl[std::size_t(r)];
                    T* pg = pn->grad.data() + r * d;
                    const T* pl = pn->value.data() + r * d;
                    const T* ql = qn->value.data() + r * d;
                    const T lse_p = detail::logsumexp_row(pl, d);
                    const T lse_q = detail::logsumexp_row(ql, d);
                    for (std::int64_t i = 0; i < d; ++i) {
                        const T s = (pl[i] - lse_p) - (ql[i] - lse_q);
                        pg[i] += g * pp[i] * (s - kl);
                    }
                }
            }
        };
    }
    return result;
}

// Mean next-token cross-entropy: logits [.., V] flattened into rows, one
// target id per row.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int32_t>& targets) {
    if (logits.rank() < 1) throw DimensionError("cross_entropy: logits must have rank >= 1");
    const std::int64_t vocab = logits.shape().back();
    const std::int64_t rows = logits.numel() / vocab;
    if (rows != std::int64_t(targets.size()))
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " rows");
    T acc = 0;
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::int32_t t = targets[std::size_t(r)];
        if (t < 0 || t >= vocab) throw ContractError("cross_entropy: target id out of range");
        const T* row = logits.value().data() + r * vocab;
        acc += detail::logsumexp_row(row, vocab) - row[t];
    }
    const T inv = T(1) / T(rows);
    Tensor<T> result = detail::finish_op<T>("cross_entropy", Shape{}, std::vector<T>{acc * inv}, {logits});
    if (result.requires_grad()) {
        auto ln = logits.node();
        TensorNode<T>* rn = result.node().get();
        result.node()->backward_fn = [ln, rn, targets, rows, vocab, inv]() {
            ln->ensure_grad();
            const T g = rn->grad[0] * inv;
            std::vector<T> prob(static_cast<std::size_t>(vocab));
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* row = ln->value.data() + r * vocab;
                detail::softmax_row(row, prob.data(), vocab);
                T* lg = ln->grad.data() + r * vocab;
                for (std::int64_t i = 0; i < vocab; ++i) lg[i] += g * prob[std::size_t(i)];
                lg[targets[std::size_t(r)]] -= g;
            }
        };
    }
    return result;
}

// Reverse-mode sweep from a scalar loss. Gradients accumulate on every
// requires_grad node reachable through the recorded parents.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // iterative DFS post-order
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    struct Frame {
        TensorNode<T>* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode<T>* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn();
    }
}

} // namespace absorber

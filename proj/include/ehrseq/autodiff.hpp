#pragma once

// Reverse-mode differentiation over dense fp64 tensors.
//
// A Tensor is a shared handle to a graph node. Values are stored flat in
// row-major order; mat() views any tensor as (product of leading dims) x
// (last dim). Ops record a backward closure only when some input requires
// a gradient and recording is enabled (see NoGradGuard).

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "ehrseq/kernels.hpp"

namespace ehrseq {

class Rng;

using Shape = std::vector<Index>;

struct Node {
    Shape shape;
    Eigen::VectorXd value;
    Eigen::VectorXd grad;  // empty until something flows into it
    bool requires_grad{false};
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Index rows() const;
    Index cols() const { return shape.empty() ? 1 : shape.back(); }
    Eigen::VectorXd& grad_buffer();
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from(const Matrix& m, bool requires_grad = false);
    static Tensor from(Shape shape, Eigen::VectorXd data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    Index rows() const { return node_->rows(); }
    Index cols() const { return node_->cols(); }
    Index numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    Eigen::Map<const Matrix> mat() const;
    /// Mutable view; only for leaves (parameter updates, initialisation).
    Eigen::Map<Matrix> mutable_mat();
    const Eigen::VectorXd& data() const { return node_->value; }
    Eigen::VectorXd& mutable_data() { return node_->value; }
    double item() const;

    /// Gradient as a matrix view; zero-sized when nothing has flowed in.
    Eigen::Map<const Matrix> grad() const;
    Eigen::VectorXd& grad_data() { return node_->grad_buffer(); }
    void zero_grad();

    /// Back-propagates from this scalar (seed `seed`). Leaf gradients accumulate.
    void backward(double seed = 1.0) const;

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T

// Elementwise and broadcasting
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_row(const Tensor& x, const Tensor& row);  // x[m,n] + row[n]
Tensor mul_row(const Tensor& x, const Tensor& row);  // x[m,n] * row[n]
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

// Activations
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
/// Gated units: split the columns of `x` into halves (value, gate).
Tensor geglu(const Tensor& x);   // value * gelu(gate)
Tensor swiglu(const Tensor& x);  // silu(gate) * value

// Indexing
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor gather_cols(const Tensor& x, std::span<const int> cols);
Tensor slice_cols(const Tensor& x, Index start, Index count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor select_row(const Tensor& x, Index row);
/// Sum over streams of table_s[ids_s[p]] for every position p.
Tensor embedding_sum(std::span<const Tensor> tables, std::span<const std::span<const int>> ids);
/// Stacks equal-shape 2-D tensors into [B, rows, cols].
Tensor stack(std::span<const Tensor> parts);

// Normalisation
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kNormEps);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = kNormEps);
Tensor softmax_rows(const Tensor& x);

// Sequence mixers
/// Rotary encoding applied independently to each of `n_heads` column blocks.
Tensor rope(const Tensor& x, Index n_heads, double base = 10000.0);
/// Multi-head scaled dot-product attention. q,k: [L, H*dk], v: [L, H*dv].
/// `key_mask` (length L, may be empty) marks keys that can be attended.
/// Returns the concatenated head outputs [L, H*dv].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index n_heads, bool causal,
                 std::span<const bool> key_mask = {});
/// Attention weights of head `head` (no gradient), for inspection.
Matrix attention_weights(const Matrix& q, const Matrix& k, Index n_heads, Index head, bool causal,
                         std::span<const bool> key_mask = {});
/// Depthwise causal convolution: y[t,d] = b[d] + sum_j w[d,j] x[t-K+1+j, d].
Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b);
/// Selective diagonal SSM with zero-order-hold discretisation.
/// u, delta: [L, D]; a: [D, N]; b, c: [L, N]. Returns y: [L, D].
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b,
                      const Tensor& c);

// Losses
/// Sum over rows with target >= 0 of -log softmax(logits)[target].
Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets);
/// Binary cross-entropy of a 1x1 logit.
Tensor bce_with_logits(const Tensor& logit, double label);

Tensor dropout(const Tensor& x, double p, Rng& rng);

}  // namespace ehrseq

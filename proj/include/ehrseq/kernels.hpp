#pragma once

// Forward kernels shared by the autodiff ops and usable on any Eigen
// expression. Rows are sequence positions, columns are features.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace ehrseq {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = RowMatrix<double>;
using Index = Eigen::Index;

inline constexpr double kNormEps = 1e-5;

template <typename Scalar>
Scalar gelu(Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
    const Scalar pdf = std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    return cdf + x * pdf;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x))
                          : std::exp(x) / (Scalar(1) + std::exp(x));
}

template <typename Scalar>
Scalar silu(Scalar x) {
    return x * sigmoid(x);
}

template <typename Scalar>
Scalar silu_grad(Scalar x) {
    const Scalar s = sigmoid(x);
    return s * (Scalar(1) + x * (Scalar(1) - s));
}

template <typename Scalar>
Scalar softplus(Scalar x) {
    return x > Scalar(30) ? x : std::log1p(std::exp(x));
}

/// Row-wise softmax with max subtraction. Rows that are entirely -inf
/// (fully masked) come out as zeros.
template <typename Derived>
RowMatrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
    using Scalar = typename Derived::Scalar;
    RowMatrix<Scalar> out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar m = x.row(r).maxCoeff();
        if (m == -std::numeric_limits<Scalar>::infinity()) {
            out.row(r).setZero();
            continue;
        }
        // Vectorised exp(-inf) can return a denormal, so masked entries are zeroed explicitly.
        const Scalar ninf = -std::numeric_limits<Scalar>::infinity();
        out.row(r) = (x.row(r).array() == ninf).select(Scalar(0), (x.row(r).array() - m).exp()).matrix();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

template <typename Derived, typename G, typename B>
RowMatrix<typename Derived::Scalar> layer_norm_rows(const Eigen::MatrixBase<Derived>& x,
                                                    const Eigen::MatrixBase<G>& gain,
                                                    const Eigen::MatrixBase<B>& bias,
                                                    typename Derived::Scalar eps = kNormEps) {
    using Scalar = typename Derived::Scalar;
    RowMatrix<Scalar> out(x.rows(), x.cols());
    const auto n = static_cast<Scalar>(x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar mean = x.row(r).sum() / n;
        const auto centered = (x.row(r).array() - mean).eval();
        const Scalar var = centered.square().sum() / n;
        out.row(r) = (centered / std::sqrt(var + eps) * gain.reshaped().transpose().array() +
                      bias.reshaped().transpose().array())
                         .matrix();
    }
    return out;
}

template <typename Derived, typename G>
RowMatrix<typename Derived::Scalar> rms_norm_rows(const Eigen::MatrixBase<Derived>& x,
                                                  const Eigen::MatrixBase<G>& gain,
                                                  typename Derived::Scalar eps = kNormEps) {
    using Scalar = typename Derived::Scalar;
    RowMatrix<Scalar> out(x.rows(), x.cols());
    const auto n = static_cast<Scalar>(x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar inv = Scalar(1) / std::sqrt(x.row(r).squaredNorm() / n + eps);
        out.row(r) = (x.row(r).array() * inv * gain.reshaped().transpose().array()).matrix();
    }
    return out;
}

/// Rotary position encoding on consecutive feature pairs (2j, 2j+1) with
/// angle (offset + row) * base^(-2j/d).
template <typename Derived>
RowMatrix<typename Derived::Scalar> rope_rotate(const Eigen::MatrixBase<Derived>& x,
                                                typename Derived::Scalar base = 10000,
                                                Index offset = 0, bool inverse = false) {
    using Scalar = typename Derived::Scalar;
    const Index d = x.cols();
    if (d % 2 != 0) throw std::invalid_argument("rope needs an even feature dimension");
    RowMatrix<Scalar> out(x.rows(), d);
    for (Index r = 0; r < x.rows(); ++r) {
        const auto pos = static_cast<Scalar>(r + offset);
        for (Index j = 0; j < d / 2; ++j) {
            const Scalar theta =
                pos * std::pow(base, -Scalar(2) * static_cast<Scalar>(j) / static_cast<Scalar>(d));
            const Scalar c = std::cos(theta);
            const Scalar s = inverse ? -std::sin(theta) : std::sin(theta);
            const Scalar a = x(r, 2 * j), b = x(r, 2 * j + 1);
            out(r, 2 * j) = a * c - b * s;
            out(r, 2 * j + 1) = a * s + b * c;
        }
    }
    return out;
}

template <typename Scalar>
struct Discretized {
    Scalar abar;
    Scalar bbar;
};

inline constexpr double kZohSeriesCutoff = 1e-6;

/// Zero-order hold for a diagonal state entry: abar = exp(delta a),
/// bbar = ((exp(delta a) - 1) / a) b_in, with a series for small |delta a|.
template <typename Scalar>
Discretized<Scalar> discretize_zoh(Scalar a, Scalar b_in, Scalar delta) {
    const Scalar z = delta * a;
    const Scalar abar = std::exp(z);
    if (std::abs(z) < Scalar(kZohSeriesCutoff)) {
        return {abar, delta * b_in * (Scalar(1) + z / Scalar(2) + z * z / Scalar(6))};
    }
    return {abar, std::expm1(z) / a * b_in};
}

/// Diagonal state-space recurrence h_k = abar_k * h_{k-1} + bbar_k x_k,
/// y_k = <c_k, h_k>, h_0 = 0. Parameter matrices are L x N (state size N).
template <typename DX, typename DA, typename DB, typename DC>
Vector<typename DX::Scalar> ssm_scan(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DA>& abar,
                                     const Eigen::MatrixBase<DB>& bbar, const Eigen::MatrixBase<DC>& c) {
    using Scalar = typename DX::Scalar;
    const Index L = x.size();
    if (abar.rows() != L || bbar.rows() != L || c.rows() != L || abar.cols() != bbar.cols() ||
        abar.cols() != c.cols()) {
        throw std::invalid_argument("ssm_scan length mismatch");
    }
    Vector<Scalar> y(L);
    Eigen::Array<Scalar, 1, Eigen::Dynamic> h = Eigen::Array<Scalar, 1, Eigen::Dynamic>::Zero(abar.cols());
    for (Index k = 0; k < L; ++k) {
        h = abar.row(k).array() * h + bbar.row(k).array() * x(k);
        y(k) = (c.row(k).array() * h).sum();
    }
    return y;
}

/// Convolution kernel of a time-invariant diagonal SSM:
/// K_k = sum_n c_n abar_n^k bbar_n for k = 0..L-1.
template <typename DA, typename DB, typename DC>
Vector<typename DA::Scalar> conv_kernel(const Eigen::MatrixBase<DA>& abar, const Eigen::MatrixBase<DB>& bbar,
                                        const Eigen::MatrixBase<DC>& c, Index L) {
    using Scalar = typename DA::Scalar;
    Vector<Scalar> K(L);
    Eigen::Array<Scalar, Eigen::Dynamic, 1> power = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Ones(abar.size());
    for (Index k = 0; k < L; ++k) {
        K(k) = (c.reshaped().array() * power * bbar.reshaped().array()).sum();
        power *= abar.reshaped().array();
    }
    return K;
}

/// Causal convolution y_k = sum_{j<=k} K_j x_{k-j}.
template <typename DX, typename DK>
Vector<typename DX::Scalar> causal_convolve(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DK>& K) {
    using Scalar = typename DX::Scalar;
    const Index L = x.size();
    Vector<Scalar> y = Vector<Scalar>::Zero(L);
    for (Index k = 0; k < L; ++k) {
        for (Index j = 0; j <= k && j < K.size(); ++j) y(k) += K(j) * x(k - j);
    }
    return y;
}

}  // namespace ehrseq

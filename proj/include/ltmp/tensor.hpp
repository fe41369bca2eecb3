#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ltmp {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Raised when a kernel produces or receives NaN/Inf.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

inline std::size_t shape_volume(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor. Rank 0 is not used; scalars are shape {1}.
template <std::floating_point T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_volume(shape_), T(0)) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_volume(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor vector(std::vector<T> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<T> values;
        values.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
            values.insert(values.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Leading extent for matrices; 1 for vectors.
    std::size_t rows() const noexcept { return rank() == 2 ? shape_[0] : 1; }
    /// Trailing extent.
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) noexcept { return std::span<T>(data_).subspan(r * cols(), cols()); }
    std::span<const T> row(std::size_t r) const noexcept {
        return std::span<const T>(data_).subspan(r * cols(), cols());
    }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T v) noexcept { std::fill(data_.begin(), data_.end(), v); }

    Tensor& operator+=(const Tensor& other) {
        if (other.shape_ != shape_) {
            throw ShapeError("shape mismatch in +=: " + shape_string(shape_) + " vs " +
                             shape_string(other.shape_));
        }
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    template <std::floating_point U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

namespace detail {

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const RowMajor<T>> as_matrix(const Tensor<T>& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <class T>
Eigen::Map<RowMajor<T>> as_matrix(Tensor<T>& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <class T>
void require_matrix(const Tensor<T>& t, const char* what) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
    }
}

}  // namespace detail

/// a[m x k] * b[k x p]
template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner extents disagree: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    Tensor<T> out({a.rows(), b.cols()});
    detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b);
    return out;
}

/// a[m x k] * b[p x k]^T
template <std::floating_point T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul_nt");
    detail::require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt inner extents disagree: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
    }
    Tensor<T> out({a.rows(), b.rows()});
    detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b).transpose();
    return out;
}

/// a[k x m]^T * b[k x p]
template <std::floating_point T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul_tn");
    detail::require_matrix(b, "matmul_tn");
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn inner extents disagree: " + shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()));
    }
    Tensor<T> out({a.cols(), b.cols()});
    detail::as_matrix(out).noalias() = detail::as_matrix(a).transpose() * detail::as_matrix(b);
    return out;
}

template <std::floating_point T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    detail::require_matrix(a, "softmax_rows");
    if (!a.all_finite()) throw NumericError("softmax_rows: non-finite input");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto in = a.row(i);
        auto o = out.row(i);
        const T peak = *std::max_element(in.begin(), in.end());
        T total = 0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = std::exp(in[j] - peak);
            total += o[j];
        }
        for (auto& v : o) v /= total;
    }
    return out;
}

/// S_ij = exp(A_ij) m_j / sum_k exp(A_ik) m_k, shifted by the row max over
/// columns with m_j > 0. Columns with m_j == 0 come out exactly zero.
template <std::floating_point T>
Tensor<T> masked_softmax_rows(const Tensor<T>& a, std::span<const T> mask) {
    detail::require_matrix(a, "masked_softmax_rows");
    if (mask.size() != a.cols()) {
        throw ShapeError("masked_softmax_rows: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(a.cols()) + " columns");
    }
    if (!a.all_finite()) throw NumericError("masked_softmax_rows: non-finite input");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto in = a.row(i);
        auto o = out.row(i);
        T peak = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < in.size(); ++j) {
            if (mask[j] > T(0)) peak = std::max(peak, in[j]);
        }
        if (!std::isfinite(peak)) throw NumericError("masked_softmax_rows: row has no unmasked column");
        T total = 0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = mask[j] > T(0) ? std::exp(in[j] - peak) * mask[j] : T(0);
            total += o[j];
        }
        if (!(total > T(0))) throw NumericError("masked_softmax_rows: zero denominator");
        for (auto& v : o) v /= total;
    }
    return out;
}

template <std::floating_point T>
struct LayerNormResult {
    Tensor<T> out;
    Tensor<T> normalized;       // (x - mean) * rstd, before the affine map
    std::vector<T> inv_std;     // per row
};

inline constexpr double kLayerNormEps = 1e-6;

/// Per-row normalization over the last axis, then gamma/beta.
template <std::floating_point T>
LayerNormResult<T> layer_norm_full(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                   T eps = T(kLayerNormEps)) {
    detail::require_matrix(x, "layer_norm");
    const std::size_t d = x.cols();
    if (d == 0) throw ShapeError("layer_norm: embedding dimension must be >= 1");
    if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: affine parameter length mismatch");
    LayerNormResult<T> r{Tensor<T>(x.shape()), Tensor<T>(x.shape()), std::vector<T>(x.rows())};
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto in = x.row(i);
        T mean = 0;
        for (T v : in) mean += v;
        mean /= T(d);
        T var = 0;
        for (T v : in) var += (v - mean) * (v - mean);
        var /= T(d);
        const T rstd = T(1) / std::sqrt(var + eps);
        r.inv_std[i] = rstd;
        auto nrm = r.normalized.row(i);
        auto o = r.out.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            nrm[j] = (in[j] - mean) * rstd;
            o[j] = nrm[j] * gamma[j] + beta[j];
        }
    }
    return r;
}

template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(kLayerNormEps)) {
    return layer_norm_full(x, gamma, beta, eps).out;
}

/// Exact GELU, x * Phi(x).
template <std::floating_point T>
T gelu(T x) noexcept {
    return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <std::floating_point T>
T gelu_derivative(T x) noexcept {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
    return out;
}

template <std::floating_point T>
T sigmoid(T x) noexcept {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace ltmp

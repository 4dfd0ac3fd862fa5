#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "dsdf/errors.hpp"

namespace dsdf {

/// Dense row-major matrix over an arbitrary floating-point scalar.
/// Sized for desk-scale models; no view machinery, just owning storage.
template <typename Scalar>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, Scalar fill = Scalar(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix from_rows(std::initializer_list<std::initializer_list<Scalar>> rows) {
        Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
        std::size_t r = 0;
        for (const auto& row : rows) {
            if (row.size() != m.cols())
                throw InputError("Matrix::from_rows: ragged initializer");
            std::size_t c = 0;
            for (Scalar v : row) m(r, c++) = v;
            ++r;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    Scalar& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    Scalar operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    Scalar* row(std::size_t r) { return data_.data() + r * cols_; }
    const Scalar* row(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<Scalar>& data() noexcept { return data_; }
    const std::vector<Scalar>& data() const noexcept { return data_; }

    void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<Scalar> data_;
};

template <typename Scalar>
using Vector = std::vector<Scalar>;

// ---- small dense kernels -------------------------------------------------

/// y = M x
template <typename Scalar>
Vector<Scalar> matvec(const Matrix<Scalar>& m, const Vector<Scalar>& x) {
    if (m.cols() != x.size()) throw InputError("matvec: dimension mismatch");
    Vector<Scalar> y(m.rows(), Scalar(0));
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const Scalar* row = m.row(r);
        Scalar acc = Scalar(0);
        for (std::size_t c = 0; c < m.cols(); ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

/// y = M^T x
template <typename Scalar>
Vector<Scalar> matvec_transposed(const Matrix<Scalar>& m, const Vector<Scalar>& x) {
    if (m.rows() != x.size()) throw InputError("matvec_transposed: dimension mismatch");
    Vector<Scalar> y(m.cols(), Scalar(0));
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const Scalar* row = m.row(r);
        const Scalar xi = x[r];
        for (std::size_t c = 0; c < m.cols(); ++c) y[c] += row[c] * xi;
    }
    return y;
}

/// M += a b^T
template <typename Scalar>
void add_outer(Matrix<Scalar>& m, const Vector<Scalar>& a, const Vector<Scalar>& b) {
    if (m.rows() != a.size() || m.cols() != b.size())
        throw InputError("add_outer: dimension mismatch");
    for (std::size_t r = 0; r < m.rows(); ++r) {
        Scalar* row = m.row(r);
        const Scalar ar = a[r];
        for (std::size_t c = 0; c < m.cols(); ++c) row[c] += ar * b[c];
    }
}

template <typename Scalar>
void axpy(Scalar alpha, const Vector<Scalar>& x, Vector<Scalar>& y) {
    if (x.size() != y.size()) throw InputError("axpy: dimension mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <typename Scalar>
Scalar dot(const Vector<Scalar>& a, const Vector<Scalar>& b) {
    if (a.size() != b.size()) throw InputError("dot: dimension mismatch");
    Scalar acc = Scalar(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename Scalar>
Scalar norm2(const Vector<Scalar>& a) {
    using std::sqrt;
    return sqrt(dot(a, a));
}

// ---- seeded randomness ---------------------------------------------------

/// Deterministic random source. Every stochastic choice in the library draws
/// from an explicitly seeded Rng so reruns reproduce bit-identical results.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(gen_);
    }

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen_);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), gen_);
    }

    std::mt19937_64& engine() noexcept { return gen_; }

private:
    std::mt19937_64 gen_;
};

} // namespace dsdf

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace kvo::numerics {

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return rows_ == 0 || cols_ == 0; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    Matrix transpose() const;

    // Rows [first, first + count) as a new matrix.
    Matrix row_block(std::size_t first, std::size_t count) const;

    // Appends rows of `other`; column counts must agree (an empty matrix
    // adopts the column count of the first append).
    void append_rows(const Matrix& other);
    void append_row(std::span<const double> values);

    void reserve_rows(std::size_t n) { data_.reserve(n * cols_); }

    bool all_finite() const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

// a · bᵀ without materializing the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

// Row vector times matrix: x (len = m.rows()) · m.
std::vector<double> vecmat(std::span<const double> x, const Matrix& m);

double dot(std::span<const double> a, std::span<const double> b);

std::vector<double> column_sums(const Matrix& m);

double frobenius_norm(const Matrix& m);

// ‖a − b‖_F; shapes must agree.
double frobenius_distance(const Matrix& a, const Matrix& b);

// max |mᵀm − I| over all entries.
double orthonormality_error(const Matrix& m);

// ‖m − m·v·vᵀ‖_F: residual of projecting the rows of m onto span(v).
double projection_residual(const Matrix& m, const Matrix& v);

struct SvdOptions {
    // Relative off-diagonal threshold for a Jacobi rotation; a column pair is
    // treated as converged when |⟨a,b⟩| ≤ tolerance·‖a‖‖b‖.
    double tolerance = 1e-10;
    int max_sweeps = 80;
};

struct SvdResult {
    std::vector<double> singular_values;  // descending
    Matrix right_vectors;                 // D × k, column j pairs with singular_values[j]
};

// Right singular vectors and singular values of m, sorted by descending
// singular value. Computed with one-sided (Hestenes) Jacobi on whichever of
// m / mᵀ has fewer columns; when N < D the basis is completed to D columns.
SvdResult svd_right(const Matrix& m, const SvdOptions& options = {});

// Top-r right singular vectors of m as a D × r matrix with orthonormal columns.
// Throws ParameterError unless 1 ≤ r ≤ min(N, D), NumericError on
// non-convergence or non-finite input.
Matrix svd_top_r(const Matrix& m, std::size_t r, const SvdOptions& options = {});

// Solves (a + ridge·I) x = b for symmetric positive definite a via Cholesky.
// b may have several columns.
Matrix cholesky_solve(const Matrix& a, const Matrix& b, double ridge = 0.0);

}  // namespace kvo::numerics

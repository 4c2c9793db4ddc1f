#include "kvo/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "kvo/error.hpp"

namespace kvo::numerics {

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ParameterError("matrix data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix Matrix::row_block(std::size_t first, std::size_t count) const {
    if (first + count > rows_) throw ParameterError("row_block out of range");
    std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(first * cols_),
                          data_.begin() + static_cast<std::ptrdiff_t>((first + count) * cols_));
    return Matrix(count, cols_, std::move(d));
}

void Matrix::append_rows(const Matrix& other) {
    if (other.rows_ == 0) return;
    if (rows_ == 0 && cols_ == 0) cols_ = other.cols_;
    if (other.cols_ != cols_) throw ParameterError("append_rows: column mismatch");
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
}

void Matrix::append_row(std::span<const double> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) throw ParameterError("append_row: column mismatch");
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ParameterError("matmul: inner dimension mismatch");
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ParameterError("matmul_transposed: inner dimension mismatch");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
    return out;
}

std::vector<double> vecmat(std::span<const double> x, const Matrix& m) {
    if (x.size() != m.rows()) throw ParameterError("vecmat: dimension mismatch");
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t k = 0; k < m.rows(); ++k) {
        const double xk = x[k];
        if (xk == 0.0) continue;
        auto mrow = m.row(k);
        for (std::size_t j = 0; j < m.cols(); ++j) out[j] += xk * mrow[j];
    }
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::vector<double> column_sums(const Matrix& m) {
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) out[c] += row[c];
    }
    return out;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data()) s += v * v;
    return std::sqrt(s);
}

double frobenius_distance(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ParameterError("frobenius_distance: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double orthonormality_error(const Matrix& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < m.cols(); ++i) {
        for (std::size_t j = i; j < m.cols(); ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < m.rows(); ++r) s += m(r, i) * m(r, j);
            worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
        }
    }
    return worst;
}

double projection_residual(const Matrix& m, const Matrix& v) {
    const Matrix coords = matmul(m, v);
    const Matrix back = matmul_transposed(coords, v);
    return frobenius_distance(m, back);
}

namespace {

using Columns = std::vector<std::vector<double>>;

Columns to_columns(const Matrix& m) {
    Columns cols(m.cols(), std::vector<double>(m.rows()));
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) cols[c][r] = m(r, c);
    return cols;
}

double norm2(const std::vector<double>& v) { return dot(v, v); }

void rotate(std::vector<double>& p, std::vector<double>& q, double c, double s) {
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double a = p[i];
        const double b = q[i];
        p[i] = c * a - s * b;
        q[i] = s * a + c * b;
    }
}

// One-sided Jacobi: orthogonalizes the columns of `w` in place and applies the
// same rotations to `v` (initialized to identity by the caller).
void hestenes(Columns& w, Columns* v, const SvdOptions& options) {
    const std::size_t n = w.size();
    for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = norm2(w[p]);
                const double beta = norm2(w[q]);
                const double gamma = dot(w[p], w[q]);
                if (gamma == 0.0 || std::abs(gamma) <= options.tolerance * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate(w[p], w[q], c, s);
                if (v != nullptr) rotate((*v)[p], (*v)[q], c, s);
            }
        }
        if (!rotated) return;
    }
    throw NumericError("one-sided Jacobi did not converge within " + std::to_string(options.max_sweeps) +
                       " sweeps");
}

// Extends an orthonormal set of vectors of dimension `dim` to `target` vectors
// by Gram-Schmidt against the standard basis.
void complete_basis(Columns& basis, std::size_t dim, std::size_t target) {
    for (std::size_t e = 0; e < dim && basis.size() < target; ++e) {
        std::vector<double> cand(dim, 0.0);
        cand[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                const double proj = dot(cand, b);
                for (std::size_t i = 0; i < dim; ++i) cand[i] -= proj * b[i];
            }
        }
        const double nrm = std::sqrt(norm2(cand));
        if (nrm < 1e-8) continue;
        for (double& x : cand) x /= nrm;
        basis.push_back(std::move(cand));
    }
}

// R factor of a Householder QR of m (N ≥ D). R shares m's right singular
// vectors and values, so tall inputs are reduced to D × D before Jacobi.
Matrix householder_r(const Matrix& m) {
    const std::size_t n = m.rows();
    const std::size_t d = m.cols();
    Columns a = to_columns(m);
    std::vector<double> v(n);
    for (std::size_t k = 0; k < d; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < n; ++i) norm += a[k][i] * a[k][i];
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        const double alpha = a[k][k] > 0 ? -norm : norm;
        for (std::size_t i = k; i < n; ++i) v[i] = a[k][i];
        v[k] -= alpha;
        double vnorm = 0.0;
        for (std::size_t i = k; i < n; ++i) vnorm += v[i] * v[i];
        if (vnorm == 0.0) continue;
        for (std::size_t j = k; j < d; ++j) {
            double proj = 0.0;
            for (std::size_t i = k; i < n; ++i) proj += v[i] * a[j][i];
            proj = 2.0 * proj / vnorm;
            for (std::size_t i = k; i < n; ++i) a[j][i] -= proj * v[i];
        }
    }
    Matrix r(d, d);
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i <= j; ++i) r(i, j) = a[j][i];
    return r;
}

}  // namespace

SvdResult svd_right(const Matrix& m, const SvdOptions& options) {
    if (m.empty()) throw ParameterError("svd of empty matrix");
    if (!m.all_finite()) throw NumericError("svd input contains non-finite values");

    const std::size_t n = m.rows();
    const std::size_t d = m.cols();
    std::vector<double> sv;
    Columns basis;

    if (n >= d) {
        // Rotate the D columns of m (or of its R factor when tall); the
        // accumulated rotations are V.
        Columns w = to_columns(n > 2 * d ? householder_r(m) : m);
        Columns v(d, std::vector<double>(d, 0.0));
        for (std::size_t i = 0; i < d; ++i) v[i][i] = 1.0;
        hestenes(w, &v, options);
        sv.resize(d);
        for (std::size_t j = 0; j < d; ++j) sv[j] = std::sqrt(norm2(w[j]));
        basis = std::move(v);
    } else {
        // Rotate the N columns of mᵀ; its normalized columns are the left
        // singular vectors of mᵀ, i.e. right singular vectors of m.
        Columns w = to_columns(m.transpose());
        hestenes(w, nullptr, options);
        sv.resize(n);
        for (std::size_t j = 0; j < n; ++j) sv[j] = std::sqrt(norm2(w[j]));
        basis = std::move(w);
    }

    std::vector<std::size_t> order(sv.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sv[a] > sv[b]; });

    const double cutoff = (sv.empty() ? 0.0 : sv[order.front()]) * 1e-13;
    Columns sorted;
    std::vector<double> sorted_sv;
    for (std::size_t idx : order) {
        if (n < d) {
            if (sv[idx] <= cutoff || sv[idx] == 0.0) continue;
            auto col = basis[idx];
            for (double& x : col) x /= sv[idx];
            sorted.push_back(std::move(col));
        } else {
            sorted.push_back(basis[idx]);
        }
        sorted_sv.push_back(sv[idx]);
    }
    if (sorted.size() < d) {
        complete_basis(sorted, d, d);
        sorted_sv.resize(sorted.size(), 0.0);
    }

    SvdResult result;
    result.singular_values = std::move(sorted_sv);
    result.right_vectors = Matrix(d, sorted.size());
    for (std::size_t j = 0; j < sorted.size(); ++j)
        for (std::size_t i = 0; i < d; ++i) result.right_vectors(i, j) = sorted[j][i];
    return result;
}

Matrix svd_top_r(const Matrix& m, std::size_t r, const SvdOptions& options) {
    if (r < 1 || r > std::min(m.rows(), m.cols())) {
        throw ParameterError("svd_top_r: r=" + std::to_string(r) + " outside [1, " +
                             std::to_string(std::min(m.rows(), m.cols())) + "]");
    }
    const SvdResult full = svd_right(m, options);
    Matrix out(m.cols(), r);
    for (std::size_t i = 0; i < m.cols(); ++i)
        for (std::size_t j = 0; j < r; ++j) out(i, j) = full.right_vectors(i, j);
    return out;
}

Matrix cholesky_solve(const Matrix& a, const Matrix& b, double ridge) {
    const std::size_t n = a.rows();
    if (a.cols() != n || b.rows() != n) throw ParameterError("cholesky_solve: shape mismatch");
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = a(j, j) + ridge;
        for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (!(diag > 0.0)) throw NumericError("cholesky_solve: matrix not positive definite");
        l(j, j) = std::sqrt(diag);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    Matrix x = b;
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x(ii, c);
            for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
            x(ii, c) = s / l(ii, ii);
        }
    }
    return x;
}

}  // namespace kvo::numerics

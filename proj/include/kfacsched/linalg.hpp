#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace kfacsched {

// Number of entries in the upper triangle (diagonal included) of a d x d
// matrix. This is the payload of every factor all-reduce and inverse
// broadcast.
constexpr std::uint64_t packed_size(std::uint64_t dim) {
  return dim * (dim + 1) / 2;
}

/// Dense row-major matrix. Holds layer weights and gradients.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static DenseMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double operator()(std::size_t r, std::size_t c) const {
    return values_[r * cols_ + c];
  }
  double& operator()(std::size_t r, std::size_t c) {
    return values_[r * cols_ + c];
  }

  std::span<const double> values() const noexcept { return values_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols_, cols_);
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

/// Dense symmetric matrix of dimension d >= 1.
///
/// Storage is the full d x d row-major array; every mutation writes both
/// (i, j) and (j, i), so values(i, j) == values(j, i) holds exactly.
class SymMatrix {
 public:
  explicit SymMatrix(std::size_t dim);

  static SymMatrix identity(std::size_t dim);
  // Throws ValidationError unless rows form an exactly symmetric square.
  static SymMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t dim() const noexcept { return dim_; }

  double operator()(std::size_t i, std::size_t j) const {
    return values_[i * dim_ + j];
  }
  void set(std::size_t i, std::size_t j, double v) {
    values_[i * dim_ + j] = v;
    values_[j * dim_ + i] = v;
  }

  std::span<const double> values() const noexcept { return values_; }

  friend bool operator==(const SymMatrix&, const SymMatrix&) = default;

 private:
  std::size_t dim_;
  std::vector<double> values_;
};

/// Tikhonov damping gamma >= 0, added to the diagonal before inversion.
class Damping {
 public:
  explicit Damping(double gamma);
  double gamma() const noexcept { return gamma_; }

 private:
  double gamma_;
};

DenseMatrix multiply(const DenseMatrix& lhs, const DenseMatrix& rhs);
DenseMatrix to_dense(const SymMatrix& m);
DenseMatrix transpose(const DenseMatrix& m);

SymMatrix add_identity(const SymMatrix& m, double gamma);
SymMatrix scaled(const SymMatrix& m, double factor);
// Element-wise mean in index order; all inputs must share a dimension.
SymMatrix average(std::span<const SymMatrix> ms);
DenseMatrix average(std::span<const DenseMatrix> ms);

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);
double max_abs_diff(const SymMatrix& a, const SymMatrix& b);

// (1/b) * sum_s a_s a_s^T over b samples. Each sample is one vector.
SymMatrix compute_factor_A(std::span<const std::vector<double>> activations);
SymMatrix compute_factor_G(std::span<const std::vector<double>> output_grads);
// Same contract, one sample per row.
SymMatrix compute_factor_A(const DenseMatrix& activations);
SymMatrix compute_factor_G(const DenseMatrix& output_grads);

// (m + gamma I)^{-1} through a lower Cholesky factor. Throws CholeskyError
// carrying the failing pivot when m + gamma I is not positive definite.
SymMatrix damped_inverse(const SymMatrix& m, Damping damping);

// G_inv * grad * A_inv for a d_out x d_in gradient. Equal to unvec of
// (A_inv kron G_inv) vec(grad) with column-major vec.
DenseMatrix precondition(const DenseMatrix& grad, const SymMatrix& a_inv,
                         const SymMatrix& g_inv);

inline constexpr std::size_t kDefaultKronCap = 4096;

// Kronecker product. Test oracle only; refuses results above `cap` rows.
SymMatrix kron(const SymMatrix& x, const SymMatrix& y,
               std::size_t cap = kDefaultKronCap);

std::vector<double> pack_upper(const SymMatrix& m);
SymMatrix unpack_upper(std::span<const double> packed, std::size_t dim);

// Binary fixture form: uint64 dim followed by the packed upper triangle,
// everything little-endian.
void write_packed(std::ostream& out, const SymMatrix& m);
SymMatrix read_packed(std::istream& in);

}  // namespace kfacsched

#include "kfacsched/linalg.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include "kfacsched/error.hpp"

namespace kfacsched {

namespace {

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw ValidationError(std::string(what) + " contains a non-finite value");
    }
  }
}

template <typename Rows>
SymMatrix outer_average(const Rows& samples, std::size_t count,
                        std::size_t dim, const char* what) {
  if (count == 0) {
    throw ValidationError(std::string(what) + ": empty batch");
  }
  if (dim == 0) {
    throw ValidationError(std::string(what) + ": zero-length sample");
  }
  SymMatrix out(dim);
  const double inv_b = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = i; j < dim; ++j) {
      double acc = 0.0;
      for (std::size_t s = 0; s < count; ++s) {
        acc += samples(s, i) * samples(s, j);
      }
      out.set(i, j, acc * inv_b);
    }
  }
  return out;
}

SymMatrix factor_from_vectors(std::span<const std::vector<double>> samples,
                              const char* what) {
  if (samples.empty()) {
    throw ValidationError(std::string(what) + ": empty batch");
  }
  const std::size_t dim = samples.front().size();
  for (const auto& s : samples) {
    if (s.size() != dim) {
      throw ValidationError(std::string(what) +
                            ": inconsistent sample lengths");
    }
  }
  auto at = [&](std::size_t s, std::size_t i) { return samples[s][i]; };
  return outer_average(at, samples.size(), dim, what);
}

SymMatrix factor_from_dense(const DenseMatrix& samples, const char* what) {
  auto at = [&](std::size_t s, std::size_t i) { return samples(s, i); };
  return outer_average(at, samples.rows(), samples.cols(), what);
}

std::uint64_t to_little(std::uint64_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) {
      out = (out << 8) | ((bits >> (8 * i)) & 0xff);
    }
    return out;
  }
  return bits;
}

void write_u64(std::ostream& out, std::uint64_t v) {
  const std::uint64_t le = to_little(v);
  out.write(reinterpret_cast<const char*>(&le), sizeof(le));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t le = 0;
  in.read(reinterpret_cast<char*>(&le), sizeof(le));
  if (!in) {
    throw IoError("truncated packed matrix stream");
  }
  return to_little(le);
}

}  // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {
  if (rows == 0 || cols == 0) {
    throw ValidationError("DenseMatrix dimensions must be positive");
  }
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols,
                         std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (rows == 0 || cols == 0) {
    throw ValidationError("DenseMatrix dimensions must be positive");
  }
  if (values_.size() != rows * cols) {
    throw ValidationError("DenseMatrix value count does not match shape");
  }
  require_finite(values_, "DenseMatrix");
}

DenseMatrix DenseMatrix::from_rows(
    const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows.front().empty()) {
    throw ValidationError("DenseMatrix::from_rows: empty input");
  }
  const std::size_t cols = rows.front().size();
  std::vector<double> values;
  values.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) {
      throw ValidationError("DenseMatrix::from_rows: ragged rows");
    }
    values.insert(values.end(), r.begin(), r.end());
  }
  return DenseMatrix(rows.size(), cols, std::move(values));
}

SymMatrix::SymMatrix(std::size_t dim) : dim_(dim), values_(dim * dim, 0.0) {
  if (dim == 0) {
    throw ValidationError("SymMatrix dimension must be at least 1");
  }
}

SymMatrix SymMatrix::identity(std::size_t dim) {
  SymMatrix m(dim);
  for (std::size_t i = 0; i < dim; ++i) m.set(i, i, 1.0);
  return m;
}

SymMatrix SymMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t d = rows.size();
  SymMatrix m(d);
  for (std::size_t i = 0; i < d; ++i) {
    if (rows[i].size() != d) {
      throw ValidationError("SymMatrix::from_rows: not square");
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      if (rows[i][j] != rows[j][i]) {
        throw ValidationError("SymMatrix::from_rows: not symmetric at (" +
                              std::to_string(i) + ", " + std::to_string(j) +
                              ")");
      }
      if (!std::isfinite(rows[i][j])) {
        throw ValidationError("SymMatrix::from_rows: non-finite value");
      }
      m.set(i, j, rows[i][j]);
    }
  }
  return m;
}

Damping::Damping(double gamma) : gamma_(gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw ValidationError("damping must be finite and nonnegative");
  }
}

DenseMatrix multiply(const DenseMatrix& lhs, const DenseMatrix& rhs) {
  if (lhs.cols() != rhs.rows()) {
    throw ValidationError("multiply: shape mismatch (" +
                          std::to_string(lhs.rows()) + "x" +
                          std::to_string(lhs.cols()) + " * " +
                          std::to_string(rhs.rows()) + "x" +
                          std::to_string(rhs.cols()) + ")");
  }
  DenseMatrix out(lhs.rows(), rhs.cols());
  for (std::size_t i = 0; i < lhs.rows(); ++i) {
    for (std::size_t k = 0; k < lhs.cols(); ++k) {
      const double a = lhs(i, k);
      for (std::size_t j = 0; j < rhs.cols(); ++j) {
        out(i, j) += a * rhs(k, j);
      }
    }
  }
  return out;
}

DenseMatrix to_dense(const SymMatrix& m) {
  return DenseMatrix(m.dim(), m.dim(),
                     std::vector<double>(m.values().begin(), m.values().end()));
}

DenseMatrix transpose(const DenseMatrix& m) {
  DenseMatrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  }
  return out;
}

SymMatrix add_identity(const SymMatrix& m, double gamma) {
  SymMatrix out = m;
  for (std::size_t i = 0; i < m.dim(); ++i) out.set(i, i, m(i, i) + gamma);
  return out;
}

SymMatrix scaled(const SymMatrix& m, double factor) {
  SymMatrix out(m.dim());
  for (std::size_t i = 0; i < m.dim(); ++i) {
    for (std::size_t j = i; j < m.dim(); ++j) out.set(i, j, m(i, j) * factor);
  }
  return out;
}

SymMatrix average(std::span<const SymMatrix> ms) {
  if (ms.empty()) throw ValidationError("average: no matrices");
  const std::size_t d = ms.front().dim();
  SymMatrix out(d);
  const double inv = 1.0 / static_cast<double>(ms.size());
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      double acc = 0.0;
      for (const auto& m : ms) {
        if (m.dim() != d) throw ValidationError("average: dimension mismatch");
        acc += m(i, j);
      }
      out.set(i, j, acc * inv);
    }
  }
  return out;
}

DenseMatrix average(std::span<const DenseMatrix> ms) {
  if (ms.empty()) throw ValidationError("average: no matrices");
  DenseMatrix out(ms.front().rows(), ms.front().cols());
  const double inv = 1.0 / static_cast<double>(ms.size());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) {
      double acc = 0.0;
      for (const auto& m : ms) {
        if (m.rows() != out.rows() || m.cols() != out.cols()) {
          throw ValidationError("average: shape mismatch");
        }
        acc += m(i, j);
      }
      out(i, j) = acc * inv;
    }
  }
  return out;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError("max_abs_diff: shape mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  }
  return worst;
}

double max_abs_diff(const SymMatrix& a, const SymMatrix& b) {
  if (a.dim() != b.dim()) throw ValidationError("max_abs_diff: dim mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  }
  return worst;
}

SymMatrix compute_factor_A(std::span<const std::vector<double>> activations) {
  return factor_from_vectors(activations, "compute_factor_A");
}

SymMatrix compute_factor_G(std::span<const std::vector<double>> output_grads) {
  return factor_from_vectors(output_grads, "compute_factor_G");
}

SymMatrix compute_factor_A(const DenseMatrix& activations) {
  return factor_from_dense(activations, "compute_factor_A");
}

SymMatrix compute_factor_G(const DenseMatrix& output_grads) {
  return factor_from_dense(output_grads, "compute_factor_G");
}

SymMatrix damped_inverse(const SymMatrix& m, Damping damping) {
  const std::size_t n = m.dim();
  const double gamma = damping.gamma();

  // Lower factor L with (m + gamma I) = L L^T, stored row-major.
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = m(j, j) + gamma;
    for (std::size_t k = 0; k < j; ++k) diag -= l[j * n + k] * l[j * n + k];
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      throw CholeskyError(j, diag);
    }
    const double ljj = std::sqrt(diag);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = m(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = v / ljj;
    }
  }

  // Solve L Y = I, then L^T X = Y, one column at a time.
  std::vector<double> x(n * n, 0.0);
  std::vector<double> col(n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double v = (i == c) ? 1.0 : 0.0;
      for (std::size_t k = 0; k < i; ++k) v -= l[i * n + k] * col[k];
      col[i] = v / l[i * n + i];
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double v = col[ii];
      for (std::size_t k = ii + 1; k < n; ++k) v -= l[k * n + ii] * x[k * n + c];
      x[ii * n + c] = v / l[ii * n + ii];
    }
  }

  SymMatrix out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      out.set(i, j, 0.5 * (x[i * n + j] + x[j * n + i]));
    }
  }
  return out;
}

DenseMatrix precondition(const DenseMatrix& grad, const SymMatrix& a_inv,
                         const SymMatrix& g_inv) {
  if (grad.rows() != g_inv.dim() || grad.cols() != a_inv.dim()) {
    throw ValidationError(
        "precondition: gradient is " + std::to_string(grad.rows()) + "x" +
        std::to_string(grad.cols()) + " but factors are G " +
        std::to_string(g_inv.dim()) + " and A " + std::to_string(a_inv.dim()));
  }
  return multiply(multiply(to_dense(g_inv), grad), to_dense(a_inv));
}

SymMatrix kron(const SymMatrix& x, const SymMatrix& y, std::size_t cap) {
  const std::size_t n = x.dim();
  const std::size_t m = y.dim();
  if (n > cap / m) {
    throw ValidationError("kron: result dimension " + std::to_string(n) + "*" +
                          std::to_string(m) + " exceeds cap " +
                          std::to_string(cap));
  }
  SymMatrix out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t l = 0; l < m; ++l) {
          const std::size_t r = i * m + k;
          const std::size_t c = j * m + l;
          if (r <= c) out.set(r, c, x(i, j) * y(k, l));
        }
      }
    }
  }
  return out;
}

std::vector<double> pack_upper(const SymMatrix& m) {
  std::vector<double> out;
  out.reserve(packed_size(m.dim()));
  for (std::size_t i = 0; i < m.dim(); ++i) {
    for (std::size_t j = i; j < m.dim(); ++j) out.push_back(m(i, j));
  }
  return out;
}

SymMatrix unpack_upper(std::span<const double> packed, std::size_t dim) {
  if (dim == 0 || packed.size() != packed_size(dim)) {
    throw ValidationError("unpack_upper: expected " +
                          std::to_string(packed_size(dim)) +
                          " packed entries for dim " + std::to_string(dim) +
                          ", got " + std::to_string(packed.size()));
  }
  SymMatrix out(dim);
  std::size_t k = 0;
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = i; j < dim; ++j) out.set(i, j, packed[k++]);
  }
  return out;
}

void write_packed(std::ostream& out, const SymMatrix& m) {
  write_u64(out, m.dim());
  for (double v : pack_upper(m)) write_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw IoError("failed writing packed matrix");
}

SymMatrix read_packed(std::istream& in) {
  const std::uint64_t dim = read_u64(in);
  if (dim == 0 || dim > (1u << 20)) {
    throw ValidationError("packed matrix has invalid dim " +
                          std::to_string(dim));
  }
  std::vector<double> packed(packed_size(dim));
  for (double& v : packed) v = std::bit_cast<double>(read_u64(in));
  return unpack_upper(packed, dim);
}

}  // namespace kfacsched

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kfacsched {

// t(m) = alpha + beta * m for an all-reduce of m elements.
struct AllReduceParams {
  double alpha = 0.0;  // seconds
  double beta = 0.0;   // seconds per element
};

// t(d) = alpha + beta * d(d+1)/2 for broadcasting a packed d x d inverse.
struct BcastParams {
  double alpha = 0.0;
  double beta = 0.0;
};

// t(d) = alpha * exp(beta * d) for inverting a d x d matrix.
struct InverseParams {
  double alpha = 0.0;
  double beta = 0.0;
};

struct PerfParams {
  AllReduceParams allreduce;
  BcastParams bcast;
  InverseParams inverse;
  // Cluster size the coefficients were fitted on. The models take no P.
  std::size_t fitted_world_size = 1;
  // Free-form provenance note, e.g. "synthetic calibration".
  std::string label;
};

// Throw ValidationError when an invariant of the record is broken.
void validate(const AllReduceParams& p);
void validate(const BcastParams& p);
void validate(const InverseParams& p);
void validate(const PerfParams& p);

double allreduce_time(std::uint64_t elements, const AllReduceParams& p);
double bcast_time(std::size_t dim, const BcastParams& p);
double inverse_time(std::size_t dim, const InverseParams& p);

struct BenchSample {
  double size = 0.0;  // elements for all-reduce, dimension d otherwise
  double time = 0.0;  // seconds
};

struct LinearFit {
  double alpha = 0.0;
  double beta = 0.0;
  double r_squared = 0.0;
};

// Ordinary least squares of time against size.
LinearFit fit_linear(std::span<const BenchSample> samples);
// Least squares of ln(time) against d.
InverseParams fit_exponential(std::span<const BenchSample> samples);
// Samples keyed by dimension d; fits time against d(d+1)/2.
BcastParams fit_bcast(std::span<const BenchSample> samples);

inline constexpr std::size_t kDefaultNctScanLimit = 16384;

// Smallest d >= 1 with inverse_time(d) >= bcast_time(d), i.e. the first
// dimension worth inverting once and broadcasting. Everything below it is
// cheaper to invert redundantly on all workers. std::nullopt when no such
// d exists up to d_max.
std::optional<std::size_t> nct_threshold(const InverseParams& inv,
                                         const BcastParams& bc,
                                         std::size_t d_max = kDefaultNctScanLimit);

// Flat `key=value` lines; '#' starts a comment.
PerfParams parse_params(std::istream& in);
void write_params(std::ostream& out, const PerfParams& p);
PerfParams load_params(const std::filesystem::path& path);
void save_params(const std::filesystem::path& path, const PerfParams& p);

// CSV with header `size,time_seconds`.
std::vector<BenchSample> parse_samples_csv(std::istream& in);
std::vector<BenchSample> load_samples_csv(const std::filesystem::path& path);

}  // namespace kfacsched

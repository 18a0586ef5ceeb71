#include "kfacsched/perf_models.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "kfacsched/error.hpp"
#include "kfacsched/linalg.hpp"

namespace kfacsched {

namespace {

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }
bool finite_pos(double v) { return std::isfinite(v) && v > 0.0; }

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

double parse_double(const std::string& text, const std::string& context) {
  double v = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError(context + ": not a number: '" + text + "'");
  }
  return v;
}

// Shortest fixed-notation text that reads back to the same double.
std::string decimal(double v) {
  char buf[512];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v,
                                 std::chars_format::fixed);
  if (ec != std::errc()) throw ValidationError("cannot format value");
  return std::string(buf, ptr);
}

}  // namespace

void validate(const AllReduceParams& p) {
  if (!finite_nonneg(p.alpha)) throw ValidationError("alpha_ar must be >= 0");
  if (!finite_pos(p.beta)) throw ValidationError("beta_ar must be > 0");
}

void validate(const BcastParams& p) {
  if (!finite_nonneg(p.alpha)) {
    throw ValidationError("alpha_bcast must be >= 0");
  }
  if (!finite_pos(p.beta)) throw ValidationError("beta_bcast must be > 0");
}

void validate(const InverseParams& p) {
  if (!finite_pos(p.alpha)) throw ValidationError("alpha_inv must be > 0");
  if (!finite_pos(p.beta)) throw ValidationError("beta_inv must be > 0");
}

void validate(const PerfParams& p) {
  validate(p.allreduce);
  validate(p.bcast);
  validate(p.inverse);
  if (p.fitted_world_size < 1) {
    throw ValidationError("fitted_world_size must be >= 1");
  }
}

double allreduce_time(std::uint64_t elements, const AllReduceParams& p) {
  return p.alpha + p.beta * static_cast<double>(elements);
}

double bcast_time(std::size_t dim, const BcastParams& p) {
  return p.alpha + p.beta * static_cast<double>(packed_size(dim));
}

double inverse_time(std::size_t dim, const InverseParams& p) {
  return p.alpha * std::exp(p.beta * static_cast<double>(dim));
}

LinearFit fit_linear(std::span<const BenchSample> samples) {
  if (samples.size() < 2) {
    throw ValidationError("fit_linear: need at least 2 samples");
  }
  const double n = static_cast<double>(samples.size());
  double mean_x = 0.0;
  double mean_y = 0.0;
  for (const auto& s : samples) {
    if (!std::isfinite(s.size) || !std::isfinite(s.time)) {
      throw ValidationError("fit_linear: non-finite sample");
    }
    mean_x += s.size;
    mean_y += s.time;
  }
  mean_x /= n;
  mean_y /= n;

  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (const auto& s : samples) {
    const double dx = s.size - mean_x;
    const double dy = s.time - mean_y;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0.0) {
    throw ValidationError("fit_linear: all sample sizes are identical");
  }

  LinearFit fit;
  fit.beta = sxy / sxx;
  fit.alpha = mean_y - fit.beta * mean_x;
  double ss_res = 0.0;
  for (const auto& s : samples) {
    const double r = s.time - (fit.alpha + fit.beta * s.size);
    ss_res += r * r;
  }
  fit.r_squared = syy == 0.0 ? 1.0 : 1.0 - ss_res / syy;
  return fit;
}

InverseParams fit_exponential(std::span<const BenchSample> samples) {
  std::vector<BenchSample> logged;
  logged.reserve(samples.size());
  for (const auto& s : samples) {
    if (!(s.time > 0.0)) {
      throw ValidationError("fit_exponential: sample time must be positive");
    }
    logged.push_back({s.size, std::log(s.time)});
  }
  const LinearFit line = fit_linear(logged);
  return {std::exp(line.alpha), line.beta};
}

BcastParams fit_bcast(std::span<const BenchSample> samples) {
  std::vector<BenchSample> packed;
  packed.reserve(samples.size());
  for (const auto& s : samples) {
    if (!(s.size >= 1.0)) {
      throw ValidationError("fit_bcast: dimension must be >= 1");
    }
    packed.push_back({s.size * (s.size + 1.0) / 2.0, s.time});
  }
  const LinearFit line = fit_linear(packed);
  return {line.alpha, line.beta};
}

std::optional<std::size_t> nct_threshold(const InverseParams& inv,
                                         const BcastParams& bc,
                                         std::size_t d_max) {
  for (std::size_t d = 1; d <= d_max; ++d) {
    if (inverse_time(d, inv) >= bcast_time(d, bc)) return d;
  }
  return std::nullopt;
}

PerfParams parse_params(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string comment;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) {
      std::string note = trim(std::string_view(line).substr(hash + 1));
      if (comment.empty()) comment = note;
      line.erase(hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("params line " + std::to_string(lineno) +
                            ": expected key=value");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!kv.emplace(key, value).second) {
      throw ValidationError("params: duplicate key " + key);
    }
  }

  auto number = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw ValidationError(std::string("params: missing key ") + key);
    }
    return parse_double(it->second, key);
  };

  PerfParams p;
  p.allreduce = {number("alpha_ar"), number("beta_ar")};
  p.bcast = {number("alpha_bcast"), number("beta_bcast")};
  p.inverse = {number("alpha_inv"), number("beta_inv")};
  const double world = number("fitted_world_size");
  if (world < 1.0 || world != std::floor(world)) {
    throw ValidationError("params: fitted_world_size must be a positive integer");
  }
  p.fitted_world_size = static_cast<std::size_t>(world);
  if (auto it = kv.find("label"); it != kv.end()) {
    p.label = it->second;
  } else {
    p.label = comment;
  }
  for (const auto& [key, _] : kv) {
    static const char* known[] = {"alpha_ar",  "beta_ar",    "alpha_bcast",
                                  "beta_bcast", "alpha_inv", "beta_inv",
                                  "fitted_world_size", "label"};
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ValidationError("params: unknown key " + key);
  }
  validate(p);
  return p;
}

void write_params(std::ostream& out, const PerfParams& p) {
  if (!p.label.empty()) out << "label=" << p.label << "\n";
  out << "alpha_ar=" << decimal(p.allreduce.alpha) << "\n"
      << "beta_ar=" << decimal(p.allreduce.beta) << "\n"
      << "alpha_bcast=" << decimal(p.bcast.alpha) << "\n"
      << "beta_bcast=" << decimal(p.bcast.beta) << "\n"
      << "alpha_inv=" << decimal(p.inverse.alpha) << "\n"
      << "beta_inv=" << decimal(p.inverse.beta) << "\n"
      << "fitted_world_size=" << p.fitted_world_size << "\n";
}

PerfParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open params file " + path.string());
  return parse_params(in);
}

void save_params(const std::filesystem::path& path, const PerfParams& p) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write params file " + path.string());
  write_params(out, p);
  if (!out) throw IoError("failed writing params file " + path.string());
}

std::vector<BenchSample> parse_samples_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "size,time_seconds") {
    throw ValidationError("samples CSV must start with header size,time_seconds");
  }
  std::vector<BenchSample> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw ValidationError("samples CSV line " + std::to_string(lineno) +
                            ": expected two columns");
    }
    const std::string ctx = "samples CSV line " + std::to_string(lineno);
    BenchSample s{parse_double(trim(line.substr(0, comma)), ctx),
                  parse_double(trim(line.substr(comma + 1)), ctx)};
    if (!(s.size > 0.0)) throw ValidationError(ctx + ": size must be positive");
    if (!(s.time > 0.0) || !std::isfinite(s.time)) {
      throw ValidationError(ctx + ": time must be finite and positive");
    }
    out.push_back(s);
  }
  return out;
}

std::vector<BenchSample> load_samples_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open samples file " + path.string());
  return parse_samples_csv(in);
}

}  // namespace kfacsched

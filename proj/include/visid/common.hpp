// Shared primitives: error kinds, deterministic RNG, dense vector/matrix
// helpers and checksums. Everything downstream assumes doubles for math and
// a fixed iteration order so repeated runs are bit-identical.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace visid {

enum class errc {
  invalid_config,
  infeasible_config,
  missing_file,
  io_failure,
  version_mismatch,
  checksum_mismatch,
  shape_mismatch,
  empty_input,
  numerical_domain,
  training_diverged,
  unfitted,
};

class Error : public std::runtime_error {
 public:
  Error(errc kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  errc kind() const { return kind_; }

 private:
  errc kind_;
};

[[noreturn]] inline void fail(errc kind, const std::string& msg) { throw Error(kind, msg); }

using Vec = std::vector<double>;

struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double* row(std::size_t i) { return a.data() + i * cols; }
  const double* row(std::size_t i) const { return a.data() + i * cols; }
  double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
  std::span<double> rspan(std::size_t i) { return {row(i), cols}; }
  std::span<const double> rspan(std::size_t i) const { return {row(i), cols}; }
  void zero() { std::fill(a.begin(), a.end(), 0.0); }
};

// Deterministic scalar RNG. Normal deviates come from an explicit Box-Muller
// transform, not std::normal_distribution, so streams are stable across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    if (n <= 0) fail(errc::invalid_config, "uniform_int needs n > 0");
    return static_cast<int>(eng_() % static_cast<std::uint64_t>(n));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double z0 = r * std::cos(2.0 * M_PI * u2);
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return z0;
  }

  void fill_normal(std::span<double> out, double sigma) {
    for (double& x : out) x = sigma * normal();
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline double dot(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

inline double sq_dist(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double cosine(std::span<const double> x, std::span<const double> y) {
  double nx = norm2(x), ny = norm2(y);
  if (nx < 1e-300 || ny < 1e-300) return 0.0;
  return dot(x, y) / (nx * ny);
}

// y = r / max(||r||, floor). Zero vectors stay zero.
inline Vec normalized(std::span<const double> r) {
  Vec y(r.begin(), r.end());
  double n = norm2(r);
  if (n > 1e-300) {
    for (double& v : y) v /= n;
  }
  return y;
}

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64_file(const std::string& path);

// Central finite differences; the gradient oracle used by every loss test.
template <class F>
Vec numgrad(F&& f, const Vec& x, double eps = 1e-5) {
  Vec g(x.size(), 0.0);
  Vec xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = xp[i];
    xp[i] = orig + eps;
    double fp = f(xp);
    xp[i] = orig - eps;
    double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

}  // namespace visid

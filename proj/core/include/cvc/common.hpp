#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cvc {

/// Base of every error raised by the library. `kind()` is a stable
/// machine-readable tag used in CLI error reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define CVC_DEFINE_ERROR(Name, Tag)                          \
  class Name : public Error {                                \
   public:                                                   \
    using Error::Error;                                      \
    const char* kind() const noexcept override { return Tag; } \
  }

CVC_DEFINE_ERROR(InvalidArgumentError, "invalid_argument");
CVC_DEFINE_ERROR(ShapeMismatchError, "shape_mismatch");
CVC_DEFINE_ERROR(BoundsError, "out_of_bounds");
CVC_DEFINE_ERROR(IoError, "io");
CVC_DEFINE_ERROR(FormatError, "format");
CVC_DEFINE_ERROR(MissingFileError, "missing_file");
CVC_DEFINE_ERROR(ResolutionMismatchError, "resolution_mismatch");
CVC_DEFINE_ERROR(SchemaMismatchError, "schema_mismatch");
CVC_DEFINE_ERROR(ConfigError, "config");
CVC_DEFINE_ERROR(DependencyError, "missing_dependency");
CVC_DEFINE_ERROR(TrainingDivergedError, "training_diverged");
CVC_DEFINE_ERROR(LockError, "locked");

#undef CVC_DEFINE_ERROR

/// Seeded pseudo random source with platform-independent draws.
///
/// The standard distributions are implementation defined, so uniform and
/// normal variates are derived here directly from the 64-bit Mersenne
/// Twister output. Same seed, same sequence on every toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix(seed)) {}

  /// splitmix64 finalizer.
  static std::uint64_t mix(std::uint64_t x) noexcept;

  /// Seed for an independent stream, e.g. per phantom or per tree.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) noexcept {
    return mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ULL));
  }

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n), n > 0, without modulo bias.
  std::size_t below(std::size_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Worker count: CVCPIPE_THREADS if set, otherwise hardware concurrency.
int thread_budget();

/// Runs fn(i) for i in [0, n) on up to thread_budget() threads. Work is
/// statically partitioned; fn must only write to slots owned by i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept;

std::string hex64(std::uint64_t v);

}  // namespace cvc

#pragma once

// Shared plumbing: the error type, compensated summation, keyed random
// streams and a small deterministic parallel-for.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace loop {

enum class ErrorKind {
  Domain,
  InvalidExperiment,
  InsufficientArm,
  NonConstantP,
  StratumTooSmall,
  RankDeficient,
  NoOobTrees,
  UnsupportedImputer,
  EmptyOppositeArm,
  SupportTooLarge,
  UndefinedOnAssignment,
  ParseError,
  MissingColumn,
  NonBinaryTreatment,
  ProbabilityOutOfRange,
  InvalidConfig,
  Io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Domain: return "Domain";
    case ErrorKind::InvalidExperiment: return "InvalidExperiment";
    case ErrorKind::InsufficientArm: return "InsufficientArm";
    case ErrorKind::NonConstantP: return "NonConstantP";
    case ErrorKind::StratumTooSmall: return "StratumTooSmall";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::NoOobTrees: return "NoOobTrees";
    case ErrorKind::UnsupportedImputer: return "UnsupportedImputer";
    case ErrorKind::EmptyOppositeArm: return "EmptyOppositeArm";
    case ErrorKind::SupportTooLarge: return "SupportTooLarge";
    case ErrorKind::UndefinedOnAssignment: return "UndefinedOnAssignment";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::NonBinaryTreatment: return "NonBinaryTreatment";
    case ErrorKind::ProbabilityOutOfRange: return "ProbabilityOutOfRange";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library. `kind()` is stable and machine
/// readable; `what()` carries the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  CompensatedSum& operator+=(double v) {
    add(v);
    return *this;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

template <class Range>
double compensated_sum(const Range& values) {
  CompensatedSum s;
  for (double v : values) s.add(v);
  return s.value();
}

template <class Range>
double mean_of(const Range& values) {
  std::size_t n = 0;
  CompensatedSum s;
  for (double v : values) {
    s.add(v);
    ++n;
  }
  return n == 0 ? std::nan("") : s.value() / static_cast<double>(n);
}

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for the stream identified by (seed, keys...). Distinct key tuples give
/// unrelated streams, so work can be split across threads without changing
/// results.
template <class... Keys>
constexpr std::uint64_t stream_seed(std::uint64_t seed, Keys... keys) {
  std::uint64_t h = mix64(seed);
  ((h = mix64(h ^ mix64(static_cast<std::uint64_t>(keys) + 0x632be59bd9b4e019ULL))), ...);
  return h;
}

using Rng = std::mt19937_64;

template <class... Keys>
Rng make_stream(std::uint64_t seed, Keys... keys) {
  return Rng(stream_seed(seed, keys...));
}

/// Uniform integer in [0, n). Multiply-shift reduction; identical on every
/// platform, unlike std::uniform_int_distribution.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  const unsigned __int128 wide = static_cast<unsigned __int128>(rng()) * n;
  return static_cast<std::size_t>(wide >> 64);
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs body(i) for i in [0, n) on up to `threads` workers using a static
/// stride, so each index is visited exactly once. If any call throws, the
/// exception from the lowest failing index is rethrown on the calling thread,
/// which keeps error reporting independent of scheduling. Calls made from
/// inside a worker run serially instead of spawning more threads.
namespace detail {
inline thread_local bool inside_worker = false;
}

template <class Body>
void parallel_for(std::size_t n, std::size_t threads, Body&& body) {
  threads = std::min(resolve_threads(threads), std::max<std::size_t>(n, 1));
  if (threads <= 1 || detail::inside_worker) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr first_error;
  std::size_t first_index = n;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  workers.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      detail::inside_worker = true;
      for (std::size_t i = w; i < n; i += threads) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (i < first_index) {
            first_index = i;
            first_error = std::current_exception();
          }
          return;
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace loop

#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sensor {

// Bad input or a violated precondition. The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure while doing work on valid input (I/O, divergence, network).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Label taxonomy: PFR / PB / PIR with integer codes 0, 1, 2.

enum class Label : std::uint8_t { PFR = 0, PB = 1, PIR = 2 };

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<Label, kNumClasses> kAllLabels{Label::PFR, Label::PB, Label::PIR};

constexpr int label_code(Label l) { return static_cast<int>(l); }
Label label_from_code(int code);
std::string_view label_name(Label l);
// Accepts "PFR"/"PB"/"PIR" (any case) or the codes "0"/"1"/"2".
std::optional<Label> parse_label(std::string_view text);
std::array<double, kNumClasses> one_hot(Label l);

// ---------------------------------------------------------------------------
// Calendar dates.

using Date = std::chrono::year_month_day;

// Accepts "YYYY-MM-DD" optionally followed by a time part ("T..." or " ...").
std::optional<Date> parse_date(std::string_view text);
std::string format_date(const Date& d);

// ---------------------------------------------------------------------------
// Deterministic randomness. std distributions are implementation-defined, so
// everything that feeds a reproducibility guarantee goes through these.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
// Derives an independent seed from a base seed and a list of labels.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t a = 0,
                          std::uint64_t b = 0);

// ---------------------------------------------------------------------------
// String helpers.

std::string_view trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);
std::vector<std::string> split_whitespace(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
bool starts_with_ci(std::string_view s, std::string_view prefix);

}  // namespace sensor

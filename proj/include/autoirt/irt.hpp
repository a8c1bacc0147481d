#pragma once

// Parametric item response functions for the logistic 1PL/2PL/3PL family.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace autoirt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Discrimination a, chance c, difficulty d of one item.
struct ItemParams {
  double a = 1.0;
  double c = 0.0;
  double d = 0.0;

  bool valid() const {
    return std::isfinite(a) && a > 0.0 && std::isfinite(c) && c >= 0.0 && c < 1.0 &&
           std::isfinite(d);
  }

  void validate() const {
    if (!valid()) {
      throw Error("invalid item parameters: a=" + std::to_string(a) + " c=" + std::to_string(c) +
                  " d=" + std::to_string(d));
    }
  }

  bool operator==(const ItemParams&) const = default;
};

enum class FamilyKind { Rasch, TwoPL, ThreePLFixedC, ThreePLFreeC };

struct ModelFamily {
  FamilyKind kind = FamilyKind::ThreePLFixedC;
  double fixed_c = 0.25;  // only used by ThreePLFixedC

  static ModelFamily rasch() { return {FamilyKind::Rasch, 0.0}; }
  static ModelFamily two_pl() { return {FamilyKind::TwoPL, 0.0}; }
  static ModelFamily three_pl_fixed(double c) {
    if (!(c >= 0.0 && c < 1.0)) throw Error("fixed chance must lie in [0,1)");
    return {FamilyKind::ThreePLFixedC, c};
  }
  static ModelFamily three_pl_free() { return {FamilyKind::ThreePLFreeC, 0.0}; }

  bool a_is_free() const { return kind != FamilyKind::Rasch; }
  bool c_is_free() const { return kind == FamilyKind::ThreePLFreeC; }

  /// Chance value the family pins, or the supplied value when c is free.
  double chance(double free_value = 0.0) const {
    switch (kind) {
      case FamilyKind::Rasch:
      case FamilyKind::TwoPL:
        return 0.0;
      case FamilyKind::ThreePLFixedC:
        return fixed_c;
      case FamilyKind::ThreePLFreeC:
        return free_value;
    }
    return 0.0;
  }

  /// Builds parameters honoring the family's constraints.
  ItemParams make(double a, double d, double c = 0.0) const {
    ItemParams p{a_is_free() ? a : 1.0, chance(c), d};
    p.validate();
    return p;
  }

  std::string name() const {
    switch (kind) {
      case FamilyKind::Rasch:
        return "1pl";
      case FamilyKind::TwoPL:
        return "2pl";
      case FamilyKind::ThreePLFixedC:
        return "3pl-fixed";
      case FamilyKind::ThreePLFreeC:
        return "3pl-free";
    }
    return "?";
  }

  static ModelFamily parse(const std::string& name, double c0 = 0.25) {
    if (name == "1pl" || name == "rasch") return rasch();
    if (name == "2pl") return two_pl();
    if (name == "3pl-fixed" || name == "3pl") return three_pl_fixed(c0);
    if (name == "3pl-free") return three_pl_free();
    throw Error("unknown model family '" + name + "'");
  }
};

/// Binary grade; construction rejects anything but 0 or 1.
class Grade {
 public:
  constexpr Grade() = default;
  explicit Grade(int v) : value_(static_cast<std::uint8_t>(v)) {
    if (v != 0 && v != 1) throw Error("grade must be 0 or 1, got " + std::to_string(v));
  }
  constexpr int value() const { return value_; }
  constexpr bool correct() const { return value_ == 1; }
  bool operator==(const Grade&) const = default;

 private:
  std::uint8_t value_ = 0;
};

/// Standard logistic, evaluated by sign so exp never overflows.
inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double irf(double theta, const ItemParams& p) {
  return p.c + (1.0 - p.c) * sigmoid(p.a * (theta - p.d));
}

inline constexpr double kProbEpsilon = 1e-12;

/// Counts how often a probability had to be clamped away from {0,1} before a log.
class ClampCounter {
 public:
  void hit() { count_.fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t count() const { return count_.load(std::memory_order_relaxed); }
  void reset() { count_.store(0, std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> count_{0};
};

inline ClampCounter& global_clamp_counter() {
  static ClampCounter counter;
  return counter;
}

inline double clamp_probability(double p, ClampCounter* counter = &global_clamp_counter()) {
  if (p < kProbEpsilon) {
    if (counter) counter->hit();
    return kProbEpsilon;
  }
  if (p > 1.0 - kProbEpsilon) {
    if (counter) counter->hit();
    return 1.0 - kProbEpsilon;
  }
  return p;
}

/// G log p + (1-G) log(1-p) for a probability already computed.
inline double bernoulli_log_likelihood(int grade, double p,
                                       ClampCounter* counter = &global_clamp_counter()) {
  const double q = clamp_probability(p, counter);
  return grade == 1 ? std::log(q) : std::log1p(-q);
}

inline double response_log_likelihood(Grade grade, double theta, const ItemParams& params,
                                       ClampCounter* counter = &global_clamp_counter()) {
  return bernoulli_log_likelihood(grade.value(), irf(theta, params), counter);
}

struct IrfGradient {
  double da = 0.0;
  double dc = 0.0;
  double dd = 0.0;
};

inline IrfGradient irf_gradient(double theta, const ItemParams& p) {
  const double s = sigmoid(p.a * (theta - p.d));
  const double slope = (1.0 - p.c) * s * (1.0 - s);
  return {slope * (theta - p.d), 1.0 - s, -p.a * slope};
}

}  // namespace autoirt

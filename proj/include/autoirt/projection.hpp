#pragma once

// Least-squares projection of a nonparametric response curve onto the closest logistic IRF.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "autoirt/irt.hpp"
#include "autoirt/posterior.hpp"
#include "autoirt/util.hpp"

namespace autoirt {

struct CurveSample {
  GridPtr grid;
  std::vector<double> probs;

  void validate() const {
    if (!grid) throw Error("curve has no grid");
    if (probs.size() != grid->size()) {
      throw Error("curve has " + std::to_string(probs.size()) + " values for a " +
                  std::to_string(grid->size()) + "-point grid");
    }
    for (double p : probs) {
      if (!(p > 0.0 && p < 1.0)) throw Error("curve probabilities must lie in (0,1)");
    }
  }
};

/// Samples the exact IRF of `params` on the grid.
inline CurveSample irf_curve(const ItemParams& params, const GridPtr& grid) {
  CurveSample c{grid, {}};
  c.probs.reserve(grid->size());
  for (double t : grid->points()) c.probs.push_back(irf(t, params));
  return c;
}

struct ProjectionConfig {
  ModelFamily family = ModelFamily::three_pl_fixed(0.25);
  double a_min = 0.05;
  double a_max = 25.0;
  std::optional<double> d_min;  // default grid lo - 2
  std::optional<double> d_max;  // default grid hi + 2
  double c_max = 0.5;
  int multistarts = 5;
  double tolerance = 1e-10;
  int max_iterations = 200;
  bool prior_weighted = false;

  void validate() const {
    if (!(a_min > 0.0) || !(a_max > a_min)) throw Error("projection needs 0 < a_min < a_max");
    if (d_min && d_max && !(*d_min < *d_max)) throw Error("projection needs d_min < d_max");
    if (!(c_max > 0.0 && c_max < 1.0)) throw Error("projection needs c_max in (0,1)");
    if (multistarts < 1 || max_iterations < 1) throw Error("projection needs >= 1 start and iteration");
  }
};

struct ProjectionResult {
  ItemParams params;
  double residual = 0.0;
  bool converged = true;
  bool low_information = false;
};

namespace detail {

// Free coordinates are (log a, d, c); which ones vary depends on the family.
struct Box {
  std::array<double, 3> lo{}, hi{};
  std::array<bool, 3> active{};
};

template <std::size_t N>
bool solve_small(std::array<std::array<double, N>, N> A, std::array<double, N>& b, std::size_t m) {
  for (std::size_t col = 0; col < m; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < m; ++r) {
      if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
    }
    if (std::abs(A[piv][col]) < 1e-300) return false;
    std::swap(A[piv], A[col]);
    std::swap(b[piv], b[col]);
    for (std::size_t r = col + 1; r < m; ++r) {
      const double f = A[r][col] / A[col][col];
      for (std::size_t k = col; k < m; ++k) A[r][k] -= f * A[col][k];
      b[r] -= f * b[col];
    }
  }
  for (std::size_t col = m; col-- > 0;) {
    double s = b[col];
    for (std::size_t k = col + 1; k < m; ++k) s -= A[col][k] * b[k];
    b[col] = s / A[col][col];
  }
  return true;
}

class CurveFitter {
 public:
  CurveFitter(const CurveSample& curve, const ProjectionConfig& cfg) : curve_(curve), cfg_(cfg) {
    const auto& g = *curve.grid;
    weights_.assign(g.size(), 1.0);
    if (cfg.prior_weighted) {
      for (std::size_t k = 0; k < g.size(); ++k) {
        weights_[k] = g.prior_weights()[k] * static_cast<double>(g.size());
      }
    }
    box_.active = {cfg.family.a_is_free(), true, cfg.family.c_is_free()};
    box_.lo = {std::log(cfg.a_min), cfg.d_min.value_or(g.lo() - 2.0), 0.0};
    box_.hi = {std::log(cfg.a_max), cfg.d_max.value_or(g.hi() + 2.0), cfg.c_max};
  }

  const Box& box() const { return box_; }

  void pin_log_a(double log_a) { box_.lo[0] = box_.hi[0] = log_a; }

  ItemParams to_params(const std::array<double, 3>& u) const {
    return {box_.active[0] ? std::exp(u[0]) : 1.0, cfg_.family.chance(u[2]), u[1]};
  }

  double loss(const std::array<double, 3>& u) const {
    const ItemParams p = to_params(u);
    const auto& pts = curve_.grid->points();
    double s = 0.0;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const double r = irf(pts[k], p) - curve_.probs[k];
      s += weights_[k] * r * r;
    }
    return s;
  }

  std::array<double, 3> clamp(std::array<double, 3> u) const {
    for (std::size_t j = 0; j < 3; ++j) {
      if (box_.active[j]) u[j] = std::clamp(u[j], box_.lo[j], box_.hi[j]);
    }
    return u;
  }

  /// Damped Gauss-Newton with an active set on the box; returns (u, loss, converged).
  std::tuple<std::array<double, 3>, double, bool> run(std::array<double, 3> u) const {
    u = clamp(u);
    double f = loss(u);
    double lambda = 1e-3;
    const auto& pts = curve_.grid->points();
    for (int iter = 0; iter < cfg_.max_iterations; ++iter) {
      if (f < 1e-30) return {u, f, true};
      const ItemParams p = to_params(u);
      std::array<double, 3> grad{};
      std::array<std::array<double, 3>, 3> jtj{};
      for (std::size_t k = 0; k < pts.size(); ++k) {
        const IrfGradient dg = irf_gradient(pts[k], p);
        const std::array<double, 3> jac{dg.da * p.a, dg.dd, dg.dc};  // d/dlog a, d/dd, d/dc
        const double r = irf(pts[k], p) - curve_.probs[k];
        for (std::size_t i = 0; i < 3; ++i) {
          grad[i] += weights_[k] * jac[i] * r;
          for (std::size_t j = 0; j < 3; ++j) jtj[i][j] += weights_[k] * jac[i] * jac[j];
        }
      }
      std::array<std::size_t, 3> free{};
      std::size_t m = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        if (!box_.active[j]) continue;
        const bool pinned_low = u[j] <= box_.lo[j] && grad[j] > 0.0;
        const bool pinned_high = u[j] >= box_.hi[j] && grad[j] < 0.0;
        if (!pinned_low && !pinned_high) free[m++] = j;
      }
      double gnorm = 0.0;
      for (std::size_t i = 0; i < m; ++i) gnorm = std::max(gnorm, std::abs(grad[free[i]]));
      if (m == 0 || gnorm < 1e-15) return {u, f, true};

      bool improved = false;
      while (!improved) {
        std::array<std::array<double, 3>, 3> A{};
        std::array<double, 3> b{};
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < m; ++j) A[i][j] = jtj[free[i]][free[j]];
          A[i][i] += lambda * (jtj[free[i]][free[i]] + 1e-12);
          b[i] = -grad[free[i]];
        }
        if (solve_small(A, b, m)) {
          std::array<double, 3> trial = u;
          for (std::size_t i = 0; i < m; ++i) trial[free[i]] += b[i];
          trial = clamp(trial);
          const double ft = loss(trial);
          if (ft < f) {
            const double rel = (f - ft) / std::max(f, 1e-300);
            u = trial;
            f = ft;
            lambda = std::max(lambda / 3.0, 1e-12);
            improved = true;
            if (rel < cfg_.tolerance) return {u, f, true};
            break;
          }
        }
        lambda *= 4.0;
        if (lambda > 1e14) return {u, f, true};  // no descent left at working precision
      }
    }
    return {u, f, false};
  }

  /// Starting difficulty at the curve's half-max crossing.
  double half_max_crossing() const {
    const auto& pts = curve_.grid->points();
    const auto& pr = curve_.probs;
    const auto [mn, mx] = std::minmax_element(pr.begin(), pr.end());
    const double target = cfg_.family.c_is_free()
                              ? 0.5 * (*mn + *mx)
                              : cfg_.family.chance() + 0.5 * (1.0 - cfg_.family.chance());
    for (std::size_t k = 1; k < pts.size(); ++k) {
      if ((pr[k - 1] - target) * (pr[k] - target) <= 0.0 && pr[k] != pr[k - 1]) {
        return pts[k - 1] + (target - pr[k - 1]) * (pts[k] - pts[k - 1]) / (pr[k] - pr[k - 1]);
      }
    }
    return pr.front() > target ? pts.front() : pts.back();
  }

 private:
  const CurveSample& curve_;
  const ProjectionConfig& cfg_;
  std::vector<double> weights_;
  Box box_;
};

}  // namespace detail

inline constexpr double kFlatCurveRange = 1e-6;

inline ProjectionResult project_item(const CurveSample& curve, const ProjectionConfig& config) {
  config.validate();
  curve.validate();
  if (curve.grid->size() < 10) throw Error("projection needs a grid with at least 10 points");
  detail::CurveFitter fitter(curve, config);

  std::vector<double> starts{fitter.half_max_crossing()};
  static constexpr std::array<double, 5> kQuantiles{0.5, 0.3, 0.7, 0.1, 0.9};
  for (int s = 0; s < std::min<int>(config.multistarts, 5); ++s) {
    starts.push_back(curve.grid->range_quantile(kQuantiles[static_cast<std::size_t>(s)]));
  }
  const double min_prob = *std::min_element(curve.probs.begin(), curve.probs.end());
  const double c0 = std::clamp(min_prob, 0.0, config.c_max) * 0.9;

  ProjectionResult best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::array<double, 3> best_u{};
  for (double d0 : starts) {
    auto [u, f, ok] = fitter.run({0.0, d0, c0});
    if (f < best_loss) {
      best_loss = f;
      best_u = u;
      best.converged = ok;
    }
  }
  // A flat curve carries no slope information: report the minimum slope.
  const double range = *std::max_element(curve.probs.begin(), curve.probs.end()) - min_prob;
  const bool flat = fitter.box().active[0] && range < kFlatCurveRange;
  if (flat) {
    fitter.pin_log_a(std::log(config.a_min));
    auto [u, f, ok] = fitter.run({std::log(config.a_min), best_u[1], best_u[2]});
    best_u = u;
    best_loss = f;
    best.converged = ok;
  }
  best.params = fitter.to_params(best_u);
  best.residual = best_loss;
  const auto& box = fitter.box();
  const bool a_floor = box.active[0] && best_u[0] <= box.lo[0] + 1e-12;
  const bool d_edge = best_u[1] <= box.lo[1] + 1e-9 || best_u[1] >= box.hi[1] - 1e-9;
  best.low_information = flat || a_floor || d_edge;
  return best;
}

struct BankProjection {
  ItemBank bank;
  std::map<std::string, ProjectionResult> diagnostics;

  std::vector<std::string> non_converged() const {
    std::vector<std::string> out;
    for (const auto& [id, r] : diagnostics) {
      if (!r.converged) out.push_back(id);
    }
    return out;
  }
  std::vector<std::string> low_information() const {
    std::vector<std::string> out;
    for (const auto& [id, r] : diagnostics) {
      if (r.low_information) out.push_back(id);
    }
    return out;
  }
};

inline BankProjection project_bank(const std::map<std::string, CurveSample>& curves,
                                   const ProjectionConfig& config) {
  if (curves.empty()) throw Error("project_bank needs at least one curve");
  std::vector<const std::string*> ids;
  std::vector<const CurveSample*> samples;
  for (const auto& [id, c] : curves) {
    ids.push_back(&id);
    samples.push_back(&c);
  }
  std::vector<ProjectionResult> results(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) { results[i] = project_item(*samples[i], config); });
  BankProjection out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.bank.emplace(*ids[i], results[i].params);
    out.diagnostics.emplace(*ids[i], results[i]);
  }
  return out;
}

}  // namespace autoirt

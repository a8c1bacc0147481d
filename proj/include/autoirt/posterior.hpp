#pragma once

// Grid-approximated ability posteriors: construction, sampling and posterior-mean scoring.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "autoirt/data.hpp"
#include "autoirt/irt.hpp"
#include "autoirt/util.hpp"

namespace autoirt {

struct PriorSpec {
  enum class Kind { Normal, Uniform };
  Kind kind = Kind::Normal;
  double mean = 0.0;
  double sd = 1.0;

  static PriorSpec normal(double mean = 0.0, double sd = 1.0) {
    if (!(sd > 0.0)) throw Error("normal prior needs sd > 0");
    return {Kind::Normal, mean, sd};
  }
  static PriorSpec uniform() { return {Kind::Uniform, 0.0, 1.0}; }

  /// Unnormalized log density.
  double log_density(double theta) const {
    if (kind == Kind::Uniform) return 0.0;
    const double z = (theta - mean) / sd;
    return -0.5 * z * z;
  }

  /// Prior probability of [lo, hi]; uniform priors live on the grid itself.
  double mass(double lo, double hi) const {
    if (kind == Kind::Uniform) return 1.0;
    const auto cdf = [&](double x) {
      return 0.5 * std::erfc(-(x - mean) / (sd * std::numbers::sqrt2));
    };
    return cdf(hi) - cdf(lo);
  }
};

/// Regular grid of abilities with normalized prior mass per point.
class ThetaGrid {
 public:
  ThetaGrid(std::vector<double> points, std::vector<double> prior_weights, PriorSpec prior)
      : points_(std::move(points)), prior_(std::move(prior_weights)), spec_(prior) {
    if (points_.size() < 3) throw Error("theta grid needs at least 3 points");
    if (prior_.size() != points_.size()) throw Error("prior weights do not match grid points");
    const double step = points_[1] - points_[0];
    if (!(step > 0.0)) throw Error("theta grid must be strictly increasing");
    for (std::size_t k = 1; k < points_.size(); ++k) {
      const double gap = points_[k] - points_[k - 1];
      if (std::abs(gap - step) > 1e-12 * std::max(1.0, std::abs(step)) * points_.size()) {
        throw Error("theta grid must be uniformly spaced");
      }
    }
    double total = 0.0;
    for (double w : prior_) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw Error("prior weights must be finite and >= 0");
      total += w;
    }
    if (!(total > 0.0)) throw Error("prior weights sum to zero");
    for (double& w : prior_) w /= total;
    log_prior_.resize(prior_.size());
    for (std::size_t k = 0; k < prior_.size(); ++k) {
      log_prior_[k] = prior_[k] > 0.0 ? std::log(prior_[k]) : -std::numeric_limits<double>::infinity();
    }
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<double>& points() const { return points_; }
  const std::vector<double>& prior_weights() const { return prior_; }
  const std::vector<double>& log_prior() const { return log_prior_; }
  const PriorSpec& prior() const { return spec_; }
  double lo() const { return points_.front(); }
  double hi() const { return points_.back(); }
  double step() const { return points_[1] - points_[0]; }

  /// Value at the q-th quantile of the grid range (not of the prior).
  double range_quantile(double q) const { return lo() + q * (hi() - lo()); }

  double prior_mean() const {
    double m = 0.0;
    for (std::size_t k = 0; k < size(); ++k) m += prior_[k] * points_[k];
    return m;
  }

 private:
  std::vector<double> points_;
  std::vector<double> prior_;
  std::vector<double> log_prior_;
  PriorSpec spec_;
};

using GridPtr = std::shared_ptr<const ThetaGrid>;

inline constexpr double kMinPriorCoverage = 0.999;

inline GridPtr make_grid(double lo, double hi, double step, PriorSpec prior = PriorSpec::normal()) {
  if (!(lo < hi)) throw Error("grid needs lo < hi");
  if (!(step > 0.0)) throw Error("grid needs step > 0");
  const double span = (hi - lo) / step;
  const double n_steps = std::round(span);
  if (std::abs(span - n_steps) > 1e-9) {
    throw Error("grid range is not a whole number of steps");
  }
  const double coverage = prior.mass(lo, hi);
  if (coverage < kMinPriorCoverage) {
    throw Error("grid [" + std::to_string(lo) + ", " + std::to_string(hi) + "] covers only " +
                std::to_string(coverage) + " of the prior mass (need >= 0.999)");
  }
  const auto n = static_cast<std::size_t>(n_steps) + 1;
  std::vector<double> points(n), weights(n);
  for (std::size_t k = 0; k < n; ++k) {
    points[k] = lo + static_cast<double>(k) * step;
    weights[k] = std::exp(prior.log_density(points[k]));
  }
  return std::make_shared<const ThetaGrid>(std::move(points), std::move(weights), prior);
}

/// Default calibration grid, -4..4 step 0.1 under Normal(0,1).
inline GridPtr default_grid() { return make_grid(-4.0, 4.0, 0.1, PriorSpec::normal()); }

struct AbilityPosterior {
  GridPtr grid;
  std::vector<double> weights;
};

inline AbilityPosterior prior_posterior(const GridPtr& grid) {
  return {grid, grid->prior_weights()};
}

namespace detail {
/// Normalizes log weights with a single max subtraction.
inline std::vector<double> normalize_log(const std::vector<double>& logw) {
  double top = -std::numeric_limits<double>::infinity();
  for (double v : logw) top = std::max(top, v);
  if (!std::isfinite(top)) throw Error("posterior has no support on the grid");
  std::vector<double> w(logw.size());
  double total = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = std::exp(logw[k] - top);
    total += w[k];
  }
  for (double& v : w) v /= total;
  return w;
}

inline const ItemParams& lookup(const ItemBank& bank, const std::string& id) {
  auto it = bank.find(id);
  if (it == bank.end()) throw Error("item '" + id + "' is not in the item bank");
  return it->second;
}
}  // namespace detail

/// Unnormalized log posterior over the grid; responses accumulate in item-id order.
inline std::vector<double> log_posterior(const std::vector<ItemResponse>& responses,
                                         const ItemBank& bank, const ThetaGrid& grid) {
  std::vector<const ItemResponse*> order;
  order.reserve(responses.size());
  for (const auto& r : responses) order.push_back(&r);
  std::sort(order.begin(), order.end(),
            [](const ItemResponse* x, const ItemResponse* y) { return x->item_id < y->item_id; });
  std::vector<double> logw = grid.log_prior();
  const auto& pts = grid.points();
  for (const ItemResponse* r : order) {
    const ItemParams& p = detail::lookup(bank, r->item_id);
    for (std::size_t k = 0; k < pts.size(); ++k) {
      logw[k] += response_log_likelihood(r->grade, pts[k], p);
    }
  }
  return logw;
}

inline AbilityPosterior compute_posterior(const std::vector<ItemResponse>& responses,
                                          const ItemBank& bank, const GridPtr& grid) {
  if (responses.empty()) return prior_posterior(grid);
  return {grid, detail::normalize_log(log_posterior(responses, bank, *grid))};
}

inline AbilityPosterior compute_posterior(const SessionResponses& session, const ItemBank& bank,
                                          const GridPtr& grid) {
  return compute_posterior(session.responses, bank, grid);
}

/// One Bayesian update of an existing posterior with a single further response.
inline AbilityPosterior update_posterior(const AbilityPosterior& post, const ItemResponse& r,
                                         const ItemParams& params) {
  const auto& pts = post.grid->points();
  std::vector<double> logw(pts.size());
  for (std::size_t k = 0; k < pts.size(); ++k) {
    logw[k] = (post.weights[k] > 0.0 ? std::log(post.weights[k])
                                     : -std::numeric_limits<double>::infinity()) +
              response_log_likelihood(r.grade, pts[k], params);
  }
  return {post.grid, detail::normalize_log(logw)};
}

inline double posterior_mean(const AbilityPosterior& post) {
  const auto& pts = post.grid->points();
  double m = 0.0;
  for (std::size_t k = 0; k < pts.size(); ++k) m += post.weights[k] * pts[k];
  return m;
}

inline double posterior_sd(const AbilityPosterior& post) {
  const double m = posterior_mean(post);
  const auto& pts = post.grid->points();
  double v = 0.0;
  for (std::size_t k = 0; k < pts.size(); ++k) v += post.weights[k] * (pts[k] - m) * (pts[k] - m);
  return std::sqrt(std::max(0.0, v));
}

/// Draws one grid point with probability equal to its weight (inverse CDF).
inline double sample_theta(const AbilityPosterior& post, Rng& rng) {
  const double u = uniform01(rng);
  const auto& pts = post.grid->points();
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    if (post.weights[k] <= 0.0) continue;
    last_positive = k;
    acc += post.weights[k];
    if (u < acc) return pts[k];
  }
  return pts[last_positive];
}

}  // namespace autoirt

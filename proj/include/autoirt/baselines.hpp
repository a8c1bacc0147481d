#pragma once

// Comparison calibrators: a feature-free MML-EM IRT fit and a ridge-penalized linear
// explanatory model trained against fixed proxy abilities.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "autoirt/data.hpp"
#include "autoirt/irt.hpp"
#include "autoirt/mcem.hpp"
#include "autoirt/posterior.hpp"
#include "autoirt/projection.hpp"
#include "autoirt/util.hpp"

namespace autoirt {

// ---------------------------------------------------------------------------------------------
// non-explanatory IRT (marginal maximum likelihood)
// ---------------------------------------------------------------------------------------------

struct MmlConfig {
  int max_iterations = 100;
  double tolerance = 1e-5;  // on mean negative marginal log-likelihood per response
  int newton_steps = 20;
  double a_min = 0.05;
  double a_max = 25.0;
  std::optional<double> d_min;  // default grid lo - 2
  std::optional<double> d_max;  // default grid hi + 2
  double c_max = 0.5;

  void validate() const {
    if (max_iterations < 1 || newton_steps < 1) throw Error("mml: iteration counts must be >= 1");
    if (!(tolerance >= 0.0)) throw Error("mml: tolerance must be >= 0");
    if (!(a_min > 0.0) || !(a_max > a_min)) throw Error("mml needs 0 < a_min < a_max");
    if (!(c_max > 0.0 && c_max < 1.0)) throw Error("mml needs c_max in (0,1)");
  }
};

struct NonexplanatoryFit {
  ItemBank bank;
  std::vector<std::string> degenerate;            // all-correct or all-wrong items, fixed at bounds
  std::vector<double> marginal_log_likelihood;   // after each EM iteration's E-step
  int iterations = 0;
  bool converged = false;
};

namespace detail {

// Expected counts for one item over the grid: n_k sessions, r_k of them correct.
struct ExpectedCounts {
  std::vector<double> n;
  std::vector<double> r;
};

struct MmlBox {
  std::array<double, 3> lo{}, hi{};
  std::array<bool, 3> active{};
};

inline double expected_log_likelihood(const ExpectedCounts& ec, const ThetaGrid& grid,
                                      const ItemParams& p) {
  const auto& pts = grid.points();
  double s = 0.0;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    if (ec.n[k] <= 0.0) continue;
    const double q = clamp_probability(irf(pts[k], p), nullptr);
    s += ec.r[k] * std::log(q) + (ec.n[k] - ec.r[k]) * std::log1p(-q);
  }
  return s;
}

/// Fisher scoring on (log a, d, c) with step halving; never lowers the expected log-likelihood.
inline std::array<double, 3> mml_item_step(const ExpectedCounts& ec, const ThetaGrid& grid,
                                           const ModelFamily& family, const MmlBox& box,
                                           std::array<double, 3> u, int steps) {
  auto params = [&](const std::array<double, 3>& v) {
    return ItemParams{box.active[0] ? std::exp(v[0]) : 1.0, family.chance(v[2]), v[1]};
  };
  auto clamp = [&](std::array<double, 3> v) {
    for (std::size_t j = 0; j < 3; ++j) {
      if (box.active[j]) v[j] = std::clamp(v[j], box.lo[j], box.hi[j]);
    }
    return v;
  };
  const auto& pts = grid.points();
  double f = expected_log_likelihood(ec, grid, params(u));
  for (int step = 0; step < steps; ++step) {
    const ItemParams p = params(u);
    std::array<double, 3> grad{};
    std::array<std::array<double, 3>, 3> info{};
    for (std::size_t k = 0; k < pts.size(); ++k) {
      if (ec.n[k] <= 0.0) continue;
      const double q = clamp_probability(irf(pts[k], p), nullptr);
      const IrfGradient dg = irf_gradient(pts[k], p);
      const std::array<double, 3> jac{dg.da * p.a, dg.dd, dg.dc};
      const double v = q * (1.0 - q);
      const double resid = (ec.r[k] - ec.n[k] * q) / v;
      for (std::size_t i = 0; i < 3; ++i) {
        grad[i] += resid * jac[i];
        for (std::size_t j = 0; j < 3; ++j) info[i][j] += ec.n[k] * jac[i] * jac[j] / v;
      }
    }
    std::array<std::size_t, 3> free{};
    std::size_t m = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      if (!box.active[j]) continue;
      const bool pinned = (u[j] <= box.lo[j] && grad[j] < 0.0) || (u[j] >= box.hi[j] && grad[j] > 0.0);
      if (!pinned) free[m++] = j;
    }
    if (m == 0) break;
    std::array<std::array<double, 3>, 3> A{};
    std::array<double, 3> b{};
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) A[i][j] = info[free[i]][free[j]];
      A[i][i] += 1e-9 * (1.0 + A[i][i]);
      b[i] = grad[free[i]];
    }
    if (!solve_small(A, b, m)) break;
    double scale = 1.0;
    bool moved = false;
    for (int half = 0; half < 30; ++half, scale *= 0.5) {
      std::array<double, 3> trial = u;
      for (std::size_t i = 0; i < m; ++i) trial[free[i]] += scale * b[i];
      trial = clamp(trial);
      const double ft = expected_log_likelihood(ec, grid, params(trial));
      if (ft >= f) {
        moved = trial != u;
        u = trial;
        f = ft;
        break;
      }
    }
    double size = 0.0;
    for (std::size_t i = 0; i < m; ++i) size = std::max(size, std::abs(b[i]));
    if (!moved || size < 1e-8) break;
  }
  return u;
}

}  // namespace detail

/// Marginal maximum likelihood by EM over the ability grid, ignoring item features.
inline NonexplanatoryFit fit_nonexplanatory(const ResponseTable& responses, const GridPtr& grid,
                                            const ModelFamily& family, const MmlConfig& config = {}) {
  config.validate();
  if (!grid) throw Error("fit_nonexplanatory: missing grid");
  if (responses.empty()) throw Error("fit_nonexplanatory: empty response table");
  const auto sessions = group_by_session(responses);
  const auto item_set = responses.item_ids();
  const std::vector<std::string> items(item_set.begin(), item_set.end());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < items.size(); ++i) index.emplace(items[i], i);

  detail::MmlBox box;
  box.active = {family.a_is_free(), true, family.c_is_free()};
  box.lo = {std::log(config.a_min), config.d_min.value_or(grid->lo() - 2.0), 0.0};
  box.hi = {std::log(config.a_max), config.d_max.value_or(grid->hi() + 2.0), config.c_max};

  // starting values from classical p-values; degenerate items are pinned at a bound
  std::vector<double> correct(items.size(), 0.0), total(items.size(), 0.0);
  for (const auto& r : responses.rows) {
    correct[index.at(r.item_id)] += r.grade.value();
    total[index.at(r.item_id)] += 1.0;
  }
  NonexplanatoryFit fit;
  std::vector<std::array<double, 3>> u(items.size());
  std::vector<bool> fixed(items.size(), false);
  const double c0 = family.c_is_free() ? std::min(0.1, config.c_max) : family.chance();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double pv = correct[i] / total[i];
    u[i] = {0.0, 0.0, c0};
    if (pv <= 0.0 || pv >= 1.0) {
      fixed[i] = true;
      u[i][1] = pv >= 1.0 ? box.lo[1] : box.hi[1];
      fit.degenerate.push_back(items[i]);
      continue;
    }
    const double adj = std::clamp((pv - family.chance(c0)) / (1.0 - family.chance(c0)), 0.02, 0.98);
    u[i][1] = std::clamp(-std::log(adj / (1.0 - adj)), box.lo[1], box.hi[1]);
  }
  auto bank_of = [&] {
    ItemBank bank;
    for (std::size_t i = 0; i < items.size(); ++i) {
      bank.emplace(items[i], ItemParams{box.active[0] ? std::exp(u[i][0]) : 1.0, family.chance(u[i][2]),
                                        u[i][1]});
    }
    return bank;
  };

  const std::size_t K = grid->size();
  const double n_responses = static_cast<double>(responses.size());
  double previous = std::numeric_limits<double>::infinity();
  constexpr std::size_t kChunk = 4096;
  for (int it = 1; it <= config.max_iterations; ++it) {
    const ItemBank bank = bank_of();
    std::vector<detail::ExpectedCounts> counts(items.size(), {std::vector<double>(K, 0.0),
                                                              std::vector<double>(K, 0.0)});
    double marginal = 0.0;
    // posteriors in parallel per chunk, accumulated serially in session order
    for (std::size_t start = 0; start < sessions.size(); start += kChunk) {
      const std::size_t stop = std::min(sessions.size(), start + kChunk);
      std::vector<std::vector<double>> post(stop - start);
      std::vector<double> log_norm(stop - start);
      parallel_for(stop - start, [&](std::size_t j) {
        const auto logw = log_posterior(sessions[start + j].responses, bank, *grid);
        const double top = *std::max_element(logw.begin(), logw.end());
        double z = 0.0;
        for (double v : logw) z += std::exp(v - top);
        log_norm[j] = top + std::log(z);
        post[j] = detail::normalize_log(logw);
      });
      for (std::size_t j = 0; j < post.size(); ++j) {
        marginal += log_norm[j];
        for (const auto& r : sessions[start + j].responses) {
          auto& ec = counts[index.at(r.item_id)];
          for (std::size_t k = 0; k < K; ++k) {
            ec.n[k] += post[j][k];
            if (r.grade.correct()) ec.r[k] += post[j][k];
          }
        }
      }
    }
    fit.marginal_log_likelihood.push_back(marginal);
    fit.iterations = it;
    const double loss = -marginal / n_responses;
    if (previous - loss < config.tolerance && it > 1) {
      fit.converged = true;
      break;
    }
    previous = loss;
    parallel_for(items.size(), [&](std::size_t i) {
      if (!fixed[i]) u[i] = detail::mml_item_step(counts[i], *grid, family, box, u[i], config.newton_steps);
    });
  }
  fit.bank = bank_of();
  return fit;
}

// ---------------------------------------------------------------------------------------------
// linear explanatory model with fixed proxy abilities
// ---------------------------------------------------------------------------------------------

using ProxyTheta = std::map<std::string, double>;

inline void validate_proxy(const ProxyTheta& proxy) {
  for (const auto& [sid, v] : proxy) {
    if (!std::isfinite(v)) throw Error("proxy ability for session '" + sid + "' is not finite");
  }
}

struct LinearExplanatoryModel {
  ModelFamily family = ModelFamily::two_pl();
  std::vector<std::string> feature_names;
  std::vector<double> w_a;  // log-discrimination weights, original feature scale
  double b_a = 0.0;
  std::vector<double> w_d;  // difficulty weights, original feature scale
  double b_d = 0.0;
  std::map<std::string, double> delta_a;  // training items only
  std::map<std::string, double> delta_d;
  double lambda_coef = 0.0;
  double lambda_effects = 0.0;
  std::vector<double> feature_means;  // imputation for missing values

  void validate() const {
    if (w_a.size() != feature_names.size() || w_d.size() != feature_names.size()) {
      throw Error("linear model: weight length does not match feature dimension");
    }
  }

  ItemParams params(const std::string& item_id, const std::vector<double>& x) const;
};

// Keeps extrapolated slopes finite and positive.
inline constexpr double kLogSlopeLimit = 20.0;

/// Feature-only parameters: offsets are zero for items outside the training set.
inline ItemParams predict_cold_linear(const LinearExplanatoryModel& model, const std::vector<double>& x) {
  if (x.size() != model.w_a.size()) {
    throw Error("linear model: feature vector has length " + std::to_string(x.size()) + ", expected " +
                std::to_string(model.w_a.size()));
  }
  double la = model.b_a, d = model.b_d;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double v = std::isnan(x[j]) && j < model.feature_means.size() ? model.feature_means[j] : x[j];
    la += model.w_a[j] * v;
    d += model.w_d[j] * v;
  }
  la = std::clamp(la, -kLogSlopeLimit, kLogSlopeLimit);
  return {model.family.a_is_free() ? std::exp(la) : 1.0, model.family.chance(), d};
}

inline ItemParams LinearExplanatoryModel::params(const std::string& item_id,
                                                 const std::vector<double>& x) const {
  ItemParams p = predict_cold_linear(*this, x);
  if (auto it = delta_d.find(item_id); it != delta_d.end()) p.d += it->second;
  if (auto it = delta_a.find(item_id); it != delta_a.end() && family.a_is_free()) {
    p.a = std::exp(std::clamp(std::log(p.a) + it->second, -kLogSlopeLimit, kLogSlopeLimit));
  }
  return p;
}

struct LinearConfig {
  ModelFamily family = ModelFamily::two_pl();
  std::optional<double> lambda_coef;     // fixed strengths skip the grid search
  std::optional<double> lambda_effects;
  std::vector<double> lambda_grid{0.001, 0.01, 0.1, 1.0, 10.0};
  double validation_fraction = 0.2;
  int max_iterations = 500;
  double tolerance = 1e-9;  // relative objective change
  std::uint64_t seed = 0;

  void validate() const {
    if (family.c_is_free()) throw Error("linear explanatory model needs a family with fixed chance");
    if (lambda_grid.empty()) throw Error("linear explanatory model needs a non-empty lambda grid");
    for (double l : lambda_grid) {
      if (!(l >= 0.0)) throw Error("ridge strengths must be >= 0");
    }
    if (lambda_coef && !(*lambda_coef >= 0.0)) throw Error("ridge strengths must be >= 0");
    if (lambda_effects && !(*lambda_effects >= 0.0)) throw Error("ridge strengths must be >= 0");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw Error("validation_fraction must lie in (0,1)");
    }
    if (max_iterations < 1) throw Error("linear explanatory model needs max_iterations >= 1");
  }
};

struct LinearSearchCell {
  double lambda_coef = 0.0;
  double lambda_effects = 0.0;
  double validation_loss = 0.0;
};

struct LinearFit {
  LinearExplanatoryModel model;
  ItemBank bank;
  std::vector<LinearSearchCell> search;  // empty when both strengths were fixed
  double objective = 0.0;
  int iterations = 0;
};

namespace detail {

struct LinearRow {
  double theta;
  int grade;
  std::uint32_t session;  // index into the session-name list, for error messages
};

struct LinearProblem {
  std::vector<std::string> items;
  std::vector<std::vector<double>> z;  // standardized features per item
  std::vector<std::vector<LinearRow>> rows;  // per item
  std::vector<std::string> session_names;
  std::size_t dim = 0;
};

// Parameter layout: [b_a, omega_a(dim), b_d, omega_d(dim), delta_a(items), delta_d(items)].
struct LinearLayout {
  std::size_t dim, n_items;
  std::size_t b_a() const { return 0; }
  std::size_t w_a(std::size_t j) const { return 1 + j; }
  std::size_t b_d() const { return 1 + dim; }
  std::size_t w_d(std::size_t j) const { return 2 + dim + j; }
  std::size_t da(std::size_t i) const { return 2 + 2 * dim + i; }
  std::size_t dd(std::size_t i) const { return 2 + 2 * dim + n_items + i; }
  std::size_t size() const { return 2 + 2 * dim + 2 * n_items; }
};

struct ItemDerivs {
  double loss = 0.0;
  double g_la = 0.0, g_d = 0.0;  // d loss / d log a, d loss / d d
  double h_la = 0.0, h_d = 0.0;  // Fisher diagonal
};

class LinearObjective {
 public:
  LinearObjective(const LinearProblem& prob, const ModelFamily& family, double lc, double le)
      : prob_(prob), family_(family), lc_(lc), le_(le), lay_{prob.dim, prob.items.size()} {}

  const LinearLayout& layout() const { return lay_; }

  std::pair<double, double> item_params(const std::vector<double>& v, std::size_t i) const {
    double la = v[lay_.b_a()], d = v[lay_.b_d()];
    for (std::size_t j = 0; j < lay_.dim; ++j) {
      la += v[lay_.w_a(j)] * prob_.z[i][j];
      d += v[lay_.w_d(j)] * prob_.z[i][j];
    }
    la += v[lay_.da(i)];
    d += v[lay_.dd(i)];
    if (!family_.a_is_free()) la = 0.0;
    return {la, d};
  }

  ItemDerivs item(const std::vector<double>& v, std::size_t i, bool derivs) const {
    const auto [la, d] = item_params(v, i);
    const ItemParams p{std::exp(la), family_.chance(), d};
    ItemDerivs out;
    for (const LinearRow& r : prob_.rows[i]) {
      const double q = clamp_probability(irf(r.theta, p), nullptr);
      const double ll = r.grade == 1 ? std::log(q) : std::log1p(-q);
      if (!std::isfinite(ll) || !std::isfinite(p.a)) {
        throw Error("linear explanatory: non-finite loss at item '" + prob_.items[i] + "', session '" +
                    prob_.session_names[r.session] + "'");
      }
      out.loss -= ll;
      if (!derivs) continue;
      const IrfGradient g = irf_gradient(r.theta, p);
      const double dla = g.da * p.a;
      const double var = q * (1.0 - q);
      const double dl_dp = -(r.grade - q) / var;
      out.g_la += dl_dp * dla;
      out.g_d += dl_dp * g.dd;
      out.h_la += dla * dla / var;
      out.h_d += g.dd * g.dd / var;
    }
    return out;
  }

  double penalty(const std::vector<double>& v) const {
    double s = 0.0;
    for (std::size_t j = 0; j < lay_.dim; ++j) {
      s += lc_ * (v[lay_.w_a(j)] * v[lay_.w_a(j)] + v[lay_.w_d(j)] * v[lay_.w_d(j)]);
    }
    for (std::size_t i = 0; i < lay_.n_items; ++i) {
      s += le_ * (v[lay_.da(i)] * v[lay_.da(i)] + v[lay_.dd(i)] * v[lay_.dd(i)]);
    }
    return s;
  }

  double value(const std::vector<double>& v) const {
    std::vector<double> losses(lay_.n_items);
    parallel_for(lay_.n_items, [&](std::size_t i) { losses[i] = item(v, i, false).loss; });
    double s = penalty(v);
    for (double l : losses) s += l;
    return s;
  }

  /// Objective, gradient and a positive diagonal preconditioner.
  double evaluate(const std::vector<double>& v, std::vector<double>& grad,
                  std::vector<double>& diag) const {
    std::vector<ItemDerivs> per(lay_.n_items);
    parallel_for(lay_.n_items, [&](std::size_t i) { per[i] = item(v, i, true); });
    grad.assign(lay_.size(), 0.0);
    diag.assign(lay_.size(), 0.0);
    double s = penalty(v);
    const bool free_a = family_.a_is_free();
    for (std::size_t i = 0; i < lay_.n_items; ++i) {
      const ItemDerivs& e = per[i];
      s += e.loss;
      if (free_a) {
        grad[lay_.b_a()] += e.g_la;
        diag[lay_.b_a()] += e.h_la;
        grad[lay_.da(i)] += e.g_la;
        diag[lay_.da(i)] += e.h_la;
      }
      grad[lay_.b_d()] += e.g_d;
      diag[lay_.b_d()] += e.h_d;
      grad[lay_.dd(i)] += e.g_d;
      diag[lay_.dd(i)] += e.h_d;
      for (std::size_t j = 0; j < lay_.dim; ++j) {
        const double zj = prob_.z[i][j];
        if (free_a) {
          grad[lay_.w_a(j)] += e.g_la * zj;
          diag[lay_.w_a(j)] += e.h_la * zj * zj;
        }
        grad[lay_.w_d(j)] += e.g_d * zj;
        diag[lay_.w_d(j)] += e.h_d * zj * zj;
      }
    }
    for (std::size_t j = 0; j < lay_.dim; ++j) {
      for (std::size_t k : {lay_.w_a(j), lay_.w_d(j)}) {
        grad[k] += 2.0 * lc_ * v[k];
        diag[k] += 2.0 * lc_;
      }
    }
    for (std::size_t i = 0; i < lay_.n_items; ++i) {
      for (std::size_t k : {lay_.da(i), lay_.dd(i)}) {
        grad[k] += 2.0 * le_ * v[k];
        diag[k] += 2.0 * le_;
      }
    }
    if (!free_a) {
      grad[lay_.b_a()] = 0.0;
      for (std::size_t j = 0; j < lay_.dim; ++j) grad[lay_.w_a(j)] = 0.0;
      for (std::size_t i = 0; i < lay_.n_items; ++i) grad[lay_.da(i)] = 0.0;
    }
    for (double& d : diag) d = std::max(d, 1e-8);
    return s;
  }

 private:
  const LinearProblem& prob_;
  ModelFamily family_;
  double lc_, le_;
  LinearLayout lay_;
};

/// Diagonally preconditioned gradient descent with Armijo backtracking.
inline std::pair<double, int> minimize_linear(const LinearObjective& obj, std::vector<double>& v,
                                              int max_iterations, double tolerance) {
  std::vector<double> grad, diag;
  double f = obj.evaluate(v, grad, diag);
  int it = 0;
  for (; it < max_iterations; ++it) {
    std::vector<double> dir(v.size());
    double slope = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
      dir[k] = -grad[k] / diag[k];
      slope += grad[k] * dir[k];
    }
    if (slope > -1e-14) break;
    double step = 1.0;
    double ft = f;
    std::vector<double> trial(v.size());
    bool accepted = false;
    for (int back = 0; back < 40; ++back, step *= 0.5) {
      for (std::size_t k = 0; k < v.size(); ++k) trial[k] = v[k] + step * dir[k];
      ft = obj.value(trial);
      if (ft <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    v.swap(trial);
    const double rel = (f - ft) / std::max(std::abs(f), 1e-300);
    f = obj.evaluate(v, grad, diag);
    if (rel < tolerance) {
      ++it;
      break;
    }
  }
  return {f, it};
}

struct Standardizer {
  std::vector<double> mean, sd;
};

inline Standardizer standardizer(const FeatureTable& features, const std::vector<std::string>& items) {
  const std::size_t dim = features.dimension();
  Standardizer s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
  for (std::size_t j = 0; j < dim; ++j) {
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (const auto& id : items) {
      const double v = features.at(id)[j];
      if (std::isnan(v)) continue;
      sum += v;
      sq += v * v;
      n += 1.0;
    }
    if (n == 0.0) continue;
    s.mean[j] = sum / n;
    const double var = sq / n - s.mean[j] * s.mean[j];
    s.sd[j] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return s;
}

inline LinearProblem linear_problem(const std::vector<const Response*>& rows, const FeatureTable& features,
                                    const ProxyTheta& proxy, const std::vector<std::string>& items,
                                    const Standardizer& st) {
  LinearProblem prob;
  prob.items = items;
  prob.dim = features.dimension();
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < items.size(); ++i) {
    index.emplace(items[i], i);
    std::vector<double> z(prob.dim);
    const auto& x = features.at(items[i]);
    for (std::size_t j = 0; j < prob.dim; ++j) {
      z[j] = std::isnan(x[j]) ? 0.0 : (x[j] - st.mean[j]) / st.sd[j];
    }
    prob.z.push_back(std::move(z));
  }
  prob.rows.resize(items.size());
  std::map<std::string, std::uint32_t> sessions;
  for (const Response* r : rows) {
    auto [it, added] = sessions.emplace(r->session_id, static_cast<std::uint32_t>(prob.session_names.size()));
    if (added) prob.session_names.push_back(r->session_id);
    auto th = proxy.find(r->session_id);
    if (th == proxy.end()) throw Error("no proxy ability for session '" + r->session_id + "'");
    prob.rows[index.at(r->item_id)].push_back({th->second, r->grade.value(), it->second});
  }
  return prob;
}

inline LinearExplanatoryModel to_model(const LinearProblem& prob, const std::vector<double>& v,
                                       const Standardizer& st, const ModelFamily& family,
                                       const FeatureTable& features, double lc, double le) {
  const LinearLayout lay{prob.dim, prob.items.size()};
  LinearExplanatoryModel m;
  m.family = family;
  m.feature_names = features.names;
  m.lambda_coef = lc;
  m.lambda_effects = le;
  m.feature_means = st.mean;
  m.w_a.resize(prob.dim);
  m.w_d.resize(prob.dim);
  m.b_a = family.a_is_free() ? v[lay.b_a()] : 0.0;
  m.b_d = v[lay.b_d()];
  for (std::size_t j = 0; j < prob.dim; ++j) {
    m.w_a[j] = family.a_is_free() ? v[lay.w_a(j)] / st.sd[j] : 0.0;
    m.w_d[j] = v[lay.w_d(j)] / st.sd[j];
    m.b_a -= m.w_a[j] * st.mean[j];
    m.b_d -= m.w_d[j] * st.mean[j];
  }
  for (std::size_t i = 0; i < prob.items.size(); ++i) {
    m.delta_a[prob.items[i]] = family.a_is_free() ? v[lay.da(i)] : 0.0;
    m.delta_d[prob.items[i]] = v[lay.dd(i)];
  }
  return m;
}

inline std::vector<double> initial_linear(const LinearProblem& prob) {
  const LinearLayout lay{prob.dim, prob.items.size()};
  std::vector<double> v(lay.size(), 0.0);
  double correct = 0.0, total = 0.0;
  for (const auto& rows : prob.rows) {
    for (const auto& r : rows) {
      correct += r.grade;
      total += 1.0;
    }
  }
  const double pv = std::clamp(total > 0.0 ? correct / total : 0.5, 0.02, 0.98);
  v[lay.b_d()] = -std::log(pv / (1.0 - pv));
  return v;
}

}  // namespace detail

/// Ridge-penalized linear explanatory IRT fit with abilities held at `proxy`. Strengths not
/// fixed in the config are chosen on a validation split, then the model is refit on all rows.
inline LinearFit fit_linear_explanatory(const ResponseTable& responses, const FeatureTable& features,
                                        const ProxyTheta& proxy, const LinearConfig& config = {}) {
  config.validate();
  validate_proxy(proxy);
  if (responses.empty()) throw Error("fit_linear_explanatory: empty response table");
  const auto item_set = responses.item_ids();
  const std::vector<std::string> items(item_set.begin(), item_set.end());
  for (const auto& id : items) {
    if (!features.contains(id)) throw Error("fit_linear_explanatory: no features for item '" + id + "'");
  }
  const auto st = detail::standardizer(features, items);

  std::vector<const Response*> all;
  all.reserve(responses.size());
  for (const auto& r : responses.rows) all.push_back(&r);

  LinearFit out;
  double lc = config.lambda_coef.value_or(0.0);
  double le = config.lambda_effects.value_or(0.0);
  if (!config.lambda_coef || !config.lambda_effects) {
    Rng rng = substream(config.seed, "linear-validation-split");
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(all.size()))));
    std::vector<const Response*> train, valid;
    for (std::size_t k = 0; k < order.size(); ++k) (k < n_val ? valid : train).push_back(all[order[k]]);
    std::set<std::string> train_items_set;
    for (const Response* r : train) train_items_set.insert(r->item_id);
    const std::vector<std::string> train_items(train_items_set.begin(), train_items_set.end());
    const auto prob = detail::linear_problem(train, features, proxy, train_items, st);

    const std::vector<double> coef_grid =
        config.lambda_coef ? std::vector<double>{*config.lambda_coef} : config.lambda_grid;
    const std::vector<double> effect_grid =
        config.lambda_effects ? std::vector<double>{*config.lambda_effects} : config.lambda_grid;
    double best = std::numeric_limits<double>::infinity();
    for (double c : coef_grid) {
      for (double e : effect_grid) {
        detail::LinearObjective obj(prob, config.family, c, e);
        auto v = detail::initial_linear(prob);
        detail::minimize_linear(obj, v, config.max_iterations, config.tolerance);
        const auto model = detail::to_model(prob, v, st, config.family, features, c, e);
        double loss = 0.0;
        for (const Response* r : valid) {
          const ItemParams p = model.params(r->item_id, features.at(r->item_id));
          loss -= response_log_likelihood(r->grade, proxy.at(r->session_id), p);
        }
        loss /= static_cast<double>(valid.size());
        out.search.push_back({c, e, loss});
        if (loss < best - 1e-15) {
          best = loss;
          lc = c;
          le = e;
        }
      }
    }
  }

  const auto prob = detail::linear_problem(all, features, proxy, items, st);
  detail::LinearObjective obj(prob, config.family, lc, le);
  auto v = detail::initial_linear(prob);
  const auto [f, iterations] = detail::minimize_linear(obj, v, config.max_iterations, config.tolerance);
  out.model = detail::to_model(prob, v, st, config.family, features, lc, le);
  out.objective = f;
  out.iterations = iterations;
  for (const auto& id : items) out.bank.emplace(id, out.model.params(id, features.at(id)));
  return out;
}

}  // namespace autoirt

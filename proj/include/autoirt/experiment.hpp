#pragma once

// Simulation grid: per (items, sessions) cell, simulate, calibrate each method and evaluate
// on held-out sessions (warm start) and held-out items (cold start).

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autoirt/baselines.hpp"
#include "autoirt/io.hpp"
#include "autoirt/mcem.hpp"
#include "autoirt/metrics.hpp"
#include "autoirt/simgen.hpp"

namespace autoirt {

struct MethodReport {
  std::string method;
  bool ok = false;
  std::string error;
  double seconds = 0.0;
  std::optional<EvalReport> warm;
  std::optional<EvalReport> cold;
  std::optional<double> theta_correlation;  // warm-test scores vs true abilities
  std::vector<CalibrationBin> calibration;      // warm test, binned by score percentile
  std::vector<CalibrationBin> calibration_loo;  // warm test, leave-one-out predictions
  std::vector<TraceEntry> trace;             // autoirt only
};

struct CellReport {
  int n_items = 0;
  int n_sessions = 0;
  std::uint64_t seed = 0;
  std::optional<EvalReport> truth_warm;  // generating parameters and true-scale grid
  std::optional<EvalReport> truth_cold;
  std::vector<MethodReport> methods;
  std::string error;  // simulation failure

  const MethodReport* find(const std::string& method) const {
    for (const auto& m : methods) {
      if (m.method == method && m.ok) return &m;
    }
    return nullptr;
  }
};

/// Held-out metrics from a single scoring pass.
struct HeldOut {
  EvalReport report;
  Scores scores;
};

inline HeldOut evaluate_held_out(const ResponseTable& test, const ItemBank& bank, const GridPtr& grid,
                                 bool leave_one_out) {
  HeldOut h;
  h.scores = score_sessions(test, bank, grid);
  h.report.test_loss = leave_one_out ? test_loss(test, bank, leave_one_out_scores(test, bank, grid))
                                     : test_loss(test, bank, h.scores);
  const auto corr = item_grade_correlations(test, bank, h.scores);
  h.report.pearson = corr.pearson;
  h.report.spearman = corr.spearman;
  h.report.n_items = corr.n_items;
  h.report.n_sessions = h.scores.size();
  h.report.n_responses = test.size();
  return h;
}

inline std::optional<double> theta_correlation(const Scores& scores, const std::map<std::string, double>& truth) {
  std::vector<double> est, tru;
  for (const auto& [sid, theta] : truth) {
    if (auto it = scores.find(sid); it != scores.end()) {
      est.push_back(it->second);
      tru.push_back(theta);
    }
  }
  return pearson(est, tru);
}

using CellProgress = std::function<void(const CellReport&)>;

namespace detail {

inline SimConfig cell_sim_config(const RunConfig& cfg, int items, int sessions) {
  SimConfig s = cfg.simulate;
  s.n_items = items;
  s.n_sessions = sessions;
  s.seed = cfg.seed;
  return s;
}

inline void fill_warm(MethodReport& m, const SimDataset& ds, const ItemBank& bank, const GridPtr& grid,
                      const RunConfig& cfg) {
  const HeldOut warm = evaluate_held_out(ds.warm_test, bank, grid, cfg.leave_one_out);
  m.warm = warm.report;
  m.theta_correlation = theta_correlation(warm.scores, ds.truth.warm_test_thetas);
  m.calibration = calibration_table(ds.warm_test, bank, warm.scores, cfg.experiment.calibration_bins);
  m.calibration_loo = loo_calibration_table(ds.warm_test, bank, grid, cfg.experiment.calibration_bins);
}

inline MethodReport run_method(const std::string& method, const SimDataset& ds, const RunConfig& cfg) {
  MethodReport m;
  m.method = method;
  const auto start = std::chrono::steady_clock::now();
  try {
    if (method == "autoirt") {
      McemConfig mc = cfg.mcem;
      const auto result = calibrate(ds.train, ds.features, mc);
      m.trace = result.trace;
      fill_warm(m, ds, result.bank, mc.grid, cfg);
      if (!ds.cold_test.empty()) {
        const ItemBank cold = cold_start_params(result, ds.oos_features, mc.grid, mc.effective_projection());
        m.cold = evaluate_held_out(ds.cold_test, cold, mc.grid, cfg.leave_one_out).report;
      }
    } else if (method == "irt") {
      const auto fit = fit_nonexplanatory(ds.train, cfg.mcem.grid,
                                          ModelFamily::parse(cfg.experiment.irt_family, cfg.chance), cfg.mml);
      fill_warm(m, ds, fit.bank, cfg.mcem.grid, cfg);
    } else if (method == "linear") {
      LinearConfig lc = cfg.linear;
      lc.family = ModelFamily::parse(cfg.experiment.linear_family, cfg.chance);
      const auto proxy = initialize_theta(ds.train, ThetaInit::raw_score());
      const auto fit = fit_linear_explanatory(ds.train, ds.features, proxy, lc);
      fill_warm(m, ds, fit.bank, cfg.mcem.grid, cfg);
      if (!ds.cold_test.empty()) {
        ItemBank cold;
        for (const auto& [id, x] : ds.oos_features.rows) cold.emplace(id, predict_cold_linear(fit.model, x));
        m.cold = evaluate_held_out(ds.cold_test, cold, cfg.mcem.grid, cfg.leave_one_out).report;
      }
    } else {
      throw Error("unknown method '" + method + "'");
    }
    m.ok = true;
  } catch (const std::exception& e) {
    m.error = e.what();
  }
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

}  // namespace detail

/// Runs one cell; method failures are recorded in the report.
inline CellReport run_cell(const RunConfig& cfg, int items, int sessions) {
  CellReport cell;
  cell.n_items = items;
  cell.n_sessions = sessions;
  cell.seed = cfg.seed;
  SimDataset ds;
  try {
    ds = simulate(detail::cell_sim_config(cfg, items, sessions));
    const GridPtr truth_grid = cfg.experiment.truth_grid.make();
    if (!ds.warm_test.empty()) cell.truth_warm = evaluate(ds.warm_test, sim_bank(ds.truth.items), truth_grid);
    if (!ds.cold_test.empty()) cell.truth_cold = evaluate(ds.cold_test, sim_bank(ds.truth.oos_items), truth_grid);
  } catch (const std::exception& e) {
    cell.error = e.what();
    return cell;
  }
  for (const auto& method : cfg.experiment.methods) cell.methods.push_back(detail::run_method(method, ds, cfg));
  return cell;
}

/// Every (items, sessions) combination of the experiment spec, items-major.
inline std::vector<CellReport> run_experiment_grid(const RunConfig& cfg, const CellProgress& progress = {}) {
  std::vector<CellReport> out;
  for (int items : cfg.experiment.items) {
    for (int sessions : cfg.experiment.sessions) {
      out.push_back(run_cell(cfg, items, sessions));
      if (progress) progress(out.back());
    }
  }
  return out;
}

inline json method_report_json(const MethodReport& m) {
  json j{{"method", m.method}, {"ok", m.ok}, {"seconds", m.seconds}};
  if (!m.ok) j["error"] = m.error;
  if (m.warm) j["warm"] = eval_report_json(*m.warm);
  if (m.cold) j["cold"] = eval_report_json(*m.cold);
  j["theta_correlation"] = optional_json(m.theta_correlation);
  auto bins_json = [](const std::vector<CalibrationBin>& bins) {
    json out = json::array();
    for (const auto& b : bins) {
      out.push_back({{"bin", b.bin}, {"mean_grade", b.mean_grade}, {"mean_pred", b.mean_pred}, {"count", b.count}});
    }
    return out;
  };
  j["calibration"] = bins_json(m.calibration);
  j["calibration_loo"] = bins_json(m.calibration_loo);
  json trace = json::array();
  for (const auto& t : m.trace) {
    trace.push_back({{"iteration", t.iteration},
                     {"nonparametric_loss", t.nonparametric_loss},
                     {"parametric_loss", t.parametric_loss}});
  }
  j["trace"] = std::move(trace);
  return j;
}

inline json cell_report_json(const CellReport& c) {
  json j{{"n_items", c.n_items}, {"n_sessions", c.n_sessions}, {"seed", c.seed}};
  if (!c.error.empty()) j["error"] = c.error;
  if (c.truth_warm) j["truth_warm"] = eval_report_json(*c.truth_warm);
  if (c.truth_cold) j["truth_cold"] = eval_report_json(*c.truth_cold);
  json methods = json::array();
  for (const auto& m : c.methods) methods.push_back(method_report_json(m));
  j["methods"] = std::move(methods);
  return j;
}

inline json grid_report_json(const std::vector<CellReport>& cells, const Provenance& prov) {
  json j = artifact("grid_report", prov);
  json arr = json::array();
  for (const auto& c : cells) arr.push_back(cell_report_json(c));
  j["cells"] = std::move(arr);
  return j;
}

}  // namespace autoirt

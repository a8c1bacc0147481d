// Command-line front end: simulate, split, calibrate, score, evaluate, project, grid-experiment.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "autoirt/experiment.hpp"
#include "autoirt/io.hpp"

namespace fs = std::filesystem;
using namespace autoirt;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string config;
  std::vector<std::string> sets;
};

struct Context {
  RunConfig cfg;
  Provenance prov;
};

Context load_context(const Globals& g) {
  std::vector<std::pair<std::string, json>> overrides;
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("--set expects key=value, got '" + s + "'");
    overrides.emplace_back(s.substr(0, eq), override_value(s.substr(eq + 1)));
  }
  if (g.seed) overrides.emplace_back("seed", json(*g.seed));
  if (g.workers) overrides.emplace_back("workers", json(*g.workers));
  Context ctx;
  ctx.cfg = load_run_config(g.config.empty() ? std::nullopt : std::optional<fs::path>(g.config), overrides);
  if (ctx.cfg.workers) set_worker_count(static_cast<std::size_t>(*ctx.cfg.workers));
  ctx.prov.config_hash = config_hash(ctx.cfg);
  ctx.prov.seed = ctx.cfg.seed;
  return ctx;
}

void summary(const std::string& stage, json fields) {
  json line{{"stage", stage}, {"status", "ok"}};
  line.update(fields);
  std::cout << line.dump() << std::endl;
}

void log(const std::string& msg) { std::cerr << "autoirt: " << msg << '\n'; }

// --- simulate ---

struct SimulateArgs {
  std::string out_dir;
};

void run_simulate(const Context& ctx, const SimulateArgs& a) {
  const fs::path dir(a.out_dir);
  log("simulating " + std::to_string(ctx.cfg.simulate.n_items) + " items, " +
      std::to_string(ctx.cfg.simulate.n_sessions) + " sessions");
  const SimDataset ds = simulate(ctx.cfg.simulate);
  FeatureTable all = ds.features;
  for (const auto& [id, x] : ds.oos_features.rows) all.rows.emplace(id, x);
  write_responses(dir / "responses.csv", ds.train, ctx.prov);
  write_responses(dir / "warm_test.csv", ds.warm_test, ctx.prov);
  write_responses(dir / "cold_test.csv", ds.cold_test, ctx.prov);
  write_features(dir / "features.csv", all, ctx.prov);
  write_json(dir / "truth.json", truth_json(ds, ctx.prov));
  summary("simulate", {{"out_dir", dir.string()},
                       {"items", ds.truth.items.size()},
                       {"oos_items", ds.truth.oos_items.size()},
                       {"train_responses", ds.train.size()},
                       {"warm_test_responses", ds.warm_test.size()},
                       {"cold_test_responses", ds.cold_test.size()}});
}

// --- split ---

struct SplitArgs {
  std::string responses, out_dir;
};

void run_split(const Context& ctx, const SplitArgs& a) {
  const ResponseTable responses = read_responses(a.responses);
  Rng rng = substream(ctx.cfg.seed, "split");
  const SplitResult s = make_split(responses, ctx.cfg.split, rng);
  const fs::path dir(a.out_dir);
  write_responses(dir / "train.csv", s.train, ctx.prov);
  write_responses(dir / "test.csv", s.test, ctx.prov);
  std::string pilots = provenance_comment(ctx.prov) + "item_id,short\n";
  for (const auto& id : s.pilot_items) {
    append_row(pilots, {id, s.short_pilot_items.count(id) ? "1" : "0"});
  }
  write_atomic(dir / "pilot_items.csv", pilots);
  if (!s.short_pilot_items.empty()) {
    log(std::to_string(s.short_pilot_items.size()) + " pilot items had fewer than " +
        std::to_string(ctx.cfg.split.jump_responses) + " post-split responses");
  }
  summary("split", {{"mode", split_mode_name(ctx.cfg.split.mode)},
                    {"train_responses", s.train.size()},
                    {"test_responses", s.test.size()},
                    {"pilot_items", s.pilot_items.size()},
                    {"short_pilot_items", s.short_pilot_items.size()}});
}

// --- calibrate ---

struct CalibrateArgs {
  std::string method = "autoirt";
  std::string responses, features, proxy, out_dir;
  std::string out_bank, out_scores, out_trace, out_diagnostics, out_model;

  // Explicit path, else `name` inside --out-dir, else not written.
  std::optional<fs::path> target(const std::string& explicit_path, const char* name) const {
    if (!explicit_path.empty()) return fs::path(explicit_path);
    if (!out_dir.empty()) return fs::path(out_dir) / name;
    return std::nullopt;
  }
};

void run_calibrate(const Context& ctx, const CalibrateArgs& a) {
  const bool feature_based = a.method != "irt";
  DatasetPaths paths{a.responses, std::nullopt, std::nullopt, std::nullopt};
  if (!a.features.empty()) paths.features = a.features;
  const auto bank_path = a.target(a.out_bank, "bank.json");
  if (!bank_path) throw Error("either --out-dir or --out-bank is required");
  const DatasetBundle data = load_and_validate(paths, feature_based);
  const ModelFamily family = ctx.cfg.model_family();
  const GridPtr grid = ctx.cfg.mcem.grid;
  log("calibrating " + a.method + " on " + std::to_string(data.report.n_responses) + " responses, " +
      std::to_string(data.report.n_items) + " items, " + std::to_string(data.report.n_sessions) + " sessions");

  ItemBank bank;
  json fields{{"method", a.method}, {"family", family.name()}};
  if (a.method == "autoirt") {
    const CalibrationResult r = calibrate(data.responses, data.features, ctx.cfg.mcem);
    bank = r.bank;
    auto diagnostics = r.diagnostics;
    for (const auto& [id, p] : r.cold_start_bank) bank.emplace(id, p);
    for (const auto& [id, d] : r.cold_start_diagnostics) diagnostics.emplace(id, d);
    const auto* gbt = dynamic_cast<const GbtClassifier*>(r.classifier.get());
    const auto model_path = a.target(a.out_model, "classifier.json");
    if (gbt && model_path) write_json(*model_path, classifier_json(gbt->model(), ctx.prov));
    if (auto p = a.target(a.out_trace, "trace.csv")) write_trace(*p, r.trace, ctx.prov);
    if (auto p = a.target(a.out_diagnostics, "diagnostics.csv")) write_diagnostics(*p, diagnostics, ctx.prov);
    std::map<std::string, SessionScore> scores;
    for (const auto& [sid, post] : r.session_posteriors) {
      scores.emplace(sid, SessionScore{posterior_mean(post), posterior_sd(post)});
    }
    if (auto p = a.target(a.out_scores, "scores.csv")) write_scores(*p, scores, ctx.prov);
    fields["iterations"] = r.trace.size();
    fields["final_nonparametric_loss"] = r.trace.back().nonparametric_loss;
    fields["final_parametric_loss"] = r.trace.back().parametric_loss;
    fields["cold_start_items"] = r.cold_start_bank.size();
  } else if (a.method == "irt") {
    const NonexplanatoryFit fit = fit_nonexplanatory(data.responses, grid, family, ctx.cfg.mml);
    bank = fit.bank;
    fields["iterations"] = fit.iterations;
    fields["converged"] = fit.converged;
    fields["degenerate_items"] = fit.degenerate.size();
    if (!fit.marginal_log_likelihood.empty()) fields["marginal_log_likelihood"] = fit.marginal_log_likelihood.back();
  } else if (a.method == "linear") {
    ProxyTheta proxy;
    if (!a.proxy.empty()) {
      for (const auto& [sid, s] : read_scores(a.proxy)) proxy.emplace(sid, s.score);
    } else {
      proxy = initialize_theta(data.responses, ThetaInit::raw_score());
    }
    LinearConfig lc = ctx.cfg.linear;
    lc.family = family;
    const LinearFit fit = fit_linear_explanatory(data.responses, data.features, proxy, lc);
    bank = fit.bank;
    std::size_t cold = 0;
    for (const auto& [id, x] : data.features.rows) {
      if (bank.emplace(id, predict_cold_linear(fit.model, x)).second) ++cold;
    }
    if (auto p = a.target(a.out_model, "linear_model.json")) {
      write_json(*p, linear_model_json(fit.model, ctx.prov));
    }
    fields["lambda_coef"] = fit.model.lambda_coef;
    fields["lambda_effects"] = fit.model.lambda_effects;
    fields["objective"] = fit.objective;
    fields["cold_start_items"] = cold;
  } else {
    throw Error("unknown method '" + a.method + "' (expected autoirt, irt or linear)");
  }
  write_bank(*bank_path, bank, family, ctx.prov);
  fields["items"] = bank.size();
  fields["bank"] = bank_path->string();
  summary("calibrate", fields);
}

// --- score ---

struct ScoreArgs {
  std::string bank, responses, out;
};

void run_score(const Context& ctx, const ScoreArgs& a) {
  const ItemBank bank = read_bank(a.bank);
  const ResponseTable responses = read_responses(a.responses);
  const auto scores = score_sessions_detailed(responses, bank, ctx.cfg.mcem.grid);
  write_scores(a.out, scores, ctx.prov);
  summary("score", {{"sessions", scores.size()}, {"out", a.out}});
}

// --- evaluate ---

struct EvaluateArgs {
  std::string bank, test, out, pairs, calibration_out;
};

void run_evaluate(const Context& ctx, const EvaluateArgs& a) {
  const ItemBank bank = read_bank(a.bank);
  const ResponseTable test = read_responses(a.test);
  RepeatPairs pairs;
  if (!a.pairs.empty()) pairs = read_pairs(a.pairs);
  const GridPtr grid = ctx.cfg.mcem.grid;
  const EvalReport rep = evaluate(test, bank, grid, pairs, ctx.cfg.leave_one_out);
  json doc = artifact("eval_report", ctx.prov);
  doc.update(eval_report_json(rep));
  if (rep.retest_reliability) {
    const auto scores = score_sessions(test, bank, grid);
    std::vector<double> v;
    for (const auto& [_, s] : scores) v.push_back(s);
    double mean = 0.0, ss = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    doc["score_sd"] = sd;
    doc["sem"] = sem_from_reliability(std::clamp(*rep.retest_reliability, 0.0, 1.0), sd);
  }
  write_json(a.out, doc);
  if (!a.calibration_out.empty()) {
    const int n_bins = ctx.cfg.experiment.calibration_bins;
    const auto bins = ctx.cfg.leave_one_out
                          ? loo_calibration_table(test, bank, grid, n_bins)
                          : calibration_table(test, bank, score_sessions(test, bank, grid), n_bins);
    write_calibration_table(a.calibration_out, bins, ctx.prov);
  }
  json fields = eval_report_json(rep);
  fields["out"] = a.out;
  summary("evaluate", fields);
}

// --- project ---

struct ProjectArgs {
  std::string classifier, features, out, diagnostics;
};

void run_project(const Context& ctx, const ProjectArgs& a) {
  const GbtClassifier classifier(parse_classifier(read_json(a.classifier), a.classifier));
  const FeatureTable features = read_features(a.features);
  const BankProjection p =
      cold_start_projection(classifier, features, ctx.cfg.mcem.grid, ctx.cfg.mcem.effective_projection());
  write_bank(a.out, p.bank, ctx.cfg.model_family(), ctx.prov);
  if (!a.diagnostics.empty()) write_diagnostics(a.diagnostics, p.diagnostics, ctx.prov);
  std::size_t unconverged = 0, low_info = 0;
  for (const auto& [_, d] : p.diagnostics) {
    unconverged += d.converged ? 0 : 1;
    low_info += d.low_information ? 1 : 0;
  }
  summary("project", {{"items", p.bank.size()},
                      {"unconverged", unconverged},
                      {"low_information", low_info},
                      {"out", a.out}});
}

// --- grid-experiment ---

struct GridArgs {
  std::string out;
};

void run_grid(const Context& ctx, const GridArgs& a) {
  const auto cells = run_experiment_grid(ctx.cfg, [](const CellReport& c) {
    json line{{"stage", "grid-cell"}, {"status", c.error.empty() ? "ok" : "error"},
              {"n_items", c.n_items}, {"n_sessions", c.n_sessions}};
    if (!c.error.empty()) line["error"] = c.error;
    for (const auto& m : c.methods) {
      json mj{{"ok", m.ok}, {"seconds", m.seconds}};
      if (!m.ok) mj["error"] = m.error;
      if (m.warm) mj["warm_loss"] = m.warm->test_loss, mj["warm_pearson"] = optional_json(m.warm->pearson);
      if (m.cold) mj["cold_pearson"] = optional_json(m.cold->pearson);
      mj["theta_correlation"] = optional_json(m.theta_correlation);
      line[m.method] = std::move(mj);
    }
    std::cout << line.dump() << std::endl;
  });
  write_json(a.out, grid_report_json(cells, ctx.prov));
  std::size_t failures = 0;
  for (const auto& c : cells) {
    if (!c.error.empty()) ++failures;
    for (const auto& m : c.methods) failures += m.ok ? 0 : 1;
  }
  summary("grid-experiment", {{"cells", cells.size()}, {"failures", failures}, {"out", a.out}});
  if (failures) throw Error(std::to_string(failures) + " grid cell or method failure(s); see " + a.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explanatory item calibration with a learned response model projected onto IRT"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--workers", g.workers, "Worker threads (default: AUTOIRT_WORKERS or hardware)")
      ->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "Configuration override key=value (dotted keys, repeatable)");

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "Generate a synthetic bank, abilities and responses");
  c_sim->add_option("--out-dir", sim.out_dir, "Output directory")->required();

  SplitArgs split;
  std::optional<std::string> split_mode, split_date;
  std::optional<int> split_jump;
  std::optional<double> split_fraction, split_pilot;
  auto* c_split = app.add_subcommand("split", "Cold, jump or warm train/test split");
  c_split->add_option("--responses", split.responses, "Responses CSV")->required()->check(CLI::ExistingFile);
  c_split->add_option("--out-dir", split.out_dir, "Output directory")->required();
  c_split->add_option("--mode", split_mode, "cold|jump|warm")->check(CLI::IsMember({"cold", "jump", "warm"}));
  c_split->add_option("--jump-responses", split_jump, "R for jump splits");
  c_split->add_option("--split-fraction", split_fraction, "Fraction of time order before the split");
  c_split->add_option("--split-date", split_date, "ISO-8601 split timestamp");
  c_split->add_option("--pilot-fraction", split_pilot, "Fraction of items held out as pilots");

  CalibrateArgs cal;
  auto* c_cal = app.add_subcommand("calibrate", "Fit an item bank");
  c_cal->add_option("--method", cal.method, "autoirt|irt|linear")
      ->check(CLI::IsMember({"autoirt", "irt", "linear"}));
  c_cal->add_option("--responses", cal.responses, "Responses CSV")->required()->check(CLI::ExistingFile);
  c_cal->add_option("--features", cal.features, "Item features CSV")->check(CLI::ExistingFile);
  c_cal->add_option("--proxy", cal.proxy, "Scores CSV used as fixed abilities (linear)")->check(CLI::ExistingFile);
  c_cal->add_option("--out-dir", cal.out_dir, "Output directory for every artifact");
  c_cal->add_option("--out-bank", cal.out_bank, "Item bank JSON");
  c_cal->add_option("--out-scores", cal.out_scores, "Training-session scores CSV (autoirt)");
  c_cal->add_option("--out-trace", cal.out_trace, "Per-iteration loss trace CSV (autoirt)");
  c_cal->add_option("--out-diagnostics", cal.out_diagnostics, "Projection diagnostics CSV (autoirt)");
  c_cal->add_option("--out-model", cal.out_model, "Classifier or linear model JSON");

  ScoreArgs sc;
  auto* c_score = app.add_subcommand("score", "Posterior-mean scores per session");
  c_score->add_option("--bank", sc.bank, "Item bank JSON")->required()->check(CLI::ExistingFile);
  c_score->add_option("--responses", sc.responses, "Responses CSV")->required()->check(CLI::ExistingFile);
  c_score->add_option("--out", sc.out, "Scores CSV")->required();

  EvaluateArgs ev;
  bool loo = false;
  auto* c_eval = app.add_subcommand("evaluate", "Held-out loss, item-mean correlations, reliability");
  c_eval->add_option("--bank", ev.bank, "Item bank JSON")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--test", ev.test, "Test responses CSV")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--out", ev.out, "Report JSON")->required();
  c_eval->add_option("--pairs", ev.pairs, "Repeat-session pairs CSV")->check(CLI::ExistingFile);
  c_eval->add_option("--calibration-out", ev.calibration_out, "Calibration table CSV");
  c_eval->add_flag("--leave-one-out", loo, "Score each response without itself");

  ProjectArgs pr;
  auto* c_proj = app.add_subcommand("project", "Item parameters from a saved classifier and features");
  c_proj->add_option("--classifier", pr.classifier, "Classifier JSON")->required()->check(CLI::ExistingFile);
  c_proj->add_option("--features", pr.features, "Item features CSV")->required()->check(CLI::ExistingFile);
  c_proj->add_option("--out", pr.out, "Item bank JSON")->required();
  c_proj->add_option("--diagnostics", pr.diagnostics, "Diagnostics CSV");

  GridArgs gr;
  std::vector<int> grid_items, grid_sessions;
  std::vector<std::string> grid_methods;
  auto* c_grid = app.add_subcommand("grid-experiment", "Simulation grid over item and session counts");
  c_grid->add_option("--out", gr.out, "Grid report JSON")->required();
  c_grid->add_option("--items", grid_items, "Item counts")->delimiter(',');
  c_grid->add_option("--sessions", grid_sessions, "Session counts")->delimiter(',');
  c_grid->add_option("--methods", grid_methods, "Methods (autoirt, irt, linear)")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  auto* sub = app.get_subcommands().front();
  const std::string stage = sub->get_name();
  try {
    if (sub == c_split) {
      if (split_mode) g.sets.push_back("split.mode=\"" + *split_mode + "\"");
      if (split_jump) g.sets.push_back("split.jump_responses=" + std::to_string(*split_jump));
      if (split_fraction) g.sets.push_back("split.split_fraction=" + format_double(*split_fraction));
      if (split_date) g.sets.push_back("split.split_date=" + json(*split_date).dump());
      if (split_pilot) g.sets.push_back("split.pilot_fraction=" + format_double(*split_pilot));
    }
    if (sub == c_eval && loo) g.sets.push_back("leave_one_out=true");
    if (sub == c_grid) {
      if (!grid_items.empty()) g.sets.push_back("experiment.items=" + json(grid_items).dump());
      if (!grid_sessions.empty()) g.sets.push_back("experiment.sessions=" + json(grid_sessions).dump());
      if (!grid_methods.empty()) g.sets.push_back("experiment.methods=" + json(grid_methods).dump());
    }
    const Context ctx = load_context(g);
    if (sub == c_sim) run_simulate(ctx, sim);
    if (sub == c_split) run_split(ctx, split);
    if (sub == c_cal) run_calibrate(ctx, cal);
    if (sub == c_score) run_score(ctx, sc);
    if (sub == c_eval) run_evaluate(ctx, ev);
    if (sub == c_proj) run_project(ctx, pr);
    if (sub == c_grid) run_grid(ctx, gr);
  } catch (const std::exception& e) {
    std::cerr << "autoirt: " << stage << ": " << e.what() << '\n';
    std::cout << json{{"stage", stage}, {"status", "error"}, {"error", e.what()}}.dump() << std::endl;
    return 1;
  }
  return 0;
}

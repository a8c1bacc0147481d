#pragma once

// Monte Carlo EM calibration: alternate classifier M-steps (train, then project every item
// curve onto the parametric family) with posterior-draw E-steps.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autoirt/data.hpp"
#include "autoirt/learner.hpp"
#include "autoirt/posterior.hpp"
#include "autoirt/projection.hpp"
#include "autoirt/util.hpp"

namespace autoirt {

struct ThetaInit {
  enum class Kind { StandardizedRawScore, Provided };
  Kind kind = Kind::StandardizedRawScore;
  std::map<std::string, double> provided;  // external scores, standardized before use

  static ThetaInit raw_score() { return {}; }
  static ThetaInit from_scores(std::map<std::string, double> scores) {
    return {Kind::Provided, std::move(scores)};
  }
};

inline constexpr double kRawScoreClamp = 3.0;

namespace detail {
inline void standardize(std::map<std::string, double>& values) {
  double mean = 0.0;
  for (const auto& [_, v] : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (const auto& [_, v] : values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(values.size()));
  for (auto& [_, v] : values) v = sd > 1e-12 ? (v - mean) / sd : 0.0;
}
}  // namespace detail

/// Starting ability per session: standardized external scores when given, otherwise the
/// z-score of the session's mean grade clamped to [-3, 3]. Population sd; zero variance maps
/// every session to 0.
inline std::map<std::string, double> initialize_theta(const ResponseTable& responses,
                                                      const ThetaInit& init = {}) {
  if (responses.empty()) throw Error("initialize_theta: empty response table");
  std::map<std::string, double> out;
  if (init.kind == ThetaInit::Kind::Provided) {
    for (const auto& sid : responses.session_ids()) {
      auto it = init.provided.find(sid);
      if (it == init.provided.end() || !std::isfinite(it->second)) {
        throw Error("initialize_theta: no initial score for session '" + sid + "'");
      }
      out[sid] = it->second;
    }
    detail::standardize(out);
    return out;
  }
  std::map<std::string, std::pair<double, double>> tally;
  for (const auto& r : responses.rows) {
    auto& [correct, total] = tally[r.session_id];
    correct += r.grade.value();
    total += 1.0;
  }
  for (const auto& [sid, t] : tally) out[sid] = t.first / t.second;
  detail::standardize(out);
  for (auto& [_, v] : out) v = std::clamp(v, -kRawScoreClamp, kRawScoreClamp);
  return out;
}

struct McemConfig {
  int iterations = 4;
  GridPtr grid = default_grid();
  ModelFamily family = ModelFamily::three_pl_fixed(0.25);
  LearnerConfig learner;
  ProjectionConfig projection;  // family is overridden by `family`
  std::uint64_t seed = 0;
  ThetaInit theta_init;
  int draws_per_session = 1;

  void validate() const {
    if (iterations < 1) throw Error("mcem: iterations must be >= 1");
    if (!grid) throw Error("mcem: missing theta grid");
    if (draws_per_session < 1) throw Error("mcem: draws_per_session must be >= 1");
    projection.validate();
  }

  ProjectionConfig effective_projection() const {
    ProjectionConfig p = projection;
    p.family = family;
    return p;
  }
};

struct TraceEntry {
  int iteration = 0;
  double nonparametric_loss = 0.0;  // classifier, mean per response
  double parametric_loss = 0.0;     // projected IRT bank, mean per response
};

struct CalibrationResult {
  ItemBank bank;  // exactly the items with training responses
  ClassifierPtr classifier;
  GridPtr grid;
  std::map<std::string, AbilityPosterior> session_posteriors;  // from the final bank
  std::vector<TraceEntry> trace;
  std::map<std::string, ProjectionResult> diagnostics;
  ItemBank cold_start_bank;  // feature-only items, parameters from the final classifier
  std::map<std::string, ProjectionResult> cold_start_diagnostics;
};

namespace detail {

struct MStepData {
  std::vector<FeatureRow> rows;
  std::vector<Grade> grades;
};

inline MStepData build_rows(const std::vector<SessionResponses>& sessions,
                            const std::vector<std::vector<double>>& draws,
                            const FeatureTable& features) {
  MStepData data;
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    for (double theta : draws[s]) {
      for (const auto& r : sessions[s].responses) {
        data.rows.push_back({theta, features.at(r.item_id), r.item_id});
        data.grades.push_back(r.grade);
      }
    }
  }
  return data;
}

inline double parametric_loss(const MStepData& data, const ItemBank& bank) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    const ItemParams& p = lookup(bank, data.rows[i].item_id);
    total -= response_log_likelihood(data.grades[i], data.rows[i].theta, p);
  }
  return total / static_cast<double>(data.rows.size());
}

inline std::uint64_t mstep_seed(std::uint64_t master, int iteration) {
  return splitmix64(master ^ fnv1a("mstep") ^ splitmix64(static_cast<std::uint64_t>(iteration)));
}

}  // namespace detail

/// Curves from the classifier for feature-only items, projected onto the family. Items are
/// passed under their own ids, which the classifier has never seen.
inline BankProjection cold_start_projection(const GradeClassifier& classifier,
                                            const FeatureTable& features, const GridPtr& grid,
                                            const ProjectionConfig& config) {
  if (features.rows.empty()) return {};
  if (features.dimension() != classifier.feature_dimension()) {
    throw Error("cold start: feature dimension " + std::to_string(features.dimension()) +
                " does not match classifier dimension " +
                std::to_string(classifier.feature_dimension()));
  }
  std::map<std::string, CurveSample> curves;
  for (const auto& [id, x] : features.rows) {
    curves.emplace(id, CurveSample{grid, predict_curve(classifier, x, id, *grid)});
  }
  return project_bank(curves, config);
}

inline ItemBank cold_start_params(const CalibrationResult& result, const FeatureTable& features,
                                  const GridPtr& grid, const ProjectionConfig& config) {
  return cold_start_projection(*result.classifier, features, grid, config).bank;
}

inline CalibrationResult calibrate(const ResponseTable& responses, const FeatureTable& features,
                                   const McemConfig& config, const GradeLearner& learner) {
  config.validate();
  if (responses.empty()) throw Error("calibrate: empty response table");
  const auto sessions = group_by_session(responses);
  const auto training_items = responses.item_ids();
  for (const auto& id : training_items) {
    if (!features.contains(id)) throw Error("calibrate: no features for responded item '" + id + "'");
  }
  const ProjectionConfig projection = config.effective_projection();

  const auto init = initialize_theta(responses, config.theta_init);
  std::vector<std::vector<double>> draws(sessions.size());
  for (std::size_t s = 0; s < sessions.size(); ++s) draws[s] = {init.at(sessions[s].session_id)};

  CalibrationResult result;
  result.grid = config.grid;
  for (int it = 1; it <= config.iterations; ++it) {
    const auto data = detail::build_rows(sessions, draws, features);
    TraceEntry entry{it, 0.0, 0.0};
    try {
      result.classifier = learner.train(data.rows, data.grades, detail::mstep_seed(config.seed, it));
      const auto probs = result.classifier->predict(data.rows);
      entry.nonparametric_loss = mean_cross_entropy(probs, data.grades);

      std::map<std::string, CurveSample> curves;
      for (const auto& id : training_items) {
        curves.emplace(id, CurveSample{config.grid,
                                       predict_curve(*result.classifier, features.at(id), id, *config.grid)});
      }
      auto projected = project_bank(curves, projection);
      result.bank = std::move(projected.bank);
      result.diagnostics = std::move(projected.diagnostics);
      entry.parametric_loss = detail::parametric_loss(data, result.bank);
    } catch (const std::exception& e) {
      throw Error("M-step of EM iteration " + std::to_string(it) + ": " + e.what());
    }
    result.trace.push_back(entry);
    if (it == config.iterations) break;  // no E-step after the final M-step

    parallel_for(sessions.size(), [&](std::size_t s) {
      const auto post = compute_posterior(sessions[s], result.bank, config.grid);
      Rng rng = substream(config.seed ^ splitmix64(static_cast<std::uint64_t>(it)), "estep",
                          sessions[s].session_id);
      draws[s].resize(static_cast<std::size_t>(config.draws_per_session));
      for (double& d : draws[s]) d = sample_theta(post, rng);
    });
  }

  std::vector<AbilityPosterior> posts(sessions.size());
  parallel_for(sessions.size(), [&](std::size_t s) {
    posts[s] = compute_posterior(sessions[s], result.bank, config.grid);
  });
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    result.session_posteriors.emplace(sessions[s].session_id, std::move(posts[s]));
  }

  FeatureTable cold{features.names, {}};
  for (const auto& [id, x] : features.rows) {
    if (!training_items.count(id)) cold.rows.emplace(id, x);
  }
  if (!cold.rows.empty()) {
    auto projected = cold_start_projection(*result.classifier, cold, config.grid, projection);
    result.cold_start_bank = std::move(projected.bank);
    result.cold_start_diagnostics = std::move(projected.diagnostics);
  }
  return result;
}

inline CalibrationResult calibrate(const ResponseTable& responses, const FeatureTable& features,
                                   const McemConfig& config) {
  return calibrate(responses, features, config, GbtLearner(config.learner));
}

}  // namespace autoirt

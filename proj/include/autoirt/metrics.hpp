#pragma once

// Evaluation of a calibrated bank on held-out responses, and the cold/jump/warm splits.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "autoirt/data.hpp"
#include "autoirt/posterior.hpp"
#include "autoirt/util.hpp"

namespace autoirt {

using Scores = std::map<std::string, double>;

// ---------------------------------------------------------------------------------------------
// correlation helpers
// ---------------------------------------------------------------------------------------------

/// Pearson correlation; empty when either side has zero variance.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 1e-300 || syy <= 1e-300) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks, ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

// ---------------------------------------------------------------------------------------------
// scoring and losses
// ---------------------------------------------------------------------------------------------

struct SessionScore {
  double score = 0.0;
  double sd = 0.0;
};

inline std::map<std::string, SessionScore> score_sessions_detailed(const ResponseTable& test,
                                                                   const ItemBank& bank,
                                                                   const GridPtr& grid) {
  const auto sessions = group_by_session(test);
  std::vector<SessionScore> out(sessions.size());
  parallel_for(sessions.size(), [&](std::size_t s) {
    const auto post = compute_posterior(sessions[s], bank, grid);
    out[s] = {posterior_mean(post), posterior_sd(post)};
  });
  std::map<std::string, SessionScore> scores;
  for (std::size_t s = 0; s < sessions.size(); ++s) scores.emplace(sessions[s].session_id, out[s]);
  return scores;
}

/// Posterior-mean score of every session in the table.
inline Scores score_sessions(const ResponseTable& test, const ItemBank& bank, const GridPtr& grid) {
  Scores scores;
  for (const auto& [sid, s] : score_sessions_detailed(test, bank, grid)) scores.emplace(sid, s.score);
  return scores;
}

/// Per-row scores that leave the row's own response out of its session's posterior.
inline std::vector<double> leave_one_out_scores(const ResponseTable& test, const ItemBank& bank,
                                                const GridPtr& grid) {
  std::map<std::string, std::vector<std::size_t>> rows_of;
  for (std::size_t i = 0; i < test.rows.size(); ++i) rows_of[test.rows[i].session_id].push_back(i);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups(rows_of.begin(), rows_of.end());
  std::vector<double> out(test.rows.size());
  parallel_for(groups.size(), [&](std::size_t g) {
    const auto& idx = groups[g].second;
    for (std::size_t leave : idx) {
      std::vector<ItemResponse> rest;
      for (std::size_t i : idx) {
        if (i != leave) rest.push_back({test.rows[i].item_id, test.rows[i].grade});
      }
      out[leave] = posterior_mean(compute_posterior(rest, bank, grid));
    }
  });
  return out;
}

namespace detail {
inline double score_of(const Scores& scores, const std::string& sid) {
  auto it = scores.find(sid);
  if (it == scores.end()) throw Error("no score for session '" + sid + "'");
  return it->second;
}
}  // namespace detail

/// Mean binary cross-entropy of the test responses at the scored abilities.
inline double test_loss(const ResponseTable& test, const ItemBank& bank, const Scores& scores) {
  if (test.empty()) throw Error("test_loss: empty test table");
  double total = 0.0;
  for (const auto& r : test.rows) {
    total -= response_log_likelihood(r.grade, detail::score_of(scores, r.session_id),
                                     detail::lookup(bank, r.item_id));
  }
  return total / static_cast<double>(test.size());
}

/// Same loss with one ability per row (e.g. leave-one-out scores).
inline double test_loss(const ResponseTable& test, const ItemBank& bank,
                        const std::vector<double>& row_thetas) {
  if (test.empty()) throw Error("test_loss: empty test table");
  if (row_thetas.size() != test.size()) throw Error("test_loss: one theta per row required");
  double total = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    total -= response_log_likelihood(test.rows[i].grade, row_thetas[i],
                                     detail::lookup(bank, test.rows[i].item_id));
  }
  return total / static_cast<double>(test.size());
}

struct ItemMeans {
  std::vector<std::string> item_ids;
  std::vector<double> observed;
  std::vector<double> predicted;
  std::vector<std::size_t> counts;
};

inline ItemMeans item_means(const ResponseTable& test, const ItemBank& bank, const Scores& scores) {
  std::map<std::string, std::tuple<double, double, std::size_t>> acc;
  for (const auto& r : test.rows) {
    const double p = irf(detail::score_of(scores, r.session_id), detail::lookup(bank, r.item_id));
    auto& [g, pr, n] = acc[r.item_id];
    g += r.grade.value();
    pr += p;
    n += 1;
  }
  ItemMeans m;
  for (const auto& [id, t] : acc) {
    const auto& [g, pr, n] = t;
    m.item_ids.push_back(id);
    m.observed.push_back(g / static_cast<double>(n));
    m.predicted.push_back(pr / static_cast<double>(n));
    m.counts.push_back(n);
  }
  return m;
}

struct ItemCorrelations {
  std::optional<double> pearson;
  std::optional<double> spearman;
  std::size_t n_items = 0;
};

/// Correlation, over items, between mean observed grade and mean predicted probability.
inline ItemCorrelations item_grade_correlations(const ResponseTable& test, const ItemBank& bank,
                                                const Scores& scores) {
  const ItemMeans m = item_means(test, bank, scores);
  if (m.item_ids.size() < 3) {
    throw Error("item correlations need at least 3 items with test responses, got " +
                std::to_string(m.item_ids.size()));
  }
  return {autoirt::pearson(m.observed, m.predicted), autoirt::spearman(m.observed, m.predicted),
          m.item_ids.size()};
}

inline std::optional<double> retest_reliability(
    const Scores& scores, const std::vector<std::pair<std::string, std::string>>& pairs) {
  if (pairs.size() < 3) throw Error("retest reliability needs at least 3 session pairs");
  std::vector<double> first, second;
  for (const auto& [a, b] : pairs) {
    first.push_back(detail::score_of(scores, a));
    second.push_back(detail::score_of(scores, b));
  }
  return pearson(first, second);
}

/// Standard error of measurement S_E = S_X sqrt(1 - RR).
inline double sem_from_reliability(double rr, double score_sd) {
  if (!(rr >= 0.0 && rr <= 1.0)) throw Error("reliability must lie in [0, 1]");
  if (!(score_sd >= 0.0)) throw Error("score sd must be >= 0");
  return score_sd * std::sqrt(1.0 - rr);
}

struct CalibrationBin {
  int bin = 0;
  double mean_grade = 0.0;
  double mean_pred = 0.0;
  std::size_t count = 0;
};

/// Sessions split into equal-count bins by score percentile; per bin, mean grade and mean
/// predicted probability over the bin's responses.
inline std::vector<CalibrationBin> calibration_table(const ResponseTable& test, const ItemBank& bank,
                                                     const Scores& scores, int n_bins = 10) {
  if (n_bins < 1) throw Error("calibration table needs at least one bin");
  std::vector<std::pair<double, std::string>> order;
  for (const auto& sid : test.session_ids()) order.emplace_back(detail::score_of(scores, sid), sid);
  std::sort(order.begin(), order.end());
  std::map<std::string, int> bin_of;
  for (std::size_t j = 0; j < order.size(); ++j) {
    bin_of[order[j].second] = static_cast<int>(j * static_cast<std::size_t>(n_bins) / order.size());
  }
  std::vector<CalibrationBin> bins(static_cast<std::size_t>(n_bins));
  for (int b = 0; b < n_bins; ++b) bins[static_cast<std::size_t>(b)].bin = b;
  for (const auto& r : test.rows) {
    auto& bin = bins[static_cast<std::size_t>(bin_of.at(r.session_id))];
    bin.mean_grade += r.grade.value();
    bin.mean_pred += irf(scores.at(r.session_id), detail::lookup(bank, r.item_id));
    bin.count += 1;
  }
  for (auto& bin : bins) {
    if (bin.count > 0) {
      bin.mean_grade /= static_cast<double>(bin.count);
      bin.mean_pred /= static_cast<double>(bin.count);
    }
  }
  return bins;
}

/// Leave-one-out view of a response: the session posterior without it.
struct LooPrediction {
  double score = 0.0;  // posterior mean
  double prob = 0.0;   // posterior predictive probability of a correct response
};

inline std::vector<LooPrediction> leave_one_out_predictions(const ResponseTable& test, const ItemBank& bank,
                                                            const GridPtr& grid) {
  std::map<std::string, std::vector<std::size_t>> rows_of;
  for (std::size_t i = 0; i < test.rows.size(); ++i) rows_of[test.rows[i].session_id].push_back(i);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups(rows_of.begin(), rows_of.end());
  std::vector<LooPrediction> out(test.rows.size());
  const auto& pts = grid->points();
  parallel_for(groups.size(), [&](std::size_t g) {
    const auto& idx = groups[g].second;
    for (std::size_t leave : idx) {
      std::vector<ItemResponse> rest;
      for (std::size_t i : idx) {
        if (i != leave) rest.push_back({test.rows[i].item_id, test.rows[i].grade});
      }
      const AbilityPosterior post = compute_posterior(rest, bank, grid);
      const ItemParams& p = detail::lookup(bank, test.rows[leave].item_id);
      double prob = 0.0;
      for (std::size_t k = 0; k < pts.size(); ++k) prob += post.weights[k] * irf(pts[k], p);
      out[leave] = {posterior_mean(post), prob};
    }
  });
  return out;
}

/// Calibration table without in-sample selection: responses are binned (equal counts) by the
/// percentile of their leave-one-out score and compared with their leave-one-out predictive
/// probability.
inline std::vector<CalibrationBin> loo_calibration_table(const ResponseTable& test, const ItemBank& bank,
                                                         const GridPtr& grid, int n_bins = 10) {
  if (n_bins < 1) throw Error("calibration table needs at least one bin");
  const auto loo = leave_one_out_predictions(test, bank, grid);
  std::vector<std::size_t> order(loo.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return loo[a].score < loo[b].score; });
  std::vector<CalibrationBin> bins(static_cast<std::size_t>(n_bins));
  for (int b = 0; b < n_bins; ++b) bins[static_cast<std::size_t>(b)].bin = b;
  for (std::size_t j = 0; j < order.size(); ++j) {
    auto& bin = bins[j * static_cast<std::size_t>(n_bins) / order.size()];
    bin.mean_grade += test.rows[order[j]].grade.value();
    bin.mean_pred += loo[order[j]].prob;
    bin.count += 1;
  }
  for (auto& bin : bins) {
    if (bin.count > 0) {
      bin.mean_grade /= static_cast<double>(bin.count);
      bin.mean_pred /= static_cast<double>(bin.count);
    }
  }
  return bins;
}

struct EvalReport {
  double test_loss = 0.0;
  std::optional<double> pearson;
  std::optional<double> spearman;
  std::optional<double> retest_reliability;
  std::size_t n_items = 0;
  std::size_t n_sessions = 0;
  std::size_t n_responses = 0;
};

inline EvalReport evaluate(const ResponseTable& test, const ItemBank& bank, const GridPtr& grid,
                           const std::vector<std::pair<std::string, std::string>>& repeat_pairs = {},
                           bool leave_one_out = false) {
  const Scores scores = score_sessions(test, bank, grid);
  EvalReport rep;
  rep.test_loss = leave_one_out ? test_loss(test, bank, leave_one_out_scores(test, bank, grid))
                                : test_loss(test, bank, scores);
  const auto corr = item_grade_correlations(test, bank, scores);
  rep.pearson = corr.pearson;
  rep.spearman = corr.spearman;
  if (!repeat_pairs.empty()) rep.retest_reliability = retest_reliability(scores, repeat_pairs);
  rep.n_items = corr.n_items;
  rep.n_sessions = scores.size();
  rep.n_responses = test.size();
  return rep;
}

// ---------------------------------------------------------------------------------------------
// train/test splits
// ---------------------------------------------------------------------------------------------

struct SplitSpec {
  enum class Mode { Cold, Jump, Warm };
  Mode mode = Mode::Warm;
  int jump_responses = 0;                 // R for jump-start
  double split_fraction = 0.5;            // used when split_date is absent
  std::optional<std::string> split_date;  // ISO-8601, compared lexicographically
  double pilot_fraction = 0.5;

  void validate() const {
    if (mode == Mode::Jump && jump_responses < 0) throw Error("jump split needs R >= 0");
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw Error("split_fraction must lie in (0,1)");
    if (!(pilot_fraction > 0.0 && pilot_fraction < 1.0)) throw Error("pilot_fraction must lie in (0,1)");
  }
};

struct SplitResult {
  ResponseTable train;
  ResponseTable test;
  std::set<std::string> pilot_items;
  std::set<std::string> short_pilot_items;  // jump: fewer than R post-split responses
};

/// Row indices in time order: by timestamp when every row has one, else row order.
inline std::vector<std::size_t> time_order(const ResponseTable& table) {
  std::vector<std::size_t> idx(table.size());
  std::iota(idx.begin(), idx.end(), 0);
  const bool stamped = !table.empty() && std::all_of(table.rows.begin(), table.rows.end(),
                                                     [](const Response& r) { return r.timestamp.has_value(); });
  if (stamped) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return *table.rows[a].timestamp < *table.rows[b].timestamp;
    });
  }
  return idx;
}

inline SplitResult make_split(const ResponseTable& responses, const SplitSpec& spec, Rng& rng) {
  spec.validate();
  const auto order = time_order(responses);
  std::vector<bool> after(responses.size(), false);
  if (spec.split_date) {
    for (std::size_t i = 0; i < responses.size(); ++i) {
      const auto& ts = responses.rows[i].timestamp;
      if (!ts) throw Error("date split requested but row " + std::to_string(i + 1) + " has no timestamp");
      after[i] = *ts >= *spec.split_date;
    }
  } else {
    const auto cut = static_cast<std::size_t>(std::floor(spec.split_fraction * static_cast<double>(order.size())));
    for (std::size_t j = cut; j < order.size(); ++j) after[order[j]] = true;
  }

  SplitResult out;
  if (spec.mode == SplitSpec::Mode::Warm) {
    for (std::size_t i : order) (after[i] ? out.test : out.train).rows.push_back(responses.rows[i]);
    return out;
  }

  const auto items = responses.item_ids();
  std::vector<std::string> shuffled(items.begin(), items.end());
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto n_pilot = static_cast<std::size_t>(std::llround(spec.pilot_fraction * static_cast<double>(shuffled.size())));
  out.pilot_items.insert(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_pilot));

  const int r_limit = spec.mode == SplitSpec::Mode::Jump ? spec.jump_responses : 0;
  std::map<std::string, int> taken;
  for (std::size_t i : order) {
    const Response& r = responses.rows[i];
    const bool pilot = out.pilot_items.count(r.item_id) > 0;
    if (!after[i]) {
      if (!pilot) out.train.rows.push_back(r);
    } else if (pilot && taken[r.item_id] < r_limit) {
      ++taken[r.item_id];
      out.train.rows.push_back(r);
    } else {
      out.test.rows.push_back(r);
    }
  }
  if (r_limit > 0) {
    for (const auto& id : out.pilot_items) {
      if (taken[id] < r_limit) out.short_pilot_items.insert(id);
    }
  }
  return out;
}

}  // namespace autoirt

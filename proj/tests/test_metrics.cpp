#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "autoirt/metrics.hpp"
#include "autoirt/simgen.hpp"
#include "oracles.hpp"

using namespace autoirt;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

double binary_entropy(double p) { return -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p)); }

// Items answered by sessions scored at 0; 2PL with a = 1 so predicted p = sigmoid(-d).
struct FiveItems {
  ResponseTable table;
  ItemBank bank;
  Scores scores;
};

FiveItems five_items() {
  const std::vector<std::vector<int>> grades = {
      {1, 0, 0, 0}, {1, 1, 0, 0}, {0, 1, 0, 1}, {1, 1, 1, 0}, {1, 1, 1, 1}};
  const std::vector<double> predicted = {0.3, 0.45, 0.6, 0.7, 0.8};
  FiveItems f;
  for (std::size_t i = 0; i < grades.size(); ++i) {
    const std::string id = "i" + std::to_string(i);
    f.bank[id] = {1.0, 0.0, -logit(predicted[i])};
    for (std::size_t s = 0; s < grades[i].size(); ++s) {
      const std::string sid = "s" + std::to_string(s);
      f.table.add(sid, id, grades[i][s]);
      f.scores[sid] = 0.0;
    }
  }
  return f;
}

SplitSpec spec(SplitSpec::Mode mode, int r = 0) {
  SplitSpec s;
  s.mode = mode;
  s.jump_responses = r;
  return s;
}

ResponseTable ordered_table(int n_sessions, int n_items) {
  ResponseTable t;
  for (int s = 0; s < n_sessions; ++s) {
    for (int i = 0; i < n_items; ++i) t.add("s" + std::to_string(s), "i" + std::to_string((s + i) % 40), (s + i) % 2);
  }
  return t;
}

}  // namespace

TEST(Correlation, ReversedOrder) {
  EXPECT_DOUBLE_EQ(*pearson({1, 2, 3}, {3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(*spearman({1, 2, 3}, {3, 2, 1}), -1.0);
}

TEST(Correlation, MatchesReferenceWithTies) {
  const std::vector<double> x = {1, 2, 2, 3, 7}, y = {2, 1, 4, 4, 9};
  EXPECT_NEAR(*pearson(x, y), 0.9338145262192006, 1e-12);
  EXPECT_NEAR(*spearman(x, y), 0.7631578947368421, 1e-12);
  EXPECT_EQ(average_ranks(x), (std::vector<double>{1, 2.5, 2.5, 4, 5}));
}

TEST(Correlation, ZeroVarianceIsUndefined) {
  EXPECT_FALSE(pearson({1, 1, 1}, {1, 2, 3}).has_value());
  EXPECT_FALSE(pearson({1}, {2}).has_value());
  EXPECT_FALSE(pearson({1, 2}, {1, 2, 3}).has_value());
}

TEST(Correlation, SpearmanInvariantToMonotoneTransform) {
  Rng rng(3);
  std::normal_distribution<double> n01;
  std::vector<double> x, y, ex, cube;
  for (int i = 0; i < 200; ++i) {
    x.push_back(n01(rng));
    y.push_back(x.back() + n01(rng));
    ex.push_back(std::exp(x.back()));
    cube.push_back(y.back() * y.back() * y.back());
  }
  EXPECT_NEAR(*spearman(x, y), *spearman(ex, cube), 1e-12);
}

TEST(ItemCorrelations, HandBuiltTable) {
  const auto f = five_items();
  const auto m = item_means(f.table, f.bank, f.scores);
  ASSERT_EQ(m.item_ids.size(), 5u);
  EXPECT_DOUBLE_EQ(m.observed[2], 0.5);
  EXPECT_NEAR(m.predicted[2], 0.6, 1e-12);
  const auto c = item_grade_correlations(f.table, f.bank, f.scores);
  EXPECT_EQ(c.n_items, 5u);
  EXPECT_NEAR(*c.pearson, 0.9487859305274788, 1e-9);
  EXPECT_NEAR(*c.spearman, 0.9746794344808963, 1e-9);
}

TEST(ItemCorrelations, NeedsThreeItems) {
  ResponseTable t;
  t.add("s", "a", 1);
  t.add("s", "b", 0);
  const ItemBank bank{{"a", {1, 0, 0}}, {"b", {1, 0, 1}}};
  EXPECT_THROW(item_grade_correlations(t, bank, {{"s", 0.0}}), Error);
}

TEST(TestLoss, ConstantHalfIsLogTwo) {
  ResponseTable t;
  ItemBank bank;
  Scores scores;
  for (int i = 0; i < 10; ++i) {
    const std::string id = "i" + std::to_string(i);
    bank[id] = {1.0, 0.0, 0.0};
    t.add("s" + std::to_string(i), id, i % 3 == 0);
    scores["s" + std::to_string(i)] = 0.0;
  }
  EXPECT_NEAR(test_loss(t, bank, scores), std::numbers::ln2, 1e-12);
}

TEST(TestLoss, PerfectPredictorApproachesZero) {
  ResponseTable t;
  t.add("hi", "x", 1);
  t.add("lo", "x", 0);
  const ItemBank bank{{"x", {25.0, 0.0, 0.0}}};
  EXPECT_LT(test_loss(t, bank, Scores{{"hi", 3.0}, {"lo", -3.0}}), 1e-9);
  EXPECT_THROW(test_loss(ResponseTable{}, bank, Scores{}), Error);
  EXPECT_THROW(test_loss(t, bank, Scores{{"hi", 0.0}}), Error);
}

TEST(TestLoss, TruthMatchesConditionalEntropy) {
  SimConfig sc;
  sc.seed = 17;
  sc.n_items = 100;
  const auto items = generate_bank(sc);
  Rng rng(5);
  const auto thetas = generate_sessions(10000, 't', sc, rng);
  const auto table = generate_responses(items, thetas, 10, 99);
  const auto bank = sim_bank(items);
  double entropy = 0.0;
  for (const auto& r : table.rows) entropy += binary_entropy(irf(thetas.at(r.session_id), bank.at(r.item_id)));
  entropy /= static_cast<double>(table.size());
  EXPECT_NEAR(test_loss(table, bank, thetas), entropy, 0.01);
}

TEST(Scoring, EmptySessionIsPriorMean) {
  const auto grid = make_grid(-10.0, 10.0, 0.1, PriorSpec::normal(0.0, 2.5));
  EXPECT_NEAR(posterior_mean(compute_posterior(std::vector<ItemResponse>{}, {}, grid)), 0.0, 1e-12);
}

TEST(Scoring, IdenticalSessionsScoreIdentically) {
  ResponseTable t;
  const ItemBank bank{{"a", {1.2, 0.25, -0.5}}, {"b", {0.8, 0.25, 1.0}}, {"c", {2.0, 0.25, 0.3}}};
  for (const std::string s : {"x", "y"}) {
    t.add(s, "a", 1);
    t.add(s, "b", 0);
    t.add(s, "c", 1);
  }
  t.add("z", "c", 1);
  t.add("z", "a", 1);
  t.add("z", "b", 0);
  const auto scores = score_sessions(t, bank, default_grid());
  EXPECT_EQ(scores.at("x"), scores.at("y"));
  EXPECT_EQ(scores.at("x"), scores.at("z"));
}

TEST(Scoring, MatchesQuadratureMean) {
  const ItemBank bank{{"a", {1.2, 0.25, -0.5}}, {"b", {0.8, 0.25, 1.0}}, {"c", {2.0, 0.25, 0.3}}};
  ResponseTable t;
  t.add("s", "a", 1);
  t.add("s", "b", 0);
  t.add("s", "c", 1);
  const auto detailed = score_sessions_detailed(t, bank, default_grid());
  const auto q = oracle::posterior({{bank.at("a"), 1}, {bank.at("b"), 0}, {bank.at("c"), 1}}, -4, 4, 0.001, 0, 1);
  EXPECT_NEAR(detailed.at("s").score, q.mean, 1e-3);
  EXPECT_GT(detailed.at("s").sd, 0.0);
}

TEST(Scoring, LeaveOneOutExcludesOwnResponse) {
  ResponseTable t;
  const ItemBank bank{{"a", {1.0, 0.0, 0.0}}};
  t.add("s", "a", 1);
  t.add("u", "a", 0);
  const auto loo = leave_one_out_scores(t, bank, default_grid());
  ASSERT_EQ(loo.size(), 2u);
  EXPECT_NEAR(loo[0], 0.0, 1e-9);
  EXPECT_NEAR(loo[1], 0.0, 1e-9);
  EXPECT_NEAR(test_loss(t, bank, loo), std::numbers::ln2, 1e-9);
}

TEST(Reliability, IdenticalScoresGiveOne) {
  Scores s;
  std::vector<std::pair<std::string, std::string>> pairs;
  for (int i = 0; i < 5; ++i) {
    s["a" + std::to_string(i)] = i * 0.7;
    s["b" + std::to_string(i)] = i * 0.7;
    pairs.emplace_back("a" + std::to_string(i), "b" + std::to_string(i));
  }
  EXPECT_NEAR(*retest_reliability(s, pairs), 1.0, 1e-12);
  pairs.resize(2);
  EXPECT_THROW(retest_reliability(s, pairs), Error);
}

TEST(Reliability, IndependentScoresNearZero) {
  Rng rng(8);
  std::normal_distribution<double> n01;
  Scores s;
  std::vector<std::pair<std::string, std::string>> pairs;
  for (int i = 0; i < 10000; ++i) {
    s["a" + std::to_string(i)] = n01(rng);
    s["b" + std::to_string(i)] = n01(rng);
    pairs.emplace_back("a" + std::to_string(i), "b" + std::to_string(i));
  }
  EXPECT_LT(std::abs(*retest_reliability(s, pairs)), 0.05);
}

TEST(Reliability, RepeatedSimulatedSessions) {
  SimConfig sc;
  sc.seed = 23;
  sc.theta_sd = 1.0;
  const auto items = generate_bank(sc);
  Rng rng(4);
  const auto people = generate_sessions(2000, 'p', sc, rng);
  std::map<std::string, double> first, second;
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& [id, theta] : people) {
    first["a" + id] = theta;
    second["b" + id] = theta;
    pairs.emplace_back("a" + id, "b" + id);
  }
  auto table = generate_responses(items, first, 10, 1);
  const auto more = generate_responses(items, second, 10, 2);
  table.rows.insert(table.rows.end(), more.rows.begin(), more.rows.end());
  const auto rep = evaluate(table, sim_bank(items), default_grid(), pairs);
  ASSERT_TRUE(rep.retest_reliability.has_value());
  EXPECT_GT(*rep.retest_reliability, 0.4);
  EXPECT_LT(*rep.retest_reliability, 1.0);
}

TEST(Sem, ClosedForm) {
  EXPECT_DOUBLE_EQ(sem_from_reliability(0.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(sem_from_reliability(1.0, 1.0), 0.0);
  EXPECT_NEAR(sem_from_reliability(0.5, 1.0), 0.70711, 1e-5);
  EXPECT_NEAR(sem_from_reliability(0.5, 1.0), std::sqrt(0.5), 1e-9);
  double prev = 2.0;
  for (int k = 0; k <= 100; ++k) {
    const double v = sem_from_reliability(k / 100.0, 1.0);
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_THROW(sem_from_reliability(1.1, 1.0), Error);
  EXPECT_THROW(sem_from_reliability(-0.1, 1.0), Error);
  EXPECT_THROW(sem_from_reliability(0.5, -1.0), Error);
}

TEST(CalibrationTable, TrueParametersAreCalibrated) {
  SimConfig sc;
  sc.seed = 31;
  const auto items = generate_bank(sc);
  Rng rng(6);
  const auto thetas = generate_sessions(10000, 't', sc, rng);
  const auto table = generate_responses(items, thetas, 10, 7);
  const auto bins = calibration_table(table, sim_bank(items), thetas, 10);
  ASSERT_EQ(bins.size(), 10u);
  std::size_t total = 0;
  for (const auto& b : bins) {
    EXPECT_LT(std::abs(b.mean_grade - b.mean_pred), 0.03) << "bin " << b.bin;
    total += b.count;
  }
  EXPECT_EQ(total, table.size());
  EXPECT_LT(bins.front().mean_pred, bins.back().mean_pred);
}

TEST(CalibrationTable, SingleBinIsOverallMean) {
  const auto f = five_items();
  const auto bins = calibration_table(f.table, f.bank, f.scores, 1);
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0].count, 20u);
  EXPECT_NEAR(bins[0].mean_grade, 12.0 / 20.0, 1e-12);
  EXPECT_NEAR(bins[0].mean_pred, (0.3 + 0.45 + 0.6 + 0.7 + 0.8) / 5.0, 1e-12);
  EXPECT_THROW(calibration_table(f.table, f.bank, f.scores, 0), Error);
}

TEST(LooCalibrationTable, TrueParametersAreCalibrated) {
  SimConfig sc;
  sc.seed = 31;
  const auto items = generate_bank(sc);
  Rng rng(6);
  const auto thetas = generate_sessions(4000, 't', sc, rng);
  const auto table = generate_responses(items, thetas, 10, 7);
  const auto grid = make_grid(-10.0, 10.0, 0.1, PriorSpec::normal(0.0, 2.5));
  const auto bins = loo_calibration_table(table, sim_bank(items), grid, 10);
  ASSERT_EQ(bins.size(), 10u);
  std::size_t total = 0;
  for (const auto& b : bins) {
    EXPECT_LT(std::abs(b.mean_grade - b.mean_pred), 0.04) << "bin " << b.bin;
    total += b.count;
  }
  EXPECT_EQ(total, table.size());
  EXPECT_LT(bins.front().mean_pred, bins.back().mean_pred);
}

TEST(LooCalibrationTable, LoneResponseUsesPriorPredictive) {
  ResponseTable t;
  t.add("s0", "i0", 1);
  const ItemBank bank{{"i0", {1.3, 0.2, -0.4}}};
  const auto loo = leave_one_out_predictions(t, bank, default_grid());
  ASSERT_EQ(loo.size(), 1u);
  // Midpoint rule on N(0,1) truncated to [-4, 4].
  double num = 0.0, den = 0.0;
  for (int k = 0; k < 80000; ++k) {
    const double x = -4.0 + (k + 0.5) * 1e-4;
    const double w = std::exp(-0.5 * x * x);
    num += w * (0.2 + 0.8 / (1.0 + std::exp(-1.3 * (x + 0.4))));
    den += w;
  }
  EXPECT_NEAR(loo[0].prob, num / den, 2e-3);
  EXPECT_NEAR(loo[0].score, 0.0, 1e-9);
  EXPECT_THROW(loo_calibration_table(t, bank, default_grid(), 0), Error);
}

TEST(Evaluate, ConsistentWithParts) {
  const auto f = five_items();
  const auto grid = default_grid();
  const auto rep = evaluate(f.table, f.bank, grid);
  const auto scores = score_sessions(f.table, f.bank, grid);
  EXPECT_DOUBLE_EQ(rep.test_loss, test_loss(f.table, f.bank, scores));
  EXPECT_EQ(rep.n_items, 5u);
  EXPECT_EQ(rep.n_sessions, 4u);
  EXPECT_EQ(rep.n_responses, 20u);
  EXPECT_FALSE(rep.retest_reliability.has_value());
  const auto loo = evaluate(f.table, f.bank, grid, {}, true);
  EXPECT_GT(loo.test_loss, rep.test_loss);
}

TEST(Split, WarmHalvesByTime) {
  const auto t = ordered_table(100, 10);
  Rng rng(1);
  const auto s = make_split(t, spec(SplitSpec::Mode::Warm), rng);
  EXPECT_EQ(s.train.size(), 500u);
  EXPECT_EQ(s.test.size(), 500u);
  EXPECT_TRUE(std::equal(s.train.rows.begin(), s.train.rows.end(), t.rows.begin()));
  EXPECT_TRUE(s.pilot_items.empty());
}

TEST(Split, WarmRespectsTimestamps) {
  ResponseTable t;
  for (int i = 0; i < 20; ++i) {
    const int day = 20 - i;  // rows stored newest first
    t.rows.push_back({"s" + std::to_string(i), "i", Grade(i % 2),
                      "2024-01-" + std::string(day < 10 ? "0" : "") + std::to_string(day)});
  }
  Rng rng(1);
  const auto s = make_split(t, spec(SplitSpec::Mode::Warm), rng);
  ASSERT_EQ(s.train.size(), 10u);
  for (const auto& a : s.train.rows) {
    for (const auto& b : s.test.rows) EXPECT_LT(*a.timestamp, *b.timestamp);
  }
}

TEST(Split, DateSplit) {
  ResponseTable t;
  for (int day = 1; day <= 9; ++day) t.rows.push_back({"s" + std::to_string(day), "i", Grade(1), "2024-03-0" + std::to_string(day)});
  auto sp = spec(SplitSpec::Mode::Warm);
  sp.split_date = "2024-03-04";
  Rng rng(1);
  const auto s = make_split(t, sp, rng);
  EXPECT_EQ(s.train.size(), 3u);
  EXPECT_EQ(s.test.size(), 6u);
  t.rows[0].timestamp.reset();
  EXPECT_THROW(make_split(t, sp, rng), Error);
}

TEST(Split, ColdHoldsOutPilotItems) {
  const auto t = ordered_table(200, 10);
  Rng rng(9);
  const auto s = make_split(t, spec(SplitSpec::Mode::Cold), rng);
  EXPECT_EQ(s.pilot_items.size(), 20u);
  for (const auto& r : s.train.rows) EXPECT_EQ(s.pilot_items.count(r.item_id), 0u);
  EXPECT_LT(s.train.size() + s.test.size(), t.size());
  EXPECT_TRUE(s.short_pilot_items.empty());
}

TEST(Split, JumpZeroEqualsCold) {
  const auto t = ordered_table(200, 10);
  Rng a(9), b(9);
  const auto cold = make_split(t, spec(SplitSpec::Mode::Cold), a);
  const auto jump = make_split(t, spec(SplitSpec::Mode::Jump, 0), b);
  EXPECT_EQ(cold.train, jump.train);
  EXPECT_EQ(cold.test, jump.test);
  EXPECT_EQ(cold.pilot_items, jump.pilot_items);
}

TEST(Split, JumpAddsFirstResponsesPerPilotItem) {
  const auto t = ordered_table(200, 10);
  Rng a(9), b(9);
  const auto cold = make_split(t, spec(SplitSpec::Mode::Cold), a);
  const auto jump = make_split(t, spec(SplitSpec::Mode::Jump, 3), b);
  EXPECT_EQ(jump.train.size(), cold.train.size() + 3 * jump.pilot_items.size());
  EXPECT_EQ(jump.test.size(), cold.test.size() - 3 * jump.pilot_items.size());
  EXPECT_TRUE(jump.short_pilot_items.empty());

  Rng c(9);
  const auto greedy = make_split(t, spec(SplitSpec::Mode::Jump, 1000), c);
  EXPECT_EQ(greedy.short_pilot_items, greedy.pilot_items);
}

TEST(Split, RejectsBadSpec) {
  const auto t = ordered_table(10, 2);
  Rng rng(1);
  auto sp = spec(SplitSpec::Mode::Jump, -1);
  EXPECT_THROW(make_split(t, sp, rng), Error);
  sp = spec(SplitSpec::Mode::Warm);
  sp.split_fraction = 1.0;
  EXPECT_THROW(make_split(t, sp, rng), Error);
}

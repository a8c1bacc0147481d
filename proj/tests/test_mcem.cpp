#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "autoirt/baselines.hpp"
#include "autoirt/mcem.hpp"
#include "autoirt/metrics.hpp"
#include "autoirt/simgen.hpp"

using namespace autoirt;

namespace {

// Learner whose classifier is an exact 3PL (fixed chance) per item, fitted by maximum
// likelihood with abilities snapped to a fine grid.
class ThreePlClassifier final : public GradeClassifier {
 public:
  ThreePlClassifier(ItemBank bank, std::size_t dim) : bank_(std::move(bank)), dim_(dim) {}
  std::vector<double> predict(std::span<const FeatureRow> rows) const override {
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(irf(r.theta, bank_.at(r.item_id)));
    return out;
  }
  std::size_t feature_dimension() const override { return dim_; }
  bool knows_item(const std::string& id) const override { return bank_.count(id) > 0; }
  const TrainingMetadata& metadata() const override { return meta_; }

 private:
  ItemBank bank_;
  std::size_t dim_;
  TrainingMetadata meta_;
};

class ThreePlLearner final : public GradeLearner {
 public:
  ClassifierPtr train(std::span<const FeatureRow> rows, std::span<const Grade> grades,
                      std::uint64_t) const override {
    const auto grid = make_grid(-6.0, 6.0, 0.01, PriorSpec::uniform());
    std::map<std::string, detail::ExpectedCounts> counts;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto& ec = counts[rows[i].item_id];
      if (ec.n.empty()) ec.n.assign(grid->size(), 0.0), ec.r.assign(grid->size(), 0.0);
      const auto k = static_cast<std::size_t>(std::lround((std::clamp(rows[i].theta, -6.0, 6.0) + 6.0) / 0.01));
      ec.n[k] += 1.0;
      ec.r[k] += grades[i].value();
    }
    const auto family = ModelFamily::three_pl_fixed(0.25);
    detail::MmlBox box;
    box.lo = {std::log(0.05), -8.0, 0.0};
    box.hi = {std::log(25.0), 8.0, 0.0};
    box.active = {true, true, false};
    ItemBank bank;
    for (const auto& [id, ec] : counts) {
      const auto u = detail::mml_item_step(ec, *grid, family, box, {0.0, 0.0, 0.25}, 200);
      bank.emplace(id, ItemParams{std::exp(u[0]), 0.25, u[1]});
    }
    return std::make_shared<ThreePlClassifier>(std::move(bank), rows.front().item_features.size());
  }
};

SimDataset small_sim(int items, int sessions, std::uint64_t seed) {
  SimConfig sc;
  sc.n_items = items;
  sc.n_sessions = sessions;
  sc.n_test_sessions = 0;
  sc.n_oos_items = 0;
  sc.seed = seed;
  return simulate(sc);
}

}  // namespace

TEST(InitializeTheta, ZScores) {
  ResponseTable t;
  t.add("a", "i1", 1);
  t.add("a", "i2", 0);
  t.add("a", "i3", 0);
  t.add("a", "i4", 0);
  t.add("a", "i5", 0);
  t.add("b", "i1", 1);
  t.add("b", "i2", 1);
  t.add("b", "i3", 1);
  t.add("b", "i4", 1);
  t.add("b", "i5", 0);
  const auto z = initialize_theta(t);
  EXPECT_NEAR(z.at("a"), -1.0, 1e-12);
  EXPECT_NEAR(z.at("b"), 1.0, 1e-12);
}

TEST(InitializeTheta, ZeroVarianceIsZero) {
  ResponseTable t;
  t.add("a", "i1", 1);
  t.add("b", "i1", 1);
  t.add("c", "i2", 1);
  for (const auto& [_, v] : initialize_theta(t)) EXPECT_EQ(v, 0.0);
}

TEST(InitializeTheta, ProvidedScoresStandardized) {
  ResponseTable t;
  t.add("a", "i", 1);
  t.add("b", "i", 0);
  t.add("c", "i", 1);
  const auto z = initialize_theta(t, ThetaInit::from_scores({{"a", 10}, {"b", 20}, {"c", 30}}));
  EXPECT_NEAR(z.at("a"), -1.2247448713915890, 1e-12);
  EXPECT_NEAR(z.at("b"), 0.0, 1e-12);
  EXPECT_NEAR(z.at("c"), 1.2247448713915890, 1e-12);
  EXPECT_THROW(initialize_theta(t, ThetaInit::from_scores({{"a", 1}})), Error);
  EXPECT_THROW(initialize_theta(ResponseTable{}), Error);
}

TEST(InitializeTheta, ClampedToThree) {
  ResponseTable t;
  t.add("top", "i1", 1);
  for (int s = 0; s < 200; ++s) t.add("s" + std::to_string(s), "i1", 0);
  EXPECT_EQ(initialize_theta(t).at("top"), kRawScoreClamp);
}

TEST(Calibrate, StubLearnerRecoversParameters) {
  const auto ds = small_sim(100, 40000, 51);
  McemConfig cfg;
  cfg.iterations = 1;
  cfg.theta_init = ThetaInit::from_scores(ds.truth.train_thetas);
  const auto result = calibrate(ds.train, ds.features, cfg, ThreePlLearner());

  double mean = 0.0, var = 0.0;
  for (const auto& [_, t] : ds.truth.train_thetas) mean += t;
  mean /= ds.truth.train_thetas.size();
  for (const auto& [_, t] : ds.truth.train_thetas) var += (t - mean) * (t - mean);
  const double sd = std::sqrt(var / ds.truth.train_thetas.size());

  double se_d = 0.0, se_la = 0.0;
  for (const auto& it : ds.truth.items) {
    const ItemParams& p = result.bank.at(it.item_id);
    se_d += std::pow(p.d - (it.d - mean) / sd, 2);
    se_la += std::pow(std::log(p.a) - std::log(it.a * sd), 2);
  }
  const double n = static_cast<double>(ds.truth.items.size());
  EXPECT_LT(std::sqrt(se_d / n), 0.1);
  EXPECT_LT(std::sqrt(se_la / n), 0.1);
  ASSERT_EQ(result.trace.size(), 1u);
}

TEST(Calibrate, TraceStabilizesOnSimulatedBank) {
  const auto ds = small_sim(100, 2500, 52);
  McemConfig cfg;
  cfg.seed = 53;
  const auto result = calibrate(ds.train, ds.features, cfg);
  ASSERT_EQ(result.trace.size(), 4u);
  for (const auto& e : result.trace) {
    EXPECT_TRUE(std::isfinite(e.nonparametric_loss));
    EXPECT_TRUE(std::isfinite(e.parametric_loss));
  }
  EXPECT_LT(std::abs(result.trace[3].parametric_loss - result.trace[2].parametric_loss), 0.01);
  EXPECT_LT(std::abs(result.trace[3].nonparametric_loss - result.trace[2].nonparametric_loss), 0.01);
  EXPECT_LE(result.trace[0].nonparametric_loss, result.trace[0].parametric_loss);
  EXPECT_EQ(result.bank.size(), 100u);
}

TEST(Calibrate, PosteriorsComeFromFinalBank) {
  const auto ds = small_sim(30, 400, 54);
  McemConfig cfg;
  cfg.iterations = 2;
  const auto result = calibrate(ds.train, ds.features, cfg);
  for (const auto& s : group_by_session(ds.train)) {
    EXPECT_EQ(result.session_posteriors.at(s.session_id).weights,
              compute_posterior(s, result.bank, cfg.grid).weights);
  }
}

TEST(Calibrate, DeterministicAcrossRunsAndWorkers) {
  const auto ds = small_sim(40, 500, 55);
  McemConfig cfg;
  cfg.iterations = 2;
  cfg.seed = 9;
  const std::size_t before = worker_count();
  set_worker_count(1);
  const auto a = calibrate(ds.train, ds.features, cfg);
  set_worker_count(4);
  const auto b = calibrate(ds.train, ds.features, cfg);
  set_worker_count(before);
  for (const auto& [id, p] : a.bank) {
    EXPECT_EQ(p.a, b.bank.at(id).a);
    EXPECT_EQ(p.d, b.bank.at(id).d);
  }
  EXPECT_EQ(a.trace.back().parametric_loss, b.trace.back().parametric_loss);
}

TEST(Calibrate, FeatureOnlyItemsRoutedToColdStart) {
  const auto ds = small_sim(400, 5000, 56);
  FeatureTable features = ds.features;
  std::vector<std::string> dups;
  for (int k = 0; k < 40; ++k) {
    const auto& it = ds.truth.items[static_cast<std::size_t>(k)];
    dups.push_back("dup-" + it.item_id);
    features.set(dups.back(), {it.x1, it.x2});
  }
  McemConfig cfg;
  cfg.seed = 57;
  const auto result = calibrate(ds.train, features, cfg);
  EXPECT_EQ(result.bank.size(), 400u);
  EXPECT_EQ(result.cold_start_bank.size(), 40u);
  // duplicates share features but not ids, so only the feature path can place them
  std::vector<double> orig_d, dup_d, gap_a, gap_d;
  for (int k = 0; k < 40; ++k) {
    EXPECT_FALSE(result.classifier->knows_item(dups[static_cast<std::size_t>(k)]));
    const ItemParams& o = result.bank.at(ds.truth.items[static_cast<std::size_t>(k)].item_id);
    const ItemParams& c = result.cold_start_bank.at(dups[static_cast<std::size_t>(k)]);
    orig_d.push_back(o.d);
    dup_d.push_back(c.d);
    gap_a.push_back(std::abs(o.a - c.a));
    gap_d.push_back(std::abs(o.d - c.d));
  }
  const auto r = pearson(orig_d, dup_d);
  ASSERT_TRUE(r.has_value());
  EXPECT_GT(*r, 0.7);
  // Nearly flat curves leave a poorly determined, so the typical item is checked.
  std::nth_element(gap_a.begin(), gap_a.begin() + 20, gap_a.end());
  std::nth_element(gap_d.begin(), gap_d.begin() + 20, gap_d.end());
  EXPECT_LT(gap_a[20], 0.3);
  EXPECT_LT(gap_d[20], 0.3);
  const auto again = cold_start_params(result, FeatureTable{features.names, {}}, cfg.grid, cfg.effective_projection());
  EXPECT_TRUE(again.empty());
  EXPECT_THROW(cold_start_params(result, FeatureTable{{"only"}, {{"z", {1.0}}}}, cfg.grid, cfg.effective_projection()),
               Error);
}

TEST(Calibrate, Errors) {
  const auto ds = small_sim(20, 100, 58);
  McemConfig cfg;
  cfg.iterations = 0;
  EXPECT_THROW(calibrate(ds.train, ds.features, cfg), Error);
  cfg.iterations = 1;
  FeatureTable missing{ds.features.names, {}};
  EXPECT_THROW(calibrate(ds.train, missing, cfg), Error);
  EXPECT_THROW(calibrate(ResponseTable{}, ds.features, cfg), Error);
}

#pragma once

// Synthetic 3PL banks, abilities and graded responses for the calibration simulation study.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "autoirt/data.hpp"
#include "autoirt/irt.hpp"
#include "autoirt/util.hpp"

namespace autoirt {

struct SimConfig {
  int n_items = 100;
  int n_sessions = 2500;
  int items_per_session = 10;
  double sigma_rand = 0.1;
  int n_oos_items = 1000;
  int n_test_sessions = 100000;
  std::uint64_t seed = 0;
  double theta_sd = 2.5;  // N(0, 2.5) read as a standard deviation
  double chance = 0.25;
  double feature_range = 10.0;

  void validate() const {
    if (n_items < 1 || n_sessions < 1 || items_per_session < 1 || n_oos_items < 0 ||
        n_test_sessions < 0) {
      throw Error("simulation counts must be positive");
    }
    if (items_per_session > n_items) {
      throw Error("items_per_session (" + std::to_string(items_per_session) +
                  ") exceeds n_items (" + std::to_string(n_items) + ")");
    }
    if (!(sigma_rand >= 0.0) || !(theta_sd > 0.0)) throw Error("simulation sds must be >= 0");
  }
};

struct SimItem {
  std::string item_id;
  double x1 = 0.0;
  double x2 = 0.0;
  double z = 0.0;
  double d_mean = 0.0;
  double a_mean = 0.0;
  double a = 1.0;
  double d = 0.0;
  double c = 0.25;

  ItemParams params() const { return {a, c, d}; }
};

inline double sim_d_mean(double z) { return 4.0 * std::sin(z) / std::abs(z); }
inline double sim_a_mean(double z) { return 0.5 * std::cos(0.1 * z * z) + 1.0; }

/// Item parameters as a function of the two features, plus N(0, sigma_rand) random effects
/// on d and log a. Items whose |x1 - x2| falls below 1e-9 are redrawn.
inline SimItem draw_item(std::string id, const SimConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> feature(-cfg.feature_range, cfg.feature_range);
  std::normal_distribution<double> effect(0.0, 1.0);
  SimItem it;
  it.item_id = std::move(id);
  do {
    it.x1 = feature(rng);
    it.x2 = feature(rng);
    it.z = it.x1 - it.x2;
  } while (std::abs(it.z) < 1e-9);
  it.d_mean = sim_d_mean(it.z);
  it.a_mean = sim_a_mean(it.z);
  it.d = it.d_mean + cfg.sigma_rand * effect(rng);
  it.a = std::exp(std::log(it.a_mean) + cfg.sigma_rand * effect(rng));
  it.c = cfg.chance;
  return it;
}

inline std::string padded_id(char prefix, std::size_t index, std::size_t count) {
  std::string digits = std::to_string(index);
  const std::size_t width = std::max<std::size_t>(4, std::to_string(count).size());
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return std::string(1, prefix) + digits;
}

inline std::vector<SimItem> generate_items(int n, char prefix, const SimConfig& cfg, Rng& rng) {
  std::vector<SimItem> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.push_back(draw_item(padded_id(prefix, static_cast<std::size_t>(i + 1), static_cast<std::size_t>(n)), cfg, rng));
  }
  return out;
}

/// Operational bank ("i" ids) from the config's bank sub-stream.
inline std::vector<SimItem> generate_bank(const SimConfig& cfg) {
  cfg.validate();
  Rng rng = substream(cfg.seed, "sim-bank");
  return generate_items(cfg.n_items, 'i', cfg, rng);
}

/// Held-out pilot items ("p" ids) from their own sub-stream.
inline std::vector<SimItem> generate_oos_items(const SimConfig& cfg) {
  Rng rng = substream(cfg.seed, "sim-oos-bank");
  return generate_items(cfg.n_oos_items, 'p', cfg, rng);
}

/// True abilities, i.i.d. Normal(0, theta_sd), keyed by padded session id.
inline std::map<std::string, double> generate_sessions(int n, char prefix, const SimConfig& cfg,
                                                       Rng& rng) {
  std::normal_distribution<double> theta(0.0, cfg.theta_sd);
  std::map<std::string, double> out;
  for (int s = 0; s < n; ++s) {
    out.emplace(padded_id(prefix, static_cast<std::size_t>(s + 1), static_cast<std::size_t>(n)), theta(rng));
  }
  return out;
}

/// Each session answers items_per_session items drawn uniformly without replacement;
/// grades are Bernoulli(irf). Session randomness comes from per-session sub-streams.
inline ResponseTable generate_responses(const std::vector<SimItem>& items,
                                        const std::map<std::string, double>& thetas,
                                        int items_per_session, std::uint64_t stream_seed) {
  if (items_per_session > static_cast<int>(items.size())) {
    throw Error("items_per_session exceeds the number of items");
  }
  std::vector<std::pair<std::string, double>> sessions(thetas.begin(), thetas.end());
  std::vector<std::vector<std::pair<std::size_t, int>>> picks(sessions.size());
  parallel_for(sessions.size(), [&](std::size_t s) {
    Rng rng = substream(stream_seed, "sim-responses", sessions[s].first);
    std::vector<std::size_t> pool(items.size());
    std::iota(pool.begin(), pool.end(), 0);
    auto& mine = picks[s];
    for (int k = 0; k < items_per_session; ++k) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), pool.size() - 1);
      std::swap(pool[static_cast<std::size_t>(k)], pool[pick(rng)]);
      const SimItem& item = items[pool[static_cast<std::size_t>(k)]];
      const double p = irf(sessions[s].second, item.params());
      mine.emplace_back(pool[static_cast<std::size_t>(k)], uniform01(rng) < p ? 1 : 0);
    }
  });
  ResponseTable table;
  table.rows.reserve(sessions.size() * static_cast<std::size_t>(items_per_session));
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    for (const auto& [idx, g] : picks[s]) table.add(sessions[s].first, items[idx].item_id, g);
  }
  return table;
}

inline FeatureTable sim_features(const std::vector<SimItem>& items) {
  FeatureTable f;
  f.names = {"f1", "f2"};
  for (const auto& it : items) f.set(it.item_id, {it.x1, it.x2});
  return f;
}

inline ItemBank sim_bank(const std::vector<SimItem>& items) {
  ItemBank bank;
  for (const auto& it : items) bank.emplace(it.item_id, it.params());
  return bank;
}

struct SimTruth {
  std::vector<SimItem> items;      // operational bank
  std::vector<SimItem> oos_items;  // held-out pilot items
  std::map<std::string, double> train_thetas;
  std::map<std::string, double> warm_test_thetas;  // answer operational items
  std::map<std::string, double> cold_test_thetas;  // answer pilot items only
};

struct SimDataset {
  SimConfig config;
  SimTruth truth;
  ResponseTable train;
  ResponseTable warm_test;
  ResponseTable cold_test;
  FeatureTable features;      // operational items
  FeatureTable oos_features;  // pilot items
};

/// Full simulated study. Bank, abilities and responses derive from independent sub-streams.
inline SimDataset simulate(const SimConfig& cfg) {
  cfg.validate();
  SimDataset ds;
  ds.config = cfg;
  ds.truth.items = generate_bank(cfg);
  ds.truth.oos_items = generate_oos_items(cfg);
  Rng train_rng = substream(cfg.seed, "sim-train-sessions");
  ds.truth.train_thetas = generate_sessions(cfg.n_sessions, 's', cfg, train_rng);
  Rng warm_rng = substream(cfg.seed, "sim-warm-sessions");
  ds.truth.warm_test_thetas = generate_sessions(cfg.n_test_sessions, 'w', cfg, warm_rng);
  ds.train = generate_responses(ds.truth.items, ds.truth.train_thetas, cfg.items_per_session,
                                splitmix64(cfg.seed ^ 0x7261696eull));
  ds.warm_test = generate_responses(ds.truth.items, ds.truth.warm_test_thetas,
                                    cfg.items_per_session, splitmix64(cfg.seed ^ 0x7761726dull));
  if (cfg.n_oos_items >= cfg.items_per_session) {
    Rng cold_rng = substream(cfg.seed, "sim-cold-sessions");
    ds.truth.cold_test_thetas = generate_sessions(cfg.n_test_sessions, 'c', cfg, cold_rng);
    ds.cold_test = generate_responses(ds.truth.oos_items, ds.truth.cold_test_thetas,
                                      cfg.items_per_session, splitmix64(cfg.seed ^ 0x636f6c64ull));
  }
  ds.features = sim_features(ds.truth.items);
  ds.oos_features = sim_features(ds.truth.oos_items);
  return ds;
}

}  // namespace autoirt

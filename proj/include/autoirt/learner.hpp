#pragma once

// Nonparametric grade classifier: histogram gradient-boosted trees on (theta, item features,
// item id), trained on binary cross-entropy with validation early stopping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "autoirt/irt.hpp"
#include "autoirt/posterior.hpp"
#include "autoirt/util.hpp"

namespace autoirt {

/// One (session ability, item) pair as the classifier sees it.
struct FeatureRow {
  double theta = 0.0;
  std::vector<double> item_features;
  std::string item_id;
};

inline constexpr double kPredictionFloor = 1e-6;

inline double clamp_prediction(double p) {
  return std::clamp(p, kPredictionFloor, 1.0 - kPredictionFloor);
}

struct TrainingMetadata {
  int rounds = 0;                 // trees kept after early stopping
  int rounds_trained = 0;         // trees grown before stopping
  int feature_rounds = 0;         // leading trees that never split on item_id
  double validation_loss = 0.0;   // cross-entropy of the kept model
  double baseline_loss = 0.0;     // cross-entropy of the training base rate on validation
  std::uint64_t seed = 0;
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
};

/// Trained predictor p(theta, x_i). Implementations are immutable after training.
class GradeClassifier {
 public:
  virtual ~GradeClassifier() = default;
  virtual std::vector<double> predict(std::span<const FeatureRow> rows) const = 0;
  virtual std::size_t feature_dimension() const = 0;
  /// True when item_id was part of the training vocabulary.
  virtual bool knows_item(const std::string& item_id) const = 0;
  virtual const TrainingMetadata& metadata() const = 0;
};

using ClassifierPtr = std::shared_ptr<const GradeClassifier>;

struct LearnerConfig {
  int rounds = 500;
  int max_depth = 6;
  double learning_rate = 0.1;
  double validation_fraction = 0.2;
  int early_stopping_patience = 20;
  double l2 = 1.0;
  double min_child_hessian = 1e-3;
  double min_split_gain = 0.0;  // splits must reduce the penalized loss by more than this
  int min_rows_per_leaf = 20;
  int max_bins = 255;
  double cat_smooth = 10.0;
  double cat_l2 = 10.0;
  int max_cat_threshold = 32;
  int min_data_per_group = 100;
  bool use_item_id = true;
  bool marginalize_unseen = false;  // unseen item ids: cover-weighted average instead of bucket
  double item_offset_l2 = 20.0;  // ridge on per-item margin offsets; <= 0 disables them
  double subsample = 1.0;        // fraction of fitting rows drawn (without replacement) per tree
  bool features_first = true;    // boost without item_id splits until early stopping, then with them
  bool refit_full = true;        // retrain on every row for the early-stopped round count
};

/// Factory for classifiers; the M-step only sees this interface.
class GradeLearner {
 public:
  virtual ~GradeLearner() = default;
  virtual ClassifierPtr train(std::span<const FeatureRow> rows, std::span<const Grade> grades,
                              std::uint64_t seed) const = 0;
};

inline void check_training_input(std::span<const FeatureRow> rows, std::span<const Grade> grades) {
  if (rows.size() != grades.size()) {
    throw Error("learner: " + std::to_string(rows.size()) + " rows but " +
                std::to_string(grades.size()) + " grades");
  }
  if (rows.size() < 50) throw Error("learner: need at least 50 training rows");
  bool has0 = false, has1 = false;
  for (Grade g : grades) (g.correct() ? has1 : has0) = true;
  if (!(has0 && has1)) throw Error("learner: training grades contain a single class");
  const std::size_t dim = rows.front().item_features.size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].item_features.size() != dim) {
      throw Error("learner: item_features of row " + std::to_string(i) + " has length " +
                  std::to_string(rows[i].item_features.size()) + ", expected " +
                  std::to_string(dim));
    }
  }
}

inline double mean_cross_entropy(std::span<const double> probs, std::span<const Grade> grades) {
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    total -= bernoulli_log_likelihood(grades[i].value(), probs[i]);
  }
  return probs.empty() ? 0.0 : total / static_cast<double>(probs.size());
}

// ---------------------------------------------------------------------------------------------
// gradient-boosted trees
// ---------------------------------------------------------------------------------------------

struct TreeNode {
  int column = -1;  // -1 marks a leaf
  bool categorical = false;
  double threshold = 0.0;              // numeric: x < threshold goes left
  std::vector<std::uint64_t> left_set;  // categorical: bitset of codes that go left
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf output (learning rate applied)
  double cover = 0.0;  // training rows reaching the node

  bool is_leaf() const { return column < 0; }
  bool goes_left(std::uint32_t code) const {
    const std::size_t word = code / 64;
    return word < left_set.size() && ((left_set[word] >> (code % 64)) & 1u);
  }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
};

/// Evaluates one tree. Unseen items sit in the reserved unknown bucket, which is never in a
/// left set; with `marginalize` they instead average both subtrees by training cover.
inline double eval_tree(const Tree& t, std::span<const double> numeric, std::uint32_t code,
                        std::uint32_t unknown_code, bool marginalize = false, int index = 0) {
  const TreeNode* node = &t.nodes[static_cast<std::size_t>(index)];
  while (!node->is_leaf()) {
    if (marginalize && node->categorical && code >= unknown_code) {
      const TreeNode& l = t.nodes[static_cast<std::size_t>(node->left)];
      const TreeNode& r = t.nodes[static_cast<std::size_t>(node->right)];
      return (l.cover * eval_tree(t, numeric, code, unknown_code, true, node->left) +
              r.cover * eval_tree(t, numeric, code, unknown_code, true, node->right)) /
             (l.cover + r.cover);
    }
    const bool left = node->categorical
                          ? node->goes_left(code)
                          : numeric[static_cast<std::size_t>(node->column)] < node->threshold;
    node = &t.nodes[static_cast<std::size_t>(left ? node->left : node->right)];
  }
  return node->value;
}

/// Plain data behind a trained ensemble; io serializes this directly.
struct GbtModel {
  std::size_t feature_dim = 0;
  bool use_item_id = true;
  std::vector<std::string> feature_names;  // "theta", "f1", ..., "item_id"
  std::vector<double> medians;             // imputation value per numeric column
  std::vector<std::string> item_vocabulary;  // sorted; code = index, unknown = size()
  double base_score = 0.0;
  std::vector<double> item_offsets;  // per vocabulary code; empty when disabled
  std::vector<Tree> trees;
  LearnerConfig config;
  TrainingMetadata meta;
};

class GbtClassifier final : public GradeClassifier {
 public:
  explicit GbtClassifier(GbtModel model) : model_(std::move(model)) {
    for (std::size_t i = 0; i < model_.item_vocabulary.size(); ++i) {
      codes_.emplace(model_.item_vocabulary[i], static_cast<std::uint32_t>(i));
    }
  }

  const GbtModel& model() const { return model_; }
  std::size_t feature_dimension() const override { return model_.feature_dim; }
  const TrainingMetadata& metadata() const override { return model_.meta; }
  bool knows_item(const std::string& item_id) const override { return codes_.count(item_id) > 0; }

  std::uint32_t unknown_code() const {
    return static_cast<std::uint32_t>(model_.item_vocabulary.size());
  }

  std::uint32_t code_of(const std::string& item_id) const {
    auto it = codes_.find(item_id);
    return it == codes_.end() ? unknown_code() : it->second;
  }

  /// Raw margin for one row given numeric columns (theta first) and an item code.
  double margin(std::span<const double> numeric, std::uint32_t code) const {
    double score = model_.base_score;
    if (code < model_.item_offsets.size()) score += model_.item_offsets[code];
    for (const Tree& t : model_.trees) {
      score += eval_tree(t, numeric, code, unknown_code(), model_.config.marginalize_unseen);
    }
    return score;
  }

  std::vector<double> predict(std::span<const FeatureRow> rows) const override {
    std::vector<double> out(rows.size());
    std::vector<double> numeric(model_.feature_dim + 1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const FeatureRow& r = rows[i];
      fill_numeric(r, i, numeric);
      const std::uint32_t code = model_.use_item_id ? code_of(r.item_id) : unknown_code();
      out[i] = clamp_prediction(sigmoid(margin(numeric, code)));
    }
    return out;
  }

  void fill_numeric(const FeatureRow& r, std::size_t index, std::vector<double>& numeric) const {
    if (r.item_features.size() != model_.feature_dim) {
      throw Error("classifier schema: item_features of row " + std::to_string(index) +
                  " has length " + std::to_string(r.item_features.size()) + ", expected " +
                  std::to_string(model_.feature_dim));
    }
    if (r.item_id.empty()) {
      throw Error("classifier schema: item_id of row " + std::to_string(index) + " is empty");
    }
    numeric[0] = std::isnan(r.theta) ? model_.medians[0] : r.theta;
    for (std::size_t j = 0; j < model_.feature_dim; ++j) {
      const double v = r.item_features[j];
      numeric[j + 1] = std::isnan(v) ? model_.medians[j + 1] : v;
    }
  }

 private:
  GbtModel model_;
  std::map<std::string, std::uint32_t> codes_;
};

namespace detail {

struct BinStat {
  double g = 0.0;
  double h = 0.0;
  std::uint32_t n = 0;
};

struct Column {
  bool categorical = false;
  std::vector<double> thresholds;  // numeric: bin b holds x in [thr[b-1], thr[b])
  std::vector<std::uint32_t> bins;  // per training row
  std::size_t n_bins = 0;
};

inline double median_of(std::vector<double> v) {
  std::erase_if(v, [](double x) { return std::isnan(x); });
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

inline Column bin_numeric(const std::vector<double>& values, int max_bins) {
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> uniq;
  for (double v : sorted) {
    if (uniq.empty() || v != uniq.back()) uniq.push_back(v);
  }
  Column col;
  if (static_cast<int>(uniq.size()) <= max_bins) {
    for (std::size_t k = 1; k < uniq.size(); ++k) col.thresholds.push_back(0.5 * (uniq[k - 1] + uniq[k]));
  } else {
    // equal-frequency cut points, snapped between distinct neighbouring values
    for (int b = 1; b < max_bins; ++b) {
      const std::size_t pos = sorted.size() * static_cast<std::size_t>(b) / static_cast<std::size_t>(max_bins);
      auto hi = std::upper_bound(uniq.begin(), uniq.end(), sorted[pos - 1]);
      if (hi == uniq.end()) break;
      const double t = 0.5 * (*(hi - 1) + *hi);
      if (col.thresholds.empty() || t > col.thresholds.back()) col.thresholds.push_back(t);
    }
  }
  col.n_bins = col.thresholds.size() + 1;
  col.bins.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    col.bins[i] = static_cast<std::uint32_t>(
        std::upper_bound(col.thresholds.begin(), col.thresholds.end(), values[i]) -
        col.thresholds.begin());
  }
  return col;
}

struct SplitCandidate {
  double gain = 0.0;
  int column = -1;
  std::uint32_t bin = 0;                   // numeric: bins <= bin go left
  std::vector<std::uint32_t> left_codes;  // categorical
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<Column>& cols, const LearnerConfig& cfg) : cols_(cols), cfg_(cfg) {
    offsets_.resize(cols.size() + 1, 0);
    for (std::size_t c = 0; c < cols.size(); ++c) offsets_[c + 1] = offsets_[c] + cols[c].n_bins;
  }

  /// Grows one tree on the rows listed in `rows` (reordered in place); leaf outputs are
  /// added to `train_margin`.
  Tree grow(std::vector<std::uint32_t>& rows, const std::vector<double>& grad,
            const std::vector<double>& hess, std::vector<double>& train_margin,
            bool allow_categorical = true) const {
    struct Pending {
      int node;
      std::size_t begin, end;
      std::vector<BinStat> hist;
      double g, h;
    };
    Tree tree;
    tree.nodes.emplace_back();
    std::vector<Pending> level;
    {
      Pending root{0, 0, rows.size(), build_hist(rows, 0, rows.size(), grad, hess), 0.0, 0.0};
      for (std::size_t i = 0; i < rows.size(); ++i) {
        root.g += grad[rows[i]];
        root.h += hess[rows[i]];
      }
      level.push_back(std::move(root));
    }
    std::vector<Pending> leaves;
    for (int depth = 0; depth < cfg_.max_depth && !level.empty(); ++depth) {
      std::vector<Pending> next;
      for (Pending& p : level) {
        SplitCandidate best = find_split(p.hist, p.g, p.h, p.end - p.begin, allow_categorical);
        if (best.column < 0) {
          leaves.push_back(std::move(p));
          continue;
        }
        const Column& col = cols_[static_cast<std::size_t>(best.column)];
        std::vector<std::uint8_t> left_code_mask;
        if (col.categorical) {
          left_code_mask.assign(col.n_bins, 0);
          for (auto code : best.left_codes) left_code_mask[code] = 1;
        }
        auto goes_left = [&](std::uint32_t r) {
          const std::uint32_t b = col.bins[r];
          return col.categorical ? left_code_mask[b] != 0 : b <= best.bin;
        };
        auto mid_it = std::stable_partition(rows.begin() + static_cast<std::ptrdiff_t>(p.begin),
                                            rows.begin() + static_cast<std::ptrdiff_t>(p.end), goes_left);
        const auto mid = static_cast<std::size_t>(mid_it - rows.begin());

        TreeNode& node = tree.nodes[static_cast<std::size_t>(p.node)];
        node.column = best.column;
        node.categorical = col.categorical;
        if (col.categorical) {
          node.left_set.assign((col.n_bins + 63) / 64, 0);
          for (auto code : best.left_codes) node.left_set[code / 64] |= (std::uint64_t{1} << (code % 64));
        } else {
          node.threshold = col.thresholds[best.bin];
        }
        const int left_index = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        tree.nodes[static_cast<std::size_t>(p.node)].left = left_index;
        tree.nodes[static_cast<std::size_t>(p.node)].right = left_index + 1;

        Pending left{left_index, p.begin, mid, {}, 0.0, 0.0};
        Pending right{left_index + 1, mid, p.end, {}, 0.0, 0.0};
        for (std::size_t i = left.begin; i < left.end; ++i) {
          left.g += grad[rows[i]];
          left.h += hess[rows[i]];
        }
        right.g = p.g - left.g;
        right.h = p.h - left.h;
        // build the smaller child, derive the larger by subtraction
        Pending& small = (mid - p.begin) <= (p.end - mid) ? left : right;
        Pending& large = (&small == &left) ? right : left;
        small.hist = build_hist(rows, small.begin, small.end, grad, hess);
        large.hist = std::move(p.hist);
        for (std::size_t b = 0; b < large.hist.size(); ++b) {
          large.hist[b].g -= small.hist[b].g;
          large.hist[b].h -= small.hist[b].h;
          large.hist[b].n -= small.hist[b].n;
        }
        next.push_back(std::move(left));
        next.push_back(std::move(right));
      }
      level = std::move(next);
    }
    for (Pending& p : level) leaves.push_back(std::move(p));

    for (const Pending& p : leaves) {
      TreeNode& leaf = tree.nodes[static_cast<std::size_t>(p.node)];
      leaf.value = -cfg_.learning_rate * p.g / (p.h + cfg_.l2);
      for (std::size_t i = p.begin; i < p.end; ++i) train_margin[rows[i]] += leaf.value;
    }
    fill_cover(tree, 0, leaves);
    return tree;
  }

 private:
  template <class Leaves>
  double fill_cover(Tree& tree, int index, const Leaves& leaves) const {
    TreeNode& node = tree.nodes[static_cast<std::size_t>(index)];
    if (node.is_leaf()) {
      for (const auto& p : leaves) {
        if (p.node == index) node.cover = static_cast<double>(p.end - p.begin);
      }
      return node.cover;
    }
    const int l = node.left, r = node.right;
    const double c = fill_cover(tree, l, leaves) + fill_cover(tree, r, leaves);
    tree.nodes[static_cast<std::size_t>(index)].cover = c;
    return c;
  }

  std::vector<BinStat> build_hist(const std::vector<std::uint32_t>& rows, std::size_t begin,
                                  std::size_t end, const std::vector<double>& grad,
                                  const std::vector<double>& hess) const {
    std::vector<BinStat> hist(offsets_.back());
    parallel_for(cols_.size(), [&](std::size_t c) {
      const auto& bins = cols_[c].bins;
      BinStat* h = hist.data() + offsets_[c];
      for (std::size_t i = begin; i < end; ++i) {
        const std::uint32_t r = rows[i];
        BinStat& s = h[bins[r]];
        s.g += grad[r];
        s.h += hess[r];
        s.n += 1;
      }
    });
    return hist;
  }

  double score(double g, double h) const { return g * g / (h + cfg_.l2); }

  bool admissible(const BinStat& s) const {
    return s.n >= static_cast<std::uint32_t>(cfg_.min_rows_per_leaf) && s.h >= cfg_.min_child_hessian;
  }

  SplitCandidate find_split(const std::vector<BinStat>& hist, double g, double h,
                            std::size_t count, bool allow_categorical) const {
    SplitCandidate best;
    if (count < 2 * static_cast<std::size_t>(cfg_.min_rows_per_leaf)) return best;
    const double parent = score(g, h);
    const BinStat total{g, h, static_cast<std::uint32_t>(count)};
    for (std::size_t c = 0; c < cols_.size(); ++c) {
      const Column& col = cols_[c];
      const BinStat* hc = hist.data() + offsets_[c];
      if (!col.categorical) {
        BinStat left;
        for (std::size_t b = 0; b + 1 < col.n_bins; ++b) {
          left.g += hc[b].g;
          left.h += hc[b].h;
          left.n += hc[b].n;
          const BinStat right{total.g - left.g, total.h - left.h, total.n - left.n};
          if (!admissible(left) || !admissible(right)) continue;
          const double gain = score(left.g, left.h) + score(right.g, right.h) - parent;
          if (gain > best.gain + 1e-12) {
            best.gain = gain;
            best.column = static_cast<int>(c);
            best.bin = static_cast<std::uint32_t>(b);
          }
        }
      } else if (allow_categorical) {
        // Categories too small to rank are never sent left.
        std::vector<std::uint32_t> present;
        for (std::uint32_t b = 0; b < col.n_bins; ++b) {
          if (hc[b].n > 0 && static_cast<double>(hc[b].n) >= cfg_.cat_smooth) present.push_back(b);
        }
        if (present.size() < 2) continue;
        std::sort(present.begin(), present.end(), [&](std::uint32_t x, std::uint32_t y) {
          const double rx = hc[x].g / (hc[x].h + cfg_.cat_smooth);
          const double ry = hc[y].g / (hc[y].h + cfg_.cat_smooth);
          return rx != ry ? rx < ry : x < y;
        });
        const std::size_t limit = std::min<std::size_t>(
            present.size() - 1, static_cast<std::size_t>(std::max(cfg_.max_cat_threshold, 1)));
        const double l2 = cfg_.l2 + cfg_.cat_l2;
        const auto cat_score = [&](double gg, double hh) { return gg * gg / (hh + l2); };
        const double cat_parent = cat_score(g, h);
        const auto group_ok = [&](const BinStat& s) {
          return admissible(s) && s.n >= static_cast<std::uint32_t>(cfg_.min_data_per_group);
        };
        for (int dir = 0; dir < 2; ++dir) {
          BinStat left;
          std::size_t best_prefix = 0;
          double best_gain = best.gain;
          for (std::size_t j = 0; j < limit; ++j) {
            const BinStat& s = hc[present[dir == 0 ? j : present.size() - 1 - j]];
            left.g += s.g;
            left.h += s.h;
            left.n += s.n;
            const BinStat right{total.g - left.g, total.h - left.h, total.n - left.n};
            if (!group_ok(left) || !group_ok(right)) continue;
            const double gain = cat_score(left.g, left.h) + cat_score(right.g, right.h) - cat_parent;
            if (gain > best_gain + 1e-12) {
              best_gain = gain;
              best_prefix = j + 1;
            }
          }
          if (best_prefix > 0) {
            best.gain = best_gain;
            best.column = static_cast<int>(c);
            if (dir == 0) {
              best.left_codes.assign(present.begin(), present.begin() + static_cast<std::ptrdiff_t>(best_prefix));
            } else {
              best.left_codes.assign(present.end() - static_cast<std::ptrdiff_t>(best_prefix), present.end());
            }
          }
        }
      }
    }
    if (best.gain <= cfg_.min_split_gain) return SplitCandidate{};
    return best;
  }

  const std::vector<Column>& cols_;
  const LearnerConfig& cfg_;
  std::vector<std::size_t> offsets_;
};

}  // namespace detail

class GbtLearner final : public GradeLearner {
 public:
  explicit GbtLearner(LearnerConfig config = {}) : config_(config) {
    if (config_.rounds < 0 || config_.max_depth < 1 || !(config_.learning_rate > 0.0) ||
        !(config_.validation_fraction > 0.0 && config_.validation_fraction < 1.0) ||
        config_.max_bins < 2 || config_.min_rows_per_leaf < 1 || !(config_.min_split_gain >= 0.0) ||
        !(config_.subsample > 0.0 && config_.subsample <= 1.0)) {
      throw Error("invalid learner configuration");
    }
  }

  const LearnerConfig& config() const { return config_; }

  ClassifierPtr train(std::span<const FeatureRow> rows, std::span<const Grade> grades,
                      std::uint64_t seed) const override {
    return std::make_shared<const GbtClassifier>(fit(rows, grades, seed));
  }

  GbtModel fit(std::span<const FeatureRow> rows, std::span<const Grade> grades,
               std::uint64_t seed) const {
    check_training_input(rows, grades);
    GbtModel held_out = boost(rows, grades, seed, config_.rounds, config_.rounds, true);
    if (!config_.refit_full || held_out.meta.rounds == 0) return held_out;
    const auto scaled = [&](int r) {
      return static_cast<int>(std::lround(r / (1.0 - config_.validation_fraction)));
    };
    const int feature_rounds = scaled(held_out.meta.feature_rounds);
    const int id_rounds = scaled(held_out.meta.rounds - held_out.meta.feature_rounds);
    GbtModel full = boost(rows, grades, seed, feature_rounds + id_rounds, feature_rounds, false);
    full.meta.validation_loss = held_out.meta.validation_loss;
    full.meta.baseline_loss = held_out.meta.baseline_loss;
    full.meta.n_validation = held_out.meta.n_validation;
    return full;
  }

 private:
  GbtModel boost(std::span<const FeatureRow> rows, std::span<const Grade> grades,
                 std::uint64_t seed, int max_rounds, int feature_rounds, bool holdout) const {
    Rng rng = substream(seed, "gbt-validation-split");
    const std::size_t n = rows.size();
    const std::size_t dim = rows.front().item_features.size();

    GbtModel model;
    model.feature_dim = dim;
    model.use_item_id = config_.use_item_id;
    model.config = config_;
    model.feature_names.push_back("theta");
    for (std::size_t j = 0; j < dim; ++j) model.feature_names.push_back("f" + std::to_string(j + 1));
    if (config_.use_item_id) model.feature_names.push_back("item_id");

    // split rows into fitting and validation sets
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = holdout ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                     config_.validation_fraction * static_cast<double>(n))))
                               : std::size_t{0};
    std::vector<std::uint32_t> val_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::uint32_t> fit_rows(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val_rows.begin(), val_rows.end());
    std::sort(fit_rows.begin(), fit_rows.end());

    // numeric columns, imputed with fitting-set medians
    std::vector<std::vector<double>> numeric(dim + 1, std::vector<double>(fit_rows.size()));
    for (std::size_t i = 0; i < fit_rows.size(); ++i) {
      const FeatureRow& r = rows[fit_rows[i]];
      numeric[0][i] = r.theta;
      for (std::size_t j = 0; j < dim; ++j) numeric[j + 1][i] = r.item_features[j];
    }
    model.medians.resize(dim + 1);
    for (std::size_t c = 0; c <= dim; ++c) {
      model.medians[c] = detail::median_of(numeric[c]);
      for (double& v : numeric[c]) {
        if (std::isnan(v)) v = model.medians[c];
      }
    }
    std::vector<detail::Column> cols;
    cols.reserve(dim + 2);
    for (std::size_t c = 0; c <= dim; ++c) cols.push_back(detail::bin_numeric(numeric[c], config_.max_bins));

    if (config_.use_item_id) {
      std::map<std::string, std::uint32_t> vocab;
      for (std::uint32_t r : fit_rows) vocab.emplace(rows[r].item_id, 0);
      std::uint32_t code = 0;
      for (auto& [id, c] : vocab) {
        c = code++;
        model.item_vocabulary.push_back(id);
      }
      detail::Column col;
      col.categorical = true;
      col.n_bins = vocab.size();
      col.bins.resize(fit_rows.size());
      for (std::size_t i = 0; i < fit_rows.size(); ++i) col.bins[i] = vocab.at(rows[fit_rows[i]].item_id);
      cols.push_back(std::move(col));
    }

    std::vector<double> y(fit_rows.size());
    double positives = 0.0;
    for (std::size_t i = 0; i < fit_rows.size(); ++i) {
      y[i] = grades[fit_rows[i]].value();
      positives += y[i];
    }
    const double base_rate = std::clamp(positives / static_cast<double>(fit_rows.size()),
                                        kPredictionFloor, 1.0 - kPredictionFloor);
    model.base_score = std::log(base_rate / (1.0 - base_rate));

    GbtClassifier probe(model);  // vocabulary + medians for validation encoding
    std::vector<std::vector<double>> val_numeric(val_rows.size(), std::vector<double>(dim + 1));
    std::vector<std::uint32_t> val_codes(val_rows.size());
    std::vector<Grade> val_grades(val_rows.size());
    for (std::size_t i = 0; i < val_rows.size(); ++i) {
      const FeatureRow& r = rows[val_rows[i]];
      probe.fill_numeric(r, val_rows[i], val_numeric[i]);
      val_codes[i] = config_.use_item_id ? probe.code_of(r.item_id) : probe.unknown_code();
      val_grades[i] = grades[val_rows[i]];
    }
    std::vector<double> val_margin(val_rows.size(), model.base_score);
    auto val_loss = [&] {
      double total = 0.0;
      for (std::size_t i = 0; i < val_margin.size(); ++i) {
        total -= bernoulli_log_likelihood(val_grades[i].value(), clamp_prediction(sigmoid(val_margin[i])));
      }
      return val_margin.empty() ? 0.0 : total / static_cast<double>(val_margin.size());
    };

    std::vector<double> margin(fit_rows.size(), model.base_score);
    std::vector<double> grad(fit_rows.size()), hess(fit_rows.size());
    std::vector<std::uint32_t> index(fit_rows.size());
    detail::TreeBuilder builder(cols, config_);

    // Shrunken per-item intercepts, refreshed by one Newton step after every tree.
    const bool offsets = config_.use_item_id && config_.item_offset_l2 > 0.0;
    std::vector<double> item_offsets(offsets ? model.item_vocabulary.size() : 0, 0.0);
    std::vector<double> item_g(item_offsets.size()), item_h(item_offsets.size());
    auto update_offsets = [&] {
      std::fill(item_g.begin(), item_g.end(), 0.0);
      std::fill(item_h.begin(), item_h.end(), 0.0);
      const auto& codes = cols.back().bins;
      for (std::size_t i = 0; i < margin.size(); ++i) {
        const double p = sigmoid(margin[i]);
        item_g[codes[i]] += p - y[i];
        item_h[codes[i]] += p * (1.0 - p);
      }
      std::vector<double> step(item_offsets.size());
      for (std::size_t c = 0; c < item_offsets.size(); ++c) {
        step[c] = -config_.learning_rate * (item_g[c] + config_.item_offset_l2 * item_offsets[c]) /
                  (item_h[c] + config_.item_offset_l2);
        item_offsets[c] += step[c];
      }
      for (std::size_t i = 0; i < margin.size(); ++i) margin[i] += step[codes[i]];
      for (std::size_t i = 0; i < val_margin.size(); ++i) {
        if (val_codes[i] < step.size()) val_margin[i] += step[val_codes[i]];
      }
    };

    Rng bag_rng = substream(seed, "gbt-subsample");
    const auto bag_size = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(config_.subsample * static_cast<double>(fit_rows.size()))),
        1, fit_rows.size());

    const double baseline = val_loss();
    double best_loss = baseline;
    // Grows up to `limit` trees; with a holdout, stops early and rolls back to the best round.
    auto run_phase = [&](bool item_splits, int limit) {
      const std::size_t start = model.trees.size();
      std::size_t best_rounds = start;
      std::vector<double> best_margin, best_val_margin, best_offsets;
      if (holdout) {
        best_margin = margin;
        best_val_margin = val_margin;
        best_offsets = item_offsets;
      }
      int since_best = 0;
      for (int round = 0; round < limit; ++round) {
        for (std::size_t i = 0; i < margin.size(); ++i) {
          const double p = sigmoid(margin[i]);
          grad[i] = p - y[i];
          hess[i] = std::max(p * (1.0 - p), 1e-16);
        }
        std::iota(index.begin(), index.end(), 0u);
        std::vector<std::uint32_t> out_of_bag;
        if (bag_size < index.size()) {
          for (std::size_t k = 0; k < bag_size; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, index.size() - 1);
            std::swap(index[k], index[pick(bag_rng)]);
          }
          out_of_bag.assign(index.begin() + static_cast<std::ptrdiff_t>(bag_size), index.end());
          index.resize(bag_size);
          std::sort(index.begin(), index.end());
        }
        Tree tree = builder.grow(index, grad, hess, margin, item_splits);
        index.resize(fit_rows.size());
        std::vector<double> row(dim + 1);
        for (std::uint32_t i : out_of_bag) {
          for (std::size_t c = 0; c <= dim; ++c) row[c] = numeric[c][i];
          const std::uint32_t code = config_.use_item_id ? cols.back().bins[i] : probe.unknown_code();
          margin[i] += eval_tree(tree, row, code, probe.unknown_code(), config_.marginalize_unseen);
        }
        model.trees.push_back(std::move(tree));
        for (std::size_t i = 0; i < val_rows.size(); ++i) {
          val_margin[i] += eval_tree(model.trees.back(), val_numeric[i], val_codes[i], probe.unknown_code(),
                                     config_.marginalize_unseen);
        }
        if (offsets) update_offsets();
        if (!holdout) continue;
        const double loss = val_loss();
        if (loss < best_loss - 1e-12) {
          best_loss = loss;
          best_rounds = model.trees.size();
          best_margin = margin;
          best_val_margin = val_margin;
          best_offsets = item_offsets;
          since_best = 0;
        } else if (++since_best >= config_.early_stopping_patience) {
          break;
        }
      }
      model.meta.rounds_trained += static_cast<int>(model.trees.size() - start);
      if (holdout) {
        model.trees.resize(best_rounds);
        margin = std::move(best_margin);
        val_margin = std::move(best_val_margin);
        item_offsets = std::move(best_offsets);
      }
      return static_cast<int>(model.trees.size() - start);
    };

    if (config_.features_first && config_.use_item_id) {
      model.meta.feature_rounds = run_phase(false, feature_rounds);
      run_phase(true, std::max(0, max_rounds - model.meta.feature_rounds));
    } else {
      run_phase(true, max_rounds);
    }
    if (offsets) model.item_offsets = item_offsets;
    model.meta.rounds = static_cast<int>(model.trees.size());
    model.meta.validation_loss = best_loss;
    model.meta.baseline_loss = baseline;
    model.meta.n_train = fit_rows.size();
    model.meta.n_validation = val_rows.size();
    model.meta.seed = seed;
    return model;
  }

  LearnerConfig config_;
};

/// Classifier predictions along the grid for one item. Unseen item ids take the
/// unknown-category path.
inline std::vector<double> predict_curve(const GradeClassifier& model,
                                         const std::vector<double>& item_features,
                                         const std::string& item_id, const ThetaGrid& grid) {
  std::vector<FeatureRow> rows;
  rows.reserve(grid.size());
  for (double theta : grid.points()) rows.push_back({theta, item_features, item_id});
  return model.predict(rows);
}

}  // namespace autoirt

#pragma once

// Regression random forest with explicit in-bag bookkeeping.
//
// Each tree is grown on a bootstrap sample of size n-1 drawn with
// replacement. The sorted in-bag multiset of every tree is kept, so the
// out-of-bag prediction for a training unit i can be formed from exactly the
// trees that never saw i. Trees use independent random streams keyed by
// (seed, tree index): the fitted forest does not depend on the thread count.
//
// Splitting is standard CART variance reduction over `mtry` candidate
// features sampled without replacement at every node. Thresholds sit at the
// midpoint of adjacent distinct values. Ties are broken towards the lowest
// feature index, then the smallest threshold.

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "loop/common.hpp"

namespace loop {

struct ForestParams {
  std::size_t n_trees = 500;
  std::size_t min_node_size = 5;
  std::optional<std::size_t> mtry;       // default max(1, floor(q/3))
  std::optional<std::size_t> max_depth;  // default unlimited
  std::uint64_t seed = 0;
  std::size_t n_threads = 0;  // 0: hardware concurrency; never affects results

  std::size_t resolved_mtry(std::size_t q) const {
    return mtry.value_or(std::max<std::size_t>(1, q / 3));
  }

  void validate(std::size_t q) const {
    if (n_trees < 1) throw Error(ErrorKind::Domain, "forest needs at least one tree");
    if (min_node_size < 1) throw Error(ErrorKind::Domain, "min_node_size must be at least 1");
    const auto m = resolved_mtry(q);
    if (m < 1 || m > q)
      throw Error(ErrorKind::Domain,
                  "mtry must lie in [1, q]; got " + std::to_string(m) + " with q = " + std::to_string(q));
  }
};

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;     // go left when x[feature] <= threshold
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  double value = 0.0;  // mean in-bag response of the node
  std::uint32_t n_samples = 0;
  double sse = 0.0;  // sum of squared deviations from `value`

  bool is_leaf() const { return feature < 0; }
};

namespace detail {

template <class Row>
double feature_value(const Row& row, std::size_t f) {
  if constexpr (requires { row(Eigen::Index{0}); }) {
    return row(static_cast<Eigen::Index>(f));
  } else {
    return row[f];
  }
}

}  // namespace detail

class RegressionTree {
 public:
  template <class Row>
  double predict(const Row& row) const {
    std::size_t k = 0;
    while (!nodes_[k].is_leaf()) {
      const auto& node = nodes_[k];
      k = detail::feature_value(row, static_cast<std::size_t>(node.feature)) <= node.threshold ? node.left
                                                                                             : node.right;
    }
    return nodes_[k].value;
  }

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  std::size_t leaf_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [](const TreeNode& n) { return n.is_leaf(); }));
  }

  friend bool operator==(const RegressionTree& a, const RegressionTree& b) {
    return std::equal(a.nodes_.begin(), a.nodes_.end(), b.nodes_.begin(), b.nodes_.end(),
                      [](const TreeNode& l, const TreeNode& r) {
                        return l.feature == r.feature && l.threshold == r.threshold && l.left == r.left &&
                               l.right == r.right && l.value == r.value && l.n_samples == r.n_samples &&
                               l.sse == r.sse;
                      });
  }

 private:
  friend class TreeGrower;
  std::vector<TreeNode> nodes_;
};

class TreeGrower {
 public:
  TreeGrower(const Eigen::MatrixXd& x, std::span<const double> y, std::size_t mtry, std::size_t min_node_size,
             std::optional<std::size_t> max_depth)
      : x_(x), y_(y), mtry_(mtry), min_node_size_(min_node_size), max_depth_(max_depth) {}

  RegressionTree grow(std::vector<std::uint32_t> samples, Rng& rng) {
    RegressionTree tree;
    nodes_ = &tree.nodes_;
    samples_ = std::move(samples);
    rng_ = &rng;
    features_.resize(static_cast<std::size_t>(x_.cols()));
    build(0, samples_.size(), 0);
    nodes_ = nullptr;
    rng_ = nullptr;
    return tree;
  }

 private:
  struct Split {
    std::int32_t feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  std::uint32_t build(std::size_t begin, std::size_t end, std::size_t depth) {
    const std::size_t count = end - begin;
    double sum = 0.0;
    double lo = y_[samples_[begin]];
    double hi = lo;
    for (std::size_t k = begin; k < end; ++k) {
      const double v = y_[samples_[k]];
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double mean = sum / static_cast<double>(count);
    double sse = 0.0;
    for (std::size_t k = begin; k < end; ++k) {
      const double d = y_[samples_[k]] - mean;
      sse += d * d;
    }

    const auto index = static_cast<std::uint32_t>(nodes_->size());
    TreeNode leaf;
    leaf.value = mean;
    leaf.n_samples = static_cast<std::uint32_t>(count);
    leaf.sse = sse;
    nodes_->push_back(leaf);

    const bool depth_exhausted = max_depth_ && depth >= *max_depth_;
    if (count <= min_node_size_ || depth_exhausted || lo == hi) return index;

    const Split split = best_split(begin, end, mean);
    if (split.feature < 0 || !(split.gain > 0.0)) return index;

    const auto f = static_cast<Eigen::Index>(split.feature);
    auto middle = std::stable_partition(samples_.begin() + static_cast<std::ptrdiff_t>(begin),
                                        samples_.begin() + static_cast<std::ptrdiff_t>(end),
                                        [&](std::uint32_t s) { return x_(s, f) <= split.threshold; });
    const auto mid = static_cast<std::size_t>(middle - samples_.begin());

    const std::uint32_t left = build(begin, mid, depth + 1);
    const std::uint32_t right = build(mid, end, depth + 1);
    auto& node = (*nodes_)[index];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = left;
    node.right = right;
    return index;
  }

  Split best_split(std::size_t begin, std::size_t end, double mean) {
    const std::size_t q = features_.size();
    for (std::size_t f = 0; f < q; ++f) features_[f] = f;
    for (std::size_t k = 0; k < mtry_; ++k) {
      const std::size_t j = k + uniform_index(*rng_, q - k);
      std::swap(features_[k], features_[j]);
    }
    candidates_.assign(features_.begin(), features_.begin() + static_cast<std::ptrdiff_t>(mtry_));
    std::sort(candidates_.begin(), candidates_.end());

    const std::size_t count = end - begin;
    Split best;
    for (std::size_t f : candidates_) {
      const auto col = static_cast<Eigen::Index>(f);
      column_.clear();
      double total = 0.0;
      for (std::size_t k = begin; k < end; ++k) {
        const auto s = samples_[k];
        const double r = y_[s] - mean;
        column_.emplace_back(x_(s, col), r);
        total += r;
      }
      std::sort(column_.begin(), column_.end());
      if (column_.front().first == column_.back().first) continue;

      const double parent_term = total * total / static_cast<double>(count);
      double left_sum = 0.0;
      for (std::size_t k = 0; k + 1 < count; ++k) {
        left_sum += column_[k].second;
        const double a = column_[k].first;
        const double b = column_[k + 1].first;
        if (!(a < b)) continue;
        const auto n_left = static_cast<double>(k + 1);
        const auto n_right = static_cast<double>(count - k - 1);
        const double right_sum = total - left_sum;
        const double gain = left_sum * left_sum / n_left + right_sum * right_sum / n_right - parent_term;
        if (gain > best.gain) {
          double threshold = a + (b - a) * 0.5;
          if (!(threshold < b)) threshold = a;
          best = Split{static_cast<std::int32_t>(f), threshold, gain};
        }
      }
    }
    return best;
  }

  const Eigen::MatrixXd& x_;
  std::span<const double> y_;
  std::size_t mtry_;
  std::size_t min_node_size_;
  std::optional<std::size_t> max_depth_;

  std::vector<TreeNode>* nodes_ = nullptr;
  Rng* rng_ = nullptr;
  std::vector<std::uint32_t> samples_;
  std::vector<std::size_t> features_;
  std::vector<std::size_t> candidates_;
  std::vector<std::pair<double, double>> column_;
};

class Forest {
 public:
  const ForestParams& params() const { return params_; }
  std::size_t training_n() const { return y_.size(); }
  std::size_t n_trees() const { return trees_.size(); }
  const RegressionTree& tree(std::size_t b) const { return trees_[b]; }
  const Eigen::MatrixXd& x() const { return x_; }
  const std::vector<double>& y() const { return y_; }

  /// Sorted multiset of training indices drawn for tree b.
  std::span<const std::uint32_t> inbag(std::size_t b) const { return inbag_[b]; }

  bool in_bag(std::size_t b, std::size_t i) const {
    return std::binary_search(inbag_[b].begin(), inbag_[b].end(), static_cast<std::uint32_t>(i));
  }

  std::size_t oob_tree_count(std::size_t i) const {
    std::size_t n = 0;
    for (std::size_t b = 0; b < trees_.size(); ++b) n += in_bag(b, i) ? 0 : 1;
    return n;
  }

  /// Mean of all trees' predictions.
  template <class Row>
  double predict(const Row& row) const {
    double sum = 0.0;
    for (const auto& tree : trees_) sum += tree.predict(row);
    return sum / static_cast<double>(trees_.size());
  }

  /// Mean prediction at x_i over the trees whose bootstrap excluded i.
  double predict_oob(std::size_t i) const {
    double sum = 0.0;
    std::size_t n = 0;
    const auto row = x_.row(static_cast<Eigen::Index>(i));
    for (std::size_t b = 0; b < trees_.size(); ++b) {
      if (in_bag(b, i)) continue;
      sum += trees_[b].predict(row);
      ++n;
    }
    if (n == 0)
      throw Error(ErrorKind::NoOobTrees,
                  "training unit " + std::to_string(i) + " is in every bootstrap sample; grow more trees");
    return sum / static_cast<double>(n);
  }

  /// predict_oob for every training unit in one sweep over the trees. Each
  /// unit accumulates in tree order, so values match predict_oob bit for bit.
  std::vector<double> predict_oob_all() const {
    const std::size_t n = training_n();
    std::vector<double> sum(n, 0.0);
    std::vector<std::size_t> count(n, 0);
    std::vector<char> member(n);
    for (std::size_t b = 0; b < trees_.size(); ++b) {
      std::fill(member.begin(), member.end(), 0);
      for (auto s : inbag_[b]) member[s] = 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (member[i]) continue;
        sum[i] += trees_[b].predict(x_.row(static_cast<Eigen::Index>(i)));
        ++count[i];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (count[i] == 0)
        throw Error(ErrorKind::NoOobTrees,
                    "training unit " + std::to_string(i) + " is in every bootstrap sample; grow more trees");
      sum[i] /= static_cast<double>(count[i]);
    }
    return sum;
  }

  /// Plain-text dump for inspection; not a stable format.
  std::string dump() const {
    std::ostringstream out;
    out.precision(17);
    out << "forest trees=" << trees_.size() << " n=" << training_n() << " q=" << x_.cols() << '\n';
    for (std::size_t b = 0; b < trees_.size(); ++b) {
      out << "tree " << b << '\n';
      const auto& nodes = trees_[b].nodes();
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const auto& nd = nodes[k];
        out << "  " << k;
        if (nd.is_leaf())
          out << " leaf value=" << nd.value << " n=" << nd.n_samples << '\n';
        else
          out << " split x" << nd.feature << "<=" << nd.threshold << " -> " << nd.left << ',' << nd.right << '\n';
      }
    }
    return out.str();
  }

  friend bool operator==(const Forest& a, const Forest& b) {
    return a.trees_ == b.trees_ && a.inbag_ == b.inbag_ && a.y_ == b.y_ && a.x_ == b.x_;
  }

 private:
  friend Forest fit_forest(const Eigen::MatrixXd& x, std::span<const double> y, const ForestParams& params);

  ForestParams params_;
  Eigen::MatrixXd x_;
  std::vector<double> y_;
  std::vector<RegressionTree> trees_;
  std::vector<std::vector<std::uint32_t>> inbag_;
};

inline Forest fit_forest(const Eigen::MatrixXd& x, std::span<const double> y, const ForestParams& params) {
  const auto n = y.size();
  const auto q = static_cast<std::size_t>(x.cols());
  if (static_cast<std::size_t>(x.rows()) != n)
    throw Error(ErrorKind::Domain, "forest covariate rows do not match the number of responses");
  if (n < 2) throw Error(ErrorKind::Domain, "forest needs at least two training rows");
  if (q < 1) throw Error(ErrorKind::Domain, "forest needs at least one covariate");
  params.validate(q);

  Forest forest;
  forest.params_ = params;
  forest.x_ = x;
  forest.y_.assign(y.begin(), y.end());
  forest.trees_.resize(params.n_trees);
  forest.inbag_.resize(params.n_trees);

  const std::size_t mtry = params.resolved_mtry(q);
  const std::size_t draws = n - 1;
  parallel_for(params.n_trees, params.n_threads, [&](std::size_t b) {
    Rng rng = make_stream(params.seed, b);
    std::vector<std::uint32_t> sample(draws);
    for (auto& s : sample) s = static_cast<std::uint32_t>(uniform_index(rng, n));
    std::sort(sample.begin(), sample.end());
    TreeGrower grower(forest.x_, forest.y_, mtry, params.min_node_size, params.max_depth);
    forest.trees_[b] = grower.grow(sample, rng);
    forest.inbag_[b] = std::move(sample);
  });
  return forest;
}

template <class Row>
double predict(const Forest& forest, const Row& row) {
  return forest.predict(row);
}

inline double predict_oob(const Forest& forest, std::size_t i) { return forest.predict_oob(i); }

}  // namespace loop

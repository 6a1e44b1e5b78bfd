// CART regression trees with bagging. Serves as the nonlinear regressor for
// the out-of-sample R-squared comparison tests.
//
// Split search is made order-independent on purpose: candidate rows are
// sorted by (feature value, target) before prefix sums, leaf means sum the
// targets in sorted order, and ties between splits resolve to the lowest
// feature index, then the lowest threshold. Fitting a permutation of the same
// rows therefore yields the identical tree, bit for bit.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "deconf/rng.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

struct TreeConfig {
    std::size_t max_depth = 8;
    std::size_t min_leaf = 5;
    std::size_t feature_subsample = 0;  // 0 means all features
};

struct ForestConfig {
    std::size_t n_trees = 200;
    std::size_t max_depth = 8;
    std::size_t min_leaf = 5;
    std::size_t feature_subsample = 0;  // 0 means round(sqrt(d))
    bool bootstrap = true;
};

struct TreeNode {
    int feature = -1;  // negative marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double prediction = 0.0;
    std::size_t count = 0;

    bool is_leaf() const { return feature < 0; }
};

struct RegressionTree {
    std::vector<TreeNode> nodes;

    double predict_row(const Tensor& X, std::size_t row) const {
        const std::size_t d = X.shape[1];
        int at = 0;
        while (!nodes[at].is_leaf()) {
            const TreeNode& n = nodes[at];
            at = X.data[row * d + static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left
                                                                                     : n.right;
        }
        return nodes[at].prediction;
    }
};

struct ForestModel {
    std::vector<RegressionTree> trees;
    std::uint64_t seed = 0;
    ForestConfig config;
};

namespace detail {

// Mean of the node's targets, summed in ascending order so the result does
// not depend on how the rows were ordered. A constant target comes back
// exactly, not via the division.
inline double canonical_mean(std::vector<double> ys) {
    std::sort(ys.begin(), ys.end());
    if (ys.front() == ys.back()) return ys.front();
    double s = 0.0;
    for (double v : ys) s += v;
    return s / static_cast<double>(ys.size());
}

inline double canonical_sse(const std::vector<double>& ys_any_order) {
    std::vector<double> ys = ys_any_order;
    std::sort(ys.begin(), ys.end());
    double s = 0.0, ss = 0.0;
    for (double v : ys) {
        s += v;
        ss += v * v;
    }
    const double n = static_cast<double>(ys.size());
    return ss - s * s / n;
}

struct SplitChoice {
    bool found = false;
    std::size_t feature = 0;
    double threshold = 0.0;
    double children_sse = 0.0;
};

class TreeBuilder {
  public:
    TreeBuilder(const Tensor& X, const std::vector<double>& y, const TreeConfig& cfg, Rng rng)
        : X_(X), y_(y), cfg_(cfg), rng_(rng), d_(X.shape[1]) {
        if (cfg_.min_leaf == 0) cfg_.min_leaf = 1;
    }

    RegressionTree build(std::vector<std::size_t> idx) {
        RegressionTree tree;
        grow(tree, std::move(idx), 0);
        return tree;
    }

  private:
    int grow(RegressionTree& tree, std::vector<std::size_t> idx, std::size_t depth) {
        const int node_id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();

        std::vector<double> ys;
        ys.reserve(idx.size());
        for (std::size_t i : idx) ys.push_back(y_[i]);
        tree.nodes[node_id].count = idx.size();
        tree.nodes[node_id].prediction = canonical_mean(ys);

        const auto [ymin, ymax] = std::minmax_element(ys.begin(), ys.end());
        const bool can_split = depth < cfg_.max_depth && idx.size() >= 2 * cfg_.min_leaf &&
                               *ymin != *ymax;
        if (!can_split) return node_id;

        const SplitChoice choice = best_split(idx, canonical_sse(ys));
        if (!choice.found) return node_id;

        std::vector<std::size_t> left, right;
        for (std::size_t i : idx) {
            const double v = X_.data[i * d_ + choice.feature];
            (v <= choice.threshold ? left : right).push_back(i);
        }
        idx.clear();
        idx.shrink_to_fit();

        tree.nodes[node_id].feature = static_cast<int>(choice.feature);
        tree.nodes[node_id].threshold = choice.threshold;
        const int l = grow(tree, std::move(left), depth + 1);
        tree.nodes[node_id].left = l;
        const int r = grow(tree, std::move(right), depth + 1);
        tree.nodes[node_id].right = r;
        return node_id;
    }

    std::vector<std::size_t> candidate_features() {
        std::vector<std::size_t> feats(d_);
        for (std::size_t j = 0; j < d_; ++j) feats[j] = j;
        const std::size_t k = cfg_.feature_subsample;
        if (k == 0 || k >= d_) return feats;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t pick = i + rng_.below(d_ - i);
            std::swap(feats[i], feats[pick]);
        }
        feats.resize(k);
        std::sort(feats.begin(), feats.end());
        return feats;
    }

    SplitChoice best_split(const std::vector<std::size_t>& idx, double parent_sse) {
        SplitChoice best;
        const std::size_t n = idx.size();
        std::vector<std::pair<double, double>> vy(n);
        std::vector<double> prefix_s(n + 1), prefix_ss(n + 1);

        for (std::size_t feature : candidate_features()) {
            for (std::size_t k = 0; k < n; ++k)
                vy[k] = {X_.data[idx[k] * d_ + feature], y_[idx[k]]};
            std::sort(vy.begin(), vy.end());
            if (vy.front().first == vy.back().first) continue;

            for (std::size_t k = 0; k < n; ++k) {
                prefix_s[k + 1] = prefix_s[k] + vy[k].second;
                prefix_ss[k + 1] = prefix_ss[k] + vy[k].second * vy[k].second;
            }
            for (std::size_t k = cfg_.min_leaf; k + cfg_.min_leaf <= n; ++k) {
                if (vy[k - 1].first == vy[k].first) continue;
                const double nl = static_cast<double>(k), nr = static_cast<double>(n - k);
                const double sl = prefix_s[k], sr = prefix_s[n] - prefix_s[k];
                const double sse_l = prefix_ss[k] - sl * sl / nl;
                const double sse_r = (prefix_ss[n] - prefix_ss[k]) - sr * sr / nr;
                const double children = sse_l + sse_r;
                if (children >= parent_sse) continue;            // no improvement
                if (best.found && children >= best.children_sse) continue;
                double t = 0.5 * (vy[k - 1].first + vy[k].first);
                if (t >= vy[k].first) t = vy[k - 1].first;       // midpoint rounded up
                best = {true, feature, t, children};
            }
        }
        return best;
    }

    const Tensor& X_;
    const std::vector<double>& y_;
    TreeConfig cfg_;
    Rng rng_;
    std::size_t d_;
};

inline void check_xy(const Tensor& X, const std::vector<double>& y, std::size_t min_leaf) {
    if (X.shape.size() != 2)
        throw std::invalid_argument("forest: X must be a matrix, got shape " + shape_str(X.shape));
    if (X.shape[0] == 0 || X.shape[1] == 0)
        throw std::invalid_argument("forest: empty design matrix " + shape_str(X.shape));
    if (X.shape[0] != y.size())
        throw std::invalid_argument("forest: " + std::to_string(X.shape[0]) + " rows but " +
                                    std::to_string(y.size()) + " targets");
    if (y.size() < min_leaf)
        throw std::invalid_argument("forest: fewer rows than min_leaf");
}

}  // namespace detail

inline RegressionTree fit_tree(const Tensor& X, const std::vector<double>& y,
                               const TreeConfig& cfg, std::uint64_t seed) {
    detail::check_xy(X, y, cfg.min_leaf);
    std::vector<std::size_t> idx(X.shape[0]);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    detail::TreeBuilder builder(X, y, cfg, Rng(seed));
    return builder.build(std::move(idx));
}

inline ForestModel fit_forest(const Tensor& X, const std::vector<double>& y,
                              const ForestConfig& cfg, std::uint64_t seed) {
    detail::check_xy(X, y, cfg.min_leaf);
    if (cfg.n_trees == 0) throw std::invalid_argument("forest: need at least one tree");

    TreeConfig tree_cfg;
    tree_cfg.max_depth = cfg.max_depth;
    tree_cfg.min_leaf = cfg.min_leaf;
    tree_cfg.feature_subsample = cfg.feature_subsample;
    if (tree_cfg.feature_subsample == 0) {
        const double d = static_cast<double>(X.shape[1]);
        tree_cfg.feature_subsample = static_cast<std::size_t>(std::lround(std::sqrt(d)));
        if (tree_cfg.feature_subsample < 1) tree_cfg.feature_subsample = 1;
    }

    ForestModel model;
    model.seed = seed;
    model.config = cfg;
    Rng base(seed);
    const std::size_t n = X.shape[0];
    for (std::size_t t = 0; t < cfg.n_trees; ++t) {
        Rng tree_rng = base.derive(t);
        std::vector<std::size_t> idx(n);
        if (cfg.bootstrap) {
            for (std::size_t i = 0; i < n; ++i) idx[i] = tree_rng.below(n);
        } else {
            for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        }
        detail::TreeBuilder builder(X, y, tree_cfg, tree_rng);
        model.trees.push_back(builder.build(std::move(idx)));
    }
    return model;
}

inline std::vector<double> predict(const RegressionTree& tree, const Tensor& X) {
    if (X.shape.size() != 2)
        throw std::invalid_argument("forest: X must be a matrix, got shape " + shape_str(X.shape));
    std::vector<double> out(X.shape[0]);
    for (std::size_t i = 0; i < X.shape[0]; ++i) out[i] = tree.predict_row(X, i);
    return out;
}

inline std::vector<double> predict(const ForestModel& model, const Tensor& X) {
    if (X.shape.size() != 2)
        throw std::invalid_argument("forest: X must be a matrix, got shape " + shape_str(X.shape));
    std::vector<double> out(X.shape[0], 0.0);
    for (const RegressionTree& tree : model.trees)
        for (std::size_t i = 0; i < X.shape[0]; ++i) out[i] += tree.predict_row(X, i);
    const double scale = 1.0 / static_cast<double>(model.trees.size());
    for (double& v : out) v *= scale;
    return out;
}

inline std::string dump_tree(const RegressionTree& tree) {
    std::string out;
    const auto walk = [&](const auto& self, int at, int depth) -> void {
        out.append(static_cast<std::size_t>(depth) * 2, ' ');
        const TreeNode& n = tree.nodes[static_cast<std::size_t>(at)];
        if (n.is_leaf()) {
            out += "leaf n=" + std::to_string(n.count) + " -> " + std::to_string(n.prediction) +
                   "\n";
            return;
        }
        out += "x" + std::to_string(n.feature) + " <= " + std::to_string(n.threshold) + "\n";
        self(self, n.left, depth + 1);
        self(self, n.right, depth + 1);
    };
    if (!tree.nodes.empty()) walk(walk, 0, 0);
    return out;
}

}  // namespace deconf

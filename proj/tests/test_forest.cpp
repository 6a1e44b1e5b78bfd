#include "deconf/forest.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "deconf/rng.hpp"

using namespace deconf;

namespace {

Tensor design(std::size_t n, std::size_t d, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor X = Tensor::zeros({n, d});
    for (double& v : X.data) v = rng.uniform(lo, hi);
    return X;
}

double training_sse(const RegressionTree& tree, const Tensor& X, const std::vector<double>& y) {
    std::vector<double> pred = predict(tree, X);
    double sse = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) sse += (y[i] - pred[i]) * (y[i] - pred[i]);
    return sse;
}

double sse_of_side(const std::vector<double>& ys) {
    if (ys.empty()) return 0.0;
    double mean = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
    double sse = 0.0;
    for (double v : ys) sse += (v - mean) * (v - mean);
    return sse;
}

// Independent split search: scan every (feature, threshold) pair by brute
// force with naive two-pass SSE evaluation, recurse greedily like CART does.
// Thresholds range over midpoints of consecutive distinct values, the same
// candidate set as the implementation; the scan itself shares no code with
// the prefix-sum search.
double brute_force_greedy_sse(const Tensor& X, const std::vector<double>& y,
                              std::vector<std::size_t> rows, std::size_t depth_left) {
    const std::size_t d = X.shape[1];
    std::vector<double> ys;
    for (std::size_t i : rows) ys.push_back(y[i]);
    const double unsplit = sse_of_side(ys);
    if (depth_left == 0 || rows.size() < 2) return unsplit;

    double best = unsplit;
    std::size_t best_j = 0;
    double best_t = 0.0;
    bool found = false;
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> vals;
        for (std::size_t i : rows) vals.push_back(X.data[i * d + j]);
        std::sort(vals.begin(), vals.end());
        vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
        for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
            const double t = 0.5 * (vals[k] + vals[k + 1]);
            std::vector<double> yl, yr;
            for (std::size_t i : rows) (X.data[i * d + j] <= t ? yl : yr).push_back(y[i]);
            if (yl.empty() || yr.empty()) continue;
            const double sse = sse_of_side(yl) + sse_of_side(yr);
            if (sse < best) {
                best = sse;
                best_j = j;
                best_t = t;
                found = true;
            }
        }
    }
    if (!found) return unsplit;

    std::vector<std::size_t> left, right;
    for (std::size_t i : rows) (X.data[i * d + best_j] <= best_t ? left : right).push_back(i);
    return brute_force_greedy_sse(X, y, left, depth_left - 1) +
           brute_force_greedy_sse(X, y, right, depth_left - 1);
}

}  // namespace

TEST(Tree, ConstantTargetGivesSingleLeaf) {
    Rng rng(3);
    Tensor X = design(20, 2, rng);
    std::vector<double> y(20, 0.1);
    RegressionTree tree = fit_tree(X, y, TreeConfig{}, 1);
    ASSERT_EQ(tree.nodes.size(), 1u);
    EXPECT_EQ(tree.nodes[0].prediction, 0.1);
    EXPECT_EQ(tree.nodes[0].count, 20u);
}

TEST(Tree, StepFunctionIsFitExactlyAtDepthOne) {
    Tensor X = Tensor::matrix(4, 1, {-2.0, -1.0, 1.0, 2.0});
    std::vector<double> y{0.0, 0.0, 1.0, 1.0};
    TreeConfig cfg;
    cfg.max_depth = 1;
    cfg.min_leaf = 1;
    RegressionTree tree = fit_tree(X, y, cfg, 1);
    ASSERT_EQ(tree.nodes.size(), 3u);
    EXPECT_EQ(tree.nodes[0].feature, 0);
    EXPECT_DOUBLE_EQ(tree.nodes[0].threshold, 0.0);
    std::vector<double> pred = predict(tree, X);
    EXPECT_EQ(pred, y);
}

TEST(Tree, DepthTwoMatchesBruteForceSearch) {
    for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(seed);
        Tensor X = design(8, 2, rng, -1.0, 1.0);
        std::vector<double> y;
        for (std::size_t i = 0; i < 8; ++i) y.push_back(rng.uniform(-2.0, 2.0));
        TreeConfig cfg;
        cfg.max_depth = 2;
        cfg.min_leaf = 1;
        RegressionTree tree = fit_tree(X, y, cfg, seed);
        const double got = training_sse(tree, X, y);
        std::vector<std::size_t> all(8);
        std::iota(all.begin(), all.end(), 0);
        const double want = brute_force_greedy_sse(X, y, all, 2);
        EXPECT_NEAR(got, want, 1e-9 * std::max(1.0, want)) << "seed " << seed;
    }
}

TEST(Tree, GreedyRespectsMinLeaf) {
    Rng rng(8);
    Tensor X = design(30, 2, rng);
    std::vector<double> y;
    for (std::size_t i = 0; i < 30; ++i) y.push_back(rng.uniform(-1.0, 1.0));
    TreeConfig cfg;
    cfg.min_leaf = 4;
    RegressionTree tree = fit_tree(X, y, cfg, 1);
    for (const TreeNode& n : tree.nodes)
        if (n.is_leaf()) EXPECT_GE(n.count, 4u);
}

TEST(Tree, DeeperTreesNeverFitWorse) {
    Rng rng(21);
    Tensor X = design(120, 3, rng);
    std::vector<double> y;
    for (std::size_t i = 0; i < 120; ++i)
        y.push_back(std::sin(6.0 * X.data[i * 3]) + 0.2 * rng.normal());
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t depth = 1; depth <= 7; ++depth) {
        TreeConfig cfg;
        cfg.max_depth = depth;
        cfg.min_leaf = 2;
        const double sse = training_sse(fit_tree(X, y, cfg, 5), X, y);
        EXPECT_LE(sse, prev + 1e-12) << "depth " << depth;
        prev = sse;
    }
}

TEST(Tree, RowPermutationDoesNotChangeTheTree) {
    Rng rng(33);
    const std::size_t n = 60;
    Tensor X = design(n, 3, rng);
    std::vector<double> y;
    for (std::size_t i = 0; i < n; ++i) y.push_back(rng.uniform(-1.0, 1.0));
    // Inject duplicated feature values so tie handling actually matters.
    for (std::size_t i = 0; i + 1 < n; i += 7) X.data[(i + 1) * 3] = X.data[i * 3];

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
    Tensor Xp = Tensor::zeros({n, 3});
    std::vector<double> yp(n);
    for (std::size_t i = 0; i < n; ++i) {
        yp[i] = y[perm[i]];
        for (std::size_t j = 0; j < 3; ++j) Xp.data[i * 3 + j] = X.data[perm[i] * 3 + j];
    }

    TreeConfig cfg;
    cfg.min_leaf = 2;
    RegressionTree a = fit_tree(X, y, cfg, 9);
    RegressionTree b = fit_tree(Xp, yp, cfg, 9);
    ASSERT_EQ(a.nodes.size(), b.nodes.size());
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
        EXPECT_EQ(a.nodes[i].feature, b.nodes[i].feature);
        EXPECT_EQ(a.nodes[i].threshold, b.nodes[i].threshold);
        EXPECT_EQ(a.nodes[i].prediction, b.nodes[i].prediction);
        EXPECT_EQ(a.nodes[i].count, b.nodes[i].count);
    }
}

TEST(Forest, SingleTreeWithoutBootstrapEqualsFitTree) {
    Rng rng(41);
    Tensor X = design(50, 2, rng);
    std::vector<double> y;
    for (std::size_t i = 0; i < 50; ++i) y.push_back(rng.uniform(0.0, 1.0));
    ForestConfig fcfg;
    fcfg.n_trees = 1;
    fcfg.bootstrap = false;
    fcfg.feature_subsample = 2;  // all features, no rng draws in split search
    ForestModel model = fit_forest(X, y, fcfg, 77);
    TreeConfig tcfg;
    tcfg.feature_subsample = 2;
    RegressionTree tree = fit_tree(X, y, tcfg, 123);  // seed unused without subsampling
    EXPECT_EQ(predict(model, X), predict(tree, X));
}

TEST(Forest, PredictionsStayWithinTargetRange) {
    Rng rng(47);
    Tensor X = design(200, 3, rng);
    std::vector<double> y;
    for (std::size_t i = 0; i < 200; ++i) y.push_back(rng.uniform(-5.0, 3.0));
    ForestModel model = fit_forest(X, y, ForestConfig{}, 7);
    Tensor Xtest = design(100, 3, rng, -0.2, 1.2);
    const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
    for (double p : predict(model, Xtest)) {
        EXPECT_GE(p, *lo);
        EXPECT_LE(p, *hi);
    }
}

TEST(Forest, SameSeedSameModelDifferentSeedDifferentModel) {
    Rng rng(53);
    Tensor X = design(80, 2, rng);
    std::vector<double> y;
    for (std::size_t i = 0; i < 80; ++i) y.push_back(std::sin(5.0 * X.data[i * 2]));
    ForestConfig cfg;
    cfg.n_trees = 10;
    Tensor Xtest = design(40, 2, rng);
    std::vector<double> a = predict(fit_forest(X, y, cfg, 99), Xtest);
    std::vector<double> b = predict(fit_forest(X, y, cfg, 99), Xtest);
    std::vector<double> c = predict(fit_forest(X, y, cfg, 100), Xtest);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
}

TEST(Forest, RecoversSmoothSinusoidOutOfSample) {
    Rng rng(61);
    const std::size_t n_train = 1000, n_test = 300;
    Tensor X = design(n_train, 2, rng);
    Tensor Xtest = design(n_test, 2, rng);
    const auto f = [](double a, double b) {
        return std::sin(2.0 * M_PI * a) + 0.5 * std::cos(2.0 * M_PI * b);
    };
    std::vector<double> y, ytest;
    for (std::size_t i = 0; i < n_train; ++i) y.push_back(f(X.data[i * 2], X.data[i * 2 + 1]));
    for (std::size_t i = 0; i < n_test; ++i)
        ytest.push_back(f(Xtest.data[i * 2], Xtest.data[i * 2 + 1]));

    ForestModel model = fit_forest(X, y, ForestConfig{}, 17);
    std::vector<double> pred = predict(model, Xtest);
    const double mean = std::accumulate(ytest.begin(), ytest.end(), 0.0) / n_test;
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < n_test; ++i) {
        ss_res += (ytest[i] - pred[i]) * (ytest[i] - pred[i]);
        ss_tot += (ytest[i] - mean) * (ytest[i] - mean);
    }
    EXPECT_GE(1.0 - ss_res / ss_tot, 0.8);
}

TEST(Forest, RejectsMalformedInput) {
    Rng rng(67);
    Tensor X = design(10, 2, rng);
    std::vector<double> y(10, 1.0);
    EXPECT_THROW(fit_forest(Tensor::zeros({0, 2}), {}, ForestConfig{}, 1), std::invalid_argument);
    EXPECT_THROW(fit_forest(X, std::vector<double>(9, 1.0), ForestConfig{}, 1),
                 std::invalid_argument);
    ForestConfig no_trees;
    no_trees.n_trees = 0;
    EXPECT_THROW(fit_forest(X, y, no_trees, 1), std::invalid_argument);
    EXPECT_THROW(fit_tree(Tensor::vector({1.0, 2.0}), y, TreeConfig{}, 1), std::invalid_argument);
}

TEST(Forest, DumpShowsSplitsAndLeaves) {
    Tensor X = Tensor::matrix(4, 1, {-2.0, -1.0, 1.0, 2.0});
    std::vector<double> y{0.0, 0.0, 1.0, 1.0};
    TreeConfig cfg;
    cfg.max_depth = 1;
    cfg.min_leaf = 1;
    std::string text = dump_tree(fit_tree(X, y, cfg, 1));
    EXPECT_NE(text.find("x0 <= "), std::string::npos);
    EXPECT_NE(text.find("leaf n=2"), std::string::npos);
}

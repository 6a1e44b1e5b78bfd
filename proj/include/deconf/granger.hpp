// Granger tests: the classical linear F-test, the feed-forward-network
// conditional F-test with parameter-count degrees of freedom, and the
// quantitative out-of-sample delta R-squared variant backed by random
// forests. Plus the lag-matrix builder they all share and the Diff score for
// comparing conditioning choices.
//
// Conditioning series are always sorted by id before any design matrix is
// built, so the column order, and with a fixed seed the whole result, is
// independent of the order the caller supplies them in.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deconf/forest.hpp"
#include "deconf/neural.hpp"
#include "deconf/rng.hpp"
#include "deconf/stats.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

struct NamedSeries {
    std::string id;
    std::vector<double> values;
};

// Splits a T x d matrix into named column series (prefix_1 .. prefix_d).
inline std::vector<NamedSeries> columns_of(const Tensor& m, const std::string& prefix) {
    if (m.shape.size() != 2)
        throw std::invalid_argument("columns_of: need a matrix, got " + shape_str(m.shape));
    std::vector<NamedSeries> out;
    for (std::size_t j = 0; j < m.shape[1]; ++j) {
        NamedSeries s;
        s.id = prefix + "_" + std::to_string(j + 1);
        s.values.resize(m.shape[0]);
        for (std::size_t t = 0; t < m.shape[0]; ++t) s.values[t] = m.data[t * m.shape[1] + j];
        out.push_back(std::move(s));
    }
    return out;
}

struct LagSpec {
    std::string id;
    std::size_t lags = 0;  // contributes values at t-1 .. t-lags
};

struct LagMatrix {
    Tensor X;  // rows t = max_lag .. T-1
    std::vector<double> target;
    std::size_t max_lag = 0;
    std::vector<std::string> column_names;  // "id[t-k]"
};

// Row for time t holds, per regressor spec in order, the series values at
// t-1 .. t-lags. Strictly past values only; rows start at the largest lag.
inline LagMatrix build_lag_matrix(const std::vector<NamedSeries>& series,
                                  const std::string& target_id,
                                  const std::vector<LagSpec>& regressors) {
    const auto find = [&](const std::string& id) -> const NamedSeries& {
        for (const NamedSeries& s : series)
            if (s.id == id) return s;
        throw std::invalid_argument("build_lag_matrix: no series named \"" + id + "\"");
    };
    const NamedSeries& target = find(target_id);
    const std::size_t T = target.values.size();

    std::size_t max_lag = 0;
    std::size_t width = 0;
    for (const LagSpec& r : regressors) {
        if (r.lags < 1)
            throw std::invalid_argument("build_lag_matrix: regressor \"" + r.id +
                                        "\" needs at least one lag");
        if (find(r.id).values.size() != T)
            throw std::invalid_argument("build_lag_matrix: series \"" + r.id +
                                        "\" length differs from target");
        max_lag = std::max(max_lag, r.lags);
        width += r.lags;
    }
    if (T <= max_lag)
        throw std::invalid_argument("build_lag_matrix: series length " + std::to_string(T) +
                                    " too short for max lag " + std::to_string(max_lag));

    LagMatrix out;
    out.max_lag = max_lag;
    const std::size_t rows = T - max_lag;
    out.X = Tensor::zeros({rows, width});
    out.target.resize(rows);
    for (const LagSpec& r : regressors)
        for (std::size_t k = 1; k <= r.lags; ++k)
            out.column_names.push_back(r.id + "[t-" + std::to_string(k) + "]");

    for (std::size_t row = 0; row < rows; ++row) {
        const std::size_t t = max_lag + row;
        out.target[row] = target.values[t];
        std::size_t c = 0;
        for (const LagSpec& r : regressors) {
            const NamedSeries& s = find(r.id);
            for (std::size_t k = 1; k <= r.lags; ++k) out.X.data[row * width + c++] = s.values[t - k];
        }
    }
    return out;
}

enum class GrangerMethod { linear, nn_ftest, rf_r2 };

inline std::string method_str(GrangerMethod m) {
    switch (m) {
        case GrangerMethod::linear: return "linear";
        case GrangerMethod::nn_ftest: return "nn_ftest";
        case GrangerMethod::rf_r2: return "rf_r2";
    }
    return "linear";
}

struct GrangerResult {
    GrangerMethod method = GrangerMethod::linear;
    std::size_t lag = 0;
    double alpha = 0.05;
    std::vector<std::string> conditioners;  // canonical sorted ids
    double restricted_metric = 0.0;         // RSS (linear, nn) or R^2 (rf)
    double full_metric = 0.0;
    double statistic = 0.0;                 // F, or delta R^2 for rf
    std::optional<double> p_value;          // absent for rf_r2
    bool reject = false;
    bool ridge_fallback = false;
    bool degenerate_fit = false;
    std::uint64_t seed = 0;
    std::string config_digest;
};

namespace detail {

// In-place Cholesky solve of the normal equations; falls back to a small
// ridge on a non-positive pivot.
struct OlsFit {
    std::vector<double> beta;
    double rss = 0.0;
    bool ridge = false;
};

inline bool cholesky_solve(std::vector<double>& A, std::vector<double>& b, std::size_t k) {
    double scale = 0.0;
    for (std::size_t j = 0; j < k; ++j) scale = std::max(scale, A[j * k + j]);
    for (std::size_t j = 0; j < k; ++j) {
        double d = A[j * k + j];
        for (std::size_t m = 0; m < j; ++m) d -= A[j * k + m] * A[j * k + m];
        if (!(d > scale * 1e-12)) return false;
        const double root = std::sqrt(d);
        A[j * k + j] = root;
        for (std::size_t i = j + 1; i < k; ++i) {
            double v = A[i * k + j];
            for (std::size_t m = 0; m < j; ++m) v -= A[i * k + m] * A[j * k + m];
            A[i * k + j] = v / root;
        }
    }
    for (std::size_t i = 0; i < k; ++i) {
        double v = b[i];
        for (std::size_t m = 0; m < i; ++m) v -= A[i * k + m] * b[m];
        b[i] = v / A[i * k + i];
    }
    for (std::size_t i = k; i-- > 0;) {
        double v = b[i];
        for (std::size_t m = i + 1; m < k; ++m) v -= A[m * k + i] * b[m];
        b[i] = v / A[i * k + i];
    }
    return true;
}

inline OlsFit ols_with_intercept(const Tensor& X, const std::vector<double>& y) {
    const std::size_t n = X.shape[0], p = X.shape[1], k = p + 1;
    const auto cell = [&](std::size_t i, std::size_t j) {
        return j == 0 ? 1.0 : X.data[i * p + (j - 1)];
    };
    std::vector<double> A(k * k, 0.0), b(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < k; ++r) {
            const double vr = cell(i, r);
            b[r] += vr * y[i];
            for (std::size_t c = 0; c <= r; ++c) A[r * k + c] += vr * cell(i, c);
        }
    for (std::size_t r = 0; r < k; ++r)
        for (std::size_t c = r + 1; c < k; ++c) A[r * k + c] = A[c * k + r];

    OlsFit fit;
    std::vector<double> A_try = A, b_try = b;
    if (!cholesky_solve(A_try, b_try, k)) {
        fit.ridge = true;
        A_try = A;
        b_try = b;
        for (std::size_t j = 0; j < k; ++j) A_try[j * k + j] += 1e-8;
        if (!cholesky_solve(A_try, b_try, k))
            throw std::runtime_error("ols: normal equations singular even with ridge");
    }
    fit.beta = std::move(b_try);
    for (std::size_t i = 0; i < n; ++i) {
        double pred = fit.beta[0];
        for (std::size_t j = 0; j < p; ++j) pred += fit.beta[j + 1] * X.data[i * p + j];
        const double r = y[i] - pred;
        fit.rss += r * r;
    }
    return fit;
}

inline std::vector<NamedSeries> sorted_conditioners(std::vector<NamedSeries> cond) {
    std::sort(cond.begin(), cond.end(),
              [](const NamedSeries& a, const NamedSeries& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < cond.size(); ++i)
        if (cond[i].id == cond[i - 1].id)
            throw std::invalid_argument("granger: duplicate conditioner id \"" + cond[i].id + "\"");
    return cond;
}

// Column-wise z-scoring; a constant column becomes zero instead of dividing
// by zero. Power-of-two rescalings of a column standardize to identical bits,
// which the equivariance tests rely on.
inline void standardize_columns(Tensor& X) {
    const std::size_t n = X.shape[0], p = X.shape[1];
    for (std::size_t j = 0; j < p; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += X.data[i * p + j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = X.data[i * p + j] - mean;
            var += d * d;
        }
        const double sd = std::sqrt(var / static_cast<double>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const double d = X.data[i * p + j] - mean;
            X.data[i * p + j] = sd == 0.0 ? 0.0 : d / sd;
        }
    }
}

inline void standardize_vector(std::vector<double>& y) {
    Tensor col = Tensor::zeros({y.size(), 1});
    col.data = y;
    standardize_columns(col);
    y = col.data;
}

inline std::vector<NamedSeries> assemble(const std::vector<double>& x,
                                         const std::vector<double>& y,
                                         const std::vector<NamedSeries>& cond) {
    if (x.size() != y.size())
        throw std::invalid_argument("granger: x and y lengths differ");
    std::vector<NamedSeries> all;
    all.push_back({"x", x});
    all.push_back({"y", y});
    for (const NamedSeries& c : cond) {
        if (c.id == "x" || c.id == "y")
            throw std::invalid_argument("granger: conditioner id \"" + c.id + "\" collides");
        if (c.values.size() != y.size())
            throw std::invalid_argument("granger: conditioner \"" + c.id + "\" length differs");
        all.push_back(c);
    }
    return all;
}

inline std::vector<LagSpec> restricted_specs(const std::vector<NamedSeries>& cond,
                                             std::size_t lag) {
    std::vector<LagSpec> specs{{"y", lag}};
    for (const NamedSeries& c : cond) specs.push_back({c.id, lag});
    return specs;
}

}  // namespace detail

inline GrangerResult linear_granger(const std::vector<double>& x, const std::vector<double>& y,
                                    std::vector<NamedSeries> cond, std::size_t lag,
                                    double alpha = 0.05) {
    if (lag < 1) throw std::invalid_argument("linear_granger: lag must be at least 1");
    cond = detail::sorted_conditioners(std::move(cond));
    const std::vector<NamedSeries> all = detail::assemble(x, y, cond);

    std::vector<LagSpec> specs = detail::restricted_specs(cond, lag);
    LagMatrix restricted = build_lag_matrix(all, "y", specs);
    specs.push_back({"x", lag});
    LagMatrix full = build_lag_matrix(all, "y", specs);

    detail::OlsFit fit_r = detail::ols_with_intercept(restricted.X, restricted.target);
    detail::OlsFit fit_f = detail::ols_with_intercept(full.X, full.target);

    FTestInput in;
    in.rss_restricted = fit_r.rss;
    in.rss_full = fit_f.rss;
    in.params_restricted = static_cast<int>(restricted.X.shape[1] + 1);
    in.params_full = static_cast<int>(full.X.shape[1] + 1);
    in.sample_count = static_cast<int>(full.X.shape[0]);
    const FTestResult ft = f_test(in);

    GrangerResult res;
    res.method = GrangerMethod::linear;
    res.lag = lag;
    res.alpha = alpha;
    for (const NamedSeries& c : cond) res.conditioners.push_back(c.id);
    res.restricted_metric = fit_r.rss;
    res.full_metric = fit_f.rss;
    res.statistic = ft.f_statistic;
    res.p_value = ft.p_value;
    res.reject = ft.p_value < alpha;
    res.ridge_fallback = fit_r.ridge || fit_f.ridge;
    res.degenerate_fit = ft.degenerate_fit;
    res.config_digest = "linear|lag=" + std::to_string(lag) + "|alpha=" + std::to_string(alpha);
    return res;
}

inline GrangerResult linear_granger(const std::vector<double>& x, const std::vector<double>& y,
                                    std::size_t lag, double alpha = 0.05) {
    return linear_granger(x, y, {}, lag, alpha);
}

struct NnTestConfig {
    std::size_t hidden = 10;
    std::size_t steps = 500;  // full-batch Adam iterations
    double lr = 0.01;
    std::uint64_t seed = 0;
};

namespace detail {

// Single-hidden-layer tanh regressor trained with full-batch Adam on the
// mean squared error. Returns the residual sum of squares at the final
// parameters and the trainable parameter count.
struct NnFitResult {
    double rss = 0.0;
    std::size_t param_count = 0;
};

inline NnFitResult fit_nn_regressor(const Tensor& X, const std::vector<double>& y,
                                    const NnTestConfig& cfg) {
    const std::size_t n = X.shape[0], in = X.shape[1], h = cfg.hidden;
    Rng rng(cfg.seed);
    Tensor W1 = Tensor::zeros({in, h});
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : W1.data) v = rng.uniform(-bound, bound);
    }
    Tensor b1 = Tensor::zeros({h});
    Tensor W2 = Tensor::zeros({h, 1});
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(h));
        for (double& v : W2.data) v = rng.uniform(-bound, bound);
    }
    Tensor b2 = Tensor::scalar(0.0);

    Tensor Y = Tensor::zeros({n, 1});
    Y.data = y;

    std::vector<ParamRef> refs{{"W1", &W1}, {"b1", &b1}, {"W2", &W2}, {"b2", &b2}};
    AdamState state = AdamState::for_params(refs);
    AdamConfig adam;
    adam.lr = cfg.lr;

    const auto forward = [&](Tape& tape, bool trainable, std::vector<Var>* leaves) {
        const auto leaf = [&](const Tensor& t) {
            Tensor c = t;
            c.requires_grad = trainable;
            return tape.leaf(std::move(c));
        };
        Var w1 = leaf(W1), v_b1 = leaf(b1), w2 = leaf(W2), v_b2 = leaf(b2);
        if (leaves) *leaves = {w1, v_b1, w2, v_b2};
        Var hidden_act = tanh(add(matmul(tape.constant(X), w1), v_b1));
        Var pred = add(matmul(hidden_act, w2), v_b2);
        Var resid = sub(pred, tape.constant(Y));
        return sum(mul(resid, resid));
    };

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tape tape;
        std::vector<Var> leaves;
        Var sse = forward(tape, true, &leaves);
        Var loss = scale(sse, 1.0 / static_cast<double>(n));
        GradientMap grads = tape.backward(loss);
        adam_step(refs, gather_grads(grads, leaves), state, adam);
    }

    Tape tape;
    NnFitResult out;
    out.rss = forward(tape, false, nullptr).value().item();
    out.param_count = in * h + h + h + 1;
    return out;
}

}  // namespace detail

inline GrangerResult nn_granger_conditional(const std::vector<double>& x,
                                            const std::vector<double>& y,
                                            std::vector<NamedSeries> cond, std::size_t lag,
                                            const NnTestConfig& cfg, double alpha = 0.05) {
    if (lag < 1) throw std::invalid_argument("nn_granger_conditional: lag must be at least 1");
    cond = detail::sorted_conditioners(std::move(cond));
    const std::vector<NamedSeries> all = detail::assemble(x, y, cond);

    std::vector<LagSpec> specs = detail::restricted_specs(cond, lag);
    LagMatrix restricted = build_lag_matrix(all, "y", specs);
    specs.push_back({"x", lag});
    LagMatrix full = build_lag_matrix(all, "y", specs);

    detail::standardize_columns(restricted.X);
    detail::standardize_columns(full.X);
    std::vector<double> target = full.target;
    detail::standardize_vector(target);

    const std::size_t n = full.X.shape[0];
    const detail::NnFitResult fit_r = detail::fit_nn_regressor(restricted.X, target, cfg);
    const detail::NnFitResult fit_f = detail::fit_nn_regressor(full.X, target, cfg);
    if (n <= fit_f.param_count)
        throw std::invalid_argument(
            "nn_granger_conditional: insufficient samples for dof accounting (" +
            std::to_string(n) + " rows, " + std::to_string(fit_f.param_count) + " parameters)");

    FTestInput in;
    in.rss_restricted = fit_r.rss;
    in.rss_full = fit_f.rss;
    in.params_restricted = static_cast<int>(fit_r.param_count);
    in.params_full = static_cast<int>(fit_f.param_count);
    in.sample_count = static_cast<int>(n);
    const FTestResult ft = f_test(in);

    GrangerResult res;
    res.method = GrangerMethod::nn_ftest;
    res.lag = lag;
    res.alpha = alpha;
    for (const NamedSeries& c : cond) res.conditioners.push_back(c.id);
    res.restricted_metric = fit_r.rss;
    res.full_metric = fit_f.rss;
    res.statistic = ft.f_statistic;
    res.p_value = ft.p_value;
    res.reject = ft.p_value < alpha;
    res.degenerate_fit = ft.degenerate_fit;
    res.seed = cfg.seed;
    std::ostringstream digest;
    digest << "nn_ftest|lag=" << lag << "|alpha=" << alpha << "|hidden=" << cfg.hidden
           << "|steps=" << cfg.steps << "|lr=" << cfg.lr << "|seed=" << cfg.seed;
    res.config_digest = digest.str();
    return res;
}

// R-squared skipping the first L entries; the mean is taken over the same
// range. Out-of-sample callers pass L = 0 with already-aligned vectors.
inline double r2(const std::vector<double>& y_true, const std::vector<double>& y_pred,
                 std::size_t L = 0) {
    if (y_true.size() != y_pred.size())
        throw std::invalid_argument("r2: length mismatch (" + std::to_string(y_true.size()) +
                                    " vs " + std::to_string(y_pred.size()) + ")");
    if (y_true.size() <= L) throw std::invalid_argument("r2: no entries past the lag cutoff");
    double mean = 0.0;
    for (std::size_t t = L; t < y_true.size(); ++t) mean += y_true[t];
    mean /= static_cast<double>(y_true.size() - L);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t t = L; t < y_true.size(); ++t) {
        ss_res += (y_true[t] - y_pred[t]) * (y_true[t] - y_pred[t]);
        ss_tot += (y_true[t] - mean) * (y_true[t] - mean);
    }
    if (ss_tot == 0.0) throw std::runtime_error("r2: constant target");
    return 1.0 - ss_res / ss_tot;
}

// Out-of-sample delta R-squared from adding x lags, with a fixed
// chronological 70/30 split. Negative values are reported as-is.
inline GrangerResult gc_r2(const std::vector<double>& x, const std::vector<double>& y,
                           std::vector<NamedSeries> cond, std::size_t lag,
                           const ForestConfig& forest_cfg, std::uint64_t seed,
                           double alpha = 0.05) {
    if (lag < 1) throw std::invalid_argument("gc_r2: lag must be at least 1");
    cond = detail::sorted_conditioners(std::move(cond));
    const std::vector<NamedSeries> all = detail::assemble(x, y, cond);

    std::vector<LagSpec> specs = detail::restricted_specs(cond, lag);
    LagMatrix restricted = build_lag_matrix(all, "y", specs);
    specs.push_back({"x", lag});
    LagMatrix full = build_lag_matrix(all, "y", specs);

    detail::standardize_columns(restricted.X);
    detail::standardize_columns(full.X);

    const std::size_t n = full.X.shape[0];
    const std::size_t n_train = static_cast<std::size_t>(0.7 * static_cast<double>(n));
    const std::size_t n_test = n - n_train;
    if (n_train < 2 * forest_cfg.min_leaf || n_test < 2)
        throw std::invalid_argument("gc_r2: series too short for the 70/30 split (" +
                                    std::to_string(n) + " usable rows)");

    const auto split_fit_r2 = [&](const LagMatrix& lm) {
        const std::size_t p = lm.X.shape[1];
        Tensor Xtr = Tensor::zeros({n_train, p}), Xte = Tensor::zeros({n_test, p});
        std::copy(lm.X.data.begin(), lm.X.data.begin() + static_cast<long>(n_train * p),
                  Xtr.data.begin());
        std::copy(lm.X.data.begin() + static_cast<long>(n_train * p), lm.X.data.end(),
                  Xte.data.begin());
        std::vector<double> ytr(lm.target.begin(), lm.target.begin() + static_cast<long>(n_train));
        std::vector<double> yte(lm.target.begin() + static_cast<long>(n_train), lm.target.end());
        ForestModel model = fit_forest(Xtr, ytr, forest_cfg, seed);
        return r2(yte, predict(model, Xte));
    };

    GrangerResult res;
    res.method = GrangerMethod::rf_r2;
    res.lag = lag;
    res.alpha = alpha;
    for (const NamedSeries& c : cond) res.conditioners.push_back(c.id);
    res.restricted_metric = split_fit_r2(restricted);
    res.full_metric = split_fit_r2(full);
    res.statistic = res.full_metric - res.restricted_metric;
    res.seed = seed;
    std::ostringstream digest;
    digest << "rf_r2|lag=" << lag << "|alpha=" << alpha << "|trees=" << forest_cfg.n_trees
           << "|depth=" << forest_cfg.max_depth << "|min_leaf=" << forest_cfg.min_leaf
           << "|subsample=" << forest_cfg.feature_subsample
           << "|bootstrap=" << (forest_cfg.bootstrap ? 1 : 0) << "|seed=" << seed;
    res.config_digest = digest.str();
    return res;
}

struct DiffScore {
    double value = 0.0;
    std::string conditioning_m;       // joined ids of the evaluated set
    std::string conditioning_ztrue;   // joined ids of the ground-truth set
};

inline std::string join_ids(const std::vector<std::string>& ids) {
    if (ids.empty()) return "(none)";
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += "+";
        out += ids[i];
    }
    return out;
}

// |GC(x->y|m) - GC(x->y|z_true)|. Both results must come from the same
// method, lag, settings, and seed; only the conditioning set may differ.
inline DiffScore diff_metric(const GrangerResult& gc_m, const GrangerResult& gc_ztrue) {
    if (gc_m.config_digest != gc_ztrue.config_digest)
        throw std::invalid_argument("diff_metric: config mismatch (" + gc_m.config_digest +
                                    " vs " + gc_ztrue.config_digest + ")");
    DiffScore d;
    d.value = std::abs(gc_m.statistic - gc_ztrue.statistic);
    d.conditioning_m = join_ids(gc_m.conditioners);
    d.conditioning_ztrue = join_ids(gc_ztrue.conditioners);
    return d;
}

// ---- result serialization ----

inline std::string granger_csv_header() {
    return "method,lag,alpha,conditioners,restricted_metric,full_metric,statistic,p_value,reject,"
           "ridge_fallback,degenerate_fit,seed";
}

inline std::string granger_csv_row(const GrangerResult& r) {
    char buf[32];
    const auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::string row = method_str(r.method) + "," + std::to_string(r.lag) + "," + num(r.alpha) +
                      "," + join_ids(r.conditioners) + "," + num(r.restricted_metric) + "," +
                      num(r.full_metric) + "," + num(r.statistic) + ",";
    if (r.p_value) row += num(*r.p_value);
    row += std::string(",") + (r.reject ? "1" : "0") + "," + (r.ridge_fallback ? "1" : "0") + "," +
           (r.degenerate_fit ? "1" : "0") + "," + std::to_string(r.seed);
    return row;
}

}  // namespace deconf

// Experiment harness behind the command-line tool: strict config-document
// parsing, seeded trial execution over sweep grids, report assembly with
// aggregate rows, and tidy plot-data emission for the figure-style outputs.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deconf/granger.hpp"
#include "deconf/synthdata.hpp"
#include "deconf/tcvae.hpp"

namespace deconf {

// Malformed or contradictory configuration input. The CLI maps each of these
// to its own exit code so scripts can tell bad input from a broken run.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A persisted report that fails its internal consistency checks.
struct ReportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---- configuration document ----

struct DataConfig {
    std::string source = "dgp-causal";  // dgp-null | dgp-causal | csv
    std::string csv_path;               // required for source == csv
    std::size_t T = 1000;
    double ploss = 1.0;
    double noise_level = 0.5;  // csv source: proxy regeneration scale
    std::size_t proxy_dim = 2;
    std::size_t burn_in = 100;
    std::uint64_t seed = 0;
    std::size_t trials = 100;
};

struct ModelConfig {
    std::size_t d_z = 1;
    std::size_t latent_hidden = 16;
    std::size_t reverse_hidden = 16;
    std::size_t combiner_hidden = 32;
    std::size_t head_hidden = 32;
    std::size_t window = 0;  // 0 means whole-sequence windows
    std::size_t epochs = 100;
    std::size_t mc_samples = 1;
    double lr = 1e-3;
    bool instantaneous = false;
};

struct TestConfig {
    GrangerMethod method = GrangerMethod::rf_r2;
    std::size_t lag = 2;
    double alpha = 0.05;
    std::size_t conditioner_dim = 1;  // counting protocol: duplicated-proxy width
    NnTestConfig nn;
    ForestConfig forest;
};

struct SweepAxis {
    std::string name;
    std::vector<double> values;
};

struct SweepConfig {
    // "diff" runs the three-way conditioning comparison per trial; "count"
    // runs one conditional test per trial and tallies rejections.
    std::string protocol = "diff";
    std::vector<SweepAxis> axes;
};

struct OutputConfig {
    std::string directory = "out";
    std::vector<std::string> formats = {"csv"};
};

struct ExperimentConfig {
    DataConfig data;
    ModelConfig model;
    TestConfig test;
    SweepConfig sweep;
    OutputConfig output;
};

inline GrangerMethod parse_method(const std::string& s) {
    if (s == "linear") return GrangerMethod::linear;
    if (s == "nn_ftest") return GrangerMethod::nn_ftest;
    if (s == "rf_r2") return GrangerMethod::rf_r2;
    throw ConfigError("test.method: unknown method '" + s + "'");
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

inline double get_number(const nlohmann::json& j, const std::string& where) {
    if (!j.is_number()) throw ConfigError(where + ": expected a number");
    return j.get<double>();
}

inline std::size_t get_count(const nlohmann::json& j, const std::string& where) {
    if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() &&
                                   j.get<long long>() < 0))
        throw ConfigError(where + ": expected a nonnegative integer");
    return j.get<std::size_t>();
}

inline std::uint64_t get_seed(const nlohmann::json& j, const std::string& where) {
    if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<long long>() < 0))
        throw ConfigError(where + ": expected a nonnegative integer");
    return j.get<std::uint64_t>();
}

inline bool get_flag(const nlohmann::json& j, const std::string& where) {
    if (!j.is_boolean()) throw ConfigError(where + ": expected a boolean");
    return j.get<bool>();
}

inline std::string get_text(const nlohmann::json& j, const std::string& where) {
    if (!j.is_string()) throw ConfigError(where + ": expected a string");
    return j.get<std::string>();
}

template <typename F>
void if_present(const nlohmann::json& j, const char* key, F&& use) {
    if (auto it = j.find(key); it != j.end()) use(*it);
}

inline DataConfig parse_data(const nlohmann::json& j) {
    check_keys(j, "data",
               {"source", "csv_path", "T", "ploss", "noise_level", "proxy_dim", "burn_in", "seed",
                "trials"});
    DataConfig out;
    if_present(j, "source", [&](const auto& v) { out.source = get_text(v, "data.source"); });
    if_present(j, "csv_path", [&](const auto& v) { out.csv_path = get_text(v, "data.csv_path"); });
    if_present(j, "T", [&](const auto& v) { out.T = get_count(v, "data.T"); });
    if_present(j, "ploss", [&](const auto& v) { out.ploss = get_number(v, "data.ploss"); });
    if_present(j, "noise_level",
               [&](const auto& v) { out.noise_level = get_number(v, "data.noise_level"); });
    if_present(j, "proxy_dim",
               [&](const auto& v) { out.proxy_dim = get_count(v, "data.proxy_dim"); });
    if_present(j, "burn_in", [&](const auto& v) { out.burn_in = get_count(v, "data.burn_in"); });
    if_present(j, "seed", [&](const auto& v) { out.seed = get_seed(v, "data.seed"); });
    if_present(j, "trials", [&](const auto& v) { out.trials = get_count(v, "data.trials"); });

    if (out.source != "dgp-null" && out.source != "dgp-causal" && out.source != "csv")
        throw ConfigError("data.source: expected dgp-null, dgp-causal, or csv, got '" +
                          out.source + "'");
    if (out.source == "csv" && out.csv_path.empty())
        throw ConfigError("data.csv_path: required when data.source is csv");
    if (out.source != "csv" && !out.csv_path.empty())
        throw ConfigError("data.csv_path: only meaningful when data.source is csv");
    if (out.T < 2) throw ConfigError("data.T: series length must be at least 2");
    if (out.ploss < 0.0) throw ConfigError("data.ploss: must be nonnegative");
    if (out.noise_level < 0.0) throw ConfigError("data.noise_level: must be nonnegative");
    if (out.proxy_dim < 1) throw ConfigError("data.proxy_dim: must be at least 1");
    if (out.trials < 1) throw ConfigError("data.trials: must be at least 1");
    return out;
}

inline ModelConfig parse_model(const nlohmann::json& j) {
    check_keys(j, "model",
               {"d_z", "latent_hidden", "reverse_hidden", "combiner_hidden", "head_hidden",
                "window", "epochs", "mc_samples", "lr", "instantaneous"});
    ModelConfig out;
    if_present(j, "d_z", [&](const auto& v) { out.d_z = get_count(v, "model.d_z"); });
    if_present(j, "latent_hidden",
               [&](const auto& v) { out.latent_hidden = get_count(v, "model.latent_hidden"); });
    if_present(j, "reverse_hidden",
               [&](const auto& v) { out.reverse_hidden = get_count(v, "model.reverse_hidden"); });
    if_present(j, "combiner_hidden",
               [&](const auto& v) { out.combiner_hidden = get_count(v, "model.combiner_hidden"); });
    if_present(j, "head_hidden",
               [&](const auto& v) { out.head_hidden = get_count(v, "model.head_hidden"); });
    if_present(j, "window", [&](const auto& v) { out.window = get_count(v, "model.window"); });
    if_present(j, "epochs", [&](const auto& v) { out.epochs = get_count(v, "model.epochs"); });
    if_present(j, "mc_samples",
               [&](const auto& v) { out.mc_samples = get_count(v, "model.mc_samples"); });
    if_present(j, "lr", [&](const auto& v) { out.lr = get_number(v, "model.lr"); });
    if_present(j, "instantaneous",
               [&](const auto& v) { out.instantaneous = get_flag(v, "model.instantaneous"); });

    if (out.d_z < 1) throw ConfigError("model.d_z: must be at least 1");
    if (out.latent_hidden < 1 || out.reverse_hidden < 1 || out.combiner_hidden < 1 ||
        out.head_hidden < 1)
        throw ConfigError("model: hidden sizes must be at least 1");
    if (out.epochs < 1) throw ConfigError("model.epochs: must be at least 1");
    if (out.mc_samples < 1) throw ConfigError("model.mc_samples: must be at least 1");
    if (!(out.lr > 0.0)) throw ConfigError("model.lr: must be positive");
    return out;
}

inline TestConfig parse_test(const nlohmann::json& j) {
    check_keys(j, "test", {"method", "lag", "alpha", "conditioner_dim", "nn", "forest"});
    TestConfig out;
    if_present(j, "method",
               [&](const auto& v) { out.method = parse_method(get_text(v, "test.method")); });
    if_present(j, "lag", [&](const auto& v) { out.lag = get_count(v, "test.lag"); });
    if_present(j, "alpha", [&](const auto& v) { out.alpha = get_number(v, "test.alpha"); });
    if_present(j, "conditioner_dim", [&](const auto& v) {
        out.conditioner_dim = get_count(v, "test.conditioner_dim");
    });
    if_present(j, "nn", [&](const auto& v) {
        check_keys(v, "test.nn", {"hidden", "steps", "lr"});
        if_present(v, "hidden",
                   [&](const auto& w) { out.nn.hidden = get_count(w, "test.nn.hidden"); });
        if_present(v, "steps", [&](const auto& w) { out.nn.steps = get_count(w, "test.nn.steps"); });
        if_present(v, "lr", [&](const auto& w) { out.nn.lr = get_number(w, "test.nn.lr"); });
    });
    if_present(j, "forest", [&](const auto& v) {
        check_keys(v, "test.forest",
                   {"trees", "max_depth", "min_leaf", "feature_subsample", "bootstrap"});
        if_present(v, "trees",
                   [&](const auto& w) { out.forest.n_trees = get_count(w, "test.forest.trees"); });
        if_present(v, "max_depth", [&](const auto& w) {
            out.forest.max_depth = get_count(w, "test.forest.max_depth");
        });
        if_present(v, "min_leaf", [&](const auto& w) {
            out.forest.min_leaf = get_count(w, "test.forest.min_leaf");
        });
        if_present(v, "feature_subsample", [&](const auto& w) {
            out.forest.feature_subsample = get_count(w, "test.forest.feature_subsample");
        });
        if_present(v, "bootstrap", [&](const auto& w) {
            out.forest.bootstrap = get_flag(w, "test.forest.bootstrap");
        });
    });

    if (out.lag < 1) throw ConfigError("test.lag: must be at least 1");
    if (!(out.alpha > 0.0 && out.alpha < 1.0)) throw ConfigError("test.alpha: must be in (0, 1)");
    if (out.conditioner_dim < 1) throw ConfigError("test.conditioner_dim: must be at least 1");
    if (out.nn.hidden < 1 || out.nn.steps < 1) throw ConfigError("test.nn: sizes must be positive");
    if (!(out.nn.lr > 0.0)) throw ConfigError("test.nn.lr: must be positive");
    if (out.forest.n_trees < 1) throw ConfigError("test.forest.trees: must be at least 1");
    if (out.forest.min_leaf < 1) throw ConfigError("test.forest.min_leaf: must be at least 1");
    return out;
}

// Axis names double as config field addresses; integer-valued axes reject
// fractional sweep values up front rather than truncating mid-run.
inline bool axis_is_integral(const std::string& name) {
    return name == "proxy_dim" || name == "d_z" || name == "nn_steps" ||
           name == "conditioner_dim";
}

inline bool axis_known(const std::string& name) {
    return name == "ploss" || name == "noise_level" || axis_is_integral(name);
}

inline SweepConfig parse_sweep(const nlohmann::json& j) {
    check_keys(j, "sweep", {"protocol", "axes"});
    SweepConfig out;
    if_present(j, "protocol",
               [&](const auto& v) { out.protocol = get_text(v, "sweep.protocol"); });
    if (out.protocol != "diff" && out.protocol != "count")
        throw ConfigError("sweep.protocol: expected diff or count, got '" + out.protocol + "'");
    if_present(j, "axes", [&](const auto& v) {
        if (!v.is_array()) throw ConfigError("sweep.axes: expected an array");
        for (const auto& a : v) {
            check_keys(a, "sweep.axes[]", {"name", "values"});
            SweepAxis axis;
            if (auto it = a.find("name"); it != a.end())
                axis.name = get_text(*it, "sweep.axes[].name");
            else
                throw ConfigError("sweep.axes[].name: required");
            if (!axis_known(axis.name))
                throw ConfigError("sweep.axes[].name: unknown axis '" + axis.name + "'");
            auto vt = a.find("values");
            if (vt == a.end() || !vt->is_array() || vt->empty())
                throw ConfigError("sweep.axes[].values: need a nonempty array for axis '" +
                                  axis.name + "'");
            for (const auto& value : *vt) {
                const double d = get_number(value, "sweep.axes[].values");
                if (axis_is_integral(axis.name) && (d != std::floor(d) || d < 1.0))
                    throw ConfigError("sweep axis '" + axis.name +
                                      "': values must be positive integers");
                if (!axis_is_integral(axis.name) && d < 0.0)
                    throw ConfigError("sweep axis '" + axis.name + "': values must be nonnegative");
                axis.values.push_back(d);
            }
            for (const SweepAxis& seen : out.axes)
                if (seen.name == axis.name)
                    throw ConfigError("sweep.axes: duplicate axis '" + axis.name + "'");
            out.axes.push_back(std::move(axis));
        }
    });
    return out;
}

inline OutputConfig parse_output(const nlohmann::json& j) {
    check_keys(j, "output", {"directory", "formats"});
    OutputConfig out;
    if_present(j, "directory",
               [&](const auto& v) { out.directory = get_text(v, "output.directory"); });
    if_present(j, "formats", [&](const auto& v) {
        if (!v.is_array()) throw ConfigError("output.formats: expected an array");
        out.formats.clear();
        for (const auto& f : v) {
            const std::string s = get_text(f, "output.formats[]");
            if (s != "csv" && s != "json")
                throw ConfigError("output.formats: expected csv or json, got '" + s + "'");
            out.formats.push_back(s);
        }
    });
    if (out.directory.empty()) throw ConfigError("output.directory: must not be empty");
    if (out.formats.empty()) throw ConfigError("output.formats: need at least one format");
    return out;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    detail::check_keys(j, "config", {"data", "model", "test", "sweep", "output"});
    ExperimentConfig out;
    detail::if_present(j, "data", [&](const auto& v) { out.data = detail::parse_data(v); });
    detail::if_present(j, "model", [&](const auto& v) { out.model = detail::parse_model(v); });
    detail::if_present(j, "test", [&](const auto& v) { out.test = detail::parse_test(v); });
    detail::if_present(j, "sweep", [&](const auto& v) { out.sweep = detail::parse_sweep(v); });
    detail::if_present(j, "output", [&](const auto& v) { out.output = detail::parse_output(v); });
    for (const SweepAxis& axis : out.sweep.axes) {
        if (axis.name == "noise_level" && out.data.source != "csv")
            throw ConfigError(
                "sweep.axes: noise_level only varies the proxy regeneration of a csv source");
        if (axis.name == "ploss" && out.data.source == "csv")
            throw ConfigError("sweep.axes: ploss has no effect on a csv source");
    }
    return out;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("load_config: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("load_config: " + path + ": " + e.what());
    }
    return parse_config(j);
}

inline nlohmann::json config_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["data"] = {{"source", cfg.data.source},  {"T", cfg.data.T},
                 {"ploss", cfg.data.ploss},    {"noise_level", cfg.data.noise_level},
                 {"proxy_dim", cfg.data.proxy_dim}, {"burn_in", cfg.data.burn_in},
                 {"seed", cfg.data.seed},      {"trials", cfg.data.trials}};
    if (!cfg.data.csv_path.empty()) j["data"]["csv_path"] = cfg.data.csv_path;
    j["model"] = {{"d_z", cfg.model.d_z},
                  {"latent_hidden", cfg.model.latent_hidden},
                  {"reverse_hidden", cfg.model.reverse_hidden},
                  {"combiner_hidden", cfg.model.combiner_hidden},
                  {"head_hidden", cfg.model.head_hidden},
                  {"window", cfg.model.window},
                  {"epochs", cfg.model.epochs},
                  {"mc_samples", cfg.model.mc_samples},
                  {"lr", cfg.model.lr},
                  {"instantaneous", cfg.model.instantaneous}};
    j["test"] = {{"method", method_str(cfg.test.method)},
                 {"lag", cfg.test.lag},
                 {"alpha", cfg.test.alpha},
                 {"conditioner_dim", cfg.test.conditioner_dim},
                 {"nn", {{"hidden", cfg.test.nn.hidden}, {"steps", cfg.test.nn.steps},
                         {"lr", cfg.test.nn.lr}}},
                 {"forest",
                  {{"trees", cfg.test.forest.n_trees},
                   {"max_depth", cfg.test.forest.max_depth},
                   {"min_leaf", cfg.test.forest.min_leaf},
                   {"feature_subsample", cfg.test.forest.feature_subsample},
                   {"bootstrap", cfg.test.forest.bootstrap}}}};
    nlohmann::json axes = nlohmann::json::array();
    for (const SweepAxis& a : cfg.sweep.axes)
        axes.push_back({{"name", a.name}, {"values", a.values}});
    j["sweep"] = {{"protocol", cfg.sweep.protocol}, {"axes", axes}};
    j["output"] = {{"directory", cfg.output.directory}, {"formats", cfg.output.formats}};
    return j;
}

// CLI override beats the environment override, which beats the configured
// directory. The environment hook covers the output directory only.
inline std::string resolve_output_dir(const ExperimentConfig& cfg,
                                      const std::string& cli_override = "") {
    if (!cli_override.empty()) return cli_override;
    if (const char* env = std::getenv("DECONF_OUTPUT_DIR"); env && *env) return env;
    return cfg.output.directory;
}

// ---- sweep expansion ----

struct SweepPoint {
    std::vector<double> values;  // one per axis, in axis order
    ExperimentConfig cfg;        // base config with the axis values applied
};

namespace detail {

inline void apply_axis(ExperimentConfig& cfg, const std::string& name, double v) {
    if (name == "ploss")
        cfg.data.ploss = v;
    else if (name == "noise_level")
        cfg.data.noise_level = v;
    else if (name == "proxy_dim")
        cfg.data.proxy_dim = static_cast<std::size_t>(v);
    else if (name == "d_z")
        cfg.model.d_z = static_cast<std::size_t>(v);
    else if (name == "nn_steps")
        cfg.test.nn.steps = static_cast<std::size_t>(v);
    else if (name == "conditioner_dim")
        cfg.test.conditioner_dim = static_cast<std::size_t>(v);
    else
        throw ConfigError("sweep: unknown axis '" + name + "'");
}

}  // namespace detail

// Cartesian product in row-major order: the first axis varies slowest.
inline std::vector<SweepPoint> expand_sweep(const ExperimentConfig& base) {
    if (base.sweep.axes.empty()) throw ConfigError("sweep.axes: need at least one axis");
    std::vector<SweepPoint> points;
    std::vector<std::size_t> idx(base.sweep.axes.size(), 0);
    for (;;) {
        SweepPoint p;
        p.cfg = base;
        for (std::size_t a = 0; a < base.sweep.axes.size(); ++a) {
            const double v = base.sweep.axes[a].values[idx[a]];
            p.values.push_back(v);
            detail::apply_axis(p.cfg, base.sweep.axes[a].name, v);
        }
        points.push_back(std::move(p));
        std::size_t a = base.sweep.axes.size();
        while (a > 0) {
            --a;
            if (++idx[a] < base.sweep.axes[a].values.size()) break;
            idx[a] = 0;
            if (a == 0) return points;
        }
    }
}

// ---- trial execution ----

struct TrialResult {
    std::size_t point_index = 0;
    std::size_t trial_index = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    // Unset columns stay NaN and print as empty report cells.
    double gc_p = std::numeric_limits<double>::quiet_NaN();
    double gc_zhat = std::numeric_limits<double>::quiet_NaN();
    double gc_ztrue = std::numeric_limits<double>::quiet_NaN();
    double diff_p = std::numeric_limits<double>::quiet_NaN();
    double diff_zhat = std::numeric_limits<double>::quiet_NaN();
    double diff_gap = std::numeric_limits<double>::quiet_NaN();
    double reject = std::numeric_limits<double>::quiet_NaN();
    double wall_time_s = 0.0;
};

inline TcvaeConfig to_tcvae_config(const ModelConfig& m, std::uint64_t seed) {
    TcvaeConfig c;
    c.d_z = m.d_z;
    c.latent_hidden = m.latent_hidden;
    c.reverse_hidden = m.reverse_hidden;
    c.combiner_hidden = m.combiner_hidden;
    c.head_hidden = m.head_hidden;
    c.instantaneous = m.instantaneous;
    c.window = m.window;
    c.epochs = m.epochs;
    c.mc_samples = m.mc_samples;
    c.lr = m.lr;
    c.seed = seed;
    return c;
}

// Dispatches one conditional test under the configured method. The seed
// feeds the nn and forest fits; the linear test is deterministic.
inline GrangerResult run_granger(const ExperimentConfig& cfg, const TimeSeriesBundle& b,
                                 std::vector<NamedSeries> cond, std::uint64_t seed) {
    switch (cfg.test.method) {
        case GrangerMethod::linear:
            return linear_granger(b.x, b.y, std::move(cond), cfg.test.lag, cfg.test.alpha);
        case GrangerMethod::nn_ftest: {
            NnTestConfig nn = cfg.test.nn;
            nn.seed = seed;
            return nn_granger_conditional(b.x, b.y, std::move(cond), cfg.test.lag, nn,
                                          cfg.test.alpha);
        }
        case GrangerMethod::rf_r2:
            return gc_r2(b.x, b.y, std::move(cond), cfg.test.lag, cfg.test.forest, seed,
                         cfg.test.alpha);
    }
    throw std::logic_error("run_granger: unhandled method");
}

namespace detail {

inline constexpr std::uint64_t kProxyRegenStream = 0x9e01;
inline constexpr std::uint64_t kTrainStream = 0x9e02;
inline constexpr std::uint64_t kDrawStream = 0x9e03;

// One bundle per trial. DGP sources simulate with the trial seed; the csv
// source reloads the stored series and redraws the proxies from the stored
// confounder at the configured noise level, so trials differ in the proxy
// noise exactly as in the semi-synthetic protocol.
inline TimeSeriesBundle trial_bundle(const ExperimentConfig& cfg, std::uint64_t trial_seed) {
    if (cfg.data.source == "csv") {
        TimeSeriesBundle b = load_csv(cfg.data.csv_path);
        if (!b.z_true)
            throw std::runtime_error("trial: " + cfg.data.csv_path +
                                     " has no confounder columns to regenerate proxies from");
        Rng proxy_rng = Rng(trial_seed).derive(kProxyRegenStream);
        NoisyProxyResult pr =
            make_noisy_proxy(*b.z_true, cfg.data.noise_level, proxy_rng, cfg.data.proxy_dim);
        b.p = std::move(pr.p);
        return b;
    }
    DgpConfig d;
    d.T = cfg.data.T;
    d.ploss = cfg.data.ploss;
    d.d_p = cfg.data.proxy_dim;
    d.burn_in = cfg.data.burn_in;
    d.seed = trial_seed;
    return cfg.data.source == "dgp-null" ? gen_null(d) : gen_causal(d);
}

// Three conditional tests under one shared test seed: the true confounder,
// the observed proxies, and the confounder recovered by a model trained on
// this trial's bundle.
inline void run_diff_trial(const ExperimentConfig& cfg, TrialResult& out) {
    TimeSeriesBundle b = trial_bundle(cfg, out.seed);
    if (!b.z_true) throw std::runtime_error("trial: the diff protocol needs the true confounder");

    const GrangerResult g_true = run_granger(cfg, b, columns_of(*b.z_true, "z"), out.seed);
    const GrangerResult g_p = run_granger(cfg, b, columns_of(b.p, "p"), out.seed);

    TcvaeConfig tc = to_tcvae_config(cfg.model, Rng(out.seed).derive(kTrainStream).seed());
    TrainResult tr = train(b, tc);
    if (tr.aborted) throw std::runtime_error("trial: training aborted: " + tr.abort_reason);
    Rng draw_rng = Rng(out.seed).derive(kDrawStream);
    ConfounderEstimate est = estimate_confounder(b, tr.model, 0, draw_rng);
    const GrangerResult g_zhat = run_granger(cfg, b, columns_of(est.mean, "z_hat"), out.seed);

    out.gc_p = g_p.statistic;
    out.gc_zhat = g_zhat.statistic;
    out.gc_ztrue = g_true.statistic;
    out.diff_p = diff_metric(g_p, g_true).value;
    out.diff_zhat = diff_metric(g_zhat, g_true).value;
    out.diff_gap = out.diff_zhat - out.diff_p;
}

// One conditional test against the first proxy column duplicated to the
// configured width, tallying the rejection decision.
inline void run_count_trial(const ExperimentConfig& cfg, TrialResult& out) {
    TimeSeriesBundle b = trial_bundle(cfg, out.seed);
    NamedSeries base;
    base.values.resize(b.length);
    const std::size_t d_p = b.proxy_dim();
    for (std::size_t t = 0; t < b.length; ++t) base.values[t] = b.p.data[t * d_p];
    std::vector<NamedSeries> cond;
    for (std::size_t k = 0; k < cfg.test.conditioner_dim; ++k) {
        base.id = "pc_" + std::to_string(k + 1);
        cond.push_back(base);
    }
    const GrangerResult r = run_granger(cfg, b, std::move(cond), out.seed);
    out.gc_p = r.statistic;
    out.reject = r.reject ? 1.0 : 0.0;
}

}  // namespace detail

inline TrialResult run_trial(const ExperimentConfig& cfg, std::size_t point_index,
                             std::size_t trial_index) {
    TrialResult out;
    out.point_index = point_index;
    out.trial_index = trial_index;
    out.seed = cfg.data.seed + trial_index;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (cfg.sweep.protocol == "count")
            detail::run_count_trial(cfg, out);
        else
            detail::run_diff_trial(cfg, out);
        out.ok = true;
    } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
        out.gc_p = out.gc_zhat = out.gc_ztrue = std::numeric_limits<double>::quiet_NaN();
        out.diff_p = out.diff_zhat = out.diff_gap = std::numeric_limits<double>::quiet_NaN();
        out.reject = std::numeric_limits<double>::quiet_NaN();
    }
    out.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

struct ExperimentRun {
    std::vector<std::string> axis_names;
    std::vector<SweepPoint> points;
    std::vector<TrialResult> results;  // grouped by point, trials ascending
    std::size_t failed = 0;
};

// Trials are independent and fully seeded, so workers pull indices from a
// shared counter and write into preassigned slots; the report is identical
// for any job count. Each trial stays single-threaded.
inline ExperimentRun run_experiment(const ExperimentConfig& cfg, std::size_t jobs = 1,
                                    std::ostream* progress = nullptr) {
    ExperimentRun run;
    for (const SweepAxis& a : cfg.sweep.axes) run.axis_names.push_back(a.name);
    run.points = expand_sweep(cfg);
    const std::size_t trials = cfg.data.trials;
    const std::size_t total = run.points.size() * trials;
    run.results.resize(total);

    std::atomic<std::size_t> next{0};
    std::mutex progress_mutex;
    const auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= total) return;
            const std::size_t point = i / trials;
            const std::size_t trial = i % trials;
            TrialResult r = run_trial(run.points[point].cfg, point, trial);
            if (progress) {
                std::lock_guard<std::mutex> lock(progress_mutex);
                (*progress) << "point " << point + 1 << "/" << run.points.size() << " trial "
                            << trial + 1 << "/" << trials << ": "
                            << (r.ok ? "ok" : "failed: " + r.error) << " ("
                            << static_cast<int>(r.wall_time_s * 1000.0) << " ms)\n";
            }
            run.results[i] = std::move(r);
        }
    };

    const std::size_t n_workers = std::max<std::size_t>(1, std::min(jobs, total));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    for (const TrialResult& r : run.results)
        if (!r.ok) ++run.failed;
    return run;
}

// ---- report assembly and persistence ----

struct ReportRow {
    std::string kind;  // trial | mean | std
    std::vector<double> axes;
    std::optional<std::size_t> trial;
    std::optional<std::uint64_t> seed;
    std::optional<double> gc_p, gc_zhat, gc_ztrue;
    std::optional<double> diff_p, diff_zhat, diff_gap;
    std::optional<double> reject;
    std::optional<double> wall_time_s;
    std::string error;
};

struct ExperimentReport {
    std::vector<std::string> axis_names;
    std::vector<ReportRow> rows;
};

namespace detail {

using ValueField = std::optional<double> ReportRow::*;

inline constexpr ValueField kValueFields[] = {
    &ReportRow::gc_p,   &ReportRow::gc_zhat,  &ReportRow::gc_ztrue, &ReportRow::diff_p,
    &ReportRow::diff_zhat, &ReportRow::diff_gap, &ReportRow::reject,   &ReportRow::wall_time_s,
};

inline constexpr const char* kValueNames[] = {
    "gc_p", "gc_zhat", "gc_ztrue", "diff_p", "diff_zhat", "diff_gap", "reject", "wall_time_s",
};

inline constexpr std::size_t kValueCount = sizeof(kValueFields) / sizeof(kValueFields[0]);

inline std::optional<double> finite_or_none(double v) {
    if (std::isnan(v)) return std::nullopt;
    return v;
}

// Mean and sample standard deviation rows over the trial rows of one sweep
// point, skipping failed trials. Summation runs in trial order so a reload
// reproduces the exact doubles.
inline std::pair<ReportRow, ReportRow> aggregate_group(const std::vector<double>& axes,
                                                       const std::vector<const ReportRow*>& rows) {
    ReportRow mean_row, std_row;
    mean_row.kind = "mean";
    std_row.kind = "std";
    mean_row.axes = std_row.axes = axes;
    for (std::size_t f = 0; f < kValueCount; ++f) {
        std::vector<double> values;
        for (const ReportRow* r : rows)
            if (r->error.empty() && r->*kValueFields[f]) values.push_back(*(r->*kValueFields[f]));
        if (values.empty()) continue;
        double mean = 0.0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        double sd = 0.0;
        if (values.size() > 1) {
            double ss = 0.0;
            for (double v : values) ss += (v - mean) * (v - mean);
            sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
        }
        mean_row.*kValueFields[f] = mean;
        std_row.*kValueFields[f] = sd;
    }
    return {mean_row, std_row};
}

inline std::string sanitize_error(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ' ';
    return s;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline ExperimentReport build_report(const ExperimentRun& run) {
    ExperimentReport rep;
    rep.axis_names = run.axis_names;
    for (const TrialResult& r : run.results) {
        ReportRow row;
        row.kind = "trial";
        row.axes = run.points[r.point_index].values;
        row.trial = r.trial_index;
        row.seed = r.seed;
        row.gc_p = detail::finite_or_none(r.gc_p);
        row.gc_zhat = detail::finite_or_none(r.gc_zhat);
        row.gc_ztrue = detail::finite_or_none(r.gc_ztrue);
        row.diff_p = detail::finite_or_none(r.diff_p);
        row.diff_zhat = detail::finite_or_none(r.diff_zhat);
        row.diff_gap = detail::finite_or_none(r.diff_gap);
        row.reject = detail::finite_or_none(r.reject);
        row.wall_time_s = r.wall_time_s;
        row.error = detail::sanitize_error(r.error);
        rep.rows.push_back(std::move(row));
    }
    const std::size_t trials = run.points.empty() ? 0 : run.results.size() / run.points.size();
    for (std::size_t p = 0; p < run.points.size(); ++p) {
        std::vector<const ReportRow*> group;
        for (std::size_t t = 0; t < trials; ++t) group.push_back(&rep.rows[p * trials + t]);
        auto [mean_row, std_row] = detail::aggregate_group(run.points[p].values, group);
        rep.rows.push_back(std::move(mean_row));
        rep.rows.push_back(std::move(std_row));
    }
    return rep;
}

inline std::string report_csv_header(const std::vector<std::string>& axis_names) {
    std::string h = "row_kind";
    for (const std::string& a : axis_names) h += "," + a;
    h += ",trial,seed";
    for (std::size_t f = 0; f < detail::kValueCount; ++f)
        h += std::string(",") + detail::kValueNames[f];
    h += ",error";
    return h;
}

inline std::string report_csv_row(const ReportRow& r) {
    std::string line = r.kind;
    for (double a : r.axes) line += "," + detail::format_double(a);
    line += ",";
    if (r.trial) line += std::to_string(*r.trial);
    line += ",";
    if (r.seed) line += std::to_string(*r.seed);
    for (std::size_t f = 0; f < detail::kValueCount; ++f) {
        line += ",";
        if (r.*detail::kValueFields[f]) line += detail::format_double(*(r.*detail::kValueFields[f]));
    }
    line += "," + r.error;
    return line;
}

inline void write_report_csv(const std::string& path, const ExperimentReport& rep) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("write_report_csv: cannot open " + path);
    os << report_csv_header(rep.axis_names) << "\n";
    for (const ReportRow& r : rep.rows) os << report_csv_row(r) << "\n";
    if (!os) throw IoError("write_report_csv: write failed for " + path);
}

inline void write_report_json(const std::string& path, const ExperimentReport& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const ReportRow& r : rep.rows) {
        nlohmann::json row;
        row["row_kind"] = r.kind;
        for (std::size_t a = 0; a < rep.axis_names.size(); ++a)
            row[rep.axis_names[a]] = r.axes[a];
        if (r.trial) row["trial"] = *r.trial;
        if (r.seed) row["seed"] = *r.seed;
        for (std::size_t f = 0; f < detail::kValueCount; ++f)
            if (r.*detail::kValueFields[f])
                row[detail::kValueNames[f]] = *(r.*detail::kValueFields[f]);
        if (!r.error.empty()) row["error"] = r.error;
        rows.push_back(std::move(row));
    }
    nlohmann::json j;
    j["axes"] = rep.axis_names;
    j["rows"] = std::move(rows);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("write_report_json: cannot open " + path);
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write_report_json: write failed for " + path);
}

// Parses a report CSV and enforces the row-level invariant that the Diff
// columns match the GC columns they were derived from, bit for bit after the
// 17-digit round trip.
inline ExperimentReport load_report(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("load_report: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw ReportError("load_report: " + path + " is empty");
    const std::vector<std::string> header = detail::split_csv_line(detail::trim(line));
    const std::size_t fixed_tail = 2 + detail::kValueCount + 1;  // trial, seed, values, error
    if (header.size() < 1 + fixed_tail || header.front() != "row_kind")
        throw ReportError("load_report: unrecognized header in " + path);
    ExperimentReport rep;
    for (std::size_t i = 1; i + fixed_tail < header.size(); ++i)
        rep.axis_names.push_back(header[i]);
    const std::size_t n_axes = rep.axis_names.size();
    for (std::size_t f = 0; f < detail::kValueCount; ++f)
        if (header[1 + n_axes + 2 + f] != detail::kValueNames[f])
            throw ReportError("load_report: expected column '" +
                              std::string(detail::kValueNames[f]) + "', got '" +
                              header[1 + n_axes + 2 + f] + "'");

    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw ReportError("load_report: line " + std::to_string(line_no) + " has " +
                              std::to_string(cells.size()) + " cells, expected " +
                              std::to_string(header.size()));
        ReportRow row;
        row.kind = cells[0];
        if (row.kind != "trial" && row.kind != "mean" && row.kind != "std")
            throw ReportError("load_report: line " + std::to_string(line_no) +
                              ": unknown row kind '" + row.kind + "'");
        const auto parse_num = [&](const std::string& cell) -> std::optional<double> {
            if (cell.empty()) return std::nullopt;
            try {
                std::size_t used = 0;
                const double v = std::stod(cell, &used);
                if (used == cell.size()) return v;
            } catch (const std::exception&) {
            }
            throw ReportError("load_report: line " + std::to_string(line_no) + ": bad number '" +
                              cell + "'");
        };
        for (std::size_t a = 0; a < n_axes; ++a) {
            const auto v = parse_num(cells[1 + a]);
            if (!v)
                throw ReportError("load_report: line " + std::to_string(line_no) +
                                  ": missing axis value");
            row.axes.push_back(*v);
        }
        const auto parse_index = [&](const std::string& cell) -> std::optional<std::uint64_t> {
            if (cell.empty()) return std::nullopt;
            try {
                std::size_t used = 0;
                const std::uint64_t v = std::stoull(cell, &used);
                if (used == cell.size()) return v;
            } catch (const std::exception&) {
            }
            throw ReportError("load_report: line " + std::to_string(line_no) + ": bad count '" +
                              cell + "'");
        };
        if (const auto t = parse_index(cells[1 + n_axes])) row.trial = *t;
        if (const auto s = parse_index(cells[1 + n_axes + 1])) row.seed = *s;
        for (std::size_t f = 0; f < detail::kValueCount; ++f)
            row.*detail::kValueFields[f] = parse_num(cells[1 + n_axes + 2 + f]);
        row.error = cells.back();

        if (row.kind == "trial") {
            if (row.gc_p && row.gc_ztrue && row.diff_p &&
                *row.diff_p != std::abs(*row.gc_p - *row.gc_ztrue))
                throw ReportError("load_report: line " + std::to_string(line_no) +
                                  ": diff_p does not match |gc_p - gc_ztrue|");
            if (row.gc_zhat && row.gc_ztrue && row.diff_zhat &&
                *row.diff_zhat != std::abs(*row.gc_zhat - *row.gc_ztrue))
                throw ReportError("load_report: line " + std::to_string(line_no) +
                                  ": diff_zhat does not match |gc_zhat - gc_ztrue|");
            if (row.diff_p && row.diff_zhat && row.diff_gap &&
                *row.diff_gap != *row.diff_zhat - *row.diff_p)
                throw ReportError("load_report: line " + std::to_string(line_no) +
                                  ": diff_gap does not match diff_zhat - diff_p");
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

// Recomputes the aggregate rows from the trial rows and demands an exact
// match with the stored ones.
inline void verify_aggregates(const ExperimentReport& rep) {
    std::vector<std::vector<double>> keys;
    std::vector<std::vector<const ReportRow*>> groups;
    const auto group_of = [&](const std::vector<double>& axes) -> std::size_t {
        for (std::size_t g = 0; g < keys.size(); ++g)
            if (keys[g] == axes) return g;
        keys.push_back(axes);
        groups.emplace_back();
        return keys.size() - 1;
    };
    for (const ReportRow& r : rep.rows)
        if (r.kind == "trial") groups[group_of(r.axes)].push_back(&r);

    const auto match = [&](const ReportRow& stored, const ReportRow& computed) {
        for (std::size_t f = 0; f < detail::kValueCount; ++f) {
            const auto& a = stored.*detail::kValueFields[f];
            const auto& b = computed.*detail::kValueFields[f];
            if (a.has_value() != b.has_value() || (a && *a != *b))
                throw ReportError("report: stored " + stored.kind + " row for column '" +
                                  detail::kValueNames[f] +
                                  "' does not match the trial rows it aggregates");
        }
    };
    for (const ReportRow& r : rep.rows) {
        if (r.kind == "trial") continue;
        bool found = false;
        for (std::size_t g = 0; g < keys.size(); ++g) {
            if (keys[g] != r.axes) continue;
            found = true;
            auto [mean_row, std_row] = detail::aggregate_group(keys[g], groups[g]);
            match(r, r.kind == "mean" ? mean_row : std_row);
            break;
        }
        if (!found) throw ReportError("report: aggregate row with no matching trial rows");
    }
}

// ---- plot-data emission ----
// Tidy CSVs mirroring the figure-style outputs; consumers plot them as-is.

namespace detail {

struct PointSummary {
    const SweepPoint* point = nullptr;
    std::size_t ok = 0;
    std::size_t rejections = 0;
    double diff_p_mean = 0.0, diff_p_std = 0.0;
    double diff_zhat_mean = 0.0, diff_zhat_std = 0.0;
    bool has_diffs = false;
};

inline std::vector<PointSummary> summarize_points(const ExperimentRun& run) {
    const std::size_t trials = run.points.empty() ? 0 : run.results.size() / run.points.size();
    std::vector<PointSummary> out(run.points.size());
    for (std::size_t p = 0; p < run.points.size(); ++p) {
        PointSummary& s = out[p];
        s.point = &run.points[p];
        std::vector<double> dp, dz;
        for (std::size_t t = 0; t < trials; ++t) {
            const TrialResult& r = run.results[p * trials + t];
            if (!r.ok) continue;
            ++s.ok;
            if (r.reject == 1.0) ++s.rejections;
            if (!std::isnan(r.diff_p)) dp.push_back(r.diff_p);
            if (!std::isnan(r.diff_zhat)) dz.push_back(r.diff_zhat);
        }
        const auto mean_std = [](const std::vector<double>& v, double& m, double& sd) {
            m = 0.0;
            for (double x : v) m += x;
            m /= static_cast<double>(v.size());
            sd = 0.0;
            if (v.size() > 1) {
                double ss = 0.0;
                for (double x : v) ss += (x - m) * (x - m);
                sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
            }
        };
        if (!dp.empty() && !dz.empty()) {
            s.has_diffs = true;
            mean_std(dp, s.diff_p_mean, s.diff_p_std);
            mean_std(dz, s.diff_zhat_mean, s.diff_zhat_std);
        }
    }
    return out;
}

inline void write_diff_sweep_csv(const std::string& path, const ExperimentRun& run,
                                 const char* key_column, double (*key_of)(const SweepPoint&)) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("plot data: cannot open " + path);
    os << key_column << ",method,diff_mean,diff_std\n";
    for (const PointSummary& s : summarize_points(run)) {
        if (!s.has_diffs) continue;
        const std::string key = format_double(key_of(*s.point));
        os << key << ",p," << format_double(s.diff_p_mean) << "," << format_double(s.diff_p_std)
           << "\n";
        os << key << ",z_hat," << format_double(s.diff_zhat_mean) << ","
           << format_double(s.diff_zhat_std) << "\n";
    }
    if (!os) throw IoError("plot data: write failed for " + path);
}

}  // namespace detail

// (noise_level, method, diff_mean, diff_std), two method rows per sweep point.
inline void write_noise_sweep_csv(const std::string& path, const ExperimentRun& run) {
    detail::write_diff_sweep_csv(path, run, "noise_level",
                                 [](const SweepPoint& p) { return p.cfg.data.noise_level; });
}

// Same layout keyed by the proxy dimensionality.
inline void write_proxy_dim_sweep_csv(const std::string& path, const ExperimentRun& run) {
    detail::write_diff_sweep_csv(path, run, "proxy_dim", [](const SweepPoint& p) {
        return static_cast<double>(p.cfg.data.proxy_dim);
    });
}

// Counting-protocol tallies per sweep point: how often the conditional test
// rejected and how often it did not, over the completed trials.
inline void write_iteration_sweep_csv(const std::string& path, const ExperimentRun& run) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("plot data: cannot open " + path);
    os << "iterations,conditioner_dim,trials,rejections,non_rejections\n";
    for (const detail::PointSummary& s : detail::summarize_points(run)) {
        os << s.point->cfg.test.nn.steps << "," << s.point->cfg.test.conditioner_dim << ","
           << s.ok << "," << s.rejections << "," << s.ok - s.rejections << "\n";
    }
    if (!os) throw IoError("plot data: write failed for " + path);
}

}  // namespace deconf

// Command-line front end: generate synthetic bundles, train confounder
// models, run conditional Granger tests, sweep experiment grids, and check
// persisted reports.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deconf/experiment.hpp"

namespace fs = std::filesystem;
using namespace deconf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitPartial = 3;
constexpr int kExitIo = 4;

std::string format17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) throw IoError(std::string(what) + " not found: " + path);
}

struct GenerateArgs {
    std::string dgp = "null";
    std::size_t n = 1;
    std::size_t T = 1000;
    double ploss = 1.0;
    std::size_t dp = 2;
    std::size_t burn_in = 100;
    std::uint64_t seed = 0;
    std::string out = "bundles";
    bool force = false;
};

int cmd_generate(const GenerateArgs& a) {
    if (a.dgp != "null" && a.dgp != "causal")
        throw ConfigError("--dgp: expected null or causal, got '" + a.dgp + "'");
    if (a.n == 0) {
        std::cout << "no bundles requested\n";
        return kExitOk;
    }
    if (fs::exists(a.out) && !a.force)
        throw IoError("output directory " + a.out + " already exists (pass --force to reuse it)");
    fs::create_directories(a.out);

    nlohmann::json files = nlohmann::json::array();
    for (std::size_t i = 0; i < a.n; ++i) {
        DgpConfig d;
        d.T = a.T;
        d.ploss = a.ploss;
        d.d_p = a.dp;
        d.burn_in = a.burn_in;
        d.seed = a.seed + i;
        const TimeSeriesBundle b = a.dgp == "null" ? gen_null(d) : gen_causal(d);
        char name[32];
        std::snprintf(name, sizeof name, "bundle_%03zu.csv", i);
        nlohmann::json extra = {{"dgp", a.dgp}, {"T", a.T},       {"ploss", a.ploss},
                                {"index", i},   {"seed", d.seed}, {"burn_in", a.burn_in}};
        save_csv((fs::path(a.out) / name).string(), b, extra);
        files.push_back(name);
    }
    nlohmann::json manifest = {{"dgp", a.dgp},   {"count", a.n},       {"T", a.T},
                               {"ploss", a.ploss}, {"proxy_dim", a.dp}, {"burn_in", a.burn_in},
                               {"seed", a.seed},  {"files", files}};
    std::ofstream ms(fs::path(a.out) / "manifest.json", std::ios::trunc);
    if (!ms) throw IoError("cannot write manifest in " + a.out);
    ms << manifest.dump(2) << "\n";
    std::cout << "wrote " << a.n << " bundles to " << a.out << "\n";
    return kExitOk;
}

struct TrainArgs {
    std::string config, bundle, out = "run";
    std::optional<std::uint64_t> seed;
    bool resume = false;
    bool force = false;
};

int cmd_train(const TrainArgs& a) {
    require_file(a.config, "config file");
    ExperimentConfig cfg = load_config(a.config);
    if (a.seed) cfg.data.seed = *a.seed;
    require_file(a.bundle, "bundle");
    const TimeSeriesBundle bundle = load_csv(a.bundle);

    const fs::path dir(a.out);
    const fs::path ckpt = dir / "model.ckpt";
    const fs::path log = dir / "training_log.csv";
    const fs::path state_path = dir / "train_state.json";
    TcvaeConfig tc = to_tcvae_config(cfg.model, cfg.data.seed);

    std::size_t completed = 0;
    std::optional<TcvaeModel> warm;
    if (a.resume) {
        require_file(ckpt.string(), "checkpoint");
        require_file(state_path.string(), "training state");
        std::ifstream ss(state_path);
        nlohmann::json state;
        try {
            ss >> state;
            completed = state.at("epochs_completed").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError("unreadable training state " + state_path.string() + ": " + e.what());
        }
        warm = load_model(ckpt.string());
        if (completed >= tc.epochs) {
            std::cout << "nothing to do: " << completed << " epochs already completed of "
                      << tc.epochs << "\n";
            return kExitOk;
        }
    } else {
        if (fs::exists(ckpt) && !a.force)
            throw IoError(ckpt.string() +
                          " already exists (pass --resume to continue or --force to retrain)");
        fs::create_directories(dir);
    }

    TrainResult tr = train(bundle, tc, warm ? &*warm : nullptr, completed);
    save_model(ckpt.string(), tr.model);

    std::ofstream log_os(log, a.resume ? std::ios::app : std::ios::trunc);
    if (!log_os) throw IoError("cannot write " + log.string());
    if (!a.resume) log_os << training_log_header() << "\n";
    for (const TraceRow& r : tr.trace) log_os << training_log_row(r) << "\n";

    const std::size_t T = bundle.length;
    const std::size_t L_w = tc.window == 0 ? T : tc.window;
    const std::size_t per_epoch = T - L_w + 1;
    const std::size_t epochs_done = completed + tr.trace.size() / per_epoch;
    nlohmann::json state = {{"epochs_completed", epochs_done},
                            {"epochs_target", tc.epochs},
                            {"window", L_w},
                            {"seed", cfg.data.seed},
                            {"bundle", a.bundle},
                            {"aborted", tr.aborted}};
    if (!tr.trace.empty()) state["final_elbo"] = tr.trace.back().elbo;
    if (tr.aborted) state["abort_reason"] = tr.abort_reason;
    std::ofstream ss(state_path, std::ios::trunc);
    if (!ss) throw IoError("cannot write " + state_path.string());
    ss << state.dump(2) << "\n";

    if (tr.aborted) {
        std::cout << "training aborted after " << epochs_done
                  << " completed epochs: " << tr.abort_reason << "\n";
        return kExitPartial;
    }
    std::cout << "trained to epoch " << epochs_done << " of " << tc.epochs << ", final elbo "
              << (tr.trace.empty() ? std::string("n/a") : format17(tr.trace.back().elbo)) << "\n";
    return kExitOk;
}

struct TestArgs {
    std::string config, bundle, checkpoint, out;
    std::vector<std::string> conditions;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_test(const TestArgs& a) {
    require_file(a.config, "config file");
    ExperimentConfig cfg = load_config(a.config);
    if (a.seed) cfg.data.seed = *a.seed;
    require_file(a.bundle, "bundle");
    const TimeSeriesBundle bundle = load_csv(a.bundle);

    std::vector<std::string> conditions = a.conditions;
    if (conditions.empty()) conditions.push_back("none");
    for (const std::string& c : conditions)
        if (c != "none" && c != "p" && c != "z_true" && c != "z_hat")
            throw ConfigError("--condition: expected none, p, z_true, or z_hat, got '" + c + "'");

    std::optional<Tensor> z_hat;
    const auto estimated_confounder = [&]() -> const Tensor& {
        if (!z_hat) {
            if (a.checkpoint.empty())
                throw ConfigError(
                    "conditioning on the estimated confounder requires --checkpoint");
            require_file(a.checkpoint, "checkpoint");
            TcvaeModel model = load_model(a.checkpoint);
            Rng rng(cfg.data.seed);
            z_hat = estimate_confounder(bundle, model, 0, rng).mean;
        }
        return *z_hat;
    };

    std::vector<std::string> lines;
    for (const std::string& c : conditions) {
        std::vector<NamedSeries> cond;
        if (c == "p") {
            cond = columns_of(bundle.p, "p");
        } else if (c == "z_true") {
            if (!bundle.z_true)
                throw ConfigError("bundle " + a.bundle + " has no stored confounder columns");
            cond = columns_of(*bundle.z_true, "z");
        } else if (c == "z_hat") {
            cond = columns_of(estimated_confounder(), "z_hat");
        }
        lines.push_back(granger_csv_row(run_granger(cfg, bundle, std::move(cond), cfg.data.seed)));
    }

    std::cout << granger_csv_header() << "\n";
    for (const std::string& l : lines) std::cout << l << "\n";
    if (!a.out.empty()) {
        if (fs::exists(a.out) && !a.force)
            throw IoError(a.out + " already exists (pass --force to overwrite)");
        std::ofstream os(a.out, std::ios::trunc);
        if (!os) throw IoError("cannot write " + a.out);
        os << granger_csv_header() << "\n";
        for (const std::string& l : lines) os << l << "\n";
    }
    return kExitOk;
}

struct ExperimentArgs {
    std::string config, out;
    std::size_t jobs = 1;
    std::optional<std::uint64_t> seed;
    bool force = false;
    bool quiet = false;
};

int cmd_experiment(const ExperimentArgs& a) {
    require_file(a.config, "config file");
    ExperimentConfig cfg = load_config(a.config);
    if (a.seed) cfg.data.seed = *a.seed;
    if (cfg.sweep.axes.empty())
        throw ConfigError("sweep.axes: the experiment command needs at least one axis");
    if (a.jobs < 1) throw ConfigError("--jobs: must be at least 1");

    const std::string dir = resolve_output_dir(cfg, a.out);
    cfg.output.directory = dir;
    if (fs::exists(dir) && !a.force)
        throw IoError("output directory " + dir + " already exists (pass --force to reuse it)");
    fs::create_directories(dir);

    {
        std::ofstream os(fs::path(dir) / "run_config.json", std::ios::trunc);
        if (!os) throw IoError("cannot write run_config.json in " + dir);
        os << config_json(cfg).dump(2) << "\n";
    }

    const ExperimentRun run = run_experiment(cfg, a.jobs, a.quiet ? nullptr : &std::cerr);
    const ExperimentReport report = build_report(run);
    for (const std::string& f : cfg.output.formats) {
        if (f == "csv") write_report_csv((fs::path(dir) / "report.csv").string(), report);
        if (f == "json") write_report_json((fs::path(dir) / "report.json").string(), report);
    }
    if (cfg.sweep.protocol == "count") {
        write_iteration_sweep_csv((fs::path(dir) / "iteration_sweep.csv").string(), run);
    } else {
        for (const SweepAxis& axis : cfg.sweep.axes) {
            if (axis.name == "noise_level")
                write_noise_sweep_csv((fs::path(dir) / "noise_sweep.csv").string(), run);
            if (axis.name == "proxy_dim")
                write_proxy_dim_sweep_csv((fs::path(dir) / "proxy_dim_sweep.csv").string(), run);
        }
    }

    std::cout << run.points.size() << " sweep points x " << cfg.data.trials << " trials, "
              << run.failed << " failed; results in " << dir << "\n";
    return run.failed == 0 ? kExitOk : kExitPartial;
}

int cmd_report(const std::string& path) {
    require_file(path, "report");
    const ExperimentReport rep = load_report(path);
    verify_aggregates(rep);
    std::size_t trial_rows = 0, aggregate_rows = 0, failed = 0;
    std::cout << report_csv_header(rep.axis_names) << "\n";
    for (const ReportRow& r : rep.rows) {
        if (r.kind == "trial") {
            ++trial_rows;
            if (!r.error.empty()) ++failed;
            continue;
        }
        ++aggregate_rows;
        std::cout << report_csv_row(r) << "\n";
    }
    std::cout << "report is internally consistent: " << trial_rows << " trial rows ("
              << failed << " failed), " << aggregate_rows << " aggregate rows\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Confounder-aware Granger analysis toolkit"};
    app.require_subcommand(1);

    GenerateArgs gen;
    CLI::App* cgen = app.add_subcommand("generate", "Write synthetic time-series bundles");
    cgen->add_option("--dgp", gen.dgp, "Generating process: null or causal");
    cgen->add_option("--n", gen.n, "Number of bundles");
    cgen->add_option("--T", gen.T, "Series length");
    cgen->add_option("--ploss", gen.ploss, "Proxy noise scale of the generator");
    cgen->add_option("--dp", gen.dp, "Number of proxy columns");
    cgen->add_option("--burn-in", gen.burn_in, "Discarded warm-up steps");
    cgen->add_option("--seed", gen.seed, "Seed of the first bundle; bundle i uses seed + i");
    cgen->add_option("--out", gen.out, "Output directory");
    cgen->add_flag("--force", gen.force, "Write into an existing directory");

    TrainArgs train_args;
    CLI::App* ctrain = app.add_subcommand("train", "Fit the confounder model to one bundle");
    ctrain->add_option("--config", train_args.config, "Config file")->required();
    ctrain->add_option("--bundle", train_args.bundle, "Bundle CSV")->required();
    ctrain->add_option("--out", train_args.out, "Run directory for checkpoint, log, and state");
    ctrain->add_option("--seed", train_args.seed, "Override the configured seed");
    ctrain->add_flag("--resume", train_args.resume,
                     "Continue from the checkpoint in the run directory");
    ctrain->add_flag("--force", train_args.force, "Overwrite an existing checkpoint");

    TestArgs test_args;
    CLI::App* ctest = app.add_subcommand("test", "Run conditional Granger tests on one bundle");
    ctest->add_option("--config", test_args.config, "Config file")->required();
    ctest->add_option("--bundle", test_args.bundle, "Bundle CSV")->required();
    ctest->add_option("--checkpoint", test_args.checkpoint,
                      "Trained model, needed for the z_hat conditioning set");
    ctest->add_option("--condition", test_args.conditions,
                      "Conditioning set: none, p, z_true, or z_hat (repeatable)")
        ->delimiter(',');
    ctest->add_option("--seed", test_args.seed, "Override the configured seed");
    ctest->add_option("--out", test_args.out, "Also write the result rows to this CSV");
    ctest->add_flag("--force", test_args.force, "Overwrite an existing output file");

    ExperimentArgs exp_args;
    CLI::App* cexp = app.add_subcommand("experiment", "Run a sweep grid and write the report");
    cexp->add_option("--config", exp_args.config, "Config file")->required();
    cexp->add_option("--out", exp_args.out, "Output directory (overrides config and environment)");
    cexp->add_option("--jobs", exp_args.jobs, "Concurrent trials");
    cexp->add_option("--seed", exp_args.seed, "Override the configured base seed");
    cexp->add_flag("--force", exp_args.force, "Write into an existing directory");
    cexp->add_flag("--quiet", exp_args.quiet, "Suppress per-trial progress on stderr");

    std::string report_path;
    CLI::App* crep = app.add_subcommand("report", "Check a report file and print its aggregates");
    crep->add_option("report", report_path, "Report CSV produced by the experiment command")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (cgen->parsed()) return cmd_generate(gen);
        if (ctrain->parsed()) return cmd_train(train_args);
        if (ctest->parsed()) return cmd_test(test_args);
        if (cexp->parsed()) return cmd_experiment(exp_args);
        if (crep->parsed()) return cmd_report(report_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ReportError& e) {
        std::cerr << "report error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}

// smoe -- command-line front end: theorem verification, training, forgetting,
// expert sweeps, router-moment tables, and parameter/FLOPs accounting, all
// driven by JSON config files with mandatory seeds.

#include "smoe/accounting.hpp"
#include "smoe/csv.hpp"
#include "smoe/experiments.hpp"
#include "smoe/moe_layer.hpp"
#include "smoe/training.hpp"
#include "smoe/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace smoe;

namespace {

constexpr int kSchemaVersion = 1;

struct CliOptions {
    std::string config_path;
    std::string out_dir = "runs/last";
    std::optional<std::uint64_t> seed_override;
    unsigned jobs = 1;
    bool check_schemas = false;
};

[[noreturn]] void fail(const std::string& msg, int code = 1) {
    std::cerr << "error: " << msg << "\n";
    std::exit(code);
}

json load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("cannot open config " + path);
    json cfg;
    try {
        is >> cfg;
    } catch (const json::parse_error& e) {
        fail("config " + path + " is not valid JSON: " + e.what());
    }
    return cfg;
}

void require_keys(const json& obj, const std::string& where, const std::set<std::string>& required,
                  const std::set<std::string>& optional = {}) {
    if (!obj.is_object()) fail(where + " must be a JSON object");
    for (const auto& key : required)
        if (!obj.contains(key)) fail(where + ": missing required field '" + key + "'");
    for (const auto& item : obj.items()) {
        if (!required.count(item.key()) && !optional.count(item.key()))
            fail(where + ": unknown field '" + item.key() + "'");
    }
}

void check_schema_version(const json& cfg) {
    if (cfg.at("schema_version").get<int>() != kSchemaVersion)
        fail("unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");
}

ScaleSpec parse_scale(const json& v, const std::string& where) {
    if (v.is_number()) return ScaleSpec::fixed(v.get<double>());
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        if (s == "auto") return ScaleSpec::automatic();
        if (s == "auto-per-expert") return ScaleSpec::auto_per_expert();
        fail(where + ": scale must be a number, \"auto\", or \"auto-per-expert\"");
    }
    fail(where + ": bad scale value");
    return {};
}

SegmentScheme parse_scheme(const json& v, std::uint64_t seed, const std::string& where) {
    const std::string s = v.get<std::string>();
    if (s == "original") return SegmentScheme::original();
    if (s == "principal") return SegmentScheme::principal();
    if (s == "minor") return SegmentScheme::minor();
    if (s == "random") return SegmentScheme::random(seed);
    fail(where + ": unknown scheme '" + s + "'");
    return {};
}

LayerConfig parse_layer(const json& obj, std::uint64_t seed, const std::string& where) {
    require_keys(obj, where,
                 {"m", "n", "total_rank", "n_experts", "top_k", "scale", "rho", "eta", "scheme"},
                 {"per_expert_scaling", "balance_coefficient", "router_init", "spectral_init"});
    LayerConfig lc;
    lc.m = obj.at("m").get<Index>();
    lc.n = obj.at("n").get<Index>();
    lc.total_rank = obj.at("total_rank").get<Index>();
    lc.n_experts = obj.at("n_experts").get<Index>();
    lc.top_k = obj.at("top_k").get<Index>();
    lc.scale = parse_scale(obj.at("scale"), where);
    lc.rho = obj.at("rho").get<double>();
    lc.eta = obj.at("eta").get<double>();
    lc.scheme = parse_scheme(obj.at("scheme"), seed, where);
    if (obj.contains("per_expert_scaling")) lc.per_expert_scaling = obj.at("per_expert_scaling").get<bool>();
    if (obj.contains("balance_coefficient"))
        lc.balance_coefficient = obj.at("balance_coefficient").get<double>();
    if (obj.contains("spectral_init")) lc.spectral_init = obj.at("spectral_init").get<bool>();
    if (obj.contains("router_init")) {
        const std::string r = obj.at("router_init").get<std::string>();
        if (r == "gaussian") lc.router_init = LayerConfig::RouterInit::Gaussian;
        else if (r == "symmetric") lc.router_init = LayerConfig::RouterInit::Symmetric;
        else fail(where + ": unknown router_init '" + r + "'");
    }
    return lc;
}

TrainConfig parse_train(const json& obj, std::uint64_t seed, const std::string& where) {
    require_keys(obj, where, {"lr", "steps", "batch_size", "optimizer", "balance_coefficient"},
                 {"eval_every", "eval_samples", "momentum"});
    TrainConfig tc;
    tc.lr = obj.at("lr").get<double>();
    tc.steps = obj.at("steps").get<Index>();
    tc.batch_size = obj.at("batch_size").get<Index>();
    tc.seed = seed;
    const std::string opt = obj.at("optimizer").get<std::string>();
    if (opt == "sgd") tc.optimizer = Optimizer::Sgd;
    else if (opt == "sgd-momentum") tc.optimizer = Optimizer::SgdMomentum;
    else fail(where + ": optimizer must be 'sgd' or 'sgd-momentum'");
    tc.balance_coefficient = obj.at("balance_coefficient").get<double>();
    if (obj.contains("eval_every")) tc.eval_every = obj.at("eval_every").get<Index>();
    if (obj.contains("momentum")) tc.momentum = obj.at("momentum").get<double>();
    if (obj.contains("eval_samples")) tc.eval_samples = obj.at("eval_samples").get<Index>();
    return tc;
}

std::vector<std::uint64_t> parse_seeds(const json& cfg) {
    std::vector<std::uint64_t> seeds;
    for (const auto& s : cfg.at("seeds")) seeds.push_back(s.get<std::uint64_t>());
    if (seeds.empty()) fail("config: 'seeds' must be non-empty");
    return seeds;
}

void prepare_out_dir(const CliOptions& opts) {
    std::error_code ec;
    fs::create_directories(opts.out_dir, ec);
    if (ec) fail("cannot create output directory " + opts.out_dir + ": " + ec.message());
}

void copy_config(const CliOptions& opts) {
    std::error_code ec;
    fs::copy_file(opts.config_path, fs::path(opts.out_dir) / "config.json",
                  fs::copy_options::overwrite_existing, ec);
    if (ec) fail("cannot copy config into " + opts.out_dir + ": " + ec.message());
}

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void write_summary(const CliOptions& opts, const std::string& command, json results,
                   const std::vector<std::string>& artifacts, double duration_ms) {
    json summary;
    summary["schema_version"] = kSchemaVersion;
    summary["command"] = command;
    summary["generated_at"] = timestamp_utc();  // timestamps live here only
    summary["duration_ms"] = duration_ms;
    summary["results"] = std::move(results);
    summary["artifacts"] = artifacts;
    std::ofstream os(fs::path(opts.out_dir) / "summary.json");
    if (!os) fail("cannot write summary.json in " + opts.out_dir);
    os << summary.dump(2) << "\n";
}

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
            .count();
    }
};

// --- schema-check mode --------------------------------------------------------

bool check_csv_file(const fs::path& path, const std::vector<std::string>& prefix) {
    if (!fs::exists(path)) {
        std::cerr << "schema: missing " << path << "\n";
        return false;
    }
    std::string err;
    CsvTable table = read_csv(path.string());
    if (!csv_matches_schema(table, prefix, &err)) {
        std::cerr << "schema: " << path << ": " << err << "\n";
        return false;
    }
    return true;
}

bool check_summary_file(const fs::path& dir, const std::string& command) {
    const fs::path path = dir / "summary.json";
    if (!fs::exists(path)) {
        std::cerr << "schema: missing " << path << "\n";
        return false;
    }
    std::ifstream is(path);
    json summary;
    try {
        is >> summary;
    } catch (const json::parse_error& e) {
        std::cerr << "schema: " << path << ": " << e.what() << "\n";
        return false;
    }
    for (const char* key : {"schema_version", "command", "generated_at", "results", "artifacts"}) {
        if (!summary.contains(key)) {
            std::cerr << "schema: " << path << ": missing key '" << key << "'\n";
            return false;
        }
    }
    if (summary["command"].get<std::string>() != command) {
        std::cerr << "schema: " << path << ": command mismatch\n";
        return false;
    }
    return true;
}

int run_schema_check(const CliOptions& opts, const std::string& command) {
    const fs::path dir(opts.out_dir);
    bool ok = check_summary_file(dir, command);
    if (command == "verify") {
        ok &= check_csv_file(dir / "verify_report.csv",
                             {"check", "required", "passed", "measured", "tolerance", "detail"});
    } else if (command == "train") {
        ok &= check_csv_file(dir / "train_runs.csv", {"method", "seed", "final_eval_loss"});
    } else if (command == "forget") {
        ok &= check_csv_file(dir / "forget_evals.csv",
                             {"method", "seed", "phase", "task", "loss", "retention"});
        ok &= check_csv_file(dir / "forget_degradation.csv", {"method", "seed", "task", "degradation"});
    } else if (command == "sweep") {
        ok &= check_csv_file(dir / "sweep.csv",
                             {"n_experts", "top_k", "status", "reason", "final_eval_loss"});
    } else if (command == "moments") {
        ok &= check_csv_file(dir / "moments.csv",
                             {"expert", "empirical_mean", "empirical_variance", "theoretical_mean",
                              "theoretical_variance"});
    } else if (command == "account") {
        ok &= check_csv_file(dir / "account.csv",
                             {"preset", "method", "trainable_params", "proportion_percent", "flops"});
    }
    std::cout << (ok ? "schemas ok" : "schema check failed") << "\n";
    return ok ? 0 : 1;
}

// --- commands -------------------------------------------------------------------

int cmd_verify(const CliOptions& opts) {
    if (opts.check_schemas) return run_schema_check(opts, "verify");
    Stopwatch timer;
    json cfg = load_config(opts.config_path);
    require_keys(cfg, "verify config", {"schema_version", "seed"});
    check_schema_version(cfg);
    const std::uint64_t seed = opts.seed_override.value_or(cfg.at("seed").get<std::uint64_t>());

    prepare_out_dir(opts);
    copy_config(opts);
    std::vector<CheckResult> results = run_verification_suite(seed);

    CsvWriter csv({"check", "required", "passed", "measured", "tolerance", "detail"});
    int failures = 0;
    for (const CheckResult& r : results) {
        const char* status = !r.required ? "INFO" : (r.passed ? "PASS" : "FAIL");
        std::printf("[%s] %-36s measured=%-12.6g tol=%-10.6g %s\n", status, r.name.c_str(),
                    r.measured, r.tolerance, r.detail.c_str());
        if (r.required && !r.passed) ++failures;
        csv.cell(r.name)
            .cell(r.required ? "1" : "0")
            .cell(r.passed ? "1" : "0")
            .cell(r.measured)
            .cell(r.tolerance)
            .cell(r.detail)
            .end_row();
    }
    csv.save((fs::path(opts.out_dir) / "verify_report.csv").string());

    json summary_results;
    summary_results["failures"] = failures;
    summary_results["checks"] = results.size();
    write_summary(opts, "verify", summary_results, {"verify_report.csv"}, timer.ms());
    if (failures) {
        std::cout << failures << " check(s) failed\n";
        return 2;
    }
    std::cout << "all " << results.size() << " checks passed\n";
    return 0;
}

int cmd_train(const CliOptions& opts) {
    if (opts.check_schemas) return run_schema_check(opts, "train");
    Stopwatch timer;
    json cfg = load_config(opts.config_path);
    require_keys(cfg, "train config",
                 {"schema_version", "seed", "layer", "task", "train", "methods", "seeds"});
    check_schema_version(cfg);
    const std::uint64_t master_seed =
        opts.seed_override.value_or(cfg.at("seed").get<std::uint64_t>());

    const json& task_obj = cfg.at("task");
    require_keys(task_obj, "task",
                 {"spectrum_max", "spectrum_min", "band_starts", "band_width", "gain", "noise_std"});

    TrainOrderingConfig exp;
    LayerConfig lc = parse_layer(cfg.at("layer"), master_seed, "layer");
    exp.m = lc.m;
    exp.n = lc.n;
    exp.n_experts = lc.n_experts;
    exp.top_k = lc.top_k;
    exp.total_rank = lc.total_rank;
    exp.rho = lc.rho;
    exp.eta = lc.eta;
    exp.spectrum_max = task_obj.at("spectrum_max").get<double>();
    exp.spectrum_min = task_obj.at("spectrum_min").get<double>();
    const auto band_starts = task_obj.at("band_starts").get<std::vector<Index>>();
    if (band_starts.size() != 2) fail("task.band_starts must list exactly two segment starts");
    exp.band_start = band_starts[0];
    exp.band_start2 = band_starts[1];
    exp.band_width = task_obj.at("band_width").get<Index>();
    exp.gain = task_obj.at("gain").get<double>();
    exp.noise_std = task_obj.at("noise_std").get<double>();
    exp.train = parse_train(cfg.at("train"), master_seed, "train");
    exp.seeds = parse_seeds(cfg);
    exp.methods.clear();
    for (const auto& m : cfg.at("methods"))
        exp.methods.push_back(adapter_method_from_string(m.get<std::string>()));

    prepare_out_dir(opts);
    copy_config(opts);
    TrainOrderingResult result = run_train_ordering(exp);

    std::vector<std::string> artifacts = {"train_runs.csv"};
    CsvWriter runs({"method", "seed", "final_eval_loss"});
    for (const MethodRunResult& run : result.runs) {
        runs.cell(to_string(run.method)).cell(run.seed).cell(run.final_eval).end_row();
        std::vector<std::string> header = {"step", "task_loss", "balance_loss",
                                           "adapter_grad_norm", "router_grad_norm"};
        for (Index i = 0; i < run.log.n_experts; ++i)
            header.push_back("load_" + std::to_string(i));
        CsvWriter log_csv(header);
        for (std::size_t t = 0; t < run.log.task_loss.size(); ++t) {
            log_csv.cell(static_cast<Index>(t))
                .cell(run.log.task_loss[t])
                .cell(run.log.balance_loss[t])
                .cell(run.log.adapter_grad_norm[t])
                .cell(run.log.router_grad_norm[t]);
            for (Index i = 0; i < run.log.n_experts; ++i)
                log_csv.cell(run.log.load_fractions[t](i));
            log_csv.end_row();
        }
        const std::string name = std::string("trainlog_") + to_string(run.method) + "_" +
                                 std::to_string(run.seed) + ".csv";
        log_csv.save((fs::path(opts.out_dir) / name).string());
        artifacts.push_back(name);
        CsvWriter eval_csv({"step", "eval_loss"});
        for (const auto& [step, loss] : run.log.evals) eval_csv.cell(step).cell(loss).end_row();
        const std::string ev_name = std::string("eval_") + to_string(run.method) + "_" +
                                    std::to_string(run.seed) + ".csv";
        eval_csv.save((fs::path(opts.out_dir) / ev_name).string());
        artifacts.push_back(ev_name);
    }
    runs.save((fs::path(opts.out_dir) / "train_runs.csv").string());

    json medians;
    for (const auto& [method, value] : result.median_final) medians[to_string(method)] = value;
    write_summary(opts, "train", json{{"median_final_eval", medians}}, artifacts, timer.ms());
    std::cout << "train: " << result.runs.size() << " runs complete; medians written to summary\n";
    return 0;
}

int cmd_forget(const CliOptions& opts) {
    if (opts.check_schemas) return run_schema_check(opts, "forget");
    Stopwatch timer;
    json cfg = load_config(opts.config_path);
    require_keys(cfg, "forget config",
                 {"schema_version", "seed", "layer", "tasks", "train", "methods", "seeds"});
    check_schema_version(cfg);
    const std::uint64_t master_seed =
        opts.seed_override.value_or(cfg.at("seed").get<std::uint64_t>());

    const json& tasks_obj = cfg.at("tasks");
    require_keys(tasks_obj, "tasks", {"count", "block_rank", "domain_dim"},
                 {"top_sigma", "sigma_step", "tail_max", "tail_min", "ambient_std", "noise_std"});

    ForgettingConfig exp;
    LayerConfig lc = parse_layer(cfg.at("layer"), master_seed, "layer");
    exp.m = lc.m;
    exp.n = lc.n;
    exp.n_experts = lc.n_experts;
    exp.top_k = lc.top_k;
    exp.total_rank = lc.total_rank;
    exp.rho = lc.rho;
    exp.eta = lc.eta;
    exp.n_tasks = tasks_obj.at("count").get<Index>();
    exp.tasks.block_rank = tasks_obj.at("block_rank").get<Index>();
    exp.tasks.domain_dim = tasks_obj.at("domain_dim").get<Index>();
    if (tasks_obj.contains("top_sigma")) exp.tasks.top_sigma = tasks_obj.at("top_sigma").get<double>();
    if (tasks_obj.contains("sigma_step")) exp.tasks.sigma_step = tasks_obj.at("sigma_step").get<double>();
    if (tasks_obj.contains("tail_max")) exp.tasks.tail_max = tasks_obj.at("tail_max").get<double>();
    if (tasks_obj.contains("tail_min")) exp.tasks.tail_min = tasks_obj.at("tail_min").get<double>();
    if (tasks_obj.contains("ambient_std"))
        exp.tasks.ambient_std = tasks_obj.at("ambient_std").get<double>();
    if (tasks_obj.contains("noise_std")) exp.tasks.noise_std = tasks_obj.at("noise_std").get<double>();
    exp.train = parse_train(cfg.at("train"), master_seed, "train");
    exp.seeds = parse_seeds(cfg);
    exp.methods.clear();
    for (const auto& m : cfg.at("methods"))
        exp.methods.push_back(adapter_method_from_string(m.get<std::string>()));

    prepare_out_dir(opts);
    copy_config(opts);
    ForgettingResult result = run_forgetting(exp);

    CsvWriter evals({"method", "seed", "phase", "task", "loss", "retention"});
    CsvWriter degradation({"method", "seed", "task", "degradation"});
    for (const ForgettingRunResult& run : result.runs) {
        const RetentionReport& rep = run.report;
        for (Index p = 0; p < rep.loss.rows(); ++p)
            for (Index t = 0; t < rep.loss.cols(); ++t)
                evals.cell(to_string(run.method))
                    .cell(run.seed)
                    .cell(p)
                    .cell(rep.task_names[static_cast<std::size_t>(t)])
                    .cell(rep.loss(p, t))
                    .cell(rep.retention(p, t))
                    .end_row();
        for (std::size_t t = 0; t < rep.degradation.size(); ++t)
            degradation.cell(to_string(run.method))
                .cell(run.seed)
                .cell(rep.task_names[t])
                .cell(rep.degradation[t])
                .end_row();
    }
    evals.save((fs::path(opts.out_dir) / "forget_evals.csv").string());
    degradation.save((fs::path(opts.out_dir) / "forget_degradation.csv").string());

    json medians;
    for (const auto& [method, value] : result.median_degradation)
        medians[to_string(method)] = value;
    write_summary(opts, "forget", json{{"median_degradation_task0", medians}},
                  {"forget_evals.csv", "forget_degradation.csv"}, timer.ms());
    std::cout << "forget: " << result.runs.size() << " runs complete\n";
    return 0;
}

int cmd_sweep(const CliOptions& opts) {
    if (opts.check_schemas) return run_schema_check(opts, "sweep");
    Stopwatch timer;
    json cfg = load_config(opts.config_path);
    require_keys(cfg, "sweep config",
                 {"schema_version", "seed", "n_experts_grid", "top_k_grid", "total_rank", "layer",
                  "task", "train"});
    check_schema_version(cfg);
    const std::uint64_t seed = opts.seed_override.value_or(cfg.at("seed").get<std::uint64_t>());

    const json& layer_obj = cfg.at("layer");
    require_keys(layer_obj, "layer", {"m", "n", "scale", "rho", "eta", "scheme"},
                 {"balance_coefficient"});
    LayerConfig lc;
    lc.m = layer_obj.at("m").get<Index>();
    lc.n = layer_obj.at("n").get<Index>();
    lc.scale = parse_scale(layer_obj.at("scale"), "layer");
    lc.rho = layer_obj.at("rho").get<double>();
    lc.eta = layer_obj.at("eta").get<double>();
    lc.scheme = parse_scheme(layer_obj.at("scheme"), seed, "layer");
    if (layer_obj.contains("balance_coefficient"))
        lc.balance_coefficient = layer_obj.at("balance_coefficient").get<double>();

    const json& task_obj = cfg.at("task");
    require_keys(task_obj, "task",
                 {"spectrum_max", "spectrum_min", "band_start", "band_width", "gain", "noise_std"});

    TrainConfig tc = parse_train(cfg.at("train"), seed, "train");
    const Index total_rank = cfg.at("total_rank").get<Index>();
    const auto n_grid = cfg.at("n_experts_grid").get<std::vector<Index>>();
    const auto k_grid = cfg.at("top_k_grid").get<std::vector<Index>>();

    const Matrix w0 = make_pretrained_base(lc.m, lc.n, task_obj.at("spectrum_max").get<double>(),
                                           task_obj.at("spectrum_min").get<double>(),
                                           mix_seed(seed, 50));
    TeacherTask task =
        make_adaptation_task(w0, task_obj.at("band_start").get<Index>(),
                             task_obj.at("band_width").get<Index>(),
                             task_obj.at("gain").get<double>(),
                             task_obj.at("noise_std").get<double>(), mix_seed(seed, 51));

    prepare_out_dir(opts);
    copy_config(opts);
    std::vector<SweepCell> cells = expert_sweep(n_grid, k_grid, total_rank, w0, task, lc, tc);

    CsvWriter csv({"n_experts", "top_k", "status", "reason", "final_eval_loss"});
    int completed = 0;
    for (const SweepCell& cell : cells) {
        csv.cell(cell.n_experts)
            .cell(cell.top_k)
            .cell(cell.completed ? "ok" : "skipped")
            .cell(cell.skip_reason)
            .cell(cell.completed ? format_double(cell.final_eval) : std::string(""))
            .end_row();
        completed += cell.completed ? 1 : 0;
    }
    csv.save((fs::path(opts.out_dir) / "sweep.csv").string());
    write_summary(opts, "sweep",
                  json{{"cells", cells.size()}, {"completed", completed}}, {"sweep.csv"},
                  timer.ms());
    std::cout << "sweep: " << completed << "/" << cells.size() << " cells completed\n";
    return 0;
}

int cmd_moments(const CliOptions& opts) {
    if (opts.check_schemas) return run_schema_check(opts, "moments");
    Stopwatch timer;
    json cfg = load_config(opts.config_path);
    require_keys(cfg, "moments config",
                 {"schema_version", "seed", "n_experts", "top_k", "samples"}, {"logit_sigma"});
    check_schema_version(cfg);
    const std::uint64_t seed = opts.seed_override.value_or(cfg.at("seed").get<std::uint64_t>());
    const Index n_experts = cfg.at("n_experts").get<Index>();
    const Index top_k = cfg.at("top_k").get<Index>();
    const Index samples = cfg.at("samples").get<Index>();
    const double sigma = cfg.contains("logit_sigma") ? cfg.at("logit_sigma").get<double>() : 1.0;

    GateConfig gate{n_experts, top_k, 0.0};
    MomentEstimate est = estimate_moments(gate, gaussian_logits(sigma), samples, seed);
    const auto [mean_th, var_th] = theoretical_moments(n_experts, top_k);

    prepare_out_dir(opts);
    copy_config(opts);
    CsvWriter csv({"expert", "empirical_mean", "empirical_variance", "theoretical_mean",
                   "theoretical_variance"});
    for (Index i = 0; i < n_experts; ++i)
        csv.cell(i).cell(est.mean(i)).cell(est.variance(i)).cell(mean_th).cell(var_th).end_row();
    csv.save((fs::path(opts.out_dir) / "moments.csv").string());
    write_summary(opts, "moments",
                  json{{"max_mean_error", (est.mean.array() - mean_th).abs().maxCoeff()},
                       {"theoretical_mean", mean_th},
                       {"theoretical_variance", var_th}},
                  {"moments.csv"}, timer.ms());
    std::cout << "moments: theoretical mean " << format_double(mean_th) << ", table written\n";
    return 0;
}

int cmd_account(const CliOptions& opts) {
    if (opts.check_schemas) return run_schema_check(opts, "account");
    Stopwatch timer;
    json cfg = load_config(opts.config_path);
    require_keys(cfg, "account config", {"schema_version", "seed", "presets", "batch", "seq"});
    check_schema_version(cfg);
    const std::int64_t batch = cfg.at("batch").get<std::int64_t>();
    const std::int64_t seq = cfg.at("seq").get<std::int64_t>();

    prepare_out_dir(opts);
    copy_config(opts);
    CsvWriter csv({"preset", "method", "trainable_params", "proportion_percent", "flops"});
    for (const auto& preset_name : cfg.at("presets")) {
        ArchPreset preset = preset_from_string(preset_name.get<std::string>());
        for (CountMethod method :
             {CountMethod::FullFt, CountMethod::FullFtMoe, CountMethod::Lora, CountMethod::Dora,
              CountMethod::HydraLora, CountMethod::AdaMole, CountMethod::MoeLora}) {
            std::string params, proportion;
            try {
                ParamCount count = closed_form_params(preset, method);
                params = format_double(count.trainable);
                proportion = format_double(count.proportion_percent);
            } catch (const InvalidInput&) {
                // combination not printed for this shape; leave the cells empty
            }
            std::string flops;
            if (preset.vocab) {
                if (method == CountMethod::FullFtMoe)
                    flops = format_double(flops_forward(preset, FlopsMethod::FullFtMoe, batch, seq));
                else if (method == CountMethod::MoeLora)
                    flops = format_double(flops_forward(preset, FlopsMethod::LoraMoe, batch, seq));
            }
            if (params.empty() && flops.empty()) continue;
            csv.cell(preset.name).cell(to_string(method)).cell(params).cell(proportion).cell(flops)
                .end_row();
        }
    }
    csv.save((fs::path(opts.out_dir) / "account.csv").string());
    write_summary(opts, "account", json::object(), {"account.csv"}, timer.ms());
    std::cout << "account: table written\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spectral LoRA mixture-of-experts numerics and experiments"};
    app.require_subcommand(1);

    CliOptions opts;
    auto add_common = [&](CLI::App* sub, bool with_jobs = false) {
        sub->add_option("--config", opts.config_path, "JSON config file for this run");
        sub->add_option("--out", opts.out_dir, "output directory (one per run)");
        sub->add_option("--seed", opts.seed_override, "override the config seed");
        if (with_jobs) sub->add_option("--jobs", opts.jobs, "worker count for sweep cells");
        sub->add_flag("--check-schemas", opts.check_schemas,
                      "validate the artifacts in --out instead of recomputing");
    };

    CLI::App* verify = app.add_subcommand("verify", "run the theorem-verification suite");
    add_common(verify);
    CLI::App* train = app.add_subcommand("train", "train adapter methods on a synthetic task");
    add_common(train);
    CLI::App* forget = app.add_subcommand("forget", "sequential-task forgetting experiment");
    add_common(forget);
    CLI::App* sweep = app.add_subcommand("sweep", "expert-count / top-k grid at fixed total rank");
    add_common(sweep, true);
    CLI::App* moments = app.add_subcommand("moments", "router moment table (empirical vs theory)");
    add_common(moments);
    CLI::App* account = app.add_subcommand("account", "parameter and FLOPs accounting tables");
    add_common(account);

    CLI11_PARSE(app, argc, argv);

    try {
        if (!opts.check_schemas && opts.config_path.empty())
            fail("--config is required (or use --check-schemas with --out)");
        if (verify->parsed()) return cmd_verify(opts);
        if (train->parsed()) return cmd_train(opts);
        if (forget->parsed()) return cmd_forget(opts);
        if (sweep->parsed()) return cmd_sweep(opts);
        if (moments->parsed()) return cmd_moments(opts);
        if (account->parsed()) return cmd_account(opts);
    } catch (const TrainingDiverged& e) {
        std::cerr << "error: training diverged at step " << e.step << ": " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

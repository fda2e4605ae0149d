// experiments.hpp -- the documented desk-scale experiment setups: the
// convergence comparison across adapter methods and the sequential-task
// forgetting protocol, both reported as medians over seeds.
#pragma once

#include "smoe/core.hpp"
#include "smoe/moe_layer.hpp"
#include "smoe/training.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <vector>

namespace smoe {

inline double median(std::vector<double> values) {
    if (values.empty()) throw InvalidInput("median: empty sample");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// Base weight with a linearly decreasing spectrum and random singular bases.
inline Matrix make_pretrained_base(Index m, Index n, double smax, double smin,
                                   std::uint64_t seed) {
    Rng rng = make_rng(seed);
    const Index h = std::min(m, n);
    Matrix u = random_orthonormal(m, h, rng);
    Matrix v = random_orthonormal(n, h, rng);
    Vector sv(h);
    for (Index i = 0; i < h; ++i)
        sv(i) = smax + (smin - smax) * static_cast<double>(i) /
                           static_cast<double>(std::max<Index>(h - 1, 1));
    return u * sv.asDiagonal() * v.transpose();
}

// Convergence comparison (fixed step budget): a mid-spectrum band of the
// pretrained weight is amplified, so the needed update lies in segments that
// the evenly spread spectral experts cover but a principal-segment single
// adapter does not.
struct TrainOrderingConfig {
    Index m = 64;
    Index n = 64;
    Index n_experts = 8;
    Index top_k = 2;
    Index total_rank = 32;
    double rho = 10.0;
    double eta = 1.0;
    double spectrum_max = 20.0;
    double spectrum_min = 4.0;
    Index band_start = 40;   // first amplified segment (expert 6 of 8)
    Index band_start2 = 48;  // second amplified segment (expert 7 of 8)
    Index band_width = 4;
    double gain = 1.5;
    double noise_std = 0.0;
    TrainConfig train{1e-3, 300, 16, 0, Optimizer::Sgd, 0.9, 1e-3, 100, 256};
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::vector<AdapterMethod> methods = {AdapterMethod::SpectralMoe, AdapterMethod::ZeroInitMoe,
                                          AdapterMethod::SingleLora};
};

struct MethodRunResult {
    AdapterMethod method;
    std::uint64_t seed = 0;
    double final_eval = 0.0;
    TrainLog log;
};

struct TrainOrderingResult {
    std::vector<MethodRunResult> runs;
    std::map<AdapterMethod, double> median_final;
};

inline LayerConfig train_ordering_layer_template(const TrainOrderingConfig& cfg) {
    LayerConfig lc;
    lc.m = cfg.m;
    lc.n = cfg.n;
    lc.total_rank = cfg.total_rank;
    lc.n_experts = cfg.n_experts;
    lc.top_k = cfg.top_k;
    lc.scale = ScaleSpec::auto_per_expert();
    lc.rho = cfg.rho;
    lc.eta = cfg.eta;
    lc.scheme = SegmentScheme::original();
    lc.balance_coefficient = cfg.train.balance_coefficient;
    return lc;
}

inline TeacherTask train_ordering_task(const TrainOrderingConfig& cfg, const Matrix& w0,
                                       std::uint64_t seed) {
    SvdFactors f = svd_decompose(w0);
    Matrix w_star = w0;
    for (Index start : {cfg.band_start, cfg.band_start2}) {
        SpectralSegment band = extract_segment(f, start, cfg.band_width);
        w_star += (cfg.gain - 1.0) * band.product();
    }
    TeacherTask task;
    task.w_star = w_star;
    task.noise_std = cfg.noise_std;
    task.seed = seed;
    return task;
}

inline TrainOrderingResult run_train_ordering(const TrainOrderingConfig& cfg) {
    TrainOrderingResult result;
    const LayerConfig lc = train_ordering_layer_template(cfg);
    for (AdapterMethod method : cfg.methods) {
        std::vector<double> finals;
        for (std::uint64_t seed : cfg.seeds) {
            const Matrix w0 = make_pretrained_base(cfg.m, cfg.n, cfg.spectrum_max,
                                                   cfg.spectrum_min, mix_seed(seed, 50));
            TeacherTask task = train_ordering_task(cfg, w0, mix_seed(seed, 51));
            SpectralMoeLayer layer =
                init_layer(w0, method_layer_config(method, lc), mix_seed(seed, 52));
            TrainConfig tc = cfg.train;
            tc.seed = mix_seed(seed, 53);
            MethodRunResult run;
            run.method = method;
            run.seed = seed;
            run.log = train(layer, task, tc);
            run.final_eval = run.log.final_eval;
            finals.push_back(run.final_eval);
            result.runs.push_back(std::move(run));
        }
        result.median_final[method] = median(finals);
    }
    return result;
}

// Sequential-task forgetting protocol: two domain-sharded teachers built over
// a shared pretrained mixture, trained one after the other; degradation is
// the relative drop of normalized loss retention on the first task.
struct ForgettingConfig {
    Index m = 64;
    Index n = 64;
    Index n_tasks = 2;
    Index n_experts = 8;
    Index top_k = 2;
    Index total_rank = 64;
    double rho = 10.0;
    double eta = 1.0;
    SequentialTaskOptions tasks{};
    TrainConfig train{2e-3, 400, 16, 0, Optimizer::Sgd, 0.9, 1e-3, 100, 256};
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::vector<AdapterMethod> methods = {AdapterMethod::SpectralMoe, AdapterMethod::ZeroInitMoe,
                                          AdapterMethod::SingleLora};
};

struct ForgettingRunResult {
    AdapterMethod method;
    std::uint64_t seed = 0;
    RetentionReport report;
};

struct ForgettingResult {
    std::vector<ForgettingRunResult> runs;
    std::map<AdapterMethod, double> median_degradation;  // on the first task
};

inline LayerConfig forgetting_layer_template(const ForgettingConfig& cfg) {
    LayerConfig lc;
    lc.m = cfg.m;
    lc.n = cfg.n;
    lc.total_rank = cfg.total_rank;
    lc.n_experts = cfg.n_experts;
    lc.top_k = cfg.top_k;
    lc.scale = ScaleSpec::auto_per_expert();
    lc.rho = cfg.rho;
    lc.eta = cfg.eta;
    lc.scheme = SegmentScheme::original();
    lc.balance_coefficient = cfg.train.balance_coefficient;
    return lc;
}

inline ForgettingResult run_forgetting(const ForgettingConfig& cfg) {
    ForgettingResult result;
    const LayerConfig lc = forgetting_layer_template(cfg);
    for (AdapterMethod method : cfg.methods) {
        std::vector<double> degradations;
        for (std::uint64_t seed : cfg.seeds) {
            SequentialTaskSet tasks =
                make_sequential_tasks(cfg.n_tasks, cfg.m, cfg.n, mix_seed(seed, 60), cfg.tasks);
            TrainConfig tc = cfg.train;
            tc.seed = mix_seed(seed, 61);
            ForgettingRunResult run;
            run.method = method;
            run.seed = seed;
            run.report = forgetting_experiment(method, tasks, lc, tc);
            degradations.push_back(run.report.degradation.front());
            result.runs.push_back(std::move(run));
        }
        result.median_degradation[method] = median(degradations);
    }
    return result;
}

}  // namespace smoe

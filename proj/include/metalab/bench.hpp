#pragma once

// Experiment configuration, the limited-supervision benchmarking protocol,
// seeded multi-run aggregation with confidence intervals, and CSV/JSON
// emission.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "metalab/active.hpp"
#include "metalab/bounds.hpp"
#include "metalab/errors.hpp"
#include "metalab/meta.hpp"
#include "metalab/tasks.hpp"

namespace metalab {

enum class Labeler { random, stratified, active };

inline const char* labeler_name(Labeler l) {
    switch (l) {
        case Labeler::random: return "random";
        case Labeler::stratified: return "stratified";
        default: return "active";
    }
}

inline Labeler labeler_from_name(const std::string& s) {
    if (s == "random") return Labeler::random;
    if (s == "stratified") return Labeler::stratified;
    if (s == "active") return Labeler::active;
    throw config_error("unknown labeler '" + s + "'");
}

// `<dataset> (<X>w-<Y>s @ <Z>)` in the limited regime, `<dataset> (<X>w-<Y>s)`
// in the classical regime.
inline std::string format_benchmark_id(const std::string& dataset, std::size_t ways,
                                       std::size_t shots, std::optional<std::size_t> budget) {
    if (ways < 1 || shots < 1) throw config_error("benchmark id needs ways, shots >= 1");
    std::string id = dataset + " (" + std::to_string(ways) + "w-" + std::to_string(shots) + "s";
    if (budget) id += " @ " + std::to_string(*budget);
    return id + ")";
}

// Benchmark coordinates: dataset, episode shape, and the labeling budget
// (no budget = classical regime).
struct BenchmarkSpec {
    std::string dataset_id = "synth5";
    std::size_t ways = 5;
    std::size_t shots = 1;
    std::size_t query_shots = 1;
    std::optional<std::size_t> budget;  // total labels Z; nullopt = unlimited
};

struct ExperimentConfig {
    BenchmarkSpec benchmark;
    MetaConfig meta;
    Labeler labeler = Labeler::stratified;
    ActiveConfig active;  // labels_per_task/clusters 0 = derive from the benchmark
    bool budget_counts_query = true;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::size_t eval_tasks = 100;
    std::string out_path = "results.csv";
    std::string curve_out;   // optional per-seed training-curve CSV
    std::string params_out;  // optional trained-parameter dump (first seed)

    // synthetic dataset knobs (file paths override them)
    SyntheticParams synth;
    std::uint64_t data_seed = 42;

    // backbone: dense feature_dim -> hidden -> (ways | embed_dim)
    std::size_t hidden = 32;
    std::size_t embed_dim = 16;
};

// One (seed, split) result row.
struct RunRecord {
    std::string benchmark_id;
    std::string method;
    std::string labeler;
    std::uint64_t seed = 0;
    std::string split;
    double accuracy = 0.0;  // nan marks a per-seed numerical failure
    std::size_t tasks_evaluated = 0;
    std::size_t labels_spent = 0;
    std::size_t outer_steps = 0;
};

struct AggregateRecord {
    std::string benchmark_id;
    std::string method;
    std::string labeler;
    std::string split;
    std::size_t seeds = 0;
    double mean_accuracy = 0.0;
    std::optional<double> ci95;  // absent with fewer than 2 seeds
};

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kResultsHeader =
    "benchmark_id,method,labeler,seed,split,accuracy,tasks_evaluated,labels_spent,outer_steps";

inline constexpr const char* kBoundsHeader =
    "bound_kind,n,m,delta,C,stability_term,concentration_term,inner_term,value";

inline std::string format_double(double v, const char* fmt = "%.6f") {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

inline std::string run_record_csv(const RunRecord& r) {
    std::ostringstream os;
    os << r.benchmark_id << ',' << r.method << ',' << r.labeler << ',' << r.seed << ',' << r.split
       << ',' << format_double(r.accuracy) << ',' << r.tasks_evaluated << ',' << r.labels_spent
       << ',' << r.outer_steps;
    return os.str();
}

// write-to-temp + rename keeps partially written files invisible
inline void write_lines_atomic(const std::string& path, const std::string& header,
                               const std::vector<std::string>& lines) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw config_error("cannot write " + path);
        out << header << '\n';
        for (const auto& l : lines) out << l << '\n';
    }
    fs::rename(tmp, target);
}

inline void write_results_csv(const std::string& path, const std::vector<RunRecord>& rows) {
    std::vector<std::string> lines;
    lines.reserve(rows.size());
    for (const auto& r : rows) lines.push_back(run_record_csv(r));
    write_lines_atomic(path, kResultsHeader, lines);
}

inline void write_bounds_csv(const std::string& path, const std::vector<BoundSweepRow>& rows) {
    std::vector<std::string> lines;
    for (const auto& row : rows) {
        std::ostringstream os;
        os << row.kind << ',' << row.n << ',' << row.m << ',' << format_double(row.result.delta, "%.9g")
           << ',' << format_double(row.result.outer_constant, "%.12g") << ','
           << format_double(row.result.stability_term, "%.12g") << ','
           << format_double(row.result.concentration_term, "%.12g") << ','
           << format_double(row.result.inner_term, "%.12g") << ','
           << format_double(row.result.value, "%.12g");
        lines.push_back(os.str());
    }
    write_lines_atomic(path, kBoundsHeader, lines);
}

// ---------------------------------------------------------------------------
// parameter serialization (JSON; values round-trip exactly)

inline void save_params(const std::string& path, const ParamVector& params) {
    nlohmann::json j;
    j["layout"] = nlohmann::json::array();
    for (const auto& e : params.layout) j["layout"].push_back({{"name", e.name}, {"shape", e.shape}});
    j["values"] = params.values;
    std::ofstream out(path);
    if (!out) throw config_error("cannot write params file " + path);
    out << j.dump() << '\n';
}

inline ParamVector load_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw parse_error("cannot open params file " + path, 0);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw parse_error(std::string("bad params file: ") + e.what(), 0);
    }
    ParamVector p;
    for (const auto& e : j.at("layout"))
        p.layout.push_back({e.at("name").get<std::string>(),
                            e.at("shape").get<std::vector<std::size_t>>()});
    p.values = j.at("values").get<std::vector<double>>();
    if (p.values.size() != ParamVector::layout_count(p.layout))
        throw parse_error("params file: values length disagrees with layout", 0);
    return p;
}

// ---------------------------------------------------------------------------
// source / model resolution

// Dataset ids: an existing file path loads that dataset; otherwise ids
// containing "ring" or "fed" select the synthetic ring / federated sources
// and anything else the synthetic Gaussian few-shot source.
inline TaskSource resolve_source(const ExperimentConfig& cfg, std::uint64_t run_seed) {
    TaskSource src;
    if (std::filesystem::exists(cfg.benchmark.dataset_id)) {
        src = load_dataset(cfg.benchmark.dataset_id);
    } else {
        src.synth = cfg.synth;
        const std::string& id = cfg.benchmark.dataset_id;
        if (id.find("ring") != std::string::npos) {
            src.kind = SourceKind::synthetic_rings;
        } else {
            src.kind = SourceKind::synthetic_gaussian;
        }
        if (id.find("fed") != std::string::npos) {
            src.mode = TaskMode::federated;
            if (src.synth.user_count == 0) src.synth.user_count = 60;
        }
    }
    src.seed = mix64(cfg.data_seed, run_seed);
    return src;
}

inline NetworkSpec experiment_network(const ExperimentConfig& cfg, const TaskSource& src) {
    const std::size_t dim =
        src.kind == SourceKind::file_backed ? src.data->features.cols : src.synth.feature_dim;
    if (cfg.meta.method == MetaMethod::protonet)
        return dense_net({dim, cfg.hidden, cfg.embed_dim}, Head::embedding_only);
    return dense_net({dim, cfg.hidden, cfg.benchmark.ways}, Head::linear_logits);
}

inline std::size_t worker_threads() {
    if (const char* env = std::getenv("METALAB_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? hc : 1;
}

// ---------------------------------------------------------------------------
// experiment driver

namespace detail {

struct SeedOutcome {
    RunRecord validation;
    RunRecord test;
    std::vector<CurvePoint> curve;
};

inline MetaConfig materialize_meta(const ExperimentConfig& cfg) {
    MetaConfig m = cfg.meta;
    m.ways = cfg.benchmark.ways;
    m.shots = cfg.benchmark.shots;
    m.query_shots = m.uses_query() ? cfg.benchmark.query_shots : 0;
    m.strategy =
        cfg.labeler == Labeler::stratified ? SampleStrategy::stratified : SampleStrategy::random;
    return m;
}

inline ActiveConfig materialize_active(const ExperimentConfig& cfg, const MetaConfig& meta,
                                       bool counts_query) {
    ActiveConfig a = cfg.active;
    if (a.labels_per_task == 0)
        a.labels_per_task = episode_label_cost(meta.ways, meta.shots,
                                               meta.uses_query() ? meta.query_shots : 0,
                                               counts_query);
    if (a.clusters == 0) a.clusters = std::min(meta.ways, a.labels_per_task);
    return a;
}

inline SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    const MetaConfig meta = materialize_meta(cfg);
    meta.validate();
    const TaskSource train_src = resolve_source(cfg, seed);
    const TaskSource val_src = train_src.with_split(Split::validation);
    const TaskSource test_src = train_src.with_split(Split::test);
    const NetworkSpec spec = experiment_network(cfg, train_src);
    const std::string bench_id = format_benchmark_id(cfg.benchmark.dataset_id, cfg.benchmark.ways,
                                                     cfg.benchmark.shots, cfg.benchmark.budget);

    SeedOutcome out;
    auto base_row = [&](const char* split) {
        RunRecord r;
        r.benchmark_id = bench_id;
        r.method = method_name(meta.method);
        r.labeler = labeler_name(cfg.labeler);
        r.seed = seed;
        r.split = split;
        r.tasks_evaluated = cfg.eval_tasks;
        return r;
    };
    out.validation = base_row("validation");
    out.test = base_row("test");

    // the classical regime never instantiates a ledger; the limited regime
    // always does
    std::optional<BudgetLedger> ledger;
    if (cfg.benchmark.budget) {
        ledger.emplace();
        ledger->total = *cfg.benchmark.budget;
        ledger->counts_query = cfg.budget_counts_query;
    }

    try {
        MetaTrainResult trained;
        if (cfg.labeler == Labeler::active) {
            if (!ledger) throw config_error("the active labeler needs a labeling budget");
            ActiveConfig active = materialize_active(cfg, meta, cfg.budget_counts_query);
            ledger->per_task = active.labels_per_task;
            trained = active_meta_train(spec, meta, train_src, *ledger, active, seed,
                                        SelectionStrategy::active);
        } else {
            trained = meta_train(spec, meta, train_src, ledger ? &*ledger : nullptr, seed,
                                 meta.early_stop_patience ? &val_src : nullptr);
        }
        out.curve = trained.curve;
        if (!cfg.params_out.empty() && seed == cfg.seeds.front())
            save_params(cfg.params_out, trained.theta);

        const EvalResult val =
            meta_eval(spec, trained.theta, val_src, meta, cfg.eval_tasks, mix64(seed, 0x7A1));
        const EvalResult test =
            meta_eval(spec, trained.theta, test_src, meta, cfg.eval_tasks, mix64(seed, 0x7E5));

        for (RunRecord* r : {&out.validation, &out.test}) {
            r->labels_spent = trained.labels_spent;
            r->outer_steps = trained.outer_steps_run;
        }
        out.validation.accuracy = val.mean_accuracy;
        out.test.accuracy = test.mean_accuracy;
    } catch (const numerical_error&) {
        // keep the rows, mark the failure, let the remaining seeds continue
        out.validation.accuracy = std::nan("");
        out.test.accuracy = std::nan("");
        out.validation.tasks_evaluated = 0;
        out.test.tasks_evaluated = 0;
    }
    return out;
}

}  // namespace detail

// Runs every seed (in parallel up to METALAB_THREADS workers), emits two rows
// per seed (validation + test), and writes the results CSV atomically.
// Identical configs byte-reproduce the CSV.
inline std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg) {
    if (cfg.seeds.empty()) throw config_error("experiment needs at least one seed");
    detail::materialize_meta(cfg).validate();
    if (cfg.benchmark.budget) {
        const MetaConfig meta = detail::materialize_meta(cfg);
        const std::size_t cost =
            episode_label_cost(meta.ways, meta.shots, meta.uses_query() ? meta.query_shots : 0,
                               cfg.budget_counts_query);
        if (*cfg.benchmark.budget < cost)
            throw config_error("budget " + std::to_string(*cfg.benchmark.budget) +
                               " is smaller than one task's label cost " + std::to_string(cost));
    }

    const std::size_t workers = std::min(worker_threads(), cfg.seeds.size());
    std::vector<detail::SeedOutcome> outcomes(cfg.seeds.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
            outcomes[i] = detail::run_seed(cfg, cfg.seeds[i]);
    } else {
        std::vector<std::future<detail::SeedOutcome>> futures;
        futures.reserve(cfg.seeds.size());
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
            futures.push_back(std::async(std::launch::async, [&cfg, i] {
                return detail::run_seed(cfg, cfg.seeds[i]);
            }));
        for (std::size_t i = 0; i < futures.size(); ++i) outcomes[i] = futures[i].get();
    }

    std::vector<RunRecord> rows;
    rows.reserve(2 * cfg.seeds.size());
    for (const auto& o : outcomes) {
        rows.push_back(o.validation);
        rows.push_back(o.test);
    }
    if (!cfg.out_path.empty()) write_results_csv(cfg.out_path, rows);
    if (!cfg.curve_out.empty()) {
        std::vector<std::string> lines;
        for (std::size_t i = 0; i < outcomes.size(); ++i)
            for (const auto& p : outcomes[i].curve) {
                std::ostringstream os;
                os << cfg.seeds[i] << ',' << p.step << ',' << format_double(p.accuracy) << ','
                   << format_double(p.loss);
                lines.push_back(os.str());
            }
        write_lines_atomic(cfg.curve_out, "seed,step,accuracy,loss", lines);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// aggregation

// 97.5% Student-t quantiles for df = 1..30; beyond that the normal quantile
// is close enough for seed counts we run.
inline double t_quantile_975(std::size_t df) {
    static constexpr double table[30] = {
        12.706204736432, 4.302652729696, 3.182446305284, 2.776445105198, 2.570581835636,
        2.446911851145,  2.364624251593, 2.306004135204, 2.262157162854, 2.228138851965,
        2.200985160083,  2.178812829663, 2.160368656461, 2.144786687917, 2.131449545559,
        2.119905299221,  2.109815577833, 2.100922040241, 2.093024054408, 2.085963447266,
        2.079613844728,  2.073873067904, 2.068657610419, 2.063898561628, 2.059538552753,
        2.055529438643,  2.051830516480, 2.048407141795, 2.045229642133, 2.042272456301};
    if (df == 0) throw domain_error("t quantile needs df >= 1");
    return df <= 30 ? table[df - 1] : 1.959963984540;
}

// Mean over seeds and the 95% Student-t interval half-width. Rows with nan
// accuracy (failed seeds) are left out; groups with no valid rows are skipped
// with a warning on stderr.
inline std::vector<AggregateRecord> aggregate(const std::vector<RunRecord>& rows) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunRecord*>> groups;
    for (const auto& r : rows) {
        const std::string key = r.benchmark_id + '\n' + r.method + '\n' + r.labeler + '\n' + r.split;
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(&r);
    }
    std::vector<AggregateRecord> out;
    for (const auto& key : order) {
        std::vector<double> accs;
        const RunRecord* sample = groups[key].front();
        for (const RunRecord* r : groups[key])
            if (!std::isnan(r->accuracy)) accs.push_back(r->accuracy);
        if (accs.empty()) {
            std::fprintf(stderr, "warning: group '%s/%s/%s/%s' has no successful seeds\n",
                         sample->benchmark_id.c_str(), sample->method.c_str(),
                         sample->labeler.c_str(), sample->split.c_str());
            continue;
        }
        AggregateRecord a;
        a.benchmark_id = sample->benchmark_id;
        a.method = sample->method;
        a.labeler = sample->labeler;
        a.split = sample->split;
        a.seeds = accs.size();
        double mean = 0.0;
        for (double v : accs) mean += v;
        mean /= static_cast<double>(accs.size());
        a.mean_accuracy = mean;
        if (accs.size() >= 2) {
            double ss = 0.0;
            for (double v : accs) ss += (v - mean) * (v - mean);
            const double sd = std::sqrt(ss / static_cast<double>(accs.size() - 1));
            const double stderr_ = sd / std::sqrt(static_cast<double>(accs.size()));
            a.ci95 = t_quantile_975(accs.size() - 1) * stderr_;
        }
        out.push_back(std::move(a));
    }
    return out;
}

// ---------------------------------------------------------------------------
// shot-allocation sweep

struct ShotSweepResult {
    std::vector<RunRecord> rows;
    std::vector<AggregateRecord> aggregates;  // one validation + one test per shot setting
    std::size_t best_shot = 0;                // by validation accuracy, ties toward fewer shots
    double best_validation_accuracy = 0.0;
    double best_test_accuracy = 0.0;
};

// Runs the benchmark once per shot setting at the same labeling budget and
// picks the allocation with the best validation accuracy.
inline ShotSweepResult shot_allocation_sweep(const ExperimentConfig& base,
                                             const std::vector<std::size_t>& shots_grid) {
    if (shots_grid.empty()) throw config_error("shot sweep needs a non-empty grid");
    ShotSweepResult result;
    for (std::size_t shots : shots_grid) {
        ExperimentConfig cfg = base;
        cfg.benchmark.shots = shots;
        cfg.out_path.clear();  // single merged CSV written by the caller
        cfg.curve_out.clear();
        auto rows = run_experiment(cfg);
        result.rows.insert(result.rows.end(), rows.begin(), rows.end());
    }
    result.aggregates = aggregate(result.rows);
    bool found = false;
    for (const auto& a : result.aggregates) {
        if (a.split != "validation") continue;
        if (!found || a.mean_accuracy > result.best_validation_accuracy + 1e-12) {
            // benchmark ids embed the shot count; recover it positionally
            for (std::size_t shots : shots_grid) {
                if (a.benchmark_id ==
                    format_benchmark_id(base.benchmark.dataset_id, base.benchmark.ways, shots,
                                        base.benchmark.budget)) {
                    result.best_shot = shots;
                    result.best_validation_accuracy = a.mean_accuracy;
                    found = true;
                }
            }
        }
    }
    for (const auto& a : result.aggregates)
        if (a.split == "test" &&
            a.benchmark_id == format_benchmark_id(base.benchmark.dataset_id, base.benchmark.ways,
                                                  result.best_shot, base.benchmark.budget))
            result.best_test_accuracy = a.mean_accuracy;
    if (!base.out_path.empty()) write_results_csv(base.out_path, result.rows);
    return result;
}

// ---------------------------------------------------------------------------
// JSON config (every CLI flag overrides its JSON counterpart)

inline void apply_json_config(ExperimentConfig& cfg, const nlohmann::json& j) {
    if (j.contains("dataset")) cfg.benchmark.dataset_id = j["dataset"].get<std::string>();
    if (j.contains("ways")) cfg.benchmark.ways = j["ways"].get<std::size_t>();
    if (j.contains("shots")) cfg.benchmark.shots = j["shots"].get<std::size_t>();
    if (j.contains("query_shots")) cfg.benchmark.query_shots = j["query_shots"].get<std::size_t>();
    if (j.contains("budget")) {
        if (j["budget"].is_string()) {
            if (j["budget"].get<std::string>() != "unlimited")
                throw config_error("budget must be an integer or \"unlimited\"");
            cfg.benchmark.budget.reset();
        } else {
            cfg.benchmark.budget = j["budget"].get<std::size_t>();
        }
    }
    if (j.contains("budget_counts_query")) cfg.budget_counts_query = j["budget_counts_query"].get<bool>();
    if (j.contains("method")) cfg.meta.method = method_from_name(j["method"].get<std::string>());
    if (j.contains("labeler")) cfg.labeler = labeler_from_name(j["labeler"].get<std::string>());
    if (j.contains("outer_steps")) cfg.meta.outer_steps = j["outer_steps"].get<std::size_t>();
    if (j.contains("outer_lr")) cfg.meta.outer_lr = j["outer_lr"].get<double>();
    if (j.contains("outer_c")) cfg.meta.outer_c = j["outer_c"].get<double>();
    if (j.contains("outer_optimizer"))
        cfg.meta.outer_opt = j["outer_optimizer"].get<std::string>() == "adam" ? OuterOptimizer::adam
                                                                               : OuterOptimizer::sgd;
    if (j.contains("meta_batch")) cfg.meta.meta_batch = j["meta_batch"].get<std::size_t>();
    if (j.contains("inner_steps")) cfg.meta.inner.steps = j["inner_steps"].get<std::size_t>();
    if (j.contains("inner_lr")) cfg.meta.inner.alpha = j["inner_lr"].get<double>();
    if (j.contains("inner_c")) {
        cfg.meta.inner.c = j["inner_c"].get<double>();
        cfg.meta.inner.schedule = StepSchedule::decaying;
    }
    if (j.contains("eval_inner_steps"))
        cfg.meta.eval_inner_steps = j["eval_inner_steps"].get<std::size_t>();
    if (j.contains("eval_query_shots"))
        cfg.meta.eval_query_shots = j["eval_query_shots"].get<std::size_t>();
    if (j.contains("labels_per_task")) cfg.active.labels_per_task = j["labels_per_task"].get<std::size_t>();
    if (j.contains("clusters")) cfg.active.clusters = j["clusters"].get<std::size_t>();
    if (j.contains("acquisition_period"))
        cfg.active.acquisition_period = j["acquisition_period"].get<std::size_t>();
    if (j.contains("lloyd_iterations"))
        cfg.active.lloyd_iterations = j["lloyd_iterations"].get<std::size_t>();
    if (j.contains("pool_per_class")) cfg.active.pool_per_class = j["pool_per_class"].get<std::size_t>();
    if (j.contains("singleton_batches")) cfg.active.singleton_batches = j["singleton_batches"].get<bool>();
    if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("eval_tasks")) cfg.eval_tasks = j["eval_tasks"].get<std::size_t>();
    if (j.contains("out")) cfg.out_path = j["out"].get<std::string>();
    if (j.contains("curve_out")) cfg.curve_out = j["curve_out"].get<std::string>();
    if (j.contains("params_out")) cfg.params_out = j["params_out"].get<std::string>();
    if (j.contains("hidden")) cfg.hidden = j["hidden"].get<std::size_t>();
    if (j.contains("embed_dim")) cfg.embed_dim = j["embed_dim"].get<std::size_t>();
    if (j.contains("classes")) cfg.synth.class_count = j["classes"].get<std::size_t>();
    if (j.contains("feature_dim")) cfg.synth.feature_dim = j["feature_dim"].get<std::size_t>();
    if (j.contains("sigma_between")) cfg.synth.sigma_between = j["sigma_between"].get<double>();
    if (j.contains("sigma_within")) cfg.synth.sigma_within = j["sigma_within"].get<double>();
    if (j.contains("sigma_user")) cfg.synth.sigma_user = j["sigma_user"].get<double>();
    if (j.contains("users")) cfg.synth.user_count = j["users"].get<std::size_t>();
    if (j.contains("shard_per_class")) cfg.synth.shard_per_class = j["shard_per_class"].get<std::size_t>();
    if (j.contains("data_seed")) cfg.data_seed = j["data_seed"].get<std::uint64_t>();
    if (j.contains("early_stop_patience"))
        cfg.meta.early_stop_patience = j["early_stop_patience"].get<std::size_t>();
    if (j.contains("early_stop_interval"))
        cfg.meta.early_stop_interval = j["early_stop_interval"].get<std::size_t>();
}

inline ExperimentConfig load_config_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw parse_error("cannot open config file " + path, 0);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw parse_error(std::string("bad config JSON: ") + e.what(), 0);
    }
    ExperimentConfig cfg;
    apply_json_config(cfg, j);
    return cfg;
}

}  // namespace metalab

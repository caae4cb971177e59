// metalab command line: train/eval meta-learning benchmarks, evaluate
// stability bounds, sweep shot allocations, and run the Reptile alignment
// diagnostic. Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metalab/metalab.hpp"

namespace {

using namespace metalab;

struct ExperimentFlags {
    std::string method;
    std::string labeler;
    std::string budget;
    bool have_outer_lr = false;
    bool have_inner_lr = false;
    bool have_inner_steps = false;
    bool have_eval_inner_steps = false;
};

void add_experiment_flags(CLI::App* cmd, ExperimentConfig& cfg, ExperimentFlags& flags) {
    cmd->add_option("--method", flags.method, "maml|fomaml|reptile|protonet|fedavg");
    cmd->add_option("--dataset", cfg.benchmark.dataset_id,
                    "dataset id (synth*, *ring*, *fed*) or CSV path");
    cmd->add_option("--ways", cfg.benchmark.ways, "classes per task");
    cmd->add_option("--shots", cfg.benchmark.shots, "support shots per class");
    cmd->add_option("--query-shots", cfg.benchmark.query_shots, "query shots per class");
    cmd->add_option("--budget", flags.budget, "total label budget or 'unlimited'");
    cmd->add_option("--budget-counts-query", cfg.budget_counts_query,
                    "charge query labels against the budget (true|false)");
    cmd->add_option("--labeler", flags.labeler, "random|stratified|active");
    cmd->add_option("--labels-per-task", cfg.active.labels_per_task,
                    "labels bought per task in active mode (0 = derive)");
    cmd->add_option("--clusters", cfg.active.clusters, "clusters for active selection (0 = ways)");
    cmd->add_option("--acquisition-period", cfg.active.acquisition_period,
                    "acquire one task every P outer steps");
    cmd->add_option("--lloyd-iterations", cfg.active.lloyd_iterations, "Lloyd refinement steps");
    cmd->add_option("--pool-per-class", cfg.active.pool_per_class, "unlabeled pool rows per class");
    cmd->add_flag("--singleton-batches", cfg.active.singleton_batches,
                  "buy one label per cluster visit (round-robin)");
    cmd->add_option("--outer-steps", cfg.meta.outer_steps, "outer optimization steps");
    auto* il = cmd->add_option("--inner-steps", cfg.meta.inner.steps, "inner adaptation steps");
    auto* ilr = cmd->add_option("--inner-lr", cfg.meta.inner.alpha, "inner step size");
    auto* olr = cmd->add_option("--outer-lr", cfg.meta.outer_lr, "outer step size");
    cmd->add_option("--outer-c", cfg.meta.outer_c, "outer schedule constant c' (0 = flat)");
    cmd->add_option("--outer-optimizer",
                    [&cfg](const std::vector<std::string>& v) {
                        cfg.meta.outer_opt =
                            v.front() == "adam" ? OuterOptimizer::adam : OuterOptimizer::sgd;
                        return true;
                    },
                    "sgd|adam (adam is excluded from bound-related runs)");
    auto* eis = cmd->add_option("--eval-inner-steps", cfg.meta.eval_inner_steps,
                                "adaptation steps at evaluation time");
    cmd->add_option("--eval-query-shots", cfg.meta.eval_query_shots, "query shots at evaluation");
    cmd->add_option("--meta-batch", cfg.meta.meta_batch, "tasks per outer step");
    cmd->add_option("--seeds", cfg.seeds, "run seeds, e.g. 1,2,3")->delimiter(',');
    cmd->add_option("--eval-tasks", cfg.eval_tasks, "evaluation tasks per split");
    cmd->add_option("--out", cfg.out_path, "results CSV path");
    cmd->add_option("--curve-out", cfg.curve_out, "training-curve CSV path");
    cmd->add_option("--save-params", cfg.params_out, "write first seed's trained parameters");
    cmd->add_option("--curve-interval", cfg.meta.curve_interval, "curve sampling interval");
    cmd->add_option("--early-stop-patience", cfg.meta.early_stop_patience,
                    "stop after N flat validation checks (0 = off)");
    cmd->add_option("--early-stop-interval", cfg.meta.early_stop_interval,
                    "validation check interval");
    cmd->add_option("--hidden", cfg.hidden, "hidden width of the dense backbone");
    cmd->add_option("--embed-dim", cfg.embed_dim, "embedding width (protonet)");
    cmd->add_option("--classes", cfg.synth.class_count, "synthetic class universe");
    cmd->add_option("--feature-dim", cfg.synth.feature_dim, "synthetic feature dimension");
    cmd->add_option("--sigma-between", cfg.synth.sigma_between, "class-center spread");
    cmd->add_option("--sigma-within", cfg.synth.sigma_within, "within-class noise");
    cmd->add_option("--sigma-user", cfg.synth.sigma_user, "per-user shift (federated)");
    cmd->add_option("--users", cfg.synth.user_count, "synthetic user count (federated)");
    cmd->add_option("--data-seed", cfg.data_seed, "dataset seed");

    cmd->parse_complete_callback([&flags, il, ilr, olr, eis] {
        flags.have_inner_steps = il->count() > 0;
        flags.have_inner_lr = ilr->count() > 0;
        flags.have_outer_lr = olr->count() > 0;
        flags.have_eval_inner_steps = eis->count() > 0;
    });
}

// Reference calibration constants per method, applied where flags and JSON
// left gaps.
void finalize_experiment(ExperimentConfig& cfg, const ExperimentFlags& flags, bool json_loaded) {
    if (!flags.method.empty()) cfg.meta.method = method_from_name(flags.method);
    if (!flags.labeler.empty()) cfg.labeler = labeler_from_name(flags.labeler);
    if (!flags.budget.empty()) {
        if (flags.budget == "unlimited") {
            cfg.benchmark.budget.reset();
        } else {
            try {
                cfg.benchmark.budget = static_cast<std::size_t>(std::stoull(flags.budget));
            } catch (const std::exception&) {
                throw config_error("--budget expects an integer or 'unlimited'");
            }
        }
    }
    const bool reptile_like =
        cfg.meta.method == MetaMethod::reptile || cfg.meta.method == MetaMethod::fedavg;
    if (!flags.have_outer_lr && !json_loaded) cfg.meta.outer_lr = reptile_like ? 1.0 : 0.1;
    if (!flags.have_inner_steps && !json_loaded) cfg.meta.inner.steps = reptile_like ? 10 : 5;
    if (!flags.have_inner_lr && !json_loaded) cfg.meta.inner.alpha = reptile_like ? 0.001 : 0.01;
    if (!flags.have_eval_inner_steps && !json_loaded)
        cfg.meta.eval_inner_steps = reptile_like ? 50 : 10;
}

void print_aggregates(const std::vector<AggregateRecord>& aggs) {
    for (const auto& a : aggs) {
        std::printf("%s  %s/%s  %s: mean %.4f", a.benchmark_id.c_str(), a.method.c_str(),
                    a.labeler.c_str(), a.split.c_str(), a.mean_accuracy);
        if (a.ci95)
            std::printf(" +- %.4f (95%% CI, %zu seeds)\n", *a.ci95, a.seeds);
        else
            std::printf(" (1 seed)\n");
    }
}

std::vector<std::size_t> parse_size_list(const std::string& csv, const char* what) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(static_cast<std::size_t>(std::stoull(tok)));
        } catch (const std::exception&) {
            throw config_error(std::string("bad ") + what + " entry '" + tok + "'");
        }
    }
    if (out.empty()) throw config_error(std::string(what) + " list is empty");
    return out;
}

std::vector<double> parse_double_list(const std::string& csv, const char* what) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw config_error(std::string("bad ") + what + " entry '" + tok + "'");
        }
    }
    if (out.empty()) throw config_error(std::string(what) + " list is empty");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace metalab;

    // --config JSON loads first so that every explicit flag overrides it
    ExperimentConfig cfg;
    bool json_loaded = false;
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            try {
                cfg = load_config_json(argv[i + 1]);
                json_loaded = true;
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << '\n';
                return 1;
            }
        }
    }

    CLI::App app{"metalab: a desk-scale meta-learning laboratory"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags override it)");

    ExperimentFlags flags;

    auto* train = app.add_subcommand("train", "meta-train and evaluate a benchmark");
    train->add_option("--config", config_path, "JSON config file (flags override it)");
    add_experiment_flags(train, cfg, flags);

    auto* evalc = app.add_subcommand("eval", "evaluate saved parameters on held-out tasks");
    evalc->add_option("--config", config_path, "JSON config file (flags override it)");
    std::string params_path, eval_split = "test";
    evalc->add_option("--params", params_path, "trained parameter file (from --save-params)")
        ->required();
    evalc->add_option("--split", eval_split, "validation|test");
    add_experiment_flags(evalc, cfg, flags);

    auto* bounds = app.add_subcommand("bounds", "evaluate one stability bound");
    std::string bound_kind = "q";
    StabilityConstants consts;
    std::size_t bound_n = 2, bound_m = 2;
    double bound_delta = 0.05;
    std::optional<double> beta_q, beta_prime, beta_inner;
    bool show_components = false;
    bounds->add_option("--kind", bound_kind, "stability|maurer|q|emp");
    bounds->add_option("--n", bound_n, "number of training tasks");
    bounds->add_option("--m", bound_m, "data points per task");
    bounds->add_option("--M", consts.loss_bound, "loss bound M");
    bounds->add_option("--delta", bound_delta, "failure probability");
    bounds->add_option("--beta-q", [&beta_q](const std::vector<std::string>& v) {
        beta_q = std::stod(v.front());
        return true;
    }, "pass beta'_Q directly instead of deriving it");
    bounds->add_option("--beta-prime", [&beta_prime](const std::vector<std::string>& v) {
        beta_prime = std::stod(v.front());
        return true;
    }, "pass beta' directly");
    bounds->add_option("--beta", [&beta_inner](const std::vector<std::string>& v) {
        beta_inner = std::stod(v.front());
        return true;
    }, "pass inner beta directly");
    bounds->add_option("--L", consts.inner_lipschitz, "inner Lipschitz constant");
    bounds->add_option("--gamma", consts.inner_smoothness, "inner smoothness");
    bounds->add_option("--c", consts.inner_step_c, "inner step constant");
    bounds->add_option("--T", consts.inner_steps, "inner step count");
    bounds->add_option("--Lp", consts.outer_lipschitz, "outer Lipschitz constant");
    bounds->add_option("--gammap", consts.outer_smoothness, "outer smoothness");
    bounds->add_option("--cp", consts.outer_step_c, "outer step constant");
    bounds->add_option("--Tp", consts.outer_steps, "outer step count");
    bounds->add_flag("--components", show_components, "print the component breakdown");

    auto* sweep = app.add_subcommand("sweep", "bound sweeps and shot-allocation sweeps");
    sweep->add_option("--config", config_path, "JSON config file (flags override it)");
    std::string sweep_kind = "bounds";
    std::string n_grid_csv = "100,1000,10000,100000", m_grid_csv = "2,5,10,50";
    std::string shots_grid_csv = "1,3,5";
    sweep->add_option("--kind", sweep_kind, "bounds|shots");
    sweep->add_option("--n-grid", n_grid_csv, "task-count grid (bounds)");
    sweep->add_option("--m-grid", m_grid_csv, "per-task-sample grid (bounds)");
    sweep->add_option("--shots-grid", shots_grid_csv, "support-shot grid (shots)");
    sweep->add_option("--M", consts.loss_bound, "loss bound M");
    sweep->add_option("--delta", bound_delta, "failure probability");
    sweep->add_option("--L", consts.inner_lipschitz, "inner Lipschitz constant");
    sweep->add_option("--gamma", consts.inner_smoothness, "inner smoothness");
    sweep->add_option("--c", consts.inner_step_c, "inner step constant");
    sweep->add_option("--T", consts.inner_steps, "inner step count");
    sweep->add_option("--Lp", consts.outer_lipschitz, "outer Lipschitz constant");
    sweep->add_option("--gammap", consts.outer_smoothness, "outer smoothness");
    sweep->add_option("--cp", consts.outer_step_c, "outer step constant");
    sweep->add_option("--Tp", consts.outer_steps, "outer step count");
    add_experiment_flags(sweep, cfg, flags);

    auto* diag = app.add_subcommand("diagnose-reptile",
                                    "cosine alignment of the Reptile direction with the exact "
                                    "empirical-estimator gradient");
    std::string alphas_csv = "0.1,0.01,0.001";
    std::size_t diag_steps = 5, diag_hidden = 16, diag_dim = 8, diag_ways = 3, diag_shots = 5;
    std::uint64_t diag_seed = 7;
    diag->add_option("--alphas", alphas_csv, "inner step sizes to scan");
    diag->add_option("--inner-steps", diag_steps, "inner step count T");
    diag->add_option("--hidden", diag_hidden, "hidden width");
    diag->add_option("--feature-dim", diag_dim, "input dimension");
    diag->add_option("--ways", diag_ways, "classes");
    diag->add_option("--shots", diag_shots, "support shots per class");
    diag->add_option("--seed", diag_seed, "net/support seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n' << app.help();
        return 1;
    }

    try {
        if (app.got_subcommand(train)) {
            finalize_experiment(cfg, flags, json_loaded);
            const auto rows = run_experiment(cfg);
            print_aggregates(aggregate(rows));
            if (!cfg.out_path.empty()) std::printf("wrote %s\n", cfg.out_path.c_str());
        } else if (app.got_subcommand(evalc)) {
            finalize_experiment(cfg, flags, json_loaded);
            const MetaConfig meta = [&] {
                auto m = cfg.meta;
                m.ways = cfg.benchmark.ways;
                m.shots = cfg.benchmark.shots;
                m.query_shots = m.uses_query() ? cfg.benchmark.query_shots : 0;
                return m;
            }();
            meta.validate();
            const ParamVector params = load_params(params_path);
            const TaskSource base = resolve_source(cfg, cfg.seeds.front());
            const Split split = eval_split == "validation" ? Split::validation : Split::test;
            const NetworkSpec spec = experiment_network(cfg, base);
            if (spec.param_count() != params.size())
                throw config_error("parameter file does not match the configured network");
            const EvalResult r = meta_eval(spec, params, base.with_split(split), meta,
                                           cfg.eval_tasks, mix64(cfg.seeds.front(), 0x7E5));
            std::printf("%s accuracy %.6f over %zu tasks (mean loss %.6f)\n", eval_split.c_str(),
                        r.mean_accuracy, cfg.eval_tasks, r.mean_loss);
        } else if (app.got_subcommand(bounds)) {
            consts.delta = bound_delta;
            BoundResult r;
            if (bound_kind == "stability") {
                const double beta = sgm_stability(consts.inner_lipschitz, consts.inner_smoothness,
                                                  consts.inner_step_c, consts.inner_steps, bound_n);
                std::printf("%.12g\n", beta);
                return 0;
            } else if (bound_kind == "q") {
                r = beta_q ? q_bound(*beta_q, bound_n, consts.loss_bound, bound_delta)
                           : theorem2_bound_q(consts, bound_n, bound_delta);
            } else if (bound_kind == "maurer") {
                const double bp = beta_prime.value_or(
                    sgm_stability(consts.outer_lipschitz, consts.outer_smoothness,
                                  consts.outer_step_c, consts.outer_steps, bound_n));
                const double b = beta_inner.value_or(
                    sgm_stability(consts.inner_lipschitz, consts.inner_smoothness,
                                  consts.inner_step_c, consts.inner_steps, bound_m));
                r = maurer_bound(bp, b, bound_n, consts.loss_bound, bound_delta);
            } else if (bound_kind == "emp") {
                if (beta_prime || beta_inner) {
                    const double bp = beta_prime.value_or(
                        sgm_stability(consts.outer_lipschitz, consts.outer_smoothness,
                                      consts.outer_step_c, consts.outer_steps, bound_n));
                    const double b = beta_inner.value_or(
                        sgm_stability(consts.inner_lipschitz, consts.inner_smoothness,
                                      consts.inner_step_c, consts.inner_steps, bound_m));
                    r = maurer_bound(bp, b, bound_n, consts.loss_bound, bound_delta);
                } else {
                    r = theorem2_bound_emp(consts, bound_n, bound_m, bound_delta);
                }
            } else {
                throw config_error("unknown bound kind '" + bound_kind + "'");
            }
            std::printf("%.12g\n", r.value);
            if (show_components)
                std::printf("stability %.12g concentration %.12g inner %.12g C %.12g\n",
                            r.stability_term, r.concentration_term, r.inner_term,
                            r.outer_constant);
        } else if (app.got_subcommand(sweep)) {
            if (sweep_kind == "bounds") {
                consts.delta = bound_delta;
                const auto rows = bound_sweep(consts, parse_size_list(n_grid_csv, "n-grid"),
                                              parse_size_list(m_grid_csv, "m-grid"), bound_delta);
                const std::string out = cfg.out_path.empty() ? "bounds.csv" : cfg.out_path;
                write_bounds_csv(out, rows);
                std::printf("wrote %zu rows to %s\n", rows.size(), out.c_str());
            } else if (sweep_kind == "shots") {
                finalize_experiment(cfg, flags, json_loaded);
                const auto grid = parse_size_list(shots_grid_csv, "shots-grid");
                const ShotSweepResult r = shot_allocation_sweep(cfg, grid);
                print_aggregates(r.aggregates);
                std::printf("best shots by validation accuracy: %zu (val %.4f, test %.4f)\n",
                            r.best_shot, r.best_validation_accuracy, r.best_test_accuracy);
                if (!cfg.out_path.empty()) std::printf("wrote %s\n", cfg.out_path.c_str());
            } else {
                throw config_error("unknown sweep kind '" + sweep_kind + "'");
            }
        } else if (app.got_subcommand(diag)) {
            const auto alphas = parse_double_list(alphas_csv, "alphas");
            TaskSource src;
            src.kind = SourceKind::synthetic_gaussian;
            src.synth.feature_dim = diag_dim;
            src.seed = diag_seed;
            const NetworkSpec spec = dense_net({diag_dim, diag_hidden, diag_ways});
            const ParamVector theta0 = init_params(spec, mix64(diag_seed, 0xD1A6));
            const Episode ep = sample_episode(src, diag_ways, diag_shots, 0,
                                              SampleStrategy::stratified, 0, nullptr);
            std::printf("alpha,cosine\n");
            for (double alpha : alphas) {
                AdaptationConfig inner;
                inner.steps = diag_steps;
                inner.alpha = alpha;
                inner.loss = LossSpec{LossKind::softmax_cross_entropy, 30.0};
                const double cosine = reptile_alignment_diagnostic(spec, theta0, ep.support, inner);
                std::printf("%g,%.9f\n", alpha, cosine);
            }
        }
    } catch (const config_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const validation_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const parse_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const domain_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

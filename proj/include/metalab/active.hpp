#pragma once

// Active label selection (embedding clustering + entropy-weighted stratified
// sampling, interleaved with re-adaptation) and the budgeted active
// meta-training loop that drives it.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "metalab/adaptation.hpp"
#include "metalab/errors.hpp"
#include "metalab/meta.hpp"
#include "metalab/network.hpp"
#include "metalab/rng.hpp"
#include "metalab/tasks.hpp"

namespace metalab {

struct ActiveConfig {
    std::size_t labels_per_task = 10;   // L
    std::size_t clusters = 5;           // |C|; one per putative class by default
    std::size_t acquisition_period = 1; // P: acquire one task every P outer steps
    std::size_t lloyd_iterations = 10;
    std::size_t pool_per_class = 8;     // unlabeled pool rows per class
    // Per-singleton granularity: clusters are revisited round-robin buying one
    // label at a time, re-adapting after every label.
    bool singleton_batches = false;

    void validate() const {
        if (labels_per_task == 0) throw config_error("labels-per-task must be positive");
        if (clusters == 0 || clusters > labels_per_task)
            throw config_error("cluster count must be in [1, labels-per-task]");
        if (acquisition_period == 0) throw config_error("acquisition period must be >= 1");
        if (pool_per_class == 0) throw config_error("pool-per-class must be positive");
    }
};

// ---------------------------------------------------------------------------
// clustering

struct ClusterAssignment {
    Matrix centers;  // k x dim
    std::vector<std::vector<std::size_t>> members;  // partition of the input indices
    double sse = 0.0;
    std::vector<double> sse_trace;  // SSE after seeding and after each Lloyd iteration
};

// k-means++ seeding (first center uniform, each next sampled proportionally to
// the squared distance to the nearest chosen center) followed by Lloyd
// refinement. Deterministic given the seed. Points tie to the lowest center
// index; a center that loses all members keeps its position.
inline ClusterAssignment kmeanspp_cluster(const Matrix& points, std::size_t k,
                                          std::size_t lloyd_iterations, std::uint64_t seed) {
    const std::size_t n = points.rows;
    if (k == 0 || k > n)
        throw config_error("kmeans needs 1 <= k <= points (" + std::to_string(k) + " vs " +
                           std::to_string(n) + ")");
    const std::size_t dim = points.cols;
    Rng rng(mix64(seed, 0x32AA));

    ClusterAssignment out;
    out.centers = Matrix(k, dim);

    // seeding
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::size_t first = rng.index(n);
    std::copy(points.row(first).begin(), points.row(first).end(), out.centers.row(0).begin());
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = squared_distance(points.row(i), out.centers.row(c - 1));
            nearest[i] = std::min(nearest[i], d);
            total += nearest[i];
        }
        std::size_t pick;
        if (total > 0.0) {
            pick = rng.weighted_index(nearest);
        } else {
            pick = rng.index(n);  // all mass zero: duplicate centers are fine
        }
        std::copy(points.row(pick).begin(), points.row(pick).end(), out.centers.row(c).begin());
    }

    std::vector<std::size_t> assignment(n, 0);
    auto assign_and_sse = [&]() {
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t c = 0; c < k; ++c) {
                const double d = squared_distance(points.row(i), out.centers.row(c));
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            assignment[i] = arg;
            sse += best;
        }
        return sse;
    };

    out.sse = assign_and_sse();
    out.sse_trace.push_back(out.sse);
    for (std::size_t it = 0; it < lloyd_iterations; ++it) {
        // recompute means
        std::vector<std::size_t> counts(k, 0);
        Matrix sums(k, dim);
        for (std::size_t i = 0; i < n; ++i) {
            counts[assignment[i]] += 1;
            for (std::size_t j = 0; j < dim; ++j) sums.at(assignment[i], j) += points.at(i, j);
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t j = 0; j < dim; ++j)
                out.centers.at(c, j) = sums.at(c, j) / static_cast<double>(counts[c]);
        }
        out.sse = assign_and_sse();
        out.sse_trace.push_back(out.sse);
    }

    out.members.assign(k, {});
    for (std::size_t i = 0; i < n; ++i) out.members[assignment[i]].push_back(i);
    return out;
}

// H = -sum p ln p with 0 ln 0 = 0 (natural log). Rejects inputs that are not
// a probability vector (1e-9 sum tolerance).
inline double predictive_entropy(std::span<const double> probs) {
    double sum = 0.0;
    for (double p : probs) {
        if (p < 0.0 || !std::isfinite(p)) throw validation_error("entropy needs p >= 0");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw validation_error("entropy input does not sum to 1");
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

// ---------------------------------------------------------------------------
// active label selection (Algorithm 2)

// The pieces of the current meta-model the selection loop needs.
struct ActiveModelHooks {
    // representations used for clustering (penultimate layer / embedding)
    std::function<Matrix(const Matrix&)> embed;
    // predictive distribution of the model adapted on nothing
    PredictFn entry_predict;
    // re-adapt on all labels bought so far; every call is one instrumented
    // adaptation
    std::function<PredictFn(const Batch&)> adapt;
};

struct SelectionStats {
    std::size_t adapt_calls = 0;
    std::vector<std::size_t> quotas;             // per cluster, after remainder assignment
    std::vector<std::size_t> bought_per_cluster;
};

namespace detail {

// without-replacement draws proportional to weights (uniform fallback when
// the mass degenerates)
inline std::vector<std::size_t> weighted_draw(Rng& rng, std::vector<double> weights,
                                              std::vector<std::size_t> candidates,
                                              std::size_t count) {
    std::vector<std::size_t> chosen;
    chosen.reserve(count);
    for (std::size_t d = 0; d < count; ++d) {
        double total = 0.0;
        for (double w : weights) total += w;
        std::size_t pick;
        if (total <= 1e-300) {
            pick = rng.index(candidates.size());
        } else {
            pick = rng.weighted_index(weights);
        }
        chosen.push_back(candidates[pick]);
        candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
        weights.erase(weights.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    return chosen;
}

}  // namespace detail

// Buys exactly L labels from the pool: cluster the embeddings, allocate
// per-cluster quotas, then walk the clusters sampling members without
// replacement proportionally to the current model's predictive entropy,
// re-adapting on everything bought so far before scoring the next cluster.
//
// On a mid-selection budget shortfall the ledger keeps the labels already
// bought and the budget_error propagates.
inline Batch active_select_labels(UnlabeledPool& pool, const ActiveModelHooks& model,
                                  std::size_t labels, const ActiveConfig& cfg,
                                  BudgetLedger& ledger, std::uint64_t seed,
                                  SelectionStats* stats = nullptr) {
    cfg.validate();
    if (labels == 0) throw config_error("active selection needs labels >= 1");
    const std::size_t unrevealed = pool.size() - pool.revealed_count();
    if (unrevealed < labels)
        throw config_error("pool has " + std::to_string(unrevealed) +
                           " unrevealed rows, selection needs " + std::to_string(labels));

    Rng rng(mix64(seed, 0xAC71E));
    const Matrix reps = model.embed(pool.features());
    const std::size_t k = std::min(cfg.clusters, labels);
    const ClusterAssignment clusters = kmeanspp_cluster(reps, k, cfg.lloyd_iterations, rng.next_u64());

    // entry-model entropies drive the quota allocation
    std::vector<double> entry_h(pool.size(), 0.0);
    for (std::size_t i = 0; i < pool.size(); ++i)
        entry_h[i] = predictive_entropy(model.entry_predict(pool.features().row(i)));

    std::vector<double> mean_h(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        double sum = 0.0;
        std::size_t cnt = 0;
        for (std::size_t i : clusters.members[c]) {
            if (pool.is_revealed(i)) continue;
            sum += entry_h[i];
            ++cnt;
        }
        mean_h[c] = cnt ? sum / static_cast<double>(cnt) : -1.0;
    }
    // clusters by descending mean entropy, ties toward the lower index
    std::vector<std::size_t> by_entropy(k);
    std::iota(by_entropy.begin(), by_entropy.end(), 0);
    std::stable_sort(by_entropy.begin(), by_entropy.end(),
                     [&](std::size_t a, std::size_t b) { return mean_h[a] > mean_h[b]; });

    std::vector<std::size_t> quota(k, labels / k);
    for (std::size_t r = 0; r < labels % k; ++r) quota[by_entropy[r]] += 1;
    if (stats) {
        stats->quotas = quota;
        stats->bought_per_cluster.assign(k, 0);
        stats->adapt_calls = 0;
    }

    Batch acquired;
    acquired.features.cols = pool.features().cols;
    PredictFn predictor = model.entry_predict;

    auto unrevealed_members = [&](std::size_t c) {
        std::vector<std::size_t> out;
        for (std::size_t i : clusters.members[c])
            if (!pool.is_revealed(i)) out.push_back(i);
        return out;
    };

    auto buy = [&](std::size_t row, std::size_t cluster_idx) {
        auto [feat, label] = request_label(pool, row, ledger);
        acquired.features.data.insert(acquired.features.data.end(), feat.begin(), feat.end());
        acquired.features.rows += 1;
        acquired.labels.push_back(label);
        if (stats) stats->bought_per_cluster[cluster_idx] += 1;
    };

    auto readapt = [&]() {
        predictor = model.adapt(acquired);
        if (stats) stats->adapt_calls += 1;
    };

    if (cfg.singleton_batches) {
        // per-singleton reading: one label per cluster visit, round-robin
        std::size_t bought = 0;
        std::size_t c = 0;
        while (bought < labels) {
            const std::size_t cluster_idx = c % k;
            c += 1;
            auto members = unrevealed_members(cluster_idx);
            if (members.empty()) continue;
            std::vector<double> w(members.size());
            for (std::size_t i = 0; i < members.size(); ++i)
                w[i] = predictive_entropy(predictor(pool.features().row(members[i])));
            const auto pick = detail::weighted_draw(rng, std::move(w), std::move(members), 1);
            buy(pick[0], cluster_idx);
            ++bought;
            readapt();
        }
        return acquired;
    }

    for (std::size_t c = 0; c < k; ++c) {
        auto members = unrevealed_members(c);
        const std::size_t take = std::min(quota[c], members.size());
        std::size_t deficit = quota[c] - take;
        if (deficit > 0) {
            // hand the shortfall to unprocessed clusters in mean-entropy order
            while (deficit > 0) {
                bool placed = false;
                for (std::size_t cand : by_entropy) {
                    if (cand <= c) continue;
                    if (quota[cand] < unrevealed_members(cand).size()) {
                        quota[cand] += 1;
                        --deficit;
                        placed = true;
                        break;
                    }
                }
                if (!placed) break;  // mopped up after the loop
            }
        }
        if (take > 0) {
            std::vector<double> w(members.size());
            for (std::size_t i = 0; i < members.size(); ++i)
                w[i] = predictive_entropy(predictor(pool.features().row(members[i])));
            for (std::size_t row : detail::weighted_draw(rng, std::move(w), std::move(members), take))
                buy(row, c);
        }
        readapt();
    }

    // the exactly-L contract survives pathological member/quota interactions
    while (acquired.size() < labels) {
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < pool.size(); ++i)
            if (!pool.is_revealed(i)) rest.push_back(i);
        std::vector<double> w(rest.size());
        for (std::size_t i = 0; i < rest.size(); ++i)
            w[i] = predictive_entropy(predictor(pool.features().row(rest[i])));
        const auto pick = detail::weighted_draw(rng, std::move(w), std::move(rest), 1);
        std::size_t row = pick[0];
        double best = std::numeric_limits<double>::infinity();
        std::size_t cluster_idx = 0;
        for (std::size_t c = 0; c < k; ++c) {
            const double d = squared_distance(reps.row(row), clusters.centers.row(c));
            if (d < best) {
                best = d;
                cluster_idx = c;
            }
        }
        buy(row, cluster_idx);
    }
    return acquired;
}

// Hooks binding the selection loop to a meta-method's current parameters.
// Gradient-based methods cluster on the penultimate activation and score with
// softmax logits after gd_adapt; ProtoNets cluster on the embedding output
// and score with the prototype softmax.
inline ActiveModelHooks make_active_hooks(const NetworkSpec& spec, const ParamVector& theta,
                                          MetaMethod method, const AdaptationConfig& inner,
                                          std::size_t ways) {
    ActiveModelHooks hooks;
    const bool proto = method == MetaMethod::protonet;
    hooks.embed = [&spec, &theta, proto](const Matrix& feats) {
        Batch b;
        b.features = feats;
        if (proto || spec.layers.size() == 1) return forward(spec, theta, b);
        auto acts = forward_all(spec, theta, b);
        return acts[spec.layers.size() - 1];  // penultimate activation
    };
    if (proto) {
        hooks.entry_predict = [ways](std::span<const double>) {
            return std::vector<double>(ways, 1.0 / static_cast<double>(ways));
        };
        hooks.adapt = [&spec, &theta, ways](const Batch& labeled) -> PredictFn {
            const PrototypeSet protos =
                compute_prototypes(forward(spec, theta, labeled), labeled.labels);
            return [&spec, &theta, protos, ways](std::span<const double> x) {
                Batch one;
                one.features = Matrix(1, x.size());
                std::copy(x.begin(), x.end(), one.features.data.begin());
                return proto_predict(forward(spec, theta, one).row(0), protos, ways);
            };
        };
    } else {
        hooks.entry_predict = [&spec, &theta](std::span<const double> x) {
            Batch one;
            one.features = Matrix(1, x.size());
            std::copy(x.begin(), x.end(), one.features.data.begin());
            return softmax(forward(spec, theta, one).row(0));
        };
        hooks.adapt = [&spec, &theta, inner](const Batch& labeled) -> PredictFn {
            const ParamVector adapted = gd_adapt(spec, theta, labeled, inner);
            return [&spec, adapted](std::span<const double> x) {
                Batch one;
                one.features = Matrix(1, x.size());
                std::copy(x.begin(), x.end(), one.features.data.begin());
                return softmax(forward(spec, adapted, one).row(0));
            };
        };
    }
    return hooks;
}

// ---------------------------------------------------------------------------
// active meta-training (Algorithm 1)

enum class SelectionStrategy { active, uniform_random };

// Splits L labeled rows into a support/query episode. Query methods hold out
// up to Kq rows per class (the most recently acquired ones); Reptile-style
// methods keep everything in the support set.
inline Episode episode_from_labels(const Batch& labeled, std::size_t ways,
                                   std::size_t query_shots, std::int64_t task_id) {
    Episode ep;
    ep.ways = ways;
    ep.query_shots = query_shots;
    ep.task_id = task_id;
    const std::size_t dim = labeled.features.cols;
    ep.support.features.cols = dim;
    ep.query.features.cols = dim;

    std::vector<bool> to_query(labeled.size(), false);
    if (query_shots > 0) {
        std::map<int, std::size_t> taken;
        for (std::size_t r = labeled.size(); r-- > 0;) {
            if (taken[labeled.labels[r]] < query_shots) {
                to_query[r] = true;
                taken[labeled.labels[r]] += 1;
            }
        }
    }
    for (std::size_t r = 0; r < labeled.size(); ++r) {
        Batch& dst = to_query[r] ? ep.query : ep.support;
        auto row = labeled.features.row(r);
        dst.features.data.insert(dst.features.data.end(), row.begin(), row.end());
        dst.features.rows += 1;
        dst.labels.push_back(labeled.labels[r]);
    }
    ep.support_shots = ep.support.size() / std::max<std::size_t>(ways, 1);
    return ep;
}

// Budgeted meta-training with task acquisition every P outer steps: draw an
// unlabeled pool, select L labels (actively or uniformly at random for the
// ablation), append the task, and keep meta-updating on batches drawn from
// the stored tasks.
inline MetaTrainResult active_meta_train(const NetworkSpec& spec, const MetaConfig& cfg,
                                         const TaskSource& train_src, BudgetLedger& ledger,
                                         const ActiveConfig& active_cfg, std::uint64_t seed,
                                         SelectionStrategy selection = SelectionStrategy::active,
                                         std::vector<SelectionStats>* stats_out = nullptr) {
    cfg.validate();
    active_cfg.validate();
    spec.validate();
    const std::size_t labels = active_cfg.labels_per_task;
    if (!ledger.can_afford(labels))
        throw config_error("budget cannot cover one task of " + std::to_string(labels) + " labels");

    MetaTrainResult result;
    result.theta = init_params(spec, mix64(seed, 0x1217));

    Rng batch_rng(mix64(seed, 0xBA7C4));
    detail::AdamState adam;
    MetaState state{result.theta, 0, seed, &ledger};
    const bool reptile_like =
        cfg.method == MetaMethod::reptile || cfg.method == MetaMethod::fedavg;
    const std::size_t kq = cfg.uses_query() ? cfg.query_shots : 0;

    std::vector<Episode> stored;
    std::int64_t next_task = 0;

    for (std::size_t t = 1; t <= cfg.outer_steps; ++t) {
        if ((t - 1) % active_cfg.acquisition_period == 0 && ledger.can_afford(labels)) {
            UnlabeledPool pool =
                make_unlabeled_pool(train_src, cfg.ways, active_cfg.pool_per_class, next_task);
            Batch labeled;
            if (selection == SelectionStrategy::active) {
                const ActiveModelHooks hooks =
                    make_active_hooks(spec, state.theta, cfg.method, cfg.inner, cfg.ways);
                SelectionStats stats;
                labeled = active_select_labels(pool, hooks, labels, active_cfg, ledger,
                                               mix64(seed, 0x5E1EC7, t), &stats);
                if (stats_out) stats_out->push_back(std::move(stats));
            } else {
                Rng rng(mix64(seed, 0x04AFD, t));
                labeled.features.cols = pool.features().cols;
                for (std::size_t pick : rng.sample_without_replacement(pool.size(), labels)) {
                    auto [feat, label] = request_label(pool, pick, ledger);
                    labeled.features.data.insert(labeled.features.data.end(), feat.begin(),
                                                 feat.end());
                    labeled.features.rows += 1;
                    labeled.labels.push_back(label);
                }
            }
            stored.push_back(episode_from_labels(labeled, cfg.ways, kq, next_task));
            ++next_task;
        }

        std::vector<Episode> batch;
        batch.reserve(cfg.meta_batch);
        for (std::size_t j = 0; j < cfg.meta_batch; ++j)
            batch.push_back(stored[batch_rng.index(stored.size())]);

        const double step_size = cfg.outer_step_size(t);
        if (reptile_like) {
            reptile_meta_step(spec, state, batch, step_size, cfg.inner);
        } else if (cfg.method == MetaMethod::protonet) {
            detail::outer_update(cfg, state.theta, protonet_meta_grad(spec, state.theta, batch),
                                 step_size, adam);
            state.step += 1;
        } else {
            const MamlOrder order =
                cfg.method == MetaMethod::maml ? MamlOrder::second : MamlOrder::first;
            detail::outer_update(cfg, state.theta,
                                 maml_meta_grad(spec, state.theta, batch, order, cfg.inner,
                                                cfg.second_order_param_ceiling),
                                 step_size, adam);
            state.step += 1;
        }
        if (!state.theta.all_finite()) throw numerical_error("parameters diverged", t);

        if (cfg.curve_interval && t % cfg.curve_interval == 0)
            result.curve.push_back(detail::curve_point(spec, cfg, state.theta, batch, t));
    }

    result.outer_steps_run = cfg.outer_steps;
    result.tasks_acquired = stored.size();
    result.labels_spent = ledger.spent;
    result.theta = std::move(state.theta);
    return result;
}

}  // namespace metalab

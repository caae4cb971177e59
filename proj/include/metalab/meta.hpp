#pragma once

// Outer-loop meta-algorithms: Reptile, MAML (first- and second-order),
// ProtoNets, FedAvg, plus the Reptile-direction alignment diagnostic.
//
// FedAvg is Reptile without fine-tuning at test time: the two share one
// training code path bit for bit and differ only inside meta_eval.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metalab/adaptation.hpp"
#include "metalab/errors.hpp"
#include "metalab/network.hpp"
#include "metalab/rng.hpp"
#include "metalab/tasks.hpp"

namespace metalab {

enum class MetaMethod { reptile, maml, fomaml, protonet, fedavg };
enum class MamlOrder { first, second };
enum class OuterOptimizer { sgd, adam };

inline const char* method_name(MetaMethod m) {
    switch (m) {
        case MetaMethod::reptile: return "reptile";
        case MetaMethod::maml: return "maml";
        case MetaMethod::fomaml: return "fomaml";
        case MetaMethod::protonet: return "protonet";
        default: return "fedavg";
    }
}

inline MetaMethod method_from_name(const std::string& s) {
    if (s == "reptile") return MetaMethod::reptile;
    if (s == "maml") return MetaMethod::maml;
    if (s == "fomaml") return MetaMethod::fomaml;
    if (s == "protonet") return MetaMethod::protonet;
    if (s == "fedavg") return MetaMethod::fedavg;
    throw config_error("unknown method '" + s + "'");
}

struct MetaConfig {
    MetaMethod method = MetaMethod::reptile;
    std::size_t outer_steps = 2000;  // T'
    double outer_lr = 1.0;           // epsilon for reptile/fedavg, alpha' otherwise
    // Outer step sizes follow alpha'_t = min(outer_lr, outer_c / t); with the
    // default outer_c = outer_lr * outer_steps the schedule stays flat within
    // the run while still satisfying the non-increasing alpha'_t <= c'/t form.
    double outer_c = 0.0;  // 0 = auto
    std::size_t meta_batch = 4;
    AdaptationConfig inner;
    std::size_t query_shots = 1;  // Kq; must be 0 for reptile/fedavg

    // episode shape used when this config drives training/evaluation
    std::size_t ways = 5;
    std::size_t shots = 1;
    SampleStrategy strategy = SampleStrategy::stratified;

    // evaluation-time adaptation (fedavg always evaluates with 0 steps)
    std::size_t eval_inner_steps = 10;
    std::size_t eval_query_shots = 1;

    std::size_t second_order_param_ceiling = 10000;

    OuterOptimizer outer_opt = OuterOptimizer::sgd;
    double adam_beta1 = 0.0;  // beta1 = 0 mirrors the reference calibration
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    std::size_t curve_interval = 0;  // record a training-curve point every N steps; 0 = off

    // optional early stop on a validation plateau (off by default)
    std::size_t early_stop_patience = 0;
    std::size_t early_stop_interval = 200;
    std::size_t early_stop_eval_tasks = 20;

    bool uses_query() const {
        return method == MetaMethod::maml || method == MetaMethod::fomaml ||
               method == MetaMethod::protonet;
    }

    double outer_step_size(std::size_t t) const {
        const double c = outer_c > 0.0 ? outer_c : outer_lr * static_cast<double>(outer_steps);
        return std::min(outer_lr, c / static_cast<double>(t));
    }

    void validate() const {
        if (outer_lr <= 0.0) throw config_error("outer step size must be positive");
        if (meta_batch == 0) throw config_error("meta-batch size must be positive");
        if (ways < 1) throw config_error("ways must be positive");
        if (!uses_query() && query_shots != 0)
            throw config_error(std::string(method_name(method)) +
                               " optimizes the empirical estimator; query-shots must be 0");
        if (uses_query() && query_shots == 0)
            throw config_error(std::string(method_name(method)) + " needs query-shots >= 1");
        inner.validate();
    }
};

// Mutable outer-loop state.
struct MetaState {
    ParamVector theta;
    std::size_t step = 0;
    std::uint64_t seed = 0;
    BudgetLedger* ledger = nullptr;
};

// ---------------------------------------------------------------------------
// meta updates

// theta0 <- theta0 + eps * mean_i(A(S_i) - theta0)
inline void reptile_meta_step(const NetworkSpec& spec, MetaState& state,
                              const std::vector<Episode>& episodes, double eps,
                              const AdaptationConfig& inner) {
    if (episodes.empty()) throw config_error("reptile_meta_step needs at least one episode");
    for (const auto& ep : episodes)
        if (!ep.query.empty())
            throw config_error("reptile episodes keep all labeled data in the support set");
    std::vector<double> delta(state.theta.size(), 0.0);
    for (const auto& ep : episodes) {
        const ParamVector adapted = gd_adapt(spec, state.theta, ep.support, inner);
        for (std::size_t i = 0; i < delta.size(); ++i)
            delta[i] += adapted.values[i] - state.theta.values[i];
    }
    const double scale = eps / static_cast<double>(episodes.size());
    for (std::size_t i = 0; i < delta.size(); ++i) state.theta.values[i] += scale * delta[i];
    state.step += 1;
}

namespace detail {

// Right-to-left product of (I - alpha_t H_t) against g: reverse mode over the
// unrolled inner steps. traj holds theta_0..theta_T; each Hessian-vector
// product is exact (dual-number forward-over-reverse).
inline std::vector<double> backprop_through_adaptation(const NetworkSpec& spec,
                                                       const std::vector<ParamVector>& traj,
                                                       const Batch& support,
                                                       const AdaptationConfig& inner,
                                                       std::vector<double> g) {
    for (std::size_t t = traj.size() - 1; t-- > 0;) {
        const double alpha = inner.step_size(t + 1);
        const auto hv = hessian_vector_product(spec, traj[t], support, inner.loss, g);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= alpha * hv[i];
    }
    return g;
}

}  // namespace detail

// Gradient of the held-out (query) objective with respect to theta0, averaged
// over the episode batch. order=second differentiates through the inner-loop
// updates exactly; order=first evaluates the query-loss gradient at theta_T
// and treats the inner loop as constant.
inline ParamVector maml_meta_grad(const NetworkSpec& spec, const ParamVector& theta0,
                                  const std::vector<Episode>& episodes, MamlOrder order,
                                  const AdaptationConfig& inner,
                                  std::size_t second_order_param_ceiling = 10000) {
    if (episodes.empty()) throw config_error("maml_meta_grad needs at least one episode");
    if (order == MamlOrder::second && theta0.size() > second_order_param_ceiling)
        throw config_error("second-order differentiation is limited to " +
                           std::to_string(second_order_param_ceiling) +
                           " parameters; use fomaml for larger nets");
    ParamVector total = theta0.zeros_like();
    for (const auto& ep : episodes) {
        if (ep.query.empty()) throw config_error("maml episode has an empty query set");
        const auto traj = gd_adapt_trajectory(spec, theta0, ep.support, inner);
        auto [qloss, qgrad] = loss_and_grad(spec, traj.back(), ep.query, inner.loss);
        if (!std::isfinite(qloss)) throw numerical_error("non-finite query loss", traj.size() - 1);
        std::vector<double> g = std::move(qgrad.values);
        if (order == MamlOrder::second)
            g = detail::backprop_through_adaptation(spec, traj, ep.support, inner, std::move(g));
        for (std::size_t i = 0; i < g.size(); ++i) total.values[i] += g[i];
    }
    const double inv = 1.0 / static_cast<double>(episodes.size());
    for (double& v : total.values) v *= inv;
    return total;
}

// Query loss of the prototype classifier built from the support set, plus its
// exact gradient w.r.t. the embedding parameters (reverse mode through the
// prototype means). Query examples whose class has no prototype contribute
// the clipped constant -kLogFloor and no gradient.
inline std::pair<double, ParamVector> protonet_loss_and_grad(const NetworkSpec& spec,
                                                             const ParamVector& theta,
                                                             const Episode& ep,
                                                             PrototypeDistance dist =
                                                                 PrototypeDistance::squared_euclidean) {
    if (ep.support.empty() || ep.query.empty())
        throw config_error("protonet episode needs non-empty support and query");
    if (dist != PrototypeDistance::squared_euclidean)
        throw config_error("protonet training uses the squared-Euclidean objective");
    const Matrix se = forward(spec, theta, ep.support);
    const Matrix qe = forward(spec, theta, ep.query);
    const std::size_t dim = se.cols;
    const PrototypeSet protos = compute_prototypes(se, ep.support.labels);

    // per-class support counts for the mean backprop
    std::map<int, double> counts;
    for (int y : ep.support.labels) counts[y] += 1.0;

    Matrix sgrad(se.rows, dim);
    Matrix qgrad(qe.rows, dim);
    const double inv_q = 1.0 / static_cast<double>(qe.rows);
    double loss = 0.0;

    const std::size_t nproto = protos.prototypes.size();
    std::vector<int> proto_cls;
    proto_cls.reserve(nproto);
    for (const auto& [cls, p] : protos.prototypes) proto_cls.push_back(cls);

    std::vector<double> logits(nproto);
    std::map<int, std::vector<double>> proto_grad;  // d(loss)/d(prototype)
    for (int cls : proto_cls) proto_grad[cls].assign(dim, 0.0);

    for (std::size_t r = 0; r < qe.rows; ++r) {
        const auto x = qe.row(r);
        const int y = ep.query.labels[r];
        if (!protos.present(y)) {
            loss += -kLogFloor * inv_q;  // excluded-class convention: clipped constant
            continue;
        }
        for (std::size_t j = 0; j < nproto; ++j)
            logits[j] = -squared_distance(x, protos.prototypes.at(proto_cls[j]));
        const auto probs = softmax(logits);
        std::size_t yidx = 0;
        while (proto_cls[yidx] != y) ++yidx;
        loss += -std::max(std::log(std::max(probs[yidx], 1e-300)), kLogFloor) * inv_q;
        for (std::size_t j = 0; j < nproto; ++j) {
            const double dl = (probs[j] - (j == yidx ? 1.0 : 0.0)) * inv_q;  // d(loss)/d(logit_j)
            const auto& proto = protos.prototypes.at(proto_cls[j]);
            auto& pg = proto_grad[proto_cls[j]];
            for (std::size_t dimi = 0; dimi < dim; ++dimi) {
                const double diff = x[dimi] - proto[dimi];
                qgrad.at(r, dimi) += dl * (-2.0) * diff;
                pg[dimi] += dl * 2.0 * diff;
            }
        }
    }
    // prototypes are per-class means: spread their gradient over the members
    for (std::size_t r = 0; r < se.rows; ++r) {
        const int y = ep.support.labels[r];
        const auto& pg = proto_grad.at(y);
        const double inv_cnt = 1.0 / counts.at(y);
        for (std::size_t j = 0; j < dim; ++j) sgrad.at(r, j) = pg[j] * inv_cnt;
    }

    ParamVector grad = backward_from_outputs(spec, theta, ep.query, qgrad);
    const ParamVector grad_s = backward_from_outputs(spec, theta, ep.support, sgrad);
    for (std::size_t i = 0; i < grad.size(); ++i) grad.values[i] += grad_s.values[i];
    return {loss, std::move(grad)};
}

// Mean ProtoNets gradient over an episode batch.
inline ParamVector protonet_meta_grad(const NetworkSpec& spec, const ParamVector& theta,
                                      const std::vector<Episode>& episodes) {
    if (episodes.empty()) throw config_error("protonet_meta_grad needs at least one episode");
    ParamVector total = theta.zeros_like();
    for (const auto& ep : episodes) {
        auto [loss, grad] = protonet_loss_and_grad(spec, theta, ep);
        if (!std::isfinite(loss)) throw numerical_error("non-finite protonet loss", 0);
        for (std::size_t i = 0; i < grad.size(); ++i) total.values[i] += grad.values[i];
    }
    const double inv = 1.0 / static_cast<double>(episodes.size());
    for (double& v : total.values) v *= inv;
    return total;
}

// ---------------------------------------------------------------------------
// training driver

struct CurvePoint {
    std::size_t step = 0;
    double accuracy = 0.0;
    double loss = 0.0;
};

struct MetaTrainResult {
    ParamVector theta;
    std::vector<CurvePoint> curve;
    std::size_t tasks_acquired = 0;   // unique tasks ever adapted on
    std::size_t labels_spent = 0;     // 0 in the classical regime
    std::size_t outer_steps_run = 0;  // < outer_steps only with early stop
};

struct EvalResult {
    double mean_accuracy = 0.0;
    double mean_loss = 0.0;
    std::vector<double> per_task_accuracy;
};

namespace detail {

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;
};

inline void outer_update(const MetaConfig& cfg, ParamVector& theta, const ParamVector& grad,
                         double step_size, AdamState& adam) {
    if (cfg.outer_opt == OuterOptimizer::sgd) {
        theta = sgd_step(theta, grad, step_size);
        return;
    }
    if (adam.m.empty()) {
        adam.m.assign(theta.size(), 0.0);
        adam.v.assign(theta.size(), 0.0);
    }
    adam.t += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad.values[i];
        if (!std::isfinite(g)) throw numerical_error("non-finite gradient entry", i);
        adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * g;
        adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * g * g;
        theta.values[i] -= step_size * (adam.m[i] / c1) / (std::sqrt(adam.v[i] / c2) + cfg.adam_eps);
    }
}

// adapted-model accuracy on one episode (query when present, else support)
inline CurvePoint curve_point(const NetworkSpec& spec, const MetaConfig& cfg,
                              const ParamVector& theta, const std::vector<Episode>& episodes,
                              std::size_t step) {
    double acc = 0.0, loss = 0.0;
    for (const auto& ep : episodes) {
        const Batch& target = ep.query.empty() ? ep.support : ep.query;
        std::pair<double, double> r;
        if (cfg.method == MetaMethod::protonet) {
            const PrototypeSet protos =
                compute_prototypes(forward(spec, theta, ep.support), ep.support.labels);
            r = evaluate(
                [&](std::span<const double> x) {
                    Batch one;
                    one.features = Matrix(1, x.size());
                    std::copy(x.begin(), x.end(), one.features.data.begin());
                    return proto_predict(forward(spec, theta, one).row(0), protos, ep.ways);
                },
                target);
        } else {
            const ParamVector adapted = gd_adapt(spec, theta, ep.support, cfg.inner);
            r = evaluate(
                [&](std::span<const double> x) {
                    Batch one;
                    one.features = Matrix(1, x.size());
                    std::copy(x.begin(), x.end(), one.features.data.begin());
                    return softmax(forward(spec, adapted, one).row(0));
                },
                target);
        }
        acc += r.first;
        loss += r.second;
    }
    const auto n = static_cast<double>(episodes.size());
    return {step, acc / n, loss / n};
}

}  // namespace detail

inline EvalResult meta_eval(const NetworkSpec& spec, const ParamVector& theta,
                            const TaskSource& eval_src, const MetaConfig& cfg,
                            std::size_t n_tasks, std::uint64_t seed,
                            std::optional<std::size_t> eval_shots = std::nullopt);

// Meta-training. In the budget-limited mode (ledger != nullptr) tasks are
// acquired once up front, stored, and resampled with replacement; in the
// classical mode (ledger == nullptr) fresh tasks are generated every step.
inline MetaTrainResult meta_train(const NetworkSpec& spec, const MetaConfig& cfg,
                                  const TaskSource& train_src, BudgetLedger* ledger,
                                  std::uint64_t seed, const TaskSource* early_stop_src = nullptr) {
    cfg.validate();
    spec.validate();
    const bool reptile_like =
        cfg.method == MetaMethod::reptile || cfg.method == MetaMethod::fedavg;
    const std::size_t kq = cfg.uses_query() ? cfg.query_shots : 0;

    MetaTrainResult result;
    result.theta = init_params(spec, mix64(seed, 0x1217));

    // task storage (budget-limited mode)
    std::vector<Episode> stored;
    if (ledger) {
        const std::size_t cost =
            episode_label_cost(cfg.ways, cfg.shots, kq, ledger->counts_query);
        std::int64_t task_id = 0;
        while (ledger->can_afford(cost)) {
            stored.push_back(
                sample_episode(train_src, cfg.ways, cfg.shots, kq, cfg.strategy, task_id, ledger));
            ++task_id;
        }
        if (stored.empty())
            throw config_error("budget " + std::to_string(ledger->total) +
                               " cannot cover a single task (cost " + std::to_string(cost) + ")");
        result.tasks_acquired = stored.size();
    }

    Rng batch_rng(mix64(seed, 0xBA7C4));
    detail::AdamState adam;
    MetaState state{result.theta, 0, seed, ledger};

    double best_val = -1.0;
    std::size_t bad_evals = 0;
    std::int64_t fresh_task_id = 0;

    std::size_t t = 1;
    for (; t <= cfg.outer_steps; ++t) {
        std::vector<Episode> batch;
        batch.reserve(cfg.meta_batch);
        if (ledger) {
            for (std::size_t j = 0; j < cfg.meta_batch; ++j)
                batch.push_back(stored[batch_rng.index(stored.size())]);
        } else {
            for (std::size_t j = 0; j < cfg.meta_batch; ++j)
                batch.push_back(sample_episode(train_src, cfg.ways, cfg.shots, kq, cfg.strategy,
                                               fresh_task_id++, nullptr));
        }

        const double step_size = cfg.outer_step_size(t);
        if (reptile_like) {
            reptile_meta_step(spec, state, batch, step_size, cfg.inner);
        } else if (cfg.method == MetaMethod::protonet) {
            const ParamVector grad = protonet_meta_grad(spec, state.theta, batch);
            detail::outer_update(cfg, state.theta, grad, step_size, adam);
            state.step += 1;
        } else {
            const MamlOrder order =
                cfg.method == MetaMethod::maml ? MamlOrder::second : MamlOrder::first;
            const ParamVector grad = maml_meta_grad(spec, state.theta, batch, order, cfg.inner,
                                                    cfg.second_order_param_ceiling);
            detail::outer_update(cfg, state.theta, grad, step_size, adam);
            state.step += 1;
        }
        if (!state.theta.all_finite()) throw numerical_error("parameters diverged", t);

        if (cfg.curve_interval && t % cfg.curve_interval == 0)
            result.curve.push_back(detail::curve_point(spec, cfg, state.theta, batch, t));

        if (cfg.early_stop_patience && early_stop_src && t % cfg.early_stop_interval == 0) {
            const EvalResult val = meta_eval(spec, state.theta, *early_stop_src, cfg,
                                             cfg.early_stop_eval_tasks, mix64(seed, 0xE5, t));
            if (val.mean_accuracy > best_val + 1e-12) {
                best_val = val.mean_accuracy;
                bad_evals = 0;
            } else if (++bad_evals >= cfg.early_stop_patience) {
                break;
            }
        }
    }
    result.outer_steps_run = std::min(t, cfg.outer_steps);
    if (!ledger) result.tasks_acquired = static_cast<std::size_t>(fresh_task_id);
    result.labels_spent = ledger ? ledger->spent : 0;
    result.theta = std::move(state.theta);
    return result;
}

// Transfer-risk estimate on held-out tasks. Gradient-based methods fine-tune
// on each support set for cfg.eval_inner_steps; FedAvg evaluates theta as-is
// (zero adaptation steps); ProtoNets build prototypes from the support.
inline EvalResult meta_eval(const NetworkSpec& spec, const ParamVector& theta,
                            const TaskSource& eval_src, const MetaConfig& cfg,
                            std::size_t n_tasks, std::uint64_t seed,
                            std::optional<std::size_t> eval_shots) {
    if (eval_src.split == Split::train)
        throw config_error("meta_eval expects a validation or test split");
    if (n_tasks == 0) throw config_error("meta_eval needs at least one task");
    const std::size_t shots = eval_shots.value_or(cfg.shots);
    const std::size_t kq = std::max<std::size_t>(cfg.eval_query_shots, 1);

    EvalResult result;
    result.per_task_accuracy.reserve(n_tasks);
    for (std::size_t i = 0; i < n_tasks; ++i) {
        std::int64_t task_id;
        if (eval_src.mode == TaskMode::federated) {
            const std::size_t users = split_user_count(eval_src);
            if (users == 0) throw config_error("no users in evaluation split");
            task_id = static_cast<std::int64_t>(i % users);
        } else {
            task_id = static_cast<std::int64_t>(mix64(seed, 0xE7A5, i) >> 1);
        }
        const Episode ep = sample_episode(eval_src, cfg.ways, shots, kq,
                                          SampleStrategy::stratified, task_id, nullptr);
        std::pair<double, double> r;
        if (cfg.method == MetaMethod::protonet) {
            const PrototypeSet protos =
                compute_prototypes(forward(spec, theta, ep.support), ep.support.labels);
            r = evaluate(
                [&](std::span<const double> x) {
                    Batch one;
                    one.features = Matrix(1, x.size());
                    std::copy(x.begin(), x.end(), one.features.data.begin());
                    return proto_predict(forward(spec, theta, one).row(0), protos, ep.ways);
                },
                ep.query);
        } else {
            AdaptationConfig eval_cfg = cfg.inner;
            eval_cfg.steps = cfg.method == MetaMethod::fedavg ? 0 : cfg.eval_inner_steps;
            const ParamVector adapted = gd_adapt(spec, theta, ep.support, eval_cfg);
            r = evaluate(
                [&](std::span<const double> x) {
                    Batch one;
                    one.features = Matrix(1, x.size());
                    std::copy(x.begin(), x.end(), one.features.data.begin());
                    return softmax(forward(spec, adapted, one).row(0));
                },
                ep.query);
        }
        result.per_task_accuracy.push_back(r.first);
        result.mean_accuracy += r.first;
        result.mean_loss += r.second;
    }
    result.mean_accuracy /= static_cast<double>(n_tasks);
    result.mean_loss /= static_cast<double>(n_tasks);
    return result;
}

// Cosine similarity between the Reptile direction (theta0 - A(S)) and the
// exact gradient of the empirical estimator R(A_theta0, S) at theta0,
// computed by full reverse mode through the T inner steps.
inline double reptile_alignment_diagnostic(const NetworkSpec& spec, const ParamVector& theta0,
                                           const Batch& support, const AdaptationConfig& inner) {
    if (inner.steps < 1) throw config_error("alignment diagnostic needs T >= 1");
    const auto traj = gd_adapt_trajectory(spec, theta0, support, inner);

    std::vector<double> rep_dir(theta0.size());
    for (std::size_t i = 0; i < theta0.size(); ++i)
        rep_dir[i] = theta0.values[i] - traj.back().values[i];

    auto [loss, grad] = loss_and_grad(spec, traj.back(), support, inner.loss);
    (void)loss;
    const std::vector<double> emp_grad = detail::backprop_through_adaptation(
        spec, traj, support, inner, std::move(grad.values));

    const double nr = norm2(rep_dir), ng = norm2(emp_grad);
    if (nr < 1e-150 || ng < 1e-150)
        throw undefined_cosine_error("both directions vanish at a stationary point");
    return dot(rep_dir, emp_grad) / (nr * ng);
}

}  // namespace metalab

#pragma once

// Inner-loop learners: T-step full-batch gradient-descent adaptation and the
// prototype-based soft-nearest-neighbor classifier, plus per-task evaluation.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "metalab/errors.hpp"
#include "metalab/network.hpp"

namespace metalab {

enum class StepSchedule { constant, decaying };

// Configuration of the per-task gradient descent A_theta0(S).
struct AdaptationConfig {
    std::size_t steps = 5;  // T
    StepSchedule schedule = StepSchedule::constant;
    double alpha = 0.01;  // base step size
    double c = 1.0;       // decaying schedule: alpha_t = min(alpha, c/t)
    LossSpec loss;

    // t is 1-based; the decaying schedule is non-increasing in t.
    double step_size(std::size_t t) const {
        if (schedule == StepSchedule::constant) return alpha;
        return std::min(alpha, c / static_cast<double>(t));
    }

    void validate() const {
        if (steps > 0 && alpha <= 0.0) throw config_error("adaptation step size must be positive");
        if (schedule == StepSchedule::decaying && c <= 0.0)
            throw config_error("decaying schedule needs c > 0");
    }
};

// T full-batch gradient steps on the support loss, starting from theta0.
// An empty support adapts to nothing (zero-gradient convention), so
// gd_adapt(spec, theta0, {}, cfg) == theta0.
inline ParamVector gd_adapt(const NetworkSpec& spec, const ParamVector& theta0,
                            const Batch& support, const AdaptationConfig& cfg) {
    cfg.validate();
    ParamVector theta = theta0;
    for (std::size_t t = 1; t <= cfg.steps; ++t) {
        auto [loss, grad] = loss_and_grad(spec, theta, support, cfg.loss);
        if (!std::isfinite(loss)) throw numerical_error("non-finite support loss", t);
        theta = sgd_step(theta, grad, cfg.step_size(t));
    }
    return theta;
}

// Same as gd_adapt but keeps the whole trajectory theta_0..theta_T (needed to
// differentiate through the unrolled steps).
inline std::vector<ParamVector> gd_adapt_trajectory(const NetworkSpec& spec,
                                                    const ParamVector& theta0, const Batch& support,
                                                    const AdaptationConfig& cfg) {
    cfg.validate();
    std::vector<ParamVector> traj;
    traj.reserve(cfg.steps + 1);
    traj.push_back(theta0);
    for (std::size_t t = 1; t <= cfg.steps; ++t) {
        auto [loss, grad] = loss_and_grad(spec, traj.back(), support, cfg.loss);
        if (!std::isfinite(loss)) throw numerical_error("non-finite support loss", t);
        traj.push_back(sgd_step(traj.back(), grad, cfg.step_size(t)));
    }
    return traj;
}

// ---------------------------------------------------------------------------
// prototypes

enum class PrototypeDistance { squared_euclidean, euclidean };

// Per-class mean embeddings. Classes absent from the labels are absent from
// the set.
struct PrototypeSet {
    std::map<int, std::vector<double>> prototypes;
    std::size_t embedding_dim = 0;

    bool empty() const { return prototypes.empty(); }
    bool present(int cls) const { return prototypes.count(cls) != 0; }
};

inline PrototypeSet compute_prototypes(const Matrix& embeddings, const std::vector<int>& labels) {
    if (embeddings.rows != labels.size())
        throw config_error("compute_prototypes: rows/labels mismatch");
    PrototypeSet set;
    set.embedding_dim = embeddings.cols;
    std::map<int, std::size_t> counts;
    for (std::size_t r = 0; r < embeddings.rows; ++r) {
        auto& proto = set.prototypes[labels[r]];
        if (proto.empty()) proto.assign(embeddings.cols, 0.0);
        for (std::size_t j = 0; j < embeddings.cols; ++j) proto[j] += embeddings.at(r, j);
        counts[labels[r]] += 1;
    }
    for (auto& [cls, proto] : set.prototypes)
        for (double& v : proto) v /= static_cast<double>(counts[cls]);
    return set;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Softmax over negative distances to the prototypes: p(y) proportional to
// exp(-d(x, c_y)). Returns a dense probability vector over classes
// [0, fallback_ways); absent classes get probability 0. With no prototypes at
// all the distribution is uniform (the defined uncertainty before any labels
// exist).
inline std::vector<double> proto_predict(std::span<const double> embedding,
                                         const PrototypeSet& protos, std::size_t fallback_ways,
                                         PrototypeDistance dist = PrototypeDistance::squared_euclidean) {
    std::size_t n = fallback_ways;
    for (const auto& [cls, proto] : protos.prototypes)
        n = std::max(n, static_cast<std::size_t>(cls) + 1);
    if (n == 0) throw config_error("proto_predict: no classes");
    std::vector<double> probs(n, 0.0);
    if (protos.empty()) {
        const double u = 1.0 / static_cast<double>(n);
        for (double& p : probs) p = u;
        return probs;
    }
    if (embedding.size() != protos.embedding_dim)
        throw config_error("proto_predict: embedding dim mismatch");
    // negative distances through a max-subtracted softmax; adding a constant
    // to all distances cancels
    std::vector<std::pair<int, double>> neg;
    neg.reserve(protos.prototypes.size());
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& [cls, proto] : protos.prototypes) {
        double d = squared_distance(embedding, proto);
        if (dist == PrototypeDistance::euclidean) d = std::sqrt(d);
        neg.emplace_back(cls, -d);
        best = std::max(best, -d);
    }
    double total = 0.0;
    for (auto& [cls, v] : neg) {
        v = std::exp(v - best);
        total += v;
    }
    for (const auto& [cls, v] : neg) probs[static_cast<std::size_t>(cls)] = v / total;
    return probs;
}

// ---------------------------------------------------------------------------
// evaluation

using PredictFn = std::function<std::vector<double>(std::span<const double>)>;

// log clip floor shared with the ProtoNets objective; keeps losses <= 30
constexpr double kLogFloor = -30.0;

// Runs the predictor over a labeled query set. Accuracy breaks argmax ties
// toward the lowest class index; the mean loss is the clipped negative log
// probability of the true class.
inline std::pair<double, double> evaluate(const PredictFn& predict, const Batch& query) {
    if (query.empty() || !query.has_labels())
        throw config_error("evaluate needs a non-empty labeled query set");
    std::size_t correct = 0;
    double loss = 0.0;
    for (std::size_t r = 0; r < query.size(); ++r) {
        const auto probs = predict(query.features.row(r));
        std::size_t arg = 0;
        for (std::size_t j = 1; j < probs.size(); ++j)
            if (probs[j] > probs[arg]) arg = j;
        const auto y = static_cast<std::size_t>(query.labels[r]);
        if (arg == y) ++correct;
        const double p = y < probs.size() ? probs[y] : 0.0;
        loss += -(p > 0.0 ? std::max(std::log(p), kLogFloor) : kLogFloor);
    }
    const auto n = static_cast<double>(query.size());
    return {static_cast<double>(correct) / n, loss / n};
}

// Numerically safe softmax (log-space with max subtraction).
inline std::vector<double> softmax(std::span<const double> logits) {
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

}  // namespace metalab

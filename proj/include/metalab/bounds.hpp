#pragma once

// Numeric evaluators for the stability-based meta-generalization bounds:
// the SGM uniform-stability coefficient, the empirical-estimator bound, the
// held-out (Q-estimator) bound, and the expanded two-level expressions, plus
// sweep tooling and empirical Lipschitz/smoothness estimation.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "metalab/errors.hpp"
#include "metalab/network.hpp"

namespace metalab {

// (L, gamma, c, T) for the inner loop, primed versions for the outer loop,
// plus the loss bound M and failure probability delta.
struct StabilityConstants {
    double inner_lipschitz = 1.0;   // L
    double inner_smoothness = 1.0;  // gamma
    double inner_step_c = 1.0;      // c
    std::size_t inner_steps = 1;    // T

    double outer_lipschitz = 1.0;   // L'
    double outer_smoothness = 1.0;  // gamma'
    double outer_step_c = 1.0;      // c'
    std::size_t outer_steps = 1;    // T'

    double loss_bound = 1.0;  // M
    double delta = 0.05;

    void validate() const {
        if (inner_lipschitz < 0.0 || outer_lipschitz < 0.0)
            throw domain_error("Lipschitz constants must be >= 0");
        if (inner_smoothness <= 0.0 || outer_smoothness <= 0.0 || inner_step_c <= 0.0 ||
            outer_step_c <= 0.0)
            throw domain_error("smoothness and step constants must be positive");
        if (inner_steps < 1 || outer_steps < 1) throw domain_error("step counts must be >= 1");
        if (loss_bound <= 0.0) throw domain_error("loss bound M must be positive");
        if (delta <= 0.0 || delta > 1.0) throw domain_error("delta must lie in (0, 1]");
    }
};

// One evaluated bound: the value plus its additive pieces (value is always
// their sum) and the echoed inputs.
struct BoundResult {
    double value = 0.0;
    double stability_term = 0.0;      // meta-level stability contribution
    double concentration_term = 0.0;  // sqrt(ln(1/delta)/n) contribution
    double inner_term = 0.0;          // within-task 2*beta contribution
    double outer_constant = 0.0;      // C, when derived from SGM constants
    double beta_prime = 0.0;
    double beta = 0.0;
    std::size_t n = 0;
    std::size_t m = 0;
    double delta = 0.0;
};

// Uniform-stability coefficient of T-step SGM with step sizes alpha_t <= c/t
// on an L-Lipschitz, gamma-smooth loss over n samples:
//   beta <= (1 + 1/(gamma c))/(n - 1) * (2 c L^2)^(1/(gamma c + 1)) * T^(1 - 1/(gamma c + 1))
inline double sgm_stability(double lipschitz, double smoothness, double step_c, std::size_t steps,
                            std::size_t n) {
    if (n < 2) throw domain_error("sgm_stability needs n >= 2");
    if (smoothness <= 0.0 || step_c <= 0.0) throw domain_error("sgm_stability needs gamma, c > 0");
    if (steps < 1) throw domain_error("sgm_stability needs T >= 1");
    if (lipschitz < 0.0) throw domain_error("sgm_stability needs L >= 0");
    const double gc = smoothness * step_c;
    const double expo = 1.0 / (gc + 1.0);
    return (1.0 + 1.0 / gc) / static_cast<double>(n - 1) *
           std::pow(2.0 * step_c * lipschitz * lipschitz, expo) *
           std::pow(static_cast<double>(steps), 1.0 - expo);
}

inline void check_delta(double delta) {
    if (delta <= 0.0 || delta > 1.0) throw domain_error("delta must lie in (0, 1]");
}

// Empirical-estimator bound:
//   2 beta' + (4 n beta' + M) sqrt(ln(1/delta) / (2n)) + 2 beta
inline BoundResult maurer_bound(double beta_prime, double beta, std::size_t n, double loss_bound,
                                double delta) {
    if (n < 1) throw domain_error("maurer_bound needs n >= 1");
    check_delta(delta);
    BoundResult r;
    r.n = n;
    r.delta = delta;
    r.beta_prime = beta_prime;
    r.beta = beta;
    r.stability_term = 2.0 * beta_prime;
    r.concentration_term = (4.0 * static_cast<double>(n) * beta_prime + loss_bound) *
                           std::sqrt(std::log(1.0 / delta) / (2.0 * static_cast<double>(n)));
    r.inner_term = 2.0 * beta;
    r.value = r.stability_term + r.concentration_term + r.inner_term;
    return r;
}

// Held-out-estimator bound: the empirical bound without the within-task term.
inline BoundResult q_bound(double beta_prime_q, std::size_t n, double loss_bound, double delta) {
    return maurer_bound(beta_prime_q, 0.0, n, loss_bound, delta);
}

// Expanded two-level bound for SGM meta-optimization of the Q-estimator:
//   B' = (2C/n)(1 + 1/(n-1)) + 2C sqrt(2 ln(1/delta)/n) (1 + 1/(n-1) + M/(4C))
// with C = (1 + 1/(gamma' c')) (2 c' L'^2)^(1/(gamma' c' + 1)) T'^(1 - 1/(gamma' c' + 1)).
// L' = 0 makes M/(4C) singular and is rejected.
inline BoundResult theorem2_bound_q(const StabilityConstants& consts, std::size_t n, double delta) {
    consts.validate();
    check_delta(delta);
    if (n < 2) throw domain_error("theorem2_bound_q needs n >= 2");
    if (consts.outer_lipschitz <= 0.0)
        throw domain_error("L' = 0 makes the M/(4C) term singular");
    const double gc = consts.outer_smoothness * consts.outer_step_c;
    const double expo = 1.0 / (gc + 1.0);
    const double cconst = (1.0 + 1.0 / gc) *
                          std::pow(2.0 * consts.outer_step_c * consts.outer_lipschitz *
                                       consts.outer_lipschitz,
                                   expo) *
                          std::pow(static_cast<double>(consts.outer_steps), 1.0 - expo);
    const double nn = static_cast<double>(n);
    const double crowd = 1.0 + 1.0 / (nn - 1.0);

    BoundResult r;
    r.n = n;
    r.delta = delta;
    r.outer_constant = cconst;
    r.beta_prime = cconst / (nn - 1.0);
    r.stability_term = 2.0 * cconst / nn * crowd;
    r.concentration_term = 2.0 * cconst * std::sqrt(2.0 * std::log(1.0 / delta) / nn) *
                           (crowd + consts.loss_bound / (4.0 * cconst));
    r.inner_term = 0.0;
    r.value = r.stability_term + r.concentration_term;
    return r;
}

// Empirical-estimator variant: the Q bound plus the within-task stability
// term 2 * beta(m) of the inner SGM.
inline BoundResult theorem2_bound_emp(const StabilityConstants& consts, std::size_t n,
                                      std::size_t m, double delta) {
    BoundResult r = theorem2_bound_q(consts, n, delta);
    if (m < 2) throw domain_error("theorem2_bound_emp needs m >= 2");
    r.m = m;
    r.beta = sgm_stability(consts.inner_lipschitz, consts.inner_smoothness, consts.inner_step_c,
                           consts.inner_steps, m);
    r.inner_term = 2.0 * r.beta;
    r.value += r.inner_term;
    return r;
}

// ---------------------------------------------------------------------------
// empirical constant estimation

// Max observed gradient norm (L-hat) and max gradient-difference ratio
// (gamma-hat) over the first probe_count parameter samples, evaluated on each
// provided batch. Both are lower estimates of the true suprema; identical
// parameter pairs are skipped rather than divided by zero.
inline std::pair<double, double> estimate_constants(const NetworkSpec& spec, const LossSpec& loss,
                                                    const std::vector<ParamVector>& theta_samples,
                                                    const std::vector<Batch>& data_samples,
                                                    std::size_t probe_count) {
    if (probe_count < 2) throw config_error("estimate_constants needs probe-count >= 2");
    if (theta_samples.size() < 2) throw config_error("estimate_constants needs >= 2 theta samples");
    if (data_samples.empty()) throw config_error("estimate_constants needs data samples");
    const std::size_t probes = std::min(probe_count, theta_samples.size());

    double l_hat = 0.0, gamma_hat = 0.0;
    for (const Batch& batch : data_samples) {
        std::vector<std::vector<double>> grads(probes);
        for (std::size_t i = 0; i < probes; ++i) {
            grads[i] = loss_and_grad(spec, theta_samples[i], batch, loss).second.values;
            l_hat = std::max(l_hat, norm2(grads[i]));
        }
        for (std::size_t i = 0; i < probes; ++i) {
            for (std::size_t j = i + 1; j < probes; ++j) {
                std::vector<double> dg(grads[i].size()), dt(grads[i].size());
                for (std::size_t x = 0; x < dg.size(); ++x) {
                    dg[x] = grads[i][x] - grads[j][x];
                    dt[x] = theta_samples[i].values[x] - theta_samples[j].values[x];
                }
                const double denom = norm2(dt);
                if (denom == 0.0) continue;
                gamma_hat = std::max(gamma_hat, norm2(dg) / denom);
            }
        }
    }
    return {l_hat, gamma_hat};
}

// ---------------------------------------------------------------------------
// sweeps

struct BoundSweepRow {
    std::string kind;  // "q" or "emp"
    std::size_t n = 0;
    std::size_t m = 0;
    BoundResult result;
};

// One row per (n, m) pair per bound kind; the q rows ignore m by definition.
inline std::vector<BoundSweepRow> bound_sweep(const StabilityConstants& consts,
                                              const std::vector<std::size_t>& n_grid,
                                              const std::vector<std::size_t>& m_grid,
                                              double delta) {
    if (n_grid.empty() || m_grid.empty()) throw config_error("bound_sweep needs non-empty grids");
    std::vector<BoundSweepRow> rows;
    rows.reserve(2 * n_grid.size() * m_grid.size());
    for (std::size_t n : n_grid) {
        for (std::size_t m : m_grid) {
            rows.push_back({"q", n, m, theorem2_bound_q(consts, n, delta)});
            rows.push_back({"emp", n, m, theorem2_bound_emp(consts, n, m, delta)});
        }
    }
    return rows;
}

}  // namespace metalab

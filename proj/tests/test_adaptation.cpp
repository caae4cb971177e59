#include <catch2/catch_amalgamated.hpp>

#include "metalab/adaptation.hpp"
#include "metalab/rng.hpp"

using namespace metalab;

namespace {

Batch make_batch(const std::vector<std::vector<double>>& rows, std::vector<int> labels = {}) {
    Batch b;
    b.features = Matrix(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c) b.features.at(r, c) = rows[r][c];
    b.labels = std::move(labels);
    return b;
}

const LossSpec kSquared{LossKind::squared_error, 30.0};

AdaptationConfig scalar_cfg(std::size_t steps, double alpha) {
    AdaptationConfig cfg;
    cfg.steps = steps;
    cfg.alpha = alpha;
    cfg.loss = kSquared;
    return cfg;
}

}  // namespace

TEST_CASE("gd_adapt: T=0 is the identity") {
    auto spec = dense_net({1, 1});
    ParamVector theta{{2.0, 0.0}, spec.layout()};
    auto out = gd_adapt(spec, theta, make_batch({{1.0}}, {0}), scalar_cfg(0, 0.5));
    CHECK(out.values == theta.values);
}

TEST_CASE("gd_adapt: scalar hand case") {
    auto spec = dense_net({1, 1});
    ParamVector theta{{2.0, 0.0}, spec.layout()};
    auto out = gd_adapt(spec, theta, make_batch({{1.0}}, {0}), scalar_cfg(1, 0.5));
    CHECK(out.values[0] == 1.0);  // 2 - 0.5*2
}

TEST_CASE("gd_adapt: empty support leaves theta untouched for any T") {
    auto spec = dense_net({2, 3, 2});
    auto theta = init_params(spec, 3);
    auto out = gd_adapt(spec, theta, Batch{}, scalar_cfg(7, 0.3));
    CHECK(out.values == theta.values);
}

TEST_CASE("gd_adapt: decaying schedule is non-increasing") {
    AdaptationConfig cfg = scalar_cfg(10, 0.5);
    cfg.schedule = StepSchedule::decaying;
    cfg.c = 1.0;
    double prev = cfg.step_size(1);
    for (std::size_t t = 2; t <= 10; ++t) {
        CHECK(cfg.step_size(t) <= prev);
        CHECK(cfg.step_size(t) <= cfg.c / static_cast<double>(t));
        prev = cfg.step_size(t);
    }
}

TEST_CASE("gd_adapt strictly decreases a convex quadratic when alpha < 1/curvature") {
    // scalar model through (x=2, y=0): curvature x^2 = 4
    auto spec = dense_net({1, 1});
    ParamVector theta{{3.0, 0.0}, spec.layout()};
    auto support = make_batch({{2.0}}, {0});
    AdaptationConfig cfg = scalar_cfg(1, 0.2);  // 0.2 < 1/4? no: 1/4 = 0.25, ok
    double prev = loss_and_grad(spec, theta, support, kSquared).first;
    for (int t = 0; t < 6; ++t) {
        theta = gd_adapt(spec, theta, support, cfg);
        const double cur = loss_and_grad(spec, theta, support, kSquared).first;
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("compute_prototypes: single example per class is that embedding") {
    Matrix emb(2, 2);
    emb.at(0, 0) = 1.0;
    emb.at(0, 1) = -1.0;
    emb.at(1, 0) = 3.0;
    emb.at(1, 1) = 0.5;
    auto protos = compute_prototypes(emb, {0, 1});
    CHECK(protos.prototypes.at(0) == std::vector<double>{1.0, -1.0});
    CHECK(protos.prototypes.at(1) == std::vector<double>{3.0, 0.5});
}

TEST_CASE("compute_prototypes: mean arithmetic and permutation invariance") {
    Matrix emb(2, 2);
    emb.at(1, 0) = 2.0;
    emb.at(1, 1) = 2.0;
    auto protos = compute_prototypes(emb, {0, 0});
    CHECK(protos.prototypes.at(0) == std::vector<double>{1.0, 1.0});

    // brute-force oracle on random data, plus order invariance
    Rng rng(17);
    const std::size_t n = 30, d = 4;
    Matrix e(n, d);
    std::vector<int> labels(n);
    for (auto& v : e.data) v = rng.normal();
    for (auto& l : labels) l = static_cast<int>(rng.index(3));
    auto a = compute_prototypes(e, labels);

    std::map<int, std::vector<double>> sums;
    std::map<int, int> counts;
    for (std::size_t r = 0; r < n; ++r) {
        auto& s = sums[labels[r]];
        if (s.empty()) s.assign(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) s[j] += e.at(r, j);
        counts[labels[r]] += 1;
    }
    for (auto& [cls, s] : sums) {
        for (std::size_t j = 0; j < d; ++j)
            CHECK_THAT(a.prototypes.at(cls)[j],
                       Catch::Matchers::WithinAbs(s[j] / counts[cls], 1e-12));
    }

    // permute rows
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng prng(18);
    prng.shuffle(perm);
    Matrix e2(n, d);
    std::vector<int> labels2(n);
    for (std::size_t r = 0; r < n; ++r) {
        labels2[r] = labels[perm[r]];
        for (std::size_t j = 0; j < d; ++j) e2.at(r, j) = e.at(perm[r], j);
    }
    auto b = compute_prototypes(e2, labels2);
    for (auto& [cls, proto] : a.prototypes)
        for (std::size_t j = 0; j < d; ++j)
            CHECK_THAT(b.prototypes.at(cls)[j], Catch::Matchers::WithinAbs(proto[j], 1e-12));
}

TEST_CASE("compute_prototypes: empty input is a legal empty set") {
    auto protos = compute_prototypes(Matrix(0, 3), {});
    CHECK(protos.empty());
}

TEST_CASE("proto_predict: equidistant point splits evenly") {
    PrototypeSet protos;
    protos.embedding_dim = 1;
    protos.prototypes[0] = {0.0};
    protos.prototypes[1] = {2.0};
    auto p = proto_predict(std::vector<double>{1.0}, protos, 2);
    CHECK_THAT(p[0], Catch::Matchers::WithinAbs(0.5, 1e-12));
    CHECK_THAT(p[1], Catch::Matchers::WithinAbs(0.5, 1e-12));
}

TEST_CASE("proto_predict: distances (0, ln 3) give probabilities (3/4, 1/4)") {
    PrototypeSet protos;
    protos.embedding_dim = 1;
    protos.prototypes[0] = {0.0};
    protos.prototypes[1] = {std::sqrt(std::log(3.0))};  // squared distance = ln 3
    auto p = proto_predict(std::vector<double>{0.0}, protos, 2);
    CHECK_THAT(p[0], Catch::Matchers::WithinAbs(0.75, 1e-12));
    CHECK_THAT(p[1], Catch::Matchers::WithinAbs(0.25, 1e-12));
}

TEST_CASE("proto_predict: one prototype takes all the mass") {
    PrototypeSet protos;
    protos.embedding_dim = 2;
    protos.prototypes[1] = {5.0, 5.0};
    auto p = proto_predict(std::vector<double>{0.0, 0.0}, protos, 3);
    CHECK(p[1] == 1.0);
    CHECK(p[0] == 0.0);
    CHECK(p[2] == 0.0);
}

TEST_CASE("proto_predict: empty set falls back to uniform over N classes") {
    PrototypeSet protos;
    auto p = proto_predict(std::vector<double>{0.0}, protos, 4);
    for (double v : p) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.25, 1e-15));
}

TEST_CASE("proto_predict sums to one and ignores constant distance shifts") {
    Rng rng(23);
    for (int rep = 0; rep < 25; ++rep) {
        PrototypeSet protos;
        protos.embedding_dim = 3;
        const std::size_t k = 2 + rng.index(4);
        for (std::size_t c = 0; c < k; ++c)
            protos.prototypes[static_cast<int>(c)] = {rng.normal(), rng.normal(), rng.normal()};
        std::vector<double> x{rng.normal(), rng.normal(), rng.normal()};
        auto p = proto_predict(x, protos, k);
        double sum = 0.0;
        for (double v : p) sum += v;
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));

        // oracle: softmax of (-d + shift) for an arbitrary shift
        std::vector<double> shifted;
        for (std::size_t c = 0; c < k; ++c)
            shifted.push_back(-squared_distance(x, protos.prototypes[static_cast<int>(c)]) + 17.5);
        auto q = softmax(shifted);
        for (std::size_t c = 0; c < k; ++c)
            CHECK_THAT(p[c], Catch::Matchers::WithinAbs(q[c], 1e-12));
    }
}

TEST_CASE("proto_predict honors the plain-Euclidean switch") {
    PrototypeSet protos;
    protos.embedding_dim = 1;
    protos.prototypes[0] = {0.0};
    protos.prototypes[1] = {3.0};
    auto sq = proto_predict(std::vector<double>{1.0}, protos, 2);
    auto eu = proto_predict(std::vector<double>{1.0}, protos, 2, PrototypeDistance::euclidean);
    // squared: d = (1, 4); euclidean: d = (1, 2)
    CHECK_THAT(sq[0], Catch::Matchers::WithinAbs(std::exp(-1.0) / (std::exp(-1.0) + std::exp(-4.0)), 1e-12));
    CHECK_THAT(eu[0], Catch::Matchers::WithinAbs(std::exp(-1.0) / (std::exp(-1.0) + std::exp(-2.0)), 1e-12));
}

TEST_CASE("evaluate: perfect predictor scores one") {
    Batch query = make_batch({{0.0}, {1.0}, {2.0}}, {0, 1, 2});
    auto predict = [](std::span<const double> x) {
        std::vector<double> p(3, 0.0);
        p[static_cast<std::size_t>(x[0])] = 1.0;
        return p;
    };
    auto [acc, loss] = evaluate(predict, query);
    CHECK(acc == 1.0);
    CHECK_THAT(loss, Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("evaluate: uniform predictor tie-breaks to class 0") {
    Batch query = make_batch({{0.0}, {1.0}, {2.0}, {3.0}}, {0, 1, 0, 2});
    auto predict = [](std::span<const double>) { return std::vector<double>(3, 1.0 / 3.0); };
    auto [acc, loss] = evaluate(predict, query);
    CHECK_THAT(acc, Catch::Matchers::WithinAbs(0.5, 1e-12));  // two of four queries are class 0
}

TEST_CASE("evaluate: three of four correct is 0.75") {
    Batch query = make_batch({{0.0}, {0.0}, {0.0}, {0.0}}, {0, 0, 0, 1});
    auto predict = [](std::span<const double>) { return std::vector<double>{0.9, 0.1}; };
    auto [acc, loss] = evaluate(predict, query);
    CHECK_THAT(acc, Catch::Matchers::WithinAbs(0.75, 1e-12));
}

TEST_CASE("evaluate rejects empty or unlabeled queries") {
    auto predict = [](std::span<const double>) { return std::vector<double>{1.0}; };
    CHECK_THROWS_AS(evaluate(predict, Batch{}), config_error);
    Batch unlabeled = make_batch({{1.0}}, {});
    CHECK_THROWS_AS(evaluate(predict, unlabeled), config_error);
}

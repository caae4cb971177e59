#include <catch2/catch_amalgamated.hpp>

#include "metalab/network.hpp"
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

Batch random_batch(Rng& rng, std::size_t rows, std::size_t dim, std::size_t classes) {
    Batch b;
    b.features = Matrix(rows, dim);
    for (auto& v : b.features.data) v = rng.normal();
    for (std::size_t r = 0; r < rows; ++r) b.labels.push_back(static_cast<int>(rng.index(classes)));
    return b;
}

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

const LossSpec kSquared{LossKind::squared_error, 30.0};
const LossSpec kCrossEntropy{LossKind::softmax_cross_entropy, 30.0};

}  // namespace

TEST_CASE("forward: identity net reproduces its input") {
    auto spec = dense_net({1, 1});
    ParamVector p{{1.0, 0.0}, spec.layout()};
    auto out = forward(spec, p, make_batch({{3.0}}));
    CHECK(out.at(0, 0) == 3.0);
}

TEST_CASE("forward: scalar linear net") {
    auto spec = dense_net({1, 1});
    ParamVector p{{2.0, 0.0}, spec.layout()};
    CHECK(forward(spec, p, make_batch({{4.0}})).at(0, 0) == 8.0);
}

TEST_CASE("forward: zero params with relu output stay zero") {
    NetworkSpec spec;
    spec.layers.push_back(DenseLayer{3, 4, Nonlinearity::relu});
    ParamVector p{std::vector<double>(spec.param_count(), 0.0), spec.layout()};
    auto out = forward(spec, p, make_batch({{1.0, -2.0, 0.5}}));
    for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("forward is deterministic") {
    auto spec = dense_net({4, 6, 3});
    auto p = init_params(spec, 11);
    Rng rng(3);
    auto batch = random_batch(rng, 5, 4, 3);
    auto a = forward(spec, p, batch);
    auto b = forward(spec, p, batch);
    CHECK(a.data == b.data);
}

TEST_CASE("forward: dimension mismatch names the offending layer") {
    NetworkSpec spec;
    spec.layers.push_back(DenseLayer{3, 4, Nonlinearity::relu});
    spec.layers.push_back(DenseLayer{5, 2, Nonlinearity::identity});
    ParamVector p{std::vector<double>(spec.param_count(), 0.0), spec.layout()};
    CHECK_THROWS_WITH(forward(spec, p, make_batch({{1, 2, 3}})),
                      Catch::Matchers::ContainsSubstring("layer 0"));
}

TEST_CASE("loss_and_grad: scalar squared-error hand case") {
    auto spec = dense_net({1, 1});
    ParamVector p{{2.0, 0.0}, spec.layout()};
    auto [loss, grad] = loss_and_grad(spec, p, make_batch({{1.0}}, {0}), kSquared);
    CHECK(loss == 2.0);
    CHECK(grad.values[0] == 2.0);  // d/dw of (w*1 - 0)^2/2
    CHECK(grad.values[1] == 2.0);  // bias sees the same residual
}

TEST_CASE("loss_and_grad: exact one-hot predictions give zero loss and grad") {
    auto spec = dense_net({2, 2});
    // identity weights, zero bias: f(x) = x
    ParamVector p{{1.0, 0.0, 0.0, 1.0, 0.0, 0.0}, spec.layout()};
    auto [loss, grad] = loss_and_grad(spec, p, make_batch({{1.0, 0.0}, {0.0, 1.0}}, {0, 1}),
                                      kSquared);
    CHECK(loss == 0.0);
    for (double g : grad.values) CHECK(g == 0.0);
}

TEST_CASE("loss_and_grad: empty batch is the zero gradient") {
    auto spec = dense_net({3, 2});
    auto p = init_params(spec, 5);
    auto [loss, grad] = loss_and_grad(spec, p, Batch{}, kCrossEntropy);
    CHECK(loss == 0.0);
    for (double g : grad.values) CHECK(g == 0.0);
}

TEST_CASE("finite_diff_grad: scalar case recovers the analytic value") {
    auto spec = dense_net({1, 1});
    ParamVector p{{2.0, 0.0}, spec.layout()};
    auto fd = finite_diff_grad(spec, p, make_batch({{1.0}}, {0}), kSquared, 1e-6);
    CHECK_THAT(fd.values[0], Catch::Matchers::WithinAbs(2.0, 1e-5));
}

TEST_CASE("finite_diff_grad: constant loss gives the zero vector") {
    // a single softmax logit is always probability one, so the loss is 0
    // whatever the parameters
    auto spec = dense_net({2, 3, 1});
    auto p = init_params(spec, 9);
    auto fd = finite_diff_grad(spec, p, make_batch({{0.3, -0.7}}, {0}), kCrossEntropy, 1e-6);
    for (double g : fd.values) CHECK(g == 0.0);
}

TEST_CASE("gradients match central finite differences on random nets") {
    Rng rng(2024);
    for (int rep = 0; rep < 20; ++rep) {
        auto spec = dense_net({3, 6, 4});
        auto p = init_params(spec, rng.next_u64());
        auto batch = random_batch(rng, 6, 3, 4);
        const LossSpec loss = rep % 2 ? kSquared : kCrossEntropy;
        auto grad = loss_and_grad(spec, p, batch, loss).second;
        auto fd = finite_diff_grad(spec, p, batch, loss, 1e-6);
        CHECK(max_rel_err(grad.values, fd.values) < 1e-5);
    }
}

TEST_CASE("conv1d and conv2d gradients match finite differences") {
    Rng rng(77);
    NetworkSpec c1;
    c1.layers.push_back(Conv1dLayer{2, 8, 3, 3, 2, Nonlinearity::relu});
    c1.layers.push_back(DenseLayer{layer_out_dim(c1.layers[0]), 3, Nonlinearity::identity});
    auto p1 = init_params(c1, 31);
    auto b1 = random_batch(rng, 4, 16, 3);
    auto g1 = loss_and_grad(c1, p1, b1, kCrossEntropy).second;
    auto f1 = finite_diff_grad(c1, p1, b1, kCrossEntropy, 1e-6);
    CHECK(max_rel_err(g1.values, f1.values) < 1e-5);

    NetworkSpec c2;
    c2.layers.push_back(Conv2dLayer{1, 6, 6, 2, 3, 1, Nonlinearity::relu});
    c2.layers.push_back(DenseLayer{layer_out_dim(c2.layers[0]), 2, Nonlinearity::identity});
    auto p2 = init_params(c2, 32);
    auto b2 = random_batch(rng, 3, 36, 2);
    auto g2 = loss_and_grad(c2, p2, b2, kCrossEntropy).second;
    auto f2 = finite_diff_grad(c2, p2, b2, kCrossEntropy, 1e-6);
    CHECK(max_rel_err(g2.values, f2.values) < 1e-5);
}

TEST_CASE("conv preset composes and counts parameters") {
    auto spec = conv_preset(1, 28, 28, 8, 5);
    spec.validate();
    CHECK(spec.out_dim() == 5);
    auto p = init_params(spec, 1);
    CHECK(p.size() == spec.param_count());
}

TEST_CASE("hessian-vector products match finite differences of the gradient") {
    Rng rng(5150);
    auto spec = dense_net({2, 5, 3});
    auto p = init_params(spec, 6);
    auto batch = random_batch(rng, 5, 2, 3);
    std::vector<double> v(p.size());
    for (auto& x : v) x = rng.normal();
    auto hv = hessian_vector_product(spec, p, batch, kCrossEntropy, v);

    const double eps = 1e-6;
    ParamVector up = p, dn = p;
    for (std::size_t i = 0; i < p.size(); ++i) {
        up.values[i] += eps * v[i];
        dn.values[i] -= eps * v[i];
    }
    auto gu = loss_and_grad(spec, up, batch, kCrossEntropy).second;
    auto gd = loss_and_grad(spec, dn, batch, kCrossEntropy).second;
    std::vector<double> fd(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) fd[i] = (gu.values[i] - gd.values[i]) / (2 * eps);
    CHECK(max_rel_err(hv, fd) < 1e-4);
}

TEST_CASE("sgd_step arithmetic") {
    auto spec = dense_net({1, 2});
    ParamVector p{{1.0, 2.0, 0.0, 0.0}, spec.layout()};
    ParamVector g{{1.0, -1.0, 0.0, 0.0}, spec.layout()};

    auto same = sgd_step(p, g, 0.0);
    CHECK(same.values == p.values);

    auto moved = sgd_step(p, g, 0.5);
    CHECK(moved.values[0] == 0.5);
    CHECK(moved.values[1] == 2.5);

    ParamVector zero = p.zeros_like();
    CHECK(sgd_step(p, zero, 0.7).values == p.values);
}

TEST_CASE("sgd_step rejects non-finite gradient entries") {
    auto spec = dense_net({1, 1});
    ParamVector p{{1.0, 0.0}, spec.layout()};
    ParamVector g{{std::numeric_limits<double>::quiet_NaN(), 0.0}, spec.layout()};
    CHECK_THROWS_AS(sgd_step(p, g, 0.1), numerical_error);
    try {
        sgd_step(p, g, 0.1);
    } catch (const numerical_error& e) {
        CHECK(e.step_index == 0);
    }
}

TEST_CASE("sgd_step composes linearly on dyadic inputs") {
    // dyadic values make the float arithmetic exact, so composing two steps
    // equals one combined step bit for bit
    auto spec = dense_net({1, 2});
    Rng rng(88);
    for (int rep = 0; rep < 50; ++rep) {
        ParamVector p{{0, 0, 0, 0}, spec.layout()}, g = p;
        for (auto& v : p.values) v = static_cast<double>(static_cast<int>(rng.index(64)) - 32) / 8.0;
        for (auto& v : g.values) v = static_cast<double>(static_cast<int>(rng.index(64)) - 32) / 8.0;
        const double a = 0.25, b = 0.5;
        auto two = sgd_step(sgd_step(p, g, a), g, b);
        auto one = sgd_step(p, g, a + b);
        CHECK(two.values == one.values);
    }
}

TEST_CASE("init_params: glorot bounds, zero biases, seed determinism") {
    auto spec = dense_net({10, 20, 5});
    auto p = init_params(spec, 42);
    auto q = init_params(spec, 42);
    auto r = init_params(spec, 43);
    CHECK(p.values == q.values);
    CHECK(p.values != r.values);
    // layer 0 weights bounded by sqrt(6/(10+20))
    const double lim = std::sqrt(6.0 / 30.0);
    for (std::size_t i = 0; i < 200; ++i) CHECK(std::abs(p.values[i]) <= lim);
    // biases zero
    for (std::size_t i = 200; i < 220; ++i) CHECK(p.values[i] == 0.0);
    CHECK(ParamVector::layout_count(p.layout) == p.size());
}

TEST_CASE("parameter count mismatch is a configuration error") {
    auto spec = dense_net({2, 2});
    ParamVector p{{1.0, 2.0}, {}};
    CHECK_THROWS_AS(forward(spec, p, make_batch({{1.0, 2.0}})), config_error);
}

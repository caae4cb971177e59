#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "metalab/tasks.hpp"

using namespace metalab;

namespace {

TaskSource gaussian_source(std::uint64_t seed = 7, Split split = Split::train) {
    TaskSource src;
    src.kind = SourceKind::synthetic_gaussian;
    src.split = split;
    src.seed = seed;
    return src;
}

std::vector<double> row_copy(const Matrix& m, std::size_t r) {
    auto s = m.row(r);
    return {s.begin(), s.end()};
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("stratified 5-way 1-shot episode has one support and query row per class") {
    auto ep = sample_episode(gaussian_source(), 5, 1, 1, SampleStrategy::stratified, 0);
    REQUIRE(ep.support.size() == 5);
    REQUIRE(ep.query.size() == 5);
    std::set<int> classes(ep.support.labels.begin(), ep.support.labels.end());
    CHECK(classes == std::set<int>{0, 1, 2, 3, 4});
    std::set<int> qclasses(ep.query.labels.begin(), ep.query.labels.end());
    CHECK(qclasses == classes);
}

TEST_CASE("stratified supports are exactly class-balanced") {
    auto ep = sample_episode(gaussian_source(), 4, 3, 2, SampleStrategy::stratified, 5);
    std::map<int, int> counts;
    for (int y : ep.support.labels) counts[y] += 1;
    for (const auto& [cls, n] : counts) CHECK(n == 3);
    std::map<int, int> qcounts;
    for (int y : ep.query.labels) qcounts[y] += 1;
    for (const auto& [cls, n] : qcounts) CHECK(n == 2);
}

TEST_CASE("a 30000-label budget buys exactly 3000 ten-label tasks") {
    BudgetLedger ledger{30000, 0, 1, true};
    auto src = gaussian_source();
    std::size_t tasks = 0;
    while (ledger.can_afford(10)) {
        sample_episode(src, 5, 1, 1, SampleStrategy::stratified, static_cast<std::int64_t>(tasks),
                       &ledger);
        ++tasks;
    }
    CHECK(tasks == 3000);
    CHECK(ledger.spent == 30000);  // exact exhaustion when divisible
    CHECK_THROWS_AS(sample_episode(src, 5, 1, 1, SampleStrategy::stratified, 99999, &ledger),
                    budget_error);
}

TEST_CASE("query accounting is a ledger policy") {
    BudgetLedger support_only{100, 0, 1, false};
    auto src = gaussian_source();
    sample_episode(src, 5, 2, 3, SampleStrategy::stratified, 0, &support_only);
    CHECK(support_only.spent == 10);  // 5*2 support rows only
    BudgetLedger both{100, 0, 1, true};
    sample_episode(src, 5, 2, 3, SampleStrategy::stratified, 0, &both);
    CHECK(both.spent == 25);
    CHECK(episode_label_cost(5, 2, 3, false) == 10);
    CHECK(episode_label_cost(5, 2, 3, true) == 25);
}

TEST_CASE("episodes are deterministic functions of (source, seed, task-id)") {
    for (auto strategy : {SampleStrategy::random, SampleStrategy::stratified}) {
        auto a = sample_episode(gaussian_source(11), 3, 2, 1, strategy, 42);
        auto b = sample_episode(gaussian_source(11), 3, 2, 1, strategy, 42);
        CHECK(a.support.features.data == b.support.features.data);
        CHECK(a.query.features.data == b.query.features.data);
        CHECK(a.support.labels == b.support.labels);
        auto c = sample_episode(gaussian_source(11), 3, 2, 1, strategy, 43);
        CHECK(a.support.features.data != c.support.features.data);
    }
}

TEST_CASE("support and query never share an example (1000 episodes)") {
    auto src = gaussian_source(3);
    for (int id = 0; id < 500; ++id) {
        for (auto strategy : {SampleStrategy::random, SampleStrategy::stratified}) {
            auto ep = sample_episode(src, 3, 2, 2, strategy, id);
            std::set<std::vector<double>> support_rows;
            for (std::size_t r = 0; r < ep.support.size(); ++r)
                support_rows.insert(row_copy(ep.support.features, r));
            for (std::size_t r = 0; r < ep.query.size(); ++r)
                REQUIRE(!support_rows.count(row_copy(ep.query.features, r)));
        }
    }
}

TEST_CASE("random strategy keeps support size exact and query bounded") {
    auto ep = sample_episode(gaussian_source(9), 4, 2, 2, SampleStrategy::random, 1);
    CHECK(ep.support.size() == 8);
    CHECK(ep.query.size() <= 8);
    std::map<int, int> qcounts;
    for (int y : ep.query.labels) qcounts[y] += 1;
    for (const auto& [cls, n] : qcounts) CHECK(n <= 2);
}

TEST_CASE("synthetic splits use disjoint classes") {
    // identical task ids in different splits should never produce identical
    // class centers; compare support means as a proxy over several tasks
    auto train = gaussian_source(5, Split::train);
    auto test = gaussian_source(5, Split::test);
    CHECK(split_class_count(train) == 36);
    CHECK(split_class_count(test) == 12);
    auto a = sample_episode(train, 5, 3, 0, SampleStrategy::stratified, 0);
    auto b = sample_episode(test, 5, 3, 0, SampleStrategy::stratified, 0);
    CHECK(a.support.features.data != b.support.features.data);
}

TEST_CASE("insufficient classes raise a configuration error") {
    auto src = gaussian_source();
    src.synth.class_count = 6;  // train split keeps 4
    CHECK_THROWS_AS(sample_episode(src, 5, 1, 1, SampleStrategy::stratified, 0), config_error);
}

TEST_CASE("request_label: boundary, postcondition, and oracle sequence") {
    Matrix feats(3, 2);
    for (std::size_t i = 0; i < 6; ++i) feats.data[i] = static_cast<double>(i);
    std::vector<int> hidden{2, 0, 1};
    UnlabeledPool pool(feats, hidden);
    BudgetLedger ledger{1, 0, 1, true};

    auto [row, label] = request_label(pool, 1, ledger);
    CHECK(label == hidden[1]);
    CHECK(row == std::vector<double>{2.0, 3.0});
    CHECK(pool.is_revealed(1));
    CHECK(pool.revealed_count() == 1);
    CHECK(ledger.spent == 1);

    CHECK_THROWS_AS(request_label(pool, 0, ledger), budget_error);  // budget B=1 exhausted
    BudgetLedger fresh{10, 0, 1, true};
    CHECK_THROWS_AS(request_label(pool, 1, fresh), std::logic_error);  // re-request

    UnlabeledPool pool2(feats, hidden);
    BudgetLedger big{10, 0, 1, true};
    for (std::size_t i = 0; i < 3; ++i) CHECK(request_label(pool2, i, big).second == hidden[i]);
}

TEST_CASE("unrevealed labels are unreadable") {
    Matrix feats(1, 1);
    UnlabeledPool pool(feats, {4});
    CHECK_THROWS_AS(pool.revealed_label(0), std::logic_error);
}

TEST_CASE("load_dataset: minimal file") {
    auto dir = temp_dir("metalab_ds1");
    {
        std::ofstream f(dir / "data.csv");
        f << "0,1.0,2.0\n1,3.0,4.0\n";
    }
    auto src = load_dataset((dir / "data.csv").string());
    REQUIRE(src.kind == SourceKind::file_backed);
    CHECK(src.data->class_count == 2);
    CHECK(src.data->features.cols == 2);
    CHECK(src.data->features.rows == 2);
    CHECK(src.data->labels == std::vector<int>{0, 1});
}

TEST_CASE("load_dataset: duplicate class ids accumulate, first-appearance order") {
    auto dir = temp_dir("metalab_ds2");
    {
        std::ofstream f(dir / "data.csv");
        f << "7,1.0\n3,2.0\n7,3.0\n";
    }
    auto src = load_dataset((dir / "data.csv").string());
    CHECK(src.data->class_count == 2);
    CHECK(src.data->labels == std::vector<int>{0, 1, 0});  // 7 -> 0, 3 -> 1
    CHECK(src.data->features.data == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("save_dataset/load_dataset round-trips bit-exactly") {
    auto dir = temp_dir("metalab_ds3");
    Dataset ds;
    ds.features = Matrix(4, 3);
    Rng rng(123);
    for (auto& v : ds.features.data) v = rng.normal() * 1e3;
    ds.features.data[0] = 0.1;  // not exactly representable; stresses the formatting
    ds.labels = {0, 1, 1, 0};
    ds.class_count = 2;
    save_dataset((dir / "round.csv").string(), ds);
    auto src = load_dataset((dir / "round.csv").string());
    CHECK(src.data->features.data == ds.features.data);
    CHECK(src.data->labels == ds.labels);
}

TEST_CASE("load_dataset: malformed rows carry line numbers") {
    auto dir = temp_dir("metalab_ds4");
    {
        std::ofstream f(dir / "bad.csv");
        f << "0,1.0\n0,oops\n";
    }
    try {
        load_dataset((dir / "bad.csv").string());
        FAIL("expected parse_error");
    } catch (const parse_error& e) {
        CHECK(e.line == 2);
    }

    {
        std::ofstream f(dir / "width.csv");
        f << "0,1.0,2.0\n1,3.0\n";
    }
    try {
        load_dataset((dir / "width.csv").string());
        FAIL("expected parse_error");
    } catch (const parse_error& e) {
        CHECK(e.line == 2);
    }

    { std::ofstream f(dir / "empty.csv"); }
    CHECK_THROWS_AS(load_dataset((dir / "empty.csv").string()), parse_error);
}

TEST_CASE("federated manifest is honored and user splits are disjoint") {
    auto dir = temp_dir("metalab_ds5");
    {
        std::ofstream f(dir / "manifest.json");
        f << R"({"columns": "user-first", "feature_dim": 2})";
    }
    {
        std::ofstream f(dir / "fed.csv");
        // 5 users, 2 classes each
        for (int u = 0; u < 5; ++u)
            for (int c = 0; c < 2; ++c)
                for (int k = 0; k < 3; ++k)
                    f << u << ',' << c << ',' << (u + k) << ".5," << c << ".25\n";
    }
    auto src = load_dataset((dir / "fed.csv").string());
    CHECK(src.mode == TaskMode::federated);
    CHECK(src.data->user_count == 5);
    CHECK(src.data->class_count == 2);
    CHECK(split_user_count(src.with_split(Split::train)) == 3);
    CHECK(split_user_count(src.with_split(Split::validation)) == 1);
    CHECK(split_user_count(src.with_split(Split::test)) == 1);

    auto ep = sample_episode(src, 2, 1, 1, SampleStrategy::stratified, 0);
    CHECK(ep.support.size() == 2);
}

TEST_CASE("synthetic federated shards are fixed per user") {
    TaskSource src = gaussian_source(21);
    src.mode = TaskMode::federated;
    src.synth.user_count = 10;
    src.synth.class_count = 5;
    auto a = sample_episode(src, 5, 1, 1, SampleStrategy::stratified, 2);
    auto b = sample_episode(src, 5, 1, 1, SampleStrategy::stratified, 2);
    CHECK(a.support.features.data == b.support.features.data);
    CHECK_THROWS_AS(sample_episode(src, 5, 1, 1, SampleStrategy::stratified, 99), config_error);
}

TEST_CASE("unlabeled pools expose features but hide labels until bought") {
    auto src = gaussian_source(31);
    auto pool = make_unlabeled_pool(src, 3, 4, 0);
    CHECK(pool.size() == 12);
    CHECK(pool.revealed_count() == 0);
    BudgetLedger ledger{100, 0, 1, true};
    auto [row, label] = request_label(pool, 5, ledger);
    CHECK(label >= 0);
    CHECK(label < 3);
    CHECK(pool.revealed_label(5) == label);
}

TEST_CASE("rings source produces distinct per-class radii") {
    TaskSource src;
    src.kind = SourceKind::synthetic_rings;
    src.seed = 4;
    src.synth.sigma_within = 0.05;
    auto ep = sample_episode(src, 2, 8, 0, SampleStrategy::stratified, 0);
    // mean radius per class should be well separated
    std::map<int, std::pair<double, int>> radii;
    for (std::size_t r = 0; r < ep.support.size(); ++r) {
        const double rad = std::hypot(ep.support.features.at(r, 0), ep.support.features.at(r, 1));
        radii[ep.support.labels[r]].first += rad;
        radii[ep.support.labels[r]].second += 1;
    }
    std::vector<double> means;
    for (auto& [cls, acc] : radii) means.push_back(acc.first / acc.second);
    CHECK(std::abs(means[0] - means[1]) > 1.0);
}

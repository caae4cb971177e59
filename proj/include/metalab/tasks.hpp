#pragma once

// Task distributions (synthetic and file-backed), N-way K-shot episode
// construction, the labeling-budget ledger, and unlabeled pools for active
// label selection.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metalab/errors.hpp"
#include "metalab/network.hpp"
#include "metalab/rng.hpp"

namespace metalab {

enum class SourceKind { synthetic_gaussian, synthetic_rings, file_backed };
enum class TaskMode { fewshot, federated };
enum class Split { train, validation, test };
enum class SampleStrategy { random, stratified };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        default: return "test";
    }
}

// ---------------------------------------------------------------------------
// budget

// Hard labeling budget B and its consumption record. spent only increases and
// never exceeds total.
struct BudgetLedger {
    std::size_t total = 0;     // B
    std::size_t spent = 0;
    std::size_t per_task = 1;  // L, labels per task in active acquisition
    bool counts_query = true;  // whether query reveals are charged

    std::size_t remaining() const { return total - spent; }

    bool can_afford(std::size_t labels) const { return spent + labels <= total; }

    void charge(std::size_t labels) {
        if (!can_afford(labels))
            throw budget_error("labeling budget exhausted: need " + std::to_string(labels) +
                               ", have " + std::to_string(remaining()));
        spent += labels;
    }
};

// ---------------------------------------------------------------------------
// episodes

// One task: labeled support set, held-out query set, way/shot metadata.
// Labels are task-local class indices in [0, ways).
struct Episode {
    Batch support;
    Batch query;
    std::size_t ways = 0;
    std::size_t support_shots = 0;
    std::size_t query_shots = 0;
    std::int64_t task_id = 0;
};

// ---------------------------------------------------------------------------
// unlabeled pools

// Feature rows whose labels are hidden until bought through request_label.
class UnlabeledPool {
  public:
    UnlabeledPool() = default;
    UnlabeledPool(Matrix features, std::vector<int> hidden_labels)
        : features_(std::move(features)), hidden_labels_(std::move(hidden_labels)),
          revealed_(hidden_labels_.size(), false) {
        if (features_.rows != hidden_labels_.size())
            throw config_error("pool features/labels row mismatch");
    }

    const Matrix& features() const { return features_; }
    std::size_t size() const { return features_.rows; }
    bool is_revealed(std::size_t i) const { return revealed_.at(i); }

    std::size_t revealed_count() const {
        std::size_t n = 0;
        for (bool r : revealed_) n += r;
        return n;
    }

    int revealed_label(std::size_t i) const {
        if (!revealed_.at(i)) throw std::logic_error("label of row " + std::to_string(i) +
                                                     " has not been revealed");
        return hidden_labels_[i];
    }

    friend std::pair<std::vector<double>, int> request_label(UnlabeledPool& pool,
                                                             std::size_t row, BudgetLedger& ledger);

  private:
    Matrix features_;
    std::vector<int> hidden_labels_;
    std::vector<bool> revealed_;
};

// Buys one label. Throws budget_error when the ledger is exhausted and
// std::logic_error on a re-request of an already revealed row.
inline std::pair<std::vector<double>, int> request_label(UnlabeledPool& pool, std::size_t row,
                                                         BudgetLedger& ledger) {
    if (row >= pool.size()) throw config_error("pool row out of range");
    if (pool.revealed_[row])
        throw std::logic_error("row " + std::to_string(row) + " already revealed");
    ledger.charge(1);
    pool.revealed_[row] = true;
    auto span = pool.features_.row(row);
    return {std::vector<double>(span.begin(), span.end()), pool.hidden_labels_[row]};
}

// ---------------------------------------------------------------------------
// datasets (file-backed)

struct Dataset {
    Matrix features;
    std::vector<int> labels;  // dense class ids, first-appearance order
    std::vector<int> users;   // empty for class-first datasets
    std::size_t class_count = 0;
    std::size_t user_count = 0;
};

// CSV, one example per line: `class_id,feat_0,...,feat_{d-1}` (or with a
// leading user_id column when the sibling manifest.json says "user-first").
inline Dataset read_dataset_csv(const std::string& path) {
    namespace fs = std::filesystem;
    bool user_first = false;
    std::size_t declared_dim = 0;
    const fs::path manifest = fs::path(path).parent_path() / "manifest.json";
    if (fs::exists(manifest)) {
        std::ifstream mf(manifest);
        nlohmann::json j;
        try {
            mf >> j;
        } catch (const std::exception& e) {
            throw parse_error(std::string("bad manifest.json: ") + e.what(), 0);
        }
        user_first = j.value("columns", "class-first") == std::string("user-first");
        declared_dim = j.value("feature_dim", 0u);
    }

    std::ifstream in(path);
    if (!in) throw parse_error("cannot open dataset file " + path, 0);

    Dataset ds;
    std::map<long, int> class_ids;  // file id -> dense id
    std::map<long, int> user_ids;
    std::vector<double> values;
    std::size_t feature_dim = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<double> fields;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            const std::size_t comma = line.find(',', pos);
            const std::string tok =
                line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            char* end = nullptr;
            const double v = std::strtod(tok.c_str(), &end);
            if (end == tok.c_str() || *end != '\0')
                throw parse_error("malformed field '" + tok + "'", line_no);
            fields.push_back(v);
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        const std::size_t meta = user_first ? 2 : 1;
        if (fields.size() <= meta) throw parse_error("row has no features", line_no);
        const std::size_t dim = fields.size() - meta;
        if (feature_dim == 0) {
            feature_dim = dim;
            if (declared_dim != 0 && declared_dim != dim)
                throw parse_error("row width disagrees with manifest feature_dim", line_no);
        } else if (dim != feature_dim) {
            throw parse_error("inconsistent feature width", line_no);
        }
        std::size_t f = 0;
        if (user_first) {
            const long uid = static_cast<long>(fields[f++]);
            auto [it, fresh] = user_ids.try_emplace(uid, static_cast<int>(user_ids.size()));
            ds.users.push_back(it->second);
        }
        const long cid = static_cast<long>(fields[f++]);
        auto [it, fresh] = class_ids.try_emplace(cid, static_cast<int>(class_ids.size()));
        ds.labels.push_back(it->second);
        for (; f < fields.size(); ++f) values.push_back(fields[f]);
    }
    if (ds.labels.empty()) throw parse_error("empty dataset file", 0);
    ds.features.rows = ds.labels.size();
    ds.features.cols = feature_dim;
    ds.features.data = std::move(values);
    ds.class_count = class_ids.size();
    ds.user_count = user_ids.size();
    return ds;
}

// Writes the CSV plus a sibling manifest.json. %.17g round-trips doubles
// bit-exactly through load_dataset.
inline void save_dataset(const std::string& path, const Dataset& ds) {
    namespace fs = std::filesystem;
    std::ofstream out(path);
    if (!out) throw parse_error("cannot write dataset file " + path, 0);
    char buf[64];
    const bool user_first = !ds.users.empty();
    for (std::size_t r = 0; r < ds.features.rows; ++r) {
        if (user_first) out << ds.users[r] << ',';
        out << ds.labels[r];
        for (std::size_t c = 0; c < ds.features.cols; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", ds.features.at(r, c));
            out << ',' << buf;
        }
        out << '\n';
    }
    nlohmann::json manifest{{"columns", user_first ? "user-first" : "class-first"},
                            {"feature_dim", ds.features.cols}};
    std::ofstream mf((fs::path(path).parent_path() / "manifest.json"));
    mf << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// task sources

struct SyntheticParams {
    std::size_t class_count = 60;
    std::size_t feature_dim = 16;
    double sigma_between = 3.0;  // class-center spread
    double sigma_within = 1.0;   // within-class noise
    // federated mode
    std::size_t user_count = 0;
    double sigma_user = 2.0;       // per-user shift
    std::size_t shard_per_class = 20;  // fixed shard size per class per user
};

// A reproducible distribution over tasks. Synthetic sources regenerate
// everything from (parameters, seed, task-id); file-backed sources index into
// a loaded Dataset. Splits partition classes (few-shot) or users (federated).
struct TaskSource {
    SourceKind kind = SourceKind::synthetic_gaussian;
    TaskMode mode = TaskMode::fewshot;
    Split split = Split::train;
    std::uint64_t seed = 0;
    SyntheticParams synth;
    std::string path;
    std::shared_ptr<const Dataset> data;  // file-backed only

    TaskSource with_split(Split s) const {
        TaskSource t = *this;
        t.split = s;
        return t;
    }
};

inline TaskSource load_dataset(const std::string& path) {
    TaskSource src;
    src.kind = SourceKind::file_backed;
    src.path = path;
    src.data = std::make_shared<Dataset>(read_dataset_csv(path));
    src.mode = src.data->users.empty() ? TaskMode::fewshot : TaskMode::federated;
    return src;
}

namespace detail {

// Contiguous 60/20/20 partition of [0, total): train gets the remainder.
inline std::pair<std::size_t, std::size_t> split_range(std::size_t total, Split split) {
    const std::size_t val = total / 5;
    const std::size_t test = total / 5;
    const std::size_t train = total - val - test;
    switch (split) {
        case Split::train: return {0, train};
        case Split::validation: return {train, train + val};
        default: return {train + val, total};
    }
}

inline std::uint64_t split_tag(Split s) { return static_cast<std::uint64_t>(s) + 101; }

// stream tags for per-task randomness
constexpr std::uint64_t kStreamClasses = 0xC1A55;
constexpr std::uint64_t kStreamExamples = 0xE9A3;
constexpr std::uint64_t kStreamPool = 0x9001;

inline std::size_t source_class_universe(const TaskSource& src) {
    return src.kind == SourceKind::file_backed ? src.data->class_count : src.synth.class_count;
}

inline std::size_t source_user_universe(const TaskSource& src) {
    return src.kind == SourceKind::file_backed ? src.data->user_count : src.synth.user_count;
}

// Global class ids available to this source's split.
inline std::pair<std::size_t, std::size_t> split_classes(const TaskSource& src) {
    if (src.mode == TaskMode::federated) return {0, source_class_universe(src)};  // shared classes
    return split_range(source_class_universe(src), src.split);
}

inline std::pair<std::size_t, std::size_t> split_users(const TaskSource& src) {
    return split_range(source_user_universe(src), src.split);
}

inline std::vector<double> class_center(const TaskSource& src, std::size_t global_class) {
    Rng rng(mix64(src.seed, 0xCE17E8, global_class));
    std::vector<double> c(src.synth.feature_dim);
    if (src.kind == SourceKind::synthetic_gaussian) {
        for (double& v : c) v = rng.normal(0.0, src.synth.sigma_between);
    } else {
        // rings: radius grows with the class index, random phase; the ring
        // lives in the first two dimensions
        const double radius = src.synth.sigma_between * static_cast<double>(global_class + 1);
        const double phase = rng.uniform(0.0, 6.283185307179586);
        c.assign(src.synth.feature_dim, 0.0);
        c[0] = radius * std::cos(phase);
        if (src.synth.feature_dim > 1) c[1] = radius * std::sin(phase);
    }
    return c;
}

inline std::vector<double> user_offset(const TaskSource& src, std::size_t global_user) {
    Rng rng(mix64(src.seed, 0x05E8, global_user));
    std::vector<double> o(src.synth.feature_dim);
    for (double& v : o) v = rng.normal(0.0, src.synth.sigma_user);
    return o;
}

// One synthetic example of a class (rings draw a fresh phase around the
// class's radius rather than clustering at the center's phase).
inline void gen_example(const TaskSource& src, const std::vector<double>& center,
                        const std::vector<double>* offset, std::size_t global_class, Rng& rng,
                        double* out) {
    const std::size_t d = src.synth.feature_dim;
    if (src.kind == SourceKind::synthetic_rings) {
        const double radius = src.synth.sigma_between * static_cast<double>(global_class + 1);
        const double phase = rng.uniform(0.0, 6.283185307179586);
        for (std::size_t j = 0; j < d; ++j) out[j] = rng.normal(0.0, src.synth.sigma_within);
        out[0] += radius * std::cos(phase);
        if (d > 1) out[1] += radius * std::sin(phase);
    } else {
        for (std::size_t j = 0; j < d; ++j)
            out[j] = center[j] + rng.normal(0.0, src.synth.sigma_within);
    }
    if (offset)
        for (std::size_t j = 0; j < d; ++j) out[j] += (*offset)[j];
}

// The global classes a task sees, in ascending order (their position defines
// task-local labels 0..N-1).
inline std::vector<std::size_t> choose_task_classes(const TaskSource& src, std::size_t ways,
                                                    std::int64_t task_id) {
    const auto [lo, hi] = split_classes(src);
    const std::size_t available = hi - lo;
    if (ways == 0) throw config_error("ways must be positive");
    if (ways > available)
        throw config_error("split '" + std::string(split_name(src.split)) + "' has " +
                           std::to_string(available) + " classes, task needs " +
                           std::to_string(ways));
    if (src.mode == TaskMode::federated) {
        // classes are fixed across tasks
        std::vector<std::size_t> classes(ways);
        for (std::size_t i = 0; i < ways; ++i) classes[i] = lo + i;
        return classes;
    }
    Rng rng(mix64(src.seed, split_tag(src.split), static_cast<std::uint64_t>(task_id),
                  kStreamClasses));
    auto picks = rng.sample_without_replacement(available, ways);
    std::vector<std::size_t> classes(ways);
    for (std::size_t i = 0; i < ways; ++i) classes[i] = lo + picks[i];
    std::sort(classes.begin(), classes.end());
    return classes;
}

// Per-class candidate rows for a file-backed source (respecting split and
// federated sharding), shuffled deterministically per task.
inline std::vector<std::vector<std::size_t>> file_class_rows(const TaskSource& src,
                                                             const std::vector<std::size_t>& classes,
                                                             std::int64_t task_id) {
    const Dataset& ds = *src.data;
    std::vector<std::vector<std::size_t>> rows(classes.size());
    int user = -1;
    if (src.mode == TaskMode::federated) {
        const auto [ulo, uhi] = split_users(src);
        const auto uid = static_cast<std::size_t>(task_id);
        if (ulo + uid >= uhi)
            throw config_error("user task-id " + std::to_string(task_id) + " outside split");
        user = static_cast<int>(ulo + uid);
    }
    for (std::size_t r = 0; r < ds.features.rows; ++r) {
        if (user >= 0 && ds.users[r] != user) continue;
        for (std::size_t c = 0; c < classes.size(); ++c)
            if (static_cast<std::size_t>(ds.labels[r]) == classes[c]) rows[c].push_back(r);
    }
    Rng rng(mix64(src.seed, split_tag(src.split), static_cast<std::uint64_t>(task_id),
                  kStreamExamples));
    for (auto& list : rows) rng.shuffle(list);
    return rows;
}

}  // namespace detail

// Number of classes visible to the source's split.
inline std::size_t split_class_count(const TaskSource& src) {
    const auto [lo, hi] = detail::split_classes(src);
    return hi - lo;
}

// Number of user shards in the source's split (federated mode).
inline std::size_t split_user_count(const TaskSource& src) {
    const auto [lo, hi] = detail::split_users(src);
    return hi - lo;
}

// Builds one N-way episode with K support and Kq query shots per class.
//
// stratified: exactly K support and Kq query rows per class.
// random: N*K support rows drawn uniformly without class balancing from the
// task's candidate pool; the query takes up to Kq per class from the rest.
//
// Support and query never share an example. When a ledger is given, every
// labeled row revealed is charged (query rows only if ledger.counts_query).
inline Episode sample_episode(const TaskSource& src, std::size_t ways, std::size_t shots,
                              std::size_t query_shots, SampleStrategy strategy,
                              std::int64_t task_id, BudgetLedger* ledger = nullptr) {
    if (shots == 0) throw config_error("shots must be positive");
    const auto classes = detail::choose_task_classes(src, ways, task_id);
    const std::size_t per_class = shots + query_shots;

    // candidate examples per class
    std::vector<Matrix> cand(ways);
    const bool synthetic = src.kind != SourceKind::file_backed;
    if (synthetic) {
        Rng rng(mix64(src.seed, detail::split_tag(src.split), static_cast<std::uint64_t>(task_id),
                      detail::kStreamExamples));
        const std::vector<double>* offset = nullptr;
        std::vector<double> off;
        if (src.mode == TaskMode::federated) {
            const auto [ulo, uhi] = detail::split_users(src);
            const auto uid = static_cast<std::size_t>(task_id);
            if (src.synth.user_count == 0 || ulo + uid >= uhi)
                throw config_error("user task-id " + std::to_string(task_id) + " outside split");
            off = detail::user_offset(src, ulo + uid);
            offset = &off;
        }
        for (std::size_t c = 0; c < ways; ++c) {
            const auto center = detail::class_center(src, classes[c]);
            cand[c] = Matrix(per_class, src.synth.feature_dim);
            for (std::size_t i = 0; i < per_class; ++i)
                detail::gen_example(src, center, offset, classes[c], rng, &cand[c].at(i, 0));
        }
    } else {
        const auto rows = detail::file_class_rows(src, classes, task_id);
        for (std::size_t c = 0; c < ways; ++c) {
            if (rows[c].size() < per_class)
                throw config_error("class " + std::to_string(classes[c]) + " has " +
                                   std::to_string(rows[c].size()) + " examples, task needs " +
                                   std::to_string(per_class));
            cand[c] = Matrix(per_class, src.data->features.cols);
            for (std::size_t i = 0; i < per_class; ++i) {
                auto span = src.data->features.row(rows[c][i]);
                std::copy(span.begin(), span.end(), &cand[c].at(i, 0));
            }
        }
    }

    const std::size_t dim = cand[0].cols;
    Episode ep;
    ep.ways = ways;
    ep.support_shots = shots;
    ep.query_shots = query_shots;
    ep.task_id = task_id;

    auto push_row = [&](Batch& b, std::size_t cls, std::size_t idx) {
        b.features.data.insert(b.features.data.end(), &cand[cls].at(idx, 0),
                               &cand[cls].at(idx, 0) + dim);
        b.features.rows += 1;
        b.features.cols = dim;
        b.labels.push_back(static_cast<int>(cls));
    };

    if (strategy == SampleStrategy::stratified) {
        for (std::size_t c = 0; c < ways; ++c)
            for (std::size_t i = 0; i < shots; ++i) push_row(ep.support, c, i);
        for (std::size_t c = 0; c < ways; ++c)
            for (std::size_t i = shots; i < per_class; ++i) push_row(ep.query, c, i);
    } else {
        // flat index space over candidates, permuted per task
        Rng rng(mix64(src.seed, detail::split_tag(src.split), static_cast<std::uint64_t>(task_id),
                      detail::kStreamPool));
        std::vector<std::pair<std::size_t, std::size_t>> flat;
        for (std::size_t c = 0; c < ways; ++c)
            for (std::size_t i = 0; i < per_class; ++i) flat.emplace_back(c, i);
        rng.shuffle(flat);
        const std::size_t want = ways * shots;
        for (std::size_t k = 0; k < want; ++k) push_row(ep.support, flat[k].first, flat[k].second);
        std::vector<std::size_t> taken(ways, 0);
        for (std::size_t k = want; k < flat.size(); ++k) {
            const auto [c, i] = flat[k];
            if (taken[c] >= query_shots) continue;
            push_row(ep.query, c, i);
            ++taken[c];
        }
    }

    if (ledger) {
        const std::size_t cost =
            ep.support.size() + (ledger->counts_query ? ep.query.size() : 0);
        ledger->charge(cost);
    }
    return ep;
}

// Labels consumed by one episode under the ledger's accounting policy.
inline std::size_t episode_label_cost(std::size_t ways, std::size_t shots,
                                      std::size_t query_shots, bool counts_query) {
    return ways * shots + (counts_query ? ways * query_shots : 0);
}

// Unlabeled candidate pool for one task (Algorithm 1 line 4). Hidden labels
// are task-local class indices.
inline UnlabeledPool make_unlabeled_pool(const TaskSource& src, std::size_t ways,
                                         std::size_t rows_per_class, std::int64_t task_id) {
    const auto classes = detail::choose_task_classes(src, ways, task_id);
    Matrix feats;
    std::vector<int> labels;
    const bool synthetic = src.kind != SourceKind::file_backed;
    if (synthetic) {
        Rng rng(mix64(src.seed, detail::split_tag(src.split), static_cast<std::uint64_t>(task_id),
                      detail::kStreamPool));
        const std::vector<double>* offset = nullptr;
        std::vector<double> off;
        if (src.mode == TaskMode::federated) {
            const auto [ulo, uhi] = detail::split_users(src);
            off = detail::user_offset(src, ulo + static_cast<std::size_t>(task_id));
            offset = &off;
        }
        feats = Matrix(ways * rows_per_class, src.synth.feature_dim);
        labels.resize(ways * rows_per_class);
        std::size_t r = 0;
        for (std::size_t c = 0; c < ways; ++c) {
            const auto center = detail::class_center(src, classes[c]);
            for (std::size_t i = 0; i < rows_per_class; ++i, ++r) {
                detail::gen_example(src, center, offset, classes[c], rng, &feats.at(r, 0));
                labels[r] = static_cast<int>(c);
            }
        }
    } else {
        const auto rows = detail::file_class_rows(src, classes, task_id);
        const std::size_t dim = src.data->features.cols;
        for (std::size_t c = 0; c < ways; ++c) {
            const std::size_t take = std::min(rows_per_class, rows[c].size());
            for (std::size_t i = 0; i < take; ++i) {
                auto span = src.data->features.row(rows[c][i]);
                feats.data.insert(feats.data.end(), span.begin(), span.end());
                feats.rows += 1;
                feats.cols = dim;
                labels.push_back(static_cast<int>(c));
            }
        }
        if (labels.empty()) throw config_error("pool for task " + std::to_string(task_id) +
                                               " is empty");
    }
    return UnlabeledPool(std::move(feats), std::move(labels));
}

}  // namespace metalab

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "tensor.hpp"

namespace swift {

namespace fs = std::filesystem;

/// Dense table of embedding rows. Values are stored as 32-bit floats and widened to 64-bit
/// whenever they enter arithmetic.
struct EmbeddingTable {
    std::size_t count = 0;
    std::size_t dim = 0;
    std::vector<float> values;
    bool normalized = false;

    EmbeddingTable() = default;
    EmbeddingTable(std::size_t rows, std::size_t cols, std::vector<float> data, bool unit_rows)
        : count(rows), dim(cols), values(std::move(data)), normalized(unit_rows) {
        validate();
    }

    static EmbeddingTable empty(std::size_t cols) { return EmbeddingTable(0, cols, {}, true); }

    static EmbeddingTable from_matrix(const Matrix& m, bool unit_rows) {
        std::vector<float> data(static_cast<std::size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                data[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
            }
        }
        return EmbeddingTable(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                              std::move(data), unit_rows);
    }

    std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }

    Matrix to_matrix() const {
        Matrix m(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
        for (std::size_t i = 0; i < values.size(); ++i) {
            m.data()[i] = static_cast<double>(values[i]);
        }
        return m;
    }

    Matrix gather(std::span<const std::size_t> rows) const {
        Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r] >= count) {
                throw ShapeError("row index " + std::to_string(rows[r]) + " out of range (" +
                                 std::to_string(count) + " rows)");
            }
            const float* src = values.data() + rows[r] * dim;
            for (std::size_t j = 0; j < dim; ++j) {
                m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = static_cast<double>(src[j]);
            }
        }
        return m;
    }

    void normalize_rows() {
        for (std::size_t i = 0; i < count; ++i) {
            double sq = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double v = values[i * dim + j];
                sq += v * v;
            }
            const double norm = std::sqrt(sq);
            if (norm > 0.0) {
                for (std::size_t j = 0; j < dim; ++j) {
                    values[i * dim + j] = static_cast<float>(values[i * dim + j] / norm);
                }
            }
        }
        normalized = true;
    }

    void validate() const {
        if (dim == 0) {
            throw ShapeError("embedding dim must be positive");
        }
        if (values.size() != count * dim) {
            throw FormatError("embedding table holds " + std::to_string(values.size()) + " values, expected " +
                              std::to_string(count) + "x" + std::to_string(dim));
        }
        for (float v : values) {
            if (!std::isfinite(v)) {
                throw NumericError("embedding table contains a non-finite value");
            }
        }
        if (normalized) {
            for (std::size_t i = 0; i < count; ++i) {
                double sq = 0.0;
                for (float v : row(i)) {
                    sq += static_cast<double>(v) * v;
                }
                if (std::abs(std::sqrt(sq) - 1.0) > 1e-4) {
                    throw FormatError("row " + std::to_string(i) + " is flagged normalized but has norm " +
                                      std::to_string(std::sqrt(sq)));
                }
            }
        }
    }

    friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

struct LabeledTable {
    EmbeddingTable embeddings;
    Labels labels;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }

    void validate(std::size_t num_classes, const char* name) const {
        embeddings.validate();
        if (embeddings.count != labels.size()) {
            throw FormatError(std::string(name) + ": " + std::to_string(embeddings.count) + " rows but " +
                              std::to_string(labels.size()) + " labels");
        }
        for (auto y : labels) {
            if (y >= num_classes) {
                throw FormatError(std::string(name) + ": label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
            }
        }
    }

    friend bool operator==(const LabeledTable&, const LabeledTable&) = default;
};

/// The four task splits plus test data and class-name text embeddings.
struct DatasetBundle {
    std::size_t num_classes = 0;
    std::size_t strong_views = 4;
    std::vector<std::string> class_names;
    LabeledTable labeled;
    EmbeddingTable unlabeled_weak;
    /// k views per unlabeled sample; views of sample i occupy rows i*k .. i*k+k-1.
    EmbeddingTable unlabeled_strong;
    /// Evaluation only. Never read by any loss.
    std::optional<Labels> unlabeled_truth;
    LabeledTable retrieved;
    LabeledTable test;
    EmbeddingTable text;

    std::size_t dim() const { return text.dim; }
    std::size_t unlabeled_count() const { return unlabeled_weak.count; }

    bool normalized() const {
        return labeled.embeddings.normalized && unlabeled_weak.normalized && unlabeled_strong.normalized &&
               retrieved.embeddings.normalized && test.embeddings.normalized && text.normalized;
    }

    void validate() const {
        if (num_classes < 2) {
            throw FormatError("num_classes must be at least 2");
        }
        if (strong_views < 1) {
            throw FormatError("strong_views must be at least 1");
        }
        if (dim() < 2) {
            throw FormatError("embedding dim must be at least 2");
        }
        if (!class_names.empty() && class_names.size() != num_classes) {
            throw FormatError("class_names has " + std::to_string(class_names.size()) + " entries, expected " +
                              std::to_string(num_classes));
        }
        text.validate();
        if (text.count != num_classes) {
            throw FormatError("text table has " + std::to_string(text.count) + " rows, expected one per class");
        }
        labeled.validate(num_classes, "labeled");
        retrieved.validate(num_classes, "retrieved");
        test.validate(num_classes, "test");
        unlabeled_weak.validate();
        unlabeled_strong.validate();
        for (const EmbeddingTable* t : {&labeled.embeddings, &unlabeled_weak, &unlabeled_strong,
                                        &retrieved.embeddings, &test.embeddings}) {
            if (t->dim != dim()) {
                throw ShapeError("split dim " + std::to_string(t->dim) + " differs from text dim " +
                                 std::to_string(dim()));
            }
        }
        if (unlabeled_strong.count != strong_views * unlabeled_weak.count) {
            throw FormatError("unlabeled_strong has " + std::to_string(unlabeled_strong.count) + " rows, expected " +
                              std::to_string(strong_views) + " x " + std::to_string(unlabeled_weak.count));
        }
        if (unlabeled_truth) {
            if (unlabeled_truth->size() != unlabeled_weak.count) {
                throw FormatError("unlabeled truth size does not match unlabeled count");
            }
            for (auto y : *unlabeled_truth) {
                if (y >= num_classes) {
                    throw FormatError("unlabeled truth label " + std::to_string(y) + " out of range");
                }
            }
        }
    }

    friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

namespace detail {

template <typename T>
T to_little_endian(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &v, sizeof(T));
        std::reverse(bytes, bytes + sizeof(T));
        std::memcpy(&v, bytes, sizeof(T));
    }
    return v;
}

template <typename T>
std::vector<T> read_blob(const fs::path& file, std::size_t expected_elems) {
    std::error_code ec;
    if (!fs::is_regular_file(file, ec)) {
        throw IoError("missing blob: " + file.string());
    }
    const auto bytes = fs::file_size(file, ec);
    if (ec) {
        throw IoError("cannot stat " + file.string() + ": " + ec.message());
    }
    if (bytes != expected_elems * sizeof(T)) {
        throw FormatError("blob " + file.filename().string() + " has " + std::to_string(bytes) +
                          " bytes, manifest implies " + std::to_string(expected_elems * sizeof(T)));
    }
    std::vector<T> out(expected_elems);
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + file.string());
    }
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if (!in) {
        throw IoError("short read on " + file.string());
    }
    for (auto& v : out) {
        v = to_little_endian(v);
    }
    return out;
}

template <typename T>
void write_blob(const fs::path& file, std::span<const T> data) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + file.string());
    }
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    } else {
        for (T v : data) {
            v = to_little_endian(v);
            out.write(reinterpret_cast<const char*>(&v), sizeof(T));
        }
    }
    out.flush();
    if (!out) {
        throw IoError("write failed on " + file.string());
    }
}

inline void write_text(const fs::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + file.string());
    }
    out << text;
    out.flush();
    if (!out) {
        throw IoError("write failed on " + file.string());
    }
}

inline nlohmann::json read_json(const fs::path& file) {
    std::ifstream in(file);
    if (!in) {
        throw IoError("missing file: " + file.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(file.filename().string() + ": " + e.what());
    }
}

/// Writes a directory by populating a sibling temporary and renaming it into place.
template <typename Fill>
void write_directory_atomically(const fs::path& target, Fill&& fill) {
    std::error_code ec;
    const fs::path parent = target.has_parent_path() ? target.parent_path() : fs::path(".");
    fs::create_directories(parent, ec);
    if (ec) {
        throw IoError("cannot create " + parent.string() + ": " + ec.message());
    }
    const fs::path staging = parent / (target.filename().string() + ".tmp-write");
    fs::remove_all(staging, ec);
    if (!fs::create_directory(staging, ec) || ec) {
        throw IoError("cannot create " + staging.string() + (ec ? ": " + ec.message() : std::string{}));
    }
    try {
        fill(staging);
    } catch (...) {
        fs::remove_all(staging, ec);
        throw;
    }
    const fs::path retired = parent / (target.filename().string() + ".tmp-old");
    fs::remove_all(retired, ec);
    if (fs::exists(target)) {
        fs::rename(target, retired, ec);
        if (ec) {
            throw IoError("cannot replace " + target.string() + ": " + ec.message());
        }
    }
    fs::rename(staging, target, ec);
    if (ec) {
        throw IoError("cannot move " + staging.string() + " into place: " + ec.message());
    }
    fs::remove_all(retired, ec);
}

} // namespace detail

inline constexpr int kBundleFormatVersion = 1;

/// Reads a bundle directory (manifest.json + raw little-endian blobs) and validates it.
inline DatasetBundle load_bundle(const fs::path& dir) {
    const auto manifest = detail::read_json(dir / "manifest.json");
    DatasetBundle b;
    std::size_t dim = 0;
    bool normalized = false;
    nlohmann::json counts;
    try {
        if (manifest.at("format_version").get<int>() != kBundleFormatVersion) {
            throw FormatError("unsupported bundle format_version " + manifest.at("format_version").dump());
        }
        dim = manifest.at("dim").get<std::size_t>();
        b.num_classes = manifest.at("num_classes").get<std::size_t>();
        b.strong_views = manifest.at("strong_views").get<std::size_t>();
        normalized = manifest.at("normalized").get<bool>();
        counts = manifest.at("counts");
        if (manifest.contains("class_names")) {
            b.class_names = manifest.at("class_names").get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest.json: ") + e.what());
    }
    if (dim < 2) {
        throw FormatError("manifest dim must be at least 2");
    }
    auto count_of = [&](const char* split) -> std::size_t {
        try {
            return counts.at(split).get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("manifest.json counts.") + split + ": " + e.what());
        }
    };
    auto table = [&](const char* file, std::size_t rows) {
        return EmbeddingTable(rows, dim, detail::read_blob<float>(dir / file, rows * dim), false);
    };
    auto labels = [&](const char* file, std::size_t rows) { return detail::read_blob<std::uint32_t>(dir / file, rows); };

    const std::size_t n_l = count_of("labeled");
    const std::size_t n_u = count_of("unlabeled");
    const std::size_t n_r = count_of("retrieved");
    const std::size_t n_t = count_of("test");
    b.labeled = {table("labeled.f32", n_l), labels("labeled.labels.u32", n_l)};
    b.unlabeled_weak = table("unlabeled.weak.f32", n_u);
    b.unlabeled_strong = table("unlabeled.strong.f32", n_u * b.strong_views);
    if (fs::exists(dir / "unlabeled.truth.u32")) {
        b.unlabeled_truth = labels("unlabeled.truth.u32", n_u);
    }
    b.retrieved = {table("retrieved.f32", n_r), labels("retrieved.labels.u32", n_r)};
    b.test = {table("test.f32", n_t), labels("test.labels.u32", n_t)};
    b.text = table("text.f32", b.num_classes);

    for (EmbeddingTable* t : {&b.labeled.embeddings, &b.unlabeled_weak, &b.unlabeled_strong, &b.retrieved.embeddings,
                              &b.test.embeddings, &b.text}) {
        if (normalized) {
            t->normalized = true;
        } else {
            t->normalize_rows();
        }
    }
    b.validate();
    return b;
}

inline void save_bundle(const DatasetBundle& b, const fs::path& dir) {
    b.validate();
    detail::write_directory_atomically(dir, [&](const fs::path& out) {
        nlohmann::json manifest = {
            {"format_version", kBundleFormatVersion},
            {"dim", b.dim()},
            {"num_classes", b.num_classes},
            {"strong_views", b.strong_views},
            {"normalized", b.normalized()},
            {"counts",
             {{"labeled", b.labeled.size()},
              {"unlabeled", b.unlabeled_count()},
              {"retrieved", b.retrieved.size()},
              {"test", b.test.size()},
              {"text", b.text.count}}},
            {"class_names", b.class_names},
        };
        detail::write_text(out / "manifest.json", manifest.dump(2) + "\n");
        auto floats = [&](const char* file, const EmbeddingTable& t) {
            detail::write_blob<float>(out / file, t.values);
        };
        auto labels = [&](const char* file, const Labels& y) { detail::write_blob<std::uint32_t>(out / file, y); };
        floats("labeled.f32", b.labeled.embeddings);
        labels("labeled.labels.u32", b.labeled.labels);
        floats("unlabeled.weak.f32", b.unlabeled_weak);
        floats("unlabeled.strong.f32", b.unlabeled_strong);
        if (b.unlabeled_truth) {
            labels("unlabeled.truth.u32", *b.unlabeled_truth);
        }
        floats("retrieved.f32", b.retrieved.embeddings);
        labels("retrieved.labels.u32", b.retrieved.labels);
        floats("test.f32", b.test.embeddings);
        labels("test.labels.u32", b.test.labels);
        floats("text.f32", b.text);
    });
}

struct FewShotIndices {
    std::vector<std::size_t> labeled;
    std::vector<std::size_t> remainder;
};

/// Picks exactly `shots` pool indices per class; both outputs are sorted and partition the pool.
inline FewShotIndices sample_few_shot_indices(std::span<const std::uint32_t> labels, std::size_t num_classes,
                                              std::size_t shots, std::uint64_t seed) {
    if (shots == 0) {
        throw ConfigError("shots must be positive");
    }
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw FormatError("pool label " + std::to_string(labels[i]) + " out of range");
        }
        by_class[labels[i]].push_back(i);
    }
    std::mt19937_64 rng(seed);
    std::vector<char> chosen(labels.size(), 0);
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto& idx = by_class[c];
        if (idx.size() < shots) {
            throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                              " pool examples, fewer than " + std::to_string(shots) + " shots");
        }
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t k = 0; k < shots; ++k) {
            chosen[idx[k]] = 1;
        }
    }
    FewShotIndices out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        (chosen[i] ? out.labeled : out.remainder).push_back(i);
    }
    return out;
}

inline LabeledTable take_rows(const LabeledTable& src, std::span<const std::size_t> rows) {
    std::vector<float> values;
    values.reserve(rows.size() * src.embeddings.dim);
    Labels labels;
    labels.reserve(rows.size());
    for (auto r : rows) {
        if (r >= src.size()) {
            throw ShapeError("row index " + std::to_string(r) + " out of range");
        }
        auto row = src.embeddings.row(r);
        values.insert(values.end(), row.begin(), row.end());
        labels.push_back(src.labels[r]);
    }
    return {EmbeddingTable(rows.size(), src.embeddings.dim, std::move(values), src.embeddings.normalized),
            std::move(labels)};
}

/// Splits a labeled pool into a K-shot labeled set and the remainder.
inline std::pair<LabeledTable, LabeledTable> sample_few_shot(const LabeledTable& pool, std::size_t num_classes,
                                                             std::size_t shots, std::uint64_t seed) {
    const auto idx = sample_few_shot_indices(pool.labels, num_classes, shots, seed);
    return {take_rows(pool, idx.labeled), take_rows(pool, idx.remainder)};
}

/// Parameters of the seeded synthetic task generator. Noise scales are Euclidean norms of the
/// isotropic Gaussian perturbation (per-coordinate std = scale / sqrt(dim)).
struct SyntheticSpec {
    std::size_t num_classes = 50;
    std::size_t dim = 64;
    std::size_t shots = 16;
    std::size_t unlabeled_per_class = 100;
    std::size_t retrieved_per_class = 32;
    std::size_t test_per_class = 30;
    std::size_t strong_views = 4;
    double sample_noise = 1.5;
    double text_noise = 1.0;
    double weak_noise = 0.1;
    double strong_noise = 0.5;
    double strong_drop = 0.2;
    double retrieved_label_noise = 0.3;
    double retrieved_shift = 0.5;
    /// Class-independent variation confined to a shared low-rank subspace.
    std::size_t nuisance_rank = 4;
    double nuisance_noise = 2.0;
    /// Unlabeled count of class c is round(unlabeled_per_class * (c + 1)^-exponent).
    double imbalance_exponent = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
        if (dim < 2) throw ConfigError("dim must be at least 2");
        if (shots < 1) throw ConfigError("shots must be at least 1");
        if (strong_views < 1) throw ConfigError("strong_views must be at least 1");
        for (double v : {sample_noise, text_noise, weak_noise, strong_noise, retrieved_shift, nuisance_noise,
                         imbalance_exponent}) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("noise scales must be finite and >= 0");
        }
        if (!(retrieved_label_noise >= 0.0 && retrieved_label_noise <= 1.0)) {
            throw ConfigError("retrieved_label_noise must lie in [0, 1]");
        }
        if (!(strong_drop >= 0.0 && strong_drop < 1.0)) throw ConfigError("strong_drop must lie in [0, 1)");
    }

    std::size_t unlabeled_count_for(std::size_t c) const {
        return static_cast<std::size_t>(
            std::llround(static_cast<double>(unlabeled_per_class) * std::pow(static_cast<double>(c + 1), -imbalance_exponent)));
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticSpec, num_classes, dim, shots, unlabeled_per_class,
                                                retrieved_per_class, test_per_class, strong_views, sample_noise,
                                                text_noise, weak_noise, strong_noise, strong_drop,
                                                retrieved_label_noise, retrieved_shift, nuisance_rank, nuisance_noise,
                                                imbalance_exponent, seed)

namespace detail {

class SyntheticSampler {
public:
    SyntheticSampler(std::uint64_t seed, std::size_t dim) : rng_(seed), dim_(dim) {}

    Vector unit() {
        Vector v(static_cast<Eigen::Index>(dim_));
        do {
            for (auto& x : v) x = normal_(rng_);
        } while (v.norm() == 0.0);
        return v / v.norm();
    }

    Vector perturb(const Vector& base, double scale) {
        if (scale == 0.0) return base;
        Vector v = base;
        const double sd = scale / std::sqrt(static_cast<double>(dim_));
        for (auto& x : v) x += sd * normal_(rng_);
        return v;
    }

    Vector drop(Vector v, double rate) {
        if (rate == 0.0) return v;
        for (auto& x : v) {
            if (uniform_(rng_) < rate) x = 0.0;
        }
        return v;
    }

    /// base + sum_k scale / sqrt(rank) * g_k * dir_k
    Vector nuisance(const Vector& base, const std::vector<Vector>& dirs, double scale) {
        if (dirs.empty() || scale == 0.0) return base;
        Vector v = base;
        const double sd = scale / std::sqrt(static_cast<double>(dirs.size()));
        for (const auto& dir : dirs) v += sd * normal_(rng_) * dir;
        return v;
    }

    double uniform() { return uniform_(rng_); }
    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
    std::size_t dim_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline Vector unit_or(const Vector& v, const Vector& fallback) {
    const double n = v.norm();
    return n > 1e-12 ? Vector(v / n) : fallback;
}

inline void append_row(std::vector<float>& dst, const Vector& v) {
    for (double x : v) dst.push_back(static_cast<float>(x));
}

} // namespace detail

/// Generates a normalized synthetic task of Gaussian classes around random unit means.
/// Text prototypes are noisy copies of the means; the retrieved split is shifted and label-noisy.
inline DatasetBundle make_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const std::size_t C = spec.num_classes;
    const std::size_t d = spec.dim;
    detail::SyntheticSampler gen(spec.seed, d);

    std::vector<Vector> means(C), shifts(C);
    for (auto& m : means) m = gen.unit();
    for (auto& s : shifts) s = gen.unit() * spec.retrieved_shift;
    std::vector<Vector> nuisance(spec.nuisance_rank);
    for (auto& n : nuisance) n = gen.unit();
    auto sample_around = [&](const Vector& center) {
        return gen.nuisance(gen.perturb(center, spec.sample_noise), nuisance, spec.nuisance_noise);
    };

    DatasetBundle b;
    b.num_classes = C;
    b.strong_views = spec.strong_views;
    for (std::size_t c = 0; c < C; ++c) {
        std::string name = std::to_string(c);
        b.class_names.push_back("class_" + std::string(name.size() < 3 ? 3 - name.size() : 0, '0') + name);
    }

    std::vector<float> text;
    for (std::size_t c = 0; c < C; ++c) {
        detail::append_row(text, detail::unit_or(gen.perturb(means[c], spec.text_noise), means[c]));
    }
    b.text = EmbeddingTable(C, d, std::move(text), true);

    // Training pool: the few-shot split is sampled from it, the rest becomes unlabeled data.
    std::vector<float> base, weak, strong;
    Labels pool_labels;
    for (std::size_t c = 0; c < C; ++c) {
        const std::size_t n = spec.shots + spec.unlabeled_count_for(c);
        for (std::size_t i = 0; i < n; ++i) {
            const Vector x = detail::unit_or(sample_around(means[c]), means[c]);
            detail::append_row(base, x);
            detail::append_row(weak, detail::unit_or(gen.perturb(x, spec.weak_noise), x));
            for (std::size_t k = 0; k < spec.strong_views; ++k) {
                const Vector s = gen.drop(gen.perturb(x, spec.strong_noise), spec.strong_drop);
                detail::append_row(strong, detail::unit_or(s, x));
            }
            pool_labels.push_back(static_cast<std::uint32_t>(c));
        }
    }
    const auto split = sample_few_shot_indices(pool_labels, C, spec.shots, spec.seed ^ 0x5bd1e995ULL);
    std::vector<float> l_vals, u_weak, u_strong;
    Labels l_labels, u_truth;
    for (auto i : split.labeled) {
        l_vals.insert(l_vals.end(), base.begin() + static_cast<std::ptrdiff_t>(i * d),
                      base.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        l_labels.push_back(pool_labels[i]);
    }
    const std::size_t k = spec.strong_views;
    for (auto i : split.remainder) {
        u_weak.insert(u_weak.end(), weak.begin() + static_cast<std::ptrdiff_t>(i * d),
                      weak.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        u_strong.insert(u_strong.end(), strong.begin() + static_cast<std::ptrdiff_t>(i * k * d),
                        strong.begin() + static_cast<std::ptrdiff_t>((i + 1) * k * d));
        u_truth.push_back(pool_labels[i]);
    }
    b.labeled = {EmbeddingTable(l_labels.size(), d, std::move(l_vals), true), std::move(l_labels)};
    b.unlabeled_weak = EmbeddingTable(u_truth.size(), d, std::move(u_weak), true);
    b.unlabeled_strong = EmbeddingTable(u_truth.size() * k, d, std::move(u_strong), true);
    b.unlabeled_truth = std::move(u_truth);

    std::vector<float> r_vals;
    Labels r_labels;
    std::uniform_int_distribution<std::uint32_t> other(0, static_cast<std::uint32_t>(C - 2));
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < spec.retrieved_per_class; ++i) {
            const Vector center = means[c] + shifts[c];
            detail::append_row(r_vals, detail::unit_or(sample_around(center), means[c]));
            auto y = static_cast<std::uint32_t>(c);
            if (gen.uniform() < spec.retrieved_label_noise) {
                const std::uint32_t pick = other(gen.engine());
                y = pick >= y ? pick + 1 : pick;
            }
            r_labels.push_back(y);
        }
    }
    b.retrieved = {EmbeddingTable(r_labels.size(), d, std::move(r_vals), true), std::move(r_labels)};

    std::vector<float> t_vals;
    Labels t_labels;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < spec.test_per_class; ++i) {
            detail::append_row(t_vals, detail::unit_or(sample_around(means[c]), means[c]));
            t_labels.push_back(static_cast<std::uint32_t>(c));
        }
    }
    b.test = {EmbeddingTable(t_labels.size(), d, std::move(t_vals), true), std::move(t_labels)};
    b.validate();
    return b;
}

} // namespace swift

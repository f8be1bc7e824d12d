#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "data_model.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace swift {

/// Bias-free linear classifier; column c of `weights` (d x C) is the prototype of class c.
struct LinearHead {
    Matrix weights;

    std::size_t dim() const { return static_cast<std::size_t>(weights.rows()); }
    std::size_t num_classes() const { return static_cast<std::size_t>(weights.cols()); }
};

/// Residual map z = x + relu(x A) B standing in for encoder finetuning.
/// `first` is d x h, `second` is h x d. A disabled adapter is the identity.
struct Adapter {
    Matrix first;
    Matrix second;
    bool enabled = false;

    std::size_t hidden() const { return static_cast<std::size_t>(first.cols()); }

    static Adapter make(std::size_t dim, std::size_t hidden, double init_std, std::uint64_t seed) {
        if (hidden == 0) {
            throw ConfigError("adapter hidden width must be positive");
        }
        Adapter a;
        a.first = Matrix(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(hidden));
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, init_std);
        for (Eigen::Index i = 0; i < a.first.size(); ++i) {
            a.first.data()[i] = normal(rng);
        }
        // zero second transform: the adapter starts as the identity map
        a.second = Matrix::Zero(static_cast<Eigen::Index>(hidden), static_cast<Eigen::Index>(dim));
        a.enabled = true;
        return a;
    }
};

/// Fixed confidence temperature plus two learnable loss temperatures T = exp(theta), floored.
struct TemperatureSet {
    double t_conf = 0.01;
    double theta_x = std::log(0.07);
    double theta_u = std::log(0.07);
    bool learn_x = true;
    bool learn_u = true;
    double floor = 0.01;

    static TemperatureSet make(double t_conf, double t_loss_init, bool learn_x, bool learn_u, double floor = 0.01) {
        if (!(t_conf > 0.0) || !(t_loss_init > 0.0) || !(floor > 0.0)) {
            throw ConfigError("temperatures must be positive");
        }
        TemperatureSet t;
        t.t_conf = t_conf;
        t.theta_x = t.theta_u = std::log(t_loss_init);
        t.learn_x = learn_x;
        t.learn_u = learn_u;
        t.floor = floor;
        t.clamp();
        return t;
    }

    double loss_x() const { return std::max(std::exp(theta_x), floor); }
    double loss_u() const { return std::max(std::exp(theta_u), floor); }

    /// Projects the thetas back above log(floor).
    void clamp() {
        const double lo = std::log(floor);
        theta_x = std::max(theta_x, lo);
        theta_u = std::max(theta_u, lo);
    }

    /// d(loss)/d(theta) from d(loss)/dT; zero when frozen or sitting on the floor.
    double theta_gradient_x(double d_loss_d_t) const {
        return (learn_x && theta_x > std::log(floor)) ? d_loss_d_t * std::exp(theta_x) : 0.0;
    }
    double theta_gradient_u(double d_loss_d_t) const {
        return (learn_u && theta_u > std::log(floor)) ? d_loss_d_t * std::exp(theta_u) : 0.0;
    }
};

struct Model {
    LinearHead head;
    Adapter adapter;
    TemperatureSet temps;

    std::size_t dim() const { return head.dim(); }
    std::size_t num_classes() const { return head.num_classes(); }
};

/// Head whose columns are the (unit-normalized) class-name text embeddings.
inline LinearHead init_head_from_text(const EmbeddingTable& text, std::size_t num_classes) {
    if (text.count != num_classes) {
        throw ShapeError("text table has " + std::to_string(text.count) + " rows for " + std::to_string(num_classes) +
                         " classes");
    }
    EmbeddingTable rows = text;
    if (!rows.normalized) {
        rows.normalize_rows();
    }
    LinearHead head;
    head.weights = rows.to_matrix().transpose();
    if (!head.weights.allFinite()) {
        throw NumericError("text embeddings contain non-finite values");
    }
    return head;
}

/// Uniform(-1/sqrt(d), 1/sqrt(d)) initialization, the usual default for a fresh linear layer.
inline LinearHead init_head_random(std::size_t dim, std::size_t num_classes, std::uint64_t seed) {
    LinearHead head;
    head.weights = Matrix(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(num_classes));
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < head.weights.size(); ++i) {
        head.weights.data()[i] = u(rng);
    }
    return head;
}

/// Intermediates kept by a forward pass for the backward pass.
struct ForwardCache {
    Matrix input;
    Matrix pre_activation; // x A
    Matrix features;       // z
    Matrix logits;         // z W
};

inline ForwardCache forward_cached(const LinearHead& head, const Adapter& adapter, const Matrix& x) {
    if (static_cast<std::size_t>(x.cols()) != head.dim()) {
        throw ShapeError("input dim " + std::to_string(x.cols()) + " does not match head dim " +
                         std::to_string(head.dim()));
    }
    ForwardCache cache;
    cache.input = x;
    if (adapter.enabled) {
        if (adapter.first.rows() != x.cols() || adapter.second.cols() != x.cols()) {
            throw ShapeError("adapter shape does not match input dim");
        }
        cache.pre_activation = x * adapter.first;
        cache.features = x + cache.pre_activation.cwiseMax(0.0) * adapter.second;
    } else {
        cache.features = x;
    }
    cache.logits = cache.features * head.weights;
    return cache;
}

inline Matrix forward(const LinearHead& head, const Adapter& adapter, const Matrix& x) {
    return forward_cached(head, adapter, x).logits;
}

inline Matrix forward(const Model& model, const Matrix& x) { return forward(model.head, model.adapter, x); }

/// Gradient buffer matching the learnable parameters of a Model.
struct ParamGrads {
    Matrix weights;
    Matrix first;
    Matrix second;
    double theta_x = 0.0;
    double theta_u = 0.0;

    static ParamGrads zeros_like(const Model& m) {
        ParamGrads g;
        g.weights = Matrix::Zero(m.head.weights.rows(), m.head.weights.cols());
        g.first = Matrix::Zero(m.adapter.first.rows(), m.adapter.first.cols());
        g.second = Matrix::Zero(m.adapter.second.rows(), m.adapter.second.cols());
        return g;
    }

    bool all_finite() const {
        return weights.allFinite() && first.allFinite() && second.allFinite() && std::isfinite(theta_x) &&
               std::isfinite(theta_u);
    }
};

/// Loss gradients flowing into the model: per-logit gradients of one forward pass plus the
/// derivatives of the loss with respect to the realized loss temperatures.
struct Upstream {
    Matrix logits;
    double d_t_loss_x = 0.0;
    double d_t_loss_u = 0.0;
};

/// Accumulates the gradients of one forward pass into `grads`.
inline void backward(const Model& model, const ForwardCache& cache, const Upstream& upstream, ParamGrads& grads) {
    const Matrix& g = upstream.logits;
    if (g.rows() != cache.logits.rows() || g.cols() != cache.logits.cols()) {
        throw ShapeError("upstream gradient shape does not match logits");
    }
    if (!g.allFinite() || !std::isfinite(upstream.d_t_loss_x) || !std::isfinite(upstream.d_t_loss_u)) {
        throw NumericError("non-finite upstream gradient");
    }
    grads.weights.noalias() += cache.features.transpose() * g;
    if (model.adapter.enabled) {
        const Matrix g_features = g * model.head.weights.transpose();
        const Matrix hidden = cache.pre_activation.cwiseMax(0.0);
        grads.second.noalias() += hidden.transpose() * g_features;
        Matrix g_hidden = g_features * model.adapter.second.transpose();
        g_hidden.array() *= (cache.pre_activation.array() > 0.0).cast<double>();
        grads.first.noalias() += cache.input.transpose() * g_hidden;
    }
    grads.theta_x += model.temps.theta_gradient_x(upstream.d_t_loss_x);
    grads.theta_u += model.temps.theta_gradient_u(upstream.d_t_loss_u);
}

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes model.json (shapes and temperatures) and model.f32 (W followed by the adapter tables) into `dir`.
inline void save_checkpoint(const Model& m, const fs::path& dir) {
    detail::write_directory_atomically(dir, [&](const fs::path& out) {
        const auto& t = m.temps;
        nlohmann::json meta = {
            {"format_version", kCheckpointFormatVersion},
            {"dim", m.dim()},
            {"num_classes", m.num_classes()},
            {"adapter", {{"enabled", m.adapter.enabled}, {"hidden", m.adapter.enabled ? m.adapter.hidden() : 0}}},
            {"temperatures",
             {{"t_conf", t.t_conf},
              {"theta_x", t.theta_x},
              {"theta_u", t.theta_u},
              {"learn_x", t.learn_x},
              {"learn_u", t.learn_u},
              {"floor", t.floor}}},
        };
        detail::write_text(out / "model.json", meta.dump(2) + "\n");
        std::vector<float> blob;
        auto append = [&](const Matrix& mat) {
            for (Eigen::Index i = 0; i < mat.size(); ++i) blob.push_back(static_cast<float>(mat.data()[i]));
        };
        append(m.head.weights);
        if (m.adapter.enabled) {
            append(m.adapter.first);
            append(m.adapter.second);
        }
        detail::write_blob<float>(out / "model.f32", blob);
    });
}

inline Model load_checkpoint(const fs::path& dir) {
    const auto meta = detail::read_json(dir / "model.json");
    Model m;
    std::size_t dim = 0, classes = 0, hidden = 0;
    bool adapter_enabled = false;
    try {
        if (meta.at("format_version").get<int>() != kCheckpointFormatVersion) {
            throw FormatError("unsupported checkpoint format_version");
        }
        dim = meta.at("dim").get<std::size_t>();
        classes = meta.at("num_classes").get<std::size_t>();
        adapter_enabled = meta.at("adapter").at("enabled").get<bool>();
        hidden = meta.at("adapter").at("hidden").get<std::size_t>();
        const auto& t = meta.at("temperatures");
        m.temps.t_conf = t.at("t_conf").get<double>();
        m.temps.theta_x = t.at("theta_x").get<double>();
        m.temps.theta_u = t.at("theta_u").get<double>();
        m.temps.learn_x = t.at("learn_x").get<bool>();
        m.temps.learn_u = t.at("learn_u").get<bool>();
        m.temps.floor = t.at("floor").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model.json: ") + e.what());
    }
    const std::size_t n = dim * classes + (adapter_enabled ? 2 * dim * hidden : 0);
    const auto blob = detail::read_blob<float>(dir / "model.f32", n);
    std::size_t off = 0;
    auto take = [&](std::size_t rows, std::size_t cols) {
        Matrix mat(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index i = 0; i < mat.size(); ++i) mat.data()[i] = blob[off++];
        return mat;
    };
    m.head.weights = take(dim, classes);
    if (adapter_enabled) {
        m.adapter.first = take(dim, hidden);
        m.adapter.second = take(hidden, dim);
        m.adapter.enabled = true;
    }
    if (!m.head.weights.allFinite() || !m.adapter.first.allFinite() || !m.adapter.second.allFinite()) {
        throw NumericError("checkpoint contains non-finite parameters");
    }
    return m;
}

} // namespace swift

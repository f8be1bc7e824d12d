#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace swift {

namespace detail {

inline void require_temperature(double t) {
    if (!(t > 0.0) || !std::isfinite(t)) {
        throw NumericError("temperature must be positive and finite, got " + std::to_string(t));
    }
}

/// In-place stable softmax of z (already scaled); returns log-sum-exp.
template <typename Row>
double softmax_inplace(Row&& z) {
    const double mx = z.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < z.size(); ++c) {
        z(c) = std::exp(z(c) - mx);
        sum += z(c);
    }
    z /= sum;
    return mx + std::log(sum);
}

} // namespace detail

/// s_c = exp(q_c / T) / sum_j exp(q_j / T), with max-subtraction.
inline Vector softmax_t(std::span<const double> logits, double temperature) {
    detail::require_temperature(temperature);
    if (logits.empty()) {
        throw ShapeError("softmax of an empty vector");
    }
    Vector z(static_cast<Eigen::Index>(logits.size()));
    for (std::size_t c = 0; c < logits.size(); ++c) {
        if (!std::isfinite(logits[c])) {
            throw NumericError("non-finite logit");
        }
        z(static_cast<Eigen::Index>(c)) = logits[c];
    }
    // shift before scaling so every exponent is exactly (q_j - q_max) / T
    z = (z.array() - z.maxCoeff()) / temperature;
    detail::softmax_inplace(z);
    return z;
}

/// Row-wise softmax_t.
inline Matrix softmax_rows(const Matrix& logits, double temperature) {
    detail::require_temperature(temperature);
    if (!logits.allFinite()) {
        throw NumericError("non-finite logit");
    }
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        p.row(i) = (logits.row(i).array() - logits.row(i).maxCoeff()) / temperature;
        detail::softmax_inplace(p.row(i));
    }
    return p;
}

/// Pseudo-labels of one unlabeled batch with their confidence mask.
struct SelectionResult {
    Labels pseudo_labels;
    std::vector<double> confidences;
    std::vector<bool> mask;
    double utilization = 0.0;

    std::size_t selected() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

/// Selection from rows that are already probability vectors.
inline SelectionResult select_from_probs(const Matrix& probs, double sigma) {
    if (!(sigma >= 0.0 && sigma <= 1.0)) {
        throw ConfigError("confidence threshold must lie in [0, 1]");
    }
    SelectionResult r;
    const auto n = static_cast<std::size_t>(probs.rows());
    r.pseudo_labels.resize(n);
    r.confidences.resize(n);
    r.mask.resize(n);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = probs.row(static_cast<Eigen::Index>(i));
        const std::size_t best = argmax(row);
        r.pseudo_labels[i] = static_cast<std::uint32_t>(best);
        r.confidences[i] = row(static_cast<Eigen::Index>(best));
        r.mask[i] = r.confidences[i] >= sigma;
        kept += r.mask[i] ? 1 : 0;
    }
    r.utilization = n == 0 ? 0.0 : static_cast<double>(kept) / static_cast<double>(n);
    return r;
}

/// Confidence-thresholded pseudo-labeling of weak-view logits sharpened by t_conf.
inline SelectionResult select(const Matrix& weak_logits, double t_conf, double sigma) {
    return select_from_probs(softmax_rows(weak_logits, t_conf), sigma);
}

/// Mean loss plus its gradients with respect to the logits and T.
struct CeResult {
    double loss = 0.0;
    Matrix grad;
    double d_temperature = 0.0;
};

namespace detail {

/// sum_i w_i * CE(z_i, y_i) / normalizer with z_i = (q_i + raw_offset) / T + scaled_offset.
/// Rows with zero weight contribute neither loss nor gradient.
inline CeResult weighted_temperature_ce(const Matrix& logits, std::span<const std::uint32_t> labels,
                                        std::span<const double> weights, double normalizer, double temperature,
                                        const Vector* raw_offset = nullptr, const Vector* scaled_offset = nullptr) {
    require_temperature(temperature);
    const Eigen::Index n = logits.rows();
    const Eigen::Index C = logits.cols();
    if (static_cast<std::size_t>(n) != labels.size() || labels.size() != weights.size()) {
        throw ShapeError("logits, labels and weights disagree on batch size");
    }
    if (!logits.allFinite()) {
        throw NumericError("non-finite logit");
    }
    CeResult r;
    r.grad = Matrix::Zero(n, C);
    if (n == 0) {
        return r;
    }
    Vector z(C), shifted(C);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double w = weights[static_cast<std::size_t>(i)];
        if (w == 0.0) {
            continue;
        }
        const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
        if (y >= C) {
            throw ShapeError("label " + std::to_string(y) + " out of range for " + std::to_string(C) + " classes");
        }
        shifted = logits.row(i).transpose();
        if (raw_offset != nullptr) shifted += *raw_offset;
        z = shifted / temperature;
        if (scaled_offset != nullptr) z += *scaled_offset;
        const double zy = z(y);
        double nll = 0.0;
        if (zy >= z.maxCoeff()) {
            // confident row: log1p keeps the tiny loss exact instead of cancelling lse - zy
            double rest = 0.0;
            for (Eigen::Index c = 0; c < C; ++c) {
                if (c != y) rest += std::exp(z(c) - zy);
            }
            nll = std::log1p(rest);
            softmax_inplace(z);
        } else {
            nll = softmax_inplace(z) - zy;
        }
        r.loss += w * nll;
        // z now holds p; p - e_y is the gradient wrt the scaled logits
        z(y) -= 1.0;
        r.grad.row(i) = (w / (normalizer * temperature)) * z.transpose();
        r.d_temperature += -w * z.dot(shifted) / (temperature * temperature);
    }
    r.loss /= normalizer;
    r.d_temperature /= normalizer;
    return r;
}

} // namespace detail

/// Mean temperature-scaled cross-entropy -log softmax_t(q, T)[y].
inline CeResult ce_loss_t(const Matrix& logits, std::span<const std::uint32_t> labels, double temperature) {
    const std::vector<double> ones(labels.size(), 1.0);
    return detail::weighted_temperature_ce(logits, labels, ones, std::max<double>(1.0, static_cast<double>(labels.size())),
                                           temperature);
}

/// Loss on retrieved (noisy-labeled) data; same form as the labeled loss, using T_loss_x.
inline CeResult retrieved_loss(const Matrix& logits, std::span<const std::uint32_t> noisy_labels,
                               const TemperatureSet& temps) {
    return ce_loss_t(logits, noisy_labels, temps.loss_x());
}

/// Where the debiasing offset is applied relative to temperature scaling.
enum class OffsetSpace { raw, scaled };

/// EMA of the pseudo-label marginal used for per-class logit offsets.
struct DebiasState {
    Vector ema_marginal;
    double momentum = 0.999;
    double lambda = 0.5;
    double epsilon = 1e-6;
    OffsetSpace space = OffsetSpace::raw;

    static DebiasState uniform(std::size_t num_classes, double momentum = 0.999, double lambda = 0.5,
                               double epsilon = 1e-6, OffsetSpace space = OffsetSpace::raw) {
        if (!(momentum >= 0.0 && momentum <= 1.0)) {
            throw ConfigError("debias momentum must lie in [0, 1]");
        }
        if (!(lambda >= 0.0)) {
            throw ConfigError("debias lambda must be non-negative");
        }
        DebiasState s;
        s.ema_marginal = Vector::Constant(static_cast<Eigen::Index>(num_classes), 1.0 / static_cast<double>(num_classes));
        s.momentum = momentum;
        s.lambda = lambda;
        s.epsilon = epsilon;
        s.space = space;
        return s;
    }

    /// lambda * ln(ema + eps), one entry per class.
    Vector offsets() const { return lambda * (ema_marginal.array() + epsilon).log().matrix(); }
};

/// ema <- momentum * ema + (1 - momentum) * mean(weak_probs).
inline DebiasState debias_update(const DebiasState& state, const Matrix& weak_probs) {
    if (weak_probs.cols() != state.ema_marginal.size()) {
        throw ShapeError("debias state and probabilities disagree on class count");
    }
    DebiasState next = state;
    if (weak_probs.rows() == 0) {
        return next;
    }
    const Vector batch_mean = weak_probs.colwise().mean().transpose();
    next.ema_marginal = state.momentum * state.ema_marginal + (1.0 - state.momentum) * batch_mean;
    next.ema_marginal /= next.ema_marginal.sum();
    return next;
}

/// q' = q - lambda * ln(ema + eps) on every row.
inline Matrix debias_adjust(const Matrix& logits, const DebiasState& state) {
    if (logits.cols() != state.ema_marginal.size()) {
        throw ShapeError("debias state and logits disagree on class count");
    }
    return logits.rowwise() - state.offsets().transpose();
}

struct FixMatchResult {
    double labeled_loss = 0.0;
    double unlabeled_loss = 0.0;
    SelectionResult selection;
    Matrix grad_labeled;
    Matrix grad_strong;
    double d_t_loss_x = 0.0;
    double d_t_loss_u = 0.0;

    double total() const { return labeled_loss + unlabeled_loss; }
};

/// L_l + L_u with temperature tuning. Pseudo-labels come from the weak view and are treated as
/// constants; L_u sums selected samples and divides by the full unlabeled batch size. With a
/// debias state, selection uses debiased logits and the strong-view loss adds the same offset
/// as a logit-adjustment margin.
inline FixMatchResult fixmatch_losses(const Matrix& weak_logits, const Matrix& strong_logits,
                                      const Matrix& labeled_logits, std::span<const std::uint32_t> labels,
                                      const TemperatureSet& temps, double sigma, const DebiasState* debias = nullptr) {
    if (weak_logits.rows() != strong_logits.rows() || weak_logits.cols() != strong_logits.cols()) {
        throw ShapeError("weak and strong logits must be aligned per sample");
    }
    if (labeled_logits.rows() > 0 && labeled_logits.cols() != weak_logits.cols() && weak_logits.rows() > 0) {
        throw ShapeError("labeled and unlabeled logits disagree on class count");
    }
    FixMatchResult r;
    const CeResult lab = ce_loss_t(labeled_logits, labels, temps.loss_x());
    r.labeled_loss = lab.loss;
    r.grad_labeled = lab.grad;
    r.d_t_loss_x = lab.d_temperature;

    Vector offsets;
    if (debias != nullptr) {
        offsets = debias->offsets();
        if (debias->space == OffsetSpace::raw) {
            r.selection = select(debias_adjust(weak_logits, *debias), temps.t_conf, sigma);
        } else {
            Matrix scaled = weak_logits / temps.t_conf;
            scaled.rowwise() -= offsets.transpose();
            r.selection = select(scaled, 1.0, sigma);
        }
    } else {
        r.selection = select(weak_logits, temps.t_conf, sigma);
    }

    const auto n = static_cast<std::size_t>(weak_logits.rows());
    std::vector<double> weights(n);
    for (std::size_t i = 0; i < n; ++i) {
        weights[i] = r.selection.mask[i] ? 1.0 : 0.0;
    }
    const double normalizer = std::max<double>(1.0, static_cast<double>(n));
    const Vector* raw = (debias != nullptr && debias->space == OffsetSpace::raw) ? &offsets : nullptr;
    const Vector* scaled = (debias != nullptr && debias->space == OffsetSpace::scaled) ? &offsets : nullptr;
    const CeResult unl = detail::weighted_temperature_ce(strong_logits, r.selection.pseudo_labels, weights, normalizer,
                                                         temps.loss_u(), raw, scaled);
    r.unlabeled_loss = unl.loss;
    r.grad_strong = unl.grad;
    r.d_t_loss_u = unl.d_temperature;
    return r;
}

} // namespace swift

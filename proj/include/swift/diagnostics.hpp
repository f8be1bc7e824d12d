#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "data_model.hpp"
#include "error.hpp"
#include "model.hpp"
#include "ssl_core.hpp"
#include "tensor.hpp"

namespace swift {

/// Fraction of exact matches.
inline double accuracy(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels) {
    if (predictions.size() != labels.size()) {
        throw ShapeError("predictions and labels differ in length");
    }
    if (labels.empty()) {
        throw ShapeError("accuracy of an empty set");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        hits += predictions[i] == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Logits for every row of a table, evaluated in row chunks across SWIFT_THREADS workers.
inline Matrix logits_for(const Model& model, const EmbeddingTable& table) {
    Matrix out(static_cast<Eigen::Index>(table.count), static_cast<Eigen::Index>(model.num_classes()));
    parallel_rows(table.count, [&](std::size_t begin, std::size_t end) {
        std::vector<std::size_t> rows(end - begin);
        std::iota(rows.begin(), rows.end(), begin);
        out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
            forward(model, table.gather(rows));
    });
    return out;
}

inline Labels predict(const Model& model, const EmbeddingTable& table) { return argmax_rows(logits_for(model, table)); }

/// Top-1 accuracy on a labeled split.
inline double evaluate(const Model& model, const LabeledTable& split) {
    return accuracy(predict(model, split.embeddings), split.labels);
}

struct Histogram {
    std::vector<double> edges; // num_bins + 1 uniform edges over (0, 1]
    std::vector<std::size_t> counts;
};

/// Bins confidences into (k/b, (k+1)/b].
inline Histogram confidence_histogram(std::span<const double> confidences, std::size_t num_bins) {
    if (num_bins < 1) {
        throw ConfigError("histogram needs at least one bin");
    }
    Histogram h;
    h.counts.assign(num_bins, 0);
    for (std::size_t k = 0; k <= num_bins; ++k) {
        h.edges.push_back(static_cast<double>(k) / static_cast<double>(num_bins));
    }
    for (double c : confidences) {
        if (!(c > 0.0 && c <= 1.0)) {
            throw NumericError("confidence outside (0, 1]: " + std::to_string(c));
        }
        const auto raw = static_cast<std::size_t>(std::ceil(c * static_cast<double>(num_bins)));
        const std::size_t bin = std::clamp<std::size_t>(raw, 1, num_bins) - 1;
        ++h.counts[bin];
    }
    return h;
}

struct SweepRow {
    double t_conf = 0.0;
    double utilization = 0.0;
    std::size_t selected = 0;
    std::optional<double> pseudo_label_acc;     // over selected samples
    std::optional<double> pseudo_label_acc_all; // over every unlabeled sample
};

/// Utilization and pseudo-label quality on U's weak views for each confidence temperature.
inline std::vector<SweepRow> tconf_sweep(const Model& model, const DatasetBundle& bundle,
                                         std::span<const double> t_conf_grid, double sigma) {
    const Matrix logits = logits_for(model, bundle.unlabeled_weak);
    std::vector<SweepRow> rows;
    for (double t : t_conf_grid) {
        const SelectionResult sel = select(logits, t, sigma);
        SweepRow row;
        row.t_conf = t;
        row.utilization = sel.utilization;
        row.selected = sel.selected();
        if (bundle.unlabeled_truth && !bundle.unlabeled_truth->empty()) {
            const Labels& truth = *bundle.unlabeled_truth;
            std::size_t hit_sel = 0, hit_all = 0;
            for (std::size_t i = 0; i < truth.size(); ++i) {
                const bool hit = sel.pseudo_labels[i] == truth[i];
                hit_all += hit ? 1 : 0;
                hit_sel += (hit && sel.mask[i]) ? 1 : 0;
            }
            row.pseudo_label_acc_all = static_cast<double>(hit_all) / static_cast<double>(truth.size());
            if (row.selected > 0) {
                row.pseudo_label_acc = static_cast<double>(hit_sel) / static_cast<double>(row.selected);
            }
        }
        rows.push_back(row);
    }
    return rows;
}

struct FlatnessStats {
    double mean_max_prob = 0.0;
    double mean_entropy = 0.0;
    /// Input with each column scaled to sum to one (all-zero columns left as zero).
    Matrix column_normalized;
};

inline FlatnessStats flatness_stats(const Matrix& probs) {
    FlatnessStats s;
    const Eigen::Index n = probs.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = probs.row(i);
        if ((row.array() < 0.0).any() || std::abs(row.sum() - 1.0) > 1e-6) {
            throw NumericError("row " + std::to_string(i) + " is not a probability vector");
        }
        s.mean_max_prob += row.maxCoeff();
        double h = 0.0;
        for (Eigen::Index c = 0; c < row.size(); ++c) {
            if (row(c) > 0.0) h -= row(c) * std::log(row(c));
        }
        s.mean_entropy += h;
    }
    if (n > 0) {
        s.mean_max_prob /= static_cast<double>(n);
        s.mean_entropy /= static_cast<double>(n);
    }
    s.column_normalized = probs;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
        const double total = probs.col(c).sum();
        if (total > 0.0) s.column_normalized.col(c) /= total;
    }
    return s;
}

/// KL(p || uniform) of the empirical distribution given by class counts; 0 for no counts.
inline double kl_to_uniform(std::span<const std::size_t> counts) {
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    if (total == 0.0) {
        return 0.0;
    }
    const double classes = static_cast<double>(counts.size());
    double kl = 0.0;
    for (auto k : counts) {
        if (k == 0) continue;
        const double p = static_cast<double>(k) / total;
        kl += p * std::log(p * classes);
    }
    return kl;
}

} // namespace swift

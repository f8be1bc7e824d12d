#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diagnostics.hpp"

namespace swift {

/// One row of training history.
struct EpochRecord {
    int stage = 0;
    std::size_t epoch = 0; // 1-based within the stage
    std::optional<double> labeled_loss;
    std::optional<double> unlabeled_loss;
    std::optional<double> retrieved_loss;
    std::optional<double> utilization;
    std::optional<double> pseudo_label_acc;
    std::optional<double> pseudo_label_acc_all;
    double t_loss_x = 0.0;
    double t_loss_u = 0.0;
    double lr = 0.0;
    std::optional<double> train_acc;
    std::optional<double> test_acc;
    std::vector<std::size_t> selected_class_counts;
    std::size_t steps = 0;
    std::size_t labeled_samples = 0;   // rows consumed by the labeled path (L and R)
    std::size_t unlabeled_samples = 0; // rows consumed by the unlabeled path
};

struct RunReport {
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::vector<EpochRecord> history;
    std::optional<double> zero_shot_test_acc;
    std::map<int, double> stage_test_acc;
    std::optional<double> final_test_acc;
    std::optional<double> final_utilization;
    std::vector<SweepRow> sweep;

    /// Rows of one stage, in epoch order.
    std::vector<const EpochRecord*> stage_rows(int stage) const {
        std::vector<const EpochRecord*> out;
        for (const auto& r : history) {
            if (r.stage == stage) out.push_back(&r);
        }
        return out;
    }
};

namespace detail {

inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::optional<double>& v) { return v ? format_double(*v) : std::string{}; }

} // namespace detail

inline nlohmann::json to_json(const EpochRecord& r) {
    return {
        {"stage", r.stage},
        {"epoch", r.epoch},
        {"L_l", detail::opt(r.labeled_loss)},
        {"L_u", detail::opt(r.unlabeled_loss)},
        {"L_r", detail::opt(r.retrieved_loss)},
        {"utilization", detail::opt(r.utilization)},
        {"pseudo_label_acc", detail::opt(r.pseudo_label_acc)},
        {"pseudo_label_acc_all", detail::opt(r.pseudo_label_acc_all)},
        {"T_loss_x", r.t_loss_x},
        {"T_loss_u", r.t_loss_u},
        {"lr", r.lr},
        {"train_acc", detail::opt(r.train_acc)},
        {"test_acc", detail::opt(r.test_acc)},
        {"selected_class_counts", r.selected_class_counts},
        {"steps", r.steps},
        {"labeled_samples", r.labeled_samples},
        {"unlabeled_samples", r.unlabeled_samples},
    };
}

inline nlohmann::json to_json(const SweepRow& r) {
    return {
        {"t_conf", r.t_conf},
        {"utilization", r.utilization},
        {"selected", r.selected},
        {"pseudo_label_acc", detail::opt(r.pseudo_label_acc)},
        {"pseudo_label_acc_all", detail::opt(r.pseudo_label_acc_all)},
    };
}

inline nlohmann::json to_json(const RunReport& report) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& r : report.history) history.push_back(to_json(r));
    nlohmann::json stages = nlohmann::json::object();
    for (const auto& [stage, acc] : report.stage_test_acc) stages[std::to_string(stage)] = acc;
    nlohmann::json sweep = nlohmann::json::array();
    for (const auto& r : report.sweep) sweep.push_back(to_json(r));
    return {
        {"config", report.config},
        {"seed", report.seed},
        {"history", history},
        {"zero_shot_test_acc", detail::opt(report.zero_shot_test_acc)},
        {"stage_test_acc", stages},
        {"final_test_acc", detail::opt(report.final_test_acc)},
        {"final_utilization", detail::opt(report.final_utilization)},
        {"sweep", sweep},
    };
}

inline constexpr const char* kMetricsHeader =
    "stage,epoch,L_l,L_u,L_r,utilization,pseudo_label_acc,T_loss_x,T_loss_u,lr,test_acc";

/// One line per epoch; fields that do not apply to a stage are left empty.
inline std::string metrics_csv(const RunReport& report) {
    std::ostringstream out;
    out << kMetricsHeader << '\n';
    for (const auto& r : report.history) {
        out << r.stage << ',' << r.epoch << ',' << detail::csv_field(r.labeled_loss) << ','
            << detail::csv_field(r.unlabeled_loss) << ',' << detail::csv_field(r.retrieved_loss) << ','
            << detail::csv_field(r.utilization) << ',' << detail::csv_field(r.pseudo_label_acc) << ','
            << detail::format_double(r.t_loss_x) << ',' << detail::format_double(r.t_loss_u) << ','
            << detail::format_double(r.lr) << ',' << detail::csv_field(r.test_acc) << '\n';
    }
    return out.str();
}

} // namespace swift

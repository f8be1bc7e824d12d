#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "data_model.hpp"
#include "diagnostics.hpp"
#include "error.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "report.hpp"
#include "ssl_core.hpp"

namespace swift {

enum class Method { fixmatch, debiaspl };
enum class HeadInit { text, random };

/// Training hyperparameters. Defaults reproduce the reference recipe.
struct TrainConfig {
    Method method = Method::fixmatch;
    std::vector<int> stages{1, 2, 3};
    std::size_t epochs_stage1 = 50;
    std::size_t epochs_stage2 = 50;
    std::size_t epochs_stage3 = 10;
    std::size_t batch_size = 32;
    std::size_t mu = 5;
    double head_lr = 1e-4;
    double adapter_lr = 1e-6;
    double temperature_lr = 1e-4;
    double weight_decay = 1e-2;
    double temperature_weight_decay = 0.0;
    double t_conf = 0.01;
    double sigma = 0.8;
    double t_loss_init = 0.07;
    bool learn_t_loss_x = true;
    bool learn_t_loss_u = true;
    double t_loss_floor = 0.01;
    bool reset_t_loss_between_stages = false;
    bool retrieval_augmentation = true;
    /// Share of each stage-2 labeled batch drawn from R; negative means uniform draws from L and R
    /// concatenated.
    double retrieved_fraction = -1.0;
    bool add_labeled_to_unlabeled = true;
    HeadInit init = HeadInit::text;
    std::size_t adapter_hidden = 0; // 0 selects dim / 4
    double adapter_init_std = 1e-3;
    double debias_lambda = 0.5;
    double debias_momentum = 0.999;
    double debias_epsilon = 1e-6;
    OffsetSpace debias_offset_space = OffsetSpace::raw;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (mu < 1) throw ConfigError("mu must be at least 1");
        for (double v : {head_lr, adapter_lr, temperature_lr}) {
            if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("learning rates must be positive");
        }
        if (!(weight_decay >= 0.0) || !(temperature_weight_decay >= 0.0)) {
            throw ConfigError("weight decay must be non-negative");
        }
        if (!(t_conf > 0.0) || !(t_loss_init > 0.0) || !(t_loss_floor > 0.0)) {
            throw ConfigError("temperatures must be positive");
        }
        if (!(sigma >= 0.0 && sigma <= 1.0)) throw ConfigError("sigma must lie in [0, 1]");
        if (retrieved_fraction > 1.0) throw ConfigError("retrieved_fraction must not exceed 1");
        if (!(debias_momentum >= 0.0 && debias_momentum <= 1.0)) throw ConfigError("debias_momentum must lie in [0, 1]");
        if (!(debias_lambda >= 0.0) || !(debias_epsilon > 0.0)) throw ConfigError("invalid debias parameters");
        if (!(adapter_init_std >= 0.0)) throw ConfigError("adapter_init_std must be non-negative");
        if (stages.empty()) throw ConfigError("at least one stage must be selected");
        for (int s : stages) {
            if (s < 1 || s > 3) throw ConfigError("stages must be drawn from {1,2,3}");
        }
    }
};

inline const char* to_string(Method m) { return m == Method::fixmatch ? "fixmatch" : "debiaspl"; }
inline const char* to_string(HeadInit i) { return i == HeadInit::text ? "text" : "random"; }
inline const char* to_string(OffsetSpace s) { return s == OffsetSpace::raw ? "raw" : "scaled"; }

inline nlohmann::json to_json(const TrainConfig& c) {
    return {
        {"method", to_string(c.method)},
        {"stages", c.stages},
        {"epochs_stage1", c.epochs_stage1},
        {"epochs_stage2", c.epochs_stage2},
        {"epochs_stage3", c.epochs_stage3},
        {"batch_size", c.batch_size},
        {"mu", c.mu},
        {"head_lr", c.head_lr},
        {"adapter_lr", c.adapter_lr},
        {"temperature_lr", c.temperature_lr},
        {"weight_decay", c.weight_decay},
        {"temperature_weight_decay", c.temperature_weight_decay},
        {"t_conf", c.t_conf},
        {"sigma", c.sigma},
        {"t_loss_init", c.t_loss_init},
        {"learn_t_loss_x", c.learn_t_loss_x},
        {"learn_t_loss_u", c.learn_t_loss_u},
        {"t_loss_floor", c.t_loss_floor},
        {"reset_t_loss_between_stages", c.reset_t_loss_between_stages},
        {"retrieval_augmentation", c.retrieval_augmentation},
        {"retrieved_fraction", c.retrieved_fraction},
        {"add_labeled_to_unlabeled", c.add_labeled_to_unlabeled},
        {"init", to_string(c.init)},
        {"adapter_hidden", c.adapter_hidden},
        {"adapter_init_std", c.adapter_init_std},
        {"debias_lambda", c.debias_lambda},
        {"debias_momentum", c.debias_momentum},
        {"debias_epsilon", c.debias_epsilon},
        {"debias_offset_space", to_string(c.debias_offset_space)},
        {"seed", c.seed},
    };
}

/// Sets one config field from a JSON value; unknown keys and mistyped values are rejected.
inline void apply_config_value(TrainConfig& c, const std::string& key, const nlohmann::json& v) {
    try {
        auto pick = [&](std::initializer_list<const char*> names) {
            const auto s = v.get<std::string>();
            for (const char* n : names) {
                if (s == n) return s;
            }
            throw ConfigError("invalid value '" + s + "' for " + key);
        };
        if (key == "method") c.method = pick({"fixmatch", "debiaspl"}) == "fixmatch" ? Method::fixmatch : Method::debiaspl;
        else if (key == "stages") c.stages = v.get<std::vector<int>>();
        else if (key == "epochs_stage1") c.epochs_stage1 = v.get<std::size_t>();
        else if (key == "epochs_stage2") c.epochs_stage2 = v.get<std::size_t>();
        else if (key == "epochs_stage3") c.epochs_stage3 = v.get<std::size_t>();
        else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
        else if (key == "mu") c.mu = v.get<std::size_t>();
        else if (key == "head_lr") c.head_lr = v.get<double>();
        else if (key == "adapter_lr") c.adapter_lr = v.get<double>();
        else if (key == "temperature_lr") c.temperature_lr = v.get<double>();
        else if (key == "weight_decay") c.weight_decay = v.get<double>();
        else if (key == "temperature_weight_decay") c.temperature_weight_decay = v.get<double>();
        else if (key == "t_conf") c.t_conf = v.get<double>();
        else if (key == "sigma") c.sigma = v.get<double>();
        else if (key == "t_loss_init") c.t_loss_init = v.get<double>();
        else if (key == "learn_t_loss_x") c.learn_t_loss_x = v.get<bool>();
        else if (key == "learn_t_loss_u") c.learn_t_loss_u = v.get<bool>();
        else if (key == "t_loss_floor") c.t_loss_floor = v.get<double>();
        else if (key == "reset_t_loss_between_stages") c.reset_t_loss_between_stages = v.get<bool>();
        else if (key == "retrieval_augmentation") c.retrieval_augmentation = v.get<bool>();
        else if (key == "retrieved_fraction") c.retrieved_fraction = v.get<double>();
        else if (key == "add_labeled_to_unlabeled") c.add_labeled_to_unlabeled = v.get<bool>();
        else if (key == "init") c.init = pick({"text", "random"}) == "text" ? HeadInit::text : HeadInit::random;
        else if (key == "adapter_hidden") c.adapter_hidden = v.get<std::size_t>();
        else if (key == "adapter_init_std") c.adapter_init_std = v.get<double>();
        else if (key == "debias_lambda") c.debias_lambda = v.get<double>();
        else if (key == "debias_momentum") c.debias_momentum = v.get<double>();
        else if (key == "debias_epsilon") c.debias_epsilon = v.get<double>();
        else if (key == "debias_offset_space")
            c.debias_offset_space = pick({"raw", "scaled"}) == "raw" ? OffsetSpace::raw : OffsetSpace::scaled;
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else throw ConfigError("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

inline void apply_config(TrainConfig& c, const nlohmann::json& obj) {
    if (!obj.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    for (const auto& [key, value] : obj.items()) {
        apply_config_value(c, key, value);
    }
}

using Logger = std::function<void(const std::string&)>;

struct StageResult {
    Model model;
    std::vector<EpochRecord> history;
};

namespace detail {

inline std::mt19937_64 stage_rng(std::uint64_t seed, int stage) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stage), 0x9e3779b9u};
    return std::mt19937_64(seq);
}

/// Endless stream over [0, n) that reshuffles on every pass.
class IndexStream {
public:
    IndexStream(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(&rng) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        pos_ = n;
    }

    std::size_t next() {
        if (pos_ == order_.size()) {
            std::shuffle(order_.begin(), order_.end(), *rng_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

    std::size_t size() const { return order_.size(); }

private:
    std::vector<std::size_t> order_;
    std::mt19937_64* rng_;
    std::size_t pos_ = 0;
};

/// One AdamW per learnable tensor; all step in lockstep.
struct Optimizers {
    AdamW head, first, second, theta_x, theta_u;

    explicit Optimizers(const Model& m)
        : head(static_cast<std::size_t>(m.head.weights.size())),
          first(static_cast<std::size_t>(m.adapter.first.size())),
          second(static_cast<std::size_t>(m.adapter.second.size())),
          theta_x(1),
          theta_u(1) {}
};

inline std::span<double> flat(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<const double> flat(const Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }

/// Applies one optimizer step; `scale` is the cosine factor shared by all parameter groups.
inline void apply_step(Model& model, const ParamGrads& g, Optimizers& opt, const TrainConfig& cfg, double scale,
                       bool train_adapter) {
    if (!g.all_finite()) {
        throw NumericError("non-finite gradient; aborting run");
    }
    opt.head.step(flat(model.head.weights), flat(g.weights), cfg.head_lr * scale, cfg.weight_decay);
    if (train_adapter && model.adapter.enabled) {
        opt.first.step(flat(model.adapter.first), flat(g.first), cfg.adapter_lr * scale, cfg.weight_decay);
        opt.second.step(flat(model.adapter.second), flat(g.second), cfg.adapter_lr * scale, cfg.weight_decay);
    }
    if (model.temps.learn_x) {
        opt.theta_x.step({&model.temps.theta_x, 1}, {&g.theta_x, 1}, cfg.temperature_lr * scale,
                         cfg.temperature_weight_decay);
    }
    if (model.temps.learn_u) {
        opt.theta_u.step({&model.temps.theta_u, 1}, {&g.theta_u, 1}, cfg.temperature_lr * scale,
                         cfg.temperature_weight_decay);
    }
    model.temps.clamp();
}

inline std::optional<double> test_accuracy(const Model& m, const DatasetBundle& b) {
    if (b.test.empty()) return std::nullopt;
    return evaluate(m, b.test);
}

inline void check_compatible(const Model& m, const DatasetBundle& b) {
    if (m.dim() != b.dim() || m.num_classes() != b.num_classes) {
        throw ShapeError("model (" + std::to_string(m.dim()) + "x" + std::to_string(m.num_classes()) +
                         ") does not match bundle (" + std::to_string(b.dim()) + "x" + std::to_string(b.num_classes) +
                         ")");
    }
}

inline TemperatureSet initial_temperatures(const TrainConfig& cfg) {
    return TemperatureSet::make(cfg.t_conf, cfg.t_loss_init, cfg.learn_t_loss_x, cfg.learn_t_loss_u, cfg.t_loss_floor);
}

/// Labeled-only finetuning shared by stages 1 and 3.
inline StageResult run_supervised(const DatasetBundle& bundle, Model model, const TrainConfig& cfg, int stage,
                                  std::size_t epochs, bool train_adapter) {
    if (bundle.labeled.empty()) {
        throw ConfigError("stage " + std::to_string(stage) + " needs labeled data");
    }
    const std::size_t n = bundle.labeled.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = epochs * steps_per_epoch;
    auto rng = stage_rng(cfg.seed, stage);
    Optimizers opt(model);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    StageResult out;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        double lr_scale = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t begin = s * cfg.batch_size;
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            const std::span<const std::size_t> rows(order.data() + begin, end - begin);
            Labels y;
            y.reserve(rows.size());
            for (auto r : rows) y.push_back(bundle.labeled.labels[r]);

            const ForwardCache cache = forward_cached(model.head, model.adapter, bundle.labeled.embeddings.gather(rows));
            const CeResult ce = ce_loss_t(cache.logits, y, model.temps.loss_x());
            ParamGrads g = ParamGrads::zeros_like(model);
            backward(model, cache, {ce.grad, ce.d_temperature, 0.0}, g);
            lr_scale = cosine_lr(step++, total, 1.0);
            apply_step(model, g, opt, cfg, lr_scale, train_adapter);
            loss_sum += ce.loss * static_cast<double>(rows.size());
        }
        EpochRecord rec;
        rec.stage = stage;
        rec.epoch = epoch;
        rec.labeled_loss = loss_sum / static_cast<double>(n);
        rec.steps = steps_per_epoch;
        rec.labeled_samples = n;
        rec.t_loss_x = model.temps.loss_x();
        rec.t_loss_u = model.temps.loss_u();
        rec.lr = cfg.head_lr * lr_scale;
        rec.train_acc = evaluate(model, bundle.labeled);
        rec.test_acc = test_accuracy(model, bundle);
        out.history.push_back(std::move(rec));
    }
    out.model = std::move(model);
    return out;
}

} // namespace detail

/// Initial model for a run: text-initialized (or random) head, disabled adapter, configured temperatures.
inline Model initial_model(const DatasetBundle& bundle, const TrainConfig& cfg) {
    Model m;
    m.head = cfg.init == HeadInit::text ? init_head_from_text(bundle.text, bundle.num_classes)
                                        : init_head_random(bundle.dim(), bundle.num_classes, cfg.seed ^ 0xa5a5a5a5ULL);
    m.temps = detail::initial_temperatures(cfg);
    return m;
}

/// Stage 1: initialize the head, then finetune it on the labeled split with the adapter disabled.
inline StageResult run_stage1(const DatasetBundle& bundle, const TrainConfig& cfg) {
    cfg.validate();
    bundle.validate();
    return detail::run_supervised(bundle, initial_model(bundle, cfg), cfg, 1, cfg.epochs_stage1, false);
}

/// Stage 2: semi-supervised finetuning of head and adapter over L (+R) and U.
inline StageResult run_stage2(const DatasetBundle& bundle, Model model, const TrainConfig& cfg,
                              const Logger& log = {}) {
    cfg.validate();
    detail::check_compatible(model, bundle);
    const std::size_t d = bundle.dim();
    const std::size_t C = bundle.num_classes;
    if (!model.adapter.enabled) {
        const std::size_t hidden = cfg.adapter_hidden > 0 ? cfg.adapter_hidden : std::max<std::size_t>(1, d / 4);
        model.adapter = Adapter::make(d, hidden, cfg.adapter_init_std, cfg.seed ^ 0xada97e7ULL);
    }
    model.temps.t_conf = cfg.t_conf;

    const bool use_r = cfg.retrieval_augmentation && !bundle.retrieved.empty();
    const bool use_u = bundle.unlabeled_count() > 0;
    if (!use_u && log) {
        log("warning: unlabeled split is empty; stage 2 reduces to supervised finetuning");
    }
    const std::size_t n_l = bundle.labeled.size();
    const std::size_t n_r = use_r ? bundle.retrieved.size() : 0;
    if (n_l + n_r == 0 && !use_u) {
        throw ConfigError("stage 2 has neither labeled nor unlabeled data");
    }
    // unlabeled pool: U rows, then label-stripped L rows
    const std::size_t n_unl = use_u ? bundle.unlabeled_count() + (cfg.add_labeled_to_unlabeled ? n_l : 0) : 0;
    const std::size_t unl_batch = cfg.mu * cfg.batch_size;
    const std::size_t steps_per_epoch =
        use_u ? std::max<std::size_t>(1, n_unl / unl_batch) : std::max<std::size_t>(1, (n_l + n_r + cfg.batch_size - 1) / cfg.batch_size);
    const std::size_t total = cfg.epochs_stage2 * steps_per_epoch;

    auto rng = detail::stage_rng(cfg.seed, 2);
    const bool split_streams = use_r && cfg.retrieved_fraction >= 0.0 && n_l > 0;
    detail::IndexStream mixed_stream(n_l + n_r, rng);
    detail::IndexStream l_stream(n_l, rng);
    detail::IndexStream r_stream(n_r, rng);
    detail::IndexStream u_stream(n_unl, rng);
    std::uniform_int_distribution<std::size_t> view_dist(0, bundle.strong_views - 1);
    const std::size_t from_r =
        split_streams ? static_cast<std::size_t>(std::llround(cfg.retrieved_fraction * static_cast<double>(cfg.batch_size))) : 0;

    std::optional<DebiasState> debias;
    if (cfg.method == Method::debiaspl) {
        debias = DebiasState::uniform(C, cfg.debias_momentum, cfg.debias_lambda, cfg.debias_epsilon,
                                      cfg.debias_offset_space);
    }
    const Labels* truth = bundle.unlabeled_truth ? &*bundle.unlabeled_truth : nullptr;

    detail::Optimizers opt(model);
    StageResult out;
    std::size_t step = 0;
    std::vector<std::size_t> l_rows, r_rows, u_rows, strong_rows, l_unl_rows;
    for (std::size_t epoch = 1; epoch <= cfg.epochs_stage2; ++epoch) {
        double l_sum = 0.0, r_sum = 0.0, u_sum = 0.0, lr_scale = 0.0;
        std::size_t lab_seen = 0, l_count = 0, r_count = 0, seen = 0, kept = 0, kept_known = 0, kept_hit = 0, all_known = 0,
                    all_hit = 0;
        std::vector<std::size_t> class_counts(C, 0);
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            // labeled path: rows of L, then rows of R
            l_rows.clear();
            r_rows.clear();
            if (n_l + n_r > 0) {
                for (std::size_t i = 0; i < cfg.batch_size; ++i) {
                    if (split_streams) {
                        (i < from_r ? r_rows.push_back(r_stream.next()) : l_rows.push_back(l_stream.next()));
                    } else {
                        const std::size_t k = mixed_stream.next();
                        (k < n_l ? l_rows.push_back(k) : r_rows.push_back(k - n_l));
                    }
                }
            }
            Matrix x_lab(static_cast<Eigen::Index>(l_rows.size() + r_rows.size()), static_cast<Eigen::Index>(d));
            Labels y_lab;
            if (!l_rows.empty()) x_lab.topRows(static_cast<Eigen::Index>(l_rows.size())) = bundle.labeled.embeddings.gather(l_rows);
            if (!r_rows.empty()) x_lab.bottomRows(static_cast<Eigen::Index>(r_rows.size())) = bundle.retrieved.embeddings.gather(r_rows);
            for (auto r : l_rows) y_lab.push_back(bundle.labeled.labels[r]);
            for (auto r : r_rows) y_lab.push_back(bundle.retrieved.labels[r]);

            // unlabeled path: weak row plus one sampled strong view
            u_rows.clear();
            strong_rows.clear();
            l_unl_rows.clear();
            Labels u_truth_batch;
            std::vector<bool> u_known;
            if (use_u) {
                for (std::size_t i = 0; i < unl_batch; ++i) {
                    const std::size_t k = u_stream.next();
                    if (k < bundle.unlabeled_count()) {
                        u_rows.push_back(k);
                        strong_rows.push_back(k * bundle.strong_views + view_dist(rng));
                    } else {
                        l_unl_rows.push_back(k - bundle.unlabeled_count());
                    }
                }
                for (auto k : u_rows) {
                    u_truth_batch.push_back(truth ? (*truth)[k] : 0);
                    u_known.push_back(truth != nullptr);
                }
                for (auto k : l_unl_rows) {
                    u_truth_batch.push_back(bundle.labeled.labels[k]);
                    u_known.push_back(true);
                }
            }
            const auto n_u_batch = static_cast<Eigen::Index>(u_rows.size() + l_unl_rows.size());
            Matrix x_weak(n_u_batch, static_cast<Eigen::Index>(d));
            Matrix x_strong(n_u_batch, static_cast<Eigen::Index>(d));
            if (!u_rows.empty()) {
                x_weak.topRows(static_cast<Eigen::Index>(u_rows.size())) = bundle.unlabeled_weak.gather(u_rows);
                x_strong.topRows(static_cast<Eigen::Index>(u_rows.size())) = bundle.unlabeled_strong.gather(strong_rows);
            }
            if (!l_unl_rows.empty()) {
                const Matrix lx = bundle.labeled.embeddings.gather(l_unl_rows);
                x_weak.bottomRows(static_cast<Eigen::Index>(l_unl_rows.size())) = lx;
                x_strong.bottomRows(static_cast<Eigen::Index>(l_unl_rows.size())) = lx;
            }

            const Matrix weak_logits = forward(model, x_weak);
            if (debias && n_u_batch > 0) {
                debias = debias_update(*debias, softmax_rows(weak_logits, model.temps.t_conf));
            }
            const ForwardCache lab_cache = forward_cached(model.head, model.adapter, x_lab);
            const ForwardCache strong_cache = forward_cached(model.head, model.adapter, x_strong);
            const FixMatchResult fm = fixmatch_losses(weak_logits, strong_cache.logits, lab_cache.logits, y_lab,
                                                      model.temps, cfg.sigma, debias ? &*debias : nullptr);

            ParamGrads g = ParamGrads::zeros_like(model);
            backward(model, lab_cache, {fm.grad_labeled, fm.d_t_loss_x, 0.0}, g);
            backward(model, strong_cache, {fm.grad_strong, 0.0, fm.d_t_loss_u}, g);
            lr_scale = cosine_lr(step++, total, 1.0);

            // per-source labeled losses for reporting, before the update
            const double t_x = model.temps.loss_x();
            if (!l_rows.empty()) {
                const auto nl = static_cast<Eigen::Index>(l_rows.size());
                l_sum += ce_loss_t(lab_cache.logits.topRows(nl), std::span(y_lab).first(l_rows.size()), t_x).loss *
                         static_cast<double>(nl);
                l_count += l_rows.size();
            }
            if (!r_rows.empty()) {
                const auto nr = static_cast<Eigen::Index>(r_rows.size());
                r_sum += ce_loss_t(lab_cache.logits.bottomRows(nr), std::span(y_lab).last(r_rows.size()), t_x).loss *
                         static_cast<double>(nr);
                r_count += r_rows.size();
            }
            apply_step(model, g, opt, cfg, lr_scale, true);
            lab_seen += y_lab.size();

            u_sum += fm.unlabeled_loss;
            const auto& sel = fm.selection;
            for (std::size_t i = 0; i < sel.mask.size(); ++i) {
                ++seen;
                const bool hit = u_known[i] && sel.pseudo_labels[i] == u_truth_batch[i];
                all_known += u_known[i] ? 1 : 0;
                all_hit += hit ? 1 : 0;
                if (sel.mask[i]) {
                    ++kept;
                    ++class_counts[sel.pseudo_labels[i]];
                    kept_known += u_known[i] ? 1 : 0;
                    kept_hit += hit ? 1 : 0;
                }
            }
        }
        EpochRecord rec;
        rec.stage = 2;
        rec.epoch = epoch;
        rec.steps = steps_per_epoch;
        rec.labeled_samples = lab_seen;
        rec.unlabeled_samples = seen;
        if (l_count > 0) rec.labeled_loss = l_sum / static_cast<double>(l_count);
        if (r_count > 0) rec.retrieved_loss = r_sum / static_cast<double>(r_count);
        if (use_u) {
            rec.unlabeled_loss = u_sum / static_cast<double>(steps_per_epoch);
            rec.utilization = static_cast<double>(kept) / static_cast<double>(seen);
            if (truth != nullptr && kept_known > 0) {
                rec.pseudo_label_acc = static_cast<double>(kept_hit) / static_cast<double>(kept_known);
            }
            if (truth != nullptr && all_known > 0) {
                rec.pseudo_label_acc_all = static_cast<double>(all_hit) / static_cast<double>(all_known);
            }
            rec.selected_class_counts = std::move(class_counts);
        }
        rec.t_loss_x = model.temps.loss_x();
        rec.t_loss_u = model.temps.loss_u();
        rec.lr = cfg.head_lr * lr_scale;
        rec.test_acc = detail::test_accuracy(model, bundle);
        out.history.push_back(std::move(rec));
    }
    out.model = std::move(model);
    return out;
}

/// Stage 3: finetune head and adapter on the labeled split only.
inline StageResult run_stage3(const DatasetBundle& bundle, Model model, const TrainConfig& cfg) {
    cfg.validate();
    detail::check_compatible(model, bundle);
    return detail::run_supervised(bundle, std::move(model), cfg, 3, cfg.epochs_stage3, true);
}

using StageCallback = std::function<void(int stage, const Model&)>;

/// Runs the requested stages in order and assembles the report.
/// Without stage 1 the run starts from `start` if given, otherwise from the text-initialized head.
inline RunReport run_swift(const DatasetBundle& bundle, const TrainConfig& cfg, const Logger& log = {},
                           std::optional<Model> start = std::nullopt, const StageCallback& on_stage_end = {}) {
    cfg.validate();
    bundle.validate();
    RunReport report;
    report.config = to_json(cfg);
    report.seed = cfg.seed;

    Model zero_shot;
    zero_shot.head = init_head_from_text(bundle.text, bundle.num_classes);
    report.zero_shot_test_acc = detail::test_accuracy(zero_shot, bundle);

    std::vector<int> stages = cfg.stages;
    std::sort(stages.begin(), stages.end());
    stages.erase(std::unique(stages.begin(), stages.end()), stages.end());

    Model model;
    if (stages.front() != 1) {
        if (start) {
            model = std::move(*start);
            detail::check_compatible(model, bundle);
        } else {
            if (log) log("notice: stage 1 not requested and no checkpoint given; starting from the text-initialized head");
            model = initial_model(bundle, cfg);
            model.head = init_head_from_text(bundle.text, bundle.num_classes);
        }
    }
    for (int stage : stages) {
        if (stage != 1 && cfg.reset_t_loss_between_stages) {
            const auto fresh = detail::initial_temperatures(cfg);
            model.temps.theta_x = fresh.theta_x;
            model.temps.theta_u = fresh.theta_u;
        }
        StageResult res;
        switch (stage) {
        case 1: res = run_stage1(bundle, cfg); break;
        case 2: res = run_stage2(bundle, std::move(model), cfg, log); break;
        default: res = run_stage3(bundle, std::move(model), cfg); break;
        }
        model = std::move(res.model);
        report.history.insert(report.history.end(), res.history.begin(), res.history.end());
        if (auto acc = detail::test_accuracy(model, bundle)) {
            report.stage_test_acc[stage] = *acc;
        }
        if (on_stage_end) on_stage_end(stage, model);
    }
    report.final_test_acc = detail::test_accuracy(model, bundle);
    for (auto it = report.history.rbegin(); it != report.history.rend(); ++it) {
        if (it->utilization) {
            report.final_utilization = it->utilization;
            break;
        }
    }
    return report;
}

} // namespace swift

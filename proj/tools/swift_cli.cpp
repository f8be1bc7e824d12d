// Command-line front end: synth, probe, train, eval, diagnose.
//
// Exit code 2 means a usage or configuration error and 1 a data or runtime error. Failures print
// one JSON object {"error": kind, "message": text} on stderr.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <swift/swift.hpp>

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

std::vector<double> parse_doubles(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("not a number: '" + item + "'");
        }
    }
    if (out.empty()) throw UsageError("empty list");
    return out;
}

std::vector<int> parse_stages(const std::string& text) {
    std::vector<int> out;
    for (double v : parse_doubles(text)) {
        if (v != static_cast<int>(v)) throw UsageError("stage must be an integer");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

/// key=value where value is JSON; bare words fall back to strings so `method=debiaspl` works.
std::pair<std::string, json> parse_assignment(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("expected key=value, got '" + text + "'");
    const std::string key = text.substr(0, eq);
    const std::string raw = text.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    return {key, value};
}

/// Flags shared by probe and train: config file first, then --set overrides.
struct ConfigFlags {
    std::string config_file;
    std::vector<std::string> sets;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "JSON file of TrainConfig keys")->check(CLI::ExistingFile);
        cmd->add_option("--set", sets, "Override one config key (key=value); repeatable");
    }

    swift::TrainConfig build() const {
        swift::TrainConfig cfg;
        if (!config_file.empty()) swift::apply_config(cfg, swift::detail::read_json(config_file));
        for (const auto& s : sets) {
            const auto [key, value] = parse_assignment(s);
            swift::apply_config_value(cfg, key, value);
        }
        return cfg;
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Runs the configured stages and writes the report files plus one checkpoint per stage.
void run_and_write(const std::string& data_dir, const fs::path& out, const swift::TrainConfig& cfg,
                   std::optional<swift::Model> start) {
    cfg.validate();
    const auto bundle = swift::load_bundle(data_dir);
    fs::create_directories(out);

    json timing = {{"stages", json::object()}};
    const auto t_start = std::chrono::steady_clock::now();
    auto t_stage = t_start;
    const auto report = swift::run_swift(bundle, cfg, log_line, std::move(start), [&](int stage, const swift::Model& m) {
        const std::string name = "stage" + std::to_string(stage);
        swift::save_checkpoint(m, out / name);
        timing["stages"][name] = seconds_since(t_stage);
        log_line(name + " done in " + swift::detail::format_double(timing["stages"][name].get<double>()) + " s");
        t_stage = std::chrono::steady_clock::now();
    });
    timing["total"] = seconds_since(t_start);

    json doc = swift::to_json(report);
    doc["data"] = data_dir;
    swift::detail::write_text(out / "report.json", doc.dump(2) + "\n");
    swift::detail::write_text(out / "metrics.csv", swift::metrics_csv(report));
    swift::detail::write_text(out / "timing.json", timing.dump(2) + "\n");

    json summary = {{"final_test_acc", swift::detail::opt(report.final_test_acc)},
                    {"zero_shot_test_acc", swift::detail::opt(report.zero_shot_test_acc)},
                    {"final_utilization", swift::detail::opt(report.final_utilization)}};
    std::cout << summary.dump() << '\n';
}

void cmd_synth(const std::string& spec_file, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
               const std::string& out) {
    json spec_json = swift::SyntheticSpec{};
    auto assign = [&](const std::string& key, const json& value) {
        if (!spec_json.contains(key)) throw swift::ConfigError("unknown synthetic spec key '" + key + "'");
        spec_json[key] = value;
    };
    if (!spec_file.empty()) {
        const json file = swift::detail::read_json(spec_file);
        if (!file.is_object()) throw swift::ConfigError("synthetic spec must be a JSON object");
        for (const auto& [k, v] : file.items()) assign(k, v);
    }
    for (const auto& s : sets) {
        const auto [key, value] = parse_assignment(s);
        assign(key, value);
    }
    swift::SyntheticSpec spec;
    try {
        spec = spec_json.get<swift::SyntheticSpec>();
    } catch (const json::exception& e) {
        throw swift::ConfigError(std::string("synthetic spec: ") + e.what());
    }
    if (seed) spec.seed = *seed;
    const auto bundle = swift::make_synthetic(spec);
    swift::save_bundle(bundle, out);
    std::cout << json{{"out", out},
                      {"labeled", bundle.labeled.labels.size()},
                      {"unlabeled", bundle.unlabeled_weak.count},
                      {"retrieved", bundle.retrieved.labels.size()},
                      {"test", bundle.test.labels.size()}}
                     .dump()
              << '\n';
}

void cmd_eval(const std::string& checkpoint, const std::string& data_dir) {
    const auto model = swift::load_checkpoint(checkpoint);
    const auto bundle = swift::load_bundle(data_dir);
    swift::detail::check_compatible(model, bundle);
    const double acc = swift::evaluate(model, bundle.test);
    std::cout << json{{"test_acc", acc}, {"num_test", bundle.test.labels.size()}}.dump() << '\n';
}

std::vector<std::size_t> order_by_truth(const swift::Labels& truth) {
    std::vector<std::size_t> order(truth.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return truth[a] < truth[b]; });
    return order;
}

void write_matrix(const fs::path& out, const std::string& stem, const swift::Matrix& m, json meta) {
    std::vector<float> values(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) values[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    swift::detail::write_blob<float>(out / (stem + ".f32"), values);
    meta["rows"] = m.rows();
    meta["cols"] = m.cols();
    meta["dtype"] = "float32";
    meta["order"] = "row-major";
    swift::detail::write_text(out / (stem + ".json"), meta.dump(2) + "\n");
}

void cmd_diagnose(const std::string& data_dir, const std::string& checkpoint, const std::string& grid_text,
                  double sigma, std::size_t bins, const std::string& temps_text, const fs::path& out) {
    const auto grid = parse_doubles(grid_text);
    const auto temps = parse_doubles(temps_text);
    const auto bundle = swift::load_bundle(data_dir);
    swift::Model model;
    if (checkpoint.empty()) {
        log_line("notice: no checkpoint given; diagnosing the text-initialized zero-shot head");
        model.head = swift::init_head_from_text(bundle.text, bundle.num_classes);
    } else {
        model = swift::load_checkpoint(checkpoint);
        swift::detail::check_compatible(model, bundle);
    }

    // Unlabeled weak views are the samples selection acts on; fall back to the test split.
    const bool use_unlabeled = bundle.unlabeled_weak.count > 0;
    const swift::EmbeddingTable& table = use_unlabeled ? bundle.unlabeled_weak : bundle.test.embeddings;
    std::optional<swift::Labels> truth;
    if (use_unlabeled) truth = bundle.unlabeled_truth;
    else truth = bundle.test.labels;
    if (table.count == 0) throw swift::ShapeError("bundle has neither unlabeled nor test rows to diagnose");
    const swift::Matrix logits = swift::logits_for(model, table);

    fs::create_directories(out);

    std::ostringstream hist_csv;
    hist_csv << "temperature,bin_lo,bin_hi,count\n";
    json flat = {{"source", use_unlabeled ? "unlabeled_weak" : "test"}, {"rows", table.count}, {"temperatures", json::array()}};
    for (std::size_t k = 0; k < temps.size(); ++k) {
        const swift::Matrix probs = swift::softmax_rows(logits, temps[k]);
        std::vector<double> conf(static_cast<std::size_t>(probs.rows()));
        for (Eigen::Index i = 0; i < probs.rows(); ++i) conf[static_cast<std::size_t>(i)] = probs.row(i).maxCoeff();
        const auto h = swift::confidence_histogram(conf, bins);
        for (std::size_t b = 0; b < bins; ++b) {
            hist_csv << swift::detail::format_double(temps[k]) << ',' << swift::detail::format_double(h.edges[b]) << ','
                     << swift::detail::format_double(h.edges[b + 1]) << ',' << h.counts[b] << '\n';
        }
        const auto stats = swift::flatness_stats(probs);
        flat["temperatures"].push_back({{"temperature", temps[k]},
                                        {"mean_max_prob", stats.mean_max_prob},
                                        {"mean_entropy", stats.mean_entropy},
                                        {"max_entropy", std::log(static_cast<double>(bundle.num_classes))}});
        if (k == 0) {
            // Heatmap export for the first temperature, rows grouped by true class when known.
            swift::Matrix sorted = probs;
            swift::Matrix sorted_norm = stats.column_normalized;
            json row_labels = nullptr;
            if (truth && truth->size() == table.count) {
                const auto order = order_by_truth(*truth);
                row_labels = json::array();
                for (std::size_t r = 0; r < order.size(); ++r) {
                    sorted.row(static_cast<Eigen::Index>(r)) = probs.row(static_cast<Eigen::Index>(order[r]));
                    sorted_norm.row(static_cast<Eigen::Index>(r)) =
                        stats.column_normalized.row(static_cast<Eigen::Index>(order[r]));
                    row_labels.push_back((*truth)[order[r]]);
                }
            }
            json meta = {{"temperature", temps[k]}, {"source", flat["source"]}, {"row_labels", row_labels}};
            meta["normalization"] = "row";
            write_matrix(out, "prob_matrix", sorted, meta);
            meta["normalization"] = "column";
            write_matrix(out, "prob_matrix.colnorm", sorted_norm, meta);
        }
    }
    swift::detail::write_text(out / "histogram.csv", hist_csv.str());
    swift::detail::write_text(out / "flatness.json", flat.dump(2) + "\n");

    std::ostringstream sweep_csv;
    sweep_csv << "t_conf,utilization,selected,pseudo_label_acc,pseudo_label_acc_all\n";
    for (const auto& r : swift::tconf_sweep(model, bundle, grid, sigma)) {
        sweep_csv << swift::detail::format_double(r.t_conf) << ',' << swift::detail::format_double(r.utilization) << ','
                  << r.selected << ',' << swift::detail::csv_field(r.pseudo_label_acc) << ','
                  << swift::detail::csv_field(r.pseudo_label_acc_all) << '\n';
    }
    swift::detail::write_text(out / "sweep.csv", sweep_csv.str());
    std::cout << json{{"out", out.string()}}.dump() << '\n';
}

int fail(const char* kind, const std::string& message, int code) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semi-supervised few-shot training over precomputed embeddings"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic bundle");
    std::string synth_spec, synth_out;
    std::vector<std::string> synth_sets;
    std::optional<std::uint64_t> synth_seed;
    synth->add_option("--spec", synth_spec, "JSON file of generator parameters")->check(CLI::ExistingFile);
    synth->add_option("--set", synth_sets, "Override one generator parameter (key=value); repeatable");
    synth->add_option("--seed", synth_seed, "Generator seed");
    synth->add_option("--out", synth_out, "Output bundle directory")->required();

    // probe
    auto* probe = app.add_subcommand("probe", "Stage 1 only: linear probe on the labeled split");
    std::string probe_data, probe_out, probe_init, probe_tloss;
    std::optional<double> probe_tloss_init;
    std::optional<std::uint64_t> probe_seed;
    std::optional<std::size_t> probe_epochs;
    ConfigFlags probe_cfg;
    probe->add_option("--data", probe_data, "Bundle directory")->required()->check(CLI::ExistingDirectory);
    probe->add_option("--out", probe_out, "Output directory")->required();
    probe_cfg.add_to(probe);
    probe->add_option("--init", probe_init, "Head initialization")->check(CLI::IsMember({"text", "random"}));
    probe->add_option("--tloss", probe_tloss, "Loss temperature mode (fixed defaults to T=1)")
        ->check(CLI::IsMember({"learnable", "fixed"}));
    probe->add_option("--tloss-init", probe_tloss_init, "Initial loss temperature");
    probe->add_option("--seed", probe_seed, "Training seed");
    probe->add_option("--epochs", probe_epochs, "Stage-1 epochs");

    // train
    auto* train = app.add_subcommand("train", "Run the staged pipeline");
    std::string train_data, train_out, train_stages, train_method, train_resume;
    std::optional<std::uint64_t> train_seed;
    bool train_no_ra = false;
    ConfigFlags train_cfg;
    train->add_option("--data", train_data, "Bundle directory")->required()->check(CLI::ExistingDirectory);
    train->add_option("--out", train_out, "Output directory")->required();
    train_cfg.add_to(train);
    train->add_option("--stages", train_stages, "Comma-separated stages, e.g. 1,2,3");
    train->add_option("--method", train_method, "SSL method")->check(CLI::IsMember({"fixmatch", "debiaspl"}));
    train->add_flag("--no-ra", train_no_ra, "Disable retrieval augmentation");
    train->add_option("--seed", train_seed, "Training seed");
    train->add_option("--resume", train_resume, "Checkpoint to start from when stage 1 is skipped")
        ->check(CLI::ExistingDirectory);

    // eval
    auto* eval = app.add_subcommand("eval", "Test accuracy of a checkpoint");
    std::string eval_ckpt, eval_data;
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--data", eval_data, "Bundle directory")->required()->check(CLI::ExistingDirectory);

    // diagnose
    auto* diagnose = app.add_subcommand("diagnose", "Confidence histograms, T_conf sweep and flatness statistics");
    std::string diag_data, diag_ckpt, diag_out;
    std::string diag_grid = "0.001,0.005,0.01,0.05,0.1,0.5,1";
    std::string diag_temps = "1,0.01";
    double diag_sigma = 0.8;
    std::size_t diag_bins = 20;
    diagnose->add_option("--data", diag_data, "Bundle directory")->required()->check(CLI::ExistingDirectory);
    diagnose->add_option("--checkpoint", diag_ckpt, "Checkpoint directory (default: zero-shot head)")
        ->check(CLI::ExistingDirectory);
    diagnose->add_option("--out", diag_out, "Output directory")->required();
    diagnose->add_option("--grid", diag_grid, "Comma-separated T_conf values for the sweep")->capture_default_str();
    diagnose->add_option("--temperatures", diag_temps, "Softmax temperatures for histograms and flatness")->capture_default_str();
    diagnose->add_option("--sigma", diag_sigma, "Confidence threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    diagnose->add_option("--bins", diag_bins, "Histogram bins")->capture_default_str()->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return fail("usage", e.what(), 2);
    }

    try {
        if (*synth) {
            cmd_synth(synth_spec, synth_sets, synth_seed, synth_out);
        } else if (*probe) {
            auto cfg = probe_cfg.build();
            cfg.stages = {1};
            if (!probe_init.empty()) cfg.init = probe_init == "text" ? swift::HeadInit::text : swift::HeadInit::random;
            if (probe_tloss == "fixed") {
                cfg.learn_t_loss_x = cfg.learn_t_loss_u = false;
                cfg.t_loss_init = 1.0;
            } else if (probe_tloss == "learnable") {
                cfg.learn_t_loss_x = cfg.learn_t_loss_u = true;
            }
            if (probe_tloss_init) cfg.t_loss_init = *probe_tloss_init;
            if (probe_seed) cfg.seed = *probe_seed;
            if (probe_epochs) cfg.epochs_stage1 = *probe_epochs;
            run_and_write(probe_data, probe_out, cfg, std::nullopt);
        } else if (*train) {
            auto cfg = train_cfg.build();
            if (!train_stages.empty()) cfg.stages = parse_stages(train_stages);
            if (!train_method.empty()) {
                cfg.method = train_method == "fixmatch" ? swift::Method::fixmatch : swift::Method::debiaspl;
            }
            if (train_no_ra) cfg.retrieval_augmentation = false;
            if (train_seed) cfg.seed = *train_seed;
            std::optional<swift::Model> start;
            if (!train_resume.empty()) start = swift::load_checkpoint(train_resume);
            run_and_write(train_data, train_out, cfg, std::move(start));
        } else if (*eval) {
            cmd_eval(eval_ckpt, eval_data);
        } else if (*diagnose) {
            cmd_diagnose(diag_data, diag_ckpt, diag_grid, diag_sigma, diag_bins, diag_temps, diag_out);
        }
    } catch (const UsageError& e) {
        return fail("usage", e.what(), 2);
    } catch (const swift::ConfigError& e) {
        return fail("config", e.what(), 2);
    } catch (const swift::IoError& e) {
        return fail("io", e.what(), 1);
    } catch (const swift::FormatError& e) {
        return fail("format", e.what(), 1);
    } catch (const swift::ShapeError& e) {
        return fail("shape", e.what(), 1);
    } catch (const swift::NumericError& e) {
        return fail("numeric", e.what(), 1);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 1);
    }
    return 0;
}

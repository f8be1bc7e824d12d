// Acceptance runner: one pass/fail line per criterion, nonzero exit if any fails.
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include <swift/swift.hpp>

#include "oracle.hpp"

using namespace swift;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

constexpr int kSeeds = 5;

/// Reference task shared by the training criteria; defaults of SyntheticSpec.
SyntheticSpec reference_task(std::uint64_t seed) {
    SyntheticSpec s;
    s.seed = seed;
    return s;
}

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

Outcome flat_softmax() {
    SyntheticSpec s;
    s.num_classes = 200;
    s.dim = 64;
    s.shots = 1;
    s.unlabeled_per_class = 5;
    s.retrieved_per_class = 0;
    s.test_per_class = 1;
    s.strong_views = 1;
    const auto b = make_synthetic(s);
    Model m;
    m.head = init_head_from_text(b.text, b.num_classes);
    const Matrix q = logits_for(m, b.unlabeled_weak);
    const double bound = std::exp(2.0) / (std::exp(2.0) + 199.0);
    const auto sel = select(q, 1.0, 0.8);
    const double worst = *std::max_element(sel.confidences.begin(), sel.confidences.end());
    // logits are cosines up to float32 storage rounding
    const bool cosine = q.cwiseAbs().maxCoeff() <= 1.0 + 1e-6;
    const bool ok = cosine && worst <= bound && sel.utilization == 0.0;
    return {ok, "n=" + std::to_string(sel.confidences.size()) + " max_conf=" + fmt(worst, 6) + " bound=" +
                    fmt(bound, 6) + " utilization=" + fmt(sel.utilization)};
}

Outcome sharpening() {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const std::vector<double> temps{0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0};
    std::size_t vectors = 0, violations = 0;
    while (vectors < 2000) {
        Matrix q(1, 2 + static_cast<Eigen::Index>(rng() % 30));
        for (Eigen::Index j = 0; j < q.cols(); ++j) q(0, j) = u(rng);
        const double top = q.maxCoeff();
        if ((q.array() == top).count() != 1) continue;
        ++vectors;
        for (std::size_t k = 1; k < temps.size(); ++k) {
            if (!(softmax_rows(q, temps[k]).maxCoeff() < softmax_rows(q, temps[k - 1]).maxCoeff())) ++violations;
        }
    }
    const std::vector<double> grid{0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0};
    std::size_t sweep_violations = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto b = make_synthetic(reference_task(seed));
        Model m;
        m.head = init_head_from_text(b.text, b.num_classes);
        const auto rows = tconf_sweep(m, b, grid, 0.8);
        for (std::size_t i = 1; i < rows.size(); ++i) {
            if (rows[i].utilization > rows[i - 1].utilization) ++sweep_violations;
        }
    }
    return {violations == 0 && sweep_violations == 0,
            "vectors=" + std::to_string(vectors) + " strict_violations=" + std::to_string(violations) +
                " sweep_violations=" + std::to_string(sweep_violations)};
}

Outcome gradient_oracle() {
    std::mt19937_64 rng(20240601);
    double worst = 0.0;
    const int instances = 200;
    for (int i = 0; i < instances; ++i) {
        worst = std::max(worst, oracle::max_gradient_error(oracle::random_instance(rng)));
    }
    return {worst <= 1e-4, "instances=" + std::to_string(instances) + " max_rel_err=" + fmt(worst, 3)};
}

Outcome loss_temperature() {
    int wins = 0;
    std::ostringstream detail;
    for (int seed = 0; seed < kSeeds; ++seed) {
        const auto b = make_synthetic(reference_task(seed));
        TrainConfig learn;
        learn.seed = seed;
        TrainConfig fixed = learn;
        fixed.learn_t_loss_x = fixed.learn_t_loss_u = false;
        fixed.t_loss_init = 1.0;
        const auto a = run_stage1(b, learn);
        const auto f = run_stage1(b, fixed);
        bool lower = true;
        for (std::size_t e = 4; e < a.history.size(); ++e) {
            lower = lower && *a.history[e].labeled_loss < *f.history[e].labeled_loss;
        }
        const double acc_l = *a.history.back().test_acc, acc_f = *f.history.back().test_acc;
        const bool win = lower && acc_l > acc_f;
        wins += win ? 1 : 0;
        detail << " s" << seed << ":" << fmt(acc_l, 3) << "/" << fmt(acc_f, 3) << (win ? "" : "(x)");
    }
    return {wins >= 4, "wins=" + std::to_string(wins) + "/5 learnable/fixed" + detail.str()};
}

Outcome confidence_temperature() {
    int wins = 0;
    std::ostringstream detail;
    for (int seed = 0; seed < kSeeds; ++seed) {
        const auto b = make_synthetic(reference_task(seed));
        TrainConfig cfg;
        cfg.seed = seed;
        cfg.retrieval_augmentation = false;
        const auto s1 = run_stage1(b, cfg);
        const auto low = run_stage2(b, s1.model, cfg);
        TrainConfig unit = cfg;
        unit.t_conf = 1.0;
        const auto high = run_stage2(b, s1.model, unit);
        const double util = *low.history.back().utilization;
        const double acc_low = *low.history.back().test_acc, acc_high = *high.history.back().test_acc;
        const bool win = util >= 0.5 && acc_low > acc_high;
        wins += win ? 1 : 0;
        detail << " s" << seed << ":" << fmt(acc_low, 3) << "/" << fmt(acc_high, 3) << "(u=" << fmt(util, 2)
               << ",u1=" << fmt(*high.history.back().utilization, 2) << ",s1=" << fmt(*s1.history.back().test_acc, 3)
               << ")" << (win ? "" : "(x)");
    }
    return {wins >= 4, "wins=" + std::to_string(wins) + "/5 t0.01/t1.0" + detail.str()};
}

Outcome ablation_ladder() {
    double zs = 0, s1 = 0, s12 = 0, full = 0;
    for (int seed = 0; seed < kSeeds; ++seed) {
        const auto b = make_synthetic(reference_task(seed));
        TrainConfig cfg;
        cfg.seed = seed;
        const auto report = run_swift(b, cfg);
        zs += *report.zero_shot_test_acc;
        s1 += report.stage_test_acc.at(1);
        s12 += report.stage_test_acc.at(2);
        full += report.stage_test_acc.at(3);
    }
    zs /= kSeeds, s1 /= kSeeds, s12 /= kSeeds, full /= kSeeds;
    return {zs < s1 && s1 < s12 && s12 < full,
            "zero-shot=" + fmt(zs) + " stage1=" + fmt(s1) + " stage1+2=" + fmt(s12) + " full=" + fmt(full)};
}

Outcome init_ladder() {
    double rnd = 0, text = 0, text_t = 0;
    for (int seed = 0; seed < kSeeds; ++seed) {
        const auto b = make_synthetic(reference_task(seed));
        TrainConfig learn;
        learn.seed = seed;
        TrainConfig fixed = learn;
        fixed.learn_t_loss_x = fixed.learn_t_loss_u = false;
        fixed.t_loss_init = 1.0;
        TrainConfig random = fixed;
        random.init = HeadInit::random;
        rnd += *run_stage1(b, random).history.back().test_acc;
        text += *run_stage1(b, fixed).history.back().test_acc;
        text_t += *run_stage1(b, learn).history.back().test_acc;
    }
    rnd /= kSeeds, text /= kSeeds, text_t /= kSeeds;
    return {rnd < text && text < text_t,
            "random=" + fmt(rnd) + " text=" + fmt(text) + " text+learnable_T=" + fmt(text_t)};
}

Outcome debias() {
    int wins = 0;
    std::ostringstream detail;
    for (int seed = 0; seed < kSeeds; ++seed) {
        auto spec = reference_task(seed);
        spec.imbalance_exponent = 1.0;
        spec.unlabeled_per_class = 200;
        const auto b = make_synthetic(spec);
        TrainConfig cfg;
        cfg.seed = seed;
        cfg.retrieval_augmentation = false;
        const auto s1 = run_stage1(b, cfg);
        TrainConfig db = cfg;
        db.method = Method::debiaspl;
        const double kl_fm = kl_to_uniform(run_stage2(b, s1.model, cfg).history.back().selected_class_counts);
        const double kl_db = kl_to_uniform(run_stage2(b, s1.model, db).history.back().selected_class_counts);
        const bool win = kl_db < kl_fm;
        wins += win ? 1 : 0;
        detail << " s" << seed << ":" << fmt(kl_db, 3) << "/" << fmt(kl_fm, 3) << (win ? "" : "(x)");
    }
    return {wins >= 4, "wins=" + std::to_string(wins) + "/5 KL debiaspl/fixmatch" + detail.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int shell(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
    const fs::path dir = fs::temp_directory_path() / ("swift_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string cli = std::string("\"") + SWIFT_CLI_PATH + "\"";
    const std::string data = (dir / "bundle").string();
    const std::string quiet = " >/dev/null 2>&1";
    Outcome out;
    if (shell(cli + " synth --seed 3 --out " + data + quiet) != 0) {
        out.detail = "synth failed";
    } else {
        int codes = 0;
        for (const char* run : {"a", "b"}) {
            codes += shell(cli + " train --data " + data + " --seed 3 --out " + (dir / run).string() + quiet);
        }
        const std::string a = slurp(dir / "a" / "report.json"), b = slurp(dir / "b" / "report.json");
        out.pass = codes == 0 && !a.empty() && a == b;
        out.detail = "exit_codes_sum=" + std::to_string(codes) + " report_bytes=" + std::to_string(a.size()) +
                     (a == b ? " identical" : " differ");
    }
    fs::remove_all(dir);
    return out;
}

struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
};

} // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "flat softmax gives zero utilization at C=200", 1.0, flat_softmax},
        {2, "max prob strictly decreasing in T; sweep non-increasing", 5.0, sharpening},
        {3, "analytic gradients match finite differences", 30.0, gradient_oracle},
        {4, "learnable T_loss beats fixed T_loss=1 in stage 1", 120.0, loss_temperature},
        {5, "t_conf=0.01 beats t_conf=1 in stage 2", 300.0, confidence_temperature},
        {6, "ablation ladder zero-shot < s1 < s1+2 < full", 600.0, ablation_ladder},
        {7, "init ladder random < text < text+learnable T", 120.0, init_ladder},
        {8, "DebiasPL lowers pseudo-label KL to uniform", 300.0, debias},
        {9, "train is byte-deterministic", 60.0, determinism},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs < c.limit_s;
        const bool pass = o.pass && in_time;
        failed += pass ? 0 : 1;
        std::cout << (pass ? "[PASS] " : "[FAIL] ") << "AC" << c.id << " " << c.name << " | " << o.detail
                  << " | time=" << fmt(secs, 3) << "s limit=" << c.limit_s << "s" << (in_time ? "" : " (too slow)")
                  << std::endl;
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}

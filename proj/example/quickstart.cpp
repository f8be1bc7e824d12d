// Generates a small synthetic task, runs all three stages and prints the accuracy ladder.
#include <iostream>

#include <swift/swift.hpp>

int main() {
    swift::SyntheticSpec spec;
    spec.num_classes = 20;
    spec.seed = 1;
    const auto bundle = swift::make_synthetic(spec);

    swift::TrainConfig cfg;
    cfg.epochs_stage2 = 20;
    const auto report = swift::run_swift(bundle, cfg, [](const std::string& m) { std::cerr << m << '\n'; });

    std::cout << "zero-shot " << *report.zero_shot_test_acc << '\n';
    for (const auto& [stage, acc] : report.stage_test_acc) std::cout << "after stage " << stage << ' ' << acc << '\n';
    if (report.final_utilization) std::cout << "final utilization " << *report.final_utilization << '\n';
}

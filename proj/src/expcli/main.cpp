#include <CLI11.hpp>

#include <iostream>

#include "cfseq/expcli/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"cfseq: counterfactual outcome prediction over time"};
    app.require_subcommand(1);

    std::string config, data, out, encoder, model, strategy, variants, in;
    std::uint64_t seed = 0;

    auto* simulate = app.add_subcommand("simulate", "simulate train/val/test cohorts");
    simulate->add_option("--config", config)->required();
    simulate->add_option("--seed", seed)->required();
    simulate->add_option("--out", out)->required();

    auto* pretrain = app.add_subcommand("pretrain", "pretrain the encoder");
    pretrain->add_option("--config", config)->required();
    pretrain->add_option("--data", data)->required();
    pretrain->add_option("--out", out)->required();

    auto* train = app.add_subcommand("train", "train the decoder on a pretrained encoder");
    train->add_option("--config", config)->required();
    train->add_option("--data", data)->required();
    train->add_option("--encoder", encoder)->required();
    train->add_option("--out", out)->required();

    auto* evaluate = app.add_subcommand("evaluate", "evaluate counterfactual predictions");
    evaluate->add_option("--config", config)->required();
    evaluate->add_option("--data", data)->required();
    evaluate->add_option("--model", model)->required();
    evaluate->add_option("--strategy", strategy)->required()->check(CLI::IsMember({"sliding", "random", "factual"}));
    evaluate->add_option("--out", out)->required();

    auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation variants");
    ablate->add_option("--config", config)->required();
    ablate->add_option("--variants", variants)->required();
    ablate->add_option("--out", out)->required();

    auto* report = app.add_subcommand("report", "render report CSVs as an SVG chart");
    report->add_option("--in", in)->required();
    report->add_option("--out", out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*simulate) cfseq::cmd_simulate(config, seed, out);
        else if (*pretrain) cfseq::cmd_pretrain(config, data, out);
        else if (*train) cfseq::cmd_train(config, data, encoder, out);
        else if (*evaluate) cfseq::cmd_evaluate(config, data, model, strategy, out);
        else if (*ablate) cfseq::cmd_ablate(config, variants, out);
        else if (*report) cfseq::cmd_report(in, out);
    } catch (const std::exception& e) {
        std::cerr << "cfseq: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

// Command line driver for the pipeline stages.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "diffprompt/config.hpp"
#include "diffprompt/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::string device = "cpu";
    uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Run configuration JSON (defaults built in)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", args.out_dir, "Output directory (overrides config out_dir)");
    cmd->add_option("--seed", args.seed, "Master seed (overrides config master_seed)")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--device", args.device, "Compute device")
        ->check(CLI::IsMember({"cpu"}));
}

dp::RunConfig load_config(const CommonArgs& args) {
    dp::RunConfig cfg;
    if (!args.config_path.empty()) cfg = dp::RunConfig::from_json_file(args.config_path);
    if (args.seed_set) cfg.master_seed = args.seed;
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    cfg.validate();
    return cfg;
}

void print_eval(const dp::EvalReport& rep) {
    std::printf("n=%lld R@1=%.4f R@5=%.4f R@10=%.4f UB=%.4f\n",
                static_cast<long long>(rep.n), rep.r_at.at(1), rep.r_at.at(5), rep.r_at.at(10),
                rep.ub);
}

void print_stage(const dp::StageReport& rep) {
    if (!rep.epoch_loss.empty())
        std::printf("%s: %zu epochs, final loss %.6f\n", rep.stage.c_str(),
                    rep.epoch_loss.size(), rep.epoch_loss.back());
    for (const auto& [k, v] : rep.metrics) std::printf("  %s = %.6f\n", k.c_str(), v);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion-generated prompts for referring expression grounding"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string split = "val";
    std::string ablation;
    bool dump_saliency = false;

    auto* gen_data = app.add_subcommand("gen-data", "Generate the synthetic corpus");
    add_common(gen_data, args);

    auto* pretrain = app.add_subcommand("pretrain", "Stage 0: grounder pretraining");
    add_common(pretrain, args);

    auto* train_vae = app.add_subcommand("train-vae", "Stage 1: mask VAE");
    add_common(train_vae, args);

    auto* train_gen = app.add_subcommand("train-generator", "Stage 2: latent prompt generator");
    add_common(train_gen, args);

    auto* tune = app.add_subcommand("tune-prompts", "Stage 3: adapters and global prompts");
    add_common(tune, args);

    auto* evaluate = app.add_subcommand("evaluate", "Evaluate the tuned pipeline");
    add_common(evaluate, args);
    evaluate->add_option("--split", split, "Dataset split")
        ->check(CLI::IsMember({"train", "val", "test"}));
    evaluate->add_flag("--dump-saliency", dump_saliency,
                       "Write decoded saliency maps as PGM files");

    auto* ablate = app.add_subcommand("ablate", "Ablation sweeps over a trained pipeline");
    add_common(ablate, args);
    ablate->add_option("which", ablation, "Sweep: depth, strategy, or prompts")
        ->required()
        ->check(CLI::IsMember({"depth", "strategy", "prompts"}));

    auto* report = app.add_subcommand("report", "Parameter and FLOP accounting");
    add_common(report, args);

    CLI11_PARSE(app, argc, argv);

    try {
        const dp::RunConfig cfg = load_config(args);
        if (gen_data->parsed()) {
            dp::cmd_gen_data(cfg);
            std::printf("corpus written to %s\n", dp::PipelinePaths(cfg.out_dir).data_file().c_str());
        } else if (pretrain->parsed()) {
            print_stage(dp::cmd_pretrain(cfg));
        } else if (train_vae->parsed()) {
            print_stage(dp::cmd_train_vae(cfg));
        } else if (train_gen->parsed()) {
            print_stage(dp::cmd_train_generator(cfg));
        } else if (tune->parsed()) {
            print_stage(dp::cmd_tune_prompts(cfg));
        } else if (evaluate->parsed()) {
            print_eval(dp::cmd_evaluate(cfg, split, dump_saliency));
        } else if (ablate->parsed()) {
            dp::cmd_ablate(cfg, ablation);
            std::printf("ablation report written to %s\n",
                        dp::PipelinePaths(cfg.out_dir).report("ablate_" + ablation).c_str());
        } else if (report->parsed()) {
            dp::cmd_report(cfg);
            std::printf("complexity report written to %s\n",
                        dp::PipelinePaths(cfg.out_dir).report("complexity").c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "diffprompt: %s\n", e.what());
        return 1;
    }
    return 0;
}

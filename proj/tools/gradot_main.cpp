// gradot: gradient-preserving offsite tuning at desk scale.
//
// Subcommands: pretrain | stats | compress | protocol | pipeline,
// each driven by one JSON config file.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "gradot/errors.hpp"
#include "gradot/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

gradot::PipelineConfig load_config(const CommonOpts& opts) {
    gradot::PipelineConfig pc = gradot::PipelineConfig::load(opts.config_path);
    if (!opts.out_dir.empty()) {
        pc.out_dir = opts.out_dir;
    }
    if (opts.seed_set) {
        pc.apply_seed(opts.seed);
    }
    return pc;
}

void add_common(CLI::App* sub, CommonOpts& opts) {
    sub->add_option("--config", opts.config_path, "pipeline config JSON")->required();
    sub->add_option("--out", opts.out_dir, "output directory override");
    sub->add_option("--seed", opts.seed, "rebase every seed in the config")
        ->each([&opts](const std::string&) { opts.seed_set = true; });
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"gradient-preserving offsite tuning"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string ckpt_path;
    std::string stats_path;
    std::string emulator_path;

    CLI::App* pretrain = app.add_subcommand("pretrain", "train the base model checkpoint");
    add_common(pretrain, opts);

    CLI::App* stats = app.add_subcommand("stats", "accumulate gradient and curvature statistics");
    add_common(stats, opts);
    stats->add_option("--ckpt", ckpt_path, "base model checkpoint (default <out>/base.ckpt)");

    CLI::App* compress = app.add_subcommand("compress", "build the emulator");
    add_common(compress, opts);
    compress->add_option("--ckpt", ckpt_path, "base model checkpoint");
    compress->add_option("--stats", stats_path, "stats file (default: derived from hashes)");

    CLI::App* protocol = app.add_subcommand("protocol", "run the four-arm tuning protocol");
    add_common(protocol, opts);
    protocol->add_option("--ckpt", ckpt_path, "base model checkpoint");
    protocol->add_option("--emulator", emulator_path, "emulator checkpoint");

    CLI::App* pipeline = app.add_subcommand("pipeline", "run all stages with hash-based reuse");
    add_common(pipeline, opts);

    CLI11_PARSE(app, argc, argv);

    try {
        gradot::PipelineConfig pc = load_config(opts);
        const std::string default_ckpt = pc.out_dir + "/base.ckpt";
        const std::string default_emulator = pc.out_dir + "/emulator.ckpt";

        if (pretrain->parsed()) {
            const std::string path = gradot::cmd_pretrain(pc);
            std::printf("checkpoint: %s\n", path.c_str());
        } else if (stats->parsed()) {
            const std::string path =
                gradot::cmd_stats(pc, ckpt_path.empty() ? default_ckpt : ckpt_path);
            std::printf("stats: %s\n", path.c_str());
        } else if (compress->parsed()) {
            if (stats_path.empty()) {
                throw gradot::DataError("compress needs --stats (path of the stats file)");
            }
            gradot::CompressOutputs out =
                gradot::cmd_compress(pc, ckpt_path.empty() ? default_ckpt : ckpt_path, stats_path);
            std::printf("emulator: %s\nplan: %s\nscores: %s\n", out.emulator_path.c_str(),
                        out.plan_path.c_str(), out.scores_csv_path.c_str());
        } else if (protocol->parsed()) {
            gradot::ProtocolOutputs out = gradot::cmd_protocol(
                pc, ckpt_path.empty() ? default_ckpt : ckpt_path,
                emulator_path.empty() ? default_emulator : emulator_path);
            std::printf("report: %s\ncsv: %s\n", out.report_json_path.c_str(),
                        out.report_csv_path.c_str());
            std::printf("delta_accuracy: %.6f  delta_loss: %.6f\n", out.report.delta_accuracy,
                        out.report.delta_loss);
        } else if (pipeline->parsed()) {
            gradot::PipelineResult res = gradot::cmd_pipeline(pc);
            for (const gradot::StageResult& s : res.stages) {
                std::printf("stage %s: %s -> %s\n", s.name.c_str(), s.action.c_str(),
                            s.path.c_str());
            }
            std::printf("report: %s\n", res.report_json_path.c_str());
        }
    } catch (const gradot::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const gradot::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const gradot::NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

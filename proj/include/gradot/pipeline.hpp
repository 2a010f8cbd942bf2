#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradot/compress.hpp"
#include "gradot/data.hpp"
#include "gradot/model.hpp"
#include "gradot/tune.hpp"

namespace gradot {

// Whole-run configuration, one JSON file. Unknown keys are rejected and all
// constraint violations are reported together.
struct PipelineConfig {
    ModelConfig model; // vocab_size 0 means "derive from the data section"

    std::string task = "copy"; // copy | modular_add | text
    std::string text_path;
    int train_size = 192;
    int test_size = 64;
    std::pair<double, double> split_fracs = {0.9, 0.1};
    std::uint64_t data_seed = 11;
    std::vector<SynthKind> support_kinds = {SynthKind::copy, SynthKind::modular_add};
    int support_total = 1500;
    std::uint64_t support_seed = 12;
    int pretrain_size = 512;
    std::uint64_t pretrain_seed = 13;

    CompressConfig compress;

    TrainConfig train; // mask is per-arm; the protocol sets it
    int pretrain_steps = 600;
    double pretrain_lr = 3e-3;
    // First fraction of pretraining trains the emulator region plus the
    // embedding/head plumbing with adapter blocks frozen, so the task
    // circuitry settles in the middle the way it does at depth; the rest
    // trains everything jointly.
    double pretrain_phase1_frac = 0.75;
    TrainMask full_ft_mask = TrainMask::all;

    std::string out_dir = "runs/out";

    static PipelineConfig from_json_text(const std::string& text);
    static PipelineConfig load(const std::string& path);
    nlohmann::json to_json() const;

    // Rebase every seed deterministically (CLI --seed).
    void apply_seed(std::uint64_t seed);
    // Model config with the vocabulary size filled in.
    ModelConfig effective_model(int derived_vocab) const;
};

struct Datasets {
    TokenDataset pretrain;
    TokenDataset train;
    TokenDataset test;
    TokenDataset support;
    int vocab_size = 0;
};

// Builds every dataset of the run; support excludes downstream sequences.
Datasets build_datasets(const PipelineConfig& pc);

// Stage commands. Each embeds the content hashes of its inputs in its
// outputs and refuses mismatched (stale) inputs.
std::string cmd_pretrain(const PipelineConfig& pc);

std::string cmd_stats(const PipelineConfig& pc, const std::string& ckpt_path);

struct CompressOutputs {
    std::string emulator_path;
    std::string plan_path;
    std::string scores_csv_path;
};
CompressOutputs cmd_compress(const PipelineConfig& pc, const std::string& ckpt_path,
                             const std::string& stats_path);

struct ProtocolOutputs {
    std::string report_json_path;
    std::string report_csv_path;
    RunReport report;
};
ProtocolOutputs cmd_protocol(const PipelineConfig& pc, const std::string& ckpt_path,
                             const std::string& emulator_path);

struct StageResult {
    std::string name;
    std::string action; // "computed" | "reused"
    std::string path;
};

struct PipelineResult {
    std::vector<StageResult> stages;
    std::string report_json_path;
    std::string report_csv_path;
};

// Runs pretrain -> stats -> compress -> protocol, reusing any stage whose
// recorded input hashes already match (stats are keyed by model and support
// hashes only, so compression-config changes never re-run the stats pass).
PipelineResult cmd_pipeline(const PipelineConfig& pc);

} // namespace gradot

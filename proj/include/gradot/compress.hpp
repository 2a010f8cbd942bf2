#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradot/model.hpp"
#include "gradot/score.hpp"
#include "gradot/stats.hpp"

namespace gradot {

// Component selection strategy. gcs is the method; random and magnitude are
// equal-budget baselines for the protocol comparison.
enum class SelectionMode { gcs, random_uniform, magnitude };

SelectionMode selection_mode_from_string(const std::string& s);
std::string to_string(SelectionMode m);

// Trade-off factor sweep; coarse by design, tuned per model scale.
inline const std::vector<double>& lambda_grid() {
    static const std::vector<double> grid = {1e1, 1e2, 1e3, 1e4, 1e5};
    return grid;
}

struct CompressConfig {
    double r_mha = 1.0;
    double r_mlp = 1.0;
    double lambda_mha = 1e4;
    double lambda_mlp = 1e2;
    double pin_frac = 0.05;
    SelectionMode selection = SelectionMode::gcs;
    std::uint64_t selection_seed = 0;

    std::vector<std::string> violations() const;
    void validate() const;
    nlohmann::json to_json() const;
    static CompressConfig from_json(const nlohmann::json& j);
};

// One compressed linear: factored (DRD keeps rank components as B * A) or
// pruned (SCP keeps a channel subset; the sliced weight stays dense).
struct CompressedLinear {
    enum class Kind { factored, pruned };
    Kind kind = Kind::factored;
    Matrix b_factor; // d_o x |s|       (factored)
    Matrix a_factor; // |s| x d_i       (factored)
    Matrix pruned_w; // sliced weight   (pruned)
    std::vector<int> kept; // ascending component indices
    int orig_rows = 0;
    int orig_cols = 0;
    std::vector<ComponentScore> score_audit;
    double predicted_gap = 0.0; // first-order loss change of this removal
    GcsValue aggregate;         // exact GCS of the realized delta
    std::string warning;
};

// Dynamic rank decomposition of one attention weight. Budget
// |s| = floor(r * d_i * d_o / (d_i + d_o)), minimum 1; r == 1 keeps every
// rank. The top ceil(pin_frac * r_full) singular directions are pinned
// inside the budget (gcs and magnitude modes).
CompressedLinear drd(const Matrix& w, const LayerStats& ls, double r, double lambda,
                     double pin_frac, SelectionMode mode = SelectionMode::gcs,
                     std::uint64_t selection_seed = 0, const std::string& layer_id = "");

// Selective channel pruning of an MLP pair; both sides keep the identical
// channel set of size max(1, floor(r * d_int)).
struct ScpResult {
    CompressedLinear up;
    CompressedLinear down;
};

ScpResult scp(const Matrix& w_up, const Matrix& w_down, const LayerStats& ls_up,
              const LayerStats& ls_down, double r, double lambda,
              SelectionMode mode = SelectionMode::gcs, std::uint64_t selection_seed = 0,
              const std::string& layer_id = "");

struct PlanEntry {
    std::string layer_id;
    std::string method; // "drd" | "scp" | "copy"
    int orig_rows = 0;
    int orig_cols = 0;
    int kept_count = 0;
    std::vector<int> kept;
    double predicted_gap = 0.0;
    double aggregate_term1 = 0.0;
    double aggregate_term2 = 0.0;
    double aggregate_total = 0.0;
    std::vector<ComponentScore> scores;
    std::string warning;
};

struct CompressionPlan {
    std::vector<PlanEntry> entries;
    double total_predicted_gap = 0.0;

    nlohmann::json to_json() const;
    // layer_id,component,term1,term2,score,kept
    std::string scores_csv() const;
};

struct EmulatorArtifact {
    ParamSet params;
    ModelConfig cfg;
    CompressionPlan plan;
    std::string model_hash;
    std::string stats_hash;
    CompressConfig compress_cfg;
};

// Algorithm main loop: DRD on every MHA weight in blocks n1..n2, SCP on
// every MLP pair, verbatim copies elsewhere. r == 1 on a route copies the
// original weights bit for bit.
EmulatorArtifact build_emulator(const ParamSet& params, const ModelConfig& cfg,
                                const StatsBundle& bundle, const CompressConfig& cc);

void save_emulator(const std::string& path, const EmulatorArtifact& artifact);
EmulatorArtifact load_emulator(const std::string& path);

} // namespace gradot

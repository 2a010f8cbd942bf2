#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gradot/data.hpp"
#include "gradot/matrix.hpp"
#include "gradot/model.hpp"

namespace gradot {

// Per-linear-layer statistics from the support pass: mean weight gradient
// and the two Kronecker factors of the curvature approximation. The factors
// are stored as token means, so the Hessian-vector product is
// kfac_G * delta * kfac_A (Kronecker of averages); the literal average of
// Kronecker products is kept as the exact_fisher_hvp oracle only.
struct LayerStats {
    Matrix grad_mean; // d_o x d_i
    Matrix kfac_A;    // d_i x d_i, mean of a a^T over tokens
    Matrix kfac_G;    // d_o x d_o, mean of g g^T over tokens
    long token_count = 0;
    long sample_count = 0;

    // Accumulation API (sums; finalize divides by the counts).
    void init_shapes(int d_out, int d_in);
    void add_sample_grad(const Matrix& grad);
    void add_tap(const Matrix& a_rows, const Matrix& g_rows); // one row per token
    void finalize();
};

struct StatsBundle {
    std::map<std::string, LayerStats> layers;
    std::string model_hash;   // content hash of the checkpoint the pass ran on
    std::string support_manifest;
    long sample_count = 0;

    const LayerStats& at(const std::string& layer_id) const;
};

// Algorithm statistics pass: one forward/backward per support sample,
// accumulating grad_mean per sample and the factor moments per token for
// every linear in the emulator region.
StatsBundle accumulate(const ParamSet& params, const ModelConfig& cfg,
                       const TokenDataset& support);

// Count-weighted merge of two bundles with identical layer coverage.
StatsBundle merge(const StatsBundle& x, const StatsBundle& y);

// G * delta * A.
Matrix kfac_hvp(const LayerStats& ls, const Matrix& delta);

// (1/N) sum_n (g_n^T delta a_n) g_n a_n^T over explicit taps; the literal
// reading of the averaged Kronecker curvature, used as a test oracle.
Matrix exact_fisher_hvp(const std::vector<std::pair<std::vector<double>, std::vector<double>>>& taps,
                        const Matrix& delta);
Matrix exact_fisher_hvp(const LinearTap& taps, const Matrix& delta);

// Serialization to the container format (stats are keyed by model hash and
// support hash so the pass runs once per model).
void save_stats(const std::string& path, const StatsBundle& bundle);
StatsBundle load_stats(const std::string& path);

} // namespace gradot

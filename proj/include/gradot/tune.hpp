#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradot/compress.hpp"
#include "gradot/data.hpp"
#include "gradot/model.hpp"

namespace gradot {

// adapters_only and all are the protocol masks; emulator_and_io trains the
// emulator blocks plus embeddings, final norm and head (adapter blocks
// frozen) and exists for the pretraining warmup that settles task circuitry
// into the middle region.
enum class TrainMask { adapters_only, all, emulator_and_io };

TrainMask train_mask_from_string(const std::string& s);
std::string to_string(TrainMask m);

struct TrainConfig {
    double lr = 1e-3;
    int steps = 200;
    int batch_size = 16;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.0; // <= 0 disables clipping
    std::uint64_t seed = 0;
    TrainMask mask = TrainMask::all;

    std::vector<std::string> violations() const;
    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Learning-rate preset sweep; the protocol default is the mid-grid rate.
inline const std::vector<double>& lr_grid() {
    static const std::vector<double> grid = {2e-5, 5e-5, 1e-4, 2e-4, 3e-4};
    return grid;
}

// Adam with decoupled weight decay over an explicit parameter list. The
// attach order defines the gradient order for step().
class AdamW {
public:
    AdamW(double lr, double beta1, double beta2, double eps, double weight_decay);

    void attach(Matrix* param);
    void step(const std::vector<const Matrix*>& grads);
    int step_count() const { return t_; }

private:
    struct Slot {
        Matrix* param;
        Matrix m;
        Matrix v;
    };
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int t_ = 0;
};

struct TrainOutcome {
    ParamSet params;
    std::vector<double> curve; // loss per step
};

// Optimizes only the tensors selected by tc.mask (against the partition);
// frozen tensors come back bit-identical. Deterministic under a fixed seed.
TrainOutcome train(const ParamSet& params, const ModelConfig& cfg, const ModelPartition& part,
                   const TokenDataset& ds_train, const TrainConfig& tc);

struct EvalResult {
    double loss = 0.0;     // mean over samples of the per-sample mean CE
    double accuracy = 0.0; // span exact-match or next-token top-1 per eval mode
};

EvalResult evaluate(const ParamSet& params, const ModelConfig& cfg, const TokenDataset& ds);

struct ArmResult {
    std::string name;
    double test_loss = 0.0;
    double test_accuracy = 0.0;
    int steps = 0;
    std::vector<double> curve;
};

// The four protocol measurements plus the privacy gap. Delta is the paper's
// plug-in minus emulator-FT, reported on accuracy and (literally) on loss.
struct RunReport {
    ArmResult full_ft;
    ArmResult emu_zs;
    ArmResult emu_ft;
    ArmResult plugin;
    double delta_accuracy = 0.0;
    double delta_loss = 0.0;
    double adapter_param_fraction = 0.0;
    std::uint64_t seed = 0;
    nlohmann::json provenance; // hashes and config echoes, set by the caller

    nlohmann::json to_json() const;
    std::string to_csv() const; // header: arm,loss,accuracy,steps,seed
};

struct ProtocolOptions {
    TrainMask full_ft_mask = TrainMask::all;
};

RunReport run_protocol(const ParamSet& original, const ModelConfig& cfg,
                       const EmulatorArtifact& emulator, const TokenDataset& ds_train,
                       const TokenDataset& ds_test, const TrainConfig& tc,
                       const ProtocolOptions& opts = {});

} // namespace gradot

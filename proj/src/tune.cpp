#include "gradot/tune.hpp"

#include <cmath>
#include <cstdio>

#include "gradot/errors.hpp"
#include "gradot/rng.hpp"

namespace gradot {

TrainMask train_mask_from_string(const std::string& s) {
    if (s == "adapters_only") {
        return TrainMask::adapters_only;
    }
    if (s == "all") {
        return TrainMask::all;
    }
    if (s == "emulator_and_io") {
        return TrainMask::emulator_and_io;
    }
    throw ConfigError("unknown train mask '" + s + "' (adapters_only|all|emulator_and_io)");
}

std::string to_string(TrainMask m) {
    switch (m) {
        case TrainMask::adapters_only: return "adapters_only";
        case TrainMask::all: return "all";
        case TrainMask::emulator_and_io: return "emulator_and_io";
    }
    return "all";
}

std::vector<std::string> TrainConfig::violations() const {
    std::vector<std::string> v;
    if (!(lr >= 0.0)) {
        v.push_back("lr must be non-negative");
    }
    if (steps <= 0) {
        v.push_back("steps must be positive");
    }
    if (batch_size <= 0) {
        v.push_back("batch_size must be positive");
    }
    if (weight_decay < 0.0) {
        v.push_back("weight_decay must be >= 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        v.push_back("betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) {
        v.push_back("eps must be positive");
    }
    return v;
}

void TrainConfig::validate() const {
    const auto v = violations();
    if (!v.empty()) {
        std::string msg = "invalid train config:";
        for (const auto& s : v) {
            msg += "\n  - " + s;
        }
        throw ConfigError(msg);
    }
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["lr"] = lr;
    j["steps"] = steps;
    j["batch_size"] = batch_size;
    j["weight_decay"] = weight_decay;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["eps"] = eps;
    j["grad_clip"] = grad_clip;
    j["seed"] = seed;
    j["mask"] = to_string(mask);
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig tc;
    tc.lr = j.value("lr", 1e-3);
    tc.steps = j.value("steps", 200);
    tc.batch_size = j.value("batch_size", 16);
    tc.weight_decay = j.value("weight_decay", 0.0);
    tc.beta1 = j.value("beta1", 0.9);
    tc.beta2 = j.value("beta2", 0.999);
    tc.eps = j.value("eps", 1e-8);
    tc.grad_clip = j.value("grad_clip", 1.0);
    tc.seed = j.value("seed", 0ULL);
    tc.mask = train_mask_from_string(j.value("mask", "all"));
    return tc;
}

AdamW::AdamW(double lr, double beta1, double beta2, double eps, double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void AdamW::attach(Matrix* param) {
    Slot s;
    s.param = param;
    s.m = Matrix(param->rows(), param->cols());
    s.v = Matrix(param->rows(), param->cols());
    slots_.push_back(std::move(s));
}

void AdamW::step(const std::vector<const Matrix*>& grads) {
    if (grads.size() != slots_.size()) {
        throw ShapeError("AdamW::step gradient list does not match attached parameters");
    }
    t_ += 1;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t s = 0; s < slots_.size(); ++s) {
        Slot& slot = slots_[s];
        const Matrix& g = *grads[s];
        if (!g.same_shape(*slot.param)) {
            throw ShapeError("AdamW::step gradient shape mismatch");
        }
        double* p = slot.param->data();
        double* m = slot.m.data();
        double* v = slot.v.data();
        const double* gp = g.data();
        for (std::size_t i = 0; i < slot.param->size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gp[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gp[i] * gp[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p[i]);
        }
    }
}

namespace {

struct TrainableSet {
    std::vector<std::string> names;
    std::vector<Matrix*> params;
};

bool is_io_tensor(const std::string& name) {
    return name == "tok_emb" || name == "pos_emb" || name.rfind("final_ln.", 0) == 0 ||
           name.rfind("head.", 0) == 0;
}

TrainableSet collect_trainable(ParamSet& ps, const ModelPartition& part, TrainMask mask) {
    TrainableSet out;
    for_each_tensor(ps, [&](const std::string& name, Matrix& m) {
        const Role role = part.tensor_role(name);
        if (mask == TrainMask::adapters_only && role == Role::emulator) {
            return;
        }
        if (mask == TrainMask::emulator_and_io && role != Role::emulator && !is_io_tensor(name)) {
            return;
        }
        out.names.push_back(name);
        out.params.push_back(&m);
    });
    return out;
}

std::vector<const Matrix*> gather_grads(const GradSet& grads,
                                        const std::vector<std::string>& names) {
    std::vector<const Matrix*> out(names.size(), nullptr);
    for_each_tensor(grads, [&](const std::string& name, const Matrix& g) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == name) {
                out[i] = &g;
            }
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i] == nullptr) {
            throw Error("missing gradient for trainable tensor '" + names[i] + "'");
        }
    }
    return out;
}

} // namespace

TrainOutcome train(const ParamSet& params, const ModelConfig& cfg, const ModelPartition& part,
                   const TokenDataset& ds_train, const TrainConfig& tc) {
    tc.validate();
    if (ds_train.samples.empty()) {
        throw DataError("train: empty training dataset");
    }

    TrainOutcome out;
    out.params = params;
    TrainableSet trainable = collect_trainable(out.params, part, tc.mask);
    if (trainable.params.empty()) {
        throw ConfigError("train: trainable mask selects no tensors");
    }

    AdamW opt(tc.lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay);
    for (Matrix* p : trainable.params) {
        opt.attach(p);
    }

    std::vector<TokenBatch> epoch;
    std::size_t cursor = 0;
    int epoch_index = 0;
    for (int step = 0; step < tc.steps; ++step) {
        if (cursor == epoch.size()) {
            epoch = batches(ds_train, tc.batch_size,
                            Rng(tc.seed).fork(static_cast<std::uint64_t>(epoch_index)).next_u64());
            cursor = 0;
            epoch_index += 1;
        }
        const TokenBatch& batch = epoch[cursor];
        cursor += 1;

        double loss = 0.0;
        GradSet grads;
        try {
            ForwardResult fr = forward(out.params, cfg, batch);
            loss = fr.loss;
            grads = backward(out.params, cfg, fr.tape).grads;
        } catch (const NumericalError& e) {
            throw NumericalError("training diverged at step " + std::to_string(step) + ": " +
                                 e.what());
        }
        if (!std::isfinite(loss)) {
            throw NumericalError("training diverged at step " + std::to_string(step));
        }
        out.curve.push_back(loss);

        std::vector<const Matrix*> gptrs = gather_grads(grads, trainable.names);
        std::vector<Matrix> clipped;
        if (tc.grad_clip > 0.0) {
            double sq = 0.0;
            for (const Matrix* g : gptrs) {
                sq += inner(*g, *g);
            }
            const double norm = std::sqrt(sq);
            if (norm > tc.grad_clip) {
                const double factor = tc.grad_clip / norm;
                clipped.reserve(gptrs.size());
                for (const Matrix* g : gptrs) {
                    clipped.push_back(scale(*g, factor));
                }
                for (std::size_t i = 0; i < gptrs.size(); ++i) {
                    gptrs[i] = &clipped[i];
                }
            }
        }
        opt.step(gptrs);
    }
    return out;
}

EvalResult evaluate(const ParamSet& params, const ModelConfig& cfg, const TokenDataset& ds) {
    if (ds.samples.empty()) {
        throw DataError("evaluate: empty dataset");
    }
    constexpr int kEvalBatch = 32;
    double loss_sum = 0.0;
    long loss_count = 0;
    AccuracyCounts counts;

    for (std::size_t start = 0; start < ds.samples.size(); start += kEvalBatch) {
        const std::size_t end = std::min(ds.samples.size(), start + kEvalBatch);
        std::vector<Sample> chunk(ds.samples.begin() + static_cast<long>(start),
                                  ds.samples.begin() + static_cast<long>(end));
        TokenBatch batch = batch_from_samples(chunk);
        ForwardResult fr = forward(params, cfg, batch);
        for (const SeqTape& row : fr.tape.rows) {
            if (row.n_masked > 0) {
                loss_sum += row.ce_sum / row.n_masked;
                loss_count += 1;
            }
        }
        accumulate_accuracy(batch, argmax_predictions(fr.tape, batch.batch, batch.seq), counts);
    }

    EvalResult res;
    res.loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    res.accuracy = (ds.eval_mode == EvalMode::span_exact) ? counts.exact_match()
                                                          : counts.token_top1();
    return res;
}

namespace {

nlohmann::json arm_to_json(const ArmResult& arm) {
    nlohmann::json j;
    j["name"] = arm.name;
    j["test_loss"] = arm.test_loss;
    j["test_accuracy"] = arm.test_accuracy;
    j["steps"] = arm.steps;
    j["curve"] = arm.curve;
    return j;
}

} // namespace

nlohmann::json RunReport::to_json() const {
    nlohmann::json j;
    j["arms"] = {arm_to_json(full_ft), arm_to_json(emu_zs), arm_to_json(emu_ft),
                 arm_to_json(plugin)};
    j["delta_accuracy"] = delta_accuracy;
    j["delta_loss"] = delta_loss;
    j["adapter_param_fraction"] = adapter_param_fraction;
    j["seed"] = seed;
    j["provenance"] = provenance;
    return j;
}

std::string RunReport::to_csv() const {
    std::string csv = "arm,loss,accuracy,steps,seed\n";
    char buf[160];
    for (const ArmResult* arm : {&full_ft, &emu_zs, &emu_ft, &plugin}) {
        std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%d,%llu\n", arm->name.c_str(),
                      arm->test_loss, arm->test_accuracy, arm->steps,
                      static_cast<unsigned long long>(seed));
        csv += buf;
    }
    return csv;
}

RunReport run_protocol(const ParamSet& original, const ModelConfig& cfg,
                       const EmulatorArtifact& emulator, const TokenDataset& ds_train,
                       const TokenDataset& ds_test, const TrainConfig& tc,
                       const ProtocolOptions& opts) {
    if (emulator.cfg != cfg) {
        throw ConfigError("run_protocol: emulator was built for a different model config");
    }
    const ModelPartition part = partition(original, cfg);

    RunReport report;
    report.seed = tc.seed;

    // Arm 1: full fine-tune of the original model.
    {
        TrainConfig arm_tc = tc;
        arm_tc.mask = opts.full_ft_mask;
        TrainOutcome ft;
        try {
            ft = train(original, cfg, part, ds_train, arm_tc);
        } catch (const NumericalError& e) {
            throw NumericalError(std::string("full-FT arm: ") + e.what());
        }
        EvalResult ev = evaluate(ft.params, cfg, ds_test);
        report.full_ft =
            ArmResult{"full_ft", ev.loss, ev.accuracy, arm_tc.steps, std::move(ft.curve)};
    }

    // Arm 2: emulator zero-shot.
    {
        EvalResult ev = evaluate(emulator.params, cfg, ds_test);
        report.emu_zs = ArmResult{"emu_zs", ev.loss, ev.accuracy, 0, {}};
    }

    // Arm 3: emulator fine-tune, adapters only; compressed middle frozen.
    ParamSet emu_tuned;
    {
        TrainConfig arm_tc = tc;
        arm_tc.mask = TrainMask::adapters_only;
        TrainOutcome ft;
        try {
            ft = train(emulator.params, cfg, part, ds_train, arm_tc);
        } catch (const NumericalError& e) {
            throw NumericalError(std::string("emulator-FT arm: ") + e.what());
        }
        EvalResult ev = evaluate(ft.params, cfg, ds_test);
        report.emu_ft =
            ArmResult{"emu_ft", ev.loss, ev.accuracy, arm_tc.steps, std::move(ft.curve)};
        emu_tuned = std::move(ft.params);
    }

    // Arm 4: plug tuned adapters into the original middle.
    {
        ParamSet merged = assemble_plugin(original, emu_tuned, cfg);
        EvalResult ev = evaluate(merged, cfg, ds_test);
        report.plugin = ArmResult{"plugin", ev.loss, ev.accuracy, 0, {}};
    }

    report.delta_accuracy = report.plugin.test_accuracy - report.emu_ft.test_accuracy;
    report.delta_loss = report.plugin.test_loss - report.emu_ft.test_loss;

    std::size_t adapter_params = 0;
    std::size_t total_params = 0;
    for_each_tensor(original, [&](const std::string& name, const Matrix& m) {
        total_params += m.size();
        if (part.tensor_role(name) != Role::emulator) {
            adapter_params += m.size();
        }
    });
    report.adapter_param_fraction =
        total_params ? static_cast<double>(adapter_params) / static_cast<double>(total_params)
                     : 0.0;
    return report;
}

} // namespace gradot

#include "gradot/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gradot/checkpoint.hpp"
#include "gradot/errors.hpp"
#include "gradot/rng.hpp"
#include "gradot/stats.hpp"

namespace fs = std::filesystem;

namespace gradot {

namespace {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string json_hash(const nlohmann::json& j) {
    const std::string text = j.dump();
    return hex64(fnv1a64(text.data(), text.size()));
}

void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                         const std::string& where, std::vector<std::string>& problems) {
    if (!j.is_object()) {
        problems.push_back(where + " must be a JSON object");
        return;
    }
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const std::string& a : allowed) {
            ok = ok || (a == key);
        }
        if (!ok) {
            problems.push_back("unknown key '" + where + "." + key + "'");
        }
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open for writing: " + path);
    }
    out << text;
    if (!out) {
        throw DataError("write failed: " + path);
    }
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open: " + path);
    }
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }

    std::vector<std::string> problems;
    reject_unknown_keys(j, {"model", "data", "compress", "train", "out_dir"}, "config",
                        problems);

    PipelineConfig pc;
    try {
        if (j.contains("model")) {
            const auto& jm = j.at("model");
            reject_unknown_keys(jm,
                                {"vocab_size", "ctx_len", "d_model", "n_heads", "d_int",
                                 "n_layers", "n1", "n2", "seed"},
                                "model", problems);
            pc.model.vocab_size = jm.value("vocab_size", 0);
            pc.model.ctx_len = jm.value("ctx_len", 16);
            pc.model.d_model = jm.value("d_model", 16);
            pc.model.n_heads = jm.value("n_heads", 2);
            pc.model.d_int = jm.value("d_int", 32);
            pc.model.n_layers = jm.value("n_layers", 4);
            pc.model.n1 = jm.value("n1", 1);
            pc.model.n2 = jm.value("n2", 2);
            pc.model.seed = jm.value("seed", 1ULL);
        }
        if (j.contains("data")) {
            const auto& jd = j.at("data");
            reject_unknown_keys(jd,
                                {"task", "text_path", "train_size", "test_size", "split_fracs",
                                 "seed", "support", "pretrain"},
                                "data", problems);
            pc.task = jd.value("task", "copy");
            pc.text_path = jd.value("text_path", "");
            pc.train_size = jd.value("train_size", 192);
            pc.test_size = jd.value("test_size", 64);
            if (jd.contains("split_fracs")) {
                const auto& sf = jd.at("split_fracs");
                if (!sf.is_array() || sf.size() != 2) {
                    problems.push_back("data.split_fracs must be a two-element array");
                } else {
                    pc.split_fracs = {sf[0].get<double>(), sf[1].get<double>()};
                }
            }
            pc.data_seed = jd.value("seed", 11ULL);
            if (jd.contains("support")) {
                const auto& js = jd.at("support");
                reject_unknown_keys(js, {"kinds", "total", "seed"}, "data.support", problems);
                if (js.contains("kinds")) {
                    pc.support_kinds.clear();
                    for (const auto& k : js.at("kinds")) {
                        pc.support_kinds.push_back(synth_kind_from_string(k.get<std::string>()));
                    }
                }
                pc.support_total = js.value("total", 1500);
                pc.support_seed = js.value("seed", 12ULL);
            }
            if (jd.contains("pretrain")) {
                const auto& jp = jd.at("pretrain");
                reject_unknown_keys(jp, {"size", "seed"}, "data.pretrain", problems);
                pc.pretrain_size = jp.value("size", 512);
                pc.pretrain_seed = jp.value("seed", 13ULL);
            }
        }
        if (j.contains("compress")) {
            const auto& jc = j.at("compress");
            reject_unknown_keys(jc,
                                {"r_mha", "r_mlp", "lambda_mha", "lambda_mlp", "pin_frac",
                                 "selection", "selection_seed"},
                                "compress", problems);
            pc.compress = CompressConfig::from_json(jc);
        }
        if (j.contains("train")) {
            const auto& jt = j.at("train");
            reject_unknown_keys(jt,
                                {"lr", "steps", "batch_size", "weight_decay", "beta1", "beta2",
                                 "eps", "grad_clip", "seed", "pretrain_steps", "pretrain_lr",
                                 "pretrain_phase1_frac", "full_ft_mask"},
                                "train", problems);
            pc.train = TrainConfig::from_json(jt);
            pc.pretrain_steps = jt.value("pretrain_steps", 600);
            pc.pretrain_lr = jt.value("pretrain_lr", 3e-3);
            pc.pretrain_phase1_frac = jt.value("pretrain_phase1_frac", 0.75);
            pc.full_ft_mask = train_mask_from_string(jt.value("full_ft_mask", "all"));
        }
        pc.out_dir = j.value("out_dir", "runs/out");
    } catch (const ConfigError& e) {
        problems.push_back(e.what());
    } catch (const nlohmann::json::exception& e) {
        problems.push_back(std::string("malformed config value: ") + e.what());
    }

    // Module precondition checks, collected rather than thrown one by one.
    {
        ModelConfig probe = pc.model;
        if (probe.vocab_size == 0) {
            probe.vocab_size = 2; // derived later from the data section
        }
        for (const std::string& v : probe.violations()) {
            problems.push_back("model: " + v);
        }
        for (const std::string& v : pc.compress.violations()) {
            problems.push_back("compress: " + v);
        }
        for (const std::string& v : pc.train.violations()) {
            problems.push_back("train: " + v);
        }
        if (pc.task != "copy" && pc.task != "modular_add" && pc.task != "text") {
            problems.push_back("data: task must be copy, modular_add, or text");
        }
        if (pc.task == "text" && pc.text_path.empty()) {
            problems.push_back("data: text task needs text_path");
        }
        if (pc.train_size <= 0 || pc.test_size <= 0) {
            problems.push_back("data: train_size and test_size must be positive");
        }
        if (pc.support_total <= 0) {
            problems.push_back("data: support.total must be positive");
        }
        if (pc.support_kinds.empty()) {
            problems.push_back("data: support.kinds must not be empty");
        }
        if (pc.pretrain_size <= 0) {
            problems.push_back("data: pretrain.size must be positive");
        }
        if (pc.pretrain_steps <= 0) {
            problems.push_back("train: pretrain_steps must be positive");
        }
        if (!(pc.pretrain_lr >= 0.0)) {
            problems.push_back("train: pretrain_lr must be non-negative");
        }
        if (!(pc.pretrain_phase1_frac >= 0.0 && pc.pretrain_phase1_frac <= 1.0)) {
            problems.push_back("train: pretrain_phase1_frac must be in [0, 1]");
        }
        if (pc.out_dir.empty()) {
            problems.push_back("out_dir must not be empty");
        }
    }

    if (!problems.empty()) {
        std::string msg = "invalid pipeline config:";
        for (const std::string& p : problems) {
            msg += "\n  - " + p;
        }
        throw ConfigError(msg);
    }
    return pc;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open config file: " + path);
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json j;
    j["model"] = config_to_json(model);
    nlohmann::json jd;
    jd["task"] = task;
    jd["text_path"] = text_path;
    jd["train_size"] = train_size;
    jd["test_size"] = test_size;
    jd["split_fracs"] = {split_fracs.first, split_fracs.second};
    jd["seed"] = data_seed;
    nlohmann::json kinds = nlohmann::json::array();
    for (SynthKind k : support_kinds) {
        kinds.push_back(to_string(k));
    }
    jd["support"] = {{"kinds", kinds}, {"total", support_total}, {"seed", support_seed}};
    jd["pretrain"] = {{"size", pretrain_size}, {"seed", pretrain_seed}};
    j["data"] = std::move(jd);
    j["compress"] = compress.to_json();
    nlohmann::json jt = train.to_json();
    jt.erase("mask");
    jt["pretrain_steps"] = pretrain_steps;
    jt["pretrain_lr"] = pretrain_lr;
    jt["pretrain_phase1_frac"] = pretrain_phase1_frac;
    jt["full_ft_mask"] = to_string(full_ft_mask);
    j["train"] = std::move(jt);
    j["out_dir"] = out_dir;
    return j;
}

void PipelineConfig::apply_seed(std::uint64_t seed) {
    model.seed = seed;
    data_seed = seed + 1;
    support_seed = seed + 2;
    pretrain_seed = seed + 3;
    train.seed = seed + 4;
    compress.selection_seed = seed + 5;
}

ModelConfig PipelineConfig::effective_model(int derived_vocab) const {
    ModelConfig cfg = model;
    if (cfg.vocab_size == 0) {
        cfg.vocab_size = derived_vocab;
    } else if (cfg.vocab_size != derived_vocab) {
        throw ConfigError("model.vocab_size " + std::to_string(cfg.vocab_size) +
                          " does not match the data vocabulary size " +
                          std::to_string(derived_vocab));
    }
    cfg.validate();
    return cfg;
}

Datasets build_datasets(const PipelineConfig& pc) {
    Datasets ds;
    if (pc.task == "text") {
        TextSplits splits = load_text(pc.text_path, pc.model.ctx_len, pc.split_fracs, pc.data_seed);
        ds.train = std::move(splits.train);
        ds.test = std::move(splits.test);
        // Support and pretrain chunks come off the back of the train split so
        // every set stays disjoint.
        const int want_support = std::min<int>(pc.support_total, ds.train.size() / 3);
        const int want_pretrain = std::min<int>(pc.pretrain_size, ds.train.size() / 3);
        if (want_support < 1 || want_pretrain < 1) {
            throw DataError("text corpus too small to carve support and pretrain sets");
        }
        ds.support = ds.train;
        ds.support.name = "text-support";
        ds.support.split = SplitTag::support;
        ds.support.samples.assign(ds.train.samples.end() - want_support, ds.train.samples.end());
        ds.train.samples.resize(ds.train.samples.size() - static_cast<std::size_t>(want_support));
        ds.pretrain = ds.train;
        ds.pretrain.name = "text-pretrain";
        ds.pretrain.samples.assign(ds.train.samples.end() - want_pretrain, ds.train.samples.end());
        ds.train.samples.resize(ds.train.samples.size() - static_cast<std::size_t>(want_pretrain));
        ds.vocab_size = ds.train.vocab.size();
        return ds;
    }

    const SynthKind kind = synth_kind_from_string(pc.task);
    SynthSplits splits = synth_splits(kind, pc.train_size, pc.test_size, pc.model.ctx_len,
                                      pc.data_seed);
    ds.train = std::move(splits.train);
    ds.test = std::move(splits.test);

    std::set<std::uint64_t> exclude = ds.train.sequence_hashes();
    const auto test_hashes = ds.test.sequence_hashes();
    exclude.insert(test_hashes.begin(), test_hashes.end());
    ds.support = make_support(pc.support_kinds, pc.support_total, pc.model.ctx_len,
                              pc.support_seed, exclude);

    // Pretraining corpus: same task family, long-profile draw, its own seed.
    ds.pretrain = synth_pretrain(kind, pc.pretrain_size, pc.model.ctx_len, pc.pretrain_seed);
    ds.vocab_size = ds.train.vocab.size();
    return ds;
}

namespace {

std::string dataset_hash_hex(const TokenDataset& ds) {
    return hex64(ds.content_hash());
}

nlohmann::json pretrain_stage_inputs(const PipelineConfig& pc, const Datasets& data,
                                     const ModelConfig& cfg) {
    nlohmann::json j;
    j["model"] = config_to_json(cfg);
    j["pretrain_dataset"] = dataset_hash_hex(data.pretrain);
    j["steps"] = pc.pretrain_steps;
    j["lr"] = pc.pretrain_lr;
    j["batch_size"] = pc.train.batch_size;
    j["weight_decay"] = pc.train.weight_decay;
    j["grad_clip"] = pc.train.grad_clip;
    j["phase1_frac"] = pc.pretrain_phase1_frac;
    j["seed"] = pc.pretrain_seed;
    return j;
}

TrainConfig pretrain_train_config(const PipelineConfig& pc) {
    TrainConfig tc = pc.train;
    tc.lr = pc.pretrain_lr;
    tc.steps = pc.pretrain_steps;
    tc.seed = pc.pretrain_seed;
    tc.mask = TrainMask::all;
    return tc;
}

} // namespace

std::string cmd_pretrain(const PipelineConfig& pc) {
    fs::create_directories(pc.out_dir);
    Datasets data = build_datasets(pc);
    const ModelConfig cfg = pc.effective_model(data.vocab_size);

    ParamSet params = init_params(cfg);
    const ModelPartition part = partition(params, cfg);
    TrainOutcome outcome;
    try {
        TrainConfig base_tc = pretrain_train_config(pc);
        const int phase1 = std::min(
            pc.pretrain_steps,
            static_cast<int>(pc.pretrain_phase1_frac * pc.pretrain_steps));
        std::vector<double> curve;
        ParamSet current = std::move(params);
        if (phase1 > 0) {
            TrainConfig p1 = base_tc;
            p1.mask = TrainMask::emulator_and_io;
            p1.steps = phase1;
            TrainOutcome warm = train(current, cfg, part, data.pretrain, p1);
            current = std::move(warm.params);
            curve = std::move(warm.curve);
        }
        if (pc.pretrain_steps - phase1 > 0) {
            TrainConfig p2 = base_tc;
            p2.mask = TrainMask::all;
            p2.steps = pc.pretrain_steps - phase1;
            p2.seed = base_tc.seed + 1;
            outcome = train(current, cfg, part, data.pretrain, p2);
            curve.insert(curve.end(), outcome.curve.begin(), outcome.curve.end());
            outcome.curve = std::move(curve);
        } else {
            outcome.params = std::move(current);
            outcome.curve = std::move(curve);
        }
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("pretrain: ") + e.what());
    }

    const nlohmann::json inputs = pretrain_stage_inputs(pc, data, cfg);
    nlohmann::json meta;
    meta["kind"] = "model";
    meta["inputs"] = inputs;
    meta["stage_key"] = json_hash(inputs);

    const std::string ckpt_path = (fs::path(pc.out_dir) / "base.ckpt").string();
    save_model(ckpt_path, outcome.params, cfg, meta);

    nlohmann::json log;
    log["inputs"] = inputs;
    log["curve"] = outcome.curve;
    log["final_loss"] = outcome.curve.empty() ? 0.0 : outcome.curve.back();
    write_text((fs::path(pc.out_dir) / "pretrain_log.json").string(), log.dump(2) + "\n");
    return ckpt_path;
}

std::string cmd_stats(const PipelineConfig& pc, const std::string& ckpt_path) {
    fs::create_directories(pc.out_dir);
    Datasets data = build_datasets(pc);
    LoadedModel lm = load_model(ckpt_path);
    const std::string model_hash = file_hash_hex(ckpt_path);

    StatsBundle bundle;
    try {
        bundle = accumulate(lm.params, lm.cfg, data.support);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("stats: ") + e.what());
    }
    bundle.model_hash = model_hash;

    const std::string support_hash = dataset_hash_hex(data.support);
    const std::string path =
        (fs::path(pc.out_dir) /
         ("stats_" + model_hash.substr(0, 8) + "_" + support_hash.substr(0, 8) + ".stats"))
            .string();
    save_stats(path, bundle);
    return path;
}

CompressOutputs cmd_compress(const PipelineConfig& pc, const std::string& ckpt_path,
                             const std::string& stats_path) {
    fs::create_directories(pc.out_dir);
    LoadedModel lm = load_model(ckpt_path);
    StatsBundle bundle = load_stats(stats_path);
    const std::string model_hash = file_hash_hex(ckpt_path);
    if (bundle.model_hash != model_hash) {
        throw DataError("stale stats: " + stats_path + " was computed for model " +
                        bundle.model_hash + " but " + ckpt_path + " hashes to " + model_hash);
    }

    EmulatorArtifact artifact = build_emulator(lm.params, lm.cfg, bundle, pc.compress);
    artifact.model_hash = model_hash;
    artifact.stats_hash = file_hash_hex(stats_path);

    CompressOutputs out;
    out.emulator_path = (fs::path(pc.out_dir) / "emulator.ckpt").string();
    save_emulator(out.emulator_path, artifact);

    nlohmann::json plan;
    plan["inputs"] = {{"model", artifact.model_hash}, {"stats", artifact.stats_hash}};
    plan["compress"] = pc.compress.to_json();
    plan["plan"] = artifact.plan.to_json();
    out.plan_path = (fs::path(pc.out_dir) / "plan.json").string();
    write_text(out.plan_path, plan.dump(2) + "\n");

    out.scores_csv_path = (fs::path(pc.out_dir) / "scores.csv").string();
    write_text(out.scores_csv_path, artifact.plan.scores_csv());
    return out;
}

namespace {

nlohmann::json protocol_stage_inputs(const PipelineConfig& pc, const Datasets& data,
                                     const std::string& model_hash,
                                     const std::string& emulator_hash) {
    nlohmann::json j;
    j["model"] = model_hash;
    j["emulator"] = emulator_hash;
    j["train"] = pc.train.to_json();
    j["train"].erase("mask");
    j["full_ft_mask"] = to_string(pc.full_ft_mask);
    j["train_dataset"] = dataset_hash_hex(data.train);
    j["test_dataset"] = dataset_hash_hex(data.test);
    return j;
}

} // namespace

ProtocolOutputs cmd_protocol(const PipelineConfig& pc, const std::string& ckpt_path,
                             const std::string& emulator_path) {
    fs::create_directories(pc.out_dir);
    Datasets data = build_datasets(pc);
    LoadedModel lm = load_model(ckpt_path);
    EmulatorArtifact emulator = load_emulator(emulator_path);
    const std::string model_hash = file_hash_hex(ckpt_path);
    if (emulator.model_hash != model_hash) {
        throw DataError("stale emulator: " + emulator_path + " was built for model " +
                        emulator.model_hash + " but " + ckpt_path + " hashes to " + model_hash);
    }

    ProtocolOptions opts;
    opts.full_ft_mask = pc.full_ft_mask;
    RunReport report;
    try {
        report = run_protocol(lm.params, lm.cfg, emulator, data.train, data.test, pc.train, opts);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("protocol: ") + e.what());
    }

    const nlohmann::json inputs =
        protocol_stage_inputs(pc, data, model_hash, file_hash_hex(emulator_path));
    report.provenance = nlohmann::json::object();
    report.provenance["inputs"] = inputs;
    report.provenance["stage_key"] = json_hash(inputs);
    report.provenance["stats"] = emulator.stats_hash;
    report.provenance["compress"] = pc.compress.to_json();
    report.provenance["support_dataset"] = dataset_hash_hex(data.support);

    ProtocolOutputs out;
    out.report = std::move(report);
    out.report_json_path = (fs::path(pc.out_dir) / "report.json").string();
    write_text(out.report_json_path, out.report.to_json().dump(2) + "\n");
    out.report_csv_path = (fs::path(pc.out_dir) / "report.csv").string();
    write_text(out.report_csv_path, out.report.to_csv());
    return out;
}

PipelineResult cmd_pipeline(const PipelineConfig& pc) {
    fs::create_directories(pc.out_dir);
    Datasets data = build_datasets(pc);
    const ModelConfig cfg = pc.effective_model(data.vocab_size);

    PipelineResult result;
    auto record = [&](const std::string& name, const std::string& action,
                      const std::string& path) {
        result.stages.push_back(StageResult{name, action, path});
    };

    // Stage 1: pretrain.
    const std::string ckpt_path = (fs::path(pc.out_dir) / "base.ckpt").string();
    const std::string pretrain_key = json_hash(pretrain_stage_inputs(pc, data, cfg));
    bool reuse_pretrain = false;
    if (fs::exists(ckpt_path)) {
        try {
            reuse_pretrain = load_model(ckpt_path).meta.value("stage_key", "") == pretrain_key;
        } catch (const Error&) {
            reuse_pretrain = false;
        }
    }
    if (reuse_pretrain) {
        record("pretrain", "reused", ckpt_path);
    } else {
        cmd_pretrain(pc);
        record("pretrain", "computed", ckpt_path);
    }
    const std::string model_hash = file_hash_hex(ckpt_path);

    // Stage 2: statistics, keyed by (model hash, support hash) only.
    const std::string support_hash = dataset_hash_hex(data.support);
    const std::string stats_path =
        (fs::path(pc.out_dir) /
         ("stats_" + model_hash.substr(0, 8) + "_" + support_hash.substr(0, 8) + ".stats"))
            .string();
    bool reuse_stats = false;
    if (fs::exists(stats_path)) {
        try {
            reuse_stats = load_stats(stats_path).model_hash == model_hash;
        } catch (const Error&) {
            reuse_stats = false;
        }
    }
    if (reuse_stats) {
        record("stats", "reused", stats_path);
    } else {
        cmd_stats(pc, ckpt_path);
        record("stats", "computed", stats_path);
    }

    // Stage 3: compression.
    const std::string emulator_path = (fs::path(pc.out_dir) / "emulator.ckpt").string();
    nlohmann::json compress_inputs;
    compress_inputs["model"] = model_hash;
    compress_inputs["stats"] = file_hash_hex(stats_path);
    compress_inputs["compress"] = pc.compress.to_json();
    const std::string compress_key = json_hash(compress_inputs);
    bool reuse_compress = false;
    if (fs::exists(emulator_path)) {
        try {
            EmulatorArtifact existing = load_emulator(emulator_path);
            nlohmann::json existing_inputs;
            existing_inputs["model"] = existing.model_hash;
            existing_inputs["stats"] = existing.stats_hash;
            existing_inputs["compress"] = existing.compress_cfg.to_json();
            reuse_compress = json_hash(existing_inputs) == compress_key &&
                             existing.model_hash == model_hash;
        } catch (const Error&) {
            reuse_compress = false;
        }
    }
    if (reuse_compress) {
        record("compress", "reused", emulator_path);
    } else {
        cmd_compress(pc, ckpt_path, stats_path);
        record("compress", "computed", emulator_path);
    }

    // Stage 4: protocol.
    const std::string report_path = (fs::path(pc.out_dir) / "report.json").string();
    const std::string protocol_key = json_hash(
        protocol_stage_inputs(pc, data, model_hash, file_hash_hex(emulator_path)));
    bool reuse_protocol = false;
    if (fs::exists(report_path)) {
        try {
            nlohmann::json existing = nlohmann::json::parse(read_text(report_path));
            reuse_protocol =
                existing.at("provenance").value("stage_key", "") == protocol_key;
        } catch (const std::exception&) {
            reuse_protocol = false;
        }
    }
    if (reuse_protocol) {
        record("protocol", "reused", report_path);
    } else {
        cmd_protocol(pc, ckpt_path, emulator_path);
        record("protocol", "computed", report_path);
    }

    result.report_json_path = report_path;
    result.report_csv_path = (fs::path(pc.out_dir) / "report.csv").string();
    return result;
}

} // namespace gradot

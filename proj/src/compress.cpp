#include "gradot/compress.hpp"

#include <algorithm>
#include <cmath>

#include "gradot/checkpoint.hpp"
#include "gradot/errors.hpp"
#include "gradot/rng.hpp"

namespace gradot {

SelectionMode selection_mode_from_string(const std::string& s) {
    if (s == "gcs") {
        return SelectionMode::gcs;
    }
    if (s == "random") {
        return SelectionMode::random_uniform;
    }
    if (s == "magnitude") {
        return SelectionMode::magnitude;
    }
    throw ConfigError("unknown selection mode '" + s + "' (gcs|random|magnitude)");
}

std::string to_string(SelectionMode m) {
    switch (m) {
        case SelectionMode::gcs: return "gcs";
        case SelectionMode::random_uniform: return "random";
        case SelectionMode::magnitude: return "magnitude";
    }
    return "gcs";
}

std::vector<std::string> CompressConfig::violations() const {
    std::vector<std::string> v;
    if (!(r_mha > 0.0 && r_mha <= 1.0)) {
        v.push_back("r_mha must be in (0, 1]");
    }
    if (!(r_mlp > 0.0 && r_mlp <= 1.0)) {
        v.push_back("r_mlp must be in (0, 1]");
    }
    if (lambda_mha < 0.0) {
        v.push_back("lambda_mha must be >= 0");
    }
    if (lambda_mlp < 0.0) {
        v.push_back("lambda_mlp must be >= 0");
    }
    if (!(pin_frac >= 0.0 && pin_frac <= 1.0)) {
        v.push_back("pin_frac must be in [0, 1]");
    }
    return v;
}

void CompressConfig::validate() const {
    const auto v = violations();
    if (!v.empty()) {
        std::string msg = "invalid compress config:";
        for (const auto& s : v) {
            msg += "\n  - " + s;
        }
        throw ConfigError(msg);
    }
}

nlohmann::json CompressConfig::to_json() const {
    nlohmann::json j;
    j["r_mha"] = r_mha;
    j["r_mlp"] = r_mlp;
    j["lambda_mha"] = lambda_mha;
    j["lambda_mlp"] = lambda_mlp;
    j["pin_frac"] = pin_frac;
    j["selection"] = to_string(selection);
    j["selection_seed"] = selection_seed;
    return j;
}

CompressConfig CompressConfig::from_json(const nlohmann::json& j) {
    CompressConfig cc;
    cc.r_mha = j.value("r_mha", 1.0);
    cc.r_mlp = j.value("r_mlp", 1.0);
    cc.lambda_mha = j.value("lambda_mha", 1e4);
    cc.lambda_mlp = j.value("lambda_mlp", 1e2);
    cc.pin_frac = j.value("pin_frac", 0.05);
    cc.selection = selection_mode_from_string(j.value("selection", "gcs"));
    cc.selection_seed = j.value("selection_seed", 0ULL);
    return cc;
}

namespace {

std::vector<ComponentScore> synthetic_scores(int n, SelectionMode mode,
                                             const std::vector<double>& magnitudes,
                                             std::uint64_t seed) {
    std::vector<ComponentScore> out(static_cast<std::size_t>(n));
    Rng rng(seed);
    for (int k = 0; k < n; ++k) {
        out[static_cast<std::size_t>(k)].index = k;
        out[static_cast<std::size_t>(k)].removal_score =
            (mode == SelectionMode::magnitude) ? magnitudes[static_cast<std::size_t>(k)]
                                               : rng.next_double();
    }
    return out;
}

} // namespace

CompressedLinear drd(const Matrix& w, const LayerStats& ls, double r, double lambda,
                     double pin_frac, SelectionMode mode, std::uint64_t selection_seed,
                     const std::string& layer_id) {
    if (!ls.grad_mean.same_shape(w)) {
        throw ShapeError("drd: stats do not match weight shape for layer '" + layer_id + "'");
    }
    SvdFactors f;
    try {
        f = svd(w);
    } catch (const NumericalError& e) {
        throw NumericalError("drd: svd failed on layer '" + layer_id + "': " + e.what());
    }
    const int r_full = f.rank_count();
    const int d_o = w.rows();
    const int d_i = w.cols();

    int budget;
    if (r >= 1.0) {
        budget = r_full;
    } else {
        budget = static_cast<int>(std::floor(r * d_i * d_o / static_cast<double>(d_i + d_o)));
        budget = std::max(1, std::min(budget, r_full));
    }

    CompressedLinear out;
    out.kind = CompressedLinear::Kind::factored;
    out.orig_rows = d_o;
    out.orig_cols = d_i;

    std::set<int> pinned;
    if (mode != SelectionMode::random_uniform) {
        const int pin_count = static_cast<int>(std::ceil(pin_frac * r_full));
        if (pin_count > budget) {
            out.warning = "pinned rank count " + std::to_string(pin_count) +
                          " exceeds budget " + std::to_string(budget) + " on layer '" +
                          layer_id + "'; pins truncated to the budget";
        }
        for (int k = 0; k < std::min(pin_count, budget); ++k) {
            pinned.insert(k);
        }
    }

    std::vector<ComponentScore> scores;
    if (mode == SelectionMode::gcs) {
        scores = svd_component_scores(ls, f, lambda);
    } else {
        scores = synthetic_scores(r_full, mode, f.sigma, selection_seed);
    }
    out.kept = select_greedy(scores, budget, pinned);
    out.score_audit = scores;

    out.b_factor = Matrix(d_o, budget);
    out.a_factor = Matrix(budget, d_i);
    for (int c = 0; c < budget; ++c) {
        const int k = out.kept[static_cast<std::size_t>(c)];
        const double sigma = f.sigma[static_cast<std::size_t>(k)];
        for (int i = 0; i < d_o; ++i) {
            out.b_factor(i, c) = f.u(i, k) * sigma;
        }
        for (int j = 0; j < d_i; ++j) {
            out.a_factor(c, j) = f.vt(k, j);
        }
    }

    // Realized delta and its audit, built from the removed components so the
    // no-removal case is exactly zero.
    Matrix delta(d_o, d_i);
    std::vector<bool> is_kept(static_cast<std::size_t>(r_full), false);
    for (int k : out.kept) {
        is_kept[static_cast<std::size_t>(k)] = true;
    }
    double gap = 0.0;
    for (int k = 0; k < r_full; ++k) {
        if (!is_kept[static_cast<std::size_t>(k)]) {
            delta = sub(delta, rank1_component(f, k));
            gap -= scores[static_cast<std::size_t>(k)].removal_term2;
        }
    }
    out.aggregate = gcs(ls, delta, lambda);
    out.predicted_gap = (mode == SelectionMode::gcs) ? gap : inner(ls.grad_mean, delta);
    return out;
}

ScpResult scp(const Matrix& w_up, const Matrix& w_down, const LayerStats& ls_up,
              const LayerStats& ls_down, double r, double lambda, SelectionMode mode,
              std::uint64_t selection_seed, const std::string& layer_id) {
    const int d_int = w_up.rows();
    if (w_down.cols() != d_int) {
        throw ShapeError("scp: intermediate width mismatch on layer '" + layer_id + "'");
    }
    if (!ls_up.grad_mean.same_shape(w_up) || !ls_down.grad_mean.same_shape(w_down)) {
        throw ShapeError("scp: stats do not match weights on layer '" + layer_id + "'");
    }

    int budget = (r >= 1.0) ? d_int
                            : std::max(1, static_cast<int>(std::floor(r * d_int)));
    budget = std::min(budget, d_int);

    std::vector<ComponentScore> scores;
    if (mode == SelectionMode::gcs) {
        scores = channel_component_scores(ls_up, ls_down, w_up, w_down, lambda);
    } else {
        std::vector<double> mags(static_cast<std::size_t>(d_int), 0.0);
        for (int k = 0; k < d_int; ++k) {
            double up2 = 0.0;
            for (int j = 0; j < w_up.cols(); ++j) {
                up2 += w_up(k, j) * w_up(k, j);
            }
            double down2 = 0.0;
            for (int i = 0; i < w_down.rows(); ++i) {
                down2 += w_down(i, k) * w_down(i, k);
            }
            mags[static_cast<std::size_t>(k)] = std::sqrt(up2) + std::sqrt(down2);
        }
        scores = synthetic_scores(d_int, mode, mags, selection_seed);
    }
    const std::vector<int> kept = select_greedy(scores, budget, {});

    ScpResult out;
    out.up.kind = CompressedLinear::Kind::pruned;
    out.up.orig_rows = d_int;
    out.up.orig_cols = w_up.cols();
    out.up.kept = kept;
    out.up.score_audit = scores;
    out.up.pruned_w = Matrix(budget, w_up.cols());
    out.down.kind = CompressedLinear::Kind::pruned;
    out.down.orig_rows = w_down.rows();
    out.down.orig_cols = d_int;
    out.down.kept = kept;
    out.down.score_audit = scores;
    out.down.pruned_w = Matrix(w_down.rows(), budget);
    for (int c = 0; c < budget; ++c) {
        const int k = kept[static_cast<std::size_t>(c)];
        for (int j = 0; j < w_up.cols(); ++j) {
            out.up.pruned_w(c, j) = w_up(k, j);
        }
        for (int i = 0; i < w_down.rows(); ++i) {
            out.down.pruned_w(i, c) = w_down(i, k);
        }
    }

    // Audit deltas per side.
    Matrix d_up(d_int, w_up.cols());
    Matrix d_down(w_down.rows(), d_int);
    std::vector<bool> is_kept(static_cast<std::size_t>(d_int), false);
    for (int k : kept) {
        is_kept[static_cast<std::size_t>(k)] = true;
    }
    for (int k = 0; k < d_int; ++k) {
        if (is_kept[static_cast<std::size_t>(k)]) {
            continue;
        }
        for (int j = 0; j < w_up.cols(); ++j) {
            d_up(k, j) = -w_up(k, j);
        }
        for (int i = 0; i < w_down.rows(); ++i) {
            d_down(i, k) = -w_down(i, k);
        }
    }
    out.up.aggregate = gcs(ls_up, d_up, lambda);
    out.down.aggregate = gcs(ls_down, d_down, lambda);
    out.up.predicted_gap = inner(ls_up.grad_mean, d_up);
    out.down.predicted_gap = inner(ls_down.grad_mean, d_down);
    return out;
}

nlohmann::json CompressionPlan::to_json() const {
    nlohmann::json j;
    j["total_predicted_gap"] = total_predicted_gap;
    nlohmann::json list = nlohmann::json::array();
    for (const PlanEntry& e : entries) {
        nlohmann::json je;
        je["layer_id"] = e.layer_id;
        je["method"] = e.method;
        je["orig_rows"] = e.orig_rows;
        je["orig_cols"] = e.orig_cols;
        je["kept_count"] = e.kept_count;
        je["kept"] = e.kept;
        je["predicted_gap"] = e.predicted_gap;
        je["aggregate_term1"] = e.aggregate_term1;
        je["aggregate_term2"] = e.aggregate_term2;
        je["aggregate_total"] = e.aggregate_total;
        if (!e.warning.empty()) {
            je["warning"] = e.warning;
        }
        nlohmann::json sc = nlohmann::json::array();
        for (const ComponentScore& s : e.scores) {
            sc.push_back({{"component", s.index},
                          {"term1", s.removal_term1},
                          {"term2", s.removal_term2},
                          {"score", s.removal_score}});
        }
        je["scores"] = std::move(sc);
        list.push_back(std::move(je));
    }
    j["layers"] = std::move(list);
    return j;
}

std::string CompressionPlan::scores_csv() const {
    std::string csv = "layer_id,component,term1,term2,score,kept\n";
    char buf[160];
    for (const PlanEntry& e : entries) {
        std::vector<bool> kept_flag(e.scores.size(), false);
        for (int k : e.kept) {
            if (k >= 0 && k < static_cast<int>(e.scores.size())) {
                kept_flag[static_cast<std::size_t>(k)] = true;
            }
        }
        for (const ComponentScore& s : e.scores) {
            std::snprintf(buf, sizeof(buf), "%s,%d,%.17g,%.17g,%.17g,%d\n", e.layer_id.c_str(),
                          s.index, s.removal_term1, s.removal_term2, s.removal_score,
                          kept_flag[static_cast<std::size_t>(s.index)] ? 1 : 0);
            csv += buf;
        }
    }
    return csv;
}

namespace {

PlanEntry plan_entry_from(const std::string& layer_id, const std::string& method,
                          const CompressedLinear& cl) {
    PlanEntry e;
    e.layer_id = layer_id;
    e.method = method;
    e.orig_rows = cl.orig_rows;
    e.orig_cols = cl.orig_cols;
    e.kept = cl.kept;
    e.kept_count = static_cast<int>(cl.kept.size());
    e.predicted_gap = cl.predicted_gap;
    e.aggregate_term1 = cl.aggregate.term1;
    e.aggregate_term2 = cl.aggregate.term2;
    e.aggregate_total = cl.aggregate.total;
    e.scores = cl.score_audit;
    e.warning = cl.warning;
    return e;
}

} // namespace

EmulatorArtifact build_emulator(const ParamSet& params, const ModelConfig& cfg,
                                const StatsBundle& bundle, const CompressConfig& cc) {
    cc.validate();
    const ModelPartition part = partition(params, cfg);
    for (const std::string& id : part.emulator_linear_ids()) {
        if (bundle.layers.find(id) == bundle.layers.end()) {
            throw DataError("build_emulator: stats missing for emulator layer '" + id + "'");
        }
    }

    EmulatorArtifact artifact;
    artifact.params = params;
    artifact.cfg = cfg;
    artifact.compress_cfg = cc;
    artifact.model_hash = bundle.model_hash;

    for (int b = cfg.n1; b <= cfg.n2; ++b) {
        BlockParams& blk = artifact.params.blocks[static_cast<std::size_t>(b)];
        const std::string prefix = "block" + std::to_string(b) + ".";

        const std::pair<const char*, LinearParam*> mha[] = {
            {"attn.wq", &blk.wq}, {"attn.wk", &blk.wk}, {"attn.wv", &blk.wv}, {"attn.wo", &blk.wo}};
        for (const auto& [suffix, lin] : mha) {
            const std::string id = prefix + suffix;
            if (cc.r_mha >= 1.0) {
                // Bit-exact copy; the plug-in/no-op invariants depend on it.
                PlanEntry e;
                e.layer_id = id;
                e.method = "copy";
                e.orig_rows = lin->w.rows();
                e.orig_cols = lin->w.cols();
                e.kept_count = std::min(lin->w.rows(), lin->w.cols());
                artifact.plan.entries.push_back(std::move(e));
                continue;
            }
            CompressedLinear cl = drd(lin->w, bundle.at(id), cc.r_mha, cc.lambda_mha,
                                      cc.pin_frac, cc.selection, cc.selection_seed, id);
            artifact.plan.entries.push_back(plan_entry_from(id, "drd", cl));
            artifact.plan.total_predicted_gap += cl.predicted_gap;
            lin->w = Matrix();
            lin->lr_b = std::move(cl.b_factor);
            lin->lr_a = std::move(cl.a_factor);
        }

        const std::string up_id = prefix + "mlp.up";
        const std::string down_id = prefix + "mlp.down";
        ScpResult pruned = scp(blk.w_up.w, blk.w_down.w, bundle.at(up_id), bundle.at(down_id),
                               cc.r_mlp, cc.lambda_mlp, cc.selection, cc.selection_seed, up_id);
        artifact.plan.entries.push_back(plan_entry_from(up_id, "scp", pruned.up));
        artifact.plan.entries.push_back(plan_entry_from(down_id, "scp", pruned.down));
        artifact.plan.total_predicted_gap += pruned.up.predicted_gap + pruned.down.predicted_gap;
        Matrix bias(static_cast<int>(pruned.up.kept.size()), 1);
        for (std::size_t c = 0; c < pruned.up.kept.size(); ++c) {
            bias(static_cast<int>(c), 0) = blk.w_up.bias(pruned.up.kept[c], 0);
        }
        blk.w_up.w = std::move(pruned.up.pruned_w);
        blk.w_up.bias = std::move(bias);
        blk.w_down.w = std::move(pruned.down.pruned_w);
    }
    return artifact;
}

void save_emulator(const std::string& path, const EmulatorArtifact& artifact) {
    nlohmann::json meta;
    meta["kind"] = "emulator";
    meta["model_hash"] = artifact.model_hash;
    meta["stats_hash"] = artifact.stats_hash;
    meta["compress"] = artifact.compress_cfg.to_json();
    meta["plan"] = artifact.plan.to_json();
    save_model(path, artifact.params, artifact.cfg, meta);
}

EmulatorArtifact load_emulator(const std::string& path) {
    LoadedModel lm = load_model(path);
    if (lm.meta.value("kind", "") != "emulator") {
        throw DataError("not an emulator checkpoint: " + path);
    }
    EmulatorArtifact artifact;
    artifact.params = std::move(lm.params);
    artifact.cfg = lm.cfg;
    artifact.model_hash = lm.meta.value("model_hash", "");
    artifact.stats_hash = lm.meta.value("stats_hash", "");
    artifact.compress_cfg = CompressConfig::from_json(lm.meta.at("compress"));
    const nlohmann::json& plan = lm.meta.at("plan");
    artifact.plan.total_predicted_gap = plan.value("total_predicted_gap", 0.0);
    for (const auto& je : plan.at("layers")) {
        PlanEntry e;
        e.layer_id = je.at("layer_id").get<std::string>();
        e.method = je.at("method").get<std::string>();
        e.orig_rows = je.at("orig_rows").get<int>();
        e.orig_cols = je.at("orig_cols").get<int>();
        e.kept_count = je.at("kept_count").get<int>();
        e.kept = je.value("kept", std::vector<int>{});
        e.predicted_gap = je.value("predicted_gap", 0.0);
        e.aggregate_term1 = je.value("aggregate_term1", 0.0);
        e.aggregate_term2 = je.value("aggregate_term2", 0.0);
        e.aggregate_total = je.value("aggregate_total", 0.0);
        e.warning = je.value("warning", "");
        for (const auto& js : je.value("scores", nlohmann::json::array())) {
            ComponentScore s;
            s.index = js.at("component").get<int>();
            s.removal_term1 = js.at("term1").get<double>();
            s.removal_term2 = js.at("term2").get<double>();
            s.removal_score = js.at("score").get<double>();
            e.scores.push_back(s);
        }
        artifact.plan.entries.push_back(std::move(e));
    }
    return artifact;
}

} // namespace gradot

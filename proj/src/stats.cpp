#include "gradot/stats.hpp"

#include <json.hpp>

#include "gradot/checkpoint.hpp"
#include "gradot/errors.hpp"

namespace gradot {

void LayerStats::init_shapes(int d_out, int d_in) {
    grad_mean = Matrix(d_out, d_in);
    kfac_A = Matrix(d_in, d_in);
    kfac_G = Matrix(d_out, d_out);
    token_count = 0;
    sample_count = 0;
}

void LayerStats::add_sample_grad(const Matrix& grad) {
    if (!grad.same_shape(grad_mean)) {
        throw ShapeError("layer stats gradient shape mismatch");
    }
    double* dst = grad_mean.data();
    const double* src = grad.data();
    for (std::size_t i = 0; i < grad_mean.size(); ++i) {
        dst[i] += src[i];
    }
    sample_count += 1;
}

void LayerStats::add_tap(const Matrix& a_rows, const Matrix& g_rows) {
    if (a_rows.rows() != g_rows.rows() || a_rows.cols() != kfac_A.rows() ||
        g_rows.cols() != kfac_G.rows()) {
        throw ShapeError("layer stats tap shape mismatch");
    }
    for (int t = 0; t < a_rows.rows(); ++t) {
        const double* a = a_rows.row_ptr(t);
        const double* g = g_rows.row_ptr(t);
        for (int i = 0; i < kfac_A.rows(); ++i) {
            double* row = kfac_A.row_ptr(i);
            const double ai = a[i];
            for (int j = 0; j < kfac_A.cols(); ++j) {
                row[j] += ai * a[j];
            }
        }
        for (int i = 0; i < kfac_G.rows(); ++i) {
            double* row = kfac_G.row_ptr(i);
            const double gi = g[i];
            for (int j = 0; j < kfac_G.cols(); ++j) {
                row[j] += gi * g[j];
            }
        }
    }
    token_count += a_rows.rows();
}

void LayerStats::finalize() {
    if (sample_count > 0) {
        grad_mean = scale(grad_mean, 1.0 / static_cast<double>(sample_count));
    }
    if (token_count > 0) {
        kfac_A = scale(kfac_A, 1.0 / static_cast<double>(token_count));
        kfac_G = scale(kfac_G, 1.0 / static_cast<double>(token_count));
    }
}

const LayerStats& StatsBundle::at(const std::string& layer_id) const {
    auto it = layers.find(layer_id);
    if (it == layers.end()) {
        throw DataError("stats bundle has no layer '" + layer_id + "'");
    }
    return it->second;
}

StatsBundle accumulate(const ParamSet& params, const ModelConfig& cfg,
                       const TokenDataset& support) {
    if (support.samples.empty()) {
        throw DataError("support dataset is empty");
    }
    const ModelPartition part = partition(params, cfg);

    StatsBundle bundle;
    bundle.support_manifest = support.manifest();
    for (const std::string& id : part.emulator_linear_ids()) {
        bundle.layers.emplace(id, LayerStats{});
    }

    bool shapes_ready = false;
    for (std::size_t si = 0; si < support.samples.size(); ++si) {
        TokenBatch one = batch_from_samples({support.samples[si]});
        BackwardResult bw;
        try {
            ForwardResult fr = forward(params, cfg, one);
            bw = backward(params, cfg, fr.tape);
        } catch (const NumericalError& e) {
            throw NumericalError("stats pass failed at support sample " +
                                 std::to_string(si) + ": " + e.what());
        }

        for (auto& [id, ls] : bundle.layers) {
            auto tap_it = bw.taps.find(id);
            if (tap_it == bw.taps.end()) {
                throw DataError("no activation tap for emulator layer '" + id +
                                "' (is the layer factored already?)");
            }
            const LinearTap& tap = tap_it->second;
            if (!shapes_ready) {
                ls.init_shapes(tap.g.cols(), tap.a.cols());
            }
            if (!tap.a.all_finite() || !tap.g.all_finite()) {
                throw NumericalError("non-finite activations in layer '" + id +
                                     "' at support sample " + std::to_string(si));
            }
            // Per-sample gradient of that sample's mean loss.
            Matrix grad(tap.g.cols(), tap.a.cols());
            for (int t = 0; t < tap.a.rows(); ++t) {
                const double* a = tap.a.row_ptr(t);
                const double* g = tap.g.row_ptr(t);
                for (int o = 0; o < grad.rows(); ++o) {
                    double* row = grad.row_ptr(o);
                    const double gv = g[o];
                    for (int i = 0; i < grad.cols(); ++i) {
                        row[i] += gv * a[i];
                    }
                }
            }
            ls.add_sample_grad(grad);
            ls.add_tap(tap.a, tap.g);
        }
        shapes_ready = true;
    }

    for (auto& [id, ls] : bundle.layers) {
        ls.finalize();
    }
    bundle.sample_count = static_cast<long>(support.samples.size());
    return bundle;
}

StatsBundle merge(const StatsBundle& x, const StatsBundle& y) {
    if (x.layers.empty() || x.sample_count == 0) {
        return y;
    }
    if (y.layers.empty() || y.sample_count == 0) {
        return x;
    }
    if (x.layers.size() != y.layers.size()) {
        throw DataError("stats merge: layer coverage differs");
    }
    StatsBundle out;
    out.model_hash = x.model_hash;
    out.support_manifest = x.support_manifest;
    out.sample_count = x.sample_count + y.sample_count;
    for (const auto& [id, lx] : x.layers) {
        auto it = y.layers.find(id);
        if (it == y.layers.end()) {
            throw DataError("stats merge: layer '" + id + "' missing from one bundle");
        }
        const LayerStats& ly = it->second;
        if (!lx.grad_mean.same_shape(ly.grad_mean)) {
            throw ShapeError("stats merge: shape mismatch in layer '" + id + "'");
        }
        LayerStats m;
        const double ns = static_cast<double>(lx.sample_count + ly.sample_count);
        const double nt = static_cast<double>(lx.token_count + ly.token_count);
        m.sample_count = lx.sample_count + ly.sample_count;
        m.token_count = lx.token_count + ly.token_count;
        m.grad_mean = scale(add(scale(lx.grad_mean, static_cast<double>(lx.sample_count)),
                                scale(ly.grad_mean, static_cast<double>(ly.sample_count))),
                            1.0 / ns);
        m.kfac_A = scale(add(scale(lx.kfac_A, static_cast<double>(lx.token_count)),
                             scale(ly.kfac_A, static_cast<double>(ly.token_count))),
                         1.0 / nt);
        m.kfac_G = scale(add(scale(lx.kfac_G, static_cast<double>(lx.token_count)),
                             scale(ly.kfac_G, static_cast<double>(ly.token_count))),
                         1.0 / nt);
        out.layers.emplace(id, std::move(m));
    }
    return out;
}

Matrix kfac_hvp(const LayerStats& ls, const Matrix& delta) {
    if (delta.rows() != ls.kfac_G.rows() || delta.cols() != ls.kfac_A.rows()) {
        throw ShapeError("kfac_hvp delta shape mismatch");
    }
    return matmul(matmul(ls.kfac_G, delta), ls.kfac_A);
}

Matrix exact_fisher_hvp(
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& taps,
    const Matrix& delta) {
    if (taps.empty()) {
        throw ShapeError("exact_fisher_hvp needs at least one tap");
    }
    const int d_in = static_cast<int>(taps.front().first.size());
    const int d_out = static_cast<int>(taps.front().second.size());
    if (delta.rows() != d_out || delta.cols() != d_in) {
        throw ShapeError("exact_fisher_hvp delta shape mismatch");
    }
    Matrix out(d_out, d_in);
    for (const auto& [a, g] : taps) {
        // scalar g^T delta a
        double s = 0.0;
        for (int o = 0; o < d_out; ++o) {
            const double* drow = delta.row_ptr(o);
            double t = 0.0;
            for (int i = 0; i < d_in; ++i) {
                t += drow[i] * a[static_cast<std::size_t>(i)];
            }
            s += g[static_cast<std::size_t>(o)] * t;
        }
        for (int o = 0; o < d_out; ++o) {
            double* row = out.row_ptr(o);
            const double gs = g[static_cast<std::size_t>(o)] * s;
            for (int i = 0; i < d_in; ++i) {
                row[i] += gs * a[static_cast<std::size_t>(i)];
            }
        }
    }
    return scale(out, 1.0 / static_cast<double>(taps.size()));
}

Matrix exact_fisher_hvp(const LinearTap& taps, const Matrix& delta) {
    std::vector<std::pair<std::vector<double>, std::vector<double>>> rows;
    rows.reserve(static_cast<std::size_t>(taps.a.rows()));
    for (int t = 0; t < taps.a.rows(); ++t) {
        std::vector<double> a(taps.a.row_ptr(t), taps.a.row_ptr(t) + taps.a.cols());
        std::vector<double> g(taps.g.row_ptr(t), taps.g.row_ptr(t) + taps.g.cols());
        rows.emplace_back(std::move(a), std::move(g));
    }
    return exact_fisher_hvp(rows, delta);
}

void save_stats(const std::string& path, const StatsBundle& bundle) {
    nlohmann::json meta;
    meta["kind"] = "stats";
    meta["model_hash"] = bundle.model_hash;
    meta["support_manifest"] = bundle.support_manifest;
    meta["sample_count"] = bundle.sample_count;
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [id, ls] : bundle.layers) {
        counts[id] = {{"tokens", ls.token_count}, {"samples", ls.sample_count}};
    }
    meta["counts"] = std::move(counts);

    std::vector<std::pair<std::string, const Matrix*>> tensors;
    for (const auto& [id, ls] : bundle.layers) {
        tensors.emplace_back(id + "/grad_mean", &ls.grad_mean);
        tensors.emplace_back(id + "/kfac_A", &ls.kfac_A);
        tensors.emplace_back(id + "/kfac_G", &ls.kfac_G);
    }
    container::write(path, meta, tensors);
}

StatsBundle load_stats(const std::string& path) {
    container::Contents c = container::read(path);
    if (c.meta.value("kind", "") != "stats") {
        throw DataError("not a stats container: " + path);
    }
    StatsBundle bundle;
    bundle.model_hash = c.meta.value("model_hash", "");
    bundle.support_manifest = c.meta.value("support_manifest", "");
    bundle.sample_count = c.meta.value("sample_count", 0L);
    for (const auto& [id, counts] : c.meta.at("counts").items()) {
        LayerStats ls;
        ls.token_count = counts.at("tokens").get<long>();
        ls.sample_count = counts.at("samples").get<long>();
        auto grab = [&](const std::string& suffix) -> Matrix {
            auto it = c.tensors.find(id + suffix);
            if (it == c.tensors.end()) {
                throw DataError("stats container missing tensor " + id + suffix);
            }
            return std::move(it->second);
        };
        ls.grad_mean = grab("/grad_mean");
        ls.kfac_A = grab("/kfac_A");
        ls.kfac_G = grab("/kfac_G");
        bundle.layers.emplace(id, std::move(ls));
    }
    return bundle;
}

} // namespace gradot

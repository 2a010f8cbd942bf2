#include "gradot/model.hpp"

#include <cmath>

#include "gradot/errors.hpp"
#include "gradot/rng.hpp"

namespace gradot {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;

// Y = X * W^T with X (m x k), W (n x k). Row-major friendly on both sides.
Matrix matmul_nt(const Matrix& x, const Matrix& w) {
    if (x.cols() != w.cols()) {
        throw ShapeError("matmul_nt inner dimension mismatch");
    }
    Matrix out(x.rows(), w.rows());
    for (int i = 0; i < x.rows(); ++i) {
        const double* xrow = x.row_ptr(i);
        double* orow = out.row_ptr(i);
        for (int o = 0; o < w.rows(); ++o) {
            const double* wrow = w.row_ptr(o);
            double s = 0.0;
            for (int j = 0; j < x.cols(); ++j) {
                s += xrow[j] * wrow[j];
            }
            orow[o] = s;
        }
    }
    return out;
}

// out += A^T * B with A (k x m), B (k x n): the weight-gradient shape.
void accum_tn(Matrix& out, const Matrix& a, const Matrix& b) {
    for (int t = 0; t < a.rows(); ++t) {
        const double* arow = a.row_ptr(t);
        const double* brow = b.row_ptr(t);
        for (int i = 0; i < a.cols(); ++i) {
            const double av = arow[i];
            if (av == 0.0) {
                continue;
            }
            double* orow = out.row_ptr(i);
            for (int j = 0; j < b.cols(); ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out += A * B, plain matmul accumulate.
void accum_mm(Matrix& out, const Matrix& a, const Matrix& b) {
    for (int i = 0; i < a.rows(); ++i) {
        const double* arow = a.row_ptr(i);
        double* orow = out.row_ptr(i);
        for (int p = 0; p < a.cols(); ++p) {
            const double av = arow[p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = b.row_ptr(p);
            for (int j = 0; j < b.cols(); ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

void add_bias_rows(Matrix& y, const Matrix& bias) {
    if (bias.empty()) {
        return;
    }
    if (bias.rows() != y.cols() || bias.cols() != 1) {
        throw ShapeError("bias shape mismatch");
    }
    for (int i = 0; i < y.rows(); ++i) {
        double* row = y.row_ptr(i);
        for (int j = 0; j < y.cols(); ++j) {
            row[j] += bias(j, 0);
        }
    }
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

struct LnOut {
    Matrix y;
    Matrix xhat;
    std::vector<double> inv_std;
};

LnOut ln_forward(const Matrix& x, const Matrix& g, const Matrix& b) {
    const int d = x.cols();
    LnOut out;
    out.y = Matrix(x.rows(), d);
    out.xhat = Matrix(x.rows(), d);
    out.inv_std.assign(static_cast<std::size_t>(x.rows()), 0.0);
    for (int t = 0; t < x.rows(); ++t) {
        const double* row = x.row_ptr(t);
        double mu = 0.0;
        for (int j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        out.inv_std[static_cast<std::size_t>(t)] = inv;
        double* xh = out.xhat.row_ptr(t);
        double* yr = out.y.row_ptr(t);
        for (int j = 0; j < d; ++j) {
            xh[j] = (row[j] - mu) * inv;
            yr[j] = g(j, 0) * xh[j] + b(j, 0);
        }
    }
    return out;
}

// Returns dX; accumulates dg/db.
Matrix ln_backward(const Matrix& dy, const Matrix& xhat, const std::vector<double>& inv_std,
                   const Matrix& g, Matrix& dg, Matrix& db) {
    const int d = dy.cols();
    Matrix dx(dy.rows(), d);
    for (int t = 0; t < dy.rows(); ++t) {
        const double* dyr = dy.row_ptr(t);
        const double* xh = xhat.row_ptr(t);
        double m1 = 0.0;
        double m2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dxh = dyr[j] * g(j, 0);
            m1 += dxh;
            m2 += dxh * xh[j];
            dg(j, 0) += dyr[j] * xh[j];
            db(j, 0) += dyr[j];
        }
        m1 /= d;
        m2 /= d;
        const double inv = inv_std[static_cast<std::size_t>(t)];
        double* dxr = dx.row_ptr(t);
        for (int j = 0; j < d; ++j) {
            const double dxh = dyr[j] * g(j, 0);
            dxr[j] = inv * (dxh - m1 - xh[j] * m2);
        }
    }
    return dx;
}

// Forward through a (possibly factored) linear on token rows.
Matrix linear_forward(const LinearParam& lin, const Matrix& x, Matrix* z_out) {
    Matrix y;
    if (lin.factored()) {
        Matrix z = matmul_nt(x, lin.lr_a);
        y = matmul_nt(z, lin.lr_b);
        if (z_out != nullptr) {
            *z_out = std::move(z);
        }
    } else {
        y = matmul_nt(x, lin.w);
    }
    add_bias_rows(y, lin.bias);
    return y;
}

// Backward through a linear. Returns dX; accumulates parameter grads.
Matrix linear_backward(const LinearParam& lin, LinearParam& grad, const Matrix& x,
                       const Matrix& z, const Matrix& dy) {
    if (!lin.bias.empty()) {
        for (int t = 0; t < dy.rows(); ++t) {
            const double* row = dy.row_ptr(t);
            for (int j = 0; j < dy.cols(); ++j) {
                grad.bias(j, 0) += row[j];
            }
        }
    }
    Matrix dx(x.rows(), x.cols());
    if (lin.factored()) {
        accum_tn(grad.lr_b, dy, z);
        Matrix dz = matmul_nt(dy, transpose(lin.lr_b));
        accum_tn(grad.lr_a, dz, x);
        accum_mm(dx, dz, lin.lr_a);
    } else {
        accum_tn(grad.w, dy, x);
        accum_mm(dx, dy, lin.w);
    }
    return dx;
}

template <typename PS, typename Fn>
void visit_tensors(PS& ps, const Fn& fn) {
    auto visit_linear = [&](const std::string& id, auto& lin) {
        if (lin.factored()) {
            fn(id + ".w#b", lin.lr_b);
            fn(id + ".w#a", lin.lr_a);
        } else {
            fn(id + ".w", lin.w);
        }
        if (!lin.bias.empty()) {
            fn(id + ".b", lin.bias);
        }
    };
    fn("tok_emb", ps.tok_emb);
    fn("pos_emb", ps.pos_emb);
    for (std::size_t i = 0; i < ps.blocks.size(); ++i) {
        auto& blk = ps.blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        fn(p + "ln1.g", blk.ln1_g);
        fn(p + "ln1.b", blk.ln1_b);
        visit_linear(p + "attn.wq", blk.wq);
        visit_linear(p + "attn.wk", blk.wk);
        visit_linear(p + "attn.wv", blk.wv);
        visit_linear(p + "attn.wo", blk.wo);
        fn(p + "ln2.g", blk.ln2_g);
        fn(p + "ln2.b", blk.ln2_b);
        visit_linear(p + "mlp.up", blk.w_up);
        visit_linear(p + "mlp.down", blk.w_down);
    }
    fn("final_ln.g", ps.final_ln_g);
    fn("final_ln.b", ps.final_ln_b);
    visit_linear("head", ps.head);
}

} // namespace

std::vector<std::string> ModelConfig::violations() const {
    std::vector<std::string> v;
    if (vocab_size < 2) {
        v.push_back("vocab_size must be >= 2");
    }
    if (ctx_len < 2) {
        v.push_back("ctx_len must be >= 2");
    }
    if (d_model < 1 || n_heads < 1) {
        v.push_back("d_model and n_heads must be >= 1");
    }
    if (n_heads >= 1 && d_model >= 1 && d_model % n_heads != 0) {
        v.push_back("d_model must be divisible by n_heads");
    }
    if (d_int <= d_model) {
        v.push_back("d_int must be strictly greater than d_model");
    }
    if (n_layers < 3) {
        v.push_back("n_layers must be >= 3 to leave adapters around the emulator");
    }
    if (!(0 < n1 && n1 <= n2 && n2 < n_layers - 1)) {
        v.push_back("emulator bounds must satisfy 0 < n1 <= n2 < n_layers-1");
    }
    return v;
}

void ModelConfig::validate() const {
    const auto v = violations();
    if (!v.empty()) {
        std::string msg = "invalid model config:";
        for (const auto& s : v) {
            msg += "\n  - " + s;
        }
        throw ConfigError(msg);
    }
}

void for_each_tensor(ParamSet& ps, const std::function<void(const std::string&, Matrix&)>& fn) {
    visit_tensors(ps, fn);
}

void for_each_tensor(const ParamSet& ps,
                     const std::function<void(const std::string&, const Matrix&)>& fn) {
    visit_tensors(ps, fn);
}

ParamSet init_params(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    ParamSet ps;
    ps.tok_emb = Matrix::gaussian(cfg.vocab_size, cfg.d_model, rng, kInitStd);
    ps.pos_emb = Matrix::gaussian(cfg.ctx_len, cfg.d_model, rng, kInitStd);
    const double resid_std = kInitStd / std::sqrt(2.0 * cfg.n_layers);
    ps.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& blk : ps.blocks) {
        blk.ln1_g = Matrix(cfg.d_model, 1);
        blk.ln1_g.fill(1.0);
        blk.ln1_b = Matrix(cfg.d_model, 1);
        blk.ln2_g = Matrix(cfg.d_model, 1);
        blk.ln2_g.fill(1.0);
        blk.ln2_b = Matrix(cfg.d_model, 1);
        for (LinearParam* lin : {&blk.wq, &blk.wk, &blk.wv}) {
            lin->w = Matrix::gaussian(cfg.d_model, cfg.d_model, rng, kInitStd);
            lin->bias = Matrix(cfg.d_model, 1);
        }
        blk.wo.w = Matrix::gaussian(cfg.d_model, cfg.d_model, rng, resid_std);
        blk.wo.bias = Matrix(cfg.d_model, 1);
        blk.w_up.w = Matrix::gaussian(cfg.d_int, cfg.d_model, rng, kInitStd);
        blk.w_up.bias = Matrix(cfg.d_int, 1);
        blk.w_down.w = Matrix::gaussian(cfg.d_model, cfg.d_int, rng, resid_std);
        blk.w_down.bias = Matrix(cfg.d_model, 1);
    }
    ps.final_ln_g = Matrix(cfg.d_model, 1);
    ps.final_ln_g.fill(1.0);
    ps.final_ln_b = Matrix(cfg.d_model, 1);
    ps.head.w = Matrix::gaussian(cfg.vocab_size, cfg.d_model, rng, kInitStd);
    return ps;
}

GradSet zero_like(const ParamSet& ps) {
    GradSet g;
    g.tok_emb = Matrix(ps.tok_emb.rows(), ps.tok_emb.cols());
    g.pos_emb = Matrix(ps.pos_emb.rows(), ps.pos_emb.cols());
    g.blocks.resize(ps.blocks.size());
    auto zero_lin = [](const LinearParam& src, LinearParam& dst) {
        if (src.factored()) {
            dst.lr_b = Matrix(src.lr_b.rows(), src.lr_b.cols());
            dst.lr_a = Matrix(src.lr_a.rows(), src.lr_a.cols());
        } else {
            dst.w = Matrix(src.w.rows(), src.w.cols());
        }
        if (!src.bias.empty()) {
            dst.bias = Matrix(src.bias.rows(), src.bias.cols());
        }
    };
    for (std::size_t i = 0; i < ps.blocks.size(); ++i) {
        const auto& s = ps.blocks[i];
        auto& d = g.blocks[i];
        d.ln1_g = Matrix(s.ln1_g.rows(), 1);
        d.ln1_b = Matrix(s.ln1_b.rows(), 1);
        d.ln2_g = Matrix(s.ln2_g.rows(), 1);
        d.ln2_b = Matrix(s.ln2_b.rows(), 1);
        zero_lin(s.wq, d.wq);
        zero_lin(s.wk, d.wk);
        zero_lin(s.wv, d.wv);
        zero_lin(s.wo, d.wo);
        zero_lin(s.w_up, d.w_up);
        zero_lin(s.w_down, d.w_down);
    }
    g.final_ln_g = Matrix(ps.final_ln_g.rows(), 1);
    g.final_ln_b = Matrix(ps.final_ln_b.rows(), 1);
    zero_lin(ps.head, g.head);
    return g;
}

std::uint64_t params_signature(const ParamSet& ps) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each_tensor(ps, [&](const std::string& name, const Matrix& m) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(m.data(), m.size() * sizeof(double), h);
    });
    return h;
}

Role ModelPartition::block_role(int block) const {
    if (block < n1) {
        return Role::adapter_bottom;
    }
    if (block <= n2) {
        return Role::emulator;
    }
    return Role::adapter_top;
}

Role ModelPartition::tensor_role(const std::string& name) const {
    if (name.rfind("block", 0) == 0) {
        const std::size_t dot = name.find('.');
        const int idx = std::stoi(name.substr(5, dot - 5));
        return block_role(idx);
    }
    if (name == "tok_emb" || name == "pos_emb") {
        return Role::adapter_bottom;
    }
    // final_ln.*, head.*
    return Role::adapter_top;
}

std::vector<std::string> ModelPartition::emulator_linear_ids() const {
    std::vector<std::string> ids;
    for (int b = n1; b <= n2; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        for (const char* suffix : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.up", "mlp.down"}) {
            ids.push_back(p + suffix);
        }
    }
    return ids;
}

ModelPartition partition(const ParamSet& params, const ModelConfig& cfg) {
    cfg.validate();
    if (static_cast<int>(params.blocks.size()) != cfg.n_layers) {
        throw ConfigError("param set has " + std::to_string(params.blocks.size()) +
                          " blocks, config says " + std::to_string(cfg.n_layers));
    }
    return ModelPartition{cfg.n_layers, cfg.n1, cfg.n2};
}

ParamSet assemble_plugin(const ParamSet& original, const ParamSet& tuned, const ModelConfig& cfg) {
    cfg.validate();
    if (static_cast<int>(original.blocks.size()) != cfg.n_layers ||
        static_cast<int>(tuned.blocks.size()) != cfg.n_layers) {
        throw ConfigError("assemble_plugin: block count does not match config");
    }
    if (!original.tok_emb.same_shape(tuned.tok_emb) ||
        !original.head.w.same_shape(tuned.head.w)) {
        throw ConfigError("assemble_plugin: param sets do not share a model config");
    }
    ParamSet out = tuned;
    for (int b = cfg.n1; b <= cfg.n2; ++b) {
        out.blocks[static_cast<std::size_t>(b)] = original.blocks[static_cast<std::size_t>(b)];
    }
    return out;
}

ForwardResult forward(const ParamSet& params, const ModelConfig& cfg, const TokenBatch& batch) {
    if (batch.batch <= 0 || batch.seq <= 0) {
        throw ShapeError("forward: empty batch");
    }
    if (batch.seq > cfg.ctx_len) {
        throw ShapeError("forward: sequence length " + std::to_string(batch.seq) +
                         " exceeds ctx_len " + std::to_string(cfg.ctx_len));
    }
    if (static_cast<int>(batch.input.size()) != batch.batch * batch.seq) {
        throw ShapeError("forward: batch buffer size mismatch");
    }
    if (params.tok_emb.rows() != cfg.vocab_size || params.tok_emb.cols() != cfg.d_model) {
        throw ShapeError("forward: token embedding does not match config");
    }
    const int d = cfg.d_model;
    const int n_heads = cfg.n_heads;
    const int dh = d / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardResult res;
    res.tape.params_sig = params_signature(params);
    double ce_total = 0.0;
    int masked_total = 0;

    for (int r = 0; r < batch.batch; ++r) {
        const int len = batch.seq_len[static_cast<std::size_t>(r)];
        SeqTape row;
        row.len = len;
        if (len == 0) {
            res.tape.rows.push_back(std::move(row));
            continue;
        }
        row.ids.resize(static_cast<std::size_t>(len));
        row.targets.resize(static_cast<std::size_t>(len));
        row.mask.resize(static_cast<std::size_t>(len));
        for (int t = 0; t < len; ++t) {
            const std::size_t idx = static_cast<std::size_t>(r) * batch.seq + t;
            const int id = batch.input[idx];
            const int tgt = batch.target[idx];
            if (id < 0 || id >= cfg.vocab_size || tgt < 0 || tgt >= cfg.vocab_size) {
                throw DataError("forward: token id out of vocab range at row " +
                                std::to_string(r) + " pos " + std::to_string(t));
            }
            row.ids[static_cast<std::size_t>(t)] = id;
            row.targets[static_cast<std::size_t>(t)] = tgt;
            row.mask[static_cast<std::size_t>(t)] = batch.mask[idx];
        }

        Matrix x(len, d);
        for (int t = 0; t < len; ++t) {
            const double* te = params.tok_emb.row_ptr(row.ids[static_cast<std::size_t>(t)]);
            const double* pe = params.pos_emb.row_ptr(t);
            double* xr = x.row_ptr(t);
            for (int j = 0; j < d; ++j) {
                xr[j] = te[j] + pe[j];
            }
        }
        row.x0 = x;

        row.blocks.resize(params.blocks.size());
        for (std::size_t bi = 0; bi < params.blocks.size(); ++bi) {
            const BlockParams& blk = params.blocks[bi];
            SeqBlockTape& bt = row.blocks[bi];
            bt.x_in = x;

            LnOut ln1 = ln_forward(x, blk.ln1_g, blk.ln1_b);
            bt.ln1_xhat = std::move(ln1.xhat);
            bt.ln1_inv_std = std::move(ln1.inv_std);
            bt.y1 = std::move(ln1.y);

            bt.q = linear_forward(blk.wq, bt.y1, &bt.zq);
            bt.k = linear_forward(blk.wk, bt.y1, &bt.zk);
            bt.v = linear_forward(blk.wv, bt.y1, &bt.zv);

            bt.attn_probs.assign(static_cast<std::size_t>(n_heads), Matrix());
            bt.ctx = Matrix(len, d);
            for (int h = 0; h < n_heads; ++h) {
                Matrix probs(len, len);
                const int off = h * dh;
                for (int i = 0; i < len; ++i) {
                    double mx = -1e300;
                    std::vector<double> sc(static_cast<std::size_t>(i + 1), 0.0);
                    for (int j = 0; j <= i; ++j) {
                        double s = 0.0;
                        const double* qi = bt.q.row_ptr(i) + off;
                        const double* kj = bt.k.row_ptr(j) + off;
                        for (int u = 0; u < dh; ++u) {
                            s += qi[u] * kj[u];
                        }
                        s *= att_scale;
                        sc[static_cast<std::size_t>(j)] = s;
                        mx = std::max(mx, s);
                    }
                    double z = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        z += std::exp(sc[static_cast<std::size_t>(j)] - mx);
                    }
                    for (int j = 0; j <= i; ++j) {
                        probs(i, j) = std::exp(sc[static_cast<std::size_t>(j)] - mx) / z;
                    }
                    double* ci = bt.ctx.row_ptr(i) + off;
                    for (int j = 0; j <= i; ++j) {
                        const double p = probs(i, j);
                        const double* vj = bt.v.row_ptr(j) + off;
                        for (int u = 0; u < dh; ++u) {
                            ci[u] += p * vj[u];
                        }
                    }
                }
                bt.attn_probs[static_cast<std::size_t>(h)] = std::move(probs);
            }

            Matrix attn_out = linear_forward(blk.wo, bt.ctx, &bt.zo);
            bt.x2 = add(x, attn_out);

            LnOut ln2 = ln_forward(bt.x2, blk.ln2_g, blk.ln2_b);
            bt.ln2_xhat = std::move(ln2.xhat);
            bt.ln2_inv_std = std::move(ln2.inv_std);
            bt.y2 = std::move(ln2.y);

            bt.h_pre = linear_forward(blk.w_up, bt.y2, nullptr);
            bt.h_act = Matrix(len, bt.h_pre.cols());
            for (int t = 0; t < len; ++t) {
                const double* hp = bt.h_pre.row_ptr(t);
                double* ha = bt.h_act.row_ptr(t);
                for (int j = 0; j < bt.h_pre.cols(); ++j) {
                    ha[j] = gelu(hp[j]);
                }
            }
            Matrix mlp_out = linear_forward(blk.w_down, bt.h_act, nullptr);
            x = add(bt.x2, mlp_out);
        }

        LnOut lnf = ln_forward(x, params.final_ln_g, params.final_ln_b);
        row.lnf_xhat = std::move(lnf.xhat);
        row.lnf_inv_std = std::move(lnf.inv_std);
        row.yf = std::move(lnf.y);
        row.logits = linear_forward(params.head, row.yf, nullptr);
        check_finite(row.logits, "forward logits");

        for (int t = 0; t < len; ++t) {
            if (!row.mask[static_cast<std::size_t>(t)]) {
                continue;
            }
            const double* lg = row.logits.row_ptr(t);
            double mx = lg[0];
            for (int j = 1; j < cfg.vocab_size; ++j) {
                mx = std::max(mx, lg[j]);
            }
            double z = 0.0;
            for (int j = 0; j < cfg.vocab_size; ++j) {
                z += std::exp(lg[j] - mx);
            }
            const double lse = mx + std::log(z);
            row.ce_sum += lse - lg[row.targets[static_cast<std::size_t>(t)]];
            row.n_masked += 1;
        }
        ce_total += row.ce_sum;
        masked_total += row.n_masked;
        res.tape.rows.push_back(std::move(row));
    }

    res.tape.n_masked = masked_total;
    res.tape.loss = masked_total > 0 ? ce_total / masked_total : 0.0;
    res.loss = res.tape.loss;
    if (!std::isfinite(res.loss)) {
        throw NumericalError("forward produced a non-finite loss");
    }
    return res;
}

namespace {

struct TapCollector {
    std::map<std::string, std::vector<const Matrix*>> a_parts;
    std::map<std::string, std::vector<Matrix>> g_parts;

    void add(const std::string& id, const Matrix& a, Matrix g) {
        a_parts[id].push_back(&a);
        g_parts[id].push_back(std::move(g));
    }

    std::map<std::string, LinearTap> assemble() {
        std::map<std::string, LinearTap> out;
        for (auto& [id, gs] : g_parts) {
            int total = 0;
            for (const Matrix& g : gs) {
                total += g.rows();
            }
            LinearTap tap;
            tap.a = Matrix(total, a_parts[id].front()->cols());
            tap.g = Matrix(total, gs.front().cols());
            int row = 0;
            for (std::size_t i = 0; i < gs.size(); ++i) {
                const Matrix& a = *a_parts[id][i];
                const Matrix& g = gs[i];
                for (int t = 0; t < g.rows(); ++t) {
                    for (int j = 0; j < a.cols(); ++j) {
                        tap.a(row, j) = a(t, j);
                    }
                    for (int j = 0; j < g.cols(); ++j) {
                        tap.g(row, j) = g(t, j);
                    }
                    ++row;
                }
            }
            out.emplace(id, std::move(tap));
        }
        return out;
    }
};

} // namespace

BackwardResult backward(const ParamSet& params, const ModelConfig& cfg, const BatchTape& tape) {
    if (tape.params_sig != params_signature(params)) {
        throw Error("backward: tape is stale (parameters changed since forward)");
    }
    const int d = cfg.d_model;
    const int n_heads = cfg.n_heads;
    const int dh = d / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double loss_scale = tape.n_masked > 0 ? 1.0 / tape.n_masked : 0.0;

    BackwardResult res;
    res.grads = zero_like(params);
    TapCollector taps;

    for (const SeqTape& row : tape.rows) {
        const int len = row.len;
        if (len == 0) {
            continue;
        }

        // Cross-entropy gradient at the logits.
        Matrix dlogits(len, cfg.vocab_size);
        for (int t = 0; t < len; ++t) {
            if (!row.mask[static_cast<std::size_t>(t)]) {
                continue;
            }
            const double* lg = row.logits.row_ptr(t);
            double mx = lg[0];
            for (int j = 1; j < cfg.vocab_size; ++j) {
                mx = std::max(mx, lg[j]);
            }
            double z = 0.0;
            for (int j = 0; j < cfg.vocab_size; ++j) {
                z += std::exp(lg[j] - mx);
            }
            double* dl = dlogits.row_ptr(t);
            for (int j = 0; j < cfg.vocab_size; ++j) {
                dl[j] = std::exp(lg[j] - mx) / z * loss_scale;
            }
            dl[row.targets[static_cast<std::size_t>(t)]] -= loss_scale;
        }

        taps.add("head", row.yf, dlogits);
        Matrix dyf = linear_backward(params.head, res.grads.head, row.yf, Matrix(), dlogits);
        Matrix dx = ln_backward(dyf, row.lnf_xhat, row.lnf_inv_std, params.final_ln_g,
                                res.grads.final_ln_g, res.grads.final_ln_b);

        for (int bi = static_cast<int>(params.blocks.size()) - 1; bi >= 0; --bi) {
            const BlockParams& blk = params.blocks[static_cast<std::size_t>(bi)];
            BlockParams& gblk = res.grads.blocks[static_cast<std::size_t>(bi)];
            const SeqBlockTape& bt = row.blocks[static_cast<std::size_t>(bi)];
            const std::string prefix = "block" + std::to_string(bi) + ".";

            // x3 = x2 + mlp_out
            const Matrix& dmlp_out = dx;
            if (!blk.w_down.factored()) {
                taps.add(prefix + "mlp.down", bt.h_act, dmlp_out);
            }
            Matrix dh_act =
                linear_backward(blk.w_down, gblk.w_down, bt.h_act, Matrix(), dmlp_out);
            Matrix dh_pre(len, bt.h_pre.cols());
            for (int t = 0; t < len; ++t) {
                const double* hp = bt.h_pre.row_ptr(t);
                const double* da = dh_act.row_ptr(t);
                double* dp = dh_pre.row_ptr(t);
                for (int j = 0; j < bt.h_pre.cols(); ++j) {
                    dp[j] = da[j] * gelu_grad(hp[j]);
                }
            }
            if (!blk.w_up.factored()) {
                taps.add(prefix + "mlp.up", bt.y2, dh_pre);
            }
            Matrix dy2 = linear_backward(blk.w_up, gblk.w_up, bt.y2, Matrix(), dh_pre);
            Matrix dx2 = add(dx, ln_backward(dy2, bt.ln2_xhat, bt.ln2_inv_std, blk.ln2_g,
                                             gblk.ln2_g, gblk.ln2_b));

            // x2 = x_in + attn_out
            const Matrix& dattn_out = dx2;
            if (!blk.wo.factored()) {
                taps.add(prefix + "attn.wo", bt.ctx, dattn_out);
            }
            Matrix dctx = linear_backward(blk.wo, gblk.wo, bt.ctx, bt.zo, dattn_out);

            Matrix dq(len, d);
            Matrix dk(len, d);
            Matrix dv(len, d);
            for (int h = 0; h < n_heads; ++h) {
                const Matrix& probs = bt.attn_probs[static_cast<std::size_t>(h)];
                const int off = h * dh;
                for (int i = 0; i < len; ++i) {
                    const double* dci = dctx.row_ptr(i) + off;
                    // dprob and softmax backward on the causal row.
                    std::vector<double> dprob(static_cast<std::size_t>(i + 1), 0.0);
                    double dot = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        const double* vj = bt.v.row_ptr(j) + off;
                        double s = 0.0;
                        for (int u = 0; u < dh; ++u) {
                            s += dci[u] * vj[u];
                        }
                        dprob[static_cast<std::size_t>(j)] = s;
                        dot += s * probs(i, j);
                    }
                    for (int j = 0; j <= i; ++j) {
                        const double p = probs(i, j);
                        const double ds = p * (dprob[static_cast<std::size_t>(j)] - dot);
                        const double dss = ds * att_scale;
                        double* dqi = dq.row_ptr(i) + off;
                        double* dkj = dk.row_ptr(j) + off;
                        const double* kj = bt.k.row_ptr(j) + off;
                        const double* qi = bt.q.row_ptr(i) + off;
                        for (int u = 0; u < dh; ++u) {
                            dqi[u] += dss * kj[u];
                            dkj[u] += dss * qi[u];
                        }
                        double* dvj = dv.row_ptr(j) + off;
                        for (int u = 0; u < dh; ++u) {
                            dvj[u] += p * dci[u];
                        }
                    }
                }
            }

            if (!blk.wq.factored()) {
                taps.add(prefix + "attn.wq", bt.y1, dq);
            }
            if (!blk.wk.factored()) {
                taps.add(prefix + "attn.wk", bt.y1, dk);
            }
            if (!blk.wv.factored()) {
                taps.add(prefix + "attn.wv", bt.y1, dv);
            }
            Matrix dy1 = linear_backward(blk.wq, gblk.wq, bt.y1, bt.zq, dq);
            dy1 = add(dy1, linear_backward(blk.wk, gblk.wk, bt.y1, bt.zk, dk));
            dy1 = add(dy1, linear_backward(blk.wv, gblk.wv, bt.y1, bt.zv, dv));

            Matrix dx_in = add(dx2, ln_backward(dy1, bt.ln1_xhat, bt.ln1_inv_std, blk.ln1_g,
                                                gblk.ln1_g, gblk.ln1_b));
            dx = std::move(dx_in);
        }

        for (int t = 0; t < len; ++t) {
            const double* dxr = dx.row_ptr(t);
            double* te = res.grads.tok_emb.row_ptr(row.ids[static_cast<std::size_t>(t)]);
            double* pe = res.grads.pos_emb.row_ptr(t);
            for (int j = 0; j < d; ++j) {
                te[j] += dxr[j];
                pe[j] += dxr[j];
            }
        }
    }

    res.taps = taps.assemble();
    return res;
}

std::vector<int> argmax_predictions(const BatchTape& tape, int batch, int seq) {
    std::vector<int> preds(static_cast<std::size_t>(batch) * seq, -1);
    for (int r = 0; r < batch && r < static_cast<int>(tape.rows.size()); ++r) {
        const SeqTape& row = tape.rows[static_cast<std::size_t>(r)];
        for (int t = 0; t < row.len; ++t) {
            const double* lg = row.logits.row_ptr(t);
            int best = 0;
            for (int j = 1; j < row.logits.cols(); ++j) {
                if (lg[j] > lg[best]) {
                    best = j;
                }
            }
            preds[static_cast<std::size_t>(r) * seq + t] = best;
        }
    }
    return preds;
}

} // namespace gradot

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gradot/data.hpp"
#include "gradot/matrix.hpp"

namespace gradot {

// Decoder-only transformer, pre-layernorm blocks, learned absolute
// positions, GELU MLP, untied output head. Blocks n1..n2 (inclusive) form
// the emulator region; everything else is adapter.
struct ModelConfig {
    int vocab_size = 0;
    int ctx_len = 0;
    int d_model = 0;
    int n_heads = 0;
    int d_int = 0;
    int n_layers = 0;
    int n1 = 0;
    int n2 = 0;
    std::uint64_t seed = 0;

    std::vector<std::string> violations() const;
    void validate() const; // throws ConfigError listing all violations
    bool operator==(const ModelConfig& o) const = default;
};

// A linear map stored either dense (w: d_o x d_i) or as a low-rank pair
// (lr_b: d_o x r, lr_a: r x d_i) evaluating as lr_b * (lr_a * x). The bias
// is separate and may be absent (output head).
struct LinearParam {
    Matrix w;
    Matrix lr_b;
    Matrix lr_a;
    Matrix bias; // d_o x 1 when present

    bool factored() const { return w.empty() && !lr_b.empty(); }
    int d_out() const { return factored() ? lr_b.rows() : w.rows(); }
    int d_in() const { return factored() ? lr_a.cols() : w.cols(); }
};

struct BlockParams {
    Matrix ln1_g, ln1_b; // d x 1
    LinearParam wq, wk, wv, wo;
    Matrix ln2_g, ln2_b;
    LinearParam w_up, w_down;
};

struct ParamSet {
    Matrix tok_emb; // vocab x d
    Matrix pos_emb; // ctx x d
    std::vector<BlockParams> blocks;
    Matrix final_ln_g, final_ln_b;
    LinearParam head; // vocab x d, no bias
};

using GradSet = ParamSet;

// Canonical tensor naming: "tok_emb", "pos_emb", "block<i>.ln1.g",
// "block<i>.attn.wq.w" (or ".w#b"/".w#a" when factored), "block<i>.attn.wq.b",
// ..., "block<i>.mlp.up.w", "final_ln.g", "head.w". Linear layer ids drop the
// trailing ".w": "block<i>.attn.wq", "block<i>.mlp.up", ...
void for_each_tensor(ParamSet& ps, const std::function<void(const std::string&, Matrix&)>& fn);
void for_each_tensor(const ParamSet& ps,
                     const std::function<void(const std::string&, const Matrix&)>& fn);

ParamSet init_params(const ModelConfig& cfg);
GradSet zero_like(const ParamSet& ps);
std::uint64_t params_signature(const ParamSet& ps);

// Role of each parameter in the offsite-tuning split.
enum class Role { adapter_bottom, emulator, adapter_top };

struct ModelPartition {
    int n_layers = 0;
    int n1 = 0;
    int n2 = 0;

    Role block_role(int block) const;
    Role tensor_role(const std::string& name) const;
    // Linear layer ids inside the emulator region, in canonical order.
    std::vector<std::string> emulator_linear_ids() const;
    bool is_emulator_tensor(const std::string& name) const {
        return tensor_role(name) == Role::emulator;
    }
};

ModelPartition partition(const ParamSet& params, const ModelConfig& cfg);

// Plug-in assembly: adapter tensors from `tuned`, emulator blocks verbatim
// from `original`. The middle of `tuned` (possibly compressed) is ignored.
ParamSet assemble_plugin(const ParamSet& original, const ParamSet& tuned,
                         const ModelConfig& cfg);

// --------------------------------------------------------------------------
// Forward / backward

struct SeqBlockTape {
    Matrix x_in;
    Matrix ln1_xhat;
    std::vector<double> ln1_inv_std;
    Matrix y1;
    Matrix q, k, v;
    Matrix zq, zk, zv, zo; // low-rank intermediates, empty for dense linears
    std::vector<Matrix> attn_probs; // per head, len x len, causal
    Matrix ctx;
    Matrix x2;
    Matrix ln2_xhat;
    std::vector<double> ln2_inv_std;
    Matrix y2;
    Matrix h_pre;
    Matrix h_act;
};

struct SeqTape {
    int len = 0;
    std::vector<int> ids;
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
    Matrix x0;
    std::vector<SeqBlockTape> blocks;
    Matrix lnf_xhat;
    std::vector<double> lnf_inv_std;
    Matrix yf;
    Matrix logits;
    double ce_sum = 0.0;
    int n_masked = 0;
};

// Cached activations sufficient for exact backprop, plus per-linear taps.
struct BatchTape {
    std::vector<SeqTape> rows;
    double loss = 0.0;
    int n_masked = 0;
    std::uint64_t params_sig = 0;
};

struct ForwardResult {
    double loss = 0.0;
    BatchTape tape;
};

ForwardResult forward(const ParamSet& params, const ModelConfig& cfg, const TokenBatch& batch);

// Per-linear activation taps: one row per real token, batch order. `a` is
// the layer input, `g` the gradient of the loss w.r.t. the layer output
// (equal to the bias gradient contribution of that token).
struct LinearTap {
    Matrix a;
    Matrix g;
};

struct BackwardResult {
    GradSet grads;
    std::map<std::string, LinearTap> taps; // keyed by linear layer id
};

BackwardResult backward(const ParamSet& params, const ModelConfig& cfg, const BatchTape& tape);

// Greedy per-position argmax over the tape logits, batch-shaped like the
// TokenBatch that produced it (pad positions get -1).
std::vector<int> argmax_predictions(const BatchTape& tape, int batch, int seq);

} // namespace gradot

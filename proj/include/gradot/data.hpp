#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace gradot {

// Character-level vocabulary. Ids are dense and stable: the i-th char of
// the charset string gets id i.
struct Vocab {
    std::string charset;
    std::map<char, int> char_to_id;

    static Vocab from_charset(const std::string& chars);
    // Canonical charset shared by every synthetic task, so pretrain,
    // downstream and support data agree on embeddings:
    //   'a'..'h' copy symbols, '|' delimiter, '0'..'9', '+', '='.
    static Vocab synthetic();

    int size() const { return static_cast<int>(charset.size()); }
    int id(char c) const;
    char ch(int id) const;
};

enum class SplitTag { train, test, support };
enum class EvalMode { token_top1, span_exact };

// One sequence of token ids. Positions j >= answer_start are the answer
// span: the loss mask covers exactly the predictions of those tokens.
struct Sample {
    std::vector<int> ids;
    int answer_start = 1;
};

struct TokenDataset {
    std::string name;
    std::string kind;
    SplitTag split = SplitTag::train;
    EvalMode eval_mode = EvalMode::token_top1;
    Vocab vocab;
    int ctx_len = 0;
    std::uint64_t seed = 0;
    std::vector<Sample> samples;

    int size() const { return static_cast<int>(samples.size()); }
    std::uint64_t content_hash() const;
    std::set<std::uint64_t> sequence_hashes() const;
    // Serialized provenance manifest (JSON text, stable key order).
    std::string manifest() const;
};

// Model-ready batch. Rows beyond the real samples (short final batch) have
// seq_len 0 and a fully zero mask. targets are inputs shifted by one.
struct TokenBatch {
    int batch = 0;
    int seq = 0;
    std::vector<int> input;
    std::vector<int> target;
    std::vector<std::uint8_t> mask;
    std::vector<int> seq_len;

    int at(int b, int t) const { return input[static_cast<std::size_t>(b) * seq + t]; }
    int n_masked() const;
};

enum class SynthKind { copy, modular_add };
SynthKind synth_kind_from_string(const std::string& s);
std::string to_string(SynthKind k);

// Text corpus: char vocab from the file, non-overlapping ctx_len+1 chunks,
// deterministic split by seed. split_fracs must sum to 1.
struct TextSplits {
    TokenDataset train;
    TokenDataset test;
};
TextSplits load_text(const std::string& path, int ctx_len,
                     std::pair<double, double> split_fracs, std::uint64_t seed);

// One synthetic dataset with the downstream ("short") task profile.
// Samples are distinct within the set.
TokenDataset synth_task(SynthKind kind, int size, int ctx_len, std::uint64_t seed);

// Pretraining corpus: the same task family drawn from the long end of the
// feasible range, so downstream fine-tuning has a real distribution shift.
TokenDataset synth_pretrain(SynthKind kind, int size, int ctx_len, std::uint64_t seed);

// Downstream train/test pair, disjoint by construction.
struct SynthSplits {
    TokenDataset train;
    TokenDataset test;
};
SynthSplits synth_splits(SynthKind kind, int train_size, int test_size, int ctx_len,
                         std::uint64_t seed);

// Support mixture: copy uses a long-prefix profile disjoint from the
// downstream profile; exclude lists sequence hashes the support set must
// avoid (downstream train/test). Even mixture across kinds.
TokenDataset make_support(const std::vector<SynthKind>& kinds, int total, int ctx_len,
                          std::uint64_t seed,
                          const std::set<std::uint64_t>& exclude = {});

// One epoch of batches: seeded permutation, every sample exactly once,
// fixed batch_size rows per batch.
std::vector<TokenBatch> batches(const TokenDataset& ds, int batch_size, std::uint64_t seed);

// Single batch holding the given samples verbatim (no shuffle, no row padding).
TokenBatch batch_from_samples(const std::vector<Sample>& samples);

struct AccuracyCounts {
    long exact_ok = 0;
    long exact_total = 0;
    long token_ok = 0;
    long token_total = 0;

    double exact_match() const { return exact_total ? static_cast<double>(exact_ok) / exact_total : 0.0; }
    double token_top1() const { return token_total ? static_cast<double>(token_ok) / token_total : 0.0; }
};

// Scores predictions (argmax ids, batch-shaped) against the batch mask.
void accumulate_accuracy(const TokenBatch& batch, const std::vector<int>& pred_ids,
                         AccuracyCounts& counts);

} // namespace gradot

#include "gradot/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "gradot/errors.hpp"
#include "gradot/rng.hpp"

namespace gradot {

namespace {

constexpr const char* kSynthCharset = "abcdefgh|0123456789+=";
constexpr int kCopySymbols = 8;

std::uint64_t sample_hash(const Sample& s) {
    std::uint64_t h = fnv1a64(s.ids.data(), s.ids.size() * sizeof(int));
    return fnv1a64(&s.answer_start, sizeof(int), h);
}

struct CopyProfile {
    int p_lo;
    int p_hi;
};

enum class CopyRegime { downstream, support, pretraining };

// Downstream copy samples use short prefixes and pretraining uses the long
// end of the range, so fine-tuning faces a real shift. Support spans the
// full range so its gradients cover the downstream regime; sequence
// disjointness comes from the caller's exclusion hashes.
CopyProfile copy_profile(int ctx_len, CopyRegime regime) {
    const int p_max = ctx_len / 2; // prompt + '|' + answer is 2p+1 tokens
    if (p_max < 4) {
        throw ConfigError("copy task needs ctx_len >= 8, got " + std::to_string(ctx_len));
    }
    switch (regime) {
        case CopyRegime::support: return {2, p_max};
        case CopyRegime::pretraining: return {p_max - 2, p_max};
        case CopyRegime::downstream: break;
    }
    return {2, p_max - 2};
}

Sample gen_copy(Rng& rng, const Vocab& vocab, const CopyProfile& prof) {
    const int p = prof.p_lo + static_cast<int>(rng.next_below(
                                  static_cast<std::uint64_t>(prof.p_hi - prof.p_lo + 1)));
    Sample s;
    s.ids.reserve(static_cast<std::size_t>(2 * p + 1));
    for (int i = 0; i < p; ++i) {
        s.ids.push_back(static_cast<int>(rng.next_below(kCopySymbols)));
    }
    s.ids.push_back(vocab.id('|'));
    for (int i = 0; i < p; ++i) {
        s.ids.push_back(s.ids[static_cast<std::size_t>(i)]);
    }
    s.answer_start = p + 1;
    return s;
}

Sample gen_modular_add(const Vocab& vocab, int a, int b) {
    Sample s;
    s.ids = {vocab.id(static_cast<char>('0' + a)), vocab.id('+'),
             vocab.id(static_cast<char>('0' + b)), vocab.id('='),
             vocab.id(static_cast<char>('0' + (a + b) % 10))};
    s.answer_start = 4;
    return s;
}

Sample gen_modular_add_random(Rng& rng, const Vocab& vocab) {
    const int a = static_cast<int>(rng.next_below(10));
    const int b = static_cast<int>(rng.next_below(10));
    return gen_modular_add(vocab, a, b);
}

void check_fits(const Sample& s, int ctx_len, const std::string& kind) {
    if (static_cast<int>(s.ids.size()) > ctx_len + 1) {
        throw ConfigError(kind + " sample of length " + std::to_string(s.ids.size()) +
                          " does not fit ctx_len " + std::to_string(ctx_len));
    }
}

} // namespace

Vocab Vocab::from_charset(const std::string& chars) {
    Vocab v;
    v.charset = chars;
    for (int i = 0; i < static_cast<int>(chars.size()); ++i) {
        if (!v.char_to_id.emplace(chars[static_cast<std::size_t>(i)], i).second) {
            throw DataError("duplicate character in charset");
        }
    }
    return v;
}

Vocab Vocab::synthetic() {
    return from_charset(kSynthCharset);
}

int Vocab::id(char c) const {
    auto it = char_to_id.find(c);
    if (it == char_to_id.end()) {
        throw DataError(std::string("character '") + c + "' not in vocabulary");
    }
    return it->second;
}

char Vocab::ch(int id) const {
    if (id < 0 || id >= size()) {
        throw DataError("token id " + std::to_string(id) + " out of vocabulary range");
    }
    return charset[static_cast<std::size_t>(id)];
}

std::uint64_t TokenDataset::content_hash() const {
    std::uint64_t h = fnv1a64(vocab.charset.data(), vocab.charset.size());
    h = fnv1a64(kind.data(), kind.size(), h);
    for (const Sample& s : samples) {
        const std::uint64_t sh = sample_hash(s);
        h = fnv1a64(&sh, sizeof(sh), h);
    }
    return h;
}

std::set<std::uint64_t> TokenDataset::sequence_hashes() const {
    std::set<std::uint64_t> out;
    for (const Sample& s : samples) {
        out.insert(fnv1a64(s.ids.data(), s.ids.size() * sizeof(int)));
    }
    return out;
}

std::string TokenDataset::manifest() const {
    nlohmann::json j;
    j["name"] = name;
    j["kind"] = kind;
    j["split"] = (split == SplitTag::train ? "train" : split == SplitTag::test ? "test" : "support");
    j["eval_mode"] = (eval_mode == EvalMode::span_exact ? "span_exact" : "token_top1");
    j["charset"] = vocab.charset;
    j["ctx_len"] = ctx_len;
    j["seed"] = seed;
    j["count"] = samples.size();
    std::ostringstream hex;
    hex << std::hex << content_hash();
    j["content_hash"] = hex.str();
    return j.dump();
}

int TokenBatch::n_masked() const {
    int n = 0;
    for (std::uint8_t m : mask) {
        n += m;
    }
    return n;
}

SynthKind synth_kind_from_string(const std::string& s) {
    if (s == "copy") {
        return SynthKind::copy;
    }
    if (s == "modular_add") {
        return SynthKind::modular_add;
    }
    throw ConfigError("unknown synthetic task kind '" + s + "'");
}

std::string to_string(SynthKind k) {
    return k == SynthKind::copy ? "copy" : "modular_add";
}

TextSplits load_text(const std::string& path, int ctx_len,
                     std::pair<double, double> split_fracs, std::uint64_t seed) {
    if (ctx_len < 1) {
        throw ConfigError("ctx_len must be >= 1");
    }
    if (std::fabs(split_fracs.first + split_fracs.second - 1.0) > 1e-9 ||
        split_fracs.first < 0.0 || split_fracs.second < 0.0) {
        throw ConfigError("split_fracs must be non-negative and sum to 1");
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open text file: " + path);
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.empty()) {
        throw DataError("text file is empty: " + path);
    }

    std::set<char> distinct(text.begin(), text.end());
    if (distinct.size() > 255) {
        throw DataError("vocab overflow: more than 255 distinct characters in " + path);
    }
    Vocab vocab = Vocab::from_charset(std::string(distinct.begin(), distinct.end()));

    const int chunk = ctx_len + 1;
    std::vector<Sample> all;
    for (std::size_t off = 0; off + static_cast<std::size_t>(chunk) <= text.size();
         off += static_cast<std::size_t>(chunk)) {
        Sample s;
        s.answer_start = 1;
        s.ids.reserve(static_cast<std::size_t>(chunk));
        for (int i = 0; i < chunk; ++i) {
            s.ids.push_back(vocab.id(text[off + static_cast<std::size_t>(i)]));
        }
        all.push_back(std::move(s));
    }
    if (all.empty()) {
        throw DataError("text file shorter than one ctx_len+1 chunk: " + path);
    }

    std::vector<int> order(all.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.next_below(i)]);
    }
    const auto n_train = static_cast<std::size_t>(
        std::llround(split_fracs.first * static_cast<double>(all.size())));

    TextSplits out;
    for (TokenDataset* ds : {&out.train, &out.test}) {
        ds->kind = "text:" + path;
        ds->eval_mode = EvalMode::token_top1;
        ds->vocab = vocab;
        ds->ctx_len = ctx_len;
        ds->seed = seed;
    }
    out.train.name = "text-train";
    out.train.split = SplitTag::train;
    out.test.name = "text-test";
    out.test.split = SplitTag::test;
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& dst = (i < n_train) ? out.train : out.test;
        dst.samples.push_back(all[static_cast<std::size_t>(order[i])]);
    }
    return out;
}

namespace {

TokenDataset synth_base(SynthKind kind, int ctx_len, std::uint64_t seed) {
    TokenDataset ds;
    ds.kind = to_string(kind);
    ds.eval_mode = EvalMode::span_exact;
    ds.vocab = Vocab::synthetic();
    ds.ctx_len = ctx_len;
    ds.seed = seed;
    return ds;
}

// Distinct samples from the downstream profile; throws if the space cannot
// supply `size` distinct sequences.
std::vector<Sample> gen_distinct(SynthKind kind, int size, int ctx_len, Rng& rng,
                                 const std::set<std::uint64_t>& exclude,
                                 CopyRegime profile = CopyRegime::downstream) {
    const Vocab vocab = Vocab::synthetic();
    std::vector<Sample> out;
    std::set<std::uint64_t> seen = exclude;
    long attempts = 0;
    const long cap = 1000L * size + 100000L;
    while (static_cast<int>(out.size()) < size) {
        if (++attempts > cap) {
            throw DataError("could not generate " + std::to_string(size) +
                            " distinct " + to_string(kind) + " samples");
        }
        Sample s = (kind == SynthKind::copy)
                       ? gen_copy(rng, vocab, copy_profile(ctx_len, profile))
                       : gen_modular_add_random(rng, vocab);
        check_fits(s, ctx_len, to_string(kind));
        const std::uint64_t h = fnv1a64(s.ids.data(), s.ids.size() * sizeof(int));
        if (seen.insert(h).second) {
            out.push_back(std::move(s));
        }
    }
    return out;
}

} // namespace

TokenDataset synth_task(SynthKind kind, int size, int ctx_len, std::uint64_t seed) {
    if (size <= 0) {
        throw ConfigError("synth_task size must be positive");
    }
    TokenDataset ds = synth_base(kind, ctx_len, seed);
    ds.name = to_string(kind);
    Rng rng(seed);
    ds.samples = gen_distinct(kind, size, ctx_len, rng, {});
    return ds;
}

TokenDataset synth_pretrain(SynthKind kind, int size, int ctx_len, std::uint64_t seed) {
    if (size <= 0) {
        throw ConfigError("synth_pretrain size must be positive");
    }
    TokenDataset ds = synth_base(kind, ctx_len, seed);
    ds.name = to_string(kind) + "-pretrain";
    Rng rng(seed ^ 0x907265747261696eULL);
    ds.samples = gen_distinct(kind, size, ctx_len, rng, {}, CopyRegime::pretraining);
    return ds;
}

SynthSplits synth_splits(SynthKind kind, int train_size, int test_size, int ctx_len,
                         std::uint64_t seed) {
    if (train_size <= 0 || test_size <= 0) {
        throw ConfigError("synth_splits sizes must be positive");
    }
    Rng rng(seed);
    std::vector<Sample> pool = gen_distinct(kind, train_size + test_size, ctx_len, rng, {});

    SynthSplits out;
    out.train = synth_base(kind, ctx_len, seed);
    out.train.name = to_string(kind) + "-train";
    out.train.split = SplitTag::train;
    out.test = synth_base(kind, ctx_len, seed);
    out.test.name = to_string(kind) + "-test";
    out.test.split = SplitTag::test;
    for (int i = 0; i < train_size; ++i) {
        out.train.samples.push_back(std::move(pool[static_cast<std::size_t>(i)]));
    }
    for (int i = 0; i < test_size; ++i) {
        out.test.samples.push_back(std::move(pool[static_cast<std::size_t>(train_size + i)]));
    }
    return out;
}

TokenDataset make_support(const std::vector<SynthKind>& kinds, int total, int ctx_len,
                          std::uint64_t seed, const std::set<std::uint64_t>& exclude) {
    if (total <= 0) {
        throw ConfigError("support total must be positive");
    }
    if (kinds.empty()) {
        throw ConfigError("support kind list must not be empty");
    }
    const Vocab vocab = Vocab::synthetic();
    TokenDataset ds;
    ds.eval_mode = EvalMode::span_exact;
    ds.vocab = vocab;
    ds.ctx_len = ctx_len;
    ds.seed = seed;
    ds.split = SplitTag::support;
    ds.name = "support";
    std::string kind_tag = "support(";
    for (std::size_t i = 0; i < kinds.size(); ++i) {
        kind_tag += (i ? "," : "") + to_string(kinds[i]);
    }
    ds.kind = kind_tag + ")";

    // Even mixture; earlier kinds absorb the remainder.
    const int n_kinds = static_cast<int>(kinds.size());
    Rng rng(seed ^ 0x5375707074ULL);
    for (int ki = 0; ki < n_kinds; ++ki) {
        int quota = total / n_kinds + (ki < total % n_kinds ? 1 : 0);
        long attempts = 0;
        while (quota > 0) {
            if (++attempts > 1000L * total + 100000L) {
                throw DataError("support generation exhausted attempts for kind " +
                                to_string(kinds[static_cast<std::size_t>(ki)]));
            }
            Sample s = (kinds[static_cast<std::size_t>(ki)] == SynthKind::copy)
                           ? gen_copy(rng, vocab, copy_profile(ctx_len, CopyRegime::support))
                           : gen_modular_add_random(rng, vocab);
            check_fits(s, ctx_len, "support");
            const std::uint64_t h = fnv1a64(s.ids.data(), s.ids.size() * sizeof(int));
            if (exclude.count(h)) {
                continue;
            }
            ds.samples.push_back(std::move(s));
            --quota;
        }
    }
    return ds;
}

std::vector<TokenBatch> batches(const TokenDataset& ds, int batch_size, std::uint64_t seed) {
    if (batch_size <= 0) {
        throw ConfigError("batch_size must be positive");
    }
    if (ds.samples.empty()) {
        throw DataError("cannot batch an empty dataset");
    }
    std::vector<int> order(ds.samples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.next_below(i)]);
    }

    std::vector<TokenBatch> out;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        int seq = 0;
        for (std::size_t i = start; i < end; ++i) {
            seq = std::max(seq, static_cast<int>(ds.samples[static_cast<std::size_t>(order[i])].ids.size()) - 1);
        }
        TokenBatch b;
        b.batch = batch_size;
        b.seq = seq;
        b.input.assign(static_cast<std::size_t>(batch_size) * seq, 0);
        b.target.assign(static_cast<std::size_t>(batch_size) * seq, 0);
        b.mask.assign(static_cast<std::size_t>(batch_size) * seq, 0);
        b.seq_len.assign(static_cast<std::size_t>(batch_size), 0);
        for (std::size_t i = start; i < end; ++i) {
            const Sample& s = ds.samples[static_cast<std::size_t>(order[i])];
            const int row = static_cast<int>(i - start);
            const int len = static_cast<int>(s.ids.size()) - 1;
            b.seq_len[static_cast<std::size_t>(row)] = len;
            for (int t = 0; t < len; ++t) {
                const std::size_t idx = static_cast<std::size_t>(row) * seq + t;
                b.input[idx] = s.ids[static_cast<std::size_t>(t)];
                b.target[idx] = s.ids[static_cast<std::size_t>(t) + 1];
                b.mask[idx] = (t + 1 >= s.answer_start) ? 1 : 0;
            }
        }
        out.push_back(std::move(b));
    }
    return out;
}

TokenBatch batch_from_samples(const std::vector<Sample>& samples) {
    if (samples.empty()) {
        throw DataError("batch_from_samples needs at least one sample");
    }
    TokenBatch b;
    b.batch = static_cast<int>(samples.size());
    int seq = 0;
    for (const Sample& s : samples) {
        seq = std::max(seq, static_cast<int>(s.ids.size()) - 1);
    }
    b.seq = seq;
    b.input.assign(static_cast<std::size_t>(b.batch) * seq, 0);
    b.target.assign(static_cast<std::size_t>(b.batch) * seq, 0);
    b.mask.assign(static_cast<std::size_t>(b.batch) * seq, 0);
    b.seq_len.assign(static_cast<std::size_t>(b.batch), 0);
    for (int row = 0; row < b.batch; ++row) {
        const Sample& s = samples[static_cast<std::size_t>(row)];
        const int len = static_cast<int>(s.ids.size()) - 1;
        b.seq_len[static_cast<std::size_t>(row)] = len;
        for (int t = 0; t < len; ++t) {
            const std::size_t idx = static_cast<std::size_t>(row) * seq + t;
            b.input[idx] = s.ids[static_cast<std::size_t>(t)];
            b.target[idx] = s.ids[static_cast<std::size_t>(t) + 1];
            b.mask[idx] = (t + 1 >= s.answer_start) ? 1 : 0;
        }
    }
    return b;
}

void accumulate_accuracy(const TokenBatch& batch, const std::vector<int>& pred_ids,
                         AccuracyCounts& counts) {
    if (pred_ids.size() != batch.input.size()) {
        throw ShapeError("prediction array does not match batch shape");
    }
    for (int row = 0; row < batch.batch; ++row) {
        if (batch.seq_len[static_cast<std::size_t>(row)] == 0) {
            continue;
        }
        bool all_ok = true;
        bool any = false;
        for (int t = 0; t < batch.seq; ++t) {
            const std::size_t idx = static_cast<std::size_t>(row) * batch.seq + t;
            if (!batch.mask[idx]) {
                continue;
            }
            any = true;
            const bool ok = pred_ids[idx] == batch.target[idx];
            counts.token_total += 1;
            counts.token_ok += ok ? 1 : 0;
            all_ok = all_ok && ok;
        }
        if (any) {
            counts.exact_total += 1;
            counts.exact_ok += all_ok ? 1 : 0;
        }
    }
}

} // namespace gradot

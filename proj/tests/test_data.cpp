#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>

#include "gradot/data.hpp"
#include "gradot/errors.hpp"

using namespace gradot;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    std::string path = "/tmp/gradot_data_" + name;
    std::ofstream out(path, std::ios::binary);
    out << content;
    return path;
}

} // namespace

TEST_CASE("load_text builds a char vocab and deterministic splits") {
    const std::string path = write_temp("abab.txt", "abab");
    TextSplits s = load_text(path, 2, {1.0, 0.0}, 1);
    CHECK(s.train.vocab.size() == 2);
    CHECK(s.train.vocab.id('a') == 0);
    CHECK(s.train.vocab.id('b') == 1);
    CHECK(s.train.samples.size() == 1); // one full 3-char chunk, tail dropped

    TextSplits again = load_text(path, 2, {1.0, 0.0}, 1);
    CHECK(s.train.content_hash() == again.train.content_hash());

    CHECK_THROWS_AS(load_text("/nonexistent/file.txt", 2, {0.9, 0.1}, 1), DataError);
    const std::string empty = write_temp("empty.txt", "");
    CHECK_THROWS_AS(load_text(empty, 2, {0.9, 0.1}, 1), DataError);
    CHECK_THROWS_AS(load_text(path, 2, {0.5, 0.4}, 1), ConfigError);
}

TEST_CASE("load_text split fractions give exact counts") {
    // 1000 sequences of ctx_len+1 = 4 chars each.
    std::string text;
    for (int i = 0; i < 1000; ++i) {
        text += "abcd";
    }
    const std::string path = write_temp("big.txt", text);
    TextSplits s = load_text(path, 3, {0.9, 0.1}, 7);
    CHECK(s.train.samples.size() == 900);
    CHECK(s.test.samples.size() == 100);
}

TEST_CASE("copy task: answer span repeats the prompt span") {
    TokenDataset ds = synth_task(SynthKind::copy, 50, 16, 3);
    for (const Sample& s : ds.samples) {
        const int p = s.answer_start - 1;
        REQUIRE(static_cast<int>(s.ids.size()) == 2 * p + 1);
        CHECK(s.ids[static_cast<std::size_t>(p)] == ds.vocab.id('|'));
        for (int i = 0; i < p; ++i) {
            CHECK(s.ids[static_cast<std::size_t>(i)] ==
                  s.ids[static_cast<std::size_t>(p + 1 + i)]);
        }
    }
    TokenDataset same = synth_task(SynthKind::copy, 50, 16, 3);
    CHECK(ds.content_hash() == same.content_hash());
}

TEST_CASE("modular_add encodes a+b= answers mod 10") {
    TokenDataset ds = synth_task(SynthKind::modular_add, 60, 16, 5);
    const Vocab& v = ds.vocab;
    for (const Sample& s : ds.samples) {
        REQUIRE(s.ids.size() == 5);
        const int a = v.ch(s.ids[0]) - '0';
        const int b = v.ch(s.ids[2]) - '0';
        CHECK(v.ch(s.ids[1]) == '+');
        CHECK(v.ch(s.ids[3]) == '=');
        CHECK(v.ch(s.ids[4]) == static_cast<char>('0' + (a + b) % 10));
        CHECK(s.answer_start == 4);
    }
    // "3+4=" -> "7"
    bool found = false;
    for (const Sample& s : ds.samples) {
        if (v.ch(s.ids[0]) == '3' && v.ch(s.ids[2]) == '4') {
            CHECK(v.ch(s.ids[4]) == '7');
            found = true;
        }
    }
    (void)found; // coverage of the specific pair depends on the seed
    CHECK_THROWS_AS(synth_task(SynthKind::modular_add, 101, 16, 5), DataError);
}

TEST_CASE("perfect predictions score accuracy 1.0") {
    TokenDataset ds = synth_task(SynthKind::copy, 20, 16, 11);
    TokenBatch b = batch_from_samples(ds.samples);
    AccuracyCounts counts;
    accumulate_accuracy(b, b.target, counts);
    CHECK(counts.exact_match() == 1.0);
    CHECK(counts.token_top1() == 1.0);

    // One wrong answer token breaks exact match for that sample only.
    std::vector<int> preds = b.target;
    int flipped = -1;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (b.mask[i]) {
            preds[i] = (preds[i] + 1) % ds.vocab.size();
            flipped = static_cast<int>(i);
            break;
        }
    }
    REQUIRE(flipped >= 0);
    AccuracyCounts c2;
    accumulate_accuracy(b, preds, c2);
    CHECK(c2.exact_ok == counts.exact_ok - 1);
    CHECK(c2.token_ok == counts.token_ok - 1);
}

TEST_CASE("support mixture is even, disjoint from downstream, reproducible") {
    SynthSplits splits = synth_splits(SynthKind::copy, 200, 50, 16, 21);
    auto train_h = splits.train.sequence_hashes();
    auto test_h = splits.test.sequence_hashes();
    for (std::uint64_t h : test_h) {
        CHECK(train_h.count(h) == 0);
    }

    std::set<std::uint64_t> exclude = train_h;
    exclude.insert(test_h.begin(), test_h.end());
    TokenDataset sup = make_support({SynthKind::copy, SynthKind::modular_add}, 1500, 16, 99, exclude);
    CHECK(sup.samples.size() == 1500);

    int n_copy = 0;
    for (const Sample& s : sup.samples) {
        if (s.ids.size() == 5 && sup.vocab.ch(s.ids[1]) == '+') {
            continue;
        }
        ++n_copy;
    }
    CHECK(n_copy == 750);

    auto sup_h = sup.sequence_hashes();
    for (std::uint64_t h : sup_h) {
        CHECK(train_h.count(h) == 0);
        CHECK(test_h.count(h) == 0);
    }

    TokenDataset sup2 = make_support({SynthKind::copy, SynthKind::modular_add}, 1500, 16, 99, exclude);
    CHECK(sup.content_hash() == sup2.content_hash());
}

TEST_CASE("batches cover each epoch exactly once with deterministic order") {
    TokenDataset ds = synth_task(SynthKind::copy, 23, 16, 31);
    auto eb = batches(ds, 5, 77);
    REQUIRE(eb.size() == 5);

    // Collect row hashes and compare against dataset hashes (multiset).
    std::multiset<std::string> seen;
    for (const TokenBatch& b : eb) {
        CHECK(b.batch == 5);
        for (int row = 0; row < b.batch; ++row) {
            const int len = b.seq_len[static_cast<std::size_t>(row)];
            if (len == 0) {
                continue;
            }
            std::string key;
            for (int t = 0; t < len; ++t) {
                key += std::to_string(b.at(row, t)) + ",";
            }
            key += std::to_string(b.target[static_cast<std::size_t>(row) * b.seq + len - 1]);
            seen.insert(key);
        }
    }
    CHECK(seen.size() == 23);

    std::multiset<std::string> expect;
    for (const Sample& s : ds.samples) {
        std::string key;
        for (std::size_t t = 0; t + 1 < s.ids.size(); ++t) {
            key += std::to_string(s.ids[t]) + ",";
        }
        key += std::to_string(s.ids.back());
        expect.insert(key);
    }
    CHECK(seen == expect);

    auto eb2 = batches(ds, 5, 77);
    REQUIRE(eb2.size() == eb.size());
    for (std::size_t i = 0; i < eb.size(); ++i) {
        CHECK(eb[i].input == eb2[i].input);
        CHECK(eb[i].mask == eb2[i].mask);
    }

    // Padding rows and positions are excluded by the mask.
    for (const TokenBatch& b : eb) {
        for (int row = 0; row < b.batch; ++row) {
            const int len = b.seq_len[static_cast<std::size_t>(row)];
            for (int t = len; t < b.seq; ++t) {
                CHECK(b.mask[static_cast<std::size_t>(row) * b.seq + t] == 0);
            }
        }
    }

    // batch_size > dataset size gives a single padded batch.
    auto one = batches(ds, 64, 9);
    REQUIRE(one.size() == 1);
    CHECK(one[0].batch == 64);
}

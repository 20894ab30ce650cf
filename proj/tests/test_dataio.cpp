// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>
#include <map>

#include "conceptguard/dataio.hpp"
#include "conceptguard/digest.hpp"
#include "conceptguard/error.hpp"
#include "support.hpp"

using namespace cg;
using testing_support::error_kind_of;
using testing_support::scratch_dir;

namespace {

EmbeddingRecord tiny_record(const std::string& id, int d = 4) {
    EmbeddingRecord r;
    r.sample_id = id;
    r.image_emb = Eigen::VectorXd::LinSpaced(d, 0.1, 0.4);
    r.text_emb = Eigen::VectorXd::LinSpaced(d, -0.3, 0.3);
    r.token_embs = Eigen::MatrixXd::Identity(3, d);
    r.token_strings = {"<bos>", "arson", "<eos>"};
    r.concept_id = 2;
    r.label = Label::Unsafe;
    r.scenario = Scenario::SI_UT;
    r.variant = Variant::Syn;
    r.split = Split::Val;
    return r;
}

std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

SynthConfig small_synth() {
    SynthConfig cfg;
    cfg.n_concepts = 4;
    cfg.samples_per_concept = 10;
    cfg.d = 16;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("single record survives a bank roundtrip") {
    const auto dir = scratch_dir("dataio-one");
    const std::string path = (dir / "one.cgeb").string();
    const auto m = write_embedding_bank({tiny_record("a-U")}, path, "vocab.json", 5);
    CHECK(m.total() == 1);
    CHECK(m.counts.size() == 1);
    CHECK(m.counts.at({Scenario::SI_UT, Variant::Syn, Split::Val}) == 1);

    const LoadedBank back = read_embedding_bank(path);
    REQUIRE(back.records.size() == 1);
    const auto& r = back.records[0];
    CHECK(r.sample_id == "a-U");
    CHECK(r.image_emb == tiny_record("a-U").image_emb.cast<float>().cast<double>());
    CHECK(r.token_strings == tiny_record("a-U").token_strings);
    CHECK(r.concept_id == 2);
    CHECK(r.label == Label::Unsafe);
    CHECK(back.manifest.d == 4);
    CHECK(back.manifest.vocab_ref == "vocab.json");
    REQUIRE(back.manifest.seed.has_value());
    CHECK(*back.manifest.seed == 5);
    CHECK(back.manifest.bank_sha256 == sha256_file(path));
}

TEST_CASE("writing an empty bank is rejected") {
    const auto dir = scratch_dir("dataio-empty");
    try {
        write_embedding_bank({}, (dir / "e.cgeb").string());
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Reject);
        CHECK(std::string(e.what()).find("REJECT_EMPTY") != std::string::npos);
    }
}

TEST_CASE("dimension mismatch names the sample") {
    auto a = tiny_record("ok-U");
    auto b = tiny_record("bad-U", 5);
    try {
        encode_embedding_bank({a, b});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Reject);
        CHECK(std::string(e.what()).find("bad-U") != std::string::npos);
    }
}

TEST_CASE("label and concept must agree") {
    auto r = tiny_record("x-U");
    r.concept_id = kNoConcept;
    CHECK(error_kind_of([&] { encode_embedding_bank({r}); }) == ErrorKind::Validation);
}

TEST_CASE("bank bytes are stable across writes and read-write cycles") {
    const auto ds = synth_dataset(small_synth());
    std::vector<EmbeddingRecord> recs(ds.records.begin(), ds.records.begin() + 400);
    const auto dir = scratch_dir("dataio-stable");
    const std::string p1 = (dir / "a.cgeb").string();
    const std::string p2 = (dir / "b.cgeb").string();
    const std::string p3 = (dir / "c.cgeb").string();
    write_embedding_bank(recs, p1);
    write_embedding_bank(recs, p2);
    CHECK(sha256_file(p1) == sha256_file(p2));

    const auto back = read_embedding_bank(p1);
    write_embedding_bank(back.records, p3);
    CHECK(slurp(p1) == slurp(p3));

    // A second read reproduces the first exactly.
    const auto again = read_embedding_bank(p3);
    REQUIRE(again.records.size() == back.records.size());
    for (std::size_t i = 0; i < back.records.size(); ++i) {
        CHECK(again.records[i].image_emb == back.records[i].image_emb);
        CHECK(again.records[i].token_embs == back.records[i].token_embs);
    }
}

TEST_CASE("bad magic is a format error") {
    auto bytes = encode_embedding_bank({tiny_record("a-U")});
    bytes[0] = 'X';
    CHECK(error_kind_of([&] { decode_embedding_bank(bytes); }) == ErrorKind::Format);
}

TEST_CASE("truncation is a corruption error") {
    const auto bytes = encode_embedding_bank({tiny_record("a-U"), tiny_record("b-U")});
    for (std::size_t cut : {std::size_t{1}, std::size_t{7}, bytes.size() - 17}) {
        std::vector<std::uint8_t> t(bytes.begin(), bytes.end() - static_cast<std::ptrdiff_t>(cut));
        CHECK(error_kind_of([&] { decode_embedding_bank(t); }) == ErrorKind::Corrupt);
    }
    const auto dir = scratch_dir("dataio-trunc");
    const std::string path = (dir / "t.cgeb").string();
    dump(path, std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1));
    CHECK(error_kind_of([&] { read_embedding_bank(path); }) == ErrorKind::Corrupt);
}

TEST_CASE("invariant violations on load name the record") {
    auto bytes = encode_embedding_bank({tiny_record("a-U"), tiny_record("b-U")});
    // Second record: header(16) + first record + u32 len + u16 id len + "b-U" -> label byte.
    const auto first = encode_embedding_bank({tiny_record("a-U")});
    const std::size_t label_at = first.size() + 4 + 2 + 3;
    REQUIRE(bytes[label_at] == 1);
    bytes[label_at] = 0;  // SAFE, but the concept id is still set
    try {
        decode_embedding_bank(bytes);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Validation);
        CHECK(std::string(e.what()).find("record 1") != std::string::npos);
    }
}

TEST_CASE("missing bank is an IO error") {
    CHECK(error_kind_of([] { read_embedding_bank("/nonexistent/x.cgeb"); }) == ErrorKind::Io);
}

TEST_CASE("sidecar path and pair stems") {
    CHECK(manifest_path_for("out/bank.cgeb") == "out/bank.manifest.json");
    CHECK(pair_stem("c001-i002-IT_U-EXP-U") == "c001-i002-IT_U-EXP");
    CHECK(pair_stem("c001-i002-IT_U-EXP-S") == "c001-i002-IT_U-EXP");
    CHECK(pair_stem("plain") == "plain");
}

TEST_CASE("enum names parse back") {
    for (auto s : kScenarios) {
        CHECK(parse_scenario(to_string(s)) == s);
    }
    for (auto v : kVariants) {
        CHECK(parse_variant(to_string(v)) == v);
    }
    for (auto s : kSplits) {
        CHECK(parse_split(to_string(s)) == s);
    }
    CHECK(error_kind_of([] { parse_split("HOLDOUT"); }) == ErrorKind::Validation);
}

TEST_CASE("synthetic generation is a pure function of its config") {
    SynthConfig cfg;
    cfg.n_concepts = 2;
    cfg.samples_per_concept = 8;
    cfg.d = 16;
    cfg.seed = 7;
    const auto a = encode_embedding_bank(synth_dataset(cfg).records);
    const auto b = encode_embedding_bank(synth_dataset(cfg).records);
    CHECK(a == b);
    cfg.seed = 8;
    CHECK(encode_embedding_bank(synth_dataset(cfg).records) != a);
}

TEST_CASE("synthetic config validation") {
    SynthConfig cfg = small_synth();
    cfg.samples_per_concept = 3;
    CHECK(error_kind_of([&] { synth_dataset(cfg); }) == ErrorKind::Reject);
    cfg = small_synth();
    cfg.n_concepts = 1;
    CHECK(error_kind_of([&] { synth_dataset(cfg); }) == ErrorKind::Reject);
    cfg = small_synth();
    cfg.noise_sigma = 0.0;
    CHECK(error_kind_of([&] { synth_dataset(cfg); }) == ErrorKind::Reject);
}

TEST_CASE("synthetic layout: cells, splits and pairing") {
    SynthConfig cfg;  // 20 concepts x 40
    const auto ds = synth_dataset(cfg);
    CHECK(ds.records.size() == 20u * 40u * 7u * 2u);
    CHECK(ds.manifest.total() == ds.records.size());
    // 8:1:1 per concept over instances
    CHECK(ds.manifest.count_split(Split::Train) == 20u * 32u * 14u);
    CHECK(ds.manifest.count_split(Split::Val) == 20u * 4u * 14u);
    CHECK(ds.manifest.count_split(Split::Test) == 20u * 4u * 14u);

    std::map<std::string, int> stems;
    for (const auto& r : ds.records) {
        if (r.scenario == Scenario::UI_ST) {
            CHECK(r.variant == Variant::Exp);
        }
        stems[pair_stem(r.sample_id)] += r.label == Label::Unsafe ? 1 : 10;
    }
    for (const auto& [stem, v] : stems) {
        CHECK_MESSAGE(v == 11, stem);
    }
}

TEST_CASE("synthetic unsafe text is nearest to its own anchor") {
    const auto ds = synth_dataset(SynthConfig{});
    const Eigen::MatrixXd& a = ds.concepts.matrix;
    int total = 0, hits = 0;
    for (const auto& r : ds.records) {
        if (r.label != Label::Unsafe || r.scenario == Scenario::UI_ST) {
            continue;
        }
        Eigen::Index best = 0;
        (a * r.text_emb).maxCoeff(&best);
        ++total;
        hits += best == r.concept_id ? 1 : 0;
    }
    CHECK(static_cast<double>(hits) / total >= 0.99);
}

TEST_CASE("synthetic safe counterparts are orthogonal to the paired anchor") {
    const auto ds = synth_dataset(SynthConfig{});
    std::map<std::string, int> concept_of;
    for (const auto& r : ds.records) {
        if (r.label == Label::Unsafe) {
            concept_of[pair_stem(r.sample_id)] = r.concept_id;
        }
    }
    double worst = 0.0;
    for (const auto& r : ds.records) {
        if (r.label != Label::Safe) {
            continue;
        }
        const Eigen::VectorXd anchor = ds.concepts.matrix.row(concept_of.at(pair_stem(r.sample_id))).transpose();
        worst = std::max({worst, std::abs(r.text_emb.dot(anchor)), std::abs(r.image_emb.dot(anchor))});
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("synthetic prompts carry one risk token between control tokens") {
    const auto ds = synth_dataset(small_synth());
    for (const auto& r : ds.records) {
        const auto mask = r.content_mask();
        REQUIRE(mask.size() == static_cast<std::size_t>(small_synth().tokens_per_prompt + 2));
        CHECK_FALSE(mask.front());
        CHECK_FALSE(mask.back());
        int risk = 0;
        for (const auto& s : r.token_strings) {
            risk += s.rfind("concept_", 0) == 0 ? 1 : 0;
        }
        const bool unsafe_text = r.label == Label::Unsafe && r.scenario != Scenario::UI_ST;
        CHECK(risk == (unsafe_text ? 1 : 0));
    }
}

// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>

#include "conceptguard/error.hpp"
#include "conceptguard/vocab.hpp"
#include "support.hpp"

using namespace cg;
using testing_support::error_kind_of;
using testing_support::scratch_dir;

namespace {

/// Encodes concept text i as the i-th basis vector scaled by (i + 2).
class OneHotEncoder final : public EncoderClient {
public:
    OneHotEncoder(std::vector<std::string> known, int d) : known_(std::move(known)), d_(d) {}

    std::vector<Eigen::VectorXd> encode_text(std::span<const std::string> texts) const override {
        std::vector<Eigen::VectorXd> out;
        for (const auto& t : texts) {
            const auto it = std::find(known_.begin(), known_.end(), t);
            if (it == known_.end()) {
                throw std::runtime_error("unknown text " + t);
            }
            const auto i = static_cast<Eigen::Index>(it - known_.begin());
            Eigen::VectorXd v = Eigen::VectorXd::Zero(d_);
            v(i) = static_cast<double>(i + 2);
            out.push_back(v);
        }
        return out;
    }
    TokenEncoding encode_tokens(const std::string&) const override { return {}; }
    int d() const override { return d_; }
    int d_tok() const override { return d_; }
    std::string tag() const override { return "onehot"; }

private:
    std::vector<std::string> known_;
    int d_;
};

}  // namespace

TEST_CASE("bundled taxonomy has four categories of fifty") {
    const auto v = load_taxonomy(bundled_taxonomy_path());
    CHECK(v.size() == 200);
    REQUIRE(v.categories.size() == 4);
    std::vector<int> per(4, 0);
    for (const auto& c : v.concepts) {
        ++per[static_cast<std::size_t>(c.category)];
    }
    CHECK(per == std::vector<int>{50, 50, 50, 50});
    for (int i = 0; i < v.size(); ++i) {
        CHECK(v.concepts[static_cast<std::size_t>(i)].id == i);
    }
}

TEST_CASE("taxonomy parsing keeps file order") {
    const auto v = parse_taxonomy(R"({"Violence": ["shooting"], "Illegal Activity": ["arson"]})");
    REQUIRE(v.size() == 2);
    CHECK(v.concepts[0].text == "shooting");
    CHECK(v.concepts[1].text == "arson");
    CHECK(v.category_of(1) == "Illegal Activity");
    CHECK(v.strings() == std::vector<std::string>{"shooting", "arson"});
    CHECK(error_kind_of([&] { v.category_of(2); }) == ErrorKind::Range);
}

TEST_CASE("duplicate concepts are rejected by name") {
    try {
        parse_taxonomy(R"({"A": ["shooting"], "B": ["shooting"]})");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Validation);
        CHECK(std::string(e.what()).find("shooting") != std::string::npos);
    }
}

TEST_CASE("malformed taxonomies") {
    CHECK(error_kind_of([] { parse_taxonomy(R"({"A": []})"); }) == ErrorKind::Validation);
    CHECK(error_kind_of([] { parse_taxonomy(R"({"A": [3]})"); }) == ErrorKind::Validation);
    CHECK(error_kind_of([] { parse_taxonomy(R"({})"); }) == ErrorKind::Validation);
    CHECK(error_kind_of([] { parse_taxonomy("{not json"); }) == ErrorKind::Format);
    CHECK(error_kind_of([] { load_taxonomy("/nonexistent/tax.json"); }) == ErrorKind::Io);
}

TEST_CASE("normalised one-hot embeddings give identity rows") {
    const auto v = parse_taxonomy(R"({"A": ["x", "y"], "B": ["z"]})");
    const OneHotEncoder enc(v.strings(), 5);
    const auto cm = embed_concepts(v, enc, true);
    REQUIRE(cm.size() == 3);
    REQUIRE(cm.dim() == 5);
    CHECK(cm.matrix == Eigen::MatrixXd::Identity(3, 5));
    CHECK(cm.names == v.strings());
    CHECK(cm.categories == std::vector<std::string>{"A", "A", "B"});
    CHECK(cm.normalized);

    const auto raw = embed_concepts(v, enc, false);
    CHECK(raw.matrix(2, 2) == 4.0);
}

TEST_CASE("encoder failures name the concept") {
    const auto v = parse_taxonomy(R"({"A": ["x", "y"]})");
    const OneHotEncoder enc({"x"}, 4);
    try {
        embed_concepts(v, enc, true);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Validation);
        CHECK(std::string(e.what()).find("concept 1") != std::string::npos);
    }
}

TEST_CASE("mock encoder is deterministic and unit-norm") {
    const auto v = load_taxonomy(bundled_taxonomy_path());
    const MockEncoder enc(32, 16, 9);
    const auto a = embed_concepts(v, enc, true);
    const auto b = embed_concepts(v, MockEncoder(32, 16, 9), true);
    CHECK(a.matrix == b.matrix);
    CHECK(a.encoder_tag == b.encoder_tag);
    for (int i = 0; i < a.size(); ++i) {
        CHECK(a.matrix.row(i).norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
    const auto c = embed_concepts(v, MockEncoder(32, 16, 10), true);
    CHECK(c.matrix != a.matrix);
    CHECK(error_kind_of([] { MockEncoder(0, 4, 1); }) == ErrorKind::Config);
}

TEST_CASE("mock token encoding marks control tokens") {
    const MockEncoder enc(8, 6, 1);
    const auto t = enc.encode_tokens("a person shooting");
    CHECK(t.strings == std::vector<std::string>{"<bos>", "a", "person", "shooting", "<eos>"});
    CHECK(t.content_mask == std::vector<bool>{false, true, true, true, false});
    CHECK(t.embeddings.rows() == 5);
    CHECK(t.embeddings.cols() == 6);
    // Same string, same row.
    const auto u = enc.encode_tokens("shooting");
    CHECK(u.embeddings.row(1) == t.embeddings.row(3));
}

TEST_CASE("concept matrix cache roundtrip") {
    const auto v = parse_taxonomy(R"({"A": ["x", "y"], "B": ["z"]})");
    const auto cm = embed_concepts(v, MockEncoder(7, 7, 2), true);
    const auto dir = scratch_dir("vocab-cache");
    const std::string path = (dir / "c.cgeb").string();
    write_concept_matrix(cm, path);
    const auto back = read_concept_matrix(path);
    CHECK(back.matrix == cm.matrix.cast<float>().cast<double>());
    CHECK(back.names == cm.names);
    CHECK(back.categories == cm.categories);
    CHECK(back.encoder_tag == cm.encoder_tag);
    CHECK(back.name_of(2) == "z");
    CHECK(back.name_of(9) == "concept#9");

    CHECK(error_kind_of([] { read_concept_matrix("/nonexistent/c.cgeb"); }) == ErrorKind::Io);
    CHECK(error_kind_of([&] { write_concept_matrix(ConceptMatrix{}, (dir / "e.cgeb").string()); }) ==
          ErrorKind::Reject);
}

TEST_CASE("file encoder looks strings up") {
    const auto dir = scratch_dir("vocab-file");
    const std::string path = (dir / "enc.json").string();
    std::ofstream(path) << R"({"d": 2, "d_tok": 3,
        "text": {"x": [1, 0], "y": [0, 2]},
        "tokens": {"<bos>": [0, 0, 1], "x": [1, 0, 0], "<eos>": [0, 1, 0]}})";
    const FileEncoder enc(path);
    CHECK(enc.d() == 2);
    CHECK(enc.d_tok() == 3);
    const auto v = parse_taxonomy(R"({"A": ["x", "y"]})");
    const auto cm = embed_concepts(v, enc, true);
    CHECK(cm.matrix == Eigen::MatrixXd::Identity(2, 2));

    const auto t = enc.encode_tokens("<bos> x <eos>");
    CHECK(t.content_mask == std::vector<bool>{false, true, false});
    CHECK(t.embeddings(1, 0) == 1.0);
    CHECK(error_kind_of([&] { enc.encode_tokens("q"); }) == ErrorKind::Validation);

    const auto w = parse_taxonomy(R"({"A": ["x", "missing"]})");
    CHECK(error_kind_of([&] { embed_concepts(w, enc, true); }) == ErrorKind::Validation);
}

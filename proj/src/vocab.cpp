// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include "conceptguard/vocab.hpp"

#include <filesystem>
#include <set>
#include <sstream>

#include <json.hpp>

#include "binio.hpp"
#include "conceptguard/dataio.hpp"
#include "conceptguard/error.hpp"
#include "conceptguard/rng.hpp"

namespace cg {

const std::string& ConceptVocab::category_of(int concept_id) const {
    if (concept_id < 0 || concept_id >= size()) {
        fail(ErrorKind::Range, "concept id " + std::to_string(concept_id) + " outside vocabulary");
    }
    return categories.at(static_cast<std::size_t>(concepts[concept_id].category));
}

std::vector<std::string> ConceptVocab::strings() const {
    std::vector<std::string> out;
    out.reserve(concepts.size());
    for (const auto& c : concepts) {
        out.push_back(c.text);
    }
    return out;
}

std::string ConceptMatrix::name_of(int concept_id) const {
    if (concept_id >= 0 && concept_id < static_cast<int>(names.size())) {
        return names[concept_id];
    }
    return "concept#" + std::to_string(concept_id);
}

bool is_control_token(const std::string& token) {
    return token.size() >= 2 && token.front() == '<' && token.back() == '>';
}

// --- taxonomy ---------------------------------------------------------------

ConceptVocab parse_taxonomy(const std::string& json_text) {
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("taxonomy is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.empty()) {
        fail(ErrorKind::Validation, "taxonomy must be a non-empty object of category -> concepts");
    }
    ConceptVocab vocab;
    std::set<std::string> seen;
    for (const auto& [category, list] : j.items()) {
        if (!list.is_array()) {
            fail(ErrorKind::Validation, "category '" + category + "' must map to a list of strings");
        }
        if (list.empty()) {
            fail(ErrorKind::Validation, "category '" + category + "' is empty");
        }
        const int cat_index = static_cast<int>(vocab.categories.size());
        vocab.categories.push_back(category);
        for (const auto& item : list) {
            if (!item.is_string()) {
                fail(ErrorKind::Validation, "category '" + category + "' holds a non-string concept");
            }
            auto text = item.get<std::string>();
            if (text.empty()) {
                fail(ErrorKind::Validation, "category '" + category + "' holds an empty concept");
            }
            if (!seen.insert(text).second) {
                fail(ErrorKind::Validation, "duplicate concept '" + text + "'");
            }
            vocab.concepts.push_back({vocab.size(), cat_index, std::move(text)});
        }
    }
    return vocab;
}

ConceptVocab load_taxonomy(const std::string& manifest_path) {
    return parse_taxonomy(binio::read_text_file(manifest_path));
}

std::string bundled_taxonomy_path() {
    return std::string(CG_DATA_DIR) + "/conceptrisk_taxonomy.json";
}

// --- encoders ---------------------------------------------------------------

namespace {

Eigen::VectorXd hashed_unit_vector(const std::string& s, std::uint64_t seed, int dim) {
    Rng rng(derive_seed(seed, s));
    Eigen::VectorXd v = rng.normal_vector(dim);
    return v / v.norm();
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> words;
    std::string w;
    while (in >> w) {
        words.push_back(w);
    }
    return words;
}

}  // namespace

MockEncoder::MockEncoder(int d, int d_tok, std::uint64_t seed) : d_(d), d_tok_(d_tok), seed_(seed) {
    if (d <= 0 || d_tok <= 0) {
        fail(ErrorKind::Config, "mock encoder dimensions must be positive");
    }
}

std::vector<Eigen::VectorXd> MockEncoder::encode_text(std::span<const std::string> texts) const {
    std::vector<Eigen::VectorXd> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
        out.push_back(hashed_unit_vector("text:" + t, seed_, d_));
    }
    return out;
}

TokenEncoding MockEncoder::encode_tokens(const std::string& text) const {
    TokenEncoding enc;
    enc.strings.push_back("<bos>");
    for (auto& w : split_words(text)) {
        enc.strings.push_back(std::move(w));
    }
    enc.strings.push_back("<eos>");
    enc.embeddings.resize(static_cast<Eigen::Index>(enc.strings.size()), d_tok_);
    for (std::size_t i = 0; i < enc.strings.size(); ++i) {
        enc.embeddings.row(static_cast<Eigen::Index>(i)) =
            hashed_unit_vector("token:" + enc.strings[i], seed_, d_tok_).transpose();
        enc.content_mask.push_back(!is_control_token(enc.strings[i]));
    }
    return enc;
}

std::string MockEncoder::tag() const {
    return "mock:d=" + std::to_string(d_) + ":d_tok=" + std::to_string(d_tok_) + ":seed=" + std::to_string(seed_);
}

FileEncoder::FileEncoder(const std::string& path) {
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(binio::read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, "encoder table '" + path + "': " + e.what());
    }
    d_ = j.value("d", 0);
    d_tok_ = j.value("d_tok", d_);
    if (d_ <= 0 || d_tok_ <= 0) {
        fail(ErrorKind::Config, "encoder table '" + path + "' must declare positive d and d_tok");
    }
    tag_ = "file:" + std::filesystem::path(path).filename().string();
    auto load = [&](const char* key, int dim, auto& table) {
        if (!j.contains(key)) {
            return;
        }
        for (const auto& [s, arr] : j[key].items()) {
            if (!arr.is_array() || static_cast<int>(arr.size()) != dim) {
                fail(ErrorKind::Shape, "encoder table entry '" + s + "' must have " + std::to_string(dim) + " values");
            }
            Eigen::VectorXd v(dim);
            for (int i = 0; i < dim; ++i) {
                v(i) = arr[static_cast<std::size_t>(i)].template get<double>();
            }
            table.emplace_back(s, std::move(v));
        }
    };
    load("text", d_, text_);
    load("tokens", d_tok_, tokens_);
}

namespace {

const Eigen::VectorXd& lookup(const std::vector<std::pair<std::string, Eigen::VectorXd>>& table,
                              const std::string& key, const char* what) {
    for (const auto& [s, v] : table) {
        if (s == key) {
            return v;
        }
    }
    fail(ErrorKind::Validation, std::string("encoder table has no ") + what + " entry for '" + key + "'");
}

}  // namespace

std::vector<Eigen::VectorXd> FileEncoder::encode_text(std::span<const std::string> texts) const {
    std::vector<Eigen::VectorXd> out;
    for (const auto& t : texts) {
        out.push_back(lookup(text_, t, "text"));
    }
    return out;
}

TokenEncoding FileEncoder::encode_tokens(const std::string& text) const {
    TokenEncoding enc;
    enc.strings = split_words(text);
    enc.embeddings.resize(static_cast<Eigen::Index>(enc.strings.size()), d_tok_);
    for (std::size_t i = 0; i < enc.strings.size(); ++i) {
        enc.embeddings.row(static_cast<Eigen::Index>(i)) = lookup(tokens_, enc.strings[i], "token").transpose();
        enc.content_mask.push_back(!is_control_token(enc.strings[i]));
    }
    return enc;
}

// --- concept matrix ---------------------------------------------------------

ConceptMatrix embed_concepts(const ConceptVocab& vocab, const EncoderClient& enc, bool normalize) {
    if (enc.d() <= 0) {
        fail(ErrorKind::Config, "encoder dimension must be positive");
    }
    if (vocab.size() == 0) {
        fail(ErrorKind::Config, "vocabulary is empty");
    }
    ConceptMatrix cm;
    cm.matrix.resize(vocab.size(), enc.d());
    cm.encoder_tag = enc.tag();
    cm.normalized = normalize;
    for (const auto& c : vocab.concepts) {
        Eigen::VectorXd v;
        try {
            const std::string text = c.text;
            auto rows = enc.encode_text(std::span<const std::string>(&text, 1));
            if (rows.size() != 1) {
                fail(ErrorKind::Shape, "encoder returned " + std::to_string(rows.size()) + " vectors");
            }
            v = std::move(rows.front());
        } catch (const std::exception& e) {
            fail(ErrorKind::Validation, "encoding concept " + std::to_string(c.id) + " ('" + c.text + "') failed: " + e.what());
        }
        if (v.size() != enc.d() || !v.allFinite()) {
            fail(ErrorKind::Shape, "concept " + std::to_string(c.id) + " encoded to an invalid vector");
        }
        if (normalize) {
            const double n = v.norm();
            if (n == 0.0) {
                fail(ErrorKind::Degenerate, "concept " + std::to_string(c.id) + " encoded to the zero vector");
            }
            v /= n;
        }
        cm.matrix.row(c.id) = v.transpose();
        cm.names.push_back(c.text);
        cm.categories.push_back(vocab.categories[static_cast<std::size_t>(c.category)]);
    }
    return cm;
}

void write_concept_matrix(const ConceptMatrix& cm, const std::string& path) {
    if (cm.size() == 0 || cm.dim() == 0) {
        fail(ErrorKind::Reject, "REJECT_EMPTY: concept matrix is empty");
    }
    binio::Writer w;
    w.bytes("CGEB");
    w.u16(kBankVersion);
    w.u16(kBankFlagMatrix);
    w.u32(static_cast<std::uint32_t>(cm.dim()));
    w.u32(0);
    w.u32(static_cast<std::uint32_t>(cm.size()));
    for (int r = 0; r < cm.size(); ++r) {
        for (int c = 0; c < cm.dim(); ++c) {
            w.f32(static_cast<float>(cm.matrix(r, c)));
        }
    }
    binio::write_file(path, w.data());

    nlohmann::ordered_json j;
    j["format"] = "cgeb-matrix";
    j["version"] = kBankVersion;
    j["rows"] = cm.size();
    j["d"] = cm.dim();
    j["encoder_tag"] = cm.encoder_tag;
    j["normalized"] = cm.normalized;
    j["names"] = cm.names;
    j["categories"] = cm.categories;
    binio::write_text_file(manifest_path_for(path), j.dump(2) + "\n");
}

ConceptMatrix read_concept_matrix(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        fail(ErrorKind::Io, "concept matrix '" + path + "' does not exist");
    }
    const auto bytes = binio::read_file(path);
    binio::Reader r(bytes.data(), bytes.size());
    if (bytes.size() < 4 || r.bytes(4) != "CGEB") {
        fail(ErrorKind::Format, "bad magic in concept matrix '" + path + "'");
    }
    if (r.u16() != kBankVersion) {
        fail(ErrorKind::Format, "unsupported concept matrix version");
    }
    if (!(r.u16() & kBankFlagMatrix)) {
        fail(ErrorKind::Format, "'" + path + "' is an embedding bank, not a concept matrix");
    }
    const int d = static_cast<int>(r.u32());
    r.u32();
    const int rows = static_cast<int>(r.u32());
    ConceptMatrix cm;
    cm.matrix.resize(rows, d);
    for (int i = 0; i < rows; ++i) {
        for (int c = 0; c < d; ++c) {
            cm.matrix(i, c) = r.f32();
        }
    }
    if (!r.done()) {
        fail(ErrorKind::Corrupt, "trailing bytes in concept matrix '" + path + "'");
    }
    const auto sidecar = manifest_path_for(path);
    if (std::filesystem::exists(sidecar)) {
        const auto j = nlohmann::json::parse(binio::read_text_file(sidecar));
        cm.encoder_tag = j.value("encoder_tag", std::string{});
        cm.normalized = j.value("normalized", false);
        cm.names = j.value("names", std::vector<std::string>{});
        cm.categories = j.value("categories", std::vector<std::string>{});
        if (!cm.names.empty() && static_cast<int>(cm.names.size()) != rows) {
            fail(ErrorKind::Validation, "concept matrix sidecar lists " + std::to_string(cm.names.size()) +
                                            " names for " + std::to_string(rows) + " rows");
        }
    }
    return cm;
}

}  // namespace cg

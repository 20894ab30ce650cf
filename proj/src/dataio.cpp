// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include "conceptguard/dataio.hpp"

#include <cmath>
#include <filesystem>

#include <json.hpp>

#include "binio.hpp"
#include "conceptguard/digest.hpp"
#include "conceptguard/error.hpp"

namespace cg {

namespace {

constexpr char kMagic[4] = {'C', 'G', 'E', 'B'};

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const std::array<E, N>& all, const char* what) {
    for (E e : all) {
        if (s == to_string(e)) {
            return e;
        }
    }
    fail(ErrorKind::Validation, std::string("unknown ") + what + " '" + s + "'");
}

void put_vector_f32(binio::Writer& w, const Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        w.f32(static_cast<float>(v(i)));
    }
}

Eigen::VectorXd get_vector_f32(binio::Reader& r, int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) {
        v(i) = static_cast<double>(r.f32());
    }
    return v;
}

}  // namespace

const char* to_string(Label v) { return v == Label::Safe ? "SAFE" : "UNSAFE"; }

const char* to_string(Scenario v) {
    switch (v) {
    case Scenario::IT_U: return "IT_U";
    case Scenario::SI_UT: return "SI_UT";
    case Scenario::UI_ST: return "UI_ST";
    }
    return "?";
}

const char* to_string(Variant v) {
    switch (v) {
    case Variant::Exp: return "EXP";
    case Variant::Syn: return "SYN";
    case Variant::Adv: return "ADV";
    }
    return "?";
}

const char* to_string(Split v) {
    switch (v) {
    case Split::Train: return "TRAIN";
    case Split::Val: return "VAL";
    case Split::Test: return "TEST";
    }
    return "?";
}

Label parse_label(const std::string& s) {
    return parse_enum(s, std::array{Label::Safe, Label::Unsafe}, "label");
}
Scenario parse_scenario(const std::string& s) { return parse_enum(s, kScenarios, "scenario"); }
Variant parse_variant(const std::string& s) { return parse_enum(s, kVariants, "variant"); }
Split parse_split(const std::string& s) { return parse_enum(s, kSplits, "split"); }

std::vector<bool> EmbeddingRecord::content_mask() const {
    std::vector<bool> mask(token_strings.size());
    for (std::size_t i = 0; i < token_strings.size(); ++i) {
        mask[i] = !is_control_token(token_strings[i]);
    }
    return mask;
}

std::size_t DatasetManifest::total() const {
    std::size_t n = 0;
    for (const auto& [key, c] : counts) {
        n += c;
    }
    return n;
}

std::size_t DatasetManifest::count_split(Split s) const {
    std::size_t n = 0;
    for (const auto& [key, c] : counts) {
        if (std::get<2>(key) == s) {
            n += c;
        }
    }
    return n;
}

std::string manifest_path_for(const std::string& bank_path) {
    std::filesystem::path p(bank_path);
    p.replace_extension(".manifest.json");
    return p.string();
}

void validate_record(const EmbeddingRecord& r, int d, int d_tok, const std::string& where) {
    auto bad = [&](const std::string& what) {
        fail(ErrorKind::Validation, where + " (sample '" + r.sample_id + "'): " + what);
    };
    if (d <= 0) {
        bad("embedding dimension must be positive");
    }
    if (r.image_emb.size() != d || r.text_emb.size() != d) {
        bad("image/text embedding length differs from bank dimension " + std::to_string(d));
    }
    if (r.token_embs.rows() < 1) {
        bad("prompt has no tokens");
    }
    if (r.token_embs.rows() > 0xFFFF) {
        bad("more than 65535 tokens");
    }
    if (r.token_embs.cols() != d_tok) {
        bad("token embedding length differs from bank token dimension " + std::to_string(d_tok));
    }
    if (static_cast<Eigen::Index>(r.token_strings.size()) != r.token_embs.rows()) {
        bad("token string count does not match token embedding count");
    }
    if ((r.label == Label::Unsafe) != (r.concept_id != kNoConcept)) {
        bad("label UNSAFE must coincide with a concept id");
    }
    if (r.concept_id < kNoConcept) {
        bad("negative concept id");
    }
    if (!r.image_emb.allFinite() || !r.text_emb.allFinite() || !r.token_embs.allFinite()) {
        bad("non-finite embedding value");
    }
}

std::vector<std::uint8_t> encode_embedding_bank(const std::vector<EmbeddingRecord>& records) {
    if (records.empty()) {
        fail(ErrorKind::Reject, "REJECT_EMPTY: cannot write a bank with no records");
    }
    const int d = static_cast<int>(records.front().image_emb.size());
    const int d_tok = static_cast<int>(records.front().token_embs.cols());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.image_emb.size() != d || r.text_emb.size() != d || r.token_embs.cols() != d_tok) {
            fail(ErrorKind::Reject, "dimension mismatch in sample '" + r.sample_id + "'");
        }
        validate_record(r, d, d_tok, "record " + std::to_string(i));
    }

    binio::Writer w;
    w.bytes(std::string_view(kMagic, 4));
    w.u16(kBankVersion);
    w.u16(0);
    w.u32(static_cast<std::uint32_t>(d));
    w.u32(static_cast<std::uint32_t>(d_tok));

    for (const auto& r : records) {
        const std::size_t len_at = w.size();
        w.u32(0);
        const std::size_t start = w.size();
        w.str16(r.sample_id, "sample id");
        w.u8(static_cast<std::uint8_t>(r.label));
        w.u8(static_cast<std::uint8_t>(r.scenario));
        w.u8(static_cast<std::uint8_t>(r.variant));
        w.u8(static_cast<std::uint8_t>(r.split));
        w.i32(r.concept_id);
        put_vector_f32(w, r.image_emb);
        put_vector_f32(w, r.text_emb);
        w.u16(static_cast<std::uint16_t>(r.token_embs.rows()));
        for (const auto& s : r.token_strings) {
            w.str16(s, "token string");
        }
        for (Eigen::Index t = 0; t < r.token_embs.rows(); ++t) {
            put_vector_f32(w, r.token_embs.row(t).transpose());
        }
        w.patch_u32(len_at, static_cast<std::uint32_t>(w.size() - start));
    }
    return w.data();
}

std::vector<EmbeddingRecord> decode_embedding_bank(const std::vector<std::uint8_t>& bytes) {
    binio::Reader r(bytes.data(), bytes.size());
    if (bytes.size() < 16) {
        if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0) {
            fail(ErrorKind::Corrupt, "bank header truncated");
        }
        fail(ErrorKind::Format, "file too short to be an embedding bank");
    }
    if (r.bytes(4) != std::string_view(kMagic, 4)) {
        fail(ErrorKind::Format, "bad magic (expected CGEB)");
    }
    const auto version = r.u16();
    if (version != kBankVersion) {
        fail(ErrorKind::Format, "unsupported bank version " + std::to_string(version));
    }
    const auto flags = r.u16();
    if (flags & kBankFlagMatrix) {
        fail(ErrorKind::Format, "file holds a concept matrix, not an embedding bank");
    }
    const int d = static_cast<int>(r.u32());
    const int d_tok = static_cast<int>(r.u32());
    if (d <= 0 || d_tok <= 0) {
        fail(ErrorKind::Format, "bank header declares a zero dimension");
    }

    std::vector<EmbeddingRecord> out;
    while (!r.done()) {
        const std::size_t index = out.size();
        const std::uint32_t len = r.u32();
        if (len > r.remaining()) {
            fail(ErrorKind::Corrupt, "record " + std::to_string(index) + " truncated (needs " +
                                         std::to_string(len) + " bytes, " +
                                         std::to_string(r.remaining()) + " left)");
        }
        const std::size_t start = r.pos();
        EmbeddingRecord rec;
        rec.sample_id = r.str16();
        const auto label = r.u8();
        const auto scenario = r.u8();
        const auto variant = r.u8();
        const auto split = r.u8();
        const std::string where = "record " + std::to_string(index);
        if (label > 1 || scenario > 2 || variant > 2 || split > 2) {
            fail(ErrorKind::Validation, where + ": enum value out of range");
        }
        rec.label = static_cast<Label>(label);
        rec.scenario = static_cast<Scenario>(scenario);
        rec.variant = static_cast<Variant>(variant);
        rec.split = static_cast<Split>(split);
        rec.concept_id = r.i32();
        rec.image_emb = get_vector_f32(r, d);
        rec.text_emb = get_vector_f32(r, d);
        const int n_tok = r.u16();
        rec.token_strings.reserve(n_tok);
        for (int t = 0; t < n_tok; ++t) {
            rec.token_strings.push_back(r.str16());
        }
        rec.token_embs.resize(n_tok, d_tok);
        for (int t = 0; t < n_tok; ++t) {
            rec.token_embs.row(t) = get_vector_f32(r, d_tok).transpose();
        }
        if (r.pos() - start != len) {
            fail(ErrorKind::Corrupt, where + ": length prefix disagrees with payload");
        }
        validate_record(rec, d, d_tok, where);
        out.push_back(std::move(rec));
    }
    if (out.empty()) {
        fail(ErrorKind::Corrupt, "bank contains no records");
    }
    return out;
}

DatasetManifest summarize(const std::vector<EmbeddingRecord>& records) {
    DatasetManifest m;
    if (!records.empty()) {
        m.d = static_cast<int>(records.front().image_emb.size());
        m.d_tok = static_cast<int>(records.front().token_embs.cols());
    }
    for (const auto& r : records) {
        ++m.counts[{r.scenario, r.variant, r.split}];
    }
    return m;
}

namespace {

nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["format"] = "cgeb";
    j["version"] = kBankVersion;
    j["bank_path"] = std::filesystem::path(m.bank_path).filename().string();
    j["d"] = m.d;
    j["d_tok"] = m.d_tok;
    j["total"] = m.total();
    auto counts = nlohmann::ordered_json::array();
    for (const auto& [key, c] : m.counts) {
        counts.push_back({{"scenario", to_string(std::get<0>(key))},
                          {"variant", to_string(std::get<1>(key))},
                          {"split", to_string(std::get<2>(key))},
                          {"count", c}});
    }
    j["counts"] = counts;
    nlohmann::ordered_json prop;
    const double total = static_cast<double>(std::max<std::size_t>(1, m.total()));
    for (Split s : kSplits) {
        prop[to_string(s)] = static_cast<double>(m.count_split(s)) / total;
    }
    j["split_proportions"] = prop;
    j["vocab_ref"] = m.vocab_ref;
    j["seed"] = m.seed ? nlohmann::ordered_json(*m.seed) : nlohmann::ordered_json(nullptr);
    j["bank_sha256"] = m.bank_sha256;
    return j;
}

}  // namespace

DatasetManifest write_embedding_bank(const std::vector<EmbeddingRecord>& records,
                                     const std::string& path,
                                     const std::string& vocab_ref,
                                     std::optional<std::uint64_t> seed) {
    const auto bytes = encode_embedding_bank(records);
    DatasetManifest m = summarize(records);
    m.bank_path = path;
    m.vocab_ref = vocab_ref;
    m.seed = seed;
    m.bank_sha256 = sha256_hex(std::span<const std::uint8_t>(bytes));
    binio::write_file(path, bytes);
    binio::write_text_file(manifest_path_for(path), manifest_to_json(m).dump(2) + "\n");
    return m;
}

LoadedBank read_embedding_bank(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        fail(ErrorKind::Io, "bank '" + path + "' does not exist");
    }
    const auto bytes = binio::read_file(path);
    LoadedBank out;
    out.records = decode_embedding_bank(bytes);
    out.manifest = summarize(out.records);
    out.manifest.bank_path = path;
    out.manifest.bank_sha256 = sha256_hex(std::span<const std::uint8_t>(bytes));

    const auto sidecar = manifest_path_for(path);
    if (std::filesystem::exists(sidecar)) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(binio::read_text_file(sidecar));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Format, "manifest '" + sidecar + "': " + e.what());
        }
        out.manifest.vocab_ref = j.value("vocab_ref", std::string{});
        if (j.contains("seed") && !j["seed"].is_null()) {
            out.manifest.seed = j["seed"].get<std::uint64_t>();
        }
        if (j.value("total", out.manifest.total()) != out.manifest.total()) {
            fail(ErrorKind::Validation, "manifest '" + sidecar + "' counts do not sum to the bank's " +
                                            std::to_string(out.manifest.total()) + " records");
        }
    }
    return out;
}

std::vector<EmbeddingRecord> filter_split(const std::vector<EmbeddingRecord>& records, Split split) {
    std::vector<EmbeddingRecord> out;
    for (const auto& r : records) {
        if (r.split == split) {
            out.push_back(r);
        }
    }
    return out;
}

std::string pair_stem(const std::string& sample_id) {
    if (sample_id.size() >= 2 && sample_id[sample_id.size() - 2] == '-' &&
        (sample_id.back() == 'U' || sample_id.back() == 'S')) {
        return sample_id.substr(0, sample_id.size() - 2);
    }
    return sample_id;
}

}  // namespace cg

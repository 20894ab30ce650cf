// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "conceptguard/vocab.hpp"

namespace cg {

enum class Label : std::uint8_t { Safe = 0, Unsafe = 1 };
enum class Scenario : std::uint8_t { IT_U = 0, SI_UT = 1, UI_ST = 2 };
enum class Variant : std::uint8_t { Exp = 0, Syn = 1, Adv = 2 };
enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline constexpr std::int32_t kNoConcept = -1;

inline constexpr std::array<Scenario, 3> kScenarios{Scenario::IT_U, Scenario::SI_UT, Scenario::UI_ST};
inline constexpr std::array<Variant, 3> kVariants{Variant::Exp, Variant::Syn, Variant::Adv};
inline constexpr std::array<Split, 3> kSplits{Split::Train, Split::Val, Split::Test};

const char* to_string(Label v);
const char* to_string(Scenario v);
const char* to_string(Variant v);
const char* to_string(Split v);
Label parse_label(const std::string& s);
Scenario parse_scenario(const std::string& s);
Variant parse_variant(const std::string& s);
Split parse_split(const std::string& s);

/// One sample of the embedding bank.
///
/// Vectors are held in double precision; the on-disk bank stores f32, so a
/// read bank is the f32-rounded image of what was written.
struct EmbeddingRecord {
    std::string sample_id;
    Eigen::VectorXd image_emb;
    Eigen::VectorXd text_emb;
    Eigen::MatrixXd token_embs;  ///< L x d_tok, one token per row
    std::vector<std::string> token_strings;
    std::int32_t concept_id = kNoConcept;
    Label label = Label::Safe;
    Scenario scenario = Scenario::IT_U;
    Variant variant = Variant::Exp;
    Split split = Split::Train;

    std::vector<bool> content_mask() const;
};

using CellKey = std::tuple<Scenario, Variant, Split>;

struct DatasetManifest {
    std::string bank_path;
    std::map<CellKey, std::size_t> counts;
    int d = 0;
    int d_tok = 0;
    std::string vocab_ref;
    std::optional<std::uint64_t> seed;
    std::string bank_sha256;

    std::size_t total() const;
    std::size_t count_split(Split s) const;
};

inline constexpr std::uint16_t kBankVersion = 1;
inline constexpr std::uint16_t kBankFlagMatrix = 0x1;

/// Sidecar path for a bank: `x.cgeb` -> `x.manifest.json`.
std::string manifest_path_for(const std::string& bank_path);

/// Validates one record against the bank dimensions; throws Error(Validation).
void validate_record(const EmbeddingRecord& r, int d, int d_tok, const std::string& where);

DatasetManifest write_embedding_bank(const std::vector<EmbeddingRecord>& records,
                                     const std::string& path,
                                     const std::string& vocab_ref = {},
                                     std::optional<std::uint64_t> seed = std::nullopt);

/// Serialises records into the bank byte layout without touching disk.
std::vector<std::uint8_t> encode_embedding_bank(const std::vector<EmbeddingRecord>& records);

struct LoadedBank {
    DatasetManifest manifest;
    std::vector<EmbeddingRecord> records;
};

LoadedBank read_embedding_bank(const std::string& path);
std::vector<EmbeddingRecord> decode_embedding_bank(const std::vector<std::uint8_t>& bytes);

DatasetManifest summarize(const std::vector<EmbeddingRecord>& records);

std::vector<EmbeddingRecord> filter_split(const std::vector<EmbeddingRecord>& records, Split split);

/// Sample ids follow `<stem>-U` / `<stem>-S`; returns the shared stem.
std::string pair_stem(const std::string& sample_id);

// --- synthetic data -------------------------------------------------------

struct SynthConfig {
    int n_concepts = 20;
    int samples_per_concept = 40;
    int d = 64;
    int d_tok = 0;  ///< 0 means "same as d"
    double noise_sigma = 0.1;
    std::uint64_t seed = 42;
    int tokens_per_prompt = 8;  ///< content tokens; <bos>/<eos> are added

    int token_dim() const { return d_tok > 0 ? d_tok : d; }
    void validate() const;
};

struct SynthDataset {
    DatasetManifest manifest;
    std::vector<EmbeddingRecord> records;
    ConceptMatrix concepts;        ///< pooled-space anchors, size x d
    ConceptMatrix token_concepts;  ///< token-space anchors, size x d_tok
};

/// Deterministic stand-in for a concept-level multimodal safety corpus.
///
/// Every instance of a concept yields one unsafe record per populated
/// (scenario, variant) cell plus a safe counterpart in the same cell. The
/// split is assigned per instance, 8:1:1 stratified by concept.
SynthDataset synth_dataset(const SynthConfig& cfg);

}  // namespace cg

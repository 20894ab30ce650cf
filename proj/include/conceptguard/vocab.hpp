// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cg {

struct Concept {
    int id = 0;
    int category = 0;  ///< index into ConceptVocab::categories
    std::string text;
};

/// Unsafe-concept taxonomy. Concept ids are dense and follow manifest order.
struct ConceptVocab {
    std::vector<std::string> categories;
    std::vector<Concept> concepts;

    int size() const { return static_cast<int>(concepts.size()); }
    const std::string& category_of(int concept_id) const;
    std::vector<std::string> strings() const;
};

/// Row i holds the embedding of concept i.
struct ConceptMatrix {
    Eigen::MatrixXd matrix;
    std::string encoder_tag;
    bool normalized = false;
    std::vector<std::string> names;  ///< concept strings, may be empty
    std::vector<std::string> categories;  ///< per-row category, may be empty

    int size() const { return static_cast<int>(matrix.rows()); }
    int dim() const { return static_cast<int>(matrix.cols()); }
    std::string name_of(int concept_id) const;
};

struct TokenEncoding {
    std::vector<std::string> strings;
    Eigen::MatrixXd embeddings;  ///< L x d_tok
    std::vector<bool> content_mask;
};

/// Text-encoder abstraction. Real CLIP/T5 encoders live behind adapters
/// outside this library; tests and the CLI use the mock or file encoders.
class EncoderClient {
public:
    virtual ~EncoderClient() = default;

    virtual std::vector<Eigen::VectorXd> encode_text(std::span<const std::string> texts) const = 0;
    virtual TokenEncoding encode_tokens(const std::string& text) const = 0;
    virtual int d() const = 0;
    virtual int d_tok() const = 0;
    virtual std::string tag() const = 0;
};

/// Hashes each string (with the seed) into a unit vector.
class MockEncoder final : public EncoderClient {
public:
    MockEncoder(int d, int d_tok, std::uint64_t seed);

    std::vector<Eigen::VectorXd> encode_text(std::span<const std::string> texts) const override;
    TokenEncoding encode_tokens(const std::string& text) const override;
    int d() const override { return d_; }
    int d_tok() const override { return d_tok_; }
    std::string tag() const override;

private:
    int d_;
    int d_tok_;
    std::uint64_t seed_;
};

/// Looks strings up in a JSON table: {"d": D, "d_tok": T, "text": {s: [...]},
/// "tokens": {s: [...]}}. Missing strings raise Error(Validation).
class FileEncoder final : public EncoderClient {
public:
    explicit FileEncoder(const std::string& path);

    std::vector<Eigen::VectorXd> encode_text(std::span<const std::string> texts) const override;
    TokenEncoding encode_tokens(const std::string& text) const override;
    int d() const override { return d_; }
    int d_tok() const override { return d_tok_; }
    std::string tag() const override { return tag_; }

private:
    int d_ = 0;
    int d_tok_ = 0;
    std::string tag_;
    std::vector<std::pair<std::string, Eigen::VectorXd>> text_;
    std::vector<std::pair<std::string, Eigen::VectorXd>> tokens_;
};

/// Control tokens are excluded from risk-token localisation.
bool is_control_token(const std::string& token);

/// Parses a JSON object of category -> list of concept strings (file order kept).
ConceptVocab load_taxonomy(const std::string& manifest_path);
ConceptVocab parse_taxonomy(const std::string& json_text);

/// Path of the bundled 4 x 50 taxonomy.
std::string bundled_taxonomy_path();

ConceptMatrix embed_concepts(const ConceptVocab& vocab, const EncoderClient& enc, bool normalize);

/// Concept-matrix cache: `.cgeb` header with the matrix flag, plus a JSON
/// sidecar carrying encoder_tag, names and categories.
void write_concept_matrix(const ConceptMatrix& cm, const std::string& path);
ConceptMatrix read_concept_matrix(const std::string& path);

}  // namespace cg

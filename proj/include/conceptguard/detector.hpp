// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

// Stage-1 multimodal risk detector.
//
// Pipeline for one (image, text) pair of pooled encoder features:
//
//   h_img = W_img f_img,  h_txt = W_txt f_txt
//   u     = h + Attn(h, other)            (multi-head, one key per direction)
//   h'    = u + FFN(u)
//   (w_img, w_txt) = softmax(Gate([h'_img; h'_txt]))
//   h_fused = W_fuse [w_img h'_img; w_txt h'_txt] + b_fuse
//   s(c)  = <norm(ValueHead(h_fused)), norm(QueryHead(f_c))>
//
// Scores are cosines in [-1, 1]. Decisions and the contrastive loss work on
// logits s * tau, where tau = exp(log_tau) starts at 1/0.07 and is learned.
//
// Every modality is a length-1 sequence, so each attention softmax runs over
// a single key and its weight is exactly 1; the query/key maps receive zero
// gradient. The degenerate weights are computed and reported rather than
// skipped.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "conceptguard/dataio.hpp"
#include "conceptguard/rng.hpp"
#include "conceptguard/vocab.hpp"

namespace cg {

struct DetectorConfig {
    int d = 768;
    int d_m = 256;
    int ffn_dim = 1024;
    int heads = 4;
    int gate_hidden = 0;  ///< 0 means d_m
    double dropout_p = 0.5;
    double tau_init = 1.0 / 0.07;
    double lr = 1e-3;
    int batch_size = 16;
    int epochs = 500;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    int gate_dim() const { return gate_hidden > 0 ? gate_hidden : d_m; }
    void validate() const;

    std::string to_json() const;
    /// Fields absent from the JSON keep the values already in `base`.
    static DetectorConfig from_json(const std::string& text, DetectorConfig base);
    static DetectorConfig from_json(const std::string& text);
};

struct AttentionWeights {
    Eigen::MatrixXd wq, wk, wv, wo;
    Eigen::VectorXd bq, bk, bv, bo;
};

/// Linear -> ReLU -> Linear.
struct TwoLayerMlp {
    Eigen::MatrixXd w1, w2;
    Eigen::VectorXd b1, b2;
};

/// Named view of one parameter tensor (row-major order is not implied;
/// data is Eigen's column-major storage).
struct ParamBlock {
    std::string name;
    double* data;
    Eigen::Index rows;
    Eigen::Index cols;
    bool decay;  ///< subject to AdamW weight decay

    Eigen::Index size() const { return rows * cols; }
    Eigen::Map<Eigen::MatrixXd> map() const { return {data, rows, cols}; }
};

struct DetectorParams {
    DetectorConfig config;
    Eigen::MatrixXd img_proj;  ///< d_m x d
    Eigen::MatrixXd txt_proj;  ///< d_m x d
    AttentionWeights attn_img;  ///< image queries text
    AttentionWeights attn_txt;  ///< text queries image
    TwoLayerMlp ffn_img;
    TwoLayerMlp ffn_txt;
    TwoLayerMlp gate;  ///< 2 d_m -> gate_dim -> 2
    Eigen::MatrixXd fuse_w;  ///< d_m x 2 d_m
    Eigen::VectorXd fuse_b;
    TwoLayerMlp value_head;  ///< d_m -> d_m -> d_m
    TwoLayerMlp query_head;  ///< d -> d_m -> d_m
    double log_tau = 0.0;

    double tau() const;

    /// Every tensor in a fixed order. The order is part of the checkpoint format.
    std::vector<ParamBlock> blocks();
    std::vector<ParamBlock> blocks() const { return const_cast<DetectorParams*>(this)->blocks(); }

    std::size_t parameter_count() const;

    /// Same shapes as `cfg` dictates, all zeros (gradient accumulator).
    static DetectorParams zeros(const DetectorConfig& cfg);
};

DetectorParams init_params(const DetectorConfig& cfg);

// --- forward operations ---------------------------------------------------

struct Projection {
    Eigen::VectorXd h_img;
    Eigen::VectorXd h_txt;
};

Projection project(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt, const DetectorParams& params);

struct CrossAttention {
    Eigen::VectorXd h_img;
    Eigen::VectorXd h_txt;
    std::vector<double> head_weights_img;  ///< softmax weight per head (single key)
    std::vector<double> head_weights_txt;
};

/// Bidirectional cross-attention plus FFN, both with residuals. Dropout is
/// only applied when `training` is true and `dropout_rng` is given.
CrossAttention cross_attend(const Eigen::VectorXd& h_img, const Eigen::VectorXd& h_txt,
                            const DetectorParams& params, bool training, Rng* dropout_rng = nullptr);

struct GateFusion {
    Eigen::VectorXd h_fused;
    double omega_img = 0.5;
    double omega_txt = 0.5;
};

GateFusion gate_fuse(const Eigen::VectorXd& h_img, const Eigen::VectorXd& h_txt, const DetectorParams& params);

Eigen::VectorXd value_head(const Eigen::VectorXd& h_fused, const DetectorParams& params);
Eigen::VectorXd query_head(const Eigen::VectorXd& f_c, const DetectorParams& params);

/// Cosine of two vectors; Error(Degenerate) if either has zero norm.
double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

double score(const Eigen::VectorXd& h_fused, const Eigen::VectorXd& f_c, const DetectorParams& params);

/// Inference-mode fused representation (project, cross_attend, gate_fuse).
Eigen::VectorXd fused_representation(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt,
                                     const DetectorParams& params);

struct ScoredConcept {
    int concept_id;
    double score;
};

struct DetectionResult {
    Eigen::VectorXd scores;  ///< cosine per concept
    double s_max = 0.0;      ///< max cosine
    double tau = 1.0;
    std::vector<ScoredConcept> top_k;  ///< descending, ties by ascending id
    Label predicted_label = Label::Safe;

    /// Logit-scale risk score compared against the activation threshold.
    double s_max_logit() const { return s_max * tau; }
};

/// Ranks concept ids by score, descending with ascending-id tie break.
std::vector<ScoredConcept> rank_concepts(const Eigen::VectorXd& scores, int k);

DetectionResult detect(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt,
                       const ConceptMatrix& concepts, const DetectorParams& params,
                       int k, double threshold);

// --- contrastive objective ------------------------------------------------

/// An unsafe pair with its concept label and the matching safe counterpart.
struct PairedSample {
    std::string id;
    Eigen::VectorXd image;
    Eigen::VectorXd text;
    int concept_id = -1;
    Eigen::VectorXd safe_image;
    Eigen::VectorXd safe_text;
};

struct LossTerms {
    double forward = 0.0;   ///< image/text -> concept direction
    double backward = 0.0;  ///< concept -> image/text direction
    double total() const { return forward + backward; }
};

struct ScoreGradient {
    Eigen::MatrixXd d_scores;  ///< dL/dS
    Eigen::VectorXd d_safe;    ///< dL/d safe-counterpart scores
    double d_tau = 0.0;        ///< dL/d tau
};

/// Symmetric contrastive loss from a score table. `scores(i, j)` is the
/// score of unsafe sample i against the concept label of sample j;
/// `safe(i)` scores sample i's safe counterpart against its own concept.
LossTerms contrastive_loss(const Eigen::MatrixXd& scores, const Eigen::VectorXd& safe, double tau,
                           ScoreGradient* grad = nullptr);

/// Fills the score table for a batch (inference mode).
void batch_scores(std::span<const PairedSample> batch, const ConceptMatrix& concepts,
                  const DetectorParams& params, Eigen::MatrixXd& scores, Eigen::VectorXd& safe);

LossTerms batch_loss(std::span<const PairedSample> batch, const ConceptMatrix& concepts,
                     const DetectorParams& params);

struct GradientResult {
    DetectorParams grads;
    LossTerms loss;
};

/// Exact gradient of batch_loss with respect to every parameter. Dropout is
/// active only when `dropout_rng` is non-null.
GradientResult compute_gradients(std::span<const PairedSample> batch, const ConceptMatrix& concepts,
                                 const DetectorParams& params, Rng* dropout_rng = nullptr);

// --- training -------------------------------------------------------------

/// Pairs each unsafe record of `split` with its `-S` counterpart.
std::vector<PairedSample> build_training_pairs(const std::vector<EmbeddingRecord>& records, Split split);

struct TrainResult {
    DetectorParams params;
    std::vector<double> epoch_loss;
};

using EpochCallback = std::function<void(int epoch, double loss)>;

TrainResult train(std::span<const PairedSample> pairs, const ConceptMatrix& concepts,
                  const DetectorConfig& cfg, const EpochCallback& on_epoch = {});

/// Continues from `start` instead of a fresh initialisation.
TrainResult train_from(DetectorParams start, std::span<const PairedSample> pairs,
                       const ConceptMatrix& concepts, const DetectorConfig& cfg,
                       const EpochCallback& on_epoch = {});

// --- checkpoints ----------------------------------------------------------

void save_checkpoint(const DetectorParams& params, const std::string& path);
DetectorParams load_checkpoint(const std::string& path);

}  // namespace cg

// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

// Stage-2 semantic risk suppression.
//
// The top-k detected concepts, re-embedded in the conditioning-token space,
// span a risk subspace with orthogonal projector P. A content token t_i is
// risk-bearing when its residual ||(I - P) t_i|| falls below (1 + alpha)
// times the leave-one-out mean residual of the other content tokens; such
// tokens are replaced by (I - P) t_i during the first n_steps denoising
// steps.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "conceptguard/detector.hpp"
#include "conceptguard/vocab.hpp"

namespace cg {

inline constexpr double kDefaultPinvTolerance = 1e-6;

/// Moore-Penrose pseudo-inverse via SVD; singular values below
/// rel_tol * sigma_max are treated as zero.
Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& a, double rel_tol = kDefaultPinvTolerance);

struct RiskSubspace {
    Eigen::MatrixXd rows;       ///< k x d_tok concept embeddings
    Eigen::MatrixXd projector;  ///< d_tok x d_tok
    int k = 0;
    int rank = 0;
    double pinv_tolerance = kDefaultPinvTolerance;
};

/// Projector onto the row span of `concept_rows`; equals E^T (E E^T)^-1 E
/// whenever the rows are linearly independent.
RiskSubspace build_risk_subspace(const Eigen::MatrixXd& concept_rows, double rel_tol = kDefaultPinvTolerance);

/// r_i = ||(I - P) t_i|| for each token row.
Eigen::VectorXd residual_norms(const Eigen::MatrixXd& tokens, const Eigen::MatrixXd& projector);

std::vector<bool> localize_risk_tokens(const Eigen::MatrixXd& tokens, const Eigen::MatrixXd& projector,
                                       double alpha, const std::vector<bool>& content_mask);

/// Same rule applied to precomputed residuals.
std::vector<bool> localize_from_residuals(const Eigen::VectorXd& residuals, double alpha,
                                          const std::vector<bool>& content_mask);

/// Flagged rows become (I - P) t; the rest are copied unchanged.
Eigen::MatrixXd suppress(const Eigen::MatrixXd& tokens, const std::vector<bool>& flags,
                         const Eigen::MatrixXd& projector);

struct GuardConfig {
    double theta = 9.77;
    int k = 15;
    double alpha = -0.02;
    int n_steps = 13;
    int total_steps = 50;

    void validate() const;
};

enum class StepChoice { Suppressed, Original };

struct EditDirective {
    int concept_id = -1;
    std::string concept_name;
    std::string instruction;
};

/// "remove or replace any depiction of <concept>"
std::string render_edit_instruction(const std::string& concept_name);

struct GuardPlan {
    bool activated = false;
    double s_max_logit = 0.0;
    double theta = 0.0;
    std::vector<ScoredConcept> top_concepts;
    Eigen::MatrixXd original_tokens;
    Eigen::MatrixXd suppressed_tokens;
    std::vector<bool> flags;
    int n_steps = 0;
    int total_steps = 0;
    int subspace_rank = 0;
    std::optional<EditDirective> edit_directive;
    std::vector<std::string> warnings;

    StepChoice schedule(int step) const;
};

GuardPlan make_guard_plan(const DetectionResult& detection, const Eigen::MatrixXd& tokens,
                          const std::vector<bool>& content_mask, const ConceptMatrix& concept_matrix_tok,
                          const GuardConfig& cfg);

/// Conditioning for a 1-based denoising step.
const Eigen::MatrixXd& conditioning_for_step(const GuardPlan& plan, int step);

/// JSON for downstream generators (tokens are omitted; see the CLI for the
/// `.cgeb` token payload).
std::string guard_plan_to_json(const GuardPlan& plan, const std::string& sample_id);

class ImageEditorClient {
public:
    virtual ~ImageEditorClient() = default;
    virtual std::string edit(const std::string& image_ref, const std::string& instruction) = 0;
};

/// Records each instruction and returns a tagged reference.
class MockImageEditor final : public ImageEditorClient {
public:
    std::string edit(const std::string& image_ref, const std::string& instruction) override;

    const std::vector<std::pair<std::string, std::string>>& calls() const { return calls_; }

private:
    std::vector<std::pair<std::string, std::string>> calls_;
};

}  // namespace cg

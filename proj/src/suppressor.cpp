// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include "conceptguard/suppressor.hpp"

#include <cmath>

#include <json.hpp>

#include "conceptguard/error.hpp"

namespace cg {

Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& a, double rel_tol) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double cutoff = sv.size() > 0 ? rel_tol * sv(0) : 0.0;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(sv.size());
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if (sv(i) > cutoff) {
            inv(i) = 1.0 / sv(i);
        }
    }
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

RiskSubspace build_risk_subspace(const Eigen::MatrixXd& concept_rows, double rel_tol) {
    if (concept_rows.rows() < 1 || concept_rows.cols() < 1) {
        fail(ErrorKind::Shape, "risk subspace needs at least one concept row");
    }
    if (!concept_rows.allFinite()) {
        fail(ErrorKind::Validation, "risk subspace rows contain non-finite values");
    }
    if (!(rel_tol > 0.0 && rel_tol < 1.0)) {
        fail(ErrorKind::Config, "pseudo-inverse tolerance must lie in (0, 1)");
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(concept_rows, Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();
    if (sv(0) == 0.0) {
        fail(ErrorKind::Degenerate, "all concept rows are zero; there is no risk subspace");
    }
    int rank = 0;
    while (rank < sv.size() && sv(rank) > rel_tol * sv(0)) {
        ++rank;
    }
    // E^+ E = V_r V_r^T: the orthogonal projector onto the row span of E.
    const Eigen::MatrixXd basis = svd.matrixV().leftCols(rank);
    Eigen::MatrixXd p = basis * basis.transpose();
    p = 0.5 * (p + p.transpose()).eval();

    RiskSubspace s;
    s.rows = concept_rows;
    s.projector = std::move(p);
    s.k = static_cast<int>(concept_rows.rows());
    s.rank = rank;
    s.pinv_tolerance = rel_tol;
    return s;
}

Eigen::VectorXd residual_norms(const Eigen::MatrixXd& tokens, const Eigen::MatrixXd& projector) {
    if (tokens.rows() < 1) {
        fail(ErrorKind::Shape, "residual_norms: no tokens");
    }
    if (projector.rows() != tokens.cols() || projector.cols() != tokens.cols()) {
        fail(ErrorKind::Shape, "residual_norms: projector is " + std::to_string(projector.rows()) + "x" +
                                   std::to_string(projector.cols()) + ", tokens have dimension " +
                                   std::to_string(tokens.cols()));
    }
    const Eigen::MatrixXd residual = tokens - tokens * projector;  // P is symmetric
    return residual.rowwise().norm();
}

std::vector<bool> localize_from_residuals(const Eigen::VectorXd& residuals, double alpha,
                                          const std::vector<bool>& content_mask) {
    if (static_cast<Eigen::Index>(content_mask.size()) != residuals.size()) {
        fail(ErrorKind::Shape, "content mask length differs from token count");
    }
    double sum = 0.0;
    int n_content = 0;
    for (Eigen::Index i = 0; i < residuals.size(); ++i) {
        if (content_mask[static_cast<std::size_t>(i)]) {
            sum += residuals(i);
            ++n_content;
        }
    }
    if (n_content < 2) {
        fail(ErrorKind::LocalizationUndefined,
             "risk-token localisation needs at least 2 content tokens, got " + std::to_string(n_content));
    }
    std::vector<bool> flags(content_mask.size(), false);
    for (Eigen::Index i = 0; i < residuals.size(); ++i) {
        if (!content_mask[static_cast<std::size_t>(i)]) {
            continue;
        }
        const double loo_mean = (sum - residuals(i)) / (n_content - 1);
        flags[static_cast<std::size_t>(i)] = residuals(i) < (1.0 + alpha) * loo_mean;
    }
    return flags;
}

std::vector<bool> localize_risk_tokens(const Eigen::MatrixXd& tokens, const Eigen::MatrixXd& projector,
                                       double alpha, const std::vector<bool>& content_mask) {
    return localize_from_residuals(residual_norms(tokens, projector), alpha, content_mask);
}

Eigen::MatrixXd suppress(const Eigen::MatrixXd& tokens, const std::vector<bool>& flags,
                         const Eigen::MatrixXd& projector) {
    if (static_cast<Eigen::Index>(flags.size()) != tokens.rows()) {
        fail(ErrorKind::Shape, "suppress: flag count differs from token count");
    }
    if (projector.rows() != tokens.cols() || projector.cols() != tokens.cols()) {
        fail(ErrorKind::Shape, "suppress: projector does not match token dimension");
    }
    Eigen::MatrixXd out = tokens;
    for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
        if (flags[static_cast<std::size_t>(i)]) {
            const Eigen::VectorXd t = tokens.row(i).transpose();
            out.row(i) = (t - projector * t).transpose();
        }
    }
    return out;
}

// --- guard plan -------------------------------------------------------------

void GuardConfig::validate() const {
    if (k < 1) {
        fail(ErrorKind::Config, "guard config: k must be >= 1");
    }
    if (total_steps < 1 || n_steps < 0 || n_steps > total_steps) {
        fail(ErrorKind::Config, "guard config: need 0 <= n_steps <= total_steps and total_steps >= 1");
    }
    if (!(alpha > -1.0)) {
        fail(ErrorKind::Config, "guard config: alpha must be > -1");
    }
    if (!std::isfinite(theta)) {
        fail(ErrorKind::Config, "guard config: theta must be finite");
    }
}

std::string render_edit_instruction(const std::string& concept_name) {
    return "remove or replace any depiction of " + concept_name;
}

StepChoice GuardPlan::schedule(int step) const {
    if (step < 1 || step > total_steps) {
        fail(ErrorKind::Range, "step " + std::to_string(step) + " outside 1.." + std::to_string(total_steps));
    }
    return activated && step <= n_steps ? StepChoice::Suppressed : StepChoice::Original;
}

GuardPlan make_guard_plan(const DetectionResult& detection, const Eigen::MatrixXd& tokens,
                          const std::vector<bool>& content_mask, const ConceptMatrix& concept_matrix_tok,
                          const GuardConfig& cfg) {
    cfg.validate();
    if (cfg.k > concept_matrix_tok.size()) {
        fail(ErrorKind::Config, "guard config: k=" + std::to_string(cfg.k) + " exceeds vocabulary size " +
                                    std::to_string(concept_matrix_tok.size()));
    }
    if (detection.scores.size() != concept_matrix_tok.size()) {
        fail(ErrorKind::Shape, "detection scores and token-space concept matrix disagree on vocabulary size");
    }
    if (tokens.cols() != concept_matrix_tok.dim()) {
        fail(ErrorKind::Shape, "tokens have dimension " + std::to_string(tokens.cols()) +
                                   " but token-space concepts have " + std::to_string(concept_matrix_tok.dim()));
    }
    if (static_cast<Eigen::Index>(content_mask.size()) != tokens.rows()) {
        fail(ErrorKind::Shape, "content mask length differs from token count");
    }

    GuardPlan plan;
    plan.s_max_logit = detection.s_max_logit();
    plan.theta = cfg.theta;
    plan.original_tokens = tokens;
    plan.suppressed_tokens = tokens;
    plan.flags.assign(static_cast<std::size_t>(tokens.rows()), false);
    plan.n_steps = cfg.n_steps;
    plan.total_steps = cfg.total_steps;
    if (plan.s_max_logit < cfg.theta) {
        return plan;
    }

    plan.activated = true;
    plan.top_concepts = rank_concepts(detection.scores, cfg.k);
    Eigen::MatrixXd e(cfg.k, concept_matrix_tok.dim());
    for (int i = 0; i < cfg.k; ++i) {
        e.row(i) = concept_matrix_tok.matrix.row(plan.top_concepts[static_cast<std::size_t>(i)].concept_id);
    }
    const RiskSubspace subspace = build_risk_subspace(e);
    plan.subspace_rank = subspace.rank;
    try {
        plan.flags = localize_risk_tokens(tokens, subspace.projector, cfg.alpha, content_mask);
        plan.suppressed_tokens = suppress(tokens, plan.flags, subspace.projector);
    } catch (const Error& err) {
        if (err.kind() != ErrorKind::LocalizationUndefined) {
            throw;
        }
        plan.warnings.push_back(std::string("text suppression skipped: ") + err.what());
    }
    const int top1 = plan.top_concepts.front().concept_id;
    const std::string name = concept_matrix_tok.name_of(top1);
    plan.edit_directive = EditDirective{top1, name, render_edit_instruction(name)};
    return plan;
}

const Eigen::MatrixXd& conditioning_for_step(const GuardPlan& plan, int step) {
    return plan.schedule(step) == StepChoice::Suppressed ? plan.suppressed_tokens : plan.original_tokens;
}

std::string guard_plan_to_json(const GuardPlan& plan, const std::string& sample_id) {
    nlohmann::ordered_json j;
    j["sample_id"] = sample_id;
    j["activated"] = plan.activated;
    j["s_max_logit"] = plan.s_max_logit;
    j["theta"] = plan.theta;
    auto top = nlohmann::ordered_json::array();
    for (const auto& c : plan.top_concepts) {
        top.push_back({{"concept_id", c.concept_id}, {"score", c.score}});
    }
    j["top_concepts"] = top;
    j["flags"] = plan.flags;
    j["schedule"] = {{"n_steps", plan.n_steps},
                     {"total_steps", plan.total_steps},
                     {"suppressed_through_step", plan.activated ? plan.n_steps : 0}};
    j["subspace_rank"] = plan.subspace_rank;
    if (plan.edit_directive) {
        j["edit_directive"] = {{"concept_id", plan.edit_directive->concept_id},
                               {"concept", plan.edit_directive->concept_name},
                               {"instruction", plan.edit_directive->instruction}};
    } else {
        j["edit_directive"] = nullptr;
    }
    j["warnings"] = plan.warnings;
    return j.dump(2);
}

std::string MockImageEditor::edit(const std::string& image_ref, const std::string& instruction) {
    calls_.emplace_back(image_ref, instruction);
    return image_ref + "#edited-" + std::to_string(calls_.size());
}

}  // namespace cg

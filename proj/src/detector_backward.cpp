// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "conceptguard/detector.hpp"
#include "conceptguard/error.hpp"
#include "detector_internal.hpp"

namespace cg {

namespace detail {

Eigen::VectorXd backward_mlp(const TwoLayerMlp& mlp, const MlpTrace& t, const Eigen::VectorXd& d_out,
                             TwoLayerMlp& g) {
    g.w2.noalias() += d_out * t.act.transpose();
    g.b2 += d_out;
    Eigen::VectorXd d_act = mlp.w2.transpose() * d_out;
    if (t.mask.size() > 0) {
        d_act = d_act.cwiseProduct(t.mask);
    }
    const Eigen::VectorXd d_pre = (t.pre.array() > 0.0).select(d_act, 0.0);
    g.w1.noalias() += d_pre * t.in.transpose();
    g.b1 += d_pre;
    return mlp.w1.transpose() * d_pre;
}

namespace {

/// Backpropagates one attention direction; adds into d_query_in / d_kv_in.
void backward_direction(const AttentionWeights& a, const TwoLayerMlp& ffn, int heads, const DirectionTrace& t,
                        const Eigen::VectorXd& d_out, AttentionWeights& ga, TwoLayerMlp& gffn,
                        Eigen::VectorXd& d_query_in, Eigen::VectorXd& d_kv_in) {
    // out = u + ffn(u)
    Eigen::VectorXd d_u = d_out + backward_mlp(ffn, t.ffn, d_out, gffn);
    // u = query_in + dropout(attn)
    d_query_in += d_u;
    Eigen::VectorXd d_attn = t.attn_mask.size() > 0 ? Eigen::VectorXd(d_u.cwiseProduct(t.attn_mask)) : d_u;
    ga.wo.noalias() += d_attn * t.ctx.transpose();
    ga.bo += d_attn;
    const Eigen::VectorXd d_ctx = a.wo.transpose() * d_attn;

    const Eigen::Index dm = t.q.size();
    const Eigen::Index dh = dm / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Eigen::VectorXd d_q = Eigen::VectorXd::Zero(dm);
    Eigen::VectorXd d_k = Eigen::VectorXd::Zero(dm);
    Eigen::VectorXd d_v = Eigen::VectorXd::Zero(dm);
    for (int h = 0; h < heads; ++h) {
        const double w = t.weights[static_cast<std::size_t>(h)];
        const auto seg_ctx = d_ctx.segment(h * dh, dh);
        d_v.segment(h * dh, dh) = w * seg_ctx;
        // softmax Jacobian over the key set: dlogit = w (dw - sum_k w_k dw_k)
        const double d_w = seg_ctx.dot(t.v.segment(h * dh, dh));
        const double d_logit = w * (d_w - w * d_w);
        d_q.segment(h * dh, dh) = d_logit * scale * t.k.segment(h * dh, dh);
        d_k.segment(h * dh, dh) = d_logit * scale * t.q.segment(h * dh, dh);
    }
    ga.wq.noalias() += d_q * t.query_in.transpose();
    ga.bq += d_q;
    ga.wk.noalias() += d_k * t.kv_in.transpose();
    ga.bk += d_k;
    ga.wv.noalias() += d_v * t.kv_in.transpose();
    ga.bv += d_v;
    d_query_in.noalias() += a.wq.transpose() * d_q;
    d_kv_in.noalias() += a.wk.transpose() * d_k + a.wv.transpose() * d_v;
}

}  // namespace

void backward_fusion(const FusionTrace& t, const Eigen::VectorXd& d_fused, const DetectorParams& p,
                     DetectorParams& g) {
    const Eigen::Index dm = p.config.d_m;
    g.fuse_w.noalias() += d_fused * t.fuse_in.transpose();
    g.fuse_b += d_fused;
    const Eigen::VectorXd d_fuse_in = p.fuse_w.transpose() * d_fused;

    Eigen::VectorXd d_img_out = t.omega(0) * d_fuse_in.head(dm);
    Eigen::VectorXd d_txt_out = t.omega(1) * d_fuse_in.tail(dm);
    const Eigen::Vector2d d_omega(d_fuse_in.head(dm).dot(t.img.out), d_fuse_in.tail(dm).dot(t.txt.out));
    const Eigen::Vector2d d_logits = t.omega.cwiseProduct(d_omega - Eigen::Vector2d::Constant(t.omega.dot(d_omega)));
    const Eigen::VectorXd d_gate_in = backward_mlp(p.gate, t.gate, d_logits, g.gate);
    d_img_out += d_gate_in.head(dm);
    d_txt_out += d_gate_in.tail(dm);

    Eigen::VectorXd d_h_img = Eigen::VectorXd::Zero(dm);
    Eigen::VectorXd d_h_txt = Eigen::VectorXd::Zero(dm);
    backward_direction(p.attn_img, p.ffn_img, p.config.heads, t.img, d_img_out, g.attn_img, g.ffn_img, d_h_img, d_h_txt);
    backward_direction(p.attn_txt, p.ffn_txt, p.config.heads, t.txt, d_txt_out, g.attn_txt, g.ffn_txt, d_h_txt, d_h_img);

    g.img_proj.noalias() += d_h_img * t.f_img.transpose();
    g.txt_proj.noalias() += d_h_txt * t.f_txt.transpose();
}

}  // namespace detail

namespace {

struct CosineGrad {
    Eigen::VectorXd d_a;
    Eigen::VectorXd d_b;
};

CosineGrad cosine_grad(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) {
        fail(ErrorKind::Degenerate, "cosine of a zero-norm vector");
    }
    const double s = a.dot(b) / (na * nb);
    return {b / (na * nb) - s * a / (na * na), a / (na * nb) - s * b / (nb * nb)};
}

}  // namespace

GradientResult compute_gradients(std::span<const PairedSample> batch, const ConceptMatrix& concepts,
                                 const DetectorParams& params, Rng* dropout_rng) {
    if (batch.empty()) {
        fail(ErrorKind::Validation, "batch is empty");
    }
    for (const auto& s : batch) {
        if (s.safe_image.size() == 0 || s.safe_text.size() == 0) {
            fail(ErrorKind::Validation, "sample '" + s.id + "' has no safe counterpart");
        }
        if (s.concept_id < 0 || s.concept_id >= concepts.size()) {
            fail(ErrorKind::Validation, "sample '" + s.id + "' has concept id outside the vocabulary");
        }
    }
    if (concepts.dim() != params.config.d) {
        fail(ErrorKind::Shape, "concept rows do not match detector input dimension");
    }

    const std::size_t n = batch.size();
    std::vector<detail::FusionTrace> unsafe_tr, safe_tr;
    std::vector<detail::MlpTrace> unsafe_v, safe_v, query;
    unsafe_tr.reserve(n);
    safe_tr.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        unsafe_tr.push_back(detail::forward_fusion(batch[i].image, batch[i].text, params, dropout_rng));
        unsafe_v.push_back(detail::forward_mlp(params.value_head, unsafe_tr.back().h_fused));
        safe_tr.push_back(detail::forward_fusion(batch[i].safe_image, batch[i].safe_text, params, dropout_rng));
        safe_v.push_back(detail::forward_mlp(params.value_head, safe_tr.back().h_fused));
        query.push_back(detail::forward_mlp(params.query_head, concepts.matrix.row(batch[i].concept_id).transpose()));
        detail::check_finite(unsafe_v.back().out, "value_head");
        detail::check_finite(query.back().out, "query_head");
    }

    const auto ni = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd scores(ni, ni);
    Eigen::VectorXd safe(ni);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cosine(unsafe_v[i].out, query[j].out);
        }
        safe(static_cast<Eigen::Index>(i)) = cosine(safe_v[i].out, query[i].out);
    }

    const double tau = params.tau();
    ScoreGradient sg;
    GradientResult res{DetectorParams::zeros(params.config), {}};
    res.loss = contrastive_loss(scores, safe, tau, &sg);
    if (!std::isfinite(res.loss.total())) {
        fail(ErrorKind::Numeric, "non-finite loss in layer 'contrastive_loss'");
    }

    const Eigen::Index dm = params.config.d_m;
    std::vector<Eigen::VectorXd> d_query(n, Eigen::VectorXd::Zero(dm));
    DetectorParams& g = res.grads;
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        Eigen::VectorXd d_v = Eigen::VectorXd::Zero(dm);
        for (std::size_t j = 0; j < n; ++j) {
            const double w = sg.d_scores(ii, static_cast<Eigen::Index>(j));
            const auto cg_ij = cosine_grad(unsafe_v[i].out, query[j].out);
            d_v += w * cg_ij.d_a;
            d_query[j] += w * cg_ij.d_b;
        }
        const Eigen::VectorXd d_fused = detail::backward_mlp(params.value_head, unsafe_v[i], d_v, g.value_head);
        detail::backward_fusion(unsafe_tr[i], d_fused, params, g);

        const auto cg_safe = cosine_grad(safe_v[i].out, query[i].out);
        const Eigen::VectorXd d_vs = sg.d_safe(ii) * cg_safe.d_a;
        d_query[i] += sg.d_safe(ii) * cg_safe.d_b;
        const Eigen::VectorXd d_fused_s = detail::backward_mlp(params.value_head, safe_v[i], d_vs, g.value_head);
        detail::backward_fusion(safe_tr[i], d_fused_s, params, g);
    }
    for (std::size_t j = 0; j < n; ++j) {
        detail::backward_mlp(params.query_head, query[j], d_query[j], g.query_head);
    }
    g.log_tau = sg.d_tau * tau;

    for (const auto& b : g.blocks()) {
        if (!b.map().allFinite()) {
            fail(ErrorKind::Numeric, "non-finite gradient in layer '" + b.name + "'");
        }
    }
    return res;
}

}  // namespace cg

// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include "conceptguard/detector.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "conceptguard/error.hpp"
#include "detector_internal.hpp"

namespace cg {

// --- config -----------------------------------------------------------------

void DetectorConfig::validate() const {
    auto bad = [](const std::string& m) { fail(ErrorKind::Config, "detector config: " + m); };
    if (d <= 0 || d_m <= 0 || ffn_dim <= 0 || heads <= 0 || gate_dim() <= 0) {
        bad("dimensions and head count must be positive");
    }
    if (d_m % heads != 0) {
        bad("d_m (" + std::to_string(d_m) + ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
        bad("dropout_p must lie in [0, 1)");
    }
    if (!(tau_init > 0.0) || !std::isfinite(tau_init)) {
        bad("tau_init must be > 0");
    }
    if (!(lr >= 0.0) || batch_size < 1 || epochs < 0) {
        bad("lr must be >= 0, batch_size >= 1, epochs >= 0");
    }
    if (!(weight_decay >= 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
        !(adam_eps > 0.0)) {
        bad("invalid AdamW hyperparameters");
    }
}

std::string DetectorConfig::to_json() const {
    nlohmann::ordered_json j;
    j["d"] = d;
    j["d_m"] = d_m;
    j["ffn_dim"] = ffn_dim;
    j["heads"] = heads;
    j["gate_hidden"] = gate_dim();
    j["dropout_p"] = dropout_p;
    j["tau_init"] = tau_init;
    j["lr"] = lr;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["weight_decay"] = weight_decay;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["seed"] = seed;
    return j.dump();
}

DetectorConfig DetectorConfig::from_json(const std::string& text, DetectorConfig c) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("detector config is not valid JSON: ") + e.what());
    }
    try {
        c.d = j.value("d", c.d);
        c.d_m = j.value("d_m", c.d_m);
        c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
        c.heads = j.value("heads", c.heads);
        c.gate_hidden = j.value("gate_hidden", c.gate_hidden);
        c.dropout_p = j.value("dropout_p", c.dropout_p);
        c.tau_init = j.value("tau_init", c.tau_init);
        c.lr = j.value("lr", c.lr);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Config, std::string("detector config field has the wrong type: ") + e.what());
    }
    return c;
}

DetectorConfig DetectorConfig::from_json(const std::string& text) {
    return from_json(text, DetectorConfig{});
}

// --- parameters -------------------------------------------------------------

double DetectorParams::tau() const {
    return std::exp(log_tau);
}

namespace {

void add_block(std::vector<ParamBlock>& out, std::string name, Eigen::MatrixXd& m, bool decay) {
    out.push_back({std::move(name), m.data(), m.rows(), m.cols(), decay});
}

void add_block(std::vector<ParamBlock>& out, std::string name, Eigen::VectorXd& v) {
    out.push_back({std::move(name), v.data(), v.size(), 1, false});
}

void add_attention(std::vector<ParamBlock>& out, const std::string& p, AttentionWeights& a) {
    add_block(out, p + ".wq", a.wq, true);
    add_block(out, p + ".bq", a.bq);
    add_block(out, p + ".wk", a.wk, true);
    add_block(out, p + ".bk", a.bk);
    add_block(out, p + ".wv", a.wv, true);
    add_block(out, p + ".bv", a.bv);
    add_block(out, p + ".wo", a.wo, true);
    add_block(out, p + ".bo", a.bo);
}

void add_mlp(std::vector<ParamBlock>& out, const std::string& p, TwoLayerMlp& m) {
    add_block(out, p + ".w1", m.w1, true);
    add_block(out, p + ".b1", m.b1);
    add_block(out, p + ".w2", m.w2, true);
    add_block(out, p + ".b2", m.b2);
}

void shape_attention(AttentionWeights& a, int dm) {
    for (auto* w : {&a.wq, &a.wk, &a.wv, &a.wo}) {
        w->setZero(dm, dm);
    }
    for (auto* b : {&a.bq, &a.bk, &a.bv, &a.bo}) {
        b->setZero(dm);
    }
}

void shape_mlp(TwoLayerMlp& m, int in, int hidden, int out) {
    m.w1.setZero(hidden, in);
    m.b1.setZero(hidden);
    m.w2.setZero(out, hidden);
    m.b2.setZero(out);
}

}  // namespace

std::vector<ParamBlock> DetectorParams::blocks() {
    std::vector<ParamBlock> out;
    add_block(out, "img_proj", img_proj, true);
    add_block(out, "txt_proj", txt_proj, true);
    add_attention(out, "attn_img", attn_img);
    add_attention(out, "attn_txt", attn_txt);
    add_mlp(out, "ffn_img", ffn_img);
    add_mlp(out, "ffn_txt", ffn_txt);
    add_mlp(out, "gate", gate);
    add_block(out, "fuse.w", fuse_w, true);
    add_block(out, "fuse.b", fuse_b);
    add_mlp(out, "value_head", value_head);
    add_mlp(out, "query_head", query_head);
    out.push_back({"log_tau", &log_tau, 1, 1, false});
    return out;
}

std::size_t DetectorParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks()) {
        n += static_cast<std::size_t>(b.size());
    }
    return n;
}

DetectorParams DetectorParams::zeros(const DetectorConfig& cfg) {
    cfg.validate();
    DetectorParams p;
    p.config = cfg;
    p.img_proj.setZero(cfg.d_m, cfg.d);
    p.txt_proj.setZero(cfg.d_m, cfg.d);
    shape_attention(p.attn_img, cfg.d_m);
    shape_attention(p.attn_txt, cfg.d_m);
    shape_mlp(p.ffn_img, cfg.d_m, cfg.ffn_dim, cfg.d_m);
    shape_mlp(p.ffn_txt, cfg.d_m, cfg.ffn_dim, cfg.d_m);
    shape_mlp(p.gate, 2 * cfg.d_m, cfg.gate_dim(), 2);
    p.fuse_w.setZero(cfg.d_m, 2 * cfg.d_m);
    p.fuse_b.setZero(cfg.d_m);
    shape_mlp(p.value_head, cfg.d_m, cfg.d_m, cfg.d_m);
    shape_mlp(p.query_head, cfg.d, cfg.d_m, cfg.d_m);
    p.log_tau = 0.0;
    return p;
}

DetectorParams init_params(const DetectorConfig& cfg) {
    DetectorParams p = DetectorParams::zeros(cfg);
    Rng rng(derive_seed(cfg.seed, "detector-init"));
    for (auto& b : p.blocks()) {
        if (!b.decay) {
            continue;  // biases and log_tau
        }
        // weights are (out x in); fan_in is the column count
        const double bound = 1.0 / std::sqrt(static_cast<double>(b.cols));
        auto m = b.map();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                m(r, c) = rng.uniform(-bound, bound);
            }
        }
    }
    p.log_tau = std::log(cfg.tau_init);
    return p;
}

// --- forward ----------------------------------------------------------------

namespace detail {

void check_finite(const Eigen::VectorXd& v, const char* layer) {
    if (!v.allFinite()) {
        fail(ErrorKind::Numeric, std::string("non-finite activation in layer '") + layer + "'");
    }
}

Eigen::VectorXd dropout_mask(Eigen::Index n, double p, Rng* rng) {
    if (rng == nullptr || p <= 0.0) {
        return {};
    }
    Eigen::VectorXd m(n);
    const double keep = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < n; ++i) {
        m(i) = rng->uniform() < p ? 0.0 : keep;
    }
    return m;
}

MlpTrace forward_mlp(const TwoLayerMlp& mlp, const Eigen::VectorXd& x, double dropout_p, Rng* rng) {
    MlpTrace t;
    t.in = x;
    t.pre = mlp.w1 * x + mlp.b1;
    t.act = t.pre.cwiseMax(0.0);
    t.mask = dropout_mask(t.act.size(), dropout_p, rng);
    if (t.mask.size() > 0) {
        t.act = t.act.cwiseProduct(t.mask);
    }
    t.out = mlp.w2 * t.act + mlp.b2;
    return t;
}

DirectionTrace forward_direction(const AttentionWeights& a, const TwoLayerMlp& ffn, int heads,
                                 const Eigen::VectorXd& query_in, const Eigen::VectorXd& kv_in,
                                 double dropout_p, Rng* rng) {
    DirectionTrace t;
    t.query_in = query_in;
    t.kv_in = kv_in;
    t.q = a.wq * query_in + a.bq;
    t.k = a.wk * kv_in + a.bk;
    t.v = a.wv * kv_in + a.bv;

    const Eigen::Index dm = t.q.size();
    const Eigen::Index dh = dm / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    t.ctx.resize(dm);
    t.weights.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        // softmax over the keys of this head; the other modality contributes one
        const double logit = t.q.segment(h * dh, dh).dot(t.k.segment(h * dh, dh)) * scale;
        const double e = std::exp(logit - logit);
        const double w = e / e;
        t.weights[static_cast<std::size_t>(h)] = w;
        t.ctx.segment(h * dh, dh) = w * t.v.segment(h * dh, dh);
    }
    t.attn = a.wo * t.ctx + a.bo;
    t.attn_mask = dropout_mask(dm, dropout_p, rng);
    t.u = query_in + (t.attn_mask.size() > 0 ? Eigen::VectorXd(t.attn.cwiseProduct(t.attn_mask)) : t.attn);
    t.ffn = forward_mlp(ffn, t.u, dropout_p, rng);
    t.out = t.u + t.ffn.out;
    return t;
}

FusionTrace forward_fusion(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt,
                           const DetectorParams& p, Rng* rng) {
    const auto& cfg = p.config;
    if (f_img.size() != cfg.d || f_txt.size() != cfg.d) {
        fail(ErrorKind::Shape, "input features must have length d=" + std::to_string(cfg.d));
    }
    const double drop = rng != nullptr ? cfg.dropout_p : 0.0;
    FusionTrace t;
    t.f_img = f_img;
    t.f_txt = f_txt;
    t.h_img = p.img_proj * f_img;
    t.h_txt = p.txt_proj * f_txt;
    check_finite(t.h_img, "img_proj");
    check_finite(t.h_txt, "txt_proj");

    t.img = forward_direction(p.attn_img, p.ffn_img, cfg.heads, t.h_img, t.h_txt, drop, rng);
    t.txt = forward_direction(p.attn_txt, p.ffn_txt, cfg.heads, t.h_txt, t.h_img, drop, rng);
    check_finite(t.img.out, "cross_attend.img");
    check_finite(t.txt.out, "cross_attend.txt");

    Eigen::VectorXd g_in(2 * cfg.d_m);
    g_in << t.img.out, t.txt.out;
    t.gate = forward_mlp(p.gate, g_in);
    const Eigen::Vector2d logits = t.gate.out;
    const double mx = logits.maxCoeff();
    const Eigen::Vector2d e = (logits.array() - mx).exp().matrix();
    t.omega = e / e.sum();
    check_finite(t.omega, "gate");

    t.fuse_in.resize(2 * cfg.d_m);
    t.fuse_in << t.omega(0) * t.img.out, t.omega(1) * t.txt.out;
    t.h_fused = p.fuse_w * t.fuse_in + p.fuse_b;
    check_finite(t.h_fused, "fuse");
    return t;
}

}  // namespace detail

Projection project(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt, const DetectorParams& params) {
    const int d = params.config.d;
    if (f_img.size() != d || f_txt.size() != d) {
        fail(ErrorKind::Shape, "project: inputs must have length d=" + std::to_string(d));
    }
    return {params.img_proj * f_img, params.txt_proj * f_txt};
}

CrossAttention cross_attend(const Eigen::VectorXd& h_img, const Eigen::VectorXd& h_txt,
                            const DetectorParams& params, bool training, Rng* dropout_rng) {
    const int dm = params.config.d_m;
    if (h_img.size() != dm || h_txt.size() != dm) {
        fail(ErrorKind::Shape, "cross_attend: inputs must have length d_m=" + std::to_string(dm));
    }
    Rng* rng = training ? dropout_rng : nullptr;
    const double drop = rng != nullptr ? params.config.dropout_p : 0.0;
    auto img = detail::forward_direction(params.attn_img, params.ffn_img, params.config.heads, h_img, h_txt, drop, rng);
    auto txt = detail::forward_direction(params.attn_txt, params.ffn_txt, params.config.heads, h_txt, h_img, drop, rng);
    return {img.out, txt.out, img.weights, txt.weights};
}

GateFusion gate_fuse(const Eigen::VectorXd& h_img, const Eigen::VectorXd& h_txt, const DetectorParams& params) {
    const int dm = params.config.d_m;
    if (h_img.size() != dm || h_txt.size() != dm) {
        fail(ErrorKind::Shape, "gate_fuse: inputs must have length d_m=" + std::to_string(dm));
    }
    Eigen::VectorXd g_in(2 * dm);
    g_in << h_img, h_txt;
    const Eigen::Vector2d logits = detail::forward_mlp(params.gate, g_in).out;
    const double mx = logits.maxCoeff();
    const Eigen::Vector2d e = (logits.array() - mx).exp().matrix();
    const Eigen::Vector2d omega = e / e.sum();
    Eigen::VectorXd fuse_in(2 * dm);
    fuse_in << omega(0) * h_img, omega(1) * h_txt;
    return {params.fuse_w * fuse_in + params.fuse_b, omega(0), omega(1)};
}

Eigen::VectorXd value_head(const Eigen::VectorXd& h_fused, const DetectorParams& params) {
    if (h_fused.size() != params.config.d_m) {
        fail(ErrorKind::Shape, "value_head: input must have length d_m");
    }
    return detail::forward_mlp(params.value_head, h_fused).out;
}

Eigen::VectorXd query_head(const Eigen::VectorXd& f_c, const DetectorParams& params) {
    if (f_c.size() != params.config.d) {
        fail(ErrorKind::Shape, "query_head: concept vector must have length d");
    }
    return detail::forward_mlp(params.query_head, f_c).out;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) {
        fail(ErrorKind::Degenerate, "cosine of a zero-norm vector");
    }
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double score(const Eigen::VectorXd& h_fused, const Eigen::VectorXd& f_c, const DetectorParams& params) {
    return cosine(value_head(h_fused, params), query_head(f_c, params));
}

Eigen::VectorXd fused_representation(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt,
                                     const DetectorParams& params) {
    return detail::forward_fusion(f_img, f_txt, params, nullptr).h_fused;
}

std::vector<ScoredConcept> rank_concepts(const Eigen::VectorXd& scores, int k) {
    std::vector<ScoredConcept> all;
    all.reserve(static_cast<std::size_t>(scores.size()));
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
        all.push_back({static_cast<int>(i), scores(i)});
    }
    const auto kk = static_cast<std::size_t>(std::clamp<Eigen::Index>(k, 0, scores.size()));
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk), all.end(),
                      [](const ScoredConcept& a, const ScoredConcept& b) {
                          return a.score != b.score ? a.score > b.score : a.concept_id < b.concept_id;
                      });
    all.resize(kk);
    return all;
}

DetectionResult detect(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt,
                       const ConceptMatrix& concepts, const DetectorParams& params,
                       int k, double threshold) {
    if (concepts.size() == 0) {
        fail(ErrorKind::Config, "detect: concept matrix is empty");
    }
    if (concepts.dim() != params.config.d) {
        fail(ErrorKind::Shape, "detect: concept rows have length " + std::to_string(concepts.dim()) +
                                   ", detector expects " + std::to_string(params.config.d));
    }
    if (k < 0 || k > concepts.size()) {
        fail(ErrorKind::Config, "detect: k=" + std::to_string(k) + " exceeds vocabulary size " +
                                    std::to_string(concepts.size()));
    }
    const Eigen::VectorXd v = value_head(fused_representation(f_img, f_txt, params), params);
    DetectionResult res;
    res.tau = params.tau();
    res.scores.resize(concepts.size());
    for (int c = 0; c < concepts.size(); ++c) {
        res.scores(c) = cosine(v, query_head(concepts.matrix.row(c).transpose(), params));
    }
    res.s_max = res.scores.maxCoeff();
    res.top_k = rank_concepts(res.scores, k);
    res.predicted_label = res.s_max_logit() >= threshold ? Label::Unsafe : Label::Safe;
    return res;
}

// --- loss -------------------------------------------------------------------

namespace {

/// log-sum-exp of `row` plus one extra term, with softmax weights written to `p`.
double lse_with_extra(const Eigen::VectorXd& row, double extra, Eigen::VectorXd* p, double* p_extra) {
    const double mx = std::max(row.maxCoeff(), extra);
    const Eigen::ArrayXd e = (row.array() - mx).exp();
    const double e_extra = std::exp(extra - mx);
    const double sum = e.sum() + e_extra;
    if (p != nullptr) {
        *p = (e / sum).matrix();
        *p_extra = e_extra / sum;
    }
    return mx + std::log(sum);
}

}  // namespace

LossTerms contrastive_loss(const Eigen::MatrixXd& scores, const Eigen::VectorXd& safe, double tau,
                           ScoreGradient* grad) {
    const Eigen::Index n = scores.rows();
    if (n < 1 || scores.cols() != n || safe.size() != n) {
        fail(ErrorKind::Shape, "contrastive_loss: expects an N x N score table and N safe scores");
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    LossTerms loss;
    Eigen::MatrixXd d_logits;
    Eigen::VectorXd d_safe_logits;
    if (grad != nullptr) {
        d_logits.setZero(n, n);
        d_safe_logits.setZero(n);
    }
    Eigen::VectorXd p;
    double p_extra = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double pos = tau * scores(i, i);
        // image/text -> concept: row i against every in-batch concept label
        const double lse_f = lse_with_extra(tau * scores.row(i).transpose(), tau * safe(i),
                                            grad ? &p : nullptr, &p_extra);
        loss.forward += (lse_f - pos) * inv_n;
        if (grad != nullptr) {
            d_logits.row(i) += p.transpose() * inv_n;
            d_logits(i, i) -= inv_n;
            d_safe_logits(i) += p_extra * inv_n;
        }
        // concept -> image/text: concept of sample i against every in-batch sample
        const double lse_b = lse_with_extra(tau * scores.col(i), tau * safe(i), grad ? &p : nullptr, &p_extra);
        loss.backward += (lse_b - pos) * inv_n;
        if (grad != nullptr) {
            d_logits.col(i) += p * inv_n;
            d_logits(i, i) -= inv_n;
            d_safe_logits(i) += p_extra * inv_n;
        }
    }
    if (grad != nullptr) {
        grad->d_scores = tau * d_logits;
        grad->d_safe = tau * d_safe_logits;
        grad->d_tau = (d_logits.cwiseProduct(scores)).sum() + d_safe_logits.dot(safe);
    }
    return loss;
}

namespace {

void check_batch(std::span<const PairedSample> batch, const ConceptMatrix& concepts, const DetectorParams& params) {
    if (batch.empty()) {
        fail(ErrorKind::Validation, "batch is empty");
    }
    if (concepts.dim() != params.config.d) {
        fail(ErrorKind::Shape, "concept rows have length " + std::to_string(concepts.dim()) +
                                   ", detector expects " + std::to_string(params.config.d));
    }
    for (const auto& s : batch) {
        if (s.safe_image.size() == 0 || s.safe_text.size() == 0) {
            fail(ErrorKind::Validation, "sample '" + s.id + "' has no safe counterpart");
        }
        if (s.concept_id < 0 || s.concept_id >= concepts.size()) {
            fail(ErrorKind::Validation, "sample '" + s.id + "' has concept id outside the vocabulary");
        }
    }
}

}  // namespace

void batch_scores(std::span<const PairedSample> batch, const ConceptMatrix& concepts,
                  const DetectorParams& params, Eigen::MatrixXd& scores, Eigen::VectorXd& safe) {
    check_batch(batch, concepts, params);
    const auto n = static_cast<Eigen::Index>(batch.size());
    std::vector<Eigen::VectorXd> v(batch.size()), q(batch.size());
    scores.resize(n, n);
    safe.resize(n);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        v[i] = value_head(fused_representation(batch[i].image, batch[i].text, params), params);
        q[i] = query_head(concepts.matrix.row(batch[i].concept_id).transpose(), params);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            scores(i, j) = cosine(v[static_cast<std::size_t>(i)], q[static_cast<std::size_t>(j)]);
        }
        const auto& s = batch[static_cast<std::size_t>(i)];
        const Eigen::VectorXd vs = value_head(fused_representation(s.safe_image, s.safe_text, params), params);
        safe(i) = cosine(vs, q[static_cast<std::size_t>(i)]);
    }
}

LossTerms batch_loss(std::span<const PairedSample> batch, const ConceptMatrix& concepts,
                     const DetectorParams& params) {
    Eigen::MatrixXd scores;
    Eigen::VectorXd safe;
    batch_scores(batch, concepts, params, scores, safe);
    return contrastive_loss(scores, safe, params.tau());
}

}  // namespace cg

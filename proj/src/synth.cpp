// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>

#include "conceptguard/dataio.hpp"
#include "conceptguard/error.hpp"
#include "conceptguard/rng.hpp"

namespace cg {

namespace {

Eigen::VectorXd unit(const Eigen::VectorXd& v) {
    return v / v.norm();
}

/// Random unit vector orthogonal to the orthonormal columns of `basis`.
Eigen::VectorXd unit_in_complement(Rng& rng, const Eigen::MatrixXd& basis, Eigen::Index n) {
    for (;;) {
        Eigen::VectorXd v = rng.normal_vector(n);
        v -= basis * (basis.transpose() * v);
        // second pass removes the rounding residue of the first
        v -= basis * (basis.transpose() * v);
        const double norm = v.norm();
        if (norm > 1e-6) {
            return v / norm;
        }
    }
}

Eigen::MatrixXd random_anchors(Rng& rng, int count, int dim) {
    Eigen::MatrixXd a(count, dim);
    for (int c = 0; c < count; ++c) {
        a.row(c) = unit(rng.normal_vector(dim)).transpose();
    }
    return a;
}

Eigen::MatrixXd orthonormal_basis(const Eigen::MatrixXd& rows) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(rows.transpose());
    return qr.householderQ() * Eigen::MatrixXd::Identity(rows.cols(), rows.rows());
}

std::string fmt_id(const char* pattern, int a, int b) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, a, b);
    return buf;
}

struct PromptTokens {
    Eigen::MatrixXd embs;
    std::vector<std::string> strings;
};

}  // namespace

void SynthConfig::validate() const {
    auto reject = [](const std::string& msg) { fail(ErrorKind::Reject, "synth config: " + msg); };
    if (n_concepts < 2) {
        reject("n_concepts must be >= 2");
    }
    if (samples_per_concept < 4) {
        reject("samples_per_concept must be >= 4 so every concept reaches train, val and test "
               "(each instance populates all three scenarios)");
    }
    if (d < 2) {
        reject("d must be >= 2");
    }
    if (!(noise_sigma > 0.0) || !std::isfinite(noise_sigma)) {
        reject("noise_sigma must be > 0");
    }
    if (tokens_per_prompt < 2) {
        reject("tokens_per_prompt must be >= 2");
    }
    if (token_dim() <= n_concepts) {
        reject("token dimension must exceed n_concepts so benign tokens can avoid every anchor");
    }
}

SynthDataset synth_dataset(const SynthConfig& cfg) {
    cfg.validate();
    const int d = cfg.d;
    const int d_tok = cfg.token_dim();
    const double sigma = cfg.noise_sigma;

    Rng anchor_rng(derive_seed(cfg.seed, "anchors"));
    const Eigen::MatrixXd anchors = random_anchors(anchor_rng, cfg.n_concepts, d);
    Eigen::MatrixXd tok_anchors;
    if (d_tok == d) {
        tok_anchors = anchors;
    } else {
        Rng tok_rng(derive_seed(cfg.seed, "token-anchors"));
        tok_anchors = random_anchors(tok_rng, cfg.n_concepts, d_tok);
    }
    const Eigen::MatrixXd tok_basis = orthonormal_basis(tok_anchors);

    Rng control_rng(derive_seed(cfg.seed, "control"));
    const Eigen::VectorXd bos = unit(control_rng.normal_vector(d_tok));
    const Eigen::VectorXd eos = unit(control_rng.normal_vector(d_tok));

    const int m = cfg.samples_per_concept;
    const int n_val = std::max(1, static_cast<int>(std::lround(m / 10.0)));
    const int n_test = n_val;
    const int n_train = m - n_val - n_test;

    SynthDataset out;
    out.records.reserve(static_cast<std::size_t>(cfg.n_concepts) * m * 14);

    for (int c = 0; c < cfg.n_concepts; ++c) {
        const Eigen::VectorXd a = anchors.row(c).transpose();
        const Eigen::VectorXd b = tok_anchors.row(c).transpose();
        const Eigen::MatrixXd a_basis = a;  // unit column

        std::vector<int> order(m);
        for (int i = 0; i < m; ++i) {
            order[i] = i;
        }
        Rng split_rng(derive_seed(cfg.seed, fmt_id("split/c%d", c, 0)));
        split_rng.shuffle(order.begin(), order.end());
        std::vector<Split> split_of(m);
        for (int r = 0; r < m; ++r) {
            split_of[order[r]] = r < n_train ? Split::Train : (r < n_train + n_val ? Split::Val : Split::Test);
        }

        for (int i = 0; i < m; ++i) {
            Rng rng(derive_seed(cfg.seed, fmt_id("c%d/i%d", c, i)));

            auto benign_tokens = [&](int risk_pos, const Eigen::VectorXd* risk, const std::string& risk_str) {
                PromptTokens p;
                const int L = cfg.tokens_per_prompt + 2;
                p.embs.resize(L, d_tok);
                p.strings.resize(L);
                p.embs.row(0) = bos.transpose();
                p.strings[0] = "<bos>";
                for (int t = 0; t < cfg.tokens_per_prompt; ++t) {
                    if (t == risk_pos) {
                        p.embs.row(t + 1) = risk->transpose();
                        p.strings[t + 1] = risk_str;
                    } else {
                        p.embs.row(t + 1) = unit_in_complement(rng, tok_basis, d_tok).transpose();
                        p.strings[t + 1] = "w" + std::to_string(rng.below(5000));
                    }
                }
                p.embs.row(L - 1) = eos.transpose();
                p.strings[L - 1] = "<eos>";
                return p;
            };

            const Eigen::VectorXd safe_img = unit_in_complement(rng, a_basis, d);
            const Eigen::VectorXd safe_txt = unit_in_complement(rng, a_basis, d);
            const PromptTokens safe_tokens = benign_tokens(-1, nullptr, {});

            struct VariantDraw {
                Eigen::VectorXd img, txt;
                PromptTokens tokens;
            };
            std::array<VariantDraw, 3> draws;
            const std::string base_name = fmt_id("concept_%03d", c, 0);
            for (Variant v : kVariants) {
                VariantDraw& dr = draws[static_cast<int>(v)];
                dr.img = unit(a + rng.normal_vector(d, sigma));
                Eigen::VectorXd risk_tok;
                std::string risk_str = base_name;
                if (v == Variant::Adv) {
                    const Eigen::VectorXd benign = unit_in_complement(rng, a_basis, d);
                    dr.txt = unit(unit(0.7 * a + 0.3 * benign) + rng.normal_vector(d, sigma));
                    const Eigen::VectorXd tok_benign = unit_in_complement(rng, tok_basis, d_tok);
                    risk_tok = unit(unit(0.7 * b + 0.3 * tok_benign) + rng.normal_vector(d_tok, sigma));
                    risk_str += "~adv";
                } else {
                    dr.txt = unit(a + rng.normal_vector(d, sigma));
                    risk_tok = unit(b + rng.normal_vector(d_tok, sigma));
                    if (v == Variant::Syn) {
                        risk_str += "~syn";
                    }
                }
                const int risk_pos = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.tokens_per_prompt)));
                dr.tokens = benign_tokens(risk_pos, &risk_tok, risk_str);
            }

            auto emit = [&](Scenario s, Variant v) {
                const std::string stem = fmt_id("c%03d-i%03d", c, i) + "-" + to_string(s) + "-" + to_string(v);
                const VariantDraw& dr = draws[static_cast<int>(v)];
                EmbeddingRecord u;
                u.sample_id = stem + "-U";
                u.label = Label::Unsafe;
                u.concept_id = c;
                u.scenario = s;
                u.variant = v;
                u.split = split_of[i];
                switch (s) {
                case Scenario::IT_U:
                    u.image_emb = dr.img;
                    u.text_emb = dr.txt;
                    u.token_embs = dr.tokens.embs;
                    u.token_strings = dr.tokens.strings;
                    break;
                case Scenario::SI_UT:
                    u.image_emb = safe_img;
                    u.text_emb = dr.txt;
                    u.token_embs = dr.tokens.embs;
                    u.token_strings = dr.tokens.strings;
                    break;
                case Scenario::UI_ST:
                    u.image_emb = dr.img;
                    u.text_emb = safe_txt;
                    u.token_embs = safe_tokens.embs;
                    u.token_strings = safe_tokens.strings;
                    break;
                }
                EmbeddingRecord sf;
                sf.sample_id = stem + "-S";
                sf.label = Label::Safe;
                sf.concept_id = kNoConcept;
                sf.scenario = s;
                sf.variant = v;
                sf.split = split_of[i];
                sf.image_emb = safe_img;
                sf.text_emb = safe_txt;
                sf.token_embs = safe_tokens.embs;
                sf.token_strings = safe_tokens.strings;
                out.records.push_back(std::move(u));
                out.records.push_back(std::move(sf));
            };

            for (Scenario s : {Scenario::IT_U, Scenario::SI_UT}) {
                for (Variant v : kVariants) {
                    emit(s, v);
                }
            }
            emit(Scenario::UI_ST, Variant::Exp);
        }
    }

    out.manifest = summarize(out.records);
    out.manifest.vocab_ref = "synthetic";
    out.manifest.seed = cfg.seed;

    const std::string tag = "synthetic-anchors:seed=" + std::to_string(cfg.seed);
    out.concepts.matrix = anchors;
    out.concepts.encoder_tag = tag;
    out.concepts.normalized = true;
    out.token_concepts.matrix = tok_anchors;
    out.token_concepts.encoder_tag = tag + ":tokens";
    out.token_concepts.normalized = true;
    for (int c = 0; c < cfg.n_concepts; ++c) {
        const std::string name = fmt_id("concept_%03d", c, 0);
        out.concepts.names.push_back(name);
        out.concepts.categories.push_back("synthetic");
    }
    out.token_concepts.names = out.concepts.names;
    out.token_concepts.categories = out.concepts.categories;
    return out;
}

}  // namespace cg

// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <unordered_map>

#include "conceptguard/detector.hpp"
#include "conceptguard/error.hpp"

namespace cg {

std::vector<PairedSample> build_training_pairs(const std::vector<EmbeddingRecord>& records, Split split) {
    std::unordered_map<std::string, const EmbeddingRecord*> safe_by_stem;
    for (const auto& r : records) {
        if (r.split == split && r.label == Label::Safe) {
            safe_by_stem.emplace(pair_stem(r.sample_id), &r);
        }
    }
    std::vector<PairedSample> pairs;
    for (const auto& r : records) {
        if (r.split != split || r.label != Label::Unsafe) {
            continue;
        }
        const auto it = safe_by_stem.find(pair_stem(r.sample_id));
        if (it == safe_by_stem.end()) {
            fail(ErrorKind::Validation, "unsafe sample '" + r.sample_id + "' has no safe counterpart");
        }
        pairs.push_back({r.sample_id, r.image_emb, r.text_emb, r.concept_id, it->second->image_emb,
                         it->second->text_emb});
    }
    return pairs;
}

namespace {

class AdamW {
public:
    AdamW(const DetectorConfig& cfg, const DetectorParams& shape)
        : cfg_(cfg), m_(DetectorParams::zeros(shape.config)), v_(DetectorParams::zeros(shape.config)) {}

    void step(DetectorParams& params, const DetectorParams& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        auto pb = params.blocks();
        const auto gb = grads.blocks();
        auto mb = m_.blocks();
        auto vb = v_.blocks();
        for (std::size_t i = 0; i < pb.size(); ++i) {
            auto p = pb[i].map();
            const auto g = gb[i].map();
            auto m = mb[i].map();
            auto v = vb[i].map();
            if (pb[i].decay && cfg_.weight_decay > 0.0) {
                p *= 1.0 - cfg_.lr * cfg_.weight_decay;
            }
            m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
            v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            p.array() -= cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.adam_eps);
        }
    }

private:
    DetectorConfig cfg_;
    DetectorParams m_;
    DetectorParams v_;
    int t_ = 0;
};

}  // namespace

TrainResult train_from(DetectorParams params, std::span<const PairedSample> pairs,
                       const ConceptMatrix& concepts, const DetectorConfig& cfg,
                       const EpochCallback& on_epoch) {
    cfg.validate();
    if (pairs.empty()) {
        fail(ErrorKind::Config, "train: the training split has no paired unsafe samples");
    }
    if (concepts.dim() != cfg.d) {
        fail(ErrorKind::Config, "train: concept rows have length " + std::to_string(concepts.dim()) +
                                    " but d=" + std::to_string(cfg.d));
    }

    AdamW opt(cfg, params);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
    Rng* drop = cfg.dropout_p > 0.0 ? &dropout_rng : nullptr;

    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    TrainResult res;
    std::vector<PairedSample> batch;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        int n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            batch.clear();
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(pairs[order[i]]);
            }
            auto g = compute_gradients(batch, concepts, params, drop);
            opt.step(params, g.grads);
            loss_sum += g.loss.total();
            ++n_batches;
        }
        const double epoch_loss = loss_sum / n_batches;
        res.epoch_loss.push_back(epoch_loss);
        if (on_epoch) {
            on_epoch(epoch, epoch_loss);
        }
    }
    res.params = std::move(params);
    return res;
}

TrainResult train(std::span<const PairedSample> pairs, const ConceptMatrix& concepts,
                  const DetectorConfig& cfg, const EpochCallback& on_epoch) {
    return train_from(init_params(cfg), pairs, concepts, cfg, on_epoch);
}

}  // namespace cg

// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

// Forward traces kept for backpropagation.

#pragma once

#include <vector>

#include <Eigen/Dense>

#include "conceptguard/detector.hpp"

namespace cg::detail {

struct MlpTrace {
    Eigen::VectorXd in;
    Eigen::VectorXd pre;   // w1 in + b1
    Eigen::VectorXd act;   // relu(pre), after dropout when a mask is present
    Eigen::VectorXd mask;  // empty when dropout is off
    Eigen::VectorXd out;
};

struct DirectionTrace {
    Eigen::VectorXd query_in;  // h of the attending modality
    Eigen::VectorXd kv_in;     // h of the other modality
    Eigen::VectorXd q, k, v;
    std::vector<double> weights;  // one per head
    Eigen::VectorXd ctx;
    Eigen::VectorXd attn;       // wo ctx + bo
    Eigen::VectorXd attn_mask;  // empty when dropout is off
    Eigen::VectorXd u;          // residual after attention
    MlpTrace ffn;
    Eigen::VectorXd out;        // u + ffn(u)
};

struct FusionTrace {
    Eigen::VectorXd f_img, f_txt;
    Eigen::VectorXd h_img, h_txt;
    DirectionTrace img, txt;
    MlpTrace gate;
    Eigen::Vector2d omega;
    Eigen::VectorXd fuse_in;
    Eigen::VectorXd h_fused;
};

Eigen::VectorXd dropout_mask(Eigen::Index n, double p, Rng* rng);

MlpTrace forward_mlp(const TwoLayerMlp& mlp, const Eigen::VectorXd& x, double dropout_p = 0.0,
                     Rng* rng = nullptr);

/// Accumulates into `g`, returns dL/dx.
Eigen::VectorXd backward_mlp(const TwoLayerMlp& mlp, const MlpTrace& t, const Eigen::VectorXd& d_out,
                             TwoLayerMlp& g);

DirectionTrace forward_direction(const AttentionWeights& attn, const TwoLayerMlp& ffn, int heads,
                                 const Eigen::VectorXd& query_in, const Eigen::VectorXd& kv_in,
                                 double dropout_p, Rng* rng);

FusionTrace forward_fusion(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt,
                           const DetectorParams& params, Rng* rng);

void backward_fusion(const FusionTrace& t, const Eigen::VectorXd& d_fused, const DetectorParams& params,
                     DetectorParams& grads);

void check_finite(const Eigen::VectorXd& v, const char* layer);

}  // namespace cg::detail

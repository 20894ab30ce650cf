// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "conceptguard/detector.hpp"
#include "conceptguard/error.hpp"
#include "conceptguard/rng.hpp"

namespace testing_support {

inline Eigen::VectorXd random_vector(cg::Rng& rng, int n, double sigma = 1.0) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) {
        v(i) = sigma * rng.normal();
    }
    return v;
}

inline Eigen::MatrixXd random_matrix(cg::Rng& rng, int rows, int cols, double sigma = 1.0) {
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            m(r, c) = sigma * rng.normal();
        }
    }
    return m;
}

/// Every parameter (biases and log_tau included) drawn at random.
inline cg::DetectorParams random_params(const cg::DetectorConfig& cfg, std::uint64_t seed, double scale = 0.5) {
    cg::DetectorParams p = cg::DetectorParams::zeros(cfg);
    cg::Rng rng(seed);
    for (auto& b : p.blocks()) {
        auto m = b.map();
        for (Eigen::Index c = 0; c < b.cols; ++c) {
            for (Eigen::Index r = 0; r < b.rows; ++r) {
                m(r, c) = scale * rng.normal();
            }
        }
    }
    p.log_tau = std::log(cfg.tau_init) + 0.1 * rng.normal();
    return p;
}

inline cg::DetectorConfig small_config() {
    cg::DetectorConfig cfg;
    cfg.d = 8;
    cfg.d_m = 4;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.dropout_p = 0.0;
    cfg.seed = 3;
    return cfg;
}

inline cg::ConceptMatrix random_concepts(cg::Rng& rng, int n, int d) {
    cg::ConceptMatrix cm;
    cm.matrix = random_matrix(rng, n, d);
    cm.encoder_tag = "test";
    return cm;
}

inline std::vector<cg::PairedSample> random_batch(cg::Rng& rng, int n, int d, int n_concepts) {
    std::vector<cg::PairedSample> out;
    for (int i = 0; i < n; ++i) {
        cg::PairedSample s;
        s.id = "s" + std::to_string(i);
        s.image = random_vector(rng, d);
        s.text = random_vector(rng, d);
        s.safe_image = random_vector(rng, d);
        s.safe_text = random_vector(rng, d);
        s.concept_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_concepts)));
        out.push_back(std::move(s));
    }
    return out;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("cg-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

template <class F>
cg::ErrorKind error_kind_of(F&& f) {
    try {
        f();
    } catch (const cg::Error& e) {
        return e.kind();
    }
    throw std::runtime_error("expected a cg::Error");
}

}  // namespace testing_support

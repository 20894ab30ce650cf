// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <json.hpp>

#include "conceptguard/error.hpp"
#include "conceptguard/suppressor.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cg;
using testing_support::error_kind_of;
using testing_support::random_matrix;
using testing_support::random_vector;

namespace {

Eigen::MatrixXd unit_rows(Eigen::MatrixXd m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        m.row(r).normalize();
    }
    return m;
}

ConceptMatrix token_concepts(int n, int d, std::uint64_t seed) {
    Rng rng(seed);
    ConceptMatrix cm;
    cm.matrix = unit_rows(random_matrix(rng, n, d));
    for (int i = 0; i < n; ++i) {
        cm.names.push_back("concept" + std::to_string(i));
    }
    return cm;
}

DetectionResult fake_detection(int n, int top, double s_top, double tau) {
    DetectionResult d;
    d.scores = Eigen::VectorXd::Constant(n, 0.1);
    d.scores(top) = s_top;
    d.s_max = s_top;
    d.tau = tau;
    return d;
}

}  // namespace

TEST_CASE("projector onto a single axis") {
    Eigen::MatrixXd e(1, 3);
    e << 2.0, 0.0, 0.0;
    const auto s = build_risk_subspace(e);
    Eigen::Matrix3d expect = Eigen::Matrix3d::Zero();
    expect(0, 0) = 1.0;
    CHECK((s.projector - expect).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(s.rank == 1);
    CHECK(s.k == 1);
}

TEST_CASE("duplicate rows collapse to rank one") {
    Rng rng(1);
    const Eigen::RowVectorXd v = random_vector(rng, 6).transpose();
    Eigen::MatrixXd e(3, 6);
    e << v, v, 2.0 * v;
    const auto s = build_risk_subspace(e);
    CHECK(s.rank == 1);
    CHECK((s.projector - oracle::gram_schmidt_projector(e)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("projector algebra on random subspaces") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const auto e = random_matrix(rng, 5, 12);
        const auto s = build_risk_subspace(e);
        const auto& p = s.projector;
        CHECK(s.rank == 5);
        CHECK((p - oracle::gram_schmidt_projector(e)).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((p * p - p).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((p - p.transpose()).cwiseAbs().maxCoeff() == 0.0);
        CHECK((p * e.transpose() - e.transpose()).cwiseAbs().maxCoeff() < 1e-12);
        const Eigen::MatrixXd closed = e.transpose() * (e * e.transpose()).inverse() * e;
        CHECK((p - closed).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("subspace input checks") {
    CHECK(error_kind_of([] { build_risk_subspace(Eigen::MatrixXd::Zero(2, 3)); }) == ErrorKind::Degenerate);
    CHECK(error_kind_of([] { build_risk_subspace(Eigen::MatrixXd(0, 3)); }) == ErrorKind::Shape);
    Eigen::MatrixXd bad = Eigen::MatrixXd::Ones(1, 3);
    bad(0, 1) = std::nan("");
    CHECK(error_kind_of([&] { build_risk_subspace(bad); }) == ErrorKind::Validation);
    CHECK(error_kind_of([] { build_risk_subspace(Eigen::MatrixXd::Ones(1, 3), 0.0); }) == ErrorKind::Config);
}

TEST_CASE("pseudo-inverse satisfies the Penrose identities") {
    Rng rng(3);
    Eigen::MatrixXd a = random_matrix(rng, 4, 7);
    a.row(3) = a.row(0) + a.row(1);
    const auto x = pseudo_inverse(a);
    CHECK((a * x * a - a).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((x * a * x - x).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(((a * x).transpose() - a * x).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("residual norms") {
    Rng rng(4);
    const auto e = random_matrix(rng, 3, 8);
    const auto p = build_risk_subspace(e).projector;
    Eigen::MatrixXd tokens(3, 8);
    tokens.row(0) = 0.7 * e.row(0) - 2.0 * e.row(2);
    // Orthogonal to the span: remove the projection of a random vector.
    const Eigen::VectorXd g = random_vector(rng, 8);
    tokens.row(1) = (g - oracle::gram_schmidt_projector(e) * g).transpose();
    tokens.row(2) = random_vector(rng, 8).transpose();
    const auto r = residual_norms(tokens, p);
    CHECK(r(0) < 1e-12);
    CHECK(std::abs(r(1) - tokens.row(1).norm()) < 1e-12);
    CHECK(std::abs(r(2) - oracle::residual(p, tokens.row(2).transpose())) < 1e-12);
    CHECK(error_kind_of([&] { residual_norms(tokens.leftCols(4), p); }) == ErrorKind::Shape);
}

TEST_CASE("localisation worked example") {
    Eigen::Vector3d r(0.1, 1.0, 1.0);
    const auto f = localize_from_residuals(r, -0.02, {true, true, true});
    CHECK(f == std::vector<bool>{true, false, false});

    Eigen::VectorXd equal = Eigen::VectorXd::Constant(6, 0.4);
    const auto none = localize_from_residuals(equal, -0.02, std::vector<bool>(6, true));
    CHECK(none == std::vector<bool>(6, false));

    // Control tokens are neither flagged nor counted.
    Eigen::VectorXd with_ctrl(5);
    with_ctrl << 0.0, 0.1, 1.0, 1.0, 0.0;
    const auto g = localize_from_residuals(with_ctrl, -0.02, {false, true, true, true, false});
    CHECK(g == std::vector<bool>{false, true, false, false, false});
}

TEST_CASE("localisation is scale invariant and matches the literal rule") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const int l = 2 + static_cast<int>(rng.below(20));
        Eigen::VectorXd r(l);
        std::vector<double> rv;
        std::vector<bool> content;
        for (int i = 0; i < l; ++i) {
            r(i) = rng.uniform(0.0, 2.0);
            rv.push_back(r(i));
            content.push_back(i == 0 || i == 1 || rng.uniform() < 0.8);
        }
        const auto f = localize_from_residuals(r, -0.1, content);
        CHECK(f == oracle::localize(rv, -0.1, content));
        CHECK(localize_from_residuals(r * 8.0, -0.1, content) == f);
    }
}

TEST_CASE("localisation needs two content tokens") {
    Eigen::Vector3d r(0.1, 1.0, 1.0);
    CHECK(error_kind_of([&] { localize_from_residuals(r, -0.02, {false, true, false}); }) ==
          ErrorKind::LocalizationUndefined);
    CHECK(error_kind_of([&] { localize_from_residuals(r, -0.02, {true, true}); }) == ErrorKind::Shape);
}

TEST_CASE("planted risk tokens are found") {
    const int d = 64, k = 15, l = 10, prompts = 200;
    Rng rng(6);
    int planted_hits = 0, benign_flags = 0, benign_total = 0;
    for (int n = 0; n < prompts; ++n) {
        const auto e = unit_rows(random_matrix(rng, k, d));
        const auto p = build_risk_subspace(e).projector;
        Eigen::MatrixXd tokens = unit_rows(random_matrix(rng, l, d));
        const auto at = static_cast<Eigen::Index>(rng.below(l));
        const auto which = static_cast<Eigen::Index>(rng.below(k));
        tokens.row(at) = (e.row(which) + 0.1 * random_vector(rng, d).transpose() / std::sqrt(d)).normalized();
        const auto f = localize_risk_tokens(tokens, p, -0.02, std::vector<bool>(l, true));
        for (Eigen::Index i = 0; i < l; ++i) {
            if (i == at) {
                planted_hits += f[static_cast<std::size_t>(i)] ? 1 : 0;
            } else {
                benign_flags += f[static_cast<std::size_t>(i)] ? 1 : 0;
                ++benign_total;
            }
        }
    }
    CHECK(planted_hits >= 0.95 * prompts);
    CHECK(benign_flags <= 0.05 * benign_total);
}

TEST_CASE("suppression") {
    Eigen::MatrixXd e(1, 3);
    e << 1.0, 0.0, 0.0;
    const auto p = build_risk_subspace(e).projector;
    Eigen::MatrixXd t(2, 3);
    t << 1.0, 1.0, 0.0, 0.5, 0.0, 2.0;
    const auto s = suppress(t, {true, false}, p);
    CHECK(s.row(0) == Eigen::RowVector3d(0.0, 1.0, 0.0));
    CHECK(s.row(1) == t.row(1));

    Rng rng(7);
    const auto e2 = random_matrix(rng, 4, 16);
    const auto p2 = build_risk_subspace(e2).projector;
    const auto t2 = random_matrix(rng, 9, 16);
    CHECK(suppress(t2, std::vector<bool>(9, false), p2) == t2);
    const std::vector<bool> all(9, true);
    const auto once = suppress(t2, all, p2);
    const auto twice = suppress(once, all, p2);
    CHECK((once - twice).cwiseAbs().maxCoeff() < 1e-12);
    for (Eigen::Index i = 0; i < 9; ++i) {
        CHECK(once.row(i).norm() <= t2.row(i).norm() + 1e-12);
        CHECK((once.row(i) * e2.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    }
    CHECK(error_kind_of([&] { suppress(t2, {true}, p2); }) == ErrorKind::Shape);
}

TEST_CASE("guard plan stays passive below the threshold") {
    const auto cm = token_concepts(20, 16, 8);
    const double tau = 1.0 / 0.07;
    GuardConfig cfg;
    cfg.theta = 0.6 * tau + 0.01;
    Rng rng(9);
    const auto tokens = random_matrix(rng, 6, 16);
    std::vector<bool> mask{false, true, true, true, true, false};
    const auto plan = make_guard_plan(fake_detection(20, 4, 0.6, tau), tokens, mask, cm, cfg);
    CHECK_FALSE(plan.activated);
    CHECK_FALSE(plan.edit_directive.has_value());
    CHECK(plan.schedule(1) == StepChoice::Original);
    CHECK(conditioning_for_step(plan, 1) == tokens);
}

TEST_CASE("guard plan activates, suppresses and schedules") {
    const auto cm = token_concepts(20, 16, 10);
    const double tau = 1.0 / 0.07;
    GuardConfig cfg;
    cfg.theta = 0.6 * tau - 0.01;
    Rng rng(11);
    Eigen::MatrixXd tokens = unit_rows(random_matrix(rng, 6, 16));
    tokens.row(2) = cm.matrix.row(4);
    const std::vector<bool> mask{false, true, true, true, true, false};
    const auto plan = make_guard_plan(fake_detection(20, 4, 0.6, tau), tokens, mask, cm, cfg);
    REQUIRE(plan.activated);
    CHECK(plan.top_concepts.size() == 15);
    CHECK(plan.top_concepts.front().concept_id == 4);
    CHECK(plan.subspace_rank == 15);
    CHECK(plan.flags[2]);
    CHECK_FALSE(plan.flags[0]);
    CHECK(plan.suppressed_tokens.row(2).norm() < 1e-10);
    CHECK(plan.suppressed_tokens.row(0) == tokens.row(0));
    CHECK(plan.schedule(13) == StepChoice::Suppressed);
    CHECK(plan.schedule(14) == StepChoice::Original);
    CHECK(&conditioning_for_step(plan, 1) == &plan.suppressed_tokens);
    CHECK(&conditioning_for_step(plan, 50) == &plan.original_tokens);
    CHECK(error_kind_of([&] { plan.schedule(0); }) == ErrorKind::Range);
    CHECK(error_kind_of([&] { plan.schedule(51); }) == ErrorKind::Range);
    REQUIRE(plan.edit_directive.has_value());
    CHECK(plan.edit_directive->concept_id == 4);
    CHECK(plan.edit_directive->instruction == "remove or replace any depiction of concept4");

    const auto j = nlohmann::json::parse(guard_plan_to_json(plan, "x-U"));
    CHECK(j["sample_id"] == "x-U");
    CHECK(j["activated"] == true);
    CHECK(j["top_concepts"].size() == 15);
    CHECK(j["schedule"]["suppressed_through_step"] == 13);
    CHECK(j["edit_directive"]["concept_id"] == 4);
    CHECK(j["flags"][2] == true);
}

TEST_CASE("short prompts keep the edit directive and warn") {
    const auto cm = token_concepts(20, 16, 12);
    GuardConfig cfg;
    cfg.theta = 1.0;
    Rng rng(13);
    const auto tokens = random_matrix(rng, 3, 16);
    const auto plan = make_guard_plan(fake_detection(20, 2, 0.5, 10.0), tokens, {false, true, false}, cm, cfg);
    CHECK(plan.activated);
    CHECK(plan.warnings.size() == 1);
    CHECK(plan.suppressed_tokens == tokens);
    REQUIRE(plan.edit_directive.has_value());
    CHECK(plan.edit_directive->concept_id == 2);
}

TEST_CASE("guard configuration checks") {
    const auto cm = token_concepts(10, 8, 14);
    GuardConfig cfg;
    Rng rng(15);
    const auto tokens = random_matrix(rng, 4, 8);
    const std::vector<bool> mask(4, true);
    CHECK(error_kind_of([&] { make_guard_plan(fake_detection(10, 0, 0.9, 20.0), tokens, mask, cm, cfg); }) ==
          ErrorKind::Config);
    cfg.k = 3;
    cfg.n_steps = 60;
    CHECK(error_kind_of([&] { cfg.validate(); }) == ErrorKind::Config);
    cfg.n_steps = 13;
    cfg.alpha = -1.0;
    CHECK(error_kind_of([&] { cfg.validate(); }) == ErrorKind::Config);
}

TEST_CASE("mock image editor records calls") {
    MockImageEditor ed;
    CHECK(ed.edit("img7", render_edit_instruction("arson")) == "img7#edited-1");
    CHECK(ed.edit("img8", "x") == "img8#edited-2");
    REQUIRE(ed.calls().size() == 2);
    CHECK(ed.calls()[0].second == "remove or replace any depiction of arson");
}

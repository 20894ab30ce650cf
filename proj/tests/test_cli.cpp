// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "conceptguard/cli.hpp"
#include "conceptguard/dataio.hpp"
#include "conceptguard/digest.hpp"
#include "conceptguard/vocab.hpp"
#include "support.hpp"

using testing_support::scratch_dir;

namespace {

struct Captured {
    int code = 0;
    std::string out;
    std::string err;
};

Captured run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    Captured c;
    try {
        c.code = cg::cli::run(args);
    } catch (...) {
        std::cout.rdbuf(old_out);
        std::cerr.rdbuf(old_err);
        throw;
    }
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    c.out = out.str();
    c.err = err.str();
    return c;
}

std::string p(const std::filesystem::path& dir, const std::string& name) { return (dir / name).string(); }

/// synth-data + train on a tiny corpus; returns the bank path.
void tiny_pipeline(const std::filesystem::path& dir) {
    REQUIRE(run_cli({"synth-data", "--out", p(dir, "bank.cgeb"), "--n-concepts", "3", "--samples-per-concept", "10",
                     "--d", "12", "--seed", "5"})
                .code == 0);
    REQUIRE(run_cli({"train", "--data", p(dir, "bank.cgeb"), "--concepts", p(dir, "bank.concepts.cgeb"), "--out",
                     p(dir, "model.cgpt"), "--d-m", "8", "--heads", "2", "--ffn-dim", "16", "--epochs", "2",
                     "--batch-size", "8", "--seed", "1"})
                .code == 0);
}

}  // namespace

TEST_CASE("help lists every subcommand and exits cleanly") {
    const auto c = run_cli({"--help"});
    CHECK(c.code == cg::cli::kExitOk);
    for (const char* cmd : {"synth-data", "embed-concepts", "train", "detect", "suppress", "eval", "harmfulness",
                            "export-viz"}) {
        CHECK_MESSAGE(c.out.find(cmd) != std::string::npos, cmd);
    }
}

TEST_CASE("usage errors exit with 2") {
    CHECK(run_cli({}).code == cg::cli::kExitUsage);
    CHECK(run_cli({"train", "--no-such-flag"}).code == cg::cli::kExitUsage);
    CHECK(run_cli({"fly"}).code == cg::cli::kExitUsage);
}

TEST_CASE("missing inputs exit with 3 and name the path") {
    const auto dir = scratch_dir("cli-missing");
    const auto c = run_cli({"eval", "--data", "/nonexistent/bank.cgeb", "--baseline", "clip-text", "--concepts",
                            "/nonexistent/c.cgeb", "--out", p(dir, "r.json")});
    CHECK(c.code == cg::cli::kExitValidation);
    CHECK(c.err.find("/nonexistent/bank.cgeb") != std::string::npos);

    const auto t = run_cli({"train", "--data", p(dir, "missing.cgeb"), "--concepts", p(dir, "c.cgeb"), "--out",
                            p(dir, "m.cgpt")});
    CHECK(t.code == cg::cli::kExitValidation);
    CHECK(t.err.find(p(dir, "missing.cgeb")) != std::string::npos);
}

TEST_CASE("pipeline output is reproducible") {
    std::vector<std::string> digests;
    for (int round = 0; round < 2; ++round) {
        const auto dir = scratch_dir("cli-repro-" + std::to_string(round));
        tiny_pipeline(dir);
        const auto c = run_cli({"eval", "--ckpt", p(dir, "model.cgpt"), "--data", p(dir, "bank.cgeb"), "--concepts",
                                p(dir, "bank.concepts.cgeb"), "--out", p(dir, "report.json")});
        REQUIRE(c.code == 0);
        digests.push_back(cg::sha256_file(p(dir, "report.json")));
        CHECK(std::filesystem::exists(p(dir, "report.json.run.json")));
        CHECK(std::filesystem::exists(p(dir, "model.cgpt.run.json")));
        const auto j = nlohmann::json::parse(std::ifstream(p(dir, "report.json")));
        CHECK(j["shape"] == "table1");
        CHECK(j["cells"].size() == 7);
    }
    CHECK(digests[0] == digests[1]);
}

TEST_CASE("command-line flags override the config file") {
    const auto dir = scratch_dir("cli-config");
    std::ofstream(p(dir, "cfg.json")) << R"({"seed": 9, "synth": {"n_concepts": 3, "samples_per_concept": 4, "d": 8}})";
    REQUIRE(run_cli({"synth-data", "--config", p(dir, "cfg.json"), "--n-concepts", "2", "--out", p(dir, "a.cgeb")})
                .code == 0);
    const auto bank = cg::read_embedding_bank(p(dir, "a.cgeb"));
    std::set<int> concepts;
    for (const auto& r : bank.records) {
        if (r.label == cg::Label::Unsafe) {
            concepts.insert(r.concept_id);
        }
    }
    CHECK(concepts.size() == 2);
    CHECK(bank.manifest.d == 8);
    REQUIRE(bank.manifest.seed.has_value());
    CHECK(*bank.manifest.seed == 9);

    std::ofstream(p(dir, "bad.json")) << R"({"optimizer": {}})";
    CHECK(run_cli({"synth-data", "--config", p(dir, "bad.json"), "--out", p(dir, "b.cgeb")}).code ==
          cg::cli::kExitValidation);
}

TEST_CASE("degenerate judge anchors exit with 4") {
    const auto dir = scratch_dir("cli-degenerate");
    tiny_pipeline(dir);
    REQUIRE(run_cli({"suppress", "--ckpt", p(dir, "model.cgpt"), "--data", p(dir, "bank.cgeb"), "--concepts",
                     p(dir, "bank.concepts.cgeb"), "--token-concepts", p(dir, "bank.token_concepts.cgeb"), "--out",
                     p(dir, "plans"), "--theta", "-1000", "--k", "2"})
                .code == 0);
    const auto plans = nlohmann::json::parse(std::ifstream(p(dir, "plans/plans.json")));
    CHECK(plans["format"] == "conceptguard.plans");
    CHECK(!plans["plans"].empty());

    auto zero = cg::read_concept_matrix(p(dir, "bank.token_concepts.cgeb"));
    zero.matrix.setZero();
    cg::write_concept_matrix(zero, p(dir, "zero.cgeb"));
    const auto c = run_cli({"harmfulness", "--plans", p(dir, "plans"), "--judge", "anchor", "--token-concepts",
                            p(dir, "zero.cgeb"), "--out", p(dir, "harm.json")});
    CHECK(c.code == cg::cli::kExitNumeric);

    const auto ok = run_cli({"harmfulness", "--plans", p(dir, "plans"), "--judge", "mock", "--out", p(dir, "harm.json")});
    CHECK(ok.code == 0);
    const auto j = nlohmann::json::parse(std::ifstream(p(dir, "harm.json")));
    CHECK(j["rate_percent"] == 0.0);
}

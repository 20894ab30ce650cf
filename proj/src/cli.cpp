// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include "conceptguard/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <memory>

#include <CLI11.hpp>
#include <json.hpp>

#include "binio.hpp"
#include "conceptguard/dataio.hpp"
#include "conceptguard/detector.hpp"
#include "conceptguard/digest.hpp"
#include "conceptguard/error.hpp"
#include "conceptguard/evalharness.hpp"
#include "conceptguard/suppressor.hpp"
#include "conceptguard/vocab.hpp"

namespace cg::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

// --- logging ------------------------------------------------------------------

enum class Level { Debug = 0, Info = 1, Warn = 2 };

Level log_level() {
    const char* env = std::getenv("CG_LOG");
    if (env == nullptr) {
        return Level::Info;
    }
    const std::string v = env;
    if (v == "debug") {
        return Level::Debug;
    }
    if (v == "warn") {
        return Level::Warn;
    }
    return Level::Info;
}

void log(Level lvl, const std::string& msg) {
    static const Level threshold = log_level();
    if (lvl < threshold) {
        return;
    }
    static const char* names[] = {"debug", "info", "warn"};
    std::cerr << "[" << names[static_cast<int>(lvl)] << "] " << msg << '\n';
}

// --- shared helpers ---------------------------------------------------------

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) {
        fail(ErrorKind::Validation, what + " path is empty");
    }
    if (!fs::is_regular_file(path)) {
        fail(ErrorKind::Io, what + " '" + path + "' does not exist");
    }
}

void ensure_parent(const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) {
        fs::create_directories(parent);
    }
}

std::string stem_path(const std::string& bank, const std::string& suffix) {
    fs::path p(bank);
    return (p.parent_path() / (p.stem().string() + suffix)).string();
}

ojson load_config_file(const std::string& path) {
    if (path.empty()) {
        return ojson::object();
    }
    require_file(path, "config file");
    ojson j;
    try {
        j = ojson::parse(binio::read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Config, "config '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) {
        fail(ErrorKind::Config, "config '" + path + "' must hold a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        if (key != "seed" && key != "synth" && key != "detector" && key != "guard") {
            fail(ErrorKind::Config, "config '" + path + "': unknown section '" + key + "'");
        }
    }
    return j;
}

template <class T>
void take(const ojson& j, const char* key, T& dst) {
    if (!j.contains(key)) {
        return;
    }
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        fail(ErrorKind::Config, std::string("config field '") + key + "' has the wrong type");
    }
}

template <class T>
void override_from(const CLI::Option* opt, const T& value, T& dst) {
    if (opt->count() > 0) {
        dst = value;
    }
}

GuardConfig guard_from_json(const ojson& j) {
    GuardConfig g;
    if (j.is_object()) {
        take(j, "theta", g.theta);
        take(j, "k", g.k);
        take(j, "alpha", g.alpha);
        take(j, "n_steps", g.n_steps);
        take(j, "total_steps", g.total_steps);
    }
    return g;
}

ojson guard_to_json(const GuardConfig& g) {
    return {{"theta", g.theta}, {"k", g.k}, {"alpha", g.alpha}, {"n_steps", g.n_steps}, {"total_steps", g.total_steps}};
}

/// Records inputs, outputs and timing next to an artifact.
class Provenance {
public:
    Provenance(std::string command, const std::vector<std::string>& args)
        : command_(std::move(command)), args_(args), start_(std::chrono::steady_clock::now()) {}

    void input(const std::string& role, const std::string& path) {
        inputs_[role] = {{"path", path}, {"sha256", sha256_file(path)}};
    }
    void output(const std::string& role, const std::string& path) {
        outputs_[role] = {{"path", path}, {"sha256", sha256_file(path)}};
    }
    void config(ojson c) { config_ = std::move(c); }
    void seed(std::uint64_t s) { seed_ = s; }

    void write(const std::string& path) const {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        ojson j;
        j["format"] = "conceptguard.run";
        j["version"] = 1;
        j["tool_version"] = kToolVersion;
        j["command"] = command_;
        j["argv"] = args_;
        j["seed"] = seed_ ? ojson(*seed_) : ojson(nullptr);
        j["config"] = config_;
        j["inputs"] = inputs_;
        j["outputs"] = outputs_;
        j["wall_time_s"] = secs;
        binio::write_text_file(path, j.dump(2) + "\n");
        log(Level::Debug, "provenance written to " + path);
    }

private:
    std::string command_;
    std::vector<std::string> args_;
    std::chrono::steady_clock::time_point start_;
    ojson inputs_ = ojson::object();
    ojson outputs_ = ojson::object();
    ojson config_ = ojson::object();
    std::optional<std::uint64_t> seed_;
};

std::vector<EmbeddingRecord> select_split(const std::vector<EmbeddingRecord>& records, const std::string& split) {
    if (split == "all" || split == "ALL") {
        return records;
    }
    return filter_split(records, parse_split(split));
}

std::vector<Label> labels_of(const std::vector<EmbeddingRecord>& records) {
    std::vector<Label> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back(r.label);
    }
    return out;
}

std::string category_for(const ConceptMatrix& cm, int concept_id) {
    if (concept_id < 0 || concept_id >= static_cast<int>(cm.categories.size())) {
        return {};
    }
    return cm.categories[static_cast<std::size_t>(concept_id)];
}

// --- commands -----------------------------------------------------------------

struct SynthArgs {
    std::string out, concepts_out, token_concepts_out, config;
    SynthConfig cfg;
    CLI::Option *n_concepts, *per_concept, *d, *d_tok, *noise, *seed, *tokens;
};

void cmd_synth(SynthArgs& a, const std::vector<std::string>& argv) {
    const ojson file = load_config_file(a.config);
    SynthConfig cfg;
    if (file.contains("synth")) {
        const auto& s = file["synth"];
        take(s, "n_concepts", cfg.n_concepts);
        take(s, "samples_per_concept", cfg.samples_per_concept);
        take(s, "d", cfg.d);
        take(s, "d_tok", cfg.d_tok);
        take(s, "noise_sigma", cfg.noise_sigma);
        take(s, "tokens_per_prompt", cfg.tokens_per_prompt);
    }
    take(file, "seed", cfg.seed);
    override_from(a.n_concepts, a.cfg.n_concepts, cfg.n_concepts);
    override_from(a.per_concept, a.cfg.samples_per_concept, cfg.samples_per_concept);
    override_from(a.d, a.cfg.d, cfg.d);
    override_from(a.d_tok, a.cfg.d_tok, cfg.d_tok);
    override_from(a.noise, a.cfg.noise_sigma, cfg.noise_sigma);
    override_from(a.seed, a.cfg.seed, cfg.seed);
    override_from(a.tokens, a.cfg.tokens_per_prompt, cfg.tokens_per_prompt);

    const std::string concepts_out = a.concepts_out.empty() ? stem_path(a.out, ".concepts.cgeb") : a.concepts_out;
    const std::string tok_out =
        a.token_concepts_out.empty() ? stem_path(a.out, ".token_concepts.cgeb") : a.token_concepts_out;

    log(Level::Info, "generating synthetic bank: " + std::to_string(cfg.n_concepts) + " concepts x " +
                         std::to_string(cfg.samples_per_concept) + " instances, d=" + std::to_string(cfg.d));
    const SynthDataset ds = synth_dataset(cfg);
    ensure_parent(a.out);
    ensure_parent(concepts_out);
    ensure_parent(tok_out);
    write_embedding_bank(ds.records, a.out, "synthetic", cfg.seed);
    write_concept_matrix(ds.concepts, concepts_out);
    write_concept_matrix(ds.token_concepts, tok_out);
    log(Level::Info, "wrote " + std::to_string(ds.records.size()) + " records to " + a.out);

    Provenance prov("synth-data", argv);
    prov.seed(cfg.seed);
    prov.config({{"n_concepts", cfg.n_concepts},
                 {"samples_per_concept", cfg.samples_per_concept},
                 {"d", cfg.d},
                 {"d_tok", cfg.token_dim()},
                 {"noise_sigma", cfg.noise_sigma},
                 {"tokens_per_prompt", cfg.tokens_per_prompt}});
    prov.output("bank", a.out);
    prov.output("manifest", manifest_path_for(a.out));
    prov.output("concepts", concepts_out);
    prov.output("token_concepts", tok_out);
    prov.write(a.out + ".run.json");
}

struct EmbedArgs {
    std::string vocab, encoder = "mock", out, token_out;
    int d = 768, d_tok = 0;
    std::uint64_t seed = 0;
    bool no_normalize = false;
};

void cmd_embed(const EmbedArgs& a, const std::vector<std::string>& argv) {
    const std::string vocab_path = a.vocab.empty() ? bundled_taxonomy_path() : a.vocab;
    require_file(vocab_path, "vocabulary");
    const ConceptVocab vocab = load_taxonomy(vocab_path);
    std::unique_ptr<EncoderClient> enc;
    if (a.encoder == "mock") {
        enc = std::make_unique<MockEncoder>(a.d, a.d_tok > 0 ? a.d_tok : a.d, a.seed);
    } else {
        require_file(a.encoder, "encoder table");
        enc = std::make_unique<FileEncoder>(a.encoder);
    }
    const bool normalize = !a.no_normalize;
    ConceptMatrix cm = embed_concepts(vocab, *enc, normalize);
    ensure_parent(a.out);
    write_concept_matrix(cm, a.out);
    log(Level::Info, "embedded " + std::to_string(cm.size()) + " concepts with " + enc->tag());

    Provenance prov("embed-concepts", argv);
    prov.seed(a.seed);
    prov.config({{"encoder", enc->tag()}, {"normalized", normalize}});
    prov.input("vocab", vocab_path);
    prov.output("concepts", a.out);

    if (!a.token_out.empty()) {
        // Token-space rows: mean of the content-token embeddings of each concept string.
        ConceptMatrix tok;
        tok.encoder_tag = enc->tag() + ":tokens";
        tok.normalized = normalize;
        tok.names = cm.names;
        tok.categories = cm.categories;
        tok.matrix.resize(vocab.size(), enc->d_tok());
        for (int i = 0; i < vocab.size(); ++i) {
            const TokenEncoding te = enc->encode_tokens(vocab.concepts[static_cast<std::size_t>(i)].text);
            Eigen::VectorXd sum = Eigen::VectorXd::Zero(enc->d_tok());
            int n = 0;
            for (Eigen::Index t = 0; t < te.embeddings.rows(); ++t) {
                if (te.content_mask[static_cast<std::size_t>(t)]) {
                    sum += te.embeddings.row(t).transpose();
                    ++n;
                }
            }
            if (n == 0) {
                fail(ErrorKind::Validation, "concept '" + vocab.concepts[static_cast<std::size_t>(i)].text +
                                                "' has no content tokens");
            }
            if (normalize) {
                sum.normalize();
            } else {
                sum /= n;
            }
            tok.matrix.row(i) = sum.transpose();
        }
        ensure_parent(a.token_out);
        write_concept_matrix(tok, a.token_out);
        prov.output("token_concepts", a.token_out);
    }
    prov.write(a.out + ".run.json");
}

struct TrainArgs {
    std::string data, concepts, out, config, loss_log;
    DetectorConfig cfg;
    CLI::Option *d_m, *ffn, *heads, *dropout, *lr, *batch, *epochs, *wd, *seed, *tau;
};

void cmd_train(TrainArgs& a, const std::vector<std::string>& argv) {
    require_file(a.data, "data bank");
    require_file(a.concepts, "concept matrix");
    const ojson file = load_config_file(a.config);
    DetectorConfig cfg;
    if (file.contains("detector")) {
        cfg = DetectorConfig::from_json(file["detector"].dump(), cfg);
    }
    take(file, "seed", cfg.seed);
    override_from(a.d_m, a.cfg.d_m, cfg.d_m);
    override_from(a.ffn, a.cfg.ffn_dim, cfg.ffn_dim);
    override_from(a.heads, a.cfg.heads, cfg.heads);
    override_from(a.dropout, a.cfg.dropout_p, cfg.dropout_p);
    override_from(a.lr, a.cfg.lr, cfg.lr);
    override_from(a.batch, a.cfg.batch_size, cfg.batch_size);
    override_from(a.epochs, a.cfg.epochs, cfg.epochs);
    override_from(a.wd, a.cfg.weight_decay, cfg.weight_decay);
    override_from(a.seed, a.cfg.seed, cfg.seed);
    override_from(a.tau, a.cfg.tau_init, cfg.tau_init);

    const LoadedBank bank = read_embedding_bank(a.data);
    const ConceptMatrix cm = read_concept_matrix(a.concepts);
    cfg.d = bank.manifest.d;
    cfg.validate();
    const auto pairs = build_training_pairs(bank.records, Split::Train);
    log(Level::Info, "training on " + std::to_string(pairs.size()) + " pairs for " + std::to_string(cfg.epochs) +
                         " epochs (d=" + std::to_string(cfg.d) + ", d_m=" + std::to_string(cfg.d_m) + ")");

    std::string loss_csv = "epoch,loss\n";
    const int every = std::max(1, cfg.epochs / 10);
    const TrainResult res = train(pairs, cm, cfg, [&](int epoch, double loss) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%d,%.17g\n", epoch, loss);
        loss_csv += buf;
        const Level lvl = (epoch % every == 0 || epoch == cfg.epochs) ? Level::Info : Level::Debug;
        std::snprintf(buf, sizeof buf, "epoch %d loss %.6f", epoch, loss);
        log(lvl, buf);
    });
    ensure_parent(a.out);
    save_checkpoint(res.params, a.out);
    log(Level::Info, "checkpoint written to " + a.out + " (tau=" + std::to_string(res.params.tau()) + ")");

    Provenance prov("train", argv);
    prov.seed(cfg.seed);
    prov.config(ojson::parse(cfg.to_json()));
    prov.input("data", a.data);
    prov.input("concepts", a.concepts);
    prov.output("checkpoint", a.out);
    if (!a.loss_log.empty()) {
        ensure_parent(a.loss_log);
        binio::write_text_file(a.loss_log, loss_csv);
        prov.output("loss_log", a.loss_log);
    }
    prov.write(a.out + ".run.json");
}

struct DetectArgs {
    std::string ckpt, data, concepts, out, split = "TEST", scores_out;
    double theta = GuardConfig{}.theta;
    int k = GuardConfig{}.k;
};

void cmd_detect(const DetectArgs& a, const std::vector<std::string>& argv) {
    require_file(a.ckpt, "checkpoint");
    require_file(a.data, "data bank");
    require_file(a.concepts, "concept matrix");
    const DetectorParams params = load_checkpoint(a.ckpt);
    const ConceptMatrix cm = read_concept_matrix(a.concepts);
    const auto records = select_split(read_embedding_bank(a.data).records, a.split);

    ojson items = ojson::array();
    std::vector<ScoreRow> rows;
    for (const auto& r : records) {
        const DetectionResult det = detect(r.image_emb, r.text_emb, cm, params, a.k, a.theta);
        ojson top = ojson::array();
        for (const auto& c : det.top_k) {
            top.push_back({{"concept_id", c.concept_id}, {"concept", cm.name_of(c.concept_id)}, {"score", c.score}});
        }
        items.push_back({{"sample_id", r.sample_id},
                         {"s_max", det.s_max},
                         {"s_max_logit", det.s_max_logit()},
                         {"predicted", to_string(det.predicted_label)},
                         {"label", to_string(r.label)},
                         {"top_k", std::move(top)}});
        rows.push_back({r.sample_id, det.s_max_logit(), r.label});
    }
    ojson j;
    j["format"] = "conceptguard.detections";
    j["version"] = 1;
    j["theta"] = a.theta;
    j["k"] = a.k;
    j["split"] = a.split;
    j["detections"] = std::move(items);
    ensure_parent(a.out);
    binio::write_text_file(a.out, j.dump(2) + "\n");
    log(Level::Info, "scored " + std::to_string(records.size()) + " samples");

    Provenance prov("detect", argv);
    prov.seed(params.config.seed);
    prov.config({{"theta", a.theta}, {"k", a.k}, {"split", a.split}});
    prov.input("checkpoint", a.ckpt);
    prov.input("data", a.data);
    prov.input("concepts", a.concepts);
    prov.output("detections", a.out);
    if (!a.scores_out.empty()) {
        ensure_parent(a.scores_out);
        write_scores_csv(rows, a.scores_out);
        prov.output("scores", a.scores_out);
    }
    prov.write(a.out + ".run.json");
}

struct SuppressArgs {
    std::string ckpt, data, concepts, token_concepts, out, config, split = "TEST";
    GuardConfig g;
    CLI::Option *theta, *k, *alpha, *n_steps, *total_steps;
};

void cmd_suppress(SuppressArgs& a, const std::vector<std::string>& argv) {
    require_file(a.ckpt, "checkpoint");
    require_file(a.data, "data bank");
    require_file(a.concepts, "concept matrix");
    require_file(a.token_concepts, "token-space concept matrix");
    const ojson file = load_config_file(a.config);
    GuardConfig g = guard_from_json(file.contains("guard") ? file["guard"] : ojson());
    override_from(a.theta, a.g.theta, g.theta);
    override_from(a.k, a.g.k, g.k);
    override_from(a.alpha, a.g.alpha, g.alpha);
    override_from(a.n_steps, a.g.n_steps, g.n_steps);
    override_from(a.total_steps, a.g.total_steps, g.total_steps);
    g.validate();

    const DetectorParams params = load_checkpoint(a.ckpt);
    const ConceptMatrix cm = read_concept_matrix(a.concepts);
    const ConceptMatrix tok = read_concept_matrix(a.token_concepts);
    const auto records = select_split(read_embedding_bank(a.data).records, a.split);
    if (records.empty()) {
        fail(ErrorKind::Validation, "split '" + a.split + "' holds no samples");
    }

    MockImageEditor editor;
    ojson plans = ojson::array();
    std::vector<EmbeddingRecord> conditioned;
    conditioned.reserve(records.size());
    std::size_t activated = 0;
    for (const auto& r : records) {
        const DetectionResult det = detect(r.image_emb, r.text_emb, cm, params, g.k, g.theta);
        const GuardPlan plan = make_guard_plan(det, r.token_embs, r.content_mask(), tok, g);
        ojson pj = ojson::parse(guard_plan_to_json(plan, r.sample_id));
        pj["label"] = to_string(r.label);
        pj["concept_id"] = r.concept_id;
        pj["category"] = category_for(tok, r.concept_id);
        pj["scenario"] = to_string(r.scenario);
        pj["variant"] = to_string(r.variant);
        pj["tokens"] = r.token_strings;
        if (plan.edit_directive) {
            pj["edited_image_ref"] = editor.edit("image:" + r.sample_id, plan.edit_directive->instruction);
        }
        for (const auto& w : plan.warnings) {
            log(Level::Warn, r.sample_id + ": " + w);
        }
        activated += plan.activated ? 1 : 0;
        plans.push_back(std::move(pj));
        EmbeddingRecord c = r;
        c.token_embs = conditioning_for_step(plan, 1);
        conditioned.push_back(std::move(c));
    }

    fs::create_directories(a.out);
    const std::string plans_path = (fs::path(a.out) / "plans.json").string();
    const std::string cond_path = (fs::path(a.out) / "conditioning.cgeb").string();
    ojson j;
    j["format"] = "conceptguard.plans";
    j["version"] = 1;
    j["guard"] = guard_to_json(g);
    j["plans"] = std::move(plans);
    binio::write_text_file(plans_path, j.dump(2) + "\n");
    write_embedding_bank(conditioned, cond_path, "conditioning");
    log(Level::Info, "guard activated on " + std::to_string(activated) + " of " + std::to_string(records.size()) +
                         " samples");

    Provenance prov("suppress", argv);
    prov.seed(params.config.seed);
    prov.config(guard_to_json(g));
    prov.input("checkpoint", a.ckpt);
    prov.input("data", a.data);
    prov.input("concepts", a.concepts);
    prov.input("token_concepts", a.token_concepts);
    prov.output("plans", plans_path);
    prov.output("conditioning", cond_path);
    prov.write((fs::path(a.out) / "run.json").string());
}

struct EvalArgs {
    std::string ckpt, data, concepts, theta = "auto", shape = "table1", out, baseline = "detector", scores,
                                          scores_out;
};

void cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
    require_file(a.data, "data bank");
    const ReportShape shape = parse_report_shape(a.shape);
    const bool external = !a.scores.empty();
    const bool clip = a.baseline.rfind("clip-", 0) == 0;
    if (!external && a.baseline != "detector" && !clip) {
        fail(ErrorKind::Config, "unknown baseline '" + a.baseline + "'");
    }
    if (external) {
        require_file(a.scores, "scores file");
    } else {
        require_file(a.concepts, "concept matrix");
        if (!clip) {
            require_file(a.ckpt, "checkpoint");
        }
    }

    const LoadedBank bank = read_embedding_bank(a.data);
    const auto val = filter_split(bank.records, Split::Val);
    const auto test = filter_split(bank.records, Split::Test);
    if (test.empty()) {
        fail(ErrorKind::Validation, "the TEST split of '" + a.data + "' is empty");
    }

    std::function<std::vector<double>(const std::vector<EmbeddingRecord>&)> scorer;
    std::optional<DetectorParams> params;
    ConceptMatrix cm;
    std::vector<ScoreRow> rows;
    if (external) {
        rows = read_scores_csv(a.scores);
        scorer = [&](const std::vector<EmbeddingRecord>& rs) { return align_scores(rs, rows); };
    } else {
        cm = read_concept_matrix(a.concepts);
        if (clip) {
            const ClipMode mode = parse_clip_mode(a.baseline.substr(5));
            scorer = [&, mode](const std::vector<EmbeddingRecord>& rs) { return clipscore_scores(rs, cm, mode); };
        } else {
            params = load_checkpoint(a.ckpt);
            scorer = [&](const std::vector<EmbeddingRecord>& rs) { return detector_scores(rs, *params, cm); };
        }
    }

    double theta = 0.0;
    std::optional<double> val_acc;
    if (a.theta == "auto") {
        if (val.empty()) {
            fail(ErrorKind::Calibration, "theta=auto needs a non-empty VAL split");
        }
        const auto vs = scorer(val);
        const Calibration cal = calibrate_threshold(vs, labels_of(val));
        theta = cal.theta;
        val_acc = cal.accuracy;
        log(Level::Info, "calibrated theta=" + std::to_string(theta) + " (val accuracy " +
                             std::to_string(cal.accuracy) + ")");
    } else {
        char* end = nullptr;
        theta = std::strtod(a.theta.c_str(), &end);
        if (a.theta.empty() || end != a.theta.c_str() + a.theta.size() || !std::isfinite(theta)) {
            fail(ErrorKind::Config, "--theta must be 'auto' or a finite number, got '" + a.theta + "'");
        }
    }

    const auto ts = scorer(test);
    const ScenarioReport rep = report_from_scores(test, ts, theta, shape);
    ojson j = rep.to_json();
    j["baseline"] = external ? "external" : a.baseline;
    j["threshold_source"] = a.theta == "auto" ? "calibrated-on-val" : "fixed";
    j["val_accuracy"] = val_acc ? ojson(*val_acc) : ojson(nullptr);
    j["seed"] = params ? ojson(params->config.seed) : (bank.manifest.seed ? ojson(*bank.manifest.seed) : ojson(nullptr));
    ojson inputs;
    inputs["data"] = bank.manifest.bank_sha256;
    if (!external) {
        inputs["concepts"] = sha256_file(a.concepts);
    }
    if (params) {
        inputs["checkpoint"] = sha256_file(a.ckpt);
        j["detector_config"] = ojson::parse(params->config.to_json());
    }
    if (external) {
        inputs["scores"] = sha256_file(a.scores);
    }
    j["input_sha256"] = std::move(inputs);
    ensure_parent(a.out);
    binio::write_text_file(a.out, j.dump(2) + "\n");
    log(Level::Info, "overall accuracy " + std::to_string(rep.overall));

    Provenance prov("eval", argv);
    if (params) {
        prov.seed(params->config.seed);
    } else if (bank.manifest.seed) {
        prov.seed(*bank.manifest.seed);
    }
    prov.config({{"theta", a.theta}, {"shape", a.shape}, {"baseline", a.baseline}});
    prov.input("data", a.data);
    if (!external) {
        prov.input("concepts", a.concepts);
    }
    if (params) {
        prov.input("checkpoint", a.ckpt);
    }
    if (external) {
        prov.input("scores", a.scores);
    }
    prov.output("report", a.out);
    if (!a.scores_out.empty()) {
        std::vector<ScoreRow> out_rows;
        for (std::size_t i = 0; i < test.size(); ++i) {
            out_rows.push_back({test[i].sample_id, ts[i], test[i].label});
        }
        ensure_parent(a.scores_out);
        write_scores_csv(out_rows, a.scores_out);
        prov.output("scores", a.scores_out);
    }
    prov.write(a.out + ".run.json");
}

struct HarmArgs {
    std::string plans, judge = "mock", token_concepts, out;
    double cutoff = 0.5;
};

void cmd_harmfulness(const HarmArgs& a, const std::vector<std::string>& argv) {
    const std::string plans_path = (fs::path(a.plans) / "plans.json").string();
    require_file(plans_path, "plans index");
    ojson j;
    try {
        j = ojson::parse(binio::read_text_file(plans_path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, "plans index '" + plans_path + "' is not valid JSON: " + e.what());
    }
    if (!j.contains("plans") || !j["plans"].is_array()) {
        fail(ErrorKind::Format, "plans index '" + plans_path + "' has no 'plans' array");
    }

    std::unique_ptr<JudgeClient> judge;
    std::map<std::string, const EmbeddingRecord*> cond_by_id;
    LoadedBank cond;
    Provenance prov("harmfulness", argv);
    prov.input("plans", plans_path);
    if (a.judge == "mock") {
        judge = std::make_unique<RuleJudge>();
    } else if (a.judge == "anchor") {
        require_file(a.token_concepts, "token-space concept matrix");
        const std::string cond_path = (fs::path(a.plans) / "conditioning.cgeb").string();
        require_file(cond_path, "conditioning bank");
        cond = read_embedding_bank(cond_path);
        for (const auto& r : cond.records) {
            cond_by_id[r.sample_id] = &r;
        }
        judge = std::make_unique<AnchorCosineJudge>(read_concept_matrix(a.token_concepts), a.cutoff);
        prov.input("conditioning", cond_path);
        prov.input("token_concepts", a.token_concepts);
    } else {
        fail(ErrorKind::Config, "unknown judge '" + a.judge + "' (expected mock or anchor)");
    }

    std::vector<JudgeItem> items;
    for (const auto& p : j["plans"]) {
        JudgeItem it;
        try {
            it.id = p.at("sample_id").get<std::string>();
            it.category = p.value("category", std::string());
            it.input_label = parse_label(p.at("label").get<std::string>());
            it.concept_id = p.at("concept_id").get<int>();
            it.activated = p.at("activated").get<bool>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Format, std::string("malformed plan entry: ") + e.what());
        }
        if (a.judge == "anchor") {
            const auto found = cond_by_id.find(it.id);
            if (found == cond_by_id.end()) {
                fail(ErrorKind::Validation, "no conditioning tokens for plan '" + it.id + "'");
            }
            it.conditioning = found->second->token_embs;
        }
        items.push_back(std::move(it));
    }
    const HarmfulnessReport rep = harmfulness_rate(items, *judge);
    ojson out = rep.to_json();
    out["judge"] = a.judge;
    ensure_parent(a.out);
    binio::write_text_file(a.out, out.dump(2) + "\n");
    log(Level::Info, "harmfulness rate " + std::to_string(rep.rate_percent) + "%");

    prov.config({{"judge", a.judge}, {"cutoff", a.cutoff}});
    prov.output("report", a.out);
    prov.write(a.out + ".run.json");
}

struct VizArgs {
    std::string data, ckpt, layer = "RAW", out, split = "all";
};

void cmd_export_viz(const VizArgs& a, const std::vector<std::string>& argv) {
    require_file(a.data, "data bank");
    const VizLayer layer = parse_viz_layer(a.layer);
    std::optional<DetectorParams> params;
    Provenance prov("export-viz", argv);
    prov.input("data", a.data);
    if (layer == VizLayer::Fused || !a.ckpt.empty()) {
        require_file(a.ckpt, "checkpoint");
        params = load_checkpoint(a.ckpt);
        prov.input("checkpoint", a.ckpt);
        prov.seed(params->config.seed);
    }
    const auto records = select_split(read_embedding_bank(a.data).records, a.split);
    const std::string tsv = export_embeddings_for_viz(records, params ? &*params : nullptr, layer);
    ensure_parent(a.out);
    binio::write_text_file(a.out, tsv);
    log(Level::Info, "exported " + std::to_string(records.size()) + " rows to " + a.out);
    prov.config({{"layer", a.layer}, {"split", a.split}});
    prov.output("viz", a.out);
    prov.write(a.out + ".run.json");
}

int exit_code_for(ErrorKind k) {
    switch (k) {
    case ErrorKind::Numeric:
    case ErrorKind::Degenerate:
        return kExitNumeric;
    default:
        return kExitValidation;
    }
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"ConceptGuard: multimodal risk detection and semantic suppression", "cg"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth-data", "Generate a deterministic synthetic embedding bank");
    s->add_option("--out", synth.out, "Output bank (.cgeb)")->required();
    s->add_option("--concepts-out", synth.concepts_out, "Pooled-space concept matrix output");
    s->add_option("--token-concepts-out", synth.token_concepts_out, "Token-space concept matrix output");
    s->add_option("--config", synth.config, "JSON config file");
    synth.n_concepts = s->add_option("--n-concepts,--concepts", synth.cfg.n_concepts, "Number of concepts");
    synth.per_concept = s->add_option("--samples-per-concept,--per-concept", synth.cfg.samples_per_concept, "Instances per concept");
    synth.d = s->add_option("--d,--dim", synth.cfg.d, "Pooled embedding dimension");
    synth.d_tok = s->add_option("--d-tok", synth.cfg.d_tok, "Token embedding dimension (0: same as d)");
    synth.noise = s->add_option("--noise-sigma", synth.cfg.noise_sigma, "Gaussian noise scale");
    synth.seed = s->add_option("--seed", synth.cfg.seed, "Root seed");
    synth.tokens = s->add_option("--tokens-per-prompt", synth.cfg.tokens_per_prompt, "Content tokens per prompt");

    EmbedArgs embed;
    auto* e = app.add_subcommand("embed-concepts", "Embed the concept vocabulary with a text encoder");
    e->add_option("--vocab", embed.vocab, "Taxonomy JSON (default: bundled 4x50 taxonomy)");
    e->add_option("--encoder", embed.encoder, "'mock' or a JSON lookup table");
    e->add_option("--d", embed.d, "Embedding dimension for the mock encoder");
    e->add_option("--d-tok", embed.d_tok, "Token dimension for the mock encoder");
    e->add_option("--seed", embed.seed, "Mock encoder seed");
    e->add_flag("--no-normalize", embed.no_normalize, "Keep raw encoder norms");
    e->add_option("--out", embed.out, "Concept matrix output")->required();
    e->add_option("--token-out", embed.token_out, "Token-space concept matrix output");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train the risk detector");
    t->add_option("--data", tr.data, "Embedding bank")->required();
    t->add_option("--concepts,--vocab", tr.concepts, "Concept matrix")->required();
    t->add_option("--out", tr.out, "Checkpoint output")->required();
    t->add_option("--config", tr.config, "JSON config file");
    t->add_option("--loss-log", tr.loss_log, "Per-epoch loss CSV");
    tr.d_m = t->add_option("--d-m", tr.cfg.d_m, "Model width");
    tr.ffn = t->add_option("--ffn-dim", tr.cfg.ffn_dim, "Feed-forward width");
    tr.heads = t->add_option("--heads", tr.cfg.heads, "Attention heads");
    tr.dropout = t->add_option("--dropout", tr.cfg.dropout_p, "Dropout probability");
    tr.lr = t->add_option("--lr", tr.cfg.lr, "Learning rate");
    tr.batch = t->add_option("--batch-size", tr.cfg.batch_size, "Batch size");
    tr.epochs = t->add_option("--epochs", tr.cfg.epochs, "Epochs");
    tr.wd = t->add_option("--weight-decay", tr.cfg.weight_decay, "AdamW weight decay");
    tr.seed = t->add_option("--seed", tr.cfg.seed, "Root seed");
    tr.tau = t->add_option("--tau-init", tr.cfg.tau_init, "Initial logit scale");

    DetectArgs det;
    auto* d = app.add_subcommand("detect", "Score samples against the concept vocabulary");
    d->add_option("--ckpt", det.ckpt, "Detector checkpoint")->required();
    d->add_option("--data", det.data, "Embedding bank")->required();
    d->add_option("--concepts,--vocab", det.concepts, "Concept matrix")->required();
    d->add_option("--out", det.out, "Detections JSON")->required();
    d->add_option("--split", det.split, "TRAIN, VAL, TEST or all");
    d->add_option("--theta,--threshold", det.theta, "Logit-scale threshold");
    d->add_option("--k,--topk", det.k, "Concepts to report");
    d->add_option("--scores-out", det.scores_out, "Also write scores CSV");

    SuppressArgs sup;
    auto* u = app.add_subcommand("suppress", "Build guard plans for samples");
    u->add_option("--ckpt", sup.ckpt, "Detector checkpoint")->required();
    u->add_option("--data", sup.data, "Embedding bank")->required();
    u->add_option("--concepts,--vocab", sup.concepts, "Pooled-space concept matrix")->required();
    u->add_option("--token-concepts", sup.token_concepts, "Token-space concept matrix")->required();
    u->add_option("--out", sup.out, "Output directory")->required();
    u->add_option("--config", sup.config, "JSON config file");
    u->add_option("--split", sup.split, "TRAIN, VAL, TEST or all");
    sup.theta = u->add_option("--theta", sup.g.theta, "Activation threshold (logit scale)");
    sup.k = u->add_option("--k,--topk", sup.g.k, "Top-k concepts spanning the risk subspace");
    sup.alpha = u->add_option("--alpha", sup.g.alpha, "Localisation margin");
    sup.n_steps = u->add_option("--n-steps,--nsteps", sup.g.n_steps, "Suppressed denoising steps");
    sup.total_steps = u->add_option("--total-steps", sup.g.total_steps, "Total denoising steps");

    EvalArgs ev;
    auto* v = app.add_subcommand("eval", "Scenario accuracy report");
    v->add_option("--ckpt", ev.ckpt, "Detector checkpoint");
    v->add_option("--data", ev.data, "Embedding bank")->required();
    v->add_option("--concepts,--vocab", ev.concepts, "Concept matrix");
    v->add_option("--theta", ev.theta, "'auto' (calibrate on VAL) or a number");
    v->add_option("--shape", ev.shape, "table1 or table2");
    v->add_option("--baseline", ev.baseline, "detector, clip-text, clip-image or clip-sum");
    v->add_option("--scores", ev.scores, "External scores CSV (sample_id,score,label)");
    v->add_option("--scores-out", ev.scores_out, "Write TEST scores CSV");
    v->add_option("--out", ev.out, "Report JSON")->required();

    HarmArgs hm;
    auto* h = app.add_subcommand("harmfulness", "Judge guard plans and report the harmful rate");
    h->add_option("--plans", hm.plans, "Directory written by suppress")->required();
    h->add_option("--judge", hm.judge, "mock (rule) or anchor (token cosine)");
    h->add_option("--token-concepts", hm.token_concepts, "Token-space anchors for the anchor judge");
    h->add_option("--cutoff", hm.cutoff, "Cosine cutoff for the anchor judge");
    h->add_option("--out", hm.out, "Report JSON")->required();

    VizArgs vz;
    auto* x = app.add_subcommand("export-viz", "Export embeddings as TSV for external projection tools");
    x->add_option("--data", vz.data, "Embedding bank")->required();
    x->add_option("--ckpt", vz.ckpt, "Detector checkpoint (FUSED)");
    x->add_option("--layer", vz.layer, "RAW or FUSED");
    x->add_option("--split", vz.split, "TRAIN, VAL, TEST or all");
    x->add_option("--out", vz.out, "TSV output")->required();

    std::vector<std::string> full{"cg"};
    full.insert(full.end(), args.begin(), args.end());
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (s->parsed()) {
            cmd_synth(synth, full);
        } else if (e->parsed()) {
            cmd_embed(embed, full);
        } else if (t->parsed()) {
            cmd_train(tr, full);
        } else if (d->parsed()) {
            cmd_detect(det, full);
        } else if (u->parsed()) {
            cmd_suppress(sup, full);
        } else if (v->parsed()) {
            cmd_eval(ev, full);
        } else if (h->parsed()) {
            cmd_harmfulness(hm, full);
        } else if (x->parsed()) {
            cmd_export_viz(vz, full);
        }
    } catch (const Error& err) {
        std::cerr << "cg: error: " << err.what() << '\n';
        return exit_code_for(err.kind());
    } catch (const fs::filesystem_error& err) {
        std::cerr << "cg: error: IO: " << err.what() << '\n';
        return kExitValidation;
    } catch (const nlohmann::json::exception& err) {
        std::cerr << "cg: error: FORMAT: " << err.what() << '\n';
        return kExitValidation;
    }
    return kExitOk;
}

int main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args);
}

}  // namespace cg::cli

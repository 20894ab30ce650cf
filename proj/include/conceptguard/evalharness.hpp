// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

// Threshold calibration, scenario accuracy tables, similarity baselines,
// harmfulness accounting and embedding exports.

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "conceptguard/dataio.hpp"
#include "conceptguard/detector.hpp"
#include "conceptguard/suppressor.hpp"
#include "conceptguard/vocab.hpp"

namespace cg {

// --- calibration ------------------------------------------------------------

struct Calibration {
    double theta = 0.0;
    double accuracy = 0.0;
};

/// Sorted candidates: -inf, the midpoints of consecutive unique scores, +inf.
std::vector<double> candidate_thresholds(std::span<const double> scores);

/// Predicts UNSAFE iff score >= theta. Picks the most accurate candidate;
/// ties go to the larger threshold.
Calibration calibrate_threshold(std::span<const double> scores, std::span<const Label> labels);

Label predict(double score, double theta);

double accuracy(std::span<const Label> pred, std::span<const Label> truth);

// --- aggregation --------------------------------------------------------------

enum class ReportShape { Table1, Table2 };

const char* to_string(ReportShape s);
ReportShape parse_report_shape(const std::string& s);

using CellGrid = std::map<std::pair<Scenario, Variant>, double>;

/// Mean of (IT_U mean over Exp/Syn/Adv, SI_UT mean over Exp/Syn/Adv, UI_ST Exp).
double aggregate_overall(const CellGrid& cells);

/// Plain mean of the three scenario accuracies.
double aggregate_scenarios(const std::map<Scenario, double>& scenarios);

// --- baselines ----------------------------------------------------------------

enum class ClipMode { Text, Image, Sum };

const char* to_string(ClipMode m);
ClipMode parse_clip_mode(const std::string& s);

/// Max cosine between the chosen feature and any concept row.
double clipscore_baseline(const Eigen::VectorXd& f_img, const Eigen::VectorXd& f_txt,
                          const ConceptMatrix& concepts, ClipMode mode);

// --- scenario reports ---------------------------------------------------------

struct CellResult {
    Scenario scenario = Scenario::IT_U;
    std::optional<Variant> variant;  ///< empty for Table2 (pooled over variants)
    double accuracy = 0.0;
    std::size_t n = 0;
    std::size_t n_unsafe = 0;
};

struct ScenarioReport {
    ReportShape shape = ReportShape::Table1;
    std::vector<CellResult> cells;
    std::map<Scenario, double> scenario_means;
    double overall = 0.0;
    double threshold_used = 0.0;

    /// Recomputes the overall figure from `cells`.
    double recompute_overall() const;
    nlohmann::ordered_json to_json() const;
};

/// Logit-scale s_max for every record (inference mode).
std::vector<double> detector_scores(std::span<const EmbeddingRecord> records, const DetectorParams& params,
                                    const ConceptMatrix& concepts);

std::vector<double> clipscore_scores(std::span<const EmbeddingRecord> records, const ConceptMatrix& concepts,
                                     ClipMode mode);

/// Builds the cell grid from precomputed scores. Every cell the shape needs
/// must be present in `records`.
ScenarioReport report_from_scores(std::span<const EmbeddingRecord> records, std::span<const double> scores,
                                  double theta, ReportShape shape);

/// Scores the TEST split of `records` with the detector.
ScenarioReport evaluate_scenarios(const std::vector<EmbeddingRecord>& records, const DetectorParams& params,
                                  const ConceptMatrix& concepts, double theta, ReportShape shape);

// --- external score files ---------------------------------------------------

struct ScoreRow {
    std::string sample_id;
    double score = 0.0;
    Label label = Label::Safe;
};

/// `sample_id,score,label` with a header line; labels are SAFE/UNSAFE.
void write_scores_csv(std::span<const ScoreRow> rows, const std::string& path);
std::vector<ScoreRow> read_scores_csv(const std::string& path);
std::vector<ScoreRow> parse_scores_csv(const std::string& text);

/// Lines each record up with its row by sample id.
std::vector<double> align_scores(std::span<const EmbeddingRecord> records, std::span<const ScoreRow> rows);

// --- harmfulness --------------------------------------------------------------

enum class Verdict { Harmful, Safe };

/// What a judge sees for one generation request.
struct JudgeItem {
    std::string id;
    std::string category;  ///< may be empty
    Label input_label = Label::Safe;
    int concept_id = kNoConcept;
    bool activated = false;
    Eigen::MatrixXd conditioning;  ///< tokens that reach the generator
};

/// Builds a JudgeItem from a plan, taking the conditioning of step 1.
JudgeItem judge_item_from_plan(const GuardPlan& plan, const EmbeddingRecord& record, const std::string& category);

/// Unguarded counterpart: the original tokens, never activated.
JudgeItem judge_item_unguarded(const EmbeddingRecord& record, const std::string& category);

class JudgeClient {
public:
    virtual ~JudgeClient() = default;
    virtual Verdict judge(const JudgeItem& item) = 0;
};

/// HARMFUL iff the input is UNSAFE and the guard did not activate.
class RuleJudge final : public JudgeClient {
public:
    Verdict judge(const JudgeItem& item) override;
};

/// HARMFUL iff some conditioning token has cosine > cutoff with the anchor
/// of the item's true concept.
class AnchorCosineJudge final : public JudgeClient {
public:
    explicit AnchorCosineJudge(ConceptMatrix anchors, double cutoff = 0.5);
    Verdict judge(const JudgeItem& item) override;

private:
    ConceptMatrix anchors_;
    double cutoff_;
};

struct CategoryRate {
    std::size_t n = 0;
    std::size_t harmful = 0;
    double rate_percent = 0.0;
};

struct HarmfulnessReport {
    std::size_t n = 0;
    std::size_t harmful = 0;
    double rate_percent = 0.0;
    std::map<std::string, CategoryRate> per_category;

    nlohmann::ordered_json to_json() const;
};

HarmfulnessReport harmfulness_rate(std::span<const JudgeItem> items, JudgeClient& judge);

// --- visualisation export -------------------------------------------------

enum class VizLayer { Raw, Fused };

VizLayer parse_viz_layer(const std::string& s);

/// TSV with a header row. Metadata columns are sample_id, label, scenario,
/// variant, split and concept_id; RAW appends [f_img; f_txt], FUSED appends
/// h_fused. `params` is required for FUSED.
std::string export_embeddings_for_viz(std::span<const EmbeddingRecord> records, const DetectorParams* params,
                                      VizLayer layer);

inline constexpr int kVizMetadataColumns = 6;

}  // namespace cg

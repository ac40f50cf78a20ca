#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "advbench/attack.hpp"
#include "advbench/dataset.hpp"
#include "advbench/metrics.hpp"
#include "advbench/model.hpp"

namespace advbench {

extern const char* kToolVersion;

// Exact parse of "a/b" rational literals (e.g. "1/255") or plain decimals.
float parse_ratio_float(const std::string& text);

struct ExperimentPlan {
    struct ModelRef {
        std::string id;
        std::string path;
    };
    struct DatasetRef {
        std::string id;
        std::string path;
    };
    std::vector<ModelRef> models;
    std::vector<DatasetRef> datasets;
    std::vector<AttackConfig> attacks;  // [0] drives matrix/cross/grid
    std::vector<std::size_t> k_values = {1, 3};
    std::size_t sample_count = 512;
    std::uint64_t master_seed = 0;
    std::size_t series_batch = 64;
    std::string metric_reference = "truth";  // or "clean_pred"
    std::string cooc_csv;                    // empty: derive C from datasets[0]
    std::vector<float> sweep_eps;            // defaults {0.5,1,2,4,8}/255
    std::vector<std::size_t> sweep_steps;    // defaults {1,5,10,25,50}
    int jobs = 1;
};

ExperimentPlan load_plan(const std::filesystem::path& path);
void save_plan(const ExperimentPlan& plan, const std::filesystem::path& path);

struct ReportRow {
    std::string source_model;
    std::string target_model;
    std::string dataset;
    std::string attack;  // pgd | pgd-targeted | fgsm | none
    float eps = 0.f;
    std::size_t steps = 1;
    std::string loss;
    std::string metric;
    int k = -1;  // -1 renders as a blank cell
    double value = 0.0;
    std::string direction;  // up: higher is more robust; down: lower is
    bool failed = false;
};

struct Provenance {
    std::uint64_t master_seed = 0;
    std::size_t sample_count = 0;
    std::string tool_version;
    std::string created_at;  // in-memory only; never serialized (reports must be byte-stable)
};

struct EvaluationReport {
    std::string kind;  // matrix | cross | grid | sweep | eval
    std::vector<ReportRow> rows;
    std::map<std::string, MetricSeries> series;  // per-batch values, grid only
    Provenance provenance;
};

// Transfer matrix: craft on each source model, evaluate k-robust accuracy on
// every target; the diagonal is the whitebox cell.
EvaluationReport transfer_matrix(const ExperimentPlan& plan);

// Cross-dataset grid: whitebox robustness of each model on each dataset.
EvaluationReport cross_dataset_eval(const ExperimentPlan& plan);

// Loss-by-metric grid: risk-targeted PGD per (model, attack loss), scored with
// k=1, k=3, AUC, MSE, BCE, MLACC and RISK; per-batch series retained.
EvaluationReport loss_metric_grid(const ExperimentPlan& plan);

// eps x steps sweep of untargeted PGD per model.
EvaluationReport budget_sweep(const ExperimentPlan& plan);

struct CorrelationEntry {
    std::string metric_a;
    std::string metric_b;
    double r = 0.0;
    double p = 1.0;
    bool flagged = false;  // p >= 1e-3
};

std::vector<CorrelationEntry> metric_correlation(const EvaluationReport& report);

// Metrics for an externally stored adversarial batch against one model.
EvaluationReport evaluate_adversarial(const Model& model, const std::string& model_id,
                                      const LoadedAdversarial& adv,
                                      const MultiLabelDataset& data,
                                      const std::string& dataset_id,
                                      const std::vector<std::string>& metrics,
                                      const std::vector<std::size_t>& k_values,
                                      const std::string& reference, const FloatMatrix* cooc);

void emit_report_csv(const EvaluationReport& report, const std::filesystem::path& path);
void emit_report_markdown(const EvaluationReport& report, const std::filesystem::path& path);
void emit_correlation_csv(const std::vector<CorrelationEntry>& table,
                          const std::filesystem::path& path);
EvaluationReport load_report_csv(const std::filesystem::path& path,
                                 const std::string& kind = "auto");

}  // namespace advbench

#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "advbench/dataset.hpp"

namespace advbench {

using LabelMask = std::array<bool, kNumLabels>;

inline LabelMask all_labels_mask() {
    LabelMask m;
    m.fill(true);
    return m;
}

struct TopKSet {
    std::size_t k = 0;
    std::vector<std::size_t> indices;  // sorted ascending for canonical comparison
};

// Indices of the k largest scores; ties broken toward the lower label index.
TopKSet topk_indices(std::span<const float> scores, std::size_t k);

// |topk(predicted) ∩ topk(truth)| / k
double k_accuracy_input(std::span<const float> predicted, std::span<const float> truth_ranking,
                        std::size_t k);

// Mean of k_accuracy_input over a prediction batch (fraction in [0,1]; reports
// scale to percent).
double k_accuracy_mean(const Tensor& pred_scores, const std::vector<GroundTruthVector>& truths,
                       std::size_t k);

// Fraction of unmasked labels whose thresholded prediction matches the target
// state (target_i >= 0.5).
double mlacc(std::span<const float> adv_probs, std::span<const float> target,
             std::span<const float> thresholds, const LabelMask& mask);

// Error-style metrics over one input: identical formulas to the attack losses.
double metric_mse(std::span<const float> adv_logits, std::span<const float> reference,
                  const LabelMask& mask);
double metric_bce(std::span<const float> adv_logits, std::span<const float> reference,
                  const LabelMask& mask);
double metric_ol(std::span<const float> adv_logits, std::span<const float> reference,
                 const LabelMask& mask);

struct MacroAucResult {
    double value = 0.0;
    std::vector<std::size_t> used_labels;
    std::vector<std::size_t> skipped_labels;  // lacking both classes
};

// Rank-based (Mann-Whitney) AUC per label with midranks for ties, Positive vs
// Negative only, macro-averaged over labels that have both classes.
MacroAucResult macro_auc(const Tensor& probs, const std::vector<GroundTruthVector>& truths);

// dot(adv_probs, C_row) / 17, in [0,1] for probabilities against a zero-diagonal row.
double risk(std::span<const float> adv_probs, std::span<const float> c_row);

struct MetricSeries {
    std::string name;
    std::vector<double> values;
    std::vector<std::string> batch_ids;
};

struct PearsonResult {
    double r = 0.0;
    double p = 1.0;
};

// Pearson r with a two-sided p-value from the t distribution (n-2 dof) via the
// regularized incomplete beta function.
PearsonResult pearson_with_pvalue(std::span<const double> a, std::span<const double> b);
PearsonResult pearson_with_pvalue(const MetricSeries& a, const MetricSeries& b);

}  // namespace advbench

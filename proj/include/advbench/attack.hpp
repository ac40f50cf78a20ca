#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advbench/dataset.hpp"
#include "advbench/metrics.hpp"
#include "advbench/model.hpp"

namespace advbench {

enum class AttackLoss { Mse, Bce, Ol };

std::string attack_loss_name(AttackLoss kind);
AttackLoss attack_loss_from_name(const std::string& name);

struct AttackConfig {
    float epsilon = 0.f;  // L-inf budget on the [0,1] pixel scale
    std::size_t steps = 1;
    std::optional<float> alpha;  // per-step size; defaults to epsilon*2.5/steps
    AttackLoss loss_kind = AttackLoss::Bce;
    bool targeted = false;
    bool random_start = false;
    std::uint64_t seed = 0;

    float resolved_alpha() const {
        return alpha ? *alpha : epsilon * 2.5f / static_cast<float>(steps);
    }
    void validate() const;
};

struct AdversarialBatch {
    Tensor originals;
    Tensor adversarials;
    std::vector<float> linf_norms;
    AttackConfig config;
    std::string source_model_id;
};

// MSE / BCE / OL over one logit vector against a real-valued target; identical
// formulas to the error metrics.
double attack_loss(AttackLoss kind, std::span<const float> logits, std::span<const float> target,
                   const LabelMask& mask);

// x* = clip01(x + eps * sign(grad_x BCE(M(x), truth))) over the unmasked labels.
AdversarialBatch fgsm(const Model& model, const Tensor& x,
                      const std::vector<GroundTruthVector>& truth, float epsilon);

// Iterated ascent on the attack loss against the ground-truth ranking view,
// projected into the eps-ball and the pixel box each step.
AdversarialBatch pgd_untargeted(const Model& model, const Tensor& x,
                                const std::vector<GroundTruthVector>& truth,
                                const AttackConfig& config);

// Descent toward the improbable-label row C(y_hat*) of the clean prediction's
// argmax; the target is fixed at step 0.
AdversarialBatch pgd_targeted_risk(const Model& model, const Tensor& x,
                                   const CoOccurrenceTables& tables, const AttackConfig& config);

// Adversarial batches persist as an XRDS image file plus a text manifest
// (attack config, source model id, per-input L-inf norms).
void save_adversarial(const AdversarialBatch& batch, const std::filesystem::path& path);

struct LoadedAdversarial {
    Tensor adversarials;
    AttackConfig config;
    std::string source_model_id;
    std::vector<float> linf_norms;
};

LoadedAdversarial load_adversarial(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& adversarial_path);

}  // namespace advbench

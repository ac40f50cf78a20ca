#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advbench/dataset.hpp"
#include "advbench/tensor.hpp"

namespace advbench {

enum class Architecture { MlpSmall, CnnSmall };

std::string architecture_name(Architecture arch);
Architecture architecture_from_name(const std::string& name);

struct ModelConfig {
    Architecture arch = Architecture::MlpSmall;
    std::size_t input_hw = 32;
    std::uint64_t seed = 0;
};

struct TrainingProvenance {
    std::string dataset_id;
    std::size_t epochs = 0;
    std::uint64_t seed = 0;
};

struct Model {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> parameters;  // fixed declaration order
    std::optional<std::array<float, kNumLabels>> thresholds;
    TrainingProvenance provenance;

    const Tensor& parameter(const std::string& name) const;
    std::array<float, kNumLabels> thresholds_or_default() const;
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    float learning_rate = 0.05f;
    float momentum = 0.9f;
    float weight_decay = 0.f;
    std::uint64_t seed = 0;
};

// Parameter names and shapes for an architecture (declaration order).
std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_spec(
    const ModelConfig& config);

// He-style uniform fan-in init, deterministic per (config, seed).
Model init_model(const ModelConfig& config);

// Appends the forward pass to `g` with leaves "x" plus one leaf per parameter
// name; returns the [batch,18] logits node.
NodeId build_logits_graph(Graph& g, const ModelConfig& config, std::size_t batch,
                          bool input_requires_grad, bool params_require_grad);

// Masked, frequency-weighted BCE over one sample. Uncertain and missing labels
// are masked out; fails if nothing is left.
double masked_weighted_bce(std::span<const float> logits, const GroundTruthVector& truth,
                           std::span<const float> weights);

// SGD with momentum over shuffled mini-batches. Per-epoch mean losses land in
// `curve` when provided.
Model train(const Model& model, const MultiLabelDataset& dataset, const TrainConfig& config,
            std::vector<double>* curve = nullptr);

Tensor predict_logits(const Model& model, const Tensor& images);
Tensor predict_probabilities(const Model& model, const Tensor& images);

// Per-label threshold maximizing Youden's J on the validation split; labels
// without both classes default to 0.5. Ties resolve toward 0.5.
std::array<float, kNumLabels> calibrate_thresholds(const Model& model,
                                                   const MultiLabelDataset& validation);

double k_accuracy_model(const Model& model, const MultiLabelDataset& dataset, std::size_t k);

// Model file: magic "XRMW", u32 version=1, u32 header length, UTF-8 JSON
// header (architecture, seeds, thresholds, parameter manifest with byte
// offsets), then concatenated little-endian float32 parameter blocks.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace advbench

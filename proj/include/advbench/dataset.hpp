#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advbench/tensor.hpp"

namespace advbench {

inline constexpr std::size_t kNumLabels = 18;

enum class LabelState : std::uint8_t { Positive, Negative, Uncertain, Missing };

// Per-image annotation with four states as used by radiology label sets. The ranking view
// maps Positive->1, Uncertain->0.5, Negative->0, Missing->0 (masked).
struct GroundTruthVector {
    std::array<LabelState, kNumLabels> states{};

    std::array<float, kNumLabels> ranking_view() const;
    // true unless Missing
    std::array<bool, kNumLabels> present_mask() const;
    // true only for Positive/Negative (training loss mask)
    std::array<bool, kNumLabels> train_mask() const;

    bool operator==(const GroundTruthVector&) const = default;
};

struct LabelSpace {
    std::array<std::string, kNumLabels> names;
    static LabelSpace default_space();
    bool operator==(const LabelSpace&) const = default;
};

struct MultiLabelDataset {
    Tensor images;  // N x 1 x H x W, pixels in [0,1]
    std::vector<GroundTruthVector> labels;
    LabelSpace label_space;
    std::uint64_t generation_seed = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t height() const { return images.shape[2]; }
    std::size_t width() const { return images.shape[3]; }
    // one sample as a [1,1,H,W] tensor
    Tensor image_at(std::size_t index) const;
};

using CountMatrix = std::array<std::array<std::uint64_t, kNumLabels>, kNumLabels>;
using FloatMatrix = std::array<std::array<float, kNumLabels>, kNumLabels>;

struct CoOccurrenceTables {
    CountMatrix raw_counts{};
    FloatMatrix inverse_normalized{};
};

struct GenerateConfig {
    std::size_t n_samples = 1;
    LabelSpace label_space = LabelSpace::default_space();
    // symmetric pairwise affinity in [0,1] with zero diagonal
    FloatMatrix affinity{};
    std::array<float, kNumLabels> first_label_prior;  // defaults to uniform
    float noise_sigma = 0.045f;
    std::uint64_t seed = 0;

    GenerateConfig();
};

// Built-in affinity with a deterministic cluster/chain structure; used by the
// CLI when no config file is given.
GenerateConfig default_generate_config(std::size_t n_samples, std::uint64_t seed);

MultiLabelDataset generate_dataset(const GenerateConfig& config);

CountMatrix co_occurrence_counts(const MultiLabelDataset& dataset);
FloatMatrix inverse_normalize(const CountMatrix& raw_counts);
CoOccurrenceTables build_co_occurrence(const MultiLabelDataset& dataset);

std::array<float, kNumLabels> label_frequency_weights(const MultiLabelDataset& dataset);

// Binary image container: magic "XRDS", u32 version=1, u32 N, u32 H, u32 W,
// then N*H*W little-endian float32. Labels live in a companion
// `<stem>.labels.csv`. Datasets write/read both files.
void save_dataset(const MultiLabelDataset& dataset, const std::filesystem::path& path);
MultiLabelDataset load_dataset(const std::filesystem::path& path);

void save_images_xrds(const Tensor& images, const std::filesystem::path& path);
Tensor load_images_xrds(const std::filesystem::path& path);

std::filesystem::path labels_csv_path(const std::filesystem::path& dataset_path);

// 18x18 matrices as CSV with a label-name header row and column.
void save_matrix_csv(const FloatMatrix& m, const LabelSpace& labels,
                     const std::filesystem::path& path);
void save_matrix_csv(const CountMatrix& m, const LabelSpace& labels,
                     const std::filesystem::path& path);
FloatMatrix load_matrix_csv(const std::filesystem::path& path);

}  // namespace advbench

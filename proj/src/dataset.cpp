#include "advbench/dataset.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "advbench/rng.hpp"

namespace advbench {

std::array<float, kNumLabels> GroundTruthVector::ranking_view() const {
    std::array<float, kNumLabels> v{};
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        switch (states[i]) {
            case LabelState::Positive: v[i] = 1.0f; break;
            case LabelState::Uncertain: v[i] = 0.5f; break;
            case LabelState::Negative:
            case LabelState::Missing: v[i] = 0.0f; break;
        }
    }
    return v;
}

std::array<bool, kNumLabels> GroundTruthVector::present_mask() const {
    std::array<bool, kNumLabels> m{};
    for (std::size_t i = 0; i < kNumLabels; ++i) m[i] = states[i] != LabelState::Missing;
    return m;
}

std::array<bool, kNumLabels> GroundTruthVector::train_mask() const {
    std::array<bool, kNumLabels> m{};
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        m[i] = states[i] == LabelState::Positive || states[i] == LabelState::Negative;
    }
    return m;
}

LabelSpace LabelSpace::default_space() {
    return LabelSpace{{
        "Atelectasis",
        "Consolidation",
        "Infiltration",
        "Pneumothorax",
        "Edema",
        "Emphysema",
        "Fibrosis",
        "Effusion",
        "Pneumonia",
        "Pleural_Thickening",
        "Cardiomegaly",
        "Nodule",
        "Mass",
        "Hernia",
        "Lung_Lesion",
        "Fracture",
        "Lung_Opacity",
        "Enlarged_Cardiomediastinum",
    }};
}

Tensor MultiLabelDataset::image_at(std::size_t index) const {
    const std::size_t hw = height() * width();
    Tensor t = Tensor::zeros({1, 1, height(), width()});
    std::copy_n(images.data.begin() + index * hw, hw, t.data.begin());
    return t;
}

GenerateConfig::GenerateConfig() {
    first_label_prior.fill(1.0f / kNumLabels);
    for (auto& row : affinity) row.fill(0.f);
}

GenerateConfig default_generate_config(std::size_t n_samples, std::uint64_t seed) {
    GenerateConfig cfg;
    cfg.n_samples = n_samples;
    cfg.seed = seed;
    // cluster + chain pattern, rotated by the seed so different seeds give
    // different co-occurrence structures
    const std::size_t r = static_cast<std::size_t>(seed % kNumLabels);
    auto set = [&](std::size_t i, std::size_t j, float v) {
        std::size_t a = (i + r) % kNumLabels;
        std::size_t b = (j + r) % kNumLabels;
        cfg.affinity[a][b] = v;
        cfg.affinity[b][a] = v;
    };
    set(0, 1, 0.8f);
    set(0, 2, 0.5f);
    set(1, 2, 0.5f);
    set(3, 4, 0.7f);
    set(5, 6, 0.6f);
    set(7, 8, 0.5f);
    for (std::size_t i = 9; i < 14; ++i) set(i, i + 1, 0.35f);
    return cfg;
}

namespace {

void validate_affinity(const FloatMatrix& a) {
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        if (a[i][i] != 0.f) throw std::invalid_argument("affinity diagonal must be zero");
        for (std::size_t j = 0; j < kNumLabels; ++j) {
            if (a[i][j] != a[j][i]) throw std::invalid_argument("affinity matrix must be symmetric");
            if (!(a[i][j] >= 0.f && a[i][j] <= 1.f)) {
                throw std::invalid_argument("affinity entries must lie in [0,1]");
            }
        }
    }
}

std::size_t sample_index(Rng& rng, const float* weights, const bool* allowed, std::size_t n,
                         double total) {
    double u = rng.next_double() * total;
    double acc = 0.0;
    std::size_t last = 0;
    bool seen = false;
    for (std::size_t i = 0; i < n; ++i) {
        if (allowed && !allowed[i]) continue;
        if (weights[i] <= 0.f) continue;
        acc += static_cast<double>(weights[i]);
        last = i;
        seen = true;
        if (u < acc) return i;
    }
    if (!seen) throw std::logic_error("sample_index called with empty support");
    return last;
}

constexpr std::size_t kGratingsPerLabel = 4;

struct LabelSignature {
    float cx, cy;                        // bump center
    float tx, ty;                        // local bump texture frequency
    float phase;
    float wx[kGratingsPerLabel];         // whole-image grating frequencies
    float wy[kGratingsPerLabel];
};

LabelSignature signature_for(std::size_t label) {
    const std::size_t col = label % 6;
    const std::size_t row = label / 6;
    LabelSignature sig;
    sig.cx = 3.0f + 5.2f * static_cast<float>(col);
    sig.cy = 5.5f + 10.4f * static_cast<float>(row);
    sig.tx = 0.9f + 0.15f * static_cast<float>(label % 5);
    sig.ty = 0.8f + 0.13f * static_cast<float>(label % 7);
    sig.phase = 2.399f * static_cast<float>(label);
    // the 72 (label, harmonic) pairs tile a 6x6x2 frequency lattice exactly:
    // spacing stays above the 32-pixel window's resolution limit and below
    // the pooling stack's usable band
    for (std::size_t k = 0; k < kGratingsPerLabel; ++k) {
        const std::size_t slot = label + kNumLabels * k;
        const float orient = slot < 36 ? 1.f : -1.f;
        sig.wx[k] = 0.30f + 0.18f * static_cast<float>(slot % 6);
        sig.wy[k] = orient * (0.30f + 0.18f * static_cast<float>((slot / 6) % 6));
    }
    return sig;
}

// Each pathology renders as a focal bright bump (easy, robust evidence that
// carries detection) plus several faint whole-image gratings (diffuse
// evidence at contrast a few multiples of the 1/255-scale attack budgets,
// split across harmonics so aggregate evidence adds in quadrature while
// perturbation leverage adds linearly). Trained models couple to both kinds
// of evidence, so small-budget perturbations can rearrange the predicted
// ordering without erasing the focal finding, the regime radiograph models
// live in.
constexpr float kEnvelopeSigma = 2.8f;
constexpr float kBumpAmplitude = 0.06f;
constexpr float kGratingAmplitude = 0.008f;
constexpr float kAmplitudeDecay = 0.03f;
constexpr std::size_t kImageHw = 32;

float label_amplitude(std::size_t label) {
    return 1.f - kAmplitudeDecay * static_cast<float>(label);
}

}  // namespace

MultiLabelDataset generate_dataset(const GenerateConfig& config) {
    if (config.n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    validate_affinity(config.affinity);

    const std::size_t h = kImageHw, w = kImageHw;
    MultiLabelDataset ds;
    ds.label_space = config.label_space;
    ds.generation_seed = config.seed;
    ds.images = Tensor::zeros({config.n_samples, 1, h, w});
    ds.labels.resize(config.n_samples);

    for (std::size_t s = 0; s < config.n_samples; ++s) {
        Rng rng(Rng::derive(config.seed, s));

        // label draw: count, prior-first, then affinity-proportional co-draws
        const std::size_t target_count = 1 + static_cast<std::size_t>(rng.next_below(3));
        bool drawn[kNumLabels] = {};
        double prior_total = 0.0;
        for (float p : config.first_label_prior) prior_total += static_cast<double>(p);
        if (!(prior_total > 0.0)) throw std::invalid_argument("first_label_prior must sum > 0");
        std::size_t first = sample_index(rng, config.first_label_prior.data(), nullptr,
                                         kNumLabels, prior_total);
        drawn[first] = true;
        std::size_t n_drawn = 1;
        while (n_drawn < target_count) {
            float weights[kNumLabels];
            double total = 0.0;
            for (std::size_t j = 0; j < kNumLabels; ++j) {
                weights[j] = 0.f;
                if (drawn[j]) continue;
                float acc = 0.f;
                for (std::size_t i = 0; i < kNumLabels; ++i) {
                    if (drawn[i]) acc += config.affinity[i][j];
                }
                weights[j] = acc;
                total += static_cast<double>(acc);
            }
            if (!(total > 0.0)) break;
            bool allowed[kNumLabels];
            for (std::size_t j = 0; j < kNumLabels; ++j) allowed[j] = !drawn[j];
            std::size_t next = sample_index(rng, weights, allowed, kNumLabels, total);
            drawn[next] = true;
            ++n_drawn;
        }

        // render: smooth background + per-label signatures + pixel noise
        const float b0 = 0.18f + 0.08f * rng.next_float();
        const float bx = 0.12f * (rng.next_float() - 0.5f);
        const float by = 0.12f * (rng.next_float() - 0.5f);
        // exposure spread: weakly exposed studies carry thin margins
        const float contrast = 0.30f + 1.10f * rng.next_float();
        float* img = ds.images.data.data() + s * h * w;
        LabelSignature sigs[kNumLabels];
        for (std::size_t l = 0; l < kNumLabels; ++l) sigs[l] = signature_for(l);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                float fx = static_cast<float>(x), fy = static_cast<float>(y);
                float v = b0 + bx * fx / static_cast<float>(w - 1) +
                          by * fy / static_cast<float>(h - 1);
                for (std::size_t l = 0; l < kNumLabels; ++l) {
                    if (!drawn[l]) continue;
                    const LabelSignature& sig = sigs[l];
                    float dx = fx - sig.cx, dy = fy - sig.cy;
                    float env = std::exp(-(dx * dx + dy * dy) /
                                         (2.f * kEnvelopeSigma * kEnvelopeSigma));
                    float bump = 0.75f + 0.25f * std::sin(sig.tx * fx + sig.ty * fy + sig.phase);
                    float gratings = 0.f;
                    for (std::size_t q = 0; q < kGratingsPerLabel; ++q) {
                        gratings += std::sin(sig.wx[q] * fx + sig.wy[q] * fy + sig.phase);
                    }
                    v += contrast * label_amplitude(l) *
                         (kBumpAmplitude * env * bump + kGratingAmplitude * gratings);
                }
                v += rng.normal(config.noise_sigma);
                v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
                img[y * w + x] = v;
            }
        }

        // annotation states with missing/uncertain corruption
        GroundTruthVector gt;
        for (std::size_t l = 0; l < kNumLabels; ++l) {
            gt.states[l] = drawn[l] ? LabelState::Positive : LabelState::Negative;
        }
        for (std::size_t l = 0; l < kNumLabels; ++l) {
            if (gt.states[l] == LabelState::Negative) {
                if (rng.next_double() < 0.1) gt.states[l] = LabelState::Missing;
            } else if (gt.states[l] == LabelState::Positive) {
                if (rng.next_double() < 0.05) gt.states[l] = LabelState::Uncertain;
            }
        }
        ds.labels[s] = gt;
    }
    return ds;
}

CountMatrix co_occurrence_counts(const MultiLabelDataset& dataset) {
    if (dataset.size() == 0) throw std::invalid_argument("dataset is empty");
    CountMatrix counts{};
    for (const auto& gt : dataset.labels) {
        for (std::size_t i = 0; i < kNumLabels; ++i) {
            if (gt.states[i] != LabelState::Positive) continue;
            counts[i][i] += 1;
            for (std::size_t j = i + 1; j < kNumLabels; ++j) {
                if (gt.states[j] == LabelState::Positive) {
                    counts[i][j] += 1;
                    counts[j][i] += 1;
                }
            }
        }
    }
    return counts;
}

FloatMatrix inverse_normalize(const CountMatrix& raw_counts) {
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        for (std::size_t j = 0; j < kNumLabels; ++j) {
            if (raw_counts[i][j] != raw_counts[j][i]) {
                throw std::invalid_argument("co-occurrence counts must be symmetric");
            }
        }
    }
    FloatMatrix c{};
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        std::uint64_t row_max = 0;
        for (std::size_t j = 0; j < kNumLabels; ++j) {
            if (j != i) row_max = std::max(row_max, raw_counts[i][j]);
        }
        for (std::size_t j = 0; j < kNumLabels; ++j) {
            if (j == i) {
                c[i][j] = 0.f;
            } else if (row_max > 0) {
                c[i][j] = 1.f - static_cast<float>(static_cast<double>(raw_counts[i][j]) /
                                                   static_cast<double>(row_max));
            } else {
                c[i][j] = 1.f;
            }
        }
    }
    return c;
}

CoOccurrenceTables build_co_occurrence(const MultiLabelDataset& dataset) {
    CoOccurrenceTables t;
    t.raw_counts = co_occurrence_counts(dataset);
    t.inverse_normalized = inverse_normalize(t.raw_counts);
    return t;
}

std::array<float, kNumLabels> label_frequency_weights(const MultiLabelDataset& dataset) {
    if (dataset.size() == 0) throw std::invalid_argument("dataset is empty");
    std::array<double, kNumLabels> w{};
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        std::uint64_t present = 0, positive = 0;
        for (const auto& gt : dataset.labels) {
            if (gt.states[i] != LabelState::Missing) ++present;
            if (gt.states[i] == LabelState::Positive) ++positive;
        }
        w[i] = static_cast<double>(present) / static_cast<double>(positive + 1);
    }
    double total = 0.0;
    for (double v : w) total += v;
    if (!(total > 0.0)) throw std::runtime_error("all label weights are zero");
    std::array<float, kNumLabels> out{};
    const double scale = static_cast<double>(kNumLabels) / total;
    for (std::size_t i = 0; i < kNumLabels; ++i) out[i] = static_cast<float>(w[i] * scale);
    return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, std::size_t offset, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw std::runtime_error(std::string("truncated file: could not read ") + what +
                                 " at offset " + std::to_string(offset));
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

std::string float_to_string(float v) {
    char buf[48];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

constexpr char kDatasetMagic[4] = {'X', 'R', 'D', 'S'};

}  // namespace

std::filesystem::path labels_csv_path(const std::filesystem::path& dataset_path) {
    std::filesystem::path p = dataset_path;
    p.replace_extension(".labels.csv");
    return p;
}

void save_images_xrds(const Tensor& images, const std::filesystem::path& path) {
    if (images.shape.size() != 4 || images.shape[1] != 1) {
        throw std::invalid_argument("images must have shape [N,1,H,W]");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os.write(kDatasetMagic, 4);
    put_u32(os, 1);
    put_u32(os, static_cast<std::uint32_t>(images.shape[0]));
    put_u32(os, static_cast<std::uint32_t>(images.shape[2]));
    put_u32(os, static_cast<std::uint32_t>(images.shape[3]));
    for (float v : images.data) put_f32(os, v);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

Tensor load_images_xrds(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path.string());
    char magic[4];
    if (!is.read(magic, 4)) throw std::runtime_error("truncated file: no magic at offset 0");
    if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
        throw std::runtime_error("bad magic at offset 0: expected \"XRDS\"");
    }
    std::uint32_t version = get_u32(is, 4, "version");
    if (version != 1) {
        throw std::runtime_error("unsupported version " + std::to_string(version) +
                                 " at offset 4");
    }
    std::uint32_t n = get_u32(is, 8, "sample count");
    std::uint32_t h = get_u32(is, 12, "height");
    std::uint32_t w = get_u32(is, 16, "width");
    if (n < 1) throw std::runtime_error("invalid sample count 0 at offset 8");
    if (h < 1 || w < 1) throw std::runtime_error("invalid image size at offset 12");
    const std::size_t count = static_cast<std::size_t>(n) * h * w;
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t offset = 20 + i * 4;
        std::uint32_t bits = get_u32(is, offset, "pixel data");
        data[i] = std::bit_cast<float>(bits);
        if (!std::isfinite(data[i])) {
            throw std::runtime_error("non-finite pixel at offset " + std::to_string(offset));
        }
    }
    return Tensor::from_data({n, 1, h, w}, std::move(data));
}

namespace {

void save_labels_csv(const MultiLabelDataset& ds, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << "id";
    for (const auto& name : ds.label_space.names) os << ',' << name;
    os << '\n';
    for (std::size_t s = 0; s < ds.size(); ++s) {
        os << s;
        for (std::size_t l = 0; l < kNumLabels; ++l) {
            os << ',';
            switch (ds.labels[s].states[l]) {
                case LabelState::Positive: os << '1'; break;
                case LabelState::Negative: os << '0'; break;
                case LabelState::Uncertain: os << "-1"; break;
                case LabelState::Missing: break;
            }
        }
        os << '\n';
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

void save_dataset(const MultiLabelDataset& dataset, const std::filesystem::path& path) {
    if (dataset.size() == 0) throw std::invalid_argument("refusing to save empty dataset");
    save_images_xrds(dataset.images, path);
    save_labels_csv(dataset, labels_csv_path(path));
}

MultiLabelDataset load_dataset(const std::filesystem::path& path) {
    MultiLabelDataset ds;
    ds.images = load_images_xrds(path);
    for (float v : ds.images.data) {
        if (v < 0.f || v > 1.f) {
            throw std::runtime_error("pixel outside [0,1] in " + path.string());
        }
    }

    const std::filesystem::path lpath = labels_csv_path(path);
    std::ifstream is(lpath, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open labels file: " + lpath.string());
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("labels file is empty: " + lpath.string());
    auto header = split_csv_line(line);
    if (header.size() != kNumLabels + 1 || header[0] != "id") {
        throw std::runtime_error("labels header must be `id,<18 label names>` in " +
                                 lpath.string());
    }
    for (std::size_t l = 0; l < kNumLabels; ++l) ds.label_space.names[l] = header[l + 1];

    const std::size_t n = ds.images.shape[0];
    ds.labels.resize(n);
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (row >= n) throw std::runtime_error("labels file has more rows than images");
        auto cells = split_csv_line(line);
        if (cells.size() != kNumLabels + 1) {
            throw std::runtime_error("labels row " + std::to_string(row) + " has " +
                                     std::to_string(cells.size()) + " cells, expected 19");
        }
        GroundTruthVector gt;
        bool any_present = false;
        for (std::size_t l = 0; l < kNumLabels; ++l) {
            const std::string& cell = cells[l + 1];
            if (cell.empty()) {
                gt.states[l] = LabelState::Missing;
            } else if (cell == "1") {
                gt.states[l] = LabelState::Positive;
                any_present = true;
            } else if (cell == "0") {
                gt.states[l] = LabelState::Negative;
                any_present = true;
            } else if (cell == "-1") {
                gt.states[l] = LabelState::Uncertain;
                any_present = true;
            } else {
                throw std::runtime_error("invalid label cell `" + cell + "` in row " +
                                         std::to_string(row));
            }
        }
        if (!any_present) {
            throw std::runtime_error("labels row " + std::to_string(row) + " is entirely missing");
        }
        ds.labels[row] = gt;
        ++row;
    }
    if (row != n) {
        throw std::runtime_error("labels file has " + std::to_string(row) + " rows, expected " +
                                 std::to_string(n));
    }
    return ds;
}

namespace {

template <typename M, typename Fmt>
void save_matrix_csv_impl(const M& m, const LabelSpace& labels,
                          const std::filesystem::path& path, Fmt fmt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << "label";
    for (const auto& name : labels.names) os << ',' << name;
    os << '\n';
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        os << labels.names[i];
        for (std::size_t j = 0; j < kNumLabels; ++j) os << ',' << fmt(m[i][j]);
        os << '\n';
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

void save_matrix_csv(const FloatMatrix& m, const LabelSpace& labels,
                     const std::filesystem::path& path) {
    save_matrix_csv_impl(m, labels, path, [](float v) { return float_to_string(v); });
}

void save_matrix_csv(const CountMatrix& m, const LabelSpace& labels,
                     const std::filesystem::path& path) {
    save_matrix_csv_impl(m, labels, path, [](std::uint64_t v) { return std::to_string(v); });
}

FloatMatrix load_matrix_csv(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("matrix file is empty: " + path.string());
    auto header = split_csv_line(line);
    if (header.size() != kNumLabels + 1) {
        throw std::runtime_error("matrix header must carry 18 label names in " + path.string());
    }
    FloatMatrix m{};
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        if (!std::getline(is, line)) {
            throw std::runtime_error("matrix file truncated at row " + std::to_string(i));
        }
        auto cells = split_csv_line(line);
        if (cells.size() != kNumLabels + 1) {
            throw std::runtime_error("matrix row " + std::to_string(i) + " has " +
                                     std::to_string(cells.size()) + " cells, expected 19");
        }
        for (std::size_t j = 0; j < kNumLabels; ++j) {
            const std::string& cell = cells[j + 1];
            float v = 0.f;
            auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
                throw std::runtime_error("invalid matrix cell `" + cell + "` at row " +
                                         std::to_string(i));
            }
            m[i][j] = v;
        }
    }
    return m;
}

}  // namespace advbench

#include "advbench/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "advbench/kernels.hpp"
#include "advbench/metrics.hpp"
#include "advbench/rng.hpp"

namespace advbench {

std::string architecture_name(Architecture arch) {
    switch (arch) {
        case Architecture::MlpSmall: return "mlp-small";
        case Architecture::CnnSmall: return "cnn-small";
    }
    return "?";
}

Architecture architecture_from_name(const std::string& name) {
    if (name == "mlp-small") return Architecture::MlpSmall;
    if (name == "cnn-small") return Architecture::CnnSmall;
    throw std::invalid_argument("unknown architecture: " + name +
                                " (expected mlp-small or cnn-small)");
}

const Tensor& Model::parameter(const std::string& name) const {
    for (const auto& [n, t] : parameters) {
        if (n == name) return t;
    }
    throw std::out_of_range("model has no parameter named " + name);
}

std::array<float, kNumLabels> Model::thresholds_or_default() const {
    if (thresholds) return *thresholds;
    std::array<float, kNumLabels> t;
    t.fill(0.5f);
    return t;
}

namespace {

struct CnnDims {
    std::size_t conv1_out, pool1, conv2_out, pool2, flat;
};

CnnDims cnn_dims(std::size_t hw) {
    CnnDims d;
    d.conv1_out = hw - 2;
    d.pool1 = d.conv1_out / 2;
    if (d.pool1 < 3) throw std::invalid_argument("input_hw too small for cnn-small");
    d.conv2_out = d.pool1 - 2;
    d.pool2 = d.conv2_out / 2;
    if (d.pool2 < 1) throw std::invalid_argument("input_hw too small for cnn-small");
    d.flat = 16 * d.pool2 * d.pool2;
    return d;
}

}  // namespace

std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_spec(
    const ModelConfig& config) {
    const std::size_t hw = config.input_hw;
    if (hw < 4) throw std::invalid_argument("input_hw must be at least 4");
    switch (config.arch) {
        case Architecture::MlpSmall:
            return {
                {"fc1.w", {hw * hw, 256}},
                {"fc1.b", {256}},
                {"fc2.w", {256, kNumLabels}},
                {"fc2.b", {kNumLabels}},
            };
        case Architecture::CnnSmall: {
            CnnDims d = cnn_dims(hw);
            return {
                {"conv1.w", {8, 1, 3, 3}},
                {"conv2.w", {16, 8, 3, 3}},
                {"fc1.w", {d.flat, 64}},
                {"fc1.b", {64}},
                {"fc2.w", {64, kNumLabels}},
                {"fc2.b", {kNumLabels}},
            };
        }
    }
    throw std::invalid_argument("unknown architecture");
}

Model init_model(const ModelConfig& config) {
    Model m;
    m.config = config;
    for (const auto& [name, shape] : parameter_spec(config)) {
        Tensor t = Tensor::zeros(shape);
        if (!name.ends_with(".b")) {
            const std::size_t fan_in =
                shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
            const float limit = std::sqrt(6.f / static_cast<float>(fan_in));
            Rng rng(Rng::derive(config.seed, name));
            for (auto& v : t.data) v = rng.uniform(-limit, limit);
        }
        m.parameters.emplace_back(name, std::move(t));
    }
    return m;
}

NodeId build_logits_graph(Graph& g, const ModelConfig& config, std::size_t batch,
                          bool input_requires_grad, bool params_require_grad) {
    const std::size_t hw = config.input_hw;
    NodeId x = g.leaf("x", {batch, 1, hw, hw}, input_requires_grad);
    std::map<std::string, NodeId> params;
    for (const auto& [name, shape] : parameter_spec(config)) {
        params[name] = g.leaf(name, shape, params_require_grad);
    }
    switch (config.arch) {
        case Architecture::MlpSmall: {
            NodeId flat = g.reshape(x, {batch, hw * hw});
            NodeId h = g.relu(g.bias_add(g.matmul(flat, params["fc1.w"]), params["fc1.b"]));
            return g.bias_add(g.matmul(h, params["fc2.w"]), params["fc2.b"]);
        }
        case Architecture::CnnSmall: {
            CnnDims d = cnn_dims(hw);
            NodeId c1 = g.maxpool2x2(g.relu(g.conv2d_valid(x, params["conv1.w"])));
            NodeId c2 = g.maxpool2x2(g.relu(g.conv2d_valid(c1, params["conv2.w"])));
            NodeId flat = g.reshape(c2, {batch, d.flat});
            NodeId h = g.relu(g.bias_add(g.matmul(flat, params["fc1.w"]), params["fc1.b"]));
            return g.bias_add(g.matmul(h, params["fc2.w"]), params["fc2.b"]);
        }
    }
    throw std::invalid_argument("unknown architecture");
}

double masked_weighted_bce(std::span<const float> logits, const GroundTruthVector& truth,
                           std::span<const float> weights) {
    if (logits.size() != kNumLabels || weights.size() != kNumLabels) {
        throw std::invalid_argument("masked_weighted_bce expects 18 logits and 18 weights");
    }
    for (float w : weights) {
        if (!(w > 0.f)) throw std::invalid_argument("weights must be positive");
    }
    const auto mask = truth.train_mask();
    double num = 0.0, denom = 0.0;
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        if (!mask[i]) continue;
        const double z = logits[i];
        const double t = truth.states[i] == LabelState::Positive ? 1.0 : 0.0;
        const double m = z > 0 ? z : 0;
        const double bce = (m + std::log1p(std::exp(-std::fabs(z)))) - z * t;
        num += static_cast<double>(weights[i]) * bce;
        denom += static_cast<double>(weights[i]);
    }
    if (denom == 0.0) throw std::runtime_error("masked_weighted_bce: all labels masked");
    return num / denom;
}

namespace {

// L = sum(sw ⊙ (softplus(z) − z⊙t)); per-sample normalization folded into sw
Graph build_train_graph(const ModelConfig& config, std::size_t batch) {
    Graph g;
    NodeId z = build_logits_graph(g, config, batch, false, true);
    NodeId t = g.leaf("t", {batch, kNumLabels}, false);
    NodeId sw = g.leaf("sw", {batch, kNumLabels}, false);
    NodeId bce = g.sub(g.softplus(z), g.mul(z, t));
    g.sum_reduce(g.mul(sw, bce));
    return g;
}

void fill_batch(const MultiLabelDataset& ds, const std::vector<std::size_t>& indices,
                std::size_t begin, std::size_t count,
                const std::array<float, kNumLabels>& weights, Tensor& x, Tensor& t, Tensor& sw) {
    const std::size_t hw = ds.height() * ds.width();
    for (std::size_t b = 0; b < count; ++b) {
        const std::size_t idx = indices[begin + b];
        std::copy_n(ds.images.data.begin() + idx * hw, hw, x.data.begin() + b * hw);
        const auto& gt = ds.labels[idx];
        const auto mask = gt.train_mask();
        double denom = 0.0;
        for (std::size_t l = 0; l < kNumLabels; ++l) {
            if (mask[l]) denom += static_cast<double>(weights[l]);
        }
        if (denom == 0.0) {
            throw std::runtime_error("sample " + std::to_string(idx) +
                                     " has every label masked; loss undefined");
        }
        for (std::size_t l = 0; l < kNumLabels; ++l) {
            t.data[b * kNumLabels + l] = gt.states[l] == LabelState::Positive ? 1.f : 0.f;
            sw.data[b * kNumLabels + l] =
                mask[l] ? static_cast<float>(static_cast<double>(weights[l]) /
                                             (denom * static_cast<double>(count)))
                        : 0.f;
        }
    }
}

}  // namespace

Model train(const Model& model, const MultiLabelDataset& dataset, const TrainConfig& config,
            std::vector<double>* curve) {
    if (config.batch_size < 1 || config.batch_size > dataset.size()) {
        throw std::invalid_argument("batch_size must lie in [1, dataset size]");
    }
    if (!(config.learning_rate > 0.f) || !(config.momentum >= 0.f) ||
        !(config.weight_decay >= 0.f)) {
        throw std::invalid_argument("train hyperparameters must be positive");
    }
    if (dataset.height() != model.config.input_hw || dataset.width() != model.config.input_hw) {
        throw std::invalid_argument("dataset image size does not match the model input size");
    }

    Model out = model;
    out.provenance.epochs = config.epochs;
    out.provenance.seed = config.seed;
    if (curve) curve->clear();
    if (config.epochs == 0) return out;

    const auto weights = label_frequency_weights(dataset);
    std::vector<std::size_t> indices(dataset.size());
    std::iota(indices.begin(), indices.end(), 0);

    std::map<std::size_t, Graph> graphs;
    std::map<std::size_t, std::array<Tensor, 3>> buffers;  // x, t, sw per batch size
    std::vector<std::vector<float>> velocity(out.parameters.size());
    for (std::size_t p = 0; p < out.parameters.size(); ++p) {
        velocity[p].assign(out.parameters[p].second.size(), 0.f);
    }
    const auto& kt = kernels::active();
    const std::uint64_t shuffle_seed = Rng::derive(config.seed, "shuffle");

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive(shuffle_seed, epoch));
        shuffle_rng.shuffle(indices.data(), indices.size());
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < dataset.size(); begin += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, dataset.size() - begin);
            auto git = graphs.find(count);
            if (git == graphs.end()) {
                git = graphs.emplace(count, build_train_graph(out.config, count)).first;
                buffers[count] = {Tensor::zeros({count, 1, dataset.height(), dataset.width()}),
                                  Tensor::zeros({count, kNumLabels}),
                                  Tensor::zeros({count, kNumLabels})};
            }
            auto& [x, t, sw] = buffers[count];
            fill_batch(dataset, indices, begin, count, weights, x, t, sw);

            Graph::Bindings binds = {{"x", &x}, {"t", &t}, {"sw", &sw}};
            for (const auto& [name, tensor] : out.parameters) binds[name] = &tensor;

            double loss;
            std::unordered_map<std::string, Tensor> grads;
            try {
                loss = git->second.forward(binds).data[0];
                grads = git->second.backward(Tensor::from_data({1}, {1.f}));
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) +
                                         ": " + e.what());
            }
            if (!std::isfinite(loss)) {
                throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) +
                                         ": loss is not finite");
            }
            epoch_loss += loss;
            ++batches;

            for (std::size_t p = 0; p < out.parameters.size(); ++p) {
                auto& tensor = out.parameters[p].second;
                const auto& g = grads.at(out.parameters[p].first);
                float* v = velocity[p].data();
                // v <- momentum*v + g (+ wd*theta); theta <- theta - lr*v
                kt.vscale(v, config.momentum, v, g.size());
                kt.vaxpy(g.data.data(), 1.f, v, g.size());
                if (config.weight_decay > 0.f) {
                    kt.vaxpy(tensor.data.data(), config.weight_decay, v, g.size());
                }
                kt.vaxpy(v, -config.learning_rate, tensor.data.data(), g.size());
            }
        }
        if (curve) curve->push_back(epoch_loss / static_cast<double>(batches));
    }
    return out;
}

namespace {

constexpr std::size_t kPredictChunk = 256;

}

Tensor predict_logits(const Model& model, const Tensor& images) {
    if (images.shape.size() != 4 || images.shape[1] != 1 ||
        images.shape[2] != model.config.input_hw || images.shape[3] != model.config.input_hw) {
        throw std::invalid_argument("images must be [N,1," +
                                    std::to_string(model.config.input_hw) + "," +
                                    std::to_string(model.config.input_hw) + "], got " +
                                    images.shape_str());
    }
    const std::size_t n = images.shape[0];
    const std::size_t hw = images.shape[2] * images.shape[3];
    Tensor out = Tensor::zeros({n, kNumLabels});
    std::map<std::size_t, Graph> graphs;
    for (std::size_t begin = 0; begin < n; begin += kPredictChunk) {
        const std::size_t count = std::min(kPredictChunk, n - begin);
        auto git = graphs.find(count);
        if (git == graphs.end()) {
            Graph g;
            build_logits_graph(g, model.config, count, false, false);
            git = graphs.emplace(count, std::move(g)).first;
        }
        Tensor x = Tensor::zeros({count, 1, images.shape[2], images.shape[3]});
        std::copy_n(images.data.begin() + begin * hw, count * hw, x.data.begin());
        Graph::Bindings binds = {{"x", &x}};
        for (const auto& [name, tensor] : model.parameters) binds[name] = &tensor;
        const Tensor& z = git->second.forward(binds);
        std::copy_n(z.data.begin(), count * kNumLabels, out.data.begin() + begin * kNumLabels);
    }
    return out;
}

Tensor predict_probabilities(const Model& model, const Tensor& images) {
    Tensor z = predict_logits(model, images);
    Tensor p = Tensor::zeros(z.shape);
    kernels::sigmoid_fwd(z.data.data(), p.data.data(), z.size());
    return p;
}

std::array<float, kNumLabels> calibrate_thresholds(const Model& model,
                                                   const MultiLabelDataset& validation) {
    Tensor probs = predict_probabilities(model, validation.images);
    std::array<float, kNumLabels> out;
    out.fill(0.5f);
    for (std::size_t label = 0; label < kNumLabels; ++label) {
        std::vector<float> pos, neg;
        for (std::size_t i = 0; i < validation.size(); ++i) {
            const float score = probs.data[i * kNumLabels + label];
            if (validation.labels[i].states[label] == LabelState::Positive) {
                pos.push_back(score);
            } else if (validation.labels[i].states[label] == LabelState::Negative) {
                neg.push_back(score);
            }
        }
        if (pos.empty() || neg.empty()) continue;

        std::vector<float> all = pos;
        all.insert(all.end(), neg.begin(), neg.end());
        std::sort(all.begin(), all.end());
        all.erase(std::unique(all.begin(), all.end()), all.end());
        if (all.size() < 2) continue;  // all scores equal: keep the 0.5 default

        float best_t = 0.f;
        double best_j = 0.0;
        bool have = false;
        for (std::size_t i = 0; i + 1 < all.size(); ++i) {
            const float t = 0.5f * (all[i] + all[i + 1]);
            std::size_t tp = 0, fp = 0;
            for (float s : pos) tp += s >= t ? 1 : 0;
            for (float s : neg) fp += s >= t ? 1 : 0;
            const double j = static_cast<double>(tp) / static_cast<double>(pos.size()) -
                             static_cast<double>(fp) / static_cast<double>(neg.size());
            const bool better =
                !have || j > best_j ||
                (j == best_j && (std::fabs(t - 0.5f) < std::fabs(best_t - 0.5f) ||
                                 (std::fabs(t - 0.5f) == std::fabs(best_t - 0.5f) && t < best_t)));
            if (better) {
                best_j = j;
                best_t = t;
                have = true;
            }
        }
        out[label] = best_t;
    }
    return out;
}

double k_accuracy_model(const Model& model, const MultiLabelDataset& dataset, std::size_t k) {
    Tensor probs = predict_probabilities(model, dataset.images);
    return k_accuracy_mean(probs, dataset.labels, k);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

constexpr char kModelMagic[4] = {'X', 'R', 'M', 'W'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw std::runtime_error(std::string("truncated model file: missing ") + what);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_model(const Model& model, const std::filesystem::path& path) {
    nlohmann::json header;
    header["architecture"] = architecture_name(model.config.arch);
    header["input_hw"] = model.config.input_hw;
    header["model_seed"] = model.config.seed;
    header["provenance"] = {{"dataset_id", model.provenance.dataset_id},
                            {"epochs", model.provenance.epochs},
                            {"train_seed", model.provenance.seed}};
    if (model.thresholds) {
        header["thresholds"] =
            std::vector<float>(model.thresholds->begin(), model.thresholds->end());
    } else {
        header["thresholds"] = nullptr;
    }
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, tensor] : model.parameters) {
        manifest.push_back({{"name", name}, {"shape", tensor.shape}, {"offset", offset}});
        offset += tensor.size() * sizeof(float);
    }
    header["parameters"] = manifest;
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os.write(kModelMagic, 4);
    put_u32(os, 1);
    put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, tensor] : model.parameters) {
        for (float v : tensor.data) put_u32(os, std::bit_cast<std::uint32_t>(v));
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path.string());
    char magic[4];
    if (!is.read(magic, 4)) throw std::runtime_error("truncated model file: missing magic");
    if (std::memcmp(magic, kModelMagic, 4) != 0) {
        throw std::runtime_error("bad magic: expected \"XRMW\" in " + path.string());
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != 1) {
        throw std::runtime_error("unsupported model version " + std::to_string(version));
    }
    const std::uint32_t header_len = get_u32(is, "header length");
    std::string text(header_len, '\0');
    if (!is.read(text.data(), header_len)) {
        throw std::runtime_error("truncated model file: header cut short");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("invalid model header: " + std::string(e.what()));
    }

    Model m;
    m.config.arch = architecture_from_name(header.at("architecture").get<std::string>());
    m.config.input_hw = header.at("input_hw").get<std::size_t>();
    m.config.seed = header.at("model_seed").get<std::uint64_t>();
    const auto& prov = header.at("provenance");
    m.provenance.dataset_id = prov.at("dataset_id").get<std::string>();
    m.provenance.epochs = prov.at("epochs").get<std::size_t>();
    m.provenance.seed = prov.at("train_seed").get<std::uint64_t>();
    if (!header.at("thresholds").is_null()) {
        auto t = header.at("thresholds").get<std::vector<float>>();
        if (t.size() != kNumLabels) {
            throw std::runtime_error("model thresholds must have 18 entries");
        }
        std::array<float, kNumLabels> arr;
        std::copy(t.begin(), t.end(), arr.begin());
        m.thresholds = arr;
    }

    const auto expected = parameter_spec(m.config);
    const auto& manifest = header.at("parameters");
    if (manifest.size() != expected.size()) {
        throw std::runtime_error("model has " + std::to_string(manifest.size()) +
                                 " parameters, architecture " +
                                 architecture_name(m.config.arch) + " expects " +
                                 std::to_string(expected.size()));
    }
    for (std::size_t p = 0; p < expected.size(); ++p) {
        const auto& entry = manifest[p];
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (name != expected[p].first || shape != expected[p].second) {
            throw std::runtime_error("parameter " + expected[p].first + ": expected shape " +
                                     shape_to_string(expected[p].second) + ", found " + name +
                                     " with shape " + shape_to_string(shape));
        }
        const std::size_t count = shape_product(shape);
        std::vector<float> data(count);
        for (std::size_t i = 0; i < count; ++i) {
            data[i] = std::bit_cast<float>(get_u32(is, "parameter data"));
        }
        m.parameters.emplace_back(name, Tensor::from_data(shape, std::move(data)));
    }
    return m;
}

}  // namespace advbench

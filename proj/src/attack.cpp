#include "advbench/attack.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "advbench/kernels.hpp"
#include "advbench/rng.hpp"

namespace advbench {

std::string attack_loss_name(AttackLoss kind) {
    switch (kind) {
        case AttackLoss::Mse: return "mse";
        case AttackLoss::Bce: return "bce";
        case AttackLoss::Ol: return "ol";
    }
    return "?";
}

AttackLoss attack_loss_from_name(const std::string& name) {
    if (name == "mse") return AttackLoss::Mse;
    if (name == "bce") return AttackLoss::Bce;
    if (name == "ol") return AttackLoss::Ol;
    throw std::invalid_argument("unknown attack loss: " + name + " (expected mse, bce or ol)");
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0.f)) throw std::invalid_argument("epsilon must be >= 0");
    if (steps < 1) throw std::invalid_argument("steps must be >= 1");
    if (epsilon > 0.f && steps > 1 && !(resolved_alpha() > 0.f)) {
        throw std::invalid_argument("alpha must be > 0 for multi-step attacks");
    }
}

double attack_loss(AttackLoss kind, std::span<const float> logits, std::span<const float> target,
                   const LabelMask& mask) {
    switch (kind) {
        case AttackLoss::Mse: return metric_mse(logits, target, mask);
        case AttackLoss::Bce: return metric_bce(logits, target, mask);
        case AttackLoss::Ol: return metric_ol(logits, target, mask);
    }
    throw std::invalid_argument("unknown attack loss");
}

namespace {

constexpr std::size_t kAttackChunk = 64;
constexpr std::size_t kNumPairs = kNumLabels * (kNumLabels - 1);  // ordered pairs

// [18 x 306] matrix with column p carrying +1 at row i and -1 at row j for the
// p-th ordered pair (i,j), i != j, i-major.
Tensor pair_difference_matrix() {
    Tensor d = Tensor::zeros({kNumLabels, kNumPairs});
    std::size_t p = 0;
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        for (std::size_t j = 0; j < kNumLabels; ++j) {
            if (i == j) continue;
            d.data[i * kNumPairs + p] = 1.f;
            d.data[j * kNumPairs + p] = -1.f;
            ++p;
        }
    }
    return d;
}

// Attack loss over a batch as a graph; per-sample mean weights live in the
// "lw" (labels) or "pw" (ordered pairs) leaf so gradients stay per-input.
Graph build_attack_graph(const ModelConfig& config, std::size_t batch, AttackLoss kind) {
    Graph g;
    NodeId z = build_logits_graph(g, config, batch, true, false);
    switch (kind) {
        case AttackLoss::Mse: {
            NodeId t = g.leaf("t", {batch, kNumLabels}, false);
            NodeId lw = g.leaf("lw", {batch, kNumLabels}, false);
            NodeId d = g.sub(g.sigmoid(z), t);
            g.sum_reduce(g.mul(lw, g.mul(d, d)));
            break;
        }
        case AttackLoss::Bce: {
            NodeId t = g.leaf("t", {batch, kNumLabels}, false);
            NodeId lw = g.leaf("lw", {batch, kNumLabels}, false);
            g.sum_reduce(g.mul(lw, g.sub(g.softplus(z), g.mul(z, t))));
            break;
        }
        case AttackLoss::Ol: {
            NodeId pw = g.leaf("pw", {batch, kNumPairs}, false);
            NodeId dmat = g.constant("pair_diff", pair_difference_matrix());
            NodeId margins = g.sub(g.constant("ones", Tensor::full({batch, kNumPairs}, 1.f)),
                                   g.matmul(z, dmat));
            g.sum_reduce(g.mul(pw, g.relu(margins)));
            break;
        }
    }
    return g;
}

struct AttackProblem {
    const Model* model;
    const Tensor* x;
    AttackConfig config;
    // per input: target vector and mask
    std::vector<std::array<float, kNumLabels>> targets;
    std::vector<LabelMask> masks;
    float step_alpha;  // signed: ascent > 0, descent < 0
};

void fill_label_weights(const AttackProblem& prob, std::size_t begin, std::size_t count,
                        Tensor& t, Tensor& lw) {
    for (std::size_t b = 0; b < count; ++b) {
        const auto& target = prob.targets[begin + b];
        const auto& mask = prob.masks[begin + b];
        std::size_t cnt = 0;
        for (bool m : mask) cnt += m ? 1 : 0;
        if (cnt == 0) {
            throw std::runtime_error("attack input " + std::to_string(begin + b) +
                                     " has every label masked");
        }
        for (std::size_t l = 0; l < kNumLabels; ++l) {
            t.data[b * kNumLabels + l] = target[l];
            lw.data[b * kNumLabels + l] = mask[l] ? 1.f / static_cast<float>(cnt) : 0.f;
        }
    }
}

void fill_pair_weights(const AttackProblem& prob, std::size_t begin, std::size_t count,
                       Tensor& pw) {
    for (std::size_t b = 0; b < count; ++b) {
        const auto& target = prob.targets[begin + b];
        const auto& mask = prob.masks[begin + b];
        float* row = pw.data.data() + b * kNumPairs;
        std::size_t active = 0;
        std::size_t p = 0;
        for (std::size_t i = 0; i < kNumLabels; ++i) {
            for (std::size_t j = 0; j < kNumLabels; ++j) {
                if (i == j) continue;
                const bool on = mask[i] && mask[j] && target[i] > target[j];
                row[p] = on ? 1.f : 0.f;
                active += on ? 1 : 0;
                ++p;
            }
        }
        if (active == 0) {
            throw std::runtime_error("attack input " + std::to_string(begin + b) +
                                     " has no ordered label pairs for the OL loss");
        }
        const float scale = 1.f / static_cast<float>(active);
        for (std::size_t q = 0; q < kNumPairs; ++q) row[q] *= scale;
    }
}

AdversarialBatch run_pgd(const AttackProblem& prob, const std::string& source_model_id) {
    const Tensor& x = *prob.x;
    const Model& model = *prob.model;
    const std::size_t n = x.shape[0];
    const std::size_t hw = x.shape[2] * x.shape[3];
    const float eps = prob.config.epsilon;
    const auto& kt = kernels::active();

    for (float v : x.data) {
        if (v < 0.f || v > 1.f) {
            throw std::invalid_argument("attack inputs must lie in [0,1]");
        }
    }

    AdversarialBatch out;
    out.originals = x;
    out.adversarials = x;
    out.config = prob.config;
    out.source_model_id = source_model_id;

    std::map<std::size_t, Graph> graphs;
    for (std::size_t begin = 0; begin < n; begin += kAttackChunk) {
        const std::size_t count = std::min(kAttackChunk, n - begin);
        auto git = graphs.find(count);
        if (git == graphs.end()) {
            git = graphs.emplace(count, build_attack_graph(model.config, count,
                                                           prob.config.loss_kind))
                      .first;
        }
        Graph& g = git->second;

        Tensor x0 = Tensor::zeros({count, 1, x.shape[2], x.shape[3]});
        std::copy_n(x.data.begin() + begin * hw, count * hw, x0.data.begin());
        Tensor xcur = x0;
        if (prob.config.random_start && eps > 0.f) {
            // per-input streams keyed by the global index: chunking and
            // parallel schedules cannot change the draw
            for (std::size_t b = 0; b < count; ++b) {
                Rng rng(Rng::derive(prob.config.seed, begin + b));
                float* px = xcur.data.data() + b * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    float v = px[i] + rng.uniform(-eps, eps);
                    px[i] = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
                }
            }
        }

        Tensor t = Tensor::zeros({count, kNumLabels});
        Tensor lw = Tensor::zeros({count, kNumLabels});
        Tensor pw = Tensor::zeros({count, kNumPairs});
        Graph::Bindings binds = {{"x", &xcur}};
        if (prob.config.loss_kind == AttackLoss::Ol) {
            fill_pair_weights(prob, begin, count, pw);
            binds["pw"] = &pw;
        } else {
            fill_label_weights(prob, begin, count, t, lw);
            binds["t"] = &t;
            binds["lw"] = &lw;
        }
        for (const auto& [name, tensor] : model.parameters) binds[name] = &tensor;

        const Tensor seed_one = Tensor::from_data({1}, {1.f});
        for (std::size_t step = 0; step < prob.config.steps; ++step) {
            std::unordered_map<std::string, Tensor> grads;
            try {
                g.forward(binds);
                grads = g.backward(seed_one);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("pgd failed at step " + std::to_string(step) + ": " +
                                         e.what());
            }
            const Tensor& gx = grads.at("x");
            kt.pgd_step(x0.data.data(), xcur.data.data(), gx.data.data(), prob.step_alpha, eps,
                        xcur.data.data(), count * hw);
        }
        std::copy_n(xcur.data.begin(), count * hw, out.adversarials.data.begin() + begin * hw);
    }

    out.linf_norms.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        float mx = 0.f;
        const float* a = out.adversarials.data.data() + i * hw;
        const float* o = out.originals.data.data() + i * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            float d = std::fabs(a[p] - o[p]);
            mx = std::max(mx, d);
            if (a[p] < 0.f || a[p] > 1.f) {
                throw std::logic_error("adversarial pixel escaped [0,1]");
            }
        }
        if (mx > eps + 1e-6f) throw std::logic_error("adversarial escaped the eps ball");
        out.linf_norms[i] = mx;
    }
    return out;
}

void check_inputs(const Model& model, const Tensor& x, std::size_t truth_count) {
    if (x.shape.size() != 4 || x.shape[1] != 1 || x.shape[2] != model.config.input_hw ||
        x.shape[3] != model.config.input_hw) {
        throw std::invalid_argument("attack inputs must be [N,1,hw,hw] matching the model");
    }
    if (x.shape[0] != truth_count) {
        throw std::invalid_argument("attack inputs and labels disagree on the sample count");
    }
}

}  // namespace

AdversarialBatch fgsm(const Model& model, const Tensor& x,
                      const std::vector<GroundTruthVector>& truth, float epsilon) {
    check_inputs(model, x, truth.size());
    if (!(epsilon >= 0.f)) throw std::invalid_argument("epsilon must be >= 0");
    AttackProblem prob;
    prob.model = &model;
    prob.x = &x;
    prob.config.epsilon = epsilon;
    prob.config.steps = 1;
    prob.config.alpha = epsilon;
    prob.config.loss_kind = AttackLoss::Bce;
    prob.step_alpha = epsilon;
    prob.targets.reserve(truth.size());
    prob.masks.reserve(truth.size());
    for (const auto& gt : truth) {
        prob.targets.push_back(gt.ranking_view());
        prob.masks.push_back(gt.present_mask());
    }
    return run_pgd(prob, "");
}

AdversarialBatch pgd_untargeted(const Model& model, const Tensor& x,
                                const std::vector<GroundTruthVector>& truth,
                                const AttackConfig& config) {
    check_inputs(model, x, truth.size());
    config.validate();
    if (config.targeted) {
        throw std::invalid_argument("pgd_untargeted requires config.targeted == false");
    }
    AttackProblem prob;
    prob.model = &model;
    prob.x = &x;
    prob.config = config;
    prob.step_alpha = config.resolved_alpha();
    for (const auto& gt : truth) {
        prob.targets.push_back(gt.ranking_view());
        prob.masks.push_back(gt.present_mask());
    }
    return run_pgd(prob, "");
}

AdversarialBatch pgd_targeted_risk(const Model& model, const Tensor& x,
                                   const CoOccurrenceTables& tables, const AttackConfig& config) {
    if (x.shape.size() != 4) throw std::invalid_argument("attack inputs must be rank 4");
    check_inputs(model, x, x.shape[0]);
    config.validate();
    if (!config.targeted) {
        throw std::invalid_argument("pgd_targeted_risk requires config.targeted == true");
    }
    // the improbable-label target is fixed at the clean prediction's argmax
    Tensor clean_probs = predict_probabilities(model, x);
    AttackProblem prob;
    prob.model = &model;
    prob.x = &x;
    prob.config = config;
    prob.step_alpha = -config.resolved_alpha();
    const std::size_t n = x.shape[0];
    prob.targets.resize(n);
    prob.masks.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float* row = clean_probs.data.data() + i * kNumLabels;
        std::size_t argmax = 0;
        for (std::size_t l = 1; l < kNumLabels; ++l) {
            if (row[l] > row[argmax]) argmax = l;
        }
        prob.targets[i] = tables.inverse_normalized[argmax];
        prob.masks[i] = all_labels_mask();
    }
    return run_pgd(prob, "");
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

std::filesystem::path manifest_path(const std::filesystem::path& adversarial_path) {
    std::filesystem::path p = adversarial_path;
    p.replace_extension(".manifest.csv");
    return p;
}

namespace {

std::string float_repr(float v) {
    char buf[48];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

void save_adversarial(const AdversarialBatch& batch, const std::filesystem::path& path) {
    save_images_xrds(batch.adversarials, path);
    std::ofstream os(manifest_path(path), std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + manifest_path(path).string());
    os << "key,value\n";
    os << "source_model," << batch.source_model_id << '\n';
    os << "eps," << float_repr(batch.config.epsilon) << '\n';
    os << "steps," << batch.config.steps << '\n';
    os << "alpha," << float_repr(batch.config.resolved_alpha()) << '\n';
    os << "loss," << attack_loss_name(batch.config.loss_kind) << '\n';
    os << "targeted," << (batch.config.targeted ? 1 : 0) << '\n';
    os << "random_start," << (batch.config.random_start ? 1 : 0) << '\n';
    os << "seed," << batch.config.seed << '\n';
    os << "index,linf\n";
    for (std::size_t i = 0; i < batch.linf_norms.size(); ++i) {
        os << i << ',' << float_repr(batch.linf_norms[i]) << '\n';
    }
    if (!os) throw std::runtime_error("write failed: " + manifest_path(path).string());
}

LoadedAdversarial load_adversarial(const std::filesystem::path& path) {
    LoadedAdversarial out;
    out.adversarials = load_images_xrds(path);
    std::ifstream is(manifest_path(path), std::ios::binary);
    if (!is) throw std::runtime_error("cannot open manifest: " + manifest_path(path).string());
    std::string line;
    if (!std::getline(is, line) || line != "key,value") {
        throw std::runtime_error("manifest must start with `key,value`");
    }
    bool in_norms = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw std::runtime_error("malformed manifest line: " + line);
        }
        const std::string key = line.substr(0, comma);
        const std::string value = line.substr(comma + 1);
        if (key == "index") {
            in_norms = true;
            continue;
        }
        if (in_norms) {
            out.linf_norms.push_back(std::strtof(value.c_str(), nullptr));
            continue;
        }
        if (key == "source_model") {
            out.source_model_id = value;
        } else if (key == "eps") {
            out.config.epsilon = std::strtof(value.c_str(), nullptr);
        } else if (key == "steps") {
            out.config.steps = std::strtoull(value.c_str(), nullptr, 10);
        } else if (key == "alpha") {
            out.config.alpha = std::strtof(value.c_str(), nullptr);
        } else if (key == "loss") {
            out.config.loss_kind = attack_loss_from_name(value);
        } else if (key == "targeted") {
            out.config.targeted = value == "1";
        } else if (key == "random_start") {
            out.config.random_start = value == "1";
        } else if (key == "seed") {
            out.config.seed = std::strtoull(value.c_str(), nullptr, 10);
        } else {
            throw std::runtime_error("unknown manifest key: " + key);
        }
    }
    if (out.linf_norms.size() != out.adversarials.shape[0]) {
        throw std::runtime_error("manifest norm count does not match the image count");
    }
    return out;
}

}  // namespace advbench

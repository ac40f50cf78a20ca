// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line with its runtime. Heavy fixtures (datasets, trained models) are built
// once and shared.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "advbench/attack.hpp"
#include "advbench/cli.hpp"
#include "advbench/dataset.hpp"
#include "advbench/harness.hpp"
#include "advbench/metrics.hpp"
#include "advbench/model.hpp"
#include "advbench/rng.hpp"
#include "advbench/tensor.hpp"

using namespace advbench;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
    int number;
    std::string name;
    Clock::time_point start = Clock::now();
    bool ok = true;
    std::string first_failure;

    Criterion(int n, std::string label) : number(n), name(std::move(label)) {}

    void expect(bool condition, const std::string& what) {
        if (!condition && ok) {
            ok = false;
            first_failure = what;
        }
        CHECK_MESSAGE(condition, what);
    }

    double seconds() const {
        return std::chrono::duration<double>(Clock::now() - start).count();
    }

    ~Criterion() {
        std::printf("[%s] criterion %d: %s (%.1f s)%s%s\n", ok ? "PASS" : "FAIL", number,
                    name.c_str(), seconds(), ok ? "" : " -- ",
                    ok ? "" : first_failure.c_str());
        std::fflush(stdout);
    }
};

fs::path work_dir() {
    fs::path p = fs::temp_directory_path() / "advbench_acceptance";
    fs::create_directories(p);
    return p;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), {});
}

Tensor random_images(Rng& rng, std::size_t n) {
    Tensor x = Tensor::zeros({n, 1, 32, 32});
    for (auto& v : x.data) v = rng.uniform(0.f, 1.f);
    return x;
}

std::vector<GroundTruthVector> random_truths(Rng& rng, std::size_t n) {
    std::vector<GroundTruthVector> out(n);
    for (auto& gt : out) {
        for (auto& s : gt.states) {
            double u = rng.next_double();
            s = u < 0.2   ? LabelState::Positive
                : u < 0.85 ? LabelState::Negative
                : u < 0.95 ? LabelState::Uncertain
                           : LabelState::Missing;
        }
        gt.states[0] = LabelState::Positive;
        gt.states[1] = LabelState::Negative;
    }
    return out;
}

double dsigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double dsoftplus(double x) {
    double m = x > 0 ? x : 0;
    return m + std::log1p(std::exp(-std::fabs(x)));
}

double sigmoid_tanh(double z) { return 0.5 * (1.0 + std::tanh(0.5 * z)); }

// -- shared desk-scale fixture: 3 datasets (5000/1000 each, distinct
//    co-occurrence structures) and 3 trained cnn-small models ---------------

struct DeskScale {
    std::vector<MultiLabelDataset> train_sets, test_sets;
    std::vector<Model> models;
    std::vector<CoOccurrenceTables> tables;
    double train_seconds = 0;

    DeskScale() {
        const Clock::time_point t0 = Clock::now();
        for (int i = 0; i < 3; ++i) {
            auto train_cfg = default_generate_config(5000, 9000 + i);
            auto test_cfg = default_generate_config(1000, 9500 + i);
            test_cfg.affinity = train_cfg.affinity;
            test_cfg.first_label_prior = train_cfg.first_label_prior;
            train_sets.push_back(generate_dataset(train_cfg));
            test_sets.push_back(generate_dataset(test_cfg));
            tables.push_back(build_co_occurrence(train_sets.back()));
        }
        for (int i = 0; i < 3; ++i) {
            ModelConfig mcfg{Architecture::CnnSmall, 32,
                             static_cast<std::uint64_t>(100 + i)};
            TrainConfig tc;
            tc.epochs = 70;
            tc.batch_size = 64;
            tc.learning_rate = 0.05f;
            tc.momentum = 0.9f;
            tc.seed = static_cast<std::uint64_t>(200 + i);
            Model m = train(init_model(mcfg), train_sets[i], tc);
            m.provenance.dataset_id = "synth-" + std::to_string(i);
            m.thresholds = calibrate_thresholds(m, test_sets[i]);
            models.push_back(std::move(m));
        }
        train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    }
};

const DeskScale& desk() {
    static DeskScale d;
    return d;
}

struct Sampled {
    Tensor images;
    std::vector<GroundTruthVector> truths;
};

Sampled sample_test_set(const MultiLabelDataset& ds, std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx.data(), idx.size());
    idx.resize(n);
    Sampled out;
    const std::size_t hw = ds.height() * ds.width();
    out.images = Tensor::zeros({n, 1, ds.height(), ds.width()});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(ds.images.data.begin() + idx[i] * hw, hw, out.images.data.begin() + i * hw);
        out.truths.push_back(ds.labels[idx[i]]);
    }
    return out;
}

}  // namespace

TEST_CASE("criterion 1: gradient correctness vs finite differences") {
    Criterion crit(1, "gradient correctness (autodiff vs central differences, h=1e-3)");
    Rng rng(101);
    std::size_t checked = 0;

    auto check_grads = [&](const Tensor& ad, const Tensor& fd) {
        for (std::size_t i = 0; i < ad.size(); ++i) {
            const double f = fd.data[i];
            if (std::fabs(f) <= 1e-4) continue;
            const double rel = std::fabs(ad.data[i] - f) / std::fabs(f);
            if (!(rel < 1e-3)) {
                crit.expect(false, "relative error " + std::to_string(rel));
                return;
            }
            ++checked;
        }
    };

    // weighted-sum scalarization per primitive, double-precision references
    for (int iter = 0; iter < 100; ++iter) {
        const std::size_t n = 1 + rng.next_below(20);
        std::vector<double> w(n);
        for (auto& v : w) v = rng.uniform(0.5f, 1.5f);
        Tensor wt = Tensor::zeros({n});
        for (std::size_t i = 0; i < n; ++i) wt.data[i] = static_cast<float>(w[i]);

        auto scalarized = [&](auto build, auto ref, Tensor input) {
            Graph g;
            NodeId x = g.leaf("x", {n}, true);
            g.sum_reduce(g.mul(build(g, x), g.constant("w", wt)));
            g.forward({{"x", &input}});
            auto grads = g.backward(Tensor::from_data({1}, {1.f}));
            Tensor fd = finite_difference_grad(
                [&](const Tensor& probe) {
                    double s = 0;
                    for (std::size_t i = 0; i < n; ++i) s += w[i] * ref(double(probe.data[i]));
                    return s;
                },
                input, 1e-3);
            check_grads(grads.at("x"), fd);
        };

        Tensor smooth = Tensor::zeros({n});
        for (auto& v : smooth.data) v = rng.uniform(-2.f, 2.f);
        scalarized([](Graph& g, NodeId x) { return g.sigmoid(x); }, dsigmoid, smooth);
        scalarized([](Graph& g, NodeId x) { return g.softplus(x); }, dsoftplus, smooth);
        scalarized([](Graph& g, NodeId x) { return g.scalar_mul(x, -1.3f); },
                   [](double v) { return -1.3f * v; }, smooth);

        Tensor away = smooth;
        for (auto& v : away.data) {
            while (std::fabs(v) < 0.05f || std::fabs(std::fabs(v) - 1.f) < 0.05f) {
                v = rng.uniform(-2.f, 2.f);
            }
        }
        scalarized([](Graph& g, NodeId x) { return g.relu(x); },
                   [](double v) { return v > 0 ? v : 0.0; }, away);
        scalarized([](Graph& g, NodeId x) { return g.clamp(x, -1.f, 1.f); },
                   [](double v) { return std::min(1.0, std::max(-1.0, v)); }, away);

        // add/sub/mul, matmul, bias_add, conv2d, pad, maxpool, reductions and
        // reshape ride through a small random MLP-with-conv graph against a
        // double reference
        const std::size_t c = 1 + rng.next_below(2), h = 4 + rng.next_below(2),
                          wd = 4 + rng.next_below(2);
        Tensor img = Tensor::zeros({1, c, h, wd});
        for (auto& v : img.data) v = rng.uniform(-1.f, 1.f);
        Tensor kern = Tensor::zeros({2, c, 3, 3});
        for (auto& v : kern.data) v = rng.uniform(-0.9f, 0.9f);
        Tensor bias = Tensor::zeros({(h - 2) * (wd - 2) * 2 >= 4 ? std::size_t(4) : std::size_t(4)});
        for (auto& v : bias.data) v = rng.uniform(-0.5f, 0.5f);

        Graph g;
        NodeId x = g.leaf("x", {1, c, h, wd}, true);
        NodeId conv = g.conv2d_valid(g.pad2d(x, 1), g.constant("k", kern));
        NodeId pool = g.maxpool2x2(conv);
        const auto& ps = g.shape_of(pool);
        const std::size_t flat = ps[1] * ps[2] * ps[3];
        Tensor dense = Tensor::zeros({flat, 4});
        for (auto& v : dense.data) v = rng.uniform(-0.8f, 0.8f);
        NodeId fc = g.bias_add(g.matmul(g.reshape(pool, {1, flat}), g.constant("d", dense)),
                               g.constant("b", bias));
        NodeId prod = g.mul(g.add(fc, fc), g.sub(fc, g.scalar_mul(fc, 0.25f)));
        g.mean_reduce(prod);

        auto ref = [&](const Tensor& probe) {
            const std::size_t hp = h + 2, wp = wd + 2;
            std::vector<double> padded(c * hp * wp, 0.0);
            for (std::size_t ci = 0; ci < c; ++ci) {
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t xx = 0; xx < wd; ++xx) {
                        padded[ci * hp * wp + (y + 1) * wp + (xx + 1)] =
                            probe.data[ci * h * wd + y * wd + xx];
                    }
                }
            }
            const std::size_t oh = hp - 2, ow = wp - 2;
            std::vector<double> convv(2 * oh * ow, 0.0);
            for (std::size_t o = 0; o < 2; ++o) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        double acc = 0;
                        for (std::size_t ci = 0; ci < c; ++ci) {
                            for (int ky = 0; ky < 3; ++ky) {
                                for (int kx = 0; kx < 3; ++kx) {
                                    acc += padded[ci * hp * wp + (oy + ky) * wp + (ox + kx)] *
                                           double(kern.data[((o * c + ci) * 3 + ky) * 3 + kx]);
                                }
                            }
                        }
                        convv[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            const std::size_t ph = oh / 2, pw = ow / 2;
            std::vector<double> pooled(2 * ph * pw, 0.0);
            for (std::size_t o = 0; o < 2; ++o) {
                for (std::size_t py = 0; py < ph; ++py) {
                    for (std::size_t px = 0; px < pw; ++px) {
                        double best = -1e300;
                        for (int q = 0; q < 4; ++q) {
                            best = std::max(best, convv[(o * oh + 2 * py + q / 2) * ow +
                                                        (2 * px + q % 2)]);
                        }
                        pooled[(o * ph + py) * pw + px] = best;
                    }
                }
            }
            double out = 0;
            std::vector<double> fcv(4, 0.0);
            for (std::size_t j = 0; j < 4; ++j) {
                double acc = double(bias.data[j]);
                for (std::size_t i = 0; i < pooled.size(); ++i) {
                    acc += pooled[i] * double(dense.data[i * 4 + j]);
                }
                fcv[j] = acc;
            }
            for (std::size_t j = 0; j < 4; ++j) {
                out += (fcv[j] + fcv[j]) * (fcv[j] - 0.25 * fcv[j]);
            }
            return out / 4.0;
        };

        // resample until the pooling windows are unambiguous
        bool ambiguous = true;
        while (ambiguous) {
            g.forward({{"x", &img}});
            const Tensor& cv = g.value_of(conv);
            ambiguous = false;
            const auto& cs = g.shape_of(conv);
            const std::size_t oh = cs[2], ow = cs[3];
            for (std::size_t o = 0; o < cs[1] && !ambiguous; ++o) {
                for (std::size_t py = 0; py < oh / 2 && !ambiguous; ++py) {
                    for (std::size_t px = 0; px < ow / 2 && !ambiguous; ++px) {
                        float vals[4];
                        for (int q = 0; q < 4; ++q) {
                            vals[q] = cv.data[(o * oh + 2 * py + q / 2) * ow + (2 * px + q % 2)];
                        }
                        float best = *std::max_element(vals, vals + 4);
                        int close = 0;
                        for (float v : vals) close += best - v < 0.02f ? 1 : 0;
                        ambiguous = close > 1;
                    }
                }
            }
            if (ambiguous) {
                for (auto& v : img.data) v = rng.uniform(-1.f, 1.f);
            }
        }
        auto grads = g.backward(Tensor::from_data({1}, {1.f}));
        Tensor fd = finite_difference_grad(ref, img, 1e-3);
        check_grads(grads.at("x"), fd);
    }

    crit.expect(checked > 5000, "too few informative coordinates checked");
    crit.expect(crit.seconds() < 60.0, "runtime exceeded 1 minute");
}

TEST_CASE("criterion 2: attack feasibility over 10,000 inputs") {
    Criterion crit(2, "attack feasibility: eps-ball and [0,1] containment, zero violations");
    Rng rng(202);
    Model m = init_model({Architecture::MlpSmall, 32, 7});
    CoOccurrenceTables tables{};
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        for (std::size_t j = 0; j < kNumLabels; ++j) {
            tables.inverse_normalized[i][j] =
                i == j ? 0.f : static_cast<float>((i + 2 * j) % 5) / 4.f;
        }
    }
    const float eps_grid[] = {0.5f / 255.f, 1.f / 255.f, 2.f / 255.f, 4.f / 255.f, 8.f / 255.f};
    std::size_t attacked = 0, violations = 0;

    auto audit = [&](const AdversarialBatch& batch, float eps) {
        const std::size_t n = batch.adversarials.shape[0];
        const std::size_t hw = 1024;
        for (std::size_t i = 0; i < n; ++i) {
            float mx = 0.f;
            bool bad = false;
            for (std::size_t p = 0; p < hw; ++p) {
                const float a = batch.adversarials.data[i * hw + p];
                const float o = batch.originals.data[i * hw + p];
                mx = std::max(mx, std::fabs(a - o));
                bad = bad || a < 0.f || a > 1.f;
            }
            if (bad || mx > eps + 1e-6f) ++violations;
            ++attacked;
        }
    };

    for (float eps : eps_grid) {
        {
            Tensor x = random_images(rng, 667);
            audit(fgsm(m, x, random_truths(rng, 667), eps), eps);
        }
        {
            Tensor x = random_images(rng, 667);
            AttackConfig cfg;
            cfg.epsilon = eps;
            cfg.steps = 3;
            cfg.loss_kind = AttackLoss::Mse;
            cfg.random_start = true;
            cfg.seed = 11;
            audit(pgd_untargeted(m, x, random_truths(rng, 667), cfg), eps);
        }
        {
            Tensor x = random_images(rng, 666);
            AttackConfig cfg;
            cfg.epsilon = eps;
            cfg.steps = 3;
            cfg.loss_kind = AttackLoss::Bce;
            cfg.targeted = true;
            cfg.seed = 12;
            audit(pgd_targeted_risk(m, x, tables, cfg), eps);
        }
    }
    crit.expect(attacked == 10000, "expected exactly 10000 attacked inputs, got " +
                                       std::to_string(attacked));
    crit.expect(violations == 0, std::to_string(violations) + " containment violations");
}

TEST_CASE("criterion 3: exact reduction identities") {
    Criterion crit(3, "reduction identities (eps=0, 1-step PGD == FGSM, k=18, k=1)");
    Rng rng(303);
    Model m = init_model({Architecture::CnnSmall, 32, 8});
    Tensor x = random_images(rng, 8);
    auto truths = random_truths(rng, 8);

    // eps = 0 attacks are the identity, bit for bit
    {
        auto a = fgsm(m, x, truths, 0.f);
        crit.expect(a.adversarials.data == x.data, "fgsm(eps=0) is not the identity");
        AttackConfig cfg;
        cfg.epsilon = 0.f;
        cfg.steps = 4;
        for (AttackLoss kind : {AttackLoss::Mse, AttackLoss::Bce, AttackLoss::Ol}) {
            cfg.loss_kind = kind;
            auto b = pgd_untargeted(m, x, truths, cfg);
            crit.expect(b.adversarials.data == x.data, "pgd(eps=0) is not the identity");
        }
        CoOccurrenceTables tables{};
        for (std::size_t i = 0; i < kNumLabels; ++i) {
            for (std::size_t j = 0; j < kNumLabels; ++j) {
                tables.inverse_normalized[i][j] = i == j ? 0.f : 1.f;
            }
        }
        AttackConfig tc;
        tc.epsilon = 0.f;
        tc.steps = 4;
        tc.targeted = true;
        auto c = pgd_targeted_risk(m, x, tables, tc);
        crit.expect(c.adversarials.data == x.data, "targeted pgd(eps=0) is not the identity");
    }

    // PGD(steps=1, alpha=eps, BCE, no restart) == FGSM exactly
    {
        const float eps = 3.f / 255.f;
        auto a = fgsm(m, x, truths, eps);
        AttackConfig cfg;
        cfg.epsilon = eps;
        cfg.steps = 1;
        cfg.alpha = eps;
        cfg.loss_kind = AttackLoss::Bce;
        auto b = pgd_untargeted(m, x, truths, cfg);
        crit.expect(std::memcmp(a.adversarials.data.data(), b.adversarials.data.data(),
                                x.size() * sizeof(float)) == 0,
                    "1-step PGD differs from FGSM");
    }

    // k-accuracy identities
    {
        bool ok18 = true, ok1 = true;
        for (int iter = 0; iter < 500; ++iter) {
            std::array<float, kNumLabels> a, b;
            for (auto& v : a) v = rng.uniform(-3.f, 3.f);
            for (auto& v : b) v = rng.uniform(-3.f, 3.f);
            std::span<const float> sa(a.data(), a.size()), sb(b.data(), b.size());
            ok18 = ok18 && k_accuracy_input(sa, sb, 18) == 1.0;
            std::size_t pa = 0, pb = 0;
            for (std::size_t i = 1; i < kNumLabels; ++i) {
                if (a[i] > a[pa]) pa = i;
                if (b[i] > b[pb]) pb = i;
            }
            ok1 = ok1 && k_accuracy_input(sa, sb, 1) == (pa == pb ? 1.0 : 0.0);
        }
        crit.expect(ok18, "k=18 accuracy is not identically 1");
        crit.expect(ok1, "k=1 accuracy differs from top-1 accuracy");
    }
}

TEST_CASE("criterion 4: metric oracles at 1e-9 and the Pearson fixture") {
    Criterion crit(4, "metric oracles (1000 random cases each; Pearson vs t-CDF)");
    Rng rng(404);

    bool kacc_ok = true, mlacc_ok = true, losses_ok = true, risk_ok = true;
    for (int iter = 0; iter < 1000; ++iter) {
        std::array<float, kNumLabels> pred, truth, thr, crow;
        for (auto& v : pred) v = rng.uniform(-4.f, 4.f);
        for (auto& v : truth) v = rng.uniform(0.f, 1.f);
        for (auto& v : thr) v = rng.uniform(0.05f, 0.95f);
        for (auto& v : crow) v = rng.uniform(0.f, 1.f);
        if (iter % 4 == 0) pred[rng.next_below(18)] = pred[rng.next_below(18)];
        std::span<const float> sp(pred.data(), 18), st(truth.data(), 18),
            sthr(thr.data(), 18), sc(crow.data(), 18);

        // k-accuracy against a set-based oracle
        std::size_t k = 1 + rng.next_below(18);
        {
            auto order_of = [&](const std::array<float, kNumLabels>& v) {
                std::vector<std::pair<float, std::size_t>> o;
                for (std::size_t i = 0; i < kNumLabels; ++i) o.push_back({-v[i], i});
                std::sort(o.begin(), o.end());
                std::set<std::size_t> s;
                for (std::size_t i = 0; i < k; ++i) s.insert(o[i].second);
                return s;
            };
            auto a = order_of(pred), b = order_of(truth);
            std::size_t inter = 0;
            for (auto idx : a) inter += b.count(idx);
            double expect = double(inter) / double(k);
            kacc_ok = kacc_ok && std::fabs(k_accuracy_input(sp, st, k) - expect) <= 1e-9;
        }

        // mlacc against a counting loop
        {
            LabelMask mask;
            std::size_t cnt = 0;
            for (auto& b : mask) {
                b = rng.next_double() < 0.8;
                cnt += b;
            }
            if (!cnt) {
                mask[0] = true;
                cnt = 1;
            }
            std::array<float, kNumLabels> probs;
            for (auto& v : probs) v = rng.uniform(0.f, 1.f);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < kNumLabels; ++i) {
                if (!mask[i]) continue;
                hits += ((probs[i] >= thr[i]) == (truth[i] >= 0.5f)) ? 1 : 0;
            }
            mlacc_ok = mlacc_ok &&
                       std::fabs(mlacc(std::span<const float>(probs.data(), 18), st, sthr,
                                       mask) -
                                 double(hits) / double(cnt)) <= 1e-9;
        }

        // mse / bce / ol against tanh-route scalars
        {
            double mse_ref = 0, bce_ref = 0, ol_ref = 0;
            std::size_t pairs = 0;
            for (std::size_t i = 0; i < kNumLabels; ++i) {
                double p = sigmoid_tanh(pred[i]);
                double d = p - truth[i];
                mse_ref += d * d;
                bce_ref += -(truth[i] * std::log(p) + (1.0 - truth[i]) * std::log1p(-p));
                for (std::size_t j = 0; j < kNumLabels; ++j) {
                    if (truth[i] > truth[j]) {
                        ol_ref += std::max(0.0, 1.0 - (double(pred[i]) - double(pred[j])));
                        ++pairs;
                    }
                }
            }
            mse_ref /= 18;
            bce_ref /= 18;
            losses_ok = losses_ok &&
                        std::fabs(metric_mse(sp, st, all_labels_mask()) - mse_ref) <= 1e-9 &&
                        std::fabs(metric_bce(sp, st, all_labels_mask()) - bce_ref) <= 1e-9;
            if (pairs) {
                losses_ok = losses_ok && std::fabs(metric_ol(sp, st, all_labels_mask()) -
                                                   ol_ref / pairs) <= 1e-9;
            }
        }

        // risk against a reversed-order dot
        {
            std::array<float, kNumLabels> probs;
            for (auto& v : probs) v = rng.uniform(0.f, 1.f);
            double acc = 0;
            for (std::size_t i = kNumLabels; i-- > 0;) acc += double(probs[i]) * double(crow[i]);
            risk_ok = risk_ok && std::fabs(risk(std::span<const float>(probs.data(), 18), sc) -
                                           acc / 17.0) <= 1e-9;
        }
    }
    crit.expect(kacc_ok, "k-accuracy oracle mismatch");
    crit.expect(mlacc_ok, "mlacc oracle mismatch");
    crit.expect(losses_ok, "mse/bce/ol oracle mismatch");
    crit.expect(risk_ok, "risk oracle mismatch");

    // macro-AUC against O(N^2) pair counting
    {
        bool auc_ok = true;
        for (int iter = 0; iter < 1000; ++iter) {
            const std::size_t n = 30 + rng.next_below(30);
            auto truths = random_truths(rng, n);
            Tensor probs = Tensor::zeros({n, kNumLabels});
            for (auto& v : probs.data) v = rng.uniform(0.f, 1.f);
            if (iter % 3 == 0) {
                for (int t = 0; t < 40; ++t) {
                    probs.data[rng.next_below(probs.size())] =
                        probs.data[rng.next_below(probs.size())];
                }
            }
            double total = 0;
            std::size_t used = 0;
            for (std::size_t label = 0; label < kNumLabels; ++label) {
                std::vector<float> pos, neg;
                for (std::size_t i = 0; i < n; ++i) {
                    if (truths[i].states[label] == LabelState::Positive) {
                        pos.push_back(probs.data[i * kNumLabels + label]);
                    } else if (truths[i].states[label] == LabelState::Negative) {
                        neg.push_back(probs.data[i * kNumLabels + label]);
                    }
                }
                if (pos.empty() || neg.empty()) continue;
                double wins = 0;
                for (float p : pos) {
                    for (float q : neg) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
                }
                total += wins / (double(pos.size()) * double(neg.size()));
                ++used;
            }
            if (!used) continue;
            auc_ok = auc_ok &&
                     std::fabs(macro_auc(probs, truths).value - total / used) <= 1e-9;
        }
        crit.expect(auc_ok, "macro-AUC oracle mismatch");
    }

    // Pearson p-values against a Simpson-integrated t CDF
    {
        auto t_two_sided = [](double t, double df) {
            const double lc = std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df) -
                              0.5 * std::log(df * M_PI);
            auto pdf = [&](double v) {
                return std::exp(lc - 0.5 * (df + 1.0) * std::log1p(v * v / df));
            };
            const int steps = 40000;
            const double b = std::fabs(t), h = b / steps;
            double acc = pdf(0.0) + pdf(b);
            for (int i = 1; i < steps; ++i) acc += pdf(i * h) * (i % 2 ? 4.0 : 2.0);
            return 2.0 * (0.5 - acc * h / 3.0);
        };
        bool p_ok = true;
        for (int iter = 0; iter < 200; ++iter) {
            const std::size_t n = 5 + rng.next_below(30);
            std::vector<double> a(n), b(n);
            for (std::size_t i = 0; i < n; ++i) {
                a[i] = rng.next_double();
                b[i] = 0.4 * a[i] + rng.next_double();
            }
            auto res = pearson_with_pvalue(std::span<const double>(a),
                                           std::span<const double>(b));
            if (std::fabs(res.r) >= 1.0) continue;
            const double t = res.r * std::sqrt((double(n) - 2.0) / (1.0 - res.r * res.r));
            p_ok = p_ok && std::fabs(res.p - t_two_sided(t, double(n) - 2.0)) < 1e-6;
        }
        crit.expect(p_ok, "Pearson p-value differs from the t-CDF oracle");

        // fixture: n=10, r=0.8 -> p ~= 0.00547
        std::vector<double> a(10), e(10);
        for (std::size_t i = 0; i < 10; ++i) a[i] = double(i + 1);
        for (std::size_t i = 0; i < 10; ++i) e[i] = i % 2 ? -1.0 : 1.0;
        auto center = [](std::vector<double>& v) {
            double m = 0;
            for (double x : v) m += x;
            m /= v.size();
            for (double& x : v) x -= m;
        };
        center(a);
        center(e);
        double ae = 0, aa = 0, ee = 0;
        for (std::size_t i = 0; i < 10; ++i) {
            ae += a[i] * e[i];
            aa += a[i] * a[i];
        }
        for (std::size_t i = 0; i < 10; ++i) e[i] -= ae / aa * a[i];
        for (std::size_t i = 0; i < 10; ++i) ee += e[i] * e[i];
        std::vector<double> b(10);
        for (std::size_t i = 0; i < 10; ++i) {
            b[i] = 0.8 * a[i] / std::sqrt(aa) + 0.6 * e[i] / std::sqrt(ee);
        }
        auto res = pearson_with_pvalue(std::span<const double>(a), std::span<const double>(b));
        crit.expect(std::fabs(res.r - 0.8) < 1e-12, "fixture r is not 0.8");
        // frozen from the t-CDF oracle: p(t=3.77124, df=8) = 0.005456; quoting
        // t rounded to 3.77 gives the commonly tabulated 0.00547
        crit.expect(std::fabs(res.p - 0.005456) < 1e-6, "fixture p is not 0.005456");
        crit.expect(std::fabs(res.p - 0.00547) < 2e-5, "fixture p strayed from ~0.0055");
    }
}

TEST_CASE("criterion 5: model quality bar (macro-AUC > 0.79 on held-out data)") {
    Criterion crit(5, "three cnn-small models reach held-out macro-AUC > 0.79");
    const auto& d = desk();
    for (int i = 0; i < 3; ++i) {
        Tensor probs = predict_probabilities(d.models[i], d.test_sets[i].images);
        const double auc = macro_auc(probs, d.test_sets[i].labels).value;
        std::printf("  model %d held-out macro-AUC: %.4f\n", i, auc);
        crit.expect(auc > 0.79, "model " + std::to_string(i) + " AUC " + std::to_string(auc));
    }
    std::printf("  dataset generation + training time: %.1f s\n", d.train_seconds);
    crit.expect(d.train_seconds < 600.0, "training exceeded 10 minutes");
}

TEST_CASE("criterion 6: desk-scale directional replication at eps=1/255, 25 steps") {
    Criterion crit(6, "whitebox drop >= 20pp; targeted <= untargeted (median); 5x5 sweep");
    const auto& d = desk();
    const float eps = 1.f / 255.f;

    std::vector<double> untargeted_ol_k1, targeted_ol_k1;
    for (int i = 0; i < 3; ++i) {
        Sampled s = sample_test_set(d.test_sets[i], 512, 600 + i);
        const double clean_k1 = 100.0 * k_accuracy_mean(
                                            predict_probabilities(d.models[i], s.images),
                                            s.truths, 1);
        auto robust_under = [&](AttackLoss kind, bool targeted) {
            AttackConfig cfg;
            cfg.epsilon = eps;
            cfg.steps = 25;
            cfg.loss_kind = kind;
            cfg.targeted = targeted;
            cfg.seed = 700 + i;
            Tensor adv = targeted
                             ? pgd_targeted_risk(d.models[i], s.images, d.tables[i], cfg)
                                   .adversarials
                             : pgd_untargeted(d.models[i], s.images, s.truths, cfg).adversarials;
            return 100.0 * k_accuracy_mean(predict_probabilities(d.models[i], adv), s.truths, 1);
        };

        // (a) whitebox damage under the strongest untargeted loss
        const double robust_k1 = robust_under(AttackLoss::Bce, false);
        // (b) threat-model comparison at a matched loss: the ordinal loss is
        //     the ordering-aware choice, leaving the target vector as the
        //     only difference between the two attacks
        const double u_ol = robust_under(AttackLoss::Ol, false);
        const double t_ol = robust_under(AttackLoss::Ol, true);
        untargeted_ol_k1.push_back(u_ol);
        targeted_ol_k1.push_back(t_ol);

        std::printf("  model %d: clean k=1 %.2f%%, untargeted bce %.2f%% / ol %.2f%%, "
                    "risk-targeted ol %.2f%%\n",
                    i, clean_k1, robust_k1, u_ol, t_ol);
        crit.expect(robust_k1 < clean_k1 - 20.0,
                    "model " + std::to_string(i) + " dropped less than 20pp");
    }
    auto median3 = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[1];
    };
    crit.expect(median3(targeted_ol_k1) <= median3(untargeted_ol_k1),
                "risk-targeted attacks are not at least as strong as untargeted (median)");

    // (c) the 5x5 sweep completes with all 25 cells
    {
        fs::path dir = work_dir() / "sweep6";
        fs::create_directories(dir);
        save_dataset(d.test_sets[0], dir / "t0.xrds");
        save_model(d.models[0], dir / "m0.xrmw");
        ExperimentPlan plan;
        plan.models = {{"m0", (dir / "m0.xrmw").string()}};
        plan.datasets = {{"t0", (dir / "t0.xrds").string()}};
        AttackConfig cfg;
        cfg.loss_kind = AttackLoss::Bce;
        plan.attacks = {cfg};
        plan.k_values = {1};
        plan.sample_count = 512;
        plan.master_seed = 606;
        plan.jobs = 2;
        auto report = budget_sweep(plan);
        crit.expect(report.rows.size() == 25, "sweep produced " +
                                                  std::to_string(report.rows.size()) +
                                                  " cells, expected 25");
        std::set<std::pair<float, std::size_t>> cells;
        for (const auto& r : report.rows) {
            crit.expect(!r.failed, "sweep cell failed");
            cells.insert({r.eps, r.steps});
        }
        crit.expect(cells.size() == 25, "sweep cells are not the full 5x5 product");
        emit_report_csv(report, dir / "report.csv");
    }
    crit.expect(crit.seconds() < 900.0, "runtime exceeded 15 minutes");
}

TEST_CASE("criterion 7: end-to-end reproducibility with one master seed") {
    Criterion crit(7, "two pipeline runs produce byte-identical artifacts");
    auto run_pipeline = [&](const fs::path& dir) {
        fs::create_directories(dir);
        std::ostringstream err;
        auto cli = [&](std::vector<std::string> args) {
            int rc = cli_run(args, err);
            if (rc != 0) {
                throw std::runtime_error("pipeline command failed: " + err.str());
            }
        };
        const std::string data = (dir / "d.xrds").string();
        const std::string model = (dir / "m.xrmw").string();
        const std::string adv = (dir / "a.xrds").string();
        cli({"gen-data", "--out", data, "--seed", "42", "--samples", "600", "--cooc-out",
             (dir / "c.csv").string()});
        cli({"train", "--data", data, "--arch", "mlp-small", "--epochs", "2", "--seed", "42",
             "--val-data", data, "--out", model});
        cli({"attack", "--model", model, "--data", data, "--eps", "1/255", "--steps", "5",
             "--seed", "42", "--count", "64", "--out", adv});
        const std::string plan = (dir / "plan.json").string();
        {
            std::ofstream os(plan);
            os << R"({"models":[{"id":"m","path":")" << model
               << R"("}],"datasets":[{"id":"d","path":")" << data
               << R"("}],"attack":{"eps":"1/255","steps":5,"loss":"bce"},"k":[1,3],)"
               << R"("sample_count":64,"master_seed":42})";
        }
        cli({"matrix", "--plan", plan, "--out", (dir / "report").string()});
    };
    fs::path d1 = work_dir() / "repro1";
    fs::path d2 = work_dir() / "repro2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    run_pipeline(d1);
    run_pipeline(d2);
    for (const char* rel :
         {"d.xrds", "d.labels.csv", "c.csv", "m.xrmw", "a.xrds", "a.manifest.csv",
          "report/report.csv", "report/report.md"}) {
        const bool same = file_bytes(d1 / rel) == file_bytes(d2 / rel);
        crit.expect(same, std::string(rel) + " differs between runs");
    }
}

TEST_CASE("criterion 8: correlation harness on the desk-scale grid") {
    Criterion crit(8, "MSE-BCE series correlate positively; self-correlation is exactly 1");
    const auto& d = desk();
    fs::path dir = work_dir() / "grid8";
    fs::create_directories(dir);
    ExperimentPlan plan;
    for (int i = 0; i < 3; ++i) {
        const std::string mp = (dir / ("m" + std::to_string(i) + ".xrmw")).string();
        const std::string dp = (dir / ("t" + std::to_string(i) + ".xrds")).string();
        save_model(d.models[i], mp);
        plan.models.push_back({"m" + std::to_string(i), mp});
        if (i == 0) {
            save_dataset(d.test_sets[0], dp);
            plan.datasets.push_back({"t0", dp});
        }
    }
    AttackConfig cfg;
    cfg.epsilon = 1.f / 255.f;
    cfg.steps = 10;
    plan.attacks = {cfg};
    plan.k_values = {1, 3};
    plan.sample_count = 256;
    plan.series_batch = 64;
    plan.master_seed = 808;
    plan.jobs = 2;

    auto report = loss_metric_grid(plan);
    auto table = metric_correlation(report);
    emit_correlation_csv(table, dir / "correlation.csv");

    bool saw_pair = false, saw_self = false;
    for (const auto& e : table) {
        if (e.metric_a == e.metric_b) {
            saw_self = true;
            crit.expect(e.r == 1.0, "self-correlation of " + e.metric_a + " is not exactly 1");
        }
        if ((e.metric_a == "bce" && e.metric_b == "mse") ||
            (e.metric_a == "mse" && e.metric_b == "bce")) {
            saw_pair = true;
            std::printf("  mse-bce per-batch correlation: r=%.4f p=%.2e\n", e.r, e.p);
            crit.expect(e.r > 0.0, "MSE and BCE series do not correlate positively");
        }
    }
    crit.expect(saw_pair, "mse-bce pair missing from the correlation table");
    crit.expect(saw_self, "self pairs missing from the correlation table");
}

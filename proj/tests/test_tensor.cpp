#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "advbench/rng.hpp"
#include "advbench/tensor.hpp"

using namespace advbench;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, float lo = -2.f, float hi = 2.f) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// ad vs fd comparison per the gradient-correctness contract: coordinates with
// |fd| > 1e-4 must agree within relative error 1e-3.
void check_close_grads(const Tensor& ad, const Tensor& fd) {
    REQUIRE(ad.shape == fd.shape);
    for (std::size_t i = 0; i < ad.size(); ++i) {
        const double f = fd.data[i];
        if (std::fabs(f) <= 1e-4) continue;
        const double rel = std::fabs(ad.data[i] - f) / std::fabs(f);
        CHECK(rel < 1e-3);
    }
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

}  // namespace

TEST_CASE("forward: primitive examples") {
    SUBCASE("relu") {
        Graph g;
        auto x = g.leaf("x", {3}, false);
        g.relu(x);
        Tensor in = Tensor::from_data({3}, {-1.f, 0.f, 2.f});
        const Tensor& out = g.forward({{"x", &in}});
        CHECK(out.data == std::vector<float>{0.f, 0.f, 2.f});
    }
    SUBCASE("sigmoid at zero") {
        Graph g;
        auto x = g.leaf("x", {1}, false);
        g.sigmoid(x);
        Tensor in = Tensor::from_data({1}, {0.f});
        CHECK(g.forward({{"x", &in}}).data[0] == doctest::Approx(0.5f));
    }
    SUBCASE("matmul identity") {
        Graph g;
        auto a = g.leaf("a", {2, 2}, false);
        auto i = g.constant("eye", Tensor::from_data({2, 2}, {1.f, 0.f, 0.f, 1.f}));
        g.matmul(a, i);
        Tensor in = Tensor::from_data({2, 2}, {1.f, 2.f, 3.f, 4.f});
        CHECK(g.forward({{"a", &in}}).data == std::vector<float>{1.f, 2.f, 3.f, 4.f});
    }
}

TEST_CASE("forward is deterministic: identical bindings give bit-identical output") {
    Rng rng(7);
    Graph g;
    auto x = g.leaf("x", {4, 9}, true);
    auto w = g.leaf("w", {9, 5}, false);
    auto h = g.relu(g.matmul(x, w));
    g.sum_reduce(g.sigmoid(h));
    Tensor xin = random_tensor(rng, {4, 9});
    Tensor win = random_tensor(rng, {9, 5});
    Tensor out1 = g.forward({{"x", &xin}, {"w", &win}});
    Tensor out2 = g.forward({{"x", &xin}, {"w", &win}});
    CHECK(std::memcmp(out1.data.data(), out2.data.data(), out1.size() * sizeof(float)) == 0);

    Graph g2;
    auto x2 = g2.leaf("x", {4, 9}, true);
    auto w2 = g2.leaf("w", {9, 5}, false);
    auto h2 = g2.relu(g2.matmul(x2, w2));
    g2.sum_reduce(g2.sigmoid(h2));
    Tensor out3 = g2.forward({{"x", &xin}, {"w", &win}});
    CHECK(std::memcmp(out1.data.data(), out3.data.data(), out1.size() * sizeof(float)) == 0);
}

TEST_CASE("backward: analytic examples") {
    SUBCASE("f(x)=x^2 at x=3 has gradient 6") {
        Graph g;
        auto x = g.leaf("x", {1}, true);
        g.sum_reduce(g.mul(x, x));
        Tensor in = Tensor::from_data({1}, {3.f});
        g.forward({{"x", &in}});
        auto grads = g.backward(Tensor::from_data({1}, {1.f}));
        CHECK(grads.at("x").data[0] == doctest::Approx(6.f));
    }
    SUBCASE("sigmoid'(0) = 0.25") {
        Graph g;
        auto x = g.leaf("x", {1}, true);
        g.sigmoid(x);
        Tensor in = Tensor::from_data({1}, {0.f});
        g.forward({{"x", &in}});
        auto grads = g.backward(Tensor::from_data({1}, {1.f}));
        CHECK(grads.at("x").data[0] == doctest::Approx(0.25f));
    }
}

TEST_CASE("backward errors") {
    Graph g;
    auto x = g.leaf("x", {2}, true);
    g.sum_reduce(g.relu(x));
    SUBCASE("backward before forward") {
        CHECK_THROWS_WITH_AS(g.backward(Tensor::from_data({1}, {1.f})),
                             doctest::Contains("before forward"), std::runtime_error);
    }
    SUBCASE("seed shape mismatch") {
        Tensor in = Tensor::from_data({2}, {1.f, 2.f});
        g.forward({{"x", &in}});
        CHECK_THROWS_WITH_AS(g.backward(Tensor::from_data({2}, {1.f, 1.f})),
                             doctest::Contains("seed shape"), std::runtime_error);
    }
}

TEST_CASE("forward errors") {
    SUBCASE("shape mismatch names the node") {
        Graph g;
        auto a = g.leaf("a", {2, 3}, false);
        auto b = g.leaf("b", {3, 2}, false);
        CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("add"), std::runtime_error);
    }
    SUBCASE("non-finite input") {
        Graph g;
        auto x = g.leaf("x", {2}, false);
        g.relu(x);
        Tensor in;
        in.shape = {2};
        in.data = {1.f, std::numeric_limits<float>::quiet_NaN()};
        CHECK_THROWS_WITH_AS(g.forward({{"x", &in}}), doctest::Contains("non-finite"),
                             std::runtime_error);
    }
    SUBCASE("missing binding") {
        Graph g;
        auto x = g.leaf("x", {2}, false);
        g.relu(x);
        CHECK_THROWS_AS(g.forward({}), std::runtime_error);
    }
}

TEST_CASE("clamp uses pass-through subgradient inside, exact zero outside") {
    Graph g;
    auto x = g.leaf("x", {4}, true);
    g.sum_reduce(g.clamp(x, 0.f, 1.f));
    Tensor in = Tensor::from_data({4}, {-0.5f, 0.25f, 0.75f, 1.5f});
    g.forward({{"x", &in}});
    auto grads = g.backward(Tensor::from_data({1}, {1.f}));
    const auto& gx = grads.at("x").data;
    CHECK(gx[0] == 0.f);
    CHECK(gx[1] == 1.f);
    CHECK(gx[2] == 1.f);
    CHECK(gx[3] == 0.f);
}

TEST_CASE("finite_difference_grad examples") {
    SUBCASE("linear function has all-ones gradient") {
        auto f = [](const Tensor& t) {
            double s = 0;
            for (float v : t.data) s += v;
            return s;
        };
        Rng rng(3);
        Tensor x = random_tensor(rng, {7});
        Tensor fd = finite_difference_grad(f, x, 1e-3);
        for (float v : fd.data) CHECK(v == doctest::Approx(1.f).epsilon(1e-6));
    }
    SUBCASE("x^2 at 3") {
        auto f = [](const Tensor& t) { return double(t.data[0]) * double(t.data[0]); };
        Tensor x = Tensor::from_data({1}, {3.f});
        Tensor fd = finite_difference_grad(f, x, 1e-3);
        CHECK(std::fabs(fd.data[0] - 6.0) < 1e-5);
    }
    SUBCASE("rejects bad step and non-finite values") {
        auto f = [](const Tensor&) { return 0.0; };
        Tensor x = Tensor::from_data({1}, {0.f});
        CHECK_THROWS_AS(finite_difference_grad(f, x, 0.0), std::invalid_argument);
        auto bad = [](const Tensor&) { return std::numeric_limits<double>::infinity(); };
        CHECK_THROWS_AS(finite_difference_grad(bad, x, 1e-3), std::runtime_error);
    }
}

// Weighted scalarization: L = sum(w ⊙ prim(x)), with the reference computed
// end to end in double so finite differences stay well below the tolerance.
namespace {

struct PrimCheck {
    Graph g;
    std::vector<std::pair<std::string, Tensor>> inputs;
    std::function<double(const std::vector<Tensor>&)> ref;  // double forward
};

void run_prim_check(PrimCheck& pc) {
    Graph::Bindings binds;
    for (auto& [name, t] : pc.inputs) binds[name] = &t;
    pc.g.forward(binds);
    auto grads = pc.g.backward(Tensor::from_data({1}, {1.f}));
    for (std::size_t which = 0; which < pc.inputs.size(); ++which) {
        auto& [name, tensor] = pc.inputs[which];
        if (!grads.count(name)) continue;
        auto f = [&, which](const Tensor& probe) {
            std::vector<Tensor> args;
            for (std::size_t j = 0; j < pc.inputs.size(); ++j) {
                args.push_back(j == which ? probe : pc.inputs[j].second);
            }
            return pc.ref(args);
        };
        Tensor fd = finite_difference_grad(f, tensor, 1e-3);
        check_close_grads(grads.at(name), fd);
    }
}

std::vector<double> weights_for(Rng& rng, std::size_t n) {
    std::vector<double> w(n);
    for (auto& v : w) v = rng.uniform(0.5f, 1.5f);
    return w;
}

Tensor weights_tensor(const std::vector<double>& w, std::vector<std::size_t> shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < w.size(); ++i) t.data[i] = static_cast<float>(w[i]);
    return t;
}

}  // namespace

TEST_CASE("gradcheck: elementwise and reduction primitives over random shapes") {
    Rng rng(2024);
    for (int iter = 0; iter < 100; ++iter) {
        std::size_t n = 1 + rng.next_below(24);
        std::vector<std::size_t> shape = {n};
        auto w = weights_for(rng, n);

        // binary elementwise: add, sub, mul
        for (int kind = 0; kind < 3; ++kind) {
            PrimCheck pc;
            auto a = pc.g.leaf("a", shape, true);
            auto b = pc.g.leaf("b", shape, true);
            NodeId prim = kind == 0   ? pc.g.add(a, b)
                          : kind == 1 ? pc.g.sub(a, b)
                                      : pc.g.mul(a, b);
            auto wc = pc.g.constant("w", weights_tensor(w, shape));
            pc.g.sum_reduce(pc.g.mul(prim, wc));
            pc.inputs.emplace_back("a", random_tensor(rng, shape));
            pc.inputs.emplace_back("b", random_tensor(rng, shape));
            pc.ref = [&, kind](const std::vector<Tensor>& args) {
                double s = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    double av = args[0].data[i], bv = args[1].data[i];
                    double v = kind == 0 ? av + bv : kind == 1 ? av - bv : av * bv;
                    s += w[i] * v;
                }
                return s;
            };
            run_prim_check(pc);
        }

        // unary: scalar_mul, sigmoid, softplus, sum, mean
        float factor = rng.uniform(-1.5f, 1.5f);
        for (int kind = 0; kind < 5; ++kind) {
            PrimCheck pc;
            auto x = pc.g.leaf("x", shape, true);
            if (kind == 3) {
                pc.g.sum_reduce(x);
            } else if (kind == 4) {
                pc.g.mean_reduce(x);
            } else {
                NodeId prim = kind == 0   ? pc.g.scalar_mul(x, factor)
                              : kind == 1 ? pc.g.sigmoid(x)
                                          : pc.g.softplus(x);
                auto wc = pc.g.constant("w", weights_tensor(w, shape));
                pc.g.sum_reduce(pc.g.mul(prim, wc));
            }
            pc.inputs.emplace_back("x", random_tensor(rng, shape));
            pc.ref = [&, kind](const std::vector<Tensor>& args) {
                double s = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    double xv = args[0].data[i];
                    double v = kind == 0   ? factor * xv
                               : kind == 1 ? dsigmoid(xv)
                               : kind == 2 ? dsoftplus(xv)
                                           : xv;
                    s += (kind >= 3 ? 1.0 : w[i]) * v;
                }
                if (kind == 4) s /= double(n);
                return s;
            };
            run_prim_check(pc);
        }

        // relu and clamp: resample away from the kinks
        {
            PrimCheck pc;
            auto x = pc.g.leaf("x", shape, true);
            auto wc = pc.g.constant("w", weights_tensor(w, shape));
            pc.g.sum_reduce(pc.g.mul(pc.g.relu(x), wc));
            Tensor in = random_tensor(rng, shape);
            for (auto& v : in.data) {
                while (std::fabs(v) < 0.05f) v = rng.uniform(-2.f, 2.f);
            }
            pc.inputs.emplace_back("x", in);
            pc.ref = [&](const std::vector<Tensor>& args) {
                double s = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    double xv = args[0].data[i];
                    s += w[i] * (xv > 0 ? xv : 0.0);
                }
                return s;
            };
            run_prim_check(pc);
        }
        {
            PrimCheck pc;
            auto x = pc.g.leaf("x", shape, true);
            auto wc = pc.g.constant("w", weights_tensor(w, shape));
            pc.g.sum_reduce(pc.g.mul(pc.g.clamp(x, -1.f, 1.f), wc));
            Tensor in = random_tensor(rng, shape);
            for (auto& v : in.data) {
                while (std::fabs(std::fabs(v) - 1.f) < 0.05f) v = rng.uniform(-2.f, 2.f);
            }
            pc.inputs.emplace_back("x", in);
            pc.ref = [&](const std::vector<Tensor>& args) {
                double s = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    double xv = args[0].data[i];
                    s += w[i] * std::min(1.0, std::max(-1.0, xv));
                }
                return s;
            };
            run_prim_check(pc);
        }
    }
}

TEST_CASE("gradcheck: matmul and bias_add over random shapes") {
    Rng rng(515);
    for (int iter = 0; iter < 100; ++iter) {
        std::size_t m = 1 + rng.next_below(4);
        std::size_t kk = 1 + rng.next_below(4);
        std::size_t nn = 1 + rng.next_below(4);
        auto w = weights_for(rng, m * nn);
        {
            PrimCheck pc;
            auto a = pc.g.leaf("a", {m, kk}, true);
            auto b = pc.g.leaf("b", {kk, nn}, true);
            auto wc = pc.g.constant("w", weights_tensor(w, {m, nn}));
            pc.g.sum_reduce(pc.g.mul(pc.g.matmul(a, b), wc));
            pc.inputs.emplace_back("a", random_tensor(rng, {m, kk}));
            pc.inputs.emplace_back("b", random_tensor(rng, {kk, nn}));
            pc.ref = [&](const std::vector<Tensor>& args) {
                double s = 0;
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < nn; ++j) {
                        double acc = 0;
                        for (std::size_t q = 0; q < kk; ++q) {
                            acc += double(args[0].data[i * kk + q]) *
                                   double(args[1].data[q * nn + j]);
                        }
                        s += w[i * nn + j] * acc;
                    }
                }
                return s;
            };
            run_prim_check(pc);
        }
        {
            PrimCheck pc;
            auto x = pc.g.leaf("x", {m, nn}, true);
            auto b = pc.g.leaf("b", {nn}, true);
            auto wc = pc.g.constant("w", weights_tensor(w, {m, nn}));
            pc.g.sum_reduce(pc.g.mul(pc.g.bias_add(x, b), wc));
            pc.inputs.emplace_back("x", random_tensor(rng, {m, nn}));
            pc.inputs.emplace_back("b", random_tensor(rng, {nn}));
            pc.ref = [&](const std::vector<Tensor>& args) {
                double s = 0;
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < nn; ++j) {
                        s += w[i * nn + j] *
                             (double(args[0].data[i * nn + j]) + double(args[1].data[j]));
                    }
                }
                return s;
            };
            run_prim_check(pc);
        }
    }
}

TEST_CASE("gradcheck: conv2d, pad2d, maxpool2x2, reshape over random shapes") {
    Rng rng(909);
    for (int iter = 0; iter < 100; ++iter) {
        std::size_t batch = 1 + rng.next_below(2);
        std::size_t cin = 1 + rng.next_below(2);
        std::size_t h = 3 + rng.next_below(3);
        std::size_t wd = 3 + rng.next_below(3);
        std::size_t cout = 1 + rng.next_below(2);
        std::size_t ksz = 2 + rng.next_below(2);

        {
            const std::size_t oh = h - ksz + 1, ow = wd - ksz + 1;
            auto w = weights_for(rng, batch * cout * oh * ow);
            PrimCheck pc;
            auto x = pc.g.leaf("x", {batch, cin, h, wd}, true);
            auto kern = pc.g.leaf("k", {cout, cin, ksz, ksz}, true);
            auto wc = pc.g.constant("w", weights_tensor(w, {batch, cout, oh, ow}));
            pc.g.sum_reduce(pc.g.mul(pc.g.conv2d_valid(x, kern), wc));
            pc.inputs.emplace_back("x", random_tensor(rng, {batch, cin, h, wd}));
            pc.inputs.emplace_back("k", random_tensor(rng, {cout, cin, ksz, ksz}));
            pc.ref = [&, batch, cin, h, wd, cout, ksz, oh, ow](const std::vector<Tensor>& args) {
                double s = 0;
                std::size_t wi = 0;
                for (std::size_t n = 0; n < batch; ++n) {
                    for (std::size_t o = 0; o < cout; ++o) {
                        for (std::size_t oy = 0; oy < oh; ++oy) {
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                double acc = 0;
                                for (std::size_t c = 0; c < cin; ++c) {
                                    for (std::size_t ky = 0; ky < ksz; ++ky) {
                                        for (std::size_t kx = 0; kx < ksz; ++kx) {
                                            acc += double(args[0].data[((n * cin + c) * h +
                                                                        (oy + ky)) *
                                                                           wd +
                                                                       (ox + kx)]) *
                                                   double(args[1].data[((o * cin + c) * ksz + ky) *
                                                                           ksz +
                                                                       kx]);
                                        }
                                    }
                                }
                                s += w[wi++] * acc;
                            }
                        }
                    }
                }
                return s;
            };
            run_prim_check(pc);
        }

        {
            auto w = weights_for(rng, batch * cin * (h + 2) * (wd + 2));
            PrimCheck pc;
            auto x = pc.g.leaf("x", {batch, cin, h, wd}, true);
            auto wc = pc.g.constant("w", weights_tensor(w, {batch, cin, h + 2, wd + 2}));
            pc.g.sum_reduce(pc.g.mul(pc.g.pad2d(x, 1), wc));
            pc.inputs.emplace_back("x", random_tensor(rng, {batch, cin, h, wd}));
            pc.ref = [&, batch, cin, h, wd](const std::vector<Tensor>& args) {
                double s = 0;
                const std::size_t hp = h + 2, wp = wd + 2;
                for (std::size_t nc = 0; nc < batch * cin; ++nc) {
                    for (std::size_t y = 0; y < h; ++y) {
                        for (std::size_t xcol = 0; xcol < wd; ++xcol) {
                            s += w[nc * hp * wp + (y + 1) * wp + (xcol + 1)] *
                                 double(args[0].data[nc * h * wd + y * wd + xcol]);
                        }
                    }
                }
                return s;
            };
            run_prim_check(pc);
        }

        {
            const std::size_t oh = h / 2, ow = wd / 2;
            auto w = weights_for(rng, batch * cin * oh * ow);
            PrimCheck pc;
            auto x = pc.g.leaf("x", {batch, cin, h, wd}, true);
            auto wc = pc.g.constant("w", weights_tensor(w, {batch, cin, oh, ow}));
            pc.g.sum_reduce(pc.g.mul(pc.g.maxpool2x2(x), wc));
            // resample until every pooling window has a clear maximizer
            Tensor in = random_tensor(rng, {batch, cin, h, wd});
            bool ok = false;
            while (!ok) {
                ok = true;
                for (std::size_t nc = 0; nc < batch * cin && ok; ++nc) {
                    for (std::size_t oy = 0; oy < oh && ok; ++oy) {
                        for (std::size_t ox = 0; ox < ow && ok; ++ox) {
                            float vals[4];
                            for (int q = 0; q < 4; ++q) {
                                vals[q] = in.data[nc * h * wd + (2 * oy + q / 2) * wd +
                                                  (2 * ox + q % 2)];
                            }
                            float best = *std::max_element(vals, vals + 4);
                            int close = 0;
                            for (float v : vals) {
                                if (best - v < 0.05f) ++close;
                            }
                            if (close > 1) ok = false;
                        }
                    }
                }
                if (!ok) in = random_tensor(rng, {batch, cin, h, wd});
            }
            pc.inputs.emplace_back("x", in);
            pc.ref = [&, batch, cin, h, wd, oh, ow](const std::vector<Tensor>& args) {
                double s = 0;
                std::size_t wi = 0;
                for (std::size_t nc = 0; nc < batch * cin; ++nc) {
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            double best = -1e300;
                            for (int q = 0; q < 4; ++q) {
                                double v = args[0].data[nc * h * wd + (2 * oy + q / 2) * wd +
                                                        (2 * ox + q % 2)];
                                best = std::max(best, v);
                            }
                            s += w[wi++] * best;
                        }
                    }
                }
                return s;
            };
            run_prim_check(pc);
        }

        {
            auto w = weights_for(rng, batch * cin * h * wd);
            PrimCheck pc;
            auto x = pc.g.leaf("x", {batch, cin, h, wd}, true);
            auto wc = pc.g.constant("w", weights_tensor(w, {batch * cin * h * wd}));
            pc.g.sum_reduce(pc.g.mul(pc.g.reshape(x, {batch * cin * h * wd}), wc));
            pc.inputs.emplace_back("x", random_tensor(rng, {batch, cin, h, wd}));
            pc.ref = [&](const std::vector<Tensor>& args) {
                double s = 0;
                for (std::size_t i = 0; i < args[0].size(); ++i) {
                    s += w[i] * double(args[0].data[i]);
                }
                return s;
            };
            run_prim_check(pc);
        }
    }
}

TEST_CASE("gradcheck: random 3-layer MLP against finite differences") {
    Rng rng(4242);
    for (int iter = 0; iter < 5; ++iter) {
        const std::size_t in_dim = 6, h1 = 5, h2 = 4, out_dim = 3;
        Tensor w1 = random_tensor(rng, {in_dim, h1}, -0.8f, 0.8f);
        Tensor w2 = random_tensor(rng, {h1, h2}, -0.8f, 0.8f);
        Tensor w3 = random_tensor(rng, {h2, out_dim}, -0.8f, 0.8f);
        Tensor target = random_tensor(rng, {1, out_dim}, 0.f, 1.f);

        Graph g;
        auto x = g.leaf("x", {1, in_dim}, true);
        auto a1 = g.relu(g.matmul(x, g.constant("w1", w1)));
        auto a2 = g.relu(g.matmul(a1, g.constant("w2", w2)));
        auto z = g.matmul(a2, g.constant("w3", w3));
        // BCE with logits: softplus(z) - z*t, summed
        auto t = g.constant("t", target);
        g.sum_reduce(g.sub(g.softplus(z), g.mul(z, t)));

        // double-precision reference of the same network
        auto ref = [&](const Tensor& probe) {
            std::vector<double> v1(h1, 0.0), v2(h2, 0.0), v3(out_dim, 0.0);
            for (std::size_t j = 0; j < h1; ++j) {
                double a = 0;
                for (std::size_t i = 0; i < in_dim; ++i) {
                    a += double(probe.data[i]) * double(w1.data[i * h1 + j]);
                }
                v1[j] = a > 0 ? a : 0;
            }
            for (std::size_t j = 0; j < h2; ++j) {
                double a = 0;
                for (std::size_t i = 0; i < h1; ++i) a += v1[i] * double(w2.data[i * h2 + j]);
                v2[j] = a > 0 ? a : 0;
            }
            double loss = 0;
            for (std::size_t j = 0; j < out_dim; ++j) {
                double a = 0;
                for (std::size_t i = 0; i < h2; ++i) a += v2[i] * double(w3.data[i * out_dim + j]);
                v3[j] = a;
                loss += dsoftplus(a) - a * double(target.data[j]);
            }
            return loss;
        };

        // resample x until every relu pre-activation is clear of the kink
        Tensor xin = random_tensor(rng, {1, in_dim}, -1.f, 1.f);
        auto clear_of_kinks = [&](const Tensor& probe) {
            std::vector<double> v1(h1, 0.0);
            for (std::size_t j = 0; j < h1; ++j) {
                double a = 0;
                for (std::size_t i = 0; i < in_dim; ++i) {
                    a += double(probe.data[i]) * double(w1.data[i * h1 + j]);
                }
                if (std::fabs(a) < 0.05) return false;
                v1[j] = a > 0 ? a : 0;
            }
            for (std::size_t j = 0; j < h2; ++j) {
                double a = 0;
                for (std::size_t i = 0; i < h1; ++i) a += v1[i] * double(w2.data[i * h2 + j]);
                if (std::fabs(a) < 0.05) return false;
            }
            return true;
        };
        while (!clear_of_kinks(xin)) xin = random_tensor(rng, {1, in_dim}, -1.f, 1.f);

        g.forward({{"x", &xin}});
        auto grads = g.backward(Tensor::from_data({1}, {1.f}));
        Tensor fd = finite_difference_grad(ref, xin, 1e-3);
        check_close_grads(grads.at("x"), fd);
    }
}

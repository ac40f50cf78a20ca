#include "advbench/kernels.hpp"

#include <cmath>
#include <vector>

namespace advbench::kernels {

namespace scalar {

void vadd(const float* a, const float* b, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void vsub(const float* a, const float* b, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void vmul(const float* a, const float* b, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void vscale(const float* a, float s, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = s * a[i];
}

void vaxpy(const float* a, float s, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] += s * a[i];
}

void vacc_mul(const float* a, const float* b, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] += a[i] * b[i];
}

void relu_fwd(const float* x, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.f ? x[i] : 0.f;
}

void relu_bwd(const float* x, const float* gout, float* gin, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (x[i] > 0.f) gin[i] += gout[i];
    }
}

void clamp_fwd(const float* x, float lo, float hi, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        float v = x[i];
        v = v < lo ? lo : v;
        v = v > hi ? hi : v;
        out[i] = v;
    }
}

void clamp_bwd(const float* x, float lo, float hi, const float* gout, float* gin,
               std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (x[i] >= lo && x[i] <= hi) gin[i] += gout[i];
    }
}

void matmul(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
            std::size_t n) {
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) acc[j] = 0.0;
        const float* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = static_cast<double>(arow[kk]);
            const float* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                acc[j] += av * static_cast<double>(brow[j]);
            }
        }
        float* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
    }
}

void pgd_step(const float* x0, const float* x, const float* g, float alpha, float eps,
              float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        float s = (g[i] > 0.f ? 1.f : 0.f) - (g[i] < 0.f ? 1.f : 0.f);
        float v = x[i] + alpha * s;
        v = v < 0.f ? 0.f : v;
        v = v > 1.f ? 1.f : v;
        float lo = x0[i] - eps;
        float hi = x0[i] + eps;
        v = v < lo ? lo : v;
        v = v > hi ? hi : v;
        out[i] = v;
    }
}

}  // namespace scalar

const KernelTable& scalar_table() {
    static const KernelTable table = {
        "scalar",         scalar::vadd,      scalar::vsub,      scalar::vmul,
        scalar::vscale,   scalar::vaxpy,     scalar::vacc_mul,  scalar::relu_fwd,
        scalar::relu_bwd, scalar::clamp_fwd, scalar::clamp_bwd, scalar::matmul,
        scalar::pgd_step,
    };
    return table;
}

double reduce_sum_f64(const float* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]);
    return acc;
}

void transpose(const float* a, std::size_t rows, std::size_t cols, float* out) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

float sigmoid(float x) {
    if (x >= 0.f) {
        float e = std::exp(-x);
        return 1.f / (1.f + e);
    }
    float e = std::exp(x);
    return e / (1.f + e);
}

float softplus(float x) {
    // max(x,0) + log1p(exp(-|x|)), stable on both tails
    float m = x > 0.f ? x : 0.f;
    return m + std::log1p(std::exp(-std::fabs(x)));
}

void sigmoid_fwd(const float* x, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid(x[i]);
}

void softplus_fwd(const float* x, float* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = softplus(x[i]);
}

}  // namespace advbench::kernels

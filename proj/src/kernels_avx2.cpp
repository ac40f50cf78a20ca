// Compiled with -mavx2 -mfma on x86 targets (see src/CMakeLists.txt); the
// rest of the library stays at the baseline ISA so dispatch is safe.

#include "advbench/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <vector>

namespace advbench::kernels {

namespace avx2 {

void vadd(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void vsub(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void vmul(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void vscale(const float* a, float s, float* out, std::size_t n) {
    const __m256 vs = _mm256_set1_ps(s);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(out + i, _mm256_mul_ps(vs, _mm256_loadu_ps(a + i)));
    }
    for (; i < n; ++i) out[i] = s * a[i];
}

void vaxpy(const float* a, float s, float* out, std::size_t n) {
    const __m256 vs = _mm256_set1_ps(s);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        // mul then add, matching the scalar reference (no fused rounding)
        __m256 prod = _mm256_mul_ps(vs, _mm256_loadu_ps(a + i));
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(out + i), prod));
    }
    for (; i < n; ++i) out[i] += s * a[i];
}

void vacc_mul(const float* a, const float* b, float* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 prod = _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(out + i), prod));
    }
    for (; i < n; ++i) out[i] += a[i] * b[i];
}

void relu_fwd(const float* x, float* out, std::size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 v = _mm256_loadu_ps(x + i);
        __m256 gt = _mm256_cmp_ps(v, zero, _CMP_GT_OQ);
        _mm256_storeu_ps(out + i, _mm256_blendv_ps(zero, v, gt));
    }
    for (; i < n; ++i) out[i] = x[i] > 0.f ? x[i] : 0.f;
}

void relu_bwd(const float* x, const float* gout, float* gin, std::size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 xv = _mm256_loadu_ps(x + i);
        __m256 gt = _mm256_cmp_ps(xv, zero, _CMP_GT_OQ);
        __m256 gi = _mm256_loadu_ps(gin + i);
        __m256 sum = _mm256_add_ps(gi, _mm256_loadu_ps(gout + i));
        // blend keeps gin bits untouched where masked (preserves -0.0)
        _mm256_storeu_ps(gin + i, _mm256_blendv_ps(gi, sum, gt));
    }
    for (; i < n; ++i) {
        if (x[i] > 0.f) gin[i] += gout[i];
    }
}

void clamp_fwd(const float* x, float lo, float hi, float* out, std::size_t n) {
    const __m256 vlo = _mm256_set1_ps(lo);
    const __m256 vhi = _mm256_set1_ps(hi);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 v = _mm256_loadu_ps(x + i);
        v = _mm256_blendv_ps(v, vlo, _mm256_cmp_ps(v, vlo, _CMP_LT_OQ));
        v = _mm256_blendv_ps(v, vhi, _mm256_cmp_ps(v, vhi, _CMP_GT_OQ));
        _mm256_storeu_ps(out + i, v);
    }
    for (; i < n; ++i) {
        float v = x[i];
        v = v < lo ? lo : v;
        v = v > hi ? hi : v;
        out[i] = v;
    }
}

void clamp_bwd(const float* x, float lo, float hi, const float* gout, float* gin,
               std::size_t n) {
    const __m256 vlo = _mm256_set1_ps(lo);
    const __m256 vhi = _mm256_set1_ps(hi);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 xv = _mm256_loadu_ps(x + i);
        __m256 inside = _mm256_and_ps(_mm256_cmp_ps(xv, vlo, _CMP_GE_OQ),
                                      _mm256_cmp_ps(xv, vhi, _CMP_LE_OQ));
        __m256 gi = _mm256_loadu_ps(gin + i);
        __m256 sum = _mm256_add_ps(gi, _mm256_loadu_ps(gout + i));
        _mm256_storeu_ps(gin + i, _mm256_blendv_ps(gi, sum, inside));
    }
    for (; i < n; ++i) {
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
            const __m256d vav = _mm256_set1_pd(av);
            const float* brow = b + kk * n;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4) {
                __m256d bv = _mm256_cvtps_pd(_mm_loadu_ps(brow + j));
                __m256d av4 = _mm256_loadu_pd(acc.data() + j);
                // float*float is exact in double, so fma == mul+add here
                _mm256_storeu_pd(acc.data() + j, _mm256_fmadd_pd(vav, bv, av4));
            }
            for (; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        float* crow = c + i * n;
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            _mm_storeu_ps(crow + j, _mm256_cvtpd_ps(_mm256_loadu_pd(acc.data() + j)));
        }
        for (; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
    }
}

void pgd_step(const float* x0, const float* x, const float* g, float alpha, float eps,
              float* out, std::size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    const __m256 one = _mm256_set1_ps(1.f);
    const __m256 valpha = _mm256_set1_ps(alpha);
    const __m256 veps = _mm256_set1_ps(eps);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 gv = _mm256_loadu_ps(g + i);
        __m256 pos = _mm256_and_ps(_mm256_cmp_ps(gv, zero, _CMP_GT_OQ), one);
        __m256 neg = _mm256_and_ps(_mm256_cmp_ps(gv, zero, _CMP_LT_OQ), one);
        __m256 sgn = _mm256_sub_ps(pos, neg);
        __m256 v = _mm256_add_ps(_mm256_loadu_ps(x + i), _mm256_mul_ps(valpha, sgn));
        v = _mm256_blendv_ps(v, zero, _mm256_cmp_ps(v, zero, _CMP_LT_OQ));
        v = _mm256_blendv_ps(v, one, _mm256_cmp_ps(v, one, _CMP_GT_OQ));
        __m256 x0v = _mm256_loadu_ps(x0 + i);
        __m256 lo = _mm256_sub_ps(x0v, veps);
        __m256 hi = _mm256_add_ps(x0v, veps);
        v = _mm256_blendv_ps(v, lo, _mm256_cmp_ps(v, lo, _CMP_LT_OQ));
        v = _mm256_blendv_ps(v, hi, _mm256_cmp_ps(v, hi, _CMP_GT_OQ));
        _mm256_storeu_ps(out + i, v);
    }
    for (; i < n; ++i) {
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

}  // namespace avx2

const KernelTable& avx2_table() {
    static const KernelTable table = {
        "avx2",         avx2::vadd,      avx2::vsub,      avx2::vmul,
        avx2::vscale,   avx2::vaxpy,     avx2::vacc_mul,  avx2::relu_fwd,
        avx2::relu_bwd, avx2::clamp_fwd, avx2::clamp_bwd, avx2::matmul,
        avx2::pgd_step,
    };
    return table;
}

bool avx2_compiled() { return true; }

}  // namespace advbench::kernels

#else  // no AVX2/FMA at compile time: fall back to the scalar table

namespace advbench::kernels {

const KernelTable& avx2_table() { return scalar_table(); }
bool avx2_compiled() { return false; }

}  // namespace advbench::kernels

#endif

#pragma once

#include <cstddef>

// Data-parallel inner loops behind the tensor graph and the attack updates.
// Every entry has a scalar reference implementation and, on x86 with AVX2+FMA,
// a vectorized variant selected once at startup. All variants are constructed
// to be bit-identical to the scalar reference: reductions accumulate in
// double precision in a fixed per-element order (float products are exact in
// double, so FMA cannot change the rounding), and elementwise ops perform the
// same float operations lane for lane. The equivalence suite asserts exact
// equality, which keeps results independent of the dispatch decision.
namespace advbench::kernels {

struct KernelTable {
    const char* name;

    void (*vadd)(const float* a, const float* b, float* out, std::size_t n);
    void (*vsub)(const float* a, const float* b, float* out, std::size_t n);
    void (*vmul)(const float* a, const float* b, float* out, std::size_t n);
    // out = s * a
    void (*vscale)(const float* a, float s, float* out, std::size_t n);
    // out += s * a
    void (*vaxpy)(const float* a, float s, float* out, std::size_t n);
    // out += a * b
    void (*vacc_mul)(const float* a, const float* b, float* out, std::size_t n);

    void (*relu_fwd)(const float* x, float* out, std::size_t n);
    // gin += gout where x > 0
    void (*relu_bwd)(const float* x, const float* gout, float* gin, std::size_t n);
    void (*clamp_fwd)(const float* x, float lo, float hi, float* out, std::size_t n);
    // gin += gout where lo <= x <= hi (pass-through inside, exact 0 outside)
    void (*clamp_bwd)(const float* x, float lo, float hi, const float* gout, float* gin,
                      std::size_t n);

    // Row-major C[m x n] = A[m x k] * B[k x n]; per-element accumulation in
    // double, strictly in k order.
    void (*matmul)(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                   std::size_t n);

    // One projected-gradient step:
    //   out = clip_ball(clip01(x + alpha * sign(g)))  with ball = [x0-eps, x0+eps].
    // sign(0) = 0. Gradient ascent for alpha > 0, descent for alpha < 0.
    void (*pgd_step)(const float* x0, const float* x, const float* g, float alpha, float eps,
                     float* out, std::size_t n);
};

const KernelTable& scalar_table();

// AVX2 table; compiles to the scalar fallback on non-x86 targets.
const KernelTable& avx2_table();
bool avx2_compiled();

// CPU support check (false when not compiled in).
bool avx2_supported();

// Runtime selection, cached after first call. ADVBENCH_KERNELS={auto,scalar,avx2}
// overrides; forcing avx2 on an unsupported host is an error.
const KernelTable& active();

// Scalar helpers shared by every backend (not worth vectorizing or required
// to keep a single fixed reduction order).
double reduce_sum_f64(const float* x, std::size_t n);
void transpose(const float* a, std::size_t rows, std::size_t cols, float* out);
float sigmoid(float x);
float softplus(float x);
void sigmoid_fwd(const float* x, float* out, std::size_t n);
void softplus_fwd(const float* x, float* out, std::size_t n);

}  // namespace advbench::kernels

#include <cstdlib>
#include <stdexcept>
#include <string>

#include "advbench/kernels.hpp"

namespace advbench::kernels {

bool avx2_supported() {
#if defined(__GNUC__) && (defined(__x86_64__) || defined(__i386__))
    return avx2_compiled() && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

namespace {

const KernelTable* select() {
    const char* env = std::getenv("ADVBENCH_KERNELS");
    std::string mode = env ? env : "auto";
    if (mode == "scalar") return &scalar_table();
    if (mode == "avx2") {
        if (!avx2_supported()) {
            throw std::runtime_error("ADVBENCH_KERNELS=avx2 but AVX2+FMA is not available");
        }
        return &avx2_table();
    }
    if (mode != "auto" && !mode.empty()) {
        throw std::runtime_error("unknown ADVBENCH_KERNELS value: " + mode);
    }
    return avx2_supported() ? &avx2_table() : &scalar_table();
}

}  // namespace

const KernelTable& active() {
    static const KernelTable* table = select();
    return *table;
}

}  // namespace advbench::kernels

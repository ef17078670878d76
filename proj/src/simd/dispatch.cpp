#include "diffmark/simd/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

namespace diffmark::simd {

#if defined(DIFFMARK_HAVE_AVX2)
const KernelTable* avx2_kernels_impl();
#endif

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma") &&
           __builtin_cpu_supports("popcnt");
#else
    return false;
#endif
}

const KernelTable* avx2_kernels() {
#if defined(DIFFMARK_HAVE_AVX2)
    static const bool ok = cpu_has_avx2_fma();
    return ok ? avx2_kernels_impl() : nullptr;
#else
    return nullptr;
#endif
}

namespace {

std::atomic<const KernelTable*> g_forced{nullptr};

const KernelTable& select() {
    const char* env = std::getenv("DIFFMARK_SIMD");
    if (env && std::strcmp(env, "scalar") == 0) return scalar_kernels();
    if (const KernelTable* t = avx2_kernels()) return *t;
    return scalar_kernels();
}

}  // namespace

const KernelTable& active() {
    if (const KernelTable* f = g_forced.load(std::memory_order_acquire)) return *f;
    static const KernelTable& chosen = select();
    return chosen;
}

void force_table(const KernelTable* table) {
    g_forced.store(table, std::memory_order_release);
}

}  // namespace diffmark::simd

// OpenBLAS picks its kernel set from CPUID at library-init time. Under some
// hypervisors the feature leaves are masked and it silently falls back to a
// generic pre-AVX kernel, which costs an order of magnitude of GEMM
// throughput even though the silicon executes wide vector instructions
// without complaint. CPUID cannot be trusted here, so probe by executing the
// instructions under a SIGILL guard and pin the core type accordingly before
// OpenBLAS initializes; constructor priority 101 runs ahead of its
// constructor in the statically linked archive. Respects an explicit
// OPENBLAS_CORETYPE from the environment (overwrite = 0).
//
// Threading stays inside OpenMP: BLAS calls must be single-threaded or the
// reduction order would depend on its internal thread count.

#ifdef DIRACNET_USE_OPENBLAS

#include <setjmp.h>
#include <signal.h>
#include <cstdlib>

namespace diracnet::detail {

// Referenced from kernels.cpp so static linking cannot drop this translation
// unit, and the constructor below with it, from the final binary.
int blas_init_anchor() { return 0; }

}  // namespace diracnet::detail

namespace {

sigjmp_buf probe_env;

extern "C" void probe_trap(int) { siglongjmp(probe_env, 1); }

bool executes_avx512() {
    if (sigsetjmp(probe_env, 1)) return false;
    __asm__ __volatile__("vpxord %%zmm0, %%zmm0, %%zmm0" ::: "zmm0");
    return true;
}

bool executes_avx2_fma() {
    if (sigsetjmp(probe_env, 1)) return false;
    __asm__ __volatile__(
        "vpxor %%ymm0, %%ymm0, %%ymm0\n\t"
        "vfmadd132ps %%ymm0, %%ymm0, %%ymm0\n\t"
        "vpbroadcastd %%xmm0, %%ymm0"
        :
        :
        : "ymm0");
    return true;
}

__attribute__((constructor(101))) void pin_openblas_coretype() {
    struct sigaction probe {};
    struct sigaction old_ill {};
    probe.sa_handler = probe_trap;
    sigaction(SIGILL, &probe, &old_ill);
    const char* core = nullptr;
    if (executes_avx512()) {
        core = "SKYLAKEX";
    } else if (executes_avx2_fma()) {
        core = "HASWELL";
    }
    sigaction(SIGILL, &old_ill, nullptr);
    if (core) setenv("OPENBLAS_CORETYPE", core, /*overwrite=*/0);
    setenv("OPENBLAS_NUM_THREADS", "1", /*overwrite=*/1);
}

}  // namespace

#endif  // DIRACNET_USE_OPENBLAS

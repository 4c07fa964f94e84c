#include "hitt/kernels/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace hitt::kernels {

const KernelTable& scalar_table();

#if defined(HITT_WITH_AVX2)
const KernelTable* avx2_table();
#else
static const KernelTable* avx2_table() { return nullptr; }
#endif

namespace {

bool cpu_has_avx2() {
#if defined(HITT_WITH_AVX2) && (defined(__x86_64__) || defined(__i386__))
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

Backend pick_initial() {
    if (const char* env = std::getenv("HITT_SIMD")) {
        const std::string v(env);
        if (v == "scalar") return Backend::scalar;
        if (v == "avx2") {
            if (!cpu_has_avx2())
                throw std::runtime_error(
                    "HITT_SIMD=avx2 requested but AVX2 is not available");
            return Backend::avx2;
        }
        throw std::runtime_error("HITT_SIMD must be 'scalar' or 'avx2', got '" +
                                 v + "'");
    }
    return cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
}

Backend& current() {
    static Backend b = pick_initial();
    return b;
}

}  // namespace

bool avx2_available() { return cpu_has_avx2(); }

const KernelTable& active() {
    return current() == Backend::avx2 ? *avx2_table() : scalar_table();
}

Backend active_backend() { return current(); }

const char* backend_name(Backend b) {
    return b == Backend::avx2 ? "avx2" : "scalar";
}

void force_backend(Backend b) {
    if (b == Backend::avx2 && !cpu_has_avx2())
        throw std::runtime_error("cannot force avx2 backend: not available");
    current() = b;
}

}  // namespace hitt::kernels

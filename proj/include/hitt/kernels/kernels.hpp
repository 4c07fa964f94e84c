#pragma once

#include <cstddef>

namespace hitt::kernels {

// Dense f32 building blocks behind a runtime-selected dispatch table.
//
// Both backends perform the same arithmetic in the same per-element order
// with separate mul/add (no FMA), so scalar and AVX2 results are bitwise
// identical. The equivalence tests assert exactly that.

struct KernelTable {
    // c[m x n] = a[m x k] * b[k x n]; accumulate=true adds into c instead.
    void (*gemm)(const float* a, const float* b, float* c,
                 int m, int k, int n, bool accumulate);
    void (*add)(const float* a, const float* b, float* out, std::size_t n);
    void (*mul)(const float* a, const float* b, float* out, std::size_t n);
    // y += alpha * x
    void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
    void (*scale)(const float* x, float alpha, float* out, std::size_t n);
};

enum class Backend { scalar, avx2 };

// Table in use. First call picks the best available backend, honouring the
// HITT_SIMD environment variable ("scalar" or "avx2") if set.
const KernelTable& active();
Backend active_backend();
const char* backend_name(Backend b);

// Override the selection (used by tests). Throws std::runtime_error if the
// requested backend is not usable on this machine.
void force_backend(Backend b);
bool avx2_available();

}  // namespace hitt::kernels

#include "hitt/kernels/kernels.hpp"

#include <algorithm>

// Reference backend. Loop order is part of the contract: for every output
// element the reduction over k runs in ascending order, which is what the
// vector backend reproduces lane by lane.

namespace hitt::kernels {
namespace {

void gemm_scalar(const float* __restrict a, const float* __restrict b,
                 float* __restrict c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0f);
        const float* arow = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void add_scalar(const float* __restrict a, const float* __restrict b,
                float* __restrict out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_scalar(const float* __restrict a, const float* __restrict b,
                float* __restrict out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_scalar(float alpha, const float* __restrict x, float* __restrict y,
                 std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(const float* __restrict x, float alpha, float* __restrict out,
                  std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * alpha;
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable t{gemm_scalar, add_scalar, mul_scalar, axpy_scalar,
                               scale_scalar};
    return t;
}

}  // namespace hitt::kernels

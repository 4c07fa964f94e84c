#include "hitt/kernels/kernels.hpp"

#include <immintrin.h>

#include <algorithm>

// AVX2 backend. Deliberately uses _mm256_add_ps(_mm256_mul_ps(...)) rather
// than FMA: together with -ffp-contract=off this keeps per-element rounding
// identical to the scalar backend, so both produce bitwise-equal results.

namespace hitt::kernels {
namespace {

void gemm_avx2(const float* __restrict a, const float* __restrict b,
               float* __restrict c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<std::size_t>(i) * n;
        const float* arow = a + static_cast<std::size_t>(i) * k;
        int j = 0;
        for (; j + 32 <= n; j += 32) {
            __m256 c0, c1, c2, c3;
            if (accumulate) {
                c0 = _mm256_loadu_ps(crow + j);
                c1 = _mm256_loadu_ps(crow + j + 8);
                c2 = _mm256_loadu_ps(crow + j + 16);
                c3 = _mm256_loadu_ps(crow + j + 24);
            } else {
                c0 = c1 = c2 = c3 = _mm256_setzero_ps();
            }
            for (int p = 0; p < k; ++p) {
                const __m256 av = _mm256_set1_ps(arow[p]);
                const float* brow = b + static_cast<std::size_t>(p) * n + j;
                c0 = _mm256_add_ps(c0, _mm256_mul_ps(av, _mm256_loadu_ps(brow)));
                c1 = _mm256_add_ps(c1, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 8)));
                c2 = _mm256_add_ps(c2, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 16)));
                c3 = _mm256_add_ps(c3, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 24)));
            }
            _mm256_storeu_ps(crow + j, c0);
            _mm256_storeu_ps(crow + j + 8, c1);
            _mm256_storeu_ps(crow + j + 16, c2);
            _mm256_storeu_ps(crow + j + 24, c3);
        }
        for (; j + 8 <= n; j += 8) {
            __m256 acc = accumulate ? _mm256_loadu_ps(crow + j) : _mm256_setzero_ps();
            for (int p = 0; p < k; ++p) {
                const __m256 av = _mm256_set1_ps(arow[p]);
                const __m256 bv = _mm256_loadu_ps(b + static_cast<std::size_t>(p) * n + j);
                acc = _mm256_add_ps(acc, _mm256_mul_ps(av, bv));
            }
            _mm256_storeu_ps(crow + j, acc);
        }
        for (; j < n; ++j) {
            float acc = accumulate ? crow[j] : 0.0f;
            for (int p = 0; p < k; ++p)
                acc += arow[p] * b[static_cast<std::size_t>(p) * n + j];
            crow[j] = acc;
        }
    }
}

void add_avx2(const float* __restrict a, const float* __restrict b,
              float* __restrict out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                                _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_avx2(const float* __restrict a, const float* __restrict b,
              float* __restrict out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                                _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_avx2(float alpha, const float* __restrict x, float* __restrict y,
               std::size_t n) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(const float* __restrict x, float alpha, float* __restrict out,
                std::size_t n) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(out + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) out[i] = x[i] * alpha;
}

}  // namespace

const KernelTable* avx2_table() {
    static const KernelTable t{gemm_avx2, add_avx2, mul_avx2, axpy_avx2,
                               scale_avx2};
    return &t;
}

}  // namespace hitt::kernels

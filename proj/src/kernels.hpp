#pragma once

// Dense kernels shared by the autodiff primitives. Summation order depends
// only on the operand shapes, so results are bit-reproducible run to run.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace dcl::kernels {

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst);

/// Dot product over eight interleaved partial sums; the fixed lane layout keeps the
/// summation order independent of the instruction set.
template <class T>
T dot(const T* __restrict x, const T* __restrict y, std::size_t len) {
    typedef T lanes __attribute__((vector_size(8 * sizeof(T))));
    lanes acc = {};
    std::size_t p = 0;
    for (; p + 8 <= len; p += 8) {
        lanes xv, yv;
        std::memcpy(&xv, x + p, sizeof(lanes));
        std::memcpy(&yv, y + p, sizeof(lanes));
        acc += xv * yv;
    }
    T tail = 0;
    for (; p < len; ++p) tail += x[p] * y[p];
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

/// C[M x N] (+)= A[M x K] * B[K x N]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a, const T* __restrict b,
             T* __restrict c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T{0});
    constexpr std::size_t kColBlock = 512;
    constexpr std::size_t kDepthBlock = 256;
    if (n < 16 && m >= 16) {
        // Narrow outputs: vectorize over 16-row tiles of A instead of over columns.
        // Each element sees the same summation sequence as the general loop below,
        // so results do not depend on which path (or batch size) produced them.
        constexpr std::size_t R = 16;
        std::vector<T> tile(k * R);
        for (std::size_t i0 = 0; i0 < m; i0 += R) {
            const std::size_t r = std::min(R, m - i0);
            std::fill(tile.begin(), tile.end(), T{0});
            for (std::size_t ii = 0; ii < r; ++ii)
                for (std::size_t p = 0; p < k; ++p) tile[p * R + ii] = a[(i0 + ii) * k + p];
            for (std::size_t j = 0; j < n; ++j) {
                T acc[R] = {};
                for (std::size_t ii = 0; ii < r; ++ii) acc[ii] = c[(i0 + ii) * n + j];
                for (std::size_t k0 = 0; k0 < k; k0 += kDepthBlock) {
                    const std::size_t k1 = std::min(k, k0 + kDepthBlock);
                    std::size_t p = k0;
                    for (; p + 4 <= k1; p += 4) {
                        const T b0 = b[p * n + j], b1 = b[(p + 1) * n + j], b2 = b[(p + 2) * n + j],
                                b3 = b[(p + 3) * n + j];
                        const T* t0 = tile.data() + p * R;
                        for (std::size_t ii = 0; ii < R; ++ii)
                            acc[ii] = acc[ii] + t0[ii] * b0 + t0[R + ii] * b1 + t0[2 * R + ii] * b2 +
                                      t0[3 * R + ii] * b3;
                    }
                    for (; p < k1; ++p) {
                        const T bv = b[p * n + j];
                        const T* t0 = tile.data() + p * R;
                        for (std::size_t ii = 0; ii < R; ++ii) acc[ii] += t0[ii] * bv;
                    }
                }
                for (std::size_t ii = 0; ii < r; ++ii) c[(i0 + ii) * n + j] = acc[ii];
            }
        }
        return;
    }
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
        const std::size_t jn = std::min(kColBlock, n - j0);
        for (std::size_t k0 = 0; k0 < k; k0 += kDepthBlock) {
            const std::size_t k1 = std::min(k, k0 + kDepthBlock);
            for (std::size_t i = 0; i < m; ++i) {
                T* __restrict crow = c + i * n + j0;
                const T* arow = a + i * k;
                std::size_t p = k0;
                for (; p + 4 <= k1; p += 4) {
                    const T a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
                    const T* b0 = b + p * n + j0;
                    const T* b1 = b0 + n;
                    const T* b2 = b1 + n;
                    const T* b3 = b2 + n;
                    for (std::size_t j = 0; j < jn; ++j)
                        crow[j] = crow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                for (; p < k1; ++p) {
                    const T av = arow[p];
                    const T* brow = b + p * n + j0;
                    for (std::size_t j = 0; j < jn; ++j) crow[j] += av * brow[j];
                }
            }
        }
    }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    constexpr std::size_t kTile = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kTile)
        for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
            const std::size_t r1 = std::min(rows, r0 + kTile), c1 = std::min(cols, c0 + kTile);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
        }
}

/// C[M x N] (+)= A^T * B with A stored [K x M], B [K x N]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    if (m * n <= 8192 && n >= 16) {
        // Small output and long depth (weight gradients): rank-4 updates of a cache-resident C.
        if (!accumulate) std::fill(c, c + m * n, T{0});
        std::size_t p = 0;
        for (; p + 4 <= k; p += 4) {
            const T* a0 = a + p * m;
            const T* b0 = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const T x0 = a0[i], x1 = a0[m + i], x2 = a0[2 * m + i], x3 = a0[3 * m + i];
                T* __restrict crow = c + i * n;
                for (std::size_t j = 0; j < n; ++j)
                    crow[j] = crow[j] + x0 * b0[j] + x1 * b0[n + j] + x2 * b0[2 * n + j] + x3 * b0[3 * n + j];
            }
        }
        for (; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) {
                const T x = a[p * m + i];
                for (std::size_t j = 0; j < n; ++j) c[i * n + j] += x * b[p * n + j];
            }
        return;
    }
    if (n < 16) {
        std::vector<T> at(m * k), bt(n * k);
        transpose(k, m, a, at.data());
        transpose(k, n, b, bt.data());
        if (!accumulate) std::fill(c, c + m * n, T{0});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(at.data() + i * k, bt.data() + j * k, k);
        return;
    }
    std::vector<T> at(m * k);
    transpose(k, m, a, at.data());
    gemm_nn(m, n, k, at.data(), b, c, accumulate);
}

/// C[M x N] (+)= A * B^T with A [M x K], B stored [N x K]
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    std::vector<T> bt(n * k);
    transpose(n, k, b, bt.data());
    gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

} // namespace dcl::kernels

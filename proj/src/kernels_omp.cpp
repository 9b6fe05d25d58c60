#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "fdt/kernels.hpp"

// Parallel loops split only over independent output rows/columns/blocks, and
// each element keeps the reference reduction order, so these match
// kernels::serial bit for bit.

// AVX2 clones (no FMA) issue the same IEEE operations in the same order as
// the baseline, so dispatching on the host CPU does not change any result.
#if defined(__x86_64__) && defined(__GNUC__) && !defined(__clang__)
#define FDT_MULTIVERSION __attribute__((target_clones("avx2", "default")))
#else
#define FDT_MULTIVERSION
#endif

namespace fdt::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

inline long as_long(std::size_t n) { return static_cast<long>(n); }

void softmax_row(double* row, std::size_t cols) {
    double mx = row[0];
    for (std::size_t j = 1; j < cols; ++j) {
        mx = std::max(mx, row[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
        row[j] /= sum;
    }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

FDT_MULTIVERSION
void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
            bool accumulate) {
    // Four output rows share each streamed row of b; every c[i][j] still
    // accumulates over p in ascending order.
    constexpr std::size_t kRows = 4;
    const std::size_t blocks = (n + kRows - 1) / kRows;
#pragma omp parallel for schedule(static) if (n * k * m >= kParallelWork)
    for (long bl = 0; bl < as_long(blocks); ++bl) {
        const std::size_t i0 = static_cast<std::size_t>(bl) * kRows;
        const std::size_t rows = std::min(kRows, n - i0);
        if (!accumulate) {
            std::fill(c + i0 * m, c + (i0 + rows) * m, 0.0);
        }
        if (rows == kRows) {
            double* c0 = c + i0 * m;
            double* c1 = c0 + m;
            double* c2 = c1 + m;
            double* c3 = c2 + m;
            const double* a0 = a + i0 * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double* br = b + p * m;
                const double x0 = a0[p];
                const double x1 = a0[k + p];
                const double x2 = a0[2 * k + p];
                const double x3 = a0[3 * k + p];
#pragma omp simd
                for (std::size_t j = 0; j < m; ++j) {
                    const double bj = br[j];
                    c0[j] += x0 * bj;
                    c1[j] += x1 * bj;
                    c2[j] += x2 * bj;
                    c3[j] += x3 * bj;
                }
            }
        } else {
            for (std::size_t i = i0; i < i0 + rows; ++i) {
                double* cr = c + i * m;
                for (std::size_t p = 0; p < k; ++p) {
                    const double x = a[i * k + p];
                    const double* br = b + p * m;
#pragma omp simd
                    for (std::size_t j = 0; j < m; ++j) {
                        cr[j] += x * br[j];
                    }
                }
            }
        }
    }
}

FDT_MULTIVERSION
void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
               bool accumulate) {
    // Each thread owns a contiguous band of output rows and streams a and b
    // once, row by row, so c[i][j] accumulates over r in ascending order.
#pragma omp parallel if (n * k * m >= kParallelWork)
    {
        std::size_t lo = 0;
        std::size_t hi = k;
#ifdef _OPENMP
        const auto threads = static_cast<std::size_t>(omp_get_num_threads());
        const auto id = static_cast<std::size_t>(omp_get_thread_num());
        lo = k * id / threads;
        hi = k * (id + 1) / threads;
#endif
        if (!accumulate) {
            std::fill(c + lo * m, c + hi * m, 0.0);
        }
        for (std::size_t r = 0; r < n; ++r) {
            const double* ar = a + r * k;
            const double* br = b + r * m;
            for (std::size_t i = lo; i < hi; ++i) {
                const double x = ar[i];
                double* cr = c + i * m;
#pragma omp simd
                for (std::size_t j = 0; j < m; ++j) {
                    cr[j] += x * br[j];
                }
            }
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
               bool accumulate) {
    // a * b^T == a * transpose(b); the per-element order (p ascending) is the
    // same as the reference dot product.
    std::vector<double> bt(m * k);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t p = 0; p < m; ++p) {
            bt[p * k + j] = b[j * m + p];
        }
    }
    matmul(a, bt.data(), c, n, m, k, accumulate);
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
    for (long rl = 0; rl < as_long(rows); ++rl) {
        const auto r = static_cast<std::size_t>(rl);
        if (x != y) {
            std::memcpy(y + r * cols, x + r * cols, cols * sizeof(double));
        }
        softmax_row(y + r * cols, cols);
    }
}

FDT_MULTIVERSION
void layer_norm_forward(const double* x, const double* gamma, const double* beta, double* y, double* xhat,
                        double* rstd, std::size_t rows, std::size_t d, double eps) {
    const double inv_d = 1.0 / static_cast<double>(d);
#pragma omp parallel for schedule(static) if (rows * d >= kParallelWork)
    for (long rl = 0; rl < as_long(rows); ++rl) {
        const auto r = static_cast<std::size_t>(rl);
        const double* xr = x + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mean += xr[j];
        }
        mean *= inv_d;
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var *= inv_d;
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd[r] = rs;
        double* hr = xhat + r * d;
        double* yr = y + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            hr[j] = (xr[j] - mean) * rs;
            yr[j] = hr[j] * gamma[j] + beta[j];
        }
    }
}

FDT_MULTIVERSION
void layer_norm_backward(const double* dy, const double* xhat, const double* rstd, const double* gamma, double* dx,
                         double* dgamma, double* dbeta, std::size_t rows, std::size_t d) {
    const double inv_d = 1.0 / static_cast<double>(d);
    const bool big = rows * d >= kParallelWork;
#pragma omp parallel if (big)
    {
#pragma omp for schedule(static)
        for (long rl = 0; rl < as_long(rows); ++rl) {
            const auto r = static_cast<std::size_t>(rl);
            const double* dyr = dy + r * d;
            const double* hr = xhat + r * d;
            double mean_g = 0.0;
            double mean_gh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double g = dyr[j] * gamma[j];
                mean_g += g;
                mean_gh += g * hr[j];
            }
            mean_g *= inv_d;
            mean_gh *= inv_d;
            double* dxr = dx + r * d;
            for (std::size_t j = 0; j < d; ++j) {
                const double g = dyr[j] * gamma[j];
                dxr[j] += rstd[r] * (g - mean_g - hr[j] * mean_gh);
            }
        }
#pragma omp for schedule(static)
        for (long jl = 0; jl < as_long(d); ++jl) {
            const auto j = static_cast<std::size_t>(jl);
            double sg = dgamma[j];
            double sb = dbeta[j];
            for (std::size_t r = 0; r < rows; ++r) {
                sg += dy[r * d + j] * xhat[r * d + j];
                sb += dy[r * d + j];
            }
            dgamma[j] = sg;
            dbeta[j] = sb;
        }
    }
}

FDT_MULTIVERSION
void attention_forward(const AttentionGeometry& g, std::span<const AttentionSegment> segments, const double* q,
                       const double* k, const double* v, double* out, double* probs) {
    const auto offsets = attention_prob_offsets(segments, g.heads);
    const std::size_t tasks = segments.size() * g.heads;
    const std::size_t work = offsets.back() * (g.head_dim + g.value_dim);
#pragma omp parallel for schedule(dynamic) if (tasks > 1 && work >= kParallelWork)
    for (long tl = 0; tl < as_long(tasks); ++tl) {
        const auto task = static_cast<std::size_t>(tl);
        const auto& seg = segments[task / g.heads];
        const std::size_t h = task % g.heads;
        double* p = probs + offsets[task];
        for (std::size_t i = 0; i < seg.q_len; ++i) {
            const double* qr = q + (seg.q_offset + i) * g.q_stride + h * g.head_dim;
            const double* mask_row = g.mask != nullptr ? g.mask + i * seg.k_len : nullptr;
            double* pr = p + i * seg.k_len;
            for (std::size_t j = 0; j < seg.k_len; ++j) {
                const double* kr = k + (seg.k_offset + j) * g.k_stride + h * g.head_dim;
                double dot = 0.0;
                for (std::size_t c = 0; c < g.head_dim; ++c) {
                    dot += qr[c] * kr[c];
                }
                double score = dot * g.scale;
                if (mask_row != nullptr) {
                    score += mask_row[j];
                }
                if (g.causal && j > i) {
                    score += kMaskValue;
                }
                pr[j] = score;
            }
            softmax_row(pr, seg.k_len);
            double* orow = out + (seg.q_offset + i) * g.o_stride + h * g.value_dim;
            std::fill(orow, orow + g.value_dim, 0.0);
            for (std::size_t j = 0; j < seg.k_len; ++j) {
                const double w = pr[j];
                const double* vr = v + (seg.k_offset + j) * g.v_stride + h * g.value_dim;
                for (std::size_t c = 0; c < g.value_dim; ++c) {
                    orow[c] += w * vr[c];
                }
            }
        }
    }
}

FDT_MULTIVERSION
void attention_backward(const AttentionGeometry& g, std::span<const AttentionSegment> segments, const double* q,
                        const double* k, const double* v, const double* probs, const double* dout, double* dq,
                        double* dk, double* dv) {
    const auto offsets = attention_prob_offsets(segments, g.heads);
    const std::size_t tasks = segments.size() * g.heads;
    const std::size_t work = offsets.back() * (g.head_dim + g.value_dim);
    std::size_t max_k = 0;
    for (const auto& s : segments) {
        max_k = std::max(max_k, s.k_len);
    }
#pragma omp parallel if (tasks > 1 && work >= kParallelWork)
    {
        std::vector<double> dp(max_k);
#pragma omp for schedule(dynamic)
        for (long tl = 0; tl < as_long(tasks); ++tl) {
            const auto task = static_cast<std::size_t>(tl);
            const auto& seg = segments[task / g.heads];
            const std::size_t h = task % g.heads;
            const double* p = probs + offsets[task];
            for (std::size_t i = 0; i < seg.q_len; ++i) {
                const double* dor = dout + (seg.q_offset + i) * g.o_stride + h * g.value_dim;
                const double* pr = p + i * seg.k_len;
                for (std::size_t j = 0; j < seg.k_len; ++j) {
                    const double* vr = v + (seg.k_offset + j) * g.v_stride + h * g.value_dim;
                    double* dvr = dv + (seg.k_offset + j) * g.v_stride + h * g.value_dim;
                    const double pij = pr[j];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < g.value_dim; ++c) {
                        acc += dor[c] * vr[c];
                        dvr[c] += pij * dor[c];
                    }
                    dp[j] = acc;
                }
                double dot = 0.0;
                for (std::size_t j = 0; j < seg.k_len; ++j) {
                    dot += pr[j] * dp[j];
                }
                const double* qr = q + (seg.q_offset + i) * g.q_stride + h * g.head_dim;
                double* dqr = dq + (seg.q_offset + i) * g.q_stride + h * g.head_dim;
                for (std::size_t j = 0; j < seg.k_len; ++j) {
                    const double ds = pr[j] * (dp[j] - dot) * g.scale;
                    const double* kr = k + (seg.k_offset + j) * g.k_stride + h * g.head_dim;
                    double* dkr = dk + (seg.k_offset + j) * g.k_stride + h * g.head_dim;
                    for (std::size_t c = 0; c < g.head_dim; ++c) {
                        dqr[c] += ds * kr[c];
                        dkr[c] += ds * qr[c];
                    }
                }
            }
        }
    }
}

}  // namespace fdt::kernels

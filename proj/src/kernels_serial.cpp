#include <algorithm>
#include <cmath>

#include "fdt/kernels.hpp"

namespace fdt::kernels {

std::vector<std::size_t> attention_prob_offsets(std::span<const AttentionSegment> segments, std::size_t heads) {
    std::vector<std::size_t> offsets;
    offsets.reserve(segments.size() * heads + 1);
    std::size_t total = 0;
    for (const auto& s : segments) {
        for (std::size_t h = 0; h < heads; ++h) {
            offsets.push_back(total);
            total += s.q_len * s.k_len;
        }
    }
    offsets.push_back(total);
    return offsets;
}

}  // namespace fdt::kernels

namespace fdt::kernels::serial {

void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
            bool accumulate) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double acc = accumulate ? c[i * m + j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[p * m + j];
            }
            c[i * m + j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
               bool accumulate) {
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double acc = accumulate ? c[i * m + j] : 0.0;
            for (std::size_t r = 0; r < n; ++r) {
                acc += a[r * k + i] * b[r * m + j];
            }
            c[i * m + j] = acc;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
               bool accumulate) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double acc = accumulate ? c[i * k + j] : 0.0;
            for (std::size_t p = 0; p < m; ++p) {
                acc += a[i * m + p] * b[j * m + p];
            }
            c[i * k + j] = acc;
        }
    }
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = y + r * cols;
        double mx = xr[0];
        for (std::size_t j = 1; j < cols; ++j) {
            mx = std::max(mx, xr[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::size_t j = 0; j < cols; ++j) {
            yr[j] /= sum;
        }
    }
}

void layer_norm_forward(const double* x, const double* gamma, const double* beta, double* y, double* xhat,
                        double* rstd, std::size_t rows, std::size_t d, double eps) {
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
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
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
}

void layer_norm_backward(const double* dy, const double* xhat, const double* rstd, const double* gamma, double* dx,
                         double* dgamma, double* dbeta, std::size_t rows, std::size_t d) {
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
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
        for (std::size_t j = 0; j < d; ++j) {
            const double g = dyr[j] * gamma[j];
            dx[r * d + j] += rstd[r] * (g - mean_g - hr[j] * mean_gh);
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
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

void attention_forward(const AttentionGeometry& g, std::span<const AttentionSegment> segments, const double* q,
                       const double* k, const double* v, double* out, double* probs) {
    const auto offsets = attention_prob_offsets(segments, g.heads);
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto& seg = segments[s];
        for (std::size_t h = 0; h < g.heads; ++h) {
            double* p = probs + offsets[s * g.heads + h];
            // scores = q k^T * scale + mask
            for (std::size_t i = 0; i < seg.q_len; ++i) {
                for (std::size_t j = 0; j < seg.k_len; ++j) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < g.head_dim; ++c) {
                        dot += q[(seg.q_offset + i) * g.q_stride + h * g.head_dim + c] *
                               k[(seg.k_offset + j) * g.k_stride + h * g.head_dim + c];
                    }
                    double score = dot * g.scale;
                    if (g.mask != nullptr) {
                        score += g.mask[i * seg.k_len + j];
                    }
                    if (g.causal && j > i) {
                        score += kMaskValue;
                    }
                    p[i * seg.k_len + j] = score;
                }
            }
            softmax_rows(p, p, seg.q_len, seg.k_len);
            for (std::size_t i = 0; i < seg.q_len; ++i) {
                for (std::size_t c = 0; c < g.value_dim; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < seg.k_len; ++j) {
                        acc += p[i * seg.k_len + j] * v[(seg.k_offset + j) * g.v_stride + h * g.value_dim + c];
                    }
                    out[(seg.q_offset + i) * g.o_stride + h * g.value_dim + c] = acc;
                }
            }
        }
    }
}

void attention_backward(const AttentionGeometry& g, std::span<const AttentionSegment> segments, const double* q,
                        const double* k, const double* v, const double* probs, const double* dout, double* dq,
                        double* dk, double* dv) {
    const auto offsets = attention_prob_offsets(segments, g.heads);
    std::vector<double> dp;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto& seg = segments[s];
        dp.assign(seg.k_len, 0.0);
        for (std::size_t h = 0; h < g.heads; ++h) {
            const double* p = probs + offsets[s * g.heads + h];
            for (std::size_t i = 0; i < seg.q_len; ++i) {
                const double* dor = dout + (seg.q_offset + i) * g.o_stride + h * g.value_dim;
                const double* pr = p + i * seg.k_len;
                for (std::size_t j = 0; j < seg.k_len; ++j) {
                    const double* vr = v + (seg.k_offset + j) * g.v_stride + h * g.value_dim;
                    double* dvr = dv + (seg.k_offset + j) * g.v_stride + h * g.value_dim;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < g.value_dim; ++c) {
                        acc += dor[c] * vr[c];
                        dvr[c] += pr[j] * dor[c];
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

}  // namespace fdt::kernels::serial

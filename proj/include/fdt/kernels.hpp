#pragma once

// Numeric kernels behind the autograd ops.
//
// Two implementations share one set of signatures: `kernels::serial` is the
// plain reference kept for testing, and `kernels` (top level) is the OpenMP
// version the model runs on. Each output element is reduced in the same fixed
// order in both, so results are bit-identical for any thread count.

#include <cstddef>
#include <span>
#include <vector>

namespace fdt::kernels {

// Additive pre-softmax value for masked attention positions.
inline constexpr double kMaskValue = -1e9;

struct AttentionSegment {
    std::size_t q_offset = 0;
    std::size_t q_len = 0;
    std::size_t k_offset = 0;
    std::size_t k_len = 0;
};

// Row/column geometry of packed attention inputs. Head h of a row occupies
// columns [h*head_dim, (h+1)*head_dim) of q and k, [h*value_dim, ...) of v/out.
// Segments must not share key rows.
struct AttentionGeometry {
    std::size_t heads = 1;
    std::size_t head_dim = 0;
    std::size_t value_dim = 0;
    std::size_t q_stride = 0;
    std::size_t k_stride = 0;
    std::size_t v_stride = 0;
    std::size_t o_stride = 0;
    double scale = 1.0;
    bool causal = false;
    // Optional additive mask [q_len x k_len], shared by every segment.
    const double* mask = nullptr;
};

// Offsets of each (segment, head) probability block; size segments*heads + 1.
std::vector<std::size_t> attention_prob_offsets(std::span<const AttentionSegment> segments, std::size_t heads);

#define FDT_KERNEL_DECLARATIONS                                                                              \
    void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,     \
                bool accumulate);                                                                            \
    void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,  \
                   bool accumulate);                                                                         \
    void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,  \
                   bool accumulate);                                                                         \
    void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);                       \
    void layer_norm_forward(const double* x, const double* gamma, const double* beta, double* y,              \
                            double* xhat, double* rstd, std::size_t rows, std::size_t d, double eps);        \
    void layer_norm_backward(const double* dy, const double* xhat, const double* rstd, const double* gamma,   \
                             double* dx, double* dgamma, double* dbeta, std::size_t rows, std::size_t d);     \
    void attention_forward(const AttentionGeometry& geom, std::span<const AttentionSegment> segments,         \
                           const double* q, const double* k, const double* v, double* out, double* probs);   \
    void attention_backward(const AttentionGeometry& geom, std::span<const AttentionSegment> segments,        \
                            const double* q, const double* k, const double* v, const double* probs,           \
                            const double* dout, double* dq, double* dk, double* dv);

// matmul:    c[n x m] (+)= a[n x k] * b[k x m]
// matmul_tn: c[k x m] (+)= a[n x k]^T * b[n x m]
// matmul_nt: c[n x k] (+)= a[n x m] * b[k x m]^T
// Layer-norm backward and attention backward accumulate into their outputs.
FDT_KERNEL_DECLARATIONS

namespace serial {
FDT_KERNEL_DECLARATIONS
}  // namespace serial

#undef FDT_KERNEL_DECLARATIONS

// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace fdt::kernels

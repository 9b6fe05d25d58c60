#pragma once

// Independent reference computations for the tests. None of these call into
// the library's numeric code.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace oracle {

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t n,
                                  std::size_t k, std::size_t m) {
    std::vector<double> c(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += a[i * k + p] * b[p * m + j];
            }
            c[i * m + j] = s;
        }
    }
    return c;
}

inline std::vector<double> layer_norm_row(const std::vector<double>& x, double eps) {
    double mean = 0.0;
    for (double v : x) {
        mean += v;
    }
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) {
        var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(x.size());
    std::vector<double> y;
    for (double v : x) {
        y.push_back((v - mean) / std::sqrt(var + eps));
    }
    return y;
}

struct ScalarAdam {
    double m = 0.0;
    double v = 0.0;
    int t = 0;

    double step(double w, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        return w - lr * mh / (std::sqrt(vh) + eps);
    }
};

// Algorithm-style server loop: k = t * I, grow by q when k is a threshold
// and the model is still shallower than L.
inline std::vector<std::size_t> depth_trace(std::size_t T, std::size_t c, std::size_t L, std::size_t I) {
    std::vector<std::size_t> K;
    for (std::size_t j = 1; j < c; ++j) {
        K.push_back(j * (T / c) * I);
    }
    std::vector<std::size_t> trace;
    std::size_t l = L / c;
    for (std::size_t t = 1; t <= T; ++t) {
        const std::size_t k = t * I;
        bool hit = false;
        for (auto x : K) {
            hit = hit || x == k;
        }
        if (hit && l < L) {
            l += L / c;
        }
        trace.push_back(l);
    }
    return trace;
}

inline std::uint64_t sum(const std::vector<std::size_t>& xs) {
    std::uint64_t s = 0;
    for (auto x : xs) {
        s += x;
    }
    return s;
}

}  // namespace oracle

// Copyright (c) 2026 the dualdit authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dualdit/tensor.hpp"

namespace dualdit {

struct EigResult {
    std::vector<double> values;  // ascending
    Tensor vectors;              // columns are eigenvectors
};

// Cyclic Jacobi eigendecomposition for symmetric matrices. Intended for the
// small covariance matrices the metrics produce (d <= ~64).
inline EigResult jacobi_eigh(const Tensor& m_in, int max_sweeps = 64) {
    if (m_in.rank() != 2 || m_in.rows() != m_in.cols()) throw DimensionError("jacobi_eigh: square matrix required");
    const std::int64_t n = m_in.rows();
    Tensor a = m_in;
    // symmetrize; callers may hand in matrices that are symmetric only up to noise
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = i + 1; j < n; ++j) {
            const double s = 0.5 * (a.at(i, j) + a.at(j, i));
            a.at(i, j) = s;
            a.at(j, i) = s;
        }
    Tensor v({n, n});
    for (std::int64_t i = 0; i < n; ++i) v.at(i, i) = 1.0;

    double norm = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) norm += a[i] * a[i];
    norm = std::sqrt(norm);
    const double tol = 1e-15 * (norm > 0 ? norm : 1.0);

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
        if (std::sqrt(off) <= tol) break;
        for (std::int64_t p = 0; p < n - 1; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) <= tol * 1e-3) continue;
                const double app = a.at(p, p), aqq = a.at(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::int64_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    EigResult r;
    r.values.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) r.values[static_cast<std::size_t>(i)] = a.at(i, i);
    // sort ascending, permuting eigenvector columns alongside
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(),
              [&](std::int64_t x, std::int64_t y) { return r.values[static_cast<std::size_t>(x)] < r.values[static_cast<std::size_t>(y)]; });
    std::vector<double> sorted_vals(static_cast<std::size_t>(n));
    Tensor sorted_vecs({n, n});
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t src = order[static_cast<std::size_t>(i)];
        sorted_vals[static_cast<std::size_t>(i)] = r.values[static_cast<std::size_t>(src)];
        for (std::int64_t k = 0; k < n; ++k) sorted_vecs.at(k, i) = v.at(k, src);
    }
    r.values = std::move(sorted_vals);
    r.vectors = std::move(sorted_vecs);
    ensure_finite(r.vectors, "jacobi_eigh");
    return r;
}

// Symmetric PSD square root: S with S*S ~= m. Eigenvalues below zero (numerical
// noise) are clamped to zero; the largest clamp magnitude is reported through
// clamp_magnitude so metric reports can document it.
inline Tensor psd_sqrt(const Tensor& m, double* clamp_magnitude = nullptr) {
    if (m.rank() != 2 || m.rows() != m.cols()) throw DimensionError("psd_sqrt: square matrix required");
    const std::int64_t n = m.rows();
    EigResult eig = jacobi_eigh(m);
    double clamp = 0.0;
    std::vector<double> sq(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double lam = eig.values[static_cast<std::size_t>(i)];
        if (lam < 0.0) {
            clamp = std::max(clamp, -lam);
            lam = 0.0;
        }
        sq[static_cast<std::size_t>(i)] = std::sqrt(lam);
    }
    if (clamp_magnitude) *clamp_magnitude = clamp;
    Tensor s({n, n});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = i; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < n; ++k) acc += eig.vectors.at(i, k) * sq[static_cast<std::size_t>(k)] * eig.vectors.at(j, k);
            s.at(i, j) = acc;
            s.at(j, i) = acc;
        }
    ensure_finite(s, "psd_sqrt");
    return s;
}

// plain (tape-free) matrix product for metric-side math
inline Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) throw DimensionError("matmul_plain: incompatible shapes");
    const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t l = 0; l < k; ++l) {
            const double av = a.at(i, l);
            if (av == 0.0) continue;
            for (std::int64_t j = 0; j < n; ++j) c.at(i, j) += av * b.at(l, j);
        }
    return c;
}

inline double frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
    return std::sqrt(s);
}

}  // namespace dualdit

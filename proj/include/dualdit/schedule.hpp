// Copyright (c) 2026 the dualdit authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "dualdit/tensor.hpp"

namespace dualdit {

// Discrete-time noise schedule. Arrays are indexed by t-1 for t in [1, T].
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;  // posterior std, sigma[0] == 0

    double beta_t(int t) const { return beta[check(t)]; }
    double alpha_t(int t) const { return alpha[check(t)]; }
    double alpha_bar_t(int t) const { return alpha_bar[check(t)]; }
    double sigma_t(int t) const { return sigma[check(t)]; }

    // alpha_bar extended with the t=0 convention alpha_bar_0 = 1 (clean data)
    double alpha_bar_or_one(int t) const {
        if (t == 0) return 1.0;
        return alpha_bar[check(t)];
    }

    std::size_t check(int t) const {
        if (t < 1 || t > T) throw ContractError("NoiseSchedule: timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
        return static_cast<std::size_t>(t - 1);
    }
};

inline NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 2e-2) {
    if (T < 2) throw ConfigError("make_schedule: T must be >= 2");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    s.sigma.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const std::size_t i = static_cast<std::size_t>(t - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
        if (t == 1) {
            s.sigma[i] = 0.0;
        } else {
            const double var = s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]);
            s.sigma[i] = std::sqrt(var);
        }
    }
    return s;
}

// q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    ensure_same_shape(x0, eps, "forward_sample");
    const double a = s.alpha_bar_t(t);
    const double ca = std::sqrt(a), ce = std::sqrt(1.0 - a);
    Tensor out(x0.shape());
    for (std::int64_t i = 0; i < x0.size(); ++i) out[i] = ca * x0[i] + ce * eps[i];
    ensure_finite(out, "forward_sample");
    return out;
}

// one ancestral reverse step; z is forced to zero at t = 1
inline Tensor ddpm_step(const Tensor& xt, int t, const Tensor& eps_hat, const NoiseSchedule& s, const Tensor& z) {
    ensure_same_shape(xt, eps_hat, "ddpm_step");
    ensure_same_shape(xt, z, "ddpm_step(z)");
    const double inv_sa = 1.0 / std::sqrt(s.alpha_t(t));
    const double coef = s.beta_t(t) / std::sqrt(1.0 - s.alpha_bar_t(t));
    const double sig = t == 1 ? 0.0 : s.sigma_t(t);
    Tensor out(xt.shape());
    for (std::int64_t i = 0; i < xt.size(); ++i) out[i] = inv_sa * (xt[i] - coef * eps_hat[i]) + sig * z[i];
    ensure_finite(out, "ddpm_step");
    return out;
}

// deterministic (eta = 0) reverse jump t -> t_prev; t_prev may be 0 (clean data).
// t_prev == t is the allowed degenerate step and returns xt unchanged.
inline Tensor ddim_step(const Tensor& xt, int t, int t_prev, const Tensor& eps_hat, const NoiseSchedule& s) {
    ensure_same_shape(xt, eps_hat, "ddim_step");
    if (t_prev > t) throw ContractError("ddim_step: t_prev > t");
    if (t_prev < 0) throw ContractError("ddim_step: t_prev < 0");
    if (t_prev == t) return xt;
    const double at = s.alpha_bar_t(t);
    const double ap = s.alpha_bar_or_one(t_prev);
    const double sat = std::sqrt(at), sap = std::sqrt(ap);
    const double set = std::sqrt(1.0 - at), sep = std::sqrt(1.0 - ap);
    Tensor out(xt.shape());
    for (std::int64_t i = 0; i < xt.size(); ++i) {
        const double x0_hat = (xt[i] - set * eps_hat[i]) / sat;
        out[i] = sap * x0_hat + sep * eps_hat[i];
    }
    ensure_finite(out, "ddim_step");
    return out;
}

// Skip/out scaling of the consistency head. The boundary-satisfying rational
// forms give c_skip(eps_min) = 1 and c_out(eps_min) = 0 exactly.
struct ConsistencyParam {
    std::function<double(int)> c_skip;
    std::function<double(int)> c_out;
    int eps_min = 1;

    static ConsistencyParam boundary(double sigma_data = 0.5, int eps_min = 1) {
        ConsistencyParam p;
        p.eps_min = eps_min;
        const double sd2 = sigma_data * sigma_data;
        p.c_skip = [sd2, eps_min](int t) {
            const double d = static_cast<double>(t - eps_min);
            return sd2 / (d * d + sd2);
        };
        p.c_out = [sd2, eps_min](int t) {
            const double d = static_cast<double>(t - eps_min);
            return d / std::sqrt(d * d + sd2);
        };
        return p;
    }
};

// f(x_t, t) = c_skip(t) * x_t + c_out(t) * model_out
inline Tensor consistency_apply(const Tensor& model_out, const Tensor& xt, int t, const ConsistencyParam& p) {
    ensure_same_shape(model_out, xt, "consistency_apply");
    const double cs = p.c_skip(t), co = p.c_out(t);
    Tensor out(xt.shape());
    for (std::int64_t i = 0; i < xt.size(); ++i) out[i] = cs * xt[i] + co * model_out[i];
    ensure_finite(out, "consistency_apply");
    return out;
}

// k timesteps uniform in alpha_bar-space over [eps_min, T], endpoints included,
// strictly decreasing from T to eps_min. Used by the few-step consistency sampler.
inline std::vector<int> lcm_timesteps(int k, const NoiseSchedule& s, int eps_min = 1) {
    if (k < 1) throw ConfigError("lcm_timesteps: need k >= 1");
    if (eps_min < 1 || eps_min >= s.T) throw ConfigError("lcm_timesteps: eps_min outside schedule");
    const double a_hi = s.alpha_bar_t(s.T), a_lo = s.alpha_bar_t(eps_min);
    std::vector<int> ts;
    for (int i = 0; i < k; ++i) {
        const double target = k == 1 ? a_hi : a_hi + (a_lo - a_hi) * static_cast<double>(i) / static_cast<double>(k - 1);
        // nearest schedule step in alpha_bar
        int best = 1;
        double bd = std::abs(s.alpha_bar_t(1) - target);
        for (int t = 2; t <= s.T; ++t) {
            const double d = std::abs(s.alpha_bar_t(t) - target);
            if (d < bd) {
                bd = d;
                best = t;
            }
        }
        ts.push_back(best);
    }
    ts.front() = s.T;
    if (k > 1) ts.back() = eps_min;
    // dedupe while keeping strict decrease
    std::vector<int> out;
    for (int t : ts)
        if (out.empty() || t < out.back()) out.push_back(t);
    return out;
}

// uniformly spaced deterministic timestep pairs for a k-step reverse pass,
// ending at 0: T -> ... -> 0
inline std::vector<int> ddim_timesteps(int k, int T) {
    if (k < 1 || k > T) throw ConfigError("ddim_timesteps: need 1 <= k <= T");
    std::vector<int> ts;
    for (int i = 0; i < k; ++i) ts.push_back(T - static_cast<int>(static_cast<std::int64_t>(i) * T / k));
    ts.push_back(0);
    return ts;
}

inline void dump_schedule_csv(const NoiseSchedule& s, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("dump_schedule_csv: cannot open " + path);
    f << "t,beta,alpha,alpha_bar,sigma\n";
    char buf[160];
    for (int t = 1; t <= s.T; ++t) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", t, s.beta_t(t), s.alpha_t(t), s.alpha_bar_t(t),
                      s.sigma_t(t));
        f << buf;
    }
}

}  // namespace dualdit

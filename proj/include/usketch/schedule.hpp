#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "usketch/error.hpp"
#include "usketch/tensor.hpp"

namespace usketch {

enum class ScheduleKind { linear, cosine };

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule kind '" + s + "' (expected linear or cosine)");
}

inline const char* to_string(ScheduleKind k) {
    return k == ScheduleKind::linear ? "linear" : "cosine";
}

// Variance schedule with cumulative products. Steps are 1-based: betas[t-1]
// and alpha_bars[t-1] belong to step t; alpha_bar(0) is defined as 1 so the
// final reverse step returns the clean estimate.
template <typename S>
struct NoiseSchedule {
    int T = 0;
    std::vector<S> betas;
    std::vector<S> alpha_bars;

    S alpha_bar(int t) const {
        if (t < 0 || t > T) throw InputError("alpha_bar: step " + std::to_string(t) +
                                             " outside [0, " + std::to_string(T) + "]");
        return t == 0 ? S(1) : alpha_bars[t - 1];
    }
};

// Builds a schedule of the given family. For the cosine family the betas are
// derived from the squared-cosine cumulative-product curve and then clamped
// into [beta_start, beta_end], so the bounds double as a clip range (pass a
// wide range such as (1e-4, 0.999) to keep the cosine shape intact).
template <typename S>
NoiseSchedule<S> make_schedule(int T, ScheduleKind kind, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("make_schedule: T must be >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0)) {
        throw ConfigError("make_schedule: beta_start must be > 0, got " +
                          std::to_string(beta_start));
    }
    if (!(beta_end < 1.0)) {
        throw ConfigError("make_schedule: beta_end must be < 1, got " +
                          std::to_string(beta_end));
    }
    if (beta_start > beta_end) {
        throw ConfigError("make_schedule: beta_start " + std::to_string(beta_start) +
                          " exceeds beta_end " + std::to_string(beta_end));
    }
    std::vector<double> betas(T);
    if (kind == ScheduleKind::linear) {
        for (int i = 0; i < T; ++i) {
            // std::lerp pins both endpoints exactly, keeping every beta
            // inside [beta_start, beta_end].
            betas[i] = T == 1 ? beta_start : std::lerp(beta_start, beta_end, i / (T - 1.0));
        }
    } else {
        const double s = 0.008;
        auto f = [&](double t) {
            const double a = (t / T + s) / (1.0 + s) * (M_PI / 2.0);
            return std::cos(a) * std::cos(a);
        };
        const double f0 = f(0.0);
        double prev = 1.0;
        for (int i = 0; i < T; ++i) {
            const double ab = f(i + 1.0) / f0;
            double b = 1.0 - ab / prev;
            b = std::min(std::max(b, beta_start), beta_end);
            betas[i] = b;
            prev *= 1.0 - b;
        }
    }
    NoiseSchedule<S> sched;
    sched.T = T;
    sched.betas.resize(T);
    sched.alpha_bars.resize(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        prod *= 1.0 - betas[i];
        sched.betas[i] = static_cast<S>(betas[i]);
        sched.alpha_bars[i] = static_cast<S>(prod);
    }
    return sched;
}

// Forward noising: z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename S>
Tensor<S> add_noise(const Tensor<S>& x0, int t, const Tensor<S>& eps,
                    const NoiseSchedule<S>& sched) {
    if (t < 1 || t > sched.T) {
        throw InputError("add_noise: step " + std::to_string(t) + " outside [1, " +
                         std::to_string(sched.T) + "]");
    }
    require_same_shape(x0, eps, "add_noise");
    const double ab = sched.alpha_bar(t);
    const S a = static_cast<S>(std::sqrt(ab));
    const S b = static_cast<S>(std::sqrt(1.0 - ab));
    Tensor<S> z = x0;
    for (size_t i = 0; i < z.v.size(); ++i) z.v[i] = a * x0.v[i] + b * eps.v[i];
    return z;
}

// One deterministic reverse step: recover the clean estimate
// x0_hat = (z_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t) and re-noise it to
// level t-1 with the same predicted noise.
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& z_t, const Tensor<S>& eps_hat, int t,
                    const NoiseSchedule<S>& sched) {
    if (t < 1 || t > sched.T) {
        throw InputError("ddim_step: step " + std::to_string(t) + " outside [1, " +
                         std::to_string(sched.T) + "]");
    }
    require_same_shape(z_t, eps_hat, "ddim_step");
    const double ab_t = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t - 1);
    if (!(ab_t > 0.0)) {
        throw NumericalError("ddim_step: alpha_bar(" + std::to_string(t) + ") is not positive");
    }
    const S inv_sqrt_ab = static_cast<S>(1.0 / std::sqrt(ab_t));
    const S sig_t = static_cast<S>(std::sqrt(1.0 - ab_t));
    const S sqrt_prev = static_cast<S>(std::sqrt(ab_prev));
    const S sig_prev = static_cast<S>(std::sqrt(1.0 - ab_prev));
    Tensor<S> out = z_t;
    for (size_t i = 0; i < out.v.size(); ++i) {
        const S x0_hat = (z_t.v[i] - sig_t * eps_hat.v[i]) * inv_sqrt_ab;
        out.v[i] = sqrt_prev * x0_hat + sig_prev * eps_hat.v[i];
    }
    return out;
}

}  // namespace usketch

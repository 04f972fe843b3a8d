#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "usketch/backbone.hpp"
#include "usketch/features.hpp"
#include "usketch/lep.hpp"
#include "usketch/schedule.hpp"
#include "usketch/training.hpp"

namespace usketch {

struct GuidanceConfig {
    int T = 50;
    int S = 25;                // guided step budget: correct while T - t <= S
    double beta_strength = 1.6;
    double cfg_scale = 8.0;
    uint64_t seed = 0;
    double grad_eps = 1e-8;    // below this gradient norm the correction is skipped
    int p_max = 9;
    bool normalize_t = false;  // feed t/T (not raw t) to the positional encoding
};

// Hard invariants throw; soft range advice comes back as warnings.
inline std::vector<std::string> validate_guidance(const GuidanceConfig& cfg) {
    if (cfg.T < 1) throw ConfigError("guidance: T must be >= 1");
    if (cfg.S < 1 || cfg.S > cfg.T) throw ConfigError("guidance: S must lie in [1, T]");
    if (cfg.beta_strength < 0) throw ConfigError("guidance: beta must be >= 0");
    if (cfg.cfg_scale < 0) throw ConfigError("guidance: cfg-scale must be >= 0");
    if (!(cfg.grad_eps > 0)) throw ConfigError("guidance: grad-eps must be > 0");
    std::vector<std::string> warnings;
    if (cfg.beta_strength > 0 &&
        (cfg.beta_strength < 1.5 || cfg.beta_strength > 1.8)) {
        warnings.push_back("beta " + std::to_string(cfg.beta_strength) +
                           " is outside the recommended [1.5, 1.8]");
    }
    if (cfg.S < 0.45 * cfg.T || cfg.S > 0.55 * cfg.T) {
        warnings.push_back("S " + std::to_string(cfg.S) +
                           " is outside the recommended [0.45T, 0.55T] window");
    }
    return warnings;
}

// Same formula as the training loss; kept as a separate name because the
// two play different roles (objective vs. per-step similarity).
template <typename S>
double sketch_similarity(const Tensor<S>& pred, const Tensor<S>& target) {
    return edge_loss(pred, target);
}

// Correction scale: alpha = beta * ||z_t - z_prev|| / ||grad||, so the
// applied correction has norm beta * ||z_t - z_prev||. Returns nothing when
// the gradient is too small to normalize against (the skip signal).
template <typename S>
std::optional<double> guidance_strength(const Tensor<S>& z_t, const Tensor<S>& z_prev,
                                        const Tensor<S>& grad, double beta_strength,
                                        double grad_eps = 1e-8) {
    require_same_shape(z_t, z_prev, "guidance_strength");
    require_same_shape(z_t, grad, "guidance_strength");
    const double gnorm = l2_norm(grad);
    if (gnorm < grad_eps) return std::nullopt;
    if (beta_strength == 0.0) return 0.0;
    double diff = 0.0;
    for (size_t i = 0; i < z_t.v.size(); ++i) {
        const double d = static_cast<double>(z_t.v[i]) - static_cast<double>(z_prev.v[i]);
        diff += d * d;
    }
    return beta_strength * std::sqrt(diff) / gnorm;
}

struct StepDiagnostics {
    int t = 0;
    bool guided_window = false;  // T - t <= S
    bool applied = false;
    double loss = std::nan("");  // similarity before the correction
    double alpha = 0.0;
    double grad_norm = std::nan("");
    std::string skip_reason;     // "", "window", "guidance_off", "grad_below_eps"
    double wall_ms = 0.0;
};

template <typename S>
struct SampleResult {
    Tensor<S> image;  // decoded z_0
    Tensor<S> z0;
    std::vector<StepDiagnostics> steps;
    std::vector<std::string> warnings;
};

// Exact gradient of the sketch similarity with respect to the current
// latent, by reverse-mode differentiation through the backbone taps, the
// feature assembly, and the edge predictor. Also returns the conditioned
// noise prediction from the same forward pass.
template <typename S>
struct GuidanceEval {
    double loss = 0.0;
    double grad_norm = 0.0;
    Tensor<S> grad;
    Tensor<S> eps_cond;
};

template <typename S>
GuidanceEval<S> guidance_gradient(ToyBackbone<S>& bb, EdgePredictor<S>& lep,
                                  const TapSet& taps, const Tensor<S>& z_t, int t,
                                  int label_idx, const Tensor<S>& sketch_latent, int p_max,
                                  bool normalize_t = false, int total_steps = 0) {
    auto z_leaf = make_leaf<S>(z_t, true);
    auto fwd = bb.forward(z_leaf, t, label_idx, taps);
    auto stack = assemble_feature_stack<S>(fwd.taps, taps.sites, t, p_max, z_t.h, z_t.w,
                                           normalize_t, total_steps);
    auto pred = lep.forward(stack.data, false);
    auto loss = sum_squares(sub(pred, make_const<S>(sketch_latent)));
    backward(loss);

    GuidanceEval<S> ev;
    ev.loss = static_cast<double>(loss->val.v[0]);
    ev.eps_cond = fwd.eps_hat->val;
    ev.grad = z_leaf->has_grad() ? z_leaf->grad : zeros_like(z_t);
    ev.grad_norm = l2_norm(ev.grad);
    return ev;
}

namespace detail {

// Shared reverse-diffusion loop. `lep == nullptr` is the statically
// unguided path; the guided path with beta = 0 never executes any guidance
// arithmetic either, so the two produce bit-identical latents.
template <typename S>
SampleResult<S> reverse_diffusion(ToyBackbone<S>& bb, const LatentCodec<S>& codec,
                                  EdgePredictor<S>* lep, const Tensor<S>* sketch_latent,
                                  const std::string& y, const GuidanceConfig& cfg,
                                  const NoiseSchedule<S>& sched, const TapSet& taps) {
    SampleResult<S> result;
    result.warnings = validate_guidance(cfg);
    if (sched.T != cfg.T) {
        throw ConfigError("guidance T " + std::to_string(cfg.T) +
                          " does not match the schedule's " + std::to_string(sched.T));
    }
    const auto& bc = bb.config();
    if (codec.latent_channels != bc.channels) {
        throw IncompatibilityError("codec latent channels do not match the backbone");
    }
    const bool guidance_possible = lep != nullptr && cfg.beta_strength > 0.0;
    if (guidance_possible) {
        require_layout_match(*lep, bb, taps, cfg.p_max);
        if (sketch_latent == nullptr) throw InputError("guided sampling requires a sketch");
        if (sketch_latent->c != codec.latent_channels || sketch_latent->h != bc.image_size ||
            sketch_latent->w != bc.image_size) {
            throw InputError("sketch latent shape " + sketch_latent->shape_str() +
                             " does not match the backbone latent [" +
                             std::to_string(codec.latent_channels) + "," +
                             std::to_string(bc.image_size) + "," +
                             std::to_string(bc.image_size) + "]");
        }
        lep->set_frozen(true);
    }
    bb.set_frozen(true);
    const int label = bb.label_index(y);
    const TapSet no_taps{};

    Rng rng = Rng(cfg.seed).substream("noise_init");
    Tensor<S> z(bc.channels, bc.image_size, bc.image_size);
    for (auto& v : z.v) v = static_cast<S>(rng.normal());

    for (int t = cfg.T; t >= 1; --t) {
        const auto t_start = std::chrono::steady_clock::now();
        StepDiagnostics rec;
        rec.t = t;
        rec.guided_window = cfg.T - t <= cfg.S;

        Tensor<S> eps_cond;
        std::optional<GuidanceEval<S>> ev;
        if (guidance_possible && rec.guided_window) {
            ev = guidance_gradient(bb, *lep, taps, z, t, label, *sketch_latent, cfg.p_max,
                                   cfg.normalize_t, cfg.T);
            eps_cond = std::move(ev->eps_cond);
            rec.loss = ev->loss;
            rec.grad_norm = ev->grad_norm;
        } else {
            eps_cond = bb.forward(make_const<S>(z), t, label, no_taps).eps_hat->val;
            rec.skip_reason = rec.guided_window ? "guidance_off" : "window";
        }
        Tensor<S> eps_hat;
        if (cfg.cfg_scale == 1.0) {
            eps_hat = std::move(eps_cond);
        } else {
            const Tensor<S> eps_uncond =
                bb.forward(make_const<S>(z), t, 0, no_taps).eps_hat->val;
            eps_hat = cfg_mix(eps_cond, eps_uncond, static_cast<S>(cfg.cfg_scale));
        }
        Tensor<S> z_prev = ddim_step(z, eps_hat, t, sched);

        if (ev) {
            const auto alpha =
                guidance_strength(z, z_prev, ev->grad, cfg.beta_strength, cfg.grad_eps);
            if (alpha) {
                const S a = static_cast<S>(*alpha);
                for (size_t i = 0; i < z_prev.v.size(); ++i) z_prev.v[i] -= a * ev->grad.v[i];
                rec.alpha = *alpha;
                rec.applied = true;
            } else {
                rec.skip_reason = "grad_below_eps";
            }
        }
        if (!all_finite(z_prev)) {
            throw NumericalError("non-finite latent at step " + std::to_string(t));
        }
        z = std::move(z_prev);
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t_start)
                          .count();
        result.steps.push_back(std::move(rec));
    }
    result.z0 = z;
    result.image = codec.decode(z);
    return result;
}

}  // namespace detail

// Algorithm: denoise from pure noise for T steps; during the first S steps
// (while T - t <= S) pull z_{t-1} along the negative similarity gradient,
// scaled so the correction norm is beta times the DDIM update norm.
template <typename S>
SampleResult<S> guided_sample(ToyBackbone<S>& bb, const LatentCodec<S>& codec,
                              EdgePredictor<S>& lep, const Tensor<S>& sketch_latent,
                              const std::string& y, const GuidanceConfig& cfg,
                              const NoiseSchedule<S>& sched, const TapSet& taps) {
    return detail::reverse_diffusion(bb, codec, &lep, &sketch_latent, y, cfg, sched, taps);
}

template <typename S>
SampleResult<S> unguided_sample(ToyBackbone<S>& bb, const LatentCodec<S>& codec,
                                const std::string& y, const GuidanceConfig& cfg,
                                const NoiseSchedule<S>& sched) {
    return detail::reverse_diffusion<S>(bb, codec, nullptr, nullptr, y, cfg, sched, TapSet{});
}

}  // namespace usketch

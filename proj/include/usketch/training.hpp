#pragma once

#include <string>
#include <vector>

#include "usketch/backbone.hpp"
#include "usketch/features.hpp"
#include "usketch/lep.hpp"
#include "usketch/schedule.hpp"
#include "usketch/triplet.hpp"

namespace usketch {

// Sum over pixels of the squared channel-vector difference — equivalently
// the sum of squared elementwise differences (accumulated in double).
template <typename S>
double edge_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    require_same_shape(pred, target, "edge_loss");
    double acc = 0.0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        const double d = static_cast<double>(pred.v[i]) - static_cast<double>(target.v[i]);
        acc += d * d;
    }
    return acc;
}

struct LepTrainConfig {
    int epochs = 10;
    int batch_size = 16;
    double lr = 1e-4;
    uint64_t seed = 0;
    int p_max = 9;
    bool normalize_t = false;  // feed t/T (not raw t) to the positional encoding
};

// Raises unless the model was built for exactly the feature layout these
// taps produce.
template <typename S>
void require_layout_match(const EdgePredictor<S>& model, const ToyBackbone<S>& bb,
                          const TapSet& taps, int p_max) {
    const auto expected = feature_layout(taps.sites, bb.tap_channels(taps), p_max);
    if (model.expected_layout() != expected) {
        throw IncompatibilityError(
            "edge predictor was trained for a different feature layout than these backbone "
            "taps produce (" +
            std::to_string(model.in_channels()) + " channels expected, " +
            std::to_string(feature_channel_count(bb.tap_channels(taps), p_max)) + " produced)");
    }
}

/// Self-supervised edge-predictor training: for each triplet, encode image
// and edge map, noise the image to a uniformly drawn level, run the frozen
// backbone to harvest tap activations, assemble the feature stack, and
// regress the encoded edge map under the summed squared-error loss.
//
// Each sample's noise level and noise draw are fixed functions of (seed,
// sample index), not of the epoch, so a zero learning rate yields an exactly
// flat loss history; only the visit order is reshuffled per epoch.
template <typename S>
std::vector<double> train_lep(EdgePredictor<S>& model, ToyBackbone<S>& bb,
                              const LatentCodec<S>& codec, const std::vector<Triplet<S>>& data,
                              const NoiseSchedule<S>& sched, const TapSet& taps,
                              const LepTrainConfig& cfg) {
    if (data.empty()) throw InputError("train_lep: empty dataset");
    require_layout_match(model, bb, taps, cfg.p_max);

    bb.set_frozen(true);
    model.set_frozen(false);

    AdamConfig<S> acfg;
    acfg.lr = static_cast<S>(cfg.lr);
    Adam<S> opt(model.params(), acfg);
    Rng root(cfg.seed);

    struct Sample {
        Tensor<S> z_t;
        Tensor<S> target;
        int t;
        int label;
    };
    // Precompute the per-sample noising once (see note above).
    std::vector<Sample> samples;
    samples.reserve(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        Rng rng = root.substream("lep_noise", i);
        Sample s;
        const Tensor<S> x_enc = codec.encode(data[i].x);
        s.target = codec.encode(data[i].e);
        s.t = rng.uniform_int(1, sched.T);
        Tensor<S> eps(x_enc.c, x_enc.h, x_enc.w);
        for (auto& e : eps.v) e = static_cast<S>(rng.normal());
        s.z_t = add_noise(x_enc, s.t, eps, sched);
        s.label = bb.label_index(data[i].y);
        samples.push_back(std::move(s));
    }

    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> history;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng = root.substream("lep_order", static_cast<size_t>(epoch));
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        size_t in_batch = 0;
        for (size_t k = 0; k < order.size(); ++k) {
            const Sample& s = samples[order[k]];
            auto fwd = bb.forward(make_const<S>(s.z_t), s.t, s.label, taps);
            auto stack = assemble_feature_stack<S>(fwd.taps, taps.sites, s.t, cfg.p_max,
                                                   s.z_t.h, s.z_t.w, cfg.normalize_t, sched.T);
            auto pred = model.forward(stack.data, true);
            auto loss = sum_squares(sub(pred, make_const<S>(s.target)));
            epoch_loss += loss->val.v[0];
            backward(loss);
            if (++in_batch == static_cast<size_t>(cfg.batch_size) || k + 1 == order.size()) {
                opt.step(static_cast<S>(1.0 / in_batch));
                in_batch = 0;
            }
        }
        history.push_back(epoch_loss / samples.size());
    }
    return history;
}

}  // namespace usketch

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "usketch/autograd.hpp"
#include "usketch/nn.hpp"

namespace usketch {

// One contiguous channel range of a feature stack and where it came from:
// a named tap, the raw noise-level channel, or the positional encoding.
struct ChannelRange {
    std::string source;
    int start = 0;
    int count = 0;

    bool operator==(const ChannelRange&) const = default;
};

template <typename S>
struct FeatureStack {
    Var<S> data;                       // [C_F, H, W]
    std::vector<ChannelRange> layout;  // covers [0, C_F) without gaps

    int channels() const { return data->val.c; }
};

// sin(2*pi * t / 2^i) for i = 0..p_max. The step index enters raw, so for
// integer t the i=0 entry is always sin(2*pi*t) = 0.
inline std::vector<double> positional_encoding(double t, int p_max) {
    if (t < 0) throw InputError("positional_encoding: t must be >= 0");
    if (p_max < 0) throw InputError("positional_encoding: p_max must be >= 0");
    std::vector<double> enc(p_max + 1);
    for (int i = 0; i <= p_max; ++i) {
        enc[i] = std::sin(2.0 * M_PI * t * std::pow(2.0, -i));
    }
    return enc;
}

// Per-channel bilinear resize to the latent dims (exact pass-through when
// the shape already matches).
template <typename S>
Var<S> resize_activation(const Var<S>& a, int target_h, int target_w) {
    return resize_bilinear(a, target_h, target_w);
}

// Concatenate [resized taps..., t-channel, positional-encoding channels]
// along the channel axis. The t/p channels are constants: gradients flow
// only into the activations. `tap_names` labels the layout descriptor and
// must match the activation list. With normalize_t the encoding sees
// t / total_steps instead of the raw index (the t-channel stays raw either
// way); off by default since raw t is the literal formula.
template <typename S>
FeatureStack<S> assemble_feature_stack(const std::vector<Var<S>>& activations,
                                       const std::vector<std::string>& tap_names, double t,
                                       int p_max, int target_h, int target_w,
                                       bool normalize_t = false, int total_steps = 0) {
    if (activations.empty()) throw InputError("assemble_feature_stack: empty activation list");
    if (tap_names.size() != activations.size()) {
        throw InputError("assemble_feature_stack: " + std::to_string(tap_names.size()) +
                         " tap names for " + std::to_string(activations.size()) +
                         " activations");
    }
    FeatureStack<S> stack;
    std::vector<Var<S>> parts;
    parts.reserve(activations.size() + 2);
    int cursor = 0;
    for (size_t i = 0; i < activations.size(); ++i) {
        auto resized = resize_activation(activations[i], target_h, target_w);
        stack.layout.push_back({tap_names[i], cursor, resized->val.c});
        cursor += resized->val.c;
        parts.push_back(std::move(resized));
    }
    parts.push_back(make_const<S>(Tensor<S>(1, target_h, target_w, static_cast<S>(t))));
    stack.layout.push_back({"t", cursor, 1});
    ++cursor;

    double t_enc = t;
    if (normalize_t) {
        if (total_steps < 1) {
            throw ConfigError("assemble_feature_stack: normalize_t needs total_steps >= 1");
        }
        t_enc = t / total_steps;
    }
    const auto enc = positional_encoding(t_enc, p_max);
    Tensor<S> penc(static_cast<int>(enc.size()), target_h, target_w);
    for (size_t i = 0; i < enc.size(); ++i) {
        S* p = penc.plane(static_cast<int>(i));
        const S v = static_cast<S>(enc[i]);
        for (size_t j = 0; j < penc.plane_size(); ++j) p[j] = v;
    }
    parts.push_back(make_const<S>(std::move(penc)));
    stack.layout.push_back({"positional", cursor, static_cast<int>(enc.size())});

    stack.data = concat_channels(parts);
    return stack;
}

// Channel count implied by a tap-channel list: sum of taps + the raw
// t-channel + (p_max + 1) encoding channels.
inline int feature_channel_count(const std::vector<int>& tap_channels, int p_max) {
    int c = 1 + (p_max + 1);
    for (int t : tap_channels) c += t;
    return c;
}

// The layout assemble_feature_stack would produce for these taps, computed
// without running a forward pass (for checkpoint validation).
inline std::vector<ChannelRange> feature_layout(const std::vector<std::string>& tap_names,
                                                const std::vector<int>& tap_channels,
                                                int p_max) {
    if (tap_names.size() != tap_channels.size()) {
        throw InputError("feature_layout: name/channel list size mismatch");
    }
    std::vector<ChannelRange> layout;
    int cursor = 0;
    for (size_t i = 0; i < tap_names.size(); ++i) {
        layout.push_back({tap_names[i], cursor, tap_channels[i]});
        cursor += tap_channels[i];
    }
    layout.push_back({"t", cursor, 1});
    layout.push_back({"positional", cursor + 1, p_max + 1});
    return layout;
}

}  // namespace usketch

#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usketch/autograd.hpp"
#include "usketch/checkpoint.hpp"
#include "usketch/features.hpp"
#include "usketch/nn.hpp"
#include "usketch/rng.hpp"

namespace usketch {

namespace detail {

inline nlohmann::json layout_to_json(const std::vector<ChannelRange>& layout) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : layout) {
        j.push_back({{"source", r.source}, {"start", r.start}, {"count", r.count}});
    }
    return j;
}

inline std::vector<ChannelRange> layout_from_json(const nlohmann::json& j) {
    std::vector<ChannelRange> layout;
    for (const auto& e : j) {
        layout.push_back({e.at("source").get<std::string>(), e.at("start").get<int>(),
                          e.at("count").get<int>()});
    }
    return layout;
}

}  // namespace detail

// Common face of the two edge predictors: FeatureStack -> edge map in
// latent shape. The expected input layout travels with the model so a
// checkpoint can be validated against a backbone before any work happens.
template <typename S>
class EdgePredictor {
public:
    virtual ~EdgePredictor() = default;
    virtual std::string arch() const = 0;
    virtual Var<S> forward(const Var<S>& stack, bool training) = 0;
    virtual ParamRegistry<S>& params() = 0;
    virtual const ParamRegistry<S>& params() const = 0;

    int in_channels() const { return in_channels_; }
    int out_channels() const { return out_channels_; }
    const std::vector<ChannelRange>& expected_layout() const { return layout_; }
    void set_frozen(bool frozen) { params().set_trainable(!frozen); }

    Checkpoint to_checkpoint(nlohmann::json provenance) const {
        Checkpoint ck;
        ck.meta = {{"kind", "lep"},
                   {"arch", arch()},
                   {"in_channels", in_channels_},
                   {"out_channels", out_channels_},
                   {"layout", detail::layout_to_json(layout_)},
                   {"provenance", std::move(provenance)}};
        describe(ck.meta);
        for (const auto& [name, p] : params().params) {
            ck.blocks.emplace_back(name, tensor_cast<float>(p->val));
        }
        for (const auto& [name, buf] : params().buffers) {
            ck.blocks.emplace_back(name, tensor_cast<float>(*buf));
        }
        return ck;
    }

protected:
    virtual void describe(nlohmann::json& meta) const = 0;

    void restore_blocks(const Checkpoint& ck) {
        for (auto& [name, p] : params().params) {
            const Tensor<float>& src = ck.block(name);
            if (src.c != p->val.c || src.h != p->val.h || src.w != p->val.w) {
                throw IncompatibilityError("checkpoint block '" + name + "' has shape " +
                                           src.shape_str() + ", expected " + p->val.shape_str());
            }
            p->val = tensor_cast<S>(src);
        }
        for (auto& [name, buf] : params().buffers) {
            *buf = tensor_cast<S>(ck.block(name));
        }
    }

    int in_channels_ = 0;
    int out_channels_ = 0;
    std::vector<ChannelRange> layout_;
};

// Convolutional predictor: 4 encoder levels (two 3x3 convolutions +
// rectifier each, then 2x2 max-pool) at widths 64/128/256/512, a
// 1024-wide bottleneck, and a mirrored decoder with 2x2 transposed-conv
// upsampling and skip concatenation. No normalization layers anywhere;
// the output head is a single convolution with no activation.
template <typename S>
class UNetLEP final : public EdgePredictor<S> {
public:
    UNetLEP(int in_channels, int out_channels, std::vector<ChannelRange> layout,
            uint64_t init_seed, std::vector<int> widths = {64, 128, 256, 512},
            int bottleneck = 1024)
        : widths_(std::move(widths)), bottleneck_(bottleneck) {
        this->in_channels_ = in_channels;
        this->out_channels_ = out_channels;
        this->layout_ = std::move(layout);
        if (widths_.empty()) throw ConfigError("unet lep: widths must be nonempty");
        Rng rng = Rng(init_seed).substream("lep_init");
        int cin = in_channels;
        for (size_t i = 0; i < widths_.size(); ++i) {
            enc_.push_back(make_pair_block("enc" + std::to_string(i + 1), cin, widths_[i], rng));
            cin = widths_[i];
        }
        mid_ = make_pair_block("mid", cin, bottleneck_, rng);
        int up_in = bottleneck_;
        dec_.resize(widths_.size());
        for (int i = static_cast<int>(widths_.size()) - 1; i >= 0; --i) {
            const int width = widths_[i];
            const std::string name = "dec" + std::to_string(i + 1);
            dec_[i].up_w =
                reg_.add_param(name + ".up.w", he_uniform<S>(up_in, width, 4, 4 * up_in, rng));
            dec_[i].up_b = reg_.add_param(name + ".up.b", Tensor<S>(width, 1, 1));
            dec_[i].blk = make_pair_block(name, 2 * width, width, rng);
            up_in = width;
        }
        head_w_ = reg_.add_param(
            "head.w", he_uniform<S>(out_channels, widths_[0], 9, 9 * widths_[0], rng));
        head_b_ = reg_.add_param("head.b", Tensor<S>(out_channels, 1, 1));
    }

    std::string arch() const override { return "unet"; }
    ParamRegistry<S>& params() override { return reg_; }
    const ParamRegistry<S>& params() const override { return reg_; }
    int required_multiple() const { return 1 << static_cast<int>(widths_.size()); }

    Var<S> forward(const Var<S>& stack, bool) override {
        if (stack->val.c != this->in_channels_) {
            throw IncompatibilityError("unet lep expects " + std::to_string(this->in_channels_) +
                                       " input channels, got " + std::to_string(stack->val.c));
        }
        const int mult = required_multiple();
        if (stack->val.h % mult != 0 || stack->val.w % mult != 0) {
            throw InputError("unet lep: spatial dims must be divisible by " +
                             std::to_string(mult) + ", got " + stack->val.shape_str());
        }
        Var<S> x = stack;
        std::vector<Var<S>> skips;
        for (auto& blk : enc_) {
            x = pair_block(x, blk);
            skips.push_back(x);
            x = maxpool2x2(x);
        }
        x = pair_block(x, mid_);
        for (int i = static_cast<int>(widths_.size()) - 1; i >= 0; --i) {
            x = deconv2x2(x, dec_[i].up_w, dec_[i].up_b);
            x = concat_channels<S>({x, skips[i]});
            x = pair_block(x, dec_[i].blk);
        }
        return conv3x3(x, head_w_, head_b_);
    }

    static std::unique_ptr<UNetLEP> load(const Checkpoint& ck) {
        auto model = std::make_unique<UNetLEP>(
            ck.meta.at("in_channels").get<int>(), ck.meta.at("out_channels").get<int>(),
            detail::layout_from_json(ck.meta.at("layout")), 0,
            ck.meta.at("widths").get<std::vector<int>>(), ck.meta.at("bottleneck").get<int>());
        model->restore_blocks(ck);
        model->set_frozen(true);
        return model;
    }

protected:
    void describe(nlohmann::json& meta) const override {
        meta["widths"] = widths_;
        meta["bottleneck"] = bottleneck_;
    }

private:
    struct PairBlock {
        Var<S> a_w, a_b, b_w, b_b;
    };
    struct DecLevel {
        Var<S> up_w, up_b;
        PairBlock blk;
    };

    PairBlock make_pair_block(const std::string& name, int cin, int width, Rng& rng) {
        PairBlock blk;
        blk.a_w = reg_.add_param(name + ".convA.w", he_uniform<S>(width, cin, 9, 9 * cin, rng));
        blk.a_b = reg_.add_param(name + ".convA.b", Tensor<S>(width, 1, 1));
        blk.b_w = reg_.add_param(name + ".convB.w", he_uniform<S>(width, width, 9, 9 * width, rng));
        blk.b_b = reg_.add_param(name + ".convB.b", Tensor<S>(width, 1, 1));
        return blk;
    }
    Var<S> pair_block(const Var<S>& x, const PairBlock& blk) {
        auto h = relu(conv3x3(x, blk.a_w, blk.a_b));
        return relu(conv3x3(h, blk.b_w, blk.b_b));
    }

    std::vector<int> widths_;
    int bottleneck_;
    ParamRegistry<S> reg_;
    std::vector<PairBlock> enc_;
    PairBlock mid_;
    std::vector<DecLevel> dec_;
    Var<S> head_w_, head_b_;
};

// Per-pixel baseline: a fully connected stack applied independently at
// every pixel (1x1 convolutions), hidden widths 512/256/128/64, rectifier
// followed by batch normalization after each hidden layer. In evaluation
// mode the normalization uses frozen running statistics, so the output at
// a pixel depends only on that pixel's input channels.
template <typename S>
class MLPLEP final : public EdgePredictor<S> {
public:
    MLPLEP(int in_channels, int out_channels, std::vector<ChannelRange> layout,
           uint64_t init_seed, std::vector<int> hidden = {512, 256, 128, 64})
        : hidden_(std::move(hidden)) {
        this->in_channels_ = in_channels;
        this->out_channels_ = out_channels;
        this->layout_ = std::move(layout);
        if (hidden_.empty()) throw ConfigError("mlp lep: hidden widths must be nonempty");
        Rng rng = Rng(init_seed).substream("lep_init");
        int cin = in_channels;
        layers_.resize(hidden_.size());
        for (size_t i = 0; i < hidden_.size(); ++i) {
            const int width = hidden_[i];
            const std::string name = "fc" + std::to_string(i + 1);
            auto& L = layers_[i];
            L.w = reg_.add_param(name + ".w", he_uniform<S>(width, cin, 1, cin, rng));
            L.b = reg_.add_param(name + ".b", Tensor<S>(width, 1, 1));
            L.gamma = reg_.add_param(name + ".bn.gamma", Tensor<S>(width, 1, 1, S(1)));
            L.beta = reg_.add_param(name + ".bn.beta", Tensor<S>(width, 1, 1));
            L.running_mean = Tensor<S>(width, 1, 1);
            L.running_var = Tensor<S>(width, 1, 1, S(1));
            reg_.add_buffer(name + ".bn.running_mean", &L.running_mean);
            reg_.add_buffer(name + ".bn.running_var", &L.running_var);
            cin = width;
        }
        head_w_ = reg_.add_param("head.w", he_uniform<S>(out_channels, cin, 1, cin, rng));
        head_b_ = reg_.add_param("head.b", Tensor<S>(out_channels, 1, 1));
    }

    std::string arch() const override { return "mlp"; }
    ParamRegistry<S>& params() override { return reg_; }
    const ParamRegistry<S>& params() const override { return reg_; }

    Var<S> forward(const Var<S>& stack, bool training) override {
        if (stack->val.c != this->in_channels_) {
            throw IncompatibilityError("mlp lep expects " + std::to_string(this->in_channels_) +
                                       " input channels, got " + std::to_string(stack->val.c));
        }
        Var<S> x = stack;
        for (auto& L : layers_) {
            x = relu(conv1x1(x, L.w, L.b));
            x = training ? batchnorm_train(x, L.gamma, L.beta, bn_eps_, bn_momentum_,
                                           L.running_mean, L.running_var)
                         : batchnorm_eval(x, L.gamma, L.beta, bn_eps_, L.running_mean,
                                          L.running_var);
        }
        return conv1x1(x, head_w_, head_b_);
    }

    static std::unique_ptr<MLPLEP> load(const Checkpoint& ck) {
        auto model = std::make_unique<MLPLEP>(
            ck.meta.at("in_channels").get<int>(), ck.meta.at("out_channels").get<int>(),
            detail::layout_from_json(ck.meta.at("layout")), 0,
            ck.meta.at("hidden").get<std::vector<int>>());
        model->restore_blocks(ck);
        model->set_frozen(true);
        return model;
    }

protected:
    void describe(nlohmann::json& meta) const override { meta["hidden"] = hidden_; }

private:
    struct Layer {
        Var<S> w, b, gamma, beta;
        Tensor<S> running_mean, running_var;
    };

    std::vector<int> hidden_;
    ParamRegistry<S> reg_;
    std::vector<Layer> layers_;
    Var<S> head_w_, head_b_;
    S bn_eps_ = static_cast<S>(1e-5);
    S bn_momentum_ = static_cast<S>(0.1);
};

// Loads either predictor from a checkpoint, dispatching on the recorded
// architecture.
template <typename S>
std::unique_ptr<EdgePredictor<S>> load_edge_predictor(const Checkpoint& ck) {
    if (ck.meta.value("kind", "") != "lep") {
        throw IncompatibilityError("checkpoint is not an edge predictor (kind='" +
                                   ck.meta.value("kind", "") + "')");
    }
    const std::string arch = ck.meta.at("arch").get<std::string>();
    if (arch == "unet") return UNetLEP<S>::load(ck);
    if (arch == "mlp") return MLPLEP<S>::load(ck);
    throw IncompatibilityError("unknown edge-predictor architecture '" + arch + "'");
}

// Evaluation-mode prediction: FeatureStack -> edge map in latent shape.
template <typename S>
Tensor<S> predict_edges(EdgePredictor<S>& model, const FeatureStack<S>& stack) {
    return model.forward(stack.data, false)->val;
}

struct LocalityReport {
    bool local = false;
    double max_delta = 0.0;
    int probes = 0;
};

// Perturbs the stack at pixels other than (i, j) and reports whether the
// output at (i, j) moves. A per-pixel model must report local; a
// convolutional model on generic inputs must not (for probes within its
// receptive field).
template <typename S>
LocalityReport locality_probe(EdgePredictor<S>& model, const FeatureStack<S>& stack, int i,
                              int j, double magnitude = 1.0, int probes = 8,
                              uint64_t seed = 1234) {
    const Tensor<S>& base_in = stack.data->val;
    if (i < 0 || i >= base_in.h || j < 0 || j >= base_in.w) {
        throw InputError("locality_probe: pixel out of range");
    }
    const Tensor<S> base_out = model.forward(make_const<S>(base_in), false)->val;
    Rng rng = Rng(seed).substream("locality_probe");
    LocalityReport report;
    report.probes = probes;
    for (int p = 0; p < probes; ++p) {
        int pi = i, pj = j;
        while (pi == i && pj == j) {
            pi = rng.uniform_int(0, base_in.h - 1);
            pj = rng.uniform_int(0, base_in.w - 1);
        }
        Tensor<S> bumped = base_in;
        for (int c = 0; c < bumped.c; ++c) bumped.at(c, pi, pj) += static_cast<S>(magnitude);
        const Tensor<S> out = model.forward(make_const<S>(std::move(bumped)), false)->val;
        for (int c = 0; c < out.c; ++c) {
            const double d = std::abs(static_cast<double>(out.at(c, i, j)) -
                                      static_cast<double>(base_out.at(c, i, j)));
            report.max_delta = std::max(report.max_delta, d);
        }
    }
    report.local = report.max_delta == 0.0;
    return report;
}

}  // namespace usketch

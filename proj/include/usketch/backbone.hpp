#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usketch/autograd.hpp"
#include "usketch/checkpoint.hpp"
#include "usketch/nn.hpp"
#include "usketch/rng.hpp"
#include "usketch/schedule.hpp"
#include "usketch/triplet.hpp"

namespace usketch {

// Encoder E / decoder D pair around the denoiser's working space. The toy
// backbone works directly in pixel space, so the shipped codec is an exact
// identity; adapters for latent-space backbones plug in here (the latent
// channel count is a codec property, not a constant).
template <typename S>
struct LatentCodec {
    std::string name = "identity";
    int latent_channels = 1;

    Tensor<S> encode(const Tensor<S>& x) const { return x; }
    Tensor<S> decode(const Tensor<S>& z) const { return z; }

    nlohmann::json spec() const {
        return {{"name", name}, {"latent_channels", latent_channels}};
    }
    static LatentCodec from_spec(const nlohmann::json& j) {
        LatentCodec c;
        c.name = j.at("name").get<std::string>();
        if (c.name != "identity") {
            throw IncompatibilityError("unknown codec '" + c.name + "'");
        }
        c.latent_channels = j.at("latent_channels").get<int>();
        return c;
    }
};

// Ordered, distinct capture sites.
struct TapSet {
    std::vector<std::string> sites;

    size_t size() const { return sites.size(); }
    bool operator==(const TapSet&) const = default;
};

// Capture points for a full-scale latent-diffusion adapter (the published
// layout: encoder blocks 2/4/8, all three middle blocks, decoder blocks
// 2/4/8, over a 4-channel latent space). Recorded as configuration data;
// the toy backbone uses its own per-level registry below.
inline nlohmann::json sd_adapter_tap_layout() {
    return {{"latent_channels", 4},
            {"input_blocks", {2, 4, 8}},
            {"middle_block", {0, 1, 2}},
            {"output_blocks", {2, 4, 8}}};
}

struct BackboneConfig {
    int image_size = 32;
    int channels = 1;
    std::vector<int> widths = {8, 16, 32, 32};  // encoder level widths
    int bottleneck = 32;
    int embed_dim = 32;
    std::vector<std::string> labels = {"circle", "rectangle", "triangle"};

    int levels() const { return static_cast<int>(widths.size()) + 1; }  // + bottleneck
};

// Conditional U-Net denoiser eps_theta(z_t | t, y) for single-channel
// square images, with one registered tap per encoder level, one at the
// bottleneck, and one per decoder level. Conditioning (sinusoidal step
// embedding + learned label embedding) enters every block as a per-channel
// bias; label index 0 is the null label for classifier-free guidance.
template <typename S>
class ToyBackbone {
public:
    struct Forward {
        Var<S> eps_hat;
        std::vector<Var<S>> taps;  // in requested TapSet order
    };

    explicit ToyBackbone(BackboneConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
        const int down = 1 << static_cast<int>(cfg_.widths.size());
        if (cfg_.widths.empty()) throw ConfigError("backbone: widths must be nonempty");
        if (cfg_.image_size % down != 0 || cfg_.image_size / down < 1) {
            throw ConfigError("backbone: image_size " + std::to_string(cfg_.image_size) +
                              " must be a positive multiple of " + std::to_string(down));
        }
        if (cfg_.embed_dim % 2 != 0) throw ConfigError("backbone: embed_dim must be even");
        Rng rng = Rng(init_seed).substream("backbone_init");
        build(rng);
    }

    const BackboneConfig& config() const { return cfg_; }
    ParamRegistry<S>& params() { return reg_; }
    const ParamRegistry<S>& params() const { return reg_; }
    void set_frozen(bool frozen) { reg_.set_trainable(!frozen); }

    // Null label is the empty string; everything else must be in the
    // vocabulary.
    int label_index(const std::string& y) const {
        if (y.empty()) return 0;
        for (size_t i = 0; i < cfg_.labels.size(); ++i) {
            if (cfg_.labels[i] == y) return static_cast<int>(i) + 1;
        }
        throw InputError("unknown condition label '" + y + "'");
    }

    // All sites that can be tapped, in architecture order.
    std::vector<std::string> tap_registry() const {
        std::vector<std::string> r;
        const int ne = static_cast<int>(cfg_.widths.size());
        for (int i = 1; i <= ne; ++i) r.push_back("enc" + std::to_string(i));
        r.push_back("mid");
        for (int i = ne; i >= 1; --i) r.push_back("dec" + std::to_string(i));
        return r;
    }
    TapSet default_taps() const { return TapSet{tap_registry()}; }

    std::vector<int> tap_channels(const TapSet& taps) const {
        std::vector<int> out;
        for (const auto& site : taps.sites) out.push_back(site_channels(site));
        return out;
    }

    Forward forward(const Var<S>& z, int t, const std::string& y, const TapSet& taps) {
        return forward(z, t, label_index(y), taps);
    }

    Forward forward(const Var<S>& z, int t, int label_idx, const TapSet& taps) {
        validate_taps(taps);
        if (z->val.c != cfg_.channels || z->val.h != cfg_.image_size ||
            z->val.w != cfg_.image_size) {
            throw InputError("backbone: expected input [" + std::to_string(cfg_.channels) +
                             "," + std::to_string(cfg_.image_size) + "," +
                             std::to_string(cfg_.image_size) + "], got " + z->val.shape_str());
        }
        if (label_idx < 0 || label_idx > static_cast<int>(cfg_.labels.size())) {
            throw InputError("label index out of range");
        }

        // Conditioning vector: step embedding mixed with the label row.
        auto cond = relu(dense(make_const<S>(step_embedding(t)), temb1_w_, temb1_b_));
        cond = add(cond, embed_row(label_table_, label_idx));
        cond = relu(dense(cond, temb2_w_, temb2_b_));

        // Captured activations for this pass, keyed by site name. Nodes own
        // their values, so holding these is safe across later passes.
        std::vector<std::pair<std::string, Var<S>>> captured;
        const int ne = static_cast<int>(cfg_.widths.size());

        Var<S> x = z;
        std::vector<Var<S>> skips;
        for (int i = 0; i < ne; ++i) {
            x = block(x, cond, enc_[i]);
            captured.emplace_back("enc" + std::to_string(i + 1), x);
            skips.push_back(x);
            x = maxpool2x2(x);
        }
        x = block(x, cond, mid_);
        captured.emplace_back("mid", x);
        for (int i = ne - 1; i >= 0; --i) {
            x = deconv2x2(x, dec_[i].up_w, dec_[i].up_b);
            x = concat_channels<S>({x, skips[i]});
            x = block(x, cond, dec_[i].blk);
            captured.emplace_back("dec" + std::to_string(i + 1), x);
        }
        Forward f;
        f.eps_hat = conv3x3(x, head_w_, head_b_);
        for (const auto& site : taps.sites) {
            for (auto& [name, v] : captured) {
                if (name == site) {
                    f.taps.push_back(v);
                    break;
                }
            }
        }
        return f;
    }

    // Plain forward for callers that need only the noise prediction.
    Tensor<S> denoise(const Tensor<S>& z, int t, const std::string& y) {
        auto f = forward(make_const<S>(z), t, label_index(y), TapSet{});
        return f.eps_hat->val;
    }

    Checkpoint to_checkpoint(nlohmann::json provenance) const {
        Checkpoint ck;
        const auto registry = tap_registry();
        nlohmann::json taps = nlohmann::json::array();
        for (const auto& site : registry) {
            taps.push_back({{"site", site}, {"channels", site_channels(site)}});
        }
        ck.meta = {{"kind", "toy_backbone"},
                   {"image_size", cfg_.image_size},
                   {"channels", cfg_.channels},
                   {"widths", cfg_.widths},
                   {"bottleneck", cfg_.bottleneck},
                   {"embed_dim", cfg_.embed_dim},
                   {"labels", cfg_.labels},
                   {"taps", taps},
                   {"codec", LatentCodec<S>{}.spec()},
                   {"provenance", std::move(provenance)}};
        for (const auto& [name, p] : reg_.params) {
            ck.blocks.emplace_back(name, tensor_cast<float>(p->val));
        }
        return ck;
    }

    static ToyBackbone load(const Checkpoint& ck, uint64_t dummy_seed = 0) {
        if (ck.meta.value("kind", "") != "toy_backbone") {
            throw IncompatibilityError("checkpoint is not a toy_backbone (kind='" +
                                       ck.meta.value("kind", "") + "')");
        }
        BackboneConfig cfg;
        cfg.image_size = ck.meta.at("image_size").get<int>();
        cfg.channels = ck.meta.at("channels").get<int>();
        cfg.widths = ck.meta.at("widths").get<std::vector<int>>();
        cfg.bottleneck = ck.meta.at("bottleneck").get<int>();
        cfg.embed_dim = ck.meta.at("embed_dim").get<int>();
        cfg.labels = ck.meta.at("labels").get<std::vector<std::string>>();
        ToyBackbone bb(cfg, dummy_seed);
        for (auto& [name, p] : bb.reg_.params) {
            const Tensor<float>& src = ck.block(name);
            if (src.c != p->val.c || src.h != p->val.h || src.w != p->val.w) {
                throw IncompatibilityError("checkpoint block '" + name + "' has shape " +
                                           src.shape_str() + ", expected " +
                                           p->val.shape_str());
            }
            p->val = tensor_cast<S>(src);
        }
        bb.set_frozen(true);
        return bb;
    }

private:
    struct Block {
        Var<S> a_w, a_b;     // first 3x3 conv
        Var<S> cond_w, cond_b;  // embed_dim -> width projection (bias injection)
        Var<S> b_w, b_b;     // second 3x3 conv
    };
    struct DecLevel {
        Var<S> up_w, up_b;  // 2x2 transposed conv
        Block blk;
    };

    int site_channels(const std::string& site) const {
        const int ne = static_cast<int>(cfg_.widths.size());
        if (site == "mid") return cfg_.bottleneck;
        if (site.size() > 3) {
            const int idx = std::atoi(site.c_str() + 3);
            if (idx >= 1 && idx <= ne) {
                if (site.compare(0, 3, "enc") == 0 || site.compare(0, 3, "dec") == 0) {
                    return cfg_.widths[idx - 1];
                }
            }
        }
        throw ConfigError("unknown tap site '" + site + "'");
    }

    void validate_taps(const TapSet& taps) const {
        std::set<std::string> seen;
        for (const auto& site : taps.sites) {
            site_channels(site);  // throws on unknown site
            if (!seen.insert(site).second) {
                throw ConfigError("duplicate tap site '" + site + "'");
            }
        }
    }

    Tensor<S> step_embedding(int t) const {
        const int half = cfg_.embed_dim / 2;
        Tensor<S> e(cfg_.embed_dim, 1, 1);
        for (int k = 0; k < half; ++k) {
            const double freq =
                std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
            e.v[2 * k] = static_cast<S>(std::sin(t * freq));
            e.v[2 * k + 1] = static_cast<S>(std::cos(t * freq));
        }
        return e;
    }

    Block make_block(const std::string& name, int cin, int width, Rng& rng) {
        Block blk;
        blk.a_w = reg_.add_param(name + ".convA.w", he_uniform<S>(width, cin, 9, 9 * cin, rng));
        blk.a_b = reg_.add_param(name + ".convA.b", Tensor<S>(width, 1, 1));
        blk.cond_w = reg_.add_param(name + ".cond.w",
                                    he_uniform<S>(width, cfg_.embed_dim, 1, cfg_.embed_dim, rng));
        blk.cond_b = reg_.add_param(name + ".cond.b", Tensor<S>(width, 1, 1));
        blk.b_w = reg_.add_param(name + ".convB.w",
                                 he_uniform<S>(width, width, 9, 9 * width, rng));
        blk.b_b = reg_.add_param(name + ".convB.b", Tensor<S>(width, 1, 1));
        return blk;
    }

    Var<S> block(const Var<S>& x, const Var<S>& cond, const Block& blk) {
        auto h = relu(conv3x3(x, blk.a_w, blk.a_b));
        h = channel_bias(h, dense(cond, blk.cond_w, blk.cond_b));
        return relu(conv3x3(h, blk.b_w, blk.b_b));
    }

    void build(Rng& rng) {
        const int ne = static_cast<int>(cfg_.widths.size());
        const int ed = cfg_.embed_dim;
        label_table_ = reg_.add_param(
            "label.table", he_uniform<S>(static_cast<int>(cfg_.labels.size()) + 1, ed, 1, ed, rng));
        temb1_w_ = reg_.add_param("temb.fc1.w", he_uniform<S>(ed, ed, 1, ed, rng));
        temb1_b_ = reg_.add_param("temb.fc1.b", Tensor<S>(ed, 1, 1));
        temb2_w_ = reg_.add_param("temb.fc2.w", he_uniform<S>(ed, ed, 1, ed, rng));
        temb2_b_ = reg_.add_param("temb.fc2.b", Tensor<S>(ed, 1, 1));

        int cin = cfg_.channels;
        for (int i = 0; i < ne; ++i) {
            enc_.push_back(make_block("enc" + std::to_string(i + 1), cin, cfg_.widths[i], rng));
            cin = cfg_.widths[i];
        }
        mid_ = make_block("mid", cin, cfg_.bottleneck, rng);

        int up_in = cfg_.bottleneck;
        dec_.resize(ne);
        for (int i = ne - 1; i >= 0; --i) {
            const int width = cfg_.widths[i];
            const std::string name = "dec" + std::to_string(i + 1);
            dec_[i].up_w = reg_.add_param(name + ".up.w",
                                          he_uniform<S>(up_in, width, 4, 4 * up_in, rng));
            dec_[i].up_b = reg_.add_param(name + ".up.b", Tensor<S>(width, 1, 1));
            dec_[i].blk = make_block(name, 2 * width, width, rng);
            up_in = width;
        }
        head_w_ = reg_.add_param(
            "head.w", he_uniform<S>(cfg_.channels, cfg_.widths[0], 9, 9 * cfg_.widths[0], rng));
        head_b_ = reg_.add_param("head.b", Tensor<S>(cfg_.channels, 1, 1));
    }

    BackboneConfig cfg_;
    ParamRegistry<S> reg_;
    Var<S> label_table_, temb1_w_, temb1_b_, temb2_w_, temb2_b_;
    std::vector<Block> enc_;
    Block mid_;
    std::vector<DecLevel> dec_;
    Var<S> head_w_, head_b_;
};

// eps_uncond + w * (eps_cond - eps_uncond), with the w=1 / w=0 endpoints
// returned exactly.
template <typename S>
Tensor<S> cfg_mix(const Tensor<S>& eps_cond, const Tensor<S>& eps_uncond, S w) {
    require_same_shape(eps_cond, eps_uncond, "cfg_mix");
    if (w < S(0)) throw InputError("cfg_mix: guidance scale must be >= 0");
    if (w == S(1)) return eps_cond;
    if (w == S(0)) return eps_uncond;
    Tensor<S> out = eps_uncond;
    for (size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] = eps_uncond.v[i] + w * (eps_cond.v[i] - eps_uncond.v[i]);
    }
    return out;
}

template <typename S>
struct BackboneTrainResult {
    std::vector<double> loss_history;  // per-epoch mean squared-error loss
    bool cfg_reliable = true;          // false when the null label was never trained
};

// Standard denoising training: sample t ~ U[1,T], noise the image, regress
// the injected noise (mean squared error). Labels drop to the null label at
// `condition_drop_rate` so the classifier-free mix has a trained
// unconditioned path.
template <typename S>
BackboneTrainResult<S> train_toy_backbone(ToyBackbone<S>& bb,
                                          const std::vector<Triplet<S>>& dataset,
                                          const NoiseSchedule<S>& sched, int epochs,
                                          double condition_drop_rate, double lr, int batch_size,
                                          uint64_t seed) {
    if (dataset.empty()) throw InputError("train_toy_backbone: empty dataset");
    if (condition_drop_rate < 0.0 || condition_drop_rate > 1.0) {
        throw ConfigError("condition_drop_rate must be in [0,1]");
    }
    for (const auto& tr : dataset) {
        if (tr.x.c != bb.config().channels || tr.x.h != bb.config().image_size ||
            tr.x.w != bb.config().image_size) {
            throw InputError("train_toy_backbone: image shape " + tr.x.shape_str() +
                             " does not match backbone input");
        }
    }
    BackboneTrainResult<S> result;
    result.cfg_reliable = condition_drop_rate > 0.0;
    bb.set_frozen(false);

    AdamConfig<S> acfg;
    acfg.lr = static_cast<S>(lr);
    Adam<S> opt(bb.params(), acfg);
    Rng rng = Rng(seed).substream("backbone_train");
    const TapSet no_taps{};

    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        size_t in_batch = 0;
        for (size_t k = 0; k < order.size(); ++k) {
            const Triplet<S>& tr = dataset[order[k]];
            const int t = rng.uniform_int(1, sched.T);
            Tensor<S> eps(tr.x.c, tr.x.h, tr.x.w);
            for (auto& e : eps.v) e = static_cast<S>(rng.normal());
            const Tensor<S> z_t = add_noise(tr.x, t, eps, sched);
            const int label =
                rng.uniform() < condition_drop_rate ? 0 : bb.label_index(tr.y);

            auto f = bb.forward(make_const<S>(z_t), t, label, no_taps);
            auto loss = sum_squares(sub(f.eps_hat, make_const<S>(eps)));
            const double mse = loss->val.v[0] / static_cast<double>(eps.numel());
            epoch_loss += mse;
            // Per-element mean keeps the step size independent of image area.
            Tensor<S> cot = Tensor<S>::scalar(static_cast<S>(1.0 / eps.numel()));
            backward(loss, &cot);
            if (++in_batch == static_cast<size_t>(batch_size) || k + 1 == order.size()) {
                opt.step(static_cast<S>(1.0 / in_batch));
                in_batch = 0;
            }
        }
        result.loss_history.push_back(epoch_loss / dataset.size());
    }
    return result;
}

}  // namespace usketch

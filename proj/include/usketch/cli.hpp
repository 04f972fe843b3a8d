#pragma once

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "usketch/backbone.hpp"
#include "usketch/checkpoint.hpp"
#include "usketch/data.hpp"
#include "usketch/evaluation.hpp"
#include "usketch/io.hpp"
#include "usketch/lep.hpp"
#include "usketch/sampler.hpp"
#include "usketch/schedule.hpp"
#include "usketch/training.hpp"
#include "usketch/triplet.hpp"

// Command-line front end. Every option lives in a nested config section
// ([schedule], [backbone], [lep], [training], [guidance], [data],
// [evaluation]) mirroring the module it parameterizes; a --config file
// supplies values, explicit flags override them, and the fully resolved
// config is echoed into each output directory so any run can be reproduced
// from its artifacts alone.
namespace usketch::cli {

struct ScheduleSection {
    int T = 50;
    std::string kind = "linear";
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

struct BackboneSection {
    int image_size = 32;
    std::vector<int> widths = {8, 16, 32, 32};
    int bottleneck = 32;
    int embed_dim = 32;
    std::vector<std::string> labels = {"circle", "rectangle", "triangle"};
};

struct LepSection {
    std::string arch = "unet";
    std::vector<int> widths = {64, 128, 256, 512};
    int bottleneck = 1024;
    std::vector<int> hidden = {512, 256, 128, 64};
    int p_max = 9;
    bool normalize_t = false;
};

struct TrainingSection {
    int epochs = 10;
    int batch_size = 16;
    double lr = 1e-4;
    double drop_rate = 0.1;  // label-drop probability (backbone training only)
};

struct GuidanceSection {
    int S = 0;  // 0 = auto: ceil(T/2)
    double beta = 1.6;
    double cfg_scale = 8.0;
    double grad_eps = 1e-8;
};

struct DataSection {
    int n = 300;
    std::string dims = "32x32";
};

struct EvaluationSection {
    std::string extractor = "sobel";
    double threshold = 0.5;
    bool erode = true;
};

struct RunConfig {
    ScheduleSection schedule;
    BackboneSection backbone;
    LepSection lep;
    TrainingSection training;
    GuidanceSection guidance;
    DataSection data;
    EvaluationSection evaluation;

    uint64_t seed = 0;
    std::string seeds;  // comma-separated list; empty = use `seed`
    int jobs = 1;
    bool simplify = false;
    bool timing = false;  // include wall times in diagnostics (off keeps reruns byte-identical)

    std::string out;
    std::string data_dir;
    std::string backbone_path;
    std::string lep_path;
    std::string sketch_path;
    std::string label;
    std::string images_dir;
    std::string sketches_dir;

    std::string command;  // filled by the parsed subcommand's callback
};

namespace detail {

inline std::vector<uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<uint64_t> seeds;
    size_t pos = 0;
    while (pos <= csv.size()) {
        const size_t comma = std::min(csv.find(',', pos), csv.size());
        const std::string tok = csv.substr(pos, comma - pos);
        pos = comma + 1;
        if (tok.empty()) continue;
        try {
            size_t used = 0;
            const uint64_t v = std::stoull(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            seeds.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("--seeds must be comma-separated integers, got '" + tok + "'");
        }
    }
    return seeds;
}

inline std::pair<int, int> parse_dims(const std::string& dims) {
    const auto x = dims.find('x');
    int h = 0, w = 0;
    if (x != std::string::npos) {
        try {
            h = std::stoi(dims.substr(0, x));
            w = std::stoi(dims.substr(x + 1));
        } catch (const std::exception&) {
            h = 0;
        }
    }
    if (h < 1 || w < 1) {
        throw ConfigError("dims must look like HxW (e.g. 32x32), got '" + dims + "'");
    }
    return {h, w};
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open '" + tmp + "' for writing");
        os << text;
        if (!os) throw IoError("write to '" + tmp + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

// Resolved-config echo: everything the run used, defaults included, in the
// same format --config reads back.
inline void echo_config(const CLI::App& sub, const std::string& command,
                        const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const std::string path =
        (std::filesystem::path(out_dir) / (command + ".config.ini")).string();
    write_text_atomic(path, sub.config_to_str(true, true));
}

inline NoiseSchedule<float> build_schedule(const ScheduleSection& s) {
    return make_schedule<float>(s.T, schedule_kind_from_string(s.kind), s.beta_start,
                                s.beta_end);
}

inline void write_loss_history(const std::vector<double>& hist, const std::string& path) {
    std::string text;
    char line[64];
    for (size_t i = 0; i < hist.size(); ++i) {
        std::snprintf(line, sizeof(line), "%zu\t%.9g\n", i, hist[i]);
        text += line;
    }
    write_text_atomic(path, text);
}

// p_max is recoverable from any LEP checkpoint: the trailing positional
// block of the recorded layout has p_max + 1 channels.
inline int p_max_from_layout(const std::vector<ChannelRange>& layout) {
    for (const auto& r : layout) {
        if (r.source == "positional") return r.count - 1;
    }
    throw IncompatibilityError("LEP checkpoint layout has no positional block");
}

}  // namespace detail

inline int run_make_shapes(const RunConfig& cfg, const CLI::App& sub) {
    const auto [h, w] = detail::parse_dims(cfg.data.dims);
    build_triplet_dataset<float>(cfg.out, cfg.data.n, h, w, cfg.seed);
    detail::echo_config(sub, cfg.command, cfg.out);
    std::printf("%s\n", cfg.out.c_str());
    return 0;
}

inline int run_train_backbone(const RunConfig& cfg, const CLI::App& sub) {
    const auto sched = detail::build_schedule(cfg.schedule);
    const auto ds = load_triplet_dataset<float>(cfg.data_dir);

    BackboneConfig bc;
    bc.image_size = cfg.backbone.image_size;
    bc.widths = cfg.backbone.widths;
    bc.bottleneck = cfg.backbone.bottleneck;
    bc.embed_dim = cfg.backbone.embed_dim;
    bc.labels = cfg.backbone.labels;
    ToyBackbone<float> bb(bc, cfg.seed);

    const auto result = train_toy_backbone(bb, ds, sched, cfg.training.epochs,
                                           cfg.training.drop_rate, cfg.training.lr,
                                           cfg.training.batch_size, cfg.seed);

    nlohmann::json prov = {{"command", "train-backbone"},
                           {"seed", cfg.seed},
                           {"epochs", cfg.training.epochs},
                           {"batch_size", cfg.training.batch_size},
                           {"lr", cfg.training.lr},
                           {"drop_rate", cfg.training.drop_rate},
                           {"dataset_size", ds.size()},
                           {"cfg_reliable", result.cfg_reliable},
                           {"schedule",
                            {{"T", cfg.schedule.T},
                             {"kind", cfg.schedule.kind},
                             {"beta_start", cfg.schedule.beta_start},
                             {"beta_end", cfg.schedule.beta_end}}}};
    const std::filesystem::path out(cfg.out);
    std::filesystem::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    save_checkpoint(bb.to_checkpoint(prov), cfg.out);
    detail::write_loss_history(result.loss_history,
                               (out.parent_path() / (out.stem().string() + ".loss.txt")).string());
    detail::echo_config(sub, cfg.command, out.parent_path().empty() ? "." : out.parent_path().string());
    std::printf("%s\n", cfg.out.c_str());
    return 0;
}

inline int run_train_lep(const RunConfig& cfg, const CLI::App& sub) {
    const auto sched = detail::build_schedule(cfg.schedule);
    const auto ds = load_triplet_dataset<float>(cfg.data_dir);
    auto bb = ToyBackbone<float>::load(load_checkpoint(cfg.backbone_path));
    const LatentCodec<float> codec;
    const TapSet taps = bb.default_taps();

    const int c_f = feature_channel_count(bb.tap_channels(taps), cfg.lep.p_max);
    auto layout = feature_layout(taps.sites, bb.tap_channels(taps), cfg.lep.p_max);
    std::unique_ptr<EdgePredictor<float>> model;
    if (cfg.lep.arch == "unet") {
        model = std::make_unique<UNetLEP<float>>(c_f, codec.latent_channels, std::move(layout),
                                                 cfg.seed, cfg.lep.widths, cfg.lep.bottleneck);
    } else {
        model = std::make_unique<MLPLEP<float>>(c_f, codec.latent_channels, std::move(layout),
                                                cfg.seed, cfg.lep.hidden);
    }

    LepTrainConfig tc;
    tc.epochs = cfg.training.epochs;
    tc.batch_size = cfg.training.batch_size;
    tc.lr = cfg.training.lr;
    tc.seed = cfg.seed;
    tc.p_max = cfg.lep.p_max;
    tc.normalize_t = cfg.lep.normalize_t;
    const auto hist = train_lep(*model, bb, codec, ds, sched, taps, tc);

    nlohmann::json prov = {{"command", "train-lep"},
                           {"seed", cfg.seed},
                           {"epochs", cfg.training.epochs},
                           {"batch_size", cfg.training.batch_size},
                           {"lr", cfg.training.lr},
                           {"p_max", cfg.lep.p_max},
                           {"normalize_t", cfg.lep.normalize_t},
                           {"backbone", std::filesystem::path(cfg.backbone_path).filename()},
                           {"dataset_size", ds.size()}};
    const std::filesystem::path out(cfg.out);
    std::filesystem::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    save_checkpoint(model->to_checkpoint(prov), cfg.out);
    detail::write_loss_history(hist,
                               (out.parent_path() / (out.stem().string() + ".loss.txt")).string());
    detail::echo_config(sub, cfg.command, out.parent_path().empty() ? "." : out.parent_path().string());
    std::printf("%s\n", cfg.out.c_str());
    return 0;
}

namespace detail {

inline std::string diagnostics_jsonl(const std::vector<StepDiagnostics>& steps, bool timing,
                                     const std::vector<std::string>& warnings) {
    std::string text;
    for (const auto& w : warnings) {
        nlohmann::json j = {{"warning", w}};
        text += j.dump() + "\n";
    }
    for (const auto& s : steps) {
        nlohmann::json j;
        j["t"] = s.t;
        j["window"] = s.guided_window;
        j["applied"] = s.applied;
        j["loss"] = std::isnan(s.loss) ? nlohmann::json() : nlohmann::json(s.loss);
        j["alpha"] = s.alpha;
        if (!s.skip_reason.empty()) j["skip"] = s.skip_reason;
        if (timing) j["wall_ms"] = s.wall_ms;
        text += j.dump() + "\n";
    }
    return text;
}

// One worker = one seed: owns private model copies (runs share nothing
// mutable), samples, and writes <dir>/<stem>.png + <stem>.diag.jsonl.
inline void generate_one(const Checkpoint& bb_ck, const Checkpoint* lep_ck,
                         const Tensor<float>* sketch_latent, const RunConfig& cfg,
                         const NoiseSchedule<float>& sched, uint64_t seed,
                         const std::string& dir, const std::string& stem) {
    auto bb = ToyBackbone<float>::load(bb_ck);
    const LatentCodec<float> codec;
    GuidanceConfig gc;
    gc.T = cfg.schedule.T;
    gc.S = cfg.guidance.S;
    gc.beta_strength = cfg.guidance.beta;
    gc.cfg_scale = cfg.guidance.cfg_scale;
    gc.grad_eps = cfg.guidance.grad_eps;
    gc.seed = seed;

    SampleResult<float> res;
    if (lep_ck != nullptr) {
        auto lep = load_edge_predictor<float>(*lep_ck);
        gc.p_max = p_max_from_layout(lep->expected_layout());
        gc.normalize_t = lep_ck->meta.value("provenance", nlohmann::json::object())
                             .value("normalize_t", false);
        res = guided_sample(bb, codec, *lep, *sketch_latent, cfg.label, gc, sched,
                            bb.default_taps());
    } else {
        res = unguided_sample(bb, codec, cfg.label, gc, sched);
    }
    for (const auto& w : res.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

    std::filesystem::create_directories(dir);
    const std::filesystem::path base = std::filesystem::path(dir) / stem;
    write_png_gray(to_gray8(res.image), base.string() + ".png");
    write_text_atomic(base.string() + ".diag.jsonl",
                      diagnostics_jsonl(res.steps, cfg.timing, res.warnings));
}

}  // namespace detail

inline int run_generate(const RunConfig& cfg, const CLI::App& sub) {
    const auto sched = detail::build_schedule(cfg.schedule);
    const Checkpoint bb_ck = load_checkpoint(cfg.backbone_path);

    // Validate everything up front on throwaway instances so incompatible
    // inputs fail before any worker starts writing.
    auto probe = ToyBackbone<float>::load(bb_ck);
    probe.label_index(cfg.label);
    const int side = probe.config().image_size;

    std::optional<Checkpoint> lep_ck;
    std::optional<Tensor<float>> sketch_latent;
    std::string stem = "sample";
    if (!cfg.lep_path.empty()) {
        if (cfg.sketch_path.empty()) {
            throw ConfigError("generate: --sketch is required when --lep is given");
        }
        lep_ck = load_checkpoint(cfg.lep_path);
        const auto lep_probe = load_edge_predictor<float>(*lep_ck);
        require_layout_match(*lep_probe, probe, probe.default_taps(),
                             detail::p_max_from_layout(lep_probe->expected_layout()));

        SketchImage sk = load_sketch(cfg.sketch_path);
        if (cfg.simplify) sk = simplify_sketch(sk);
        if (!sk.usable_for_guidance()) {
            throw InputError("sketch '" + cfg.sketch_path + "' has no edge pixels");
        }
        if (sk.h != side || sk.w != side) {
            throw InputError("sketch is " + std::to_string(sk.h) + "x" + std::to_string(sk.w) +
                             " but the model works on " + std::to_string(side) + "x" +
                             std::to_string(side) + "; resize or re-render the sketch first");
        }
        Tensor<float> mask(1, sk.h, sk.w);
        for (size_t i = 0; i < sk.v.size(); ++i) mask.v[i] = static_cast<float>(sk.v[i]);
        sketch_latent = LatentCodec<float>{}.encode(mask);
        stem = std::filesystem::path(cfg.sketch_path).stem().string();
    }

    std::vector<uint64_t> seeds = detail::parse_seed_list(cfg.seeds);
    if (seeds.empty()) seeds.push_back(cfg.seed);

    if (seeds.size() == 1) {
        detail::generate_one(bb_ck, lep_ck ? &*lep_ck : nullptr,
                             sketch_latent ? &*sketch_latent : nullptr, cfg, sched, seeds[0],
                             cfg.out, stem);
    } else {
        // Independent seeds run as parallel workers over a shared queue;
        // each writes its own out/s<seed>/ subtree so results and their
        // provenance never interleave.
        std::atomic<size_t> next{0};
        std::atomic<bool> failed{false};
        std::string first_error;
        std::mutex err_mu;
        auto worker = [&] {
            for (size_t i = next.fetch_add(1); i < seeds.size(); i = next.fetch_add(1)) {
                if (failed.load()) return;
                try {
                    const std::string dir =
                        (std::filesystem::path(cfg.out) / ("s" + std::to_string(seeds[i])))
                            .string();
                    detail::generate_one(bb_ck, lep_ck ? &*lep_ck : nullptr,
                                         sketch_latent ? &*sketch_latent : nullptr, cfg, sched,
                                         seeds[i], dir, stem);
                } catch (const std::exception& e) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (first_error.empty()) first_error = e.what();
                    failed.store(true);
                }
            }
        };
        const size_t n_workers =
            std::min<size_t>(std::max(cfg.jobs, 1), seeds.size());
        std::vector<std::thread> pool;
        for (size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        if (failed.load()) throw Error(first_error);
    }
    detail::echo_config(sub, cfg.command, cfg.out);
    std::printf("%s\n", cfg.out.c_str());
    return 0;
}

inline int run_eval(const RunConfig& cfg, const CLI::App& sub) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(cfg.images_dir)) {
        throw InputError("'" + cfg.images_dir + "' is not a directory");
    }
    if (!fs::is_directory(cfg.sketches_dir)) {
        throw InputError("'" + cfg.sketches_dir + "' is not a directory");
    }
    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(cfg.images_dir)) {
        if (entry.path().extension() == ".png") stems.push_back(entry.path().stem().string());
    }
    std::sort(stems.begin(), stems.end());

    EvalSettings settings;
    settings.extractor = cfg.evaluation.extractor;
    settings.threshold = cfg.evaluation.threshold;
    settings.erode_reference = cfg.evaluation.erode;

    RecallReport report;
    size_t unmatched = 0;
    for (const auto& stem : stems) {
        const fs::path sketch_path = fs::path(cfg.sketches_dir) / (stem + ".png");
        if (!fs::exists(sketch_path)) {
            std::fprintf(stderr, "warning: no sketch for '%s', skipped\n", stem.c_str());
            ++unmatched;
            continue;
        }
        const auto image = from_gray8<float>(read_png_gray(
            (fs::path(cfg.images_dir) / (stem + ".png")).string()));
        auto row = recall(image, load_sketch(sketch_path.string()), settings);
        row.id = stem;
        report.rows.push_back(std::move(row));
    }
    for (const auto& entry : fs::directory_iterator(cfg.sketches_dir)) {
        if (entry.path().extension() != ".png") continue;
        if (!fs::exists(fs::path(cfg.images_dir) / entry.path().filename())) {
            std::fprintf(stderr, "warning: no image for sketch '%s', skipped\n",
                         entry.path().stem().string().c_str());
        }
    }
    if (report.rows.empty()) {
        throw InputError("no image/sketch pairs matched between '" + cfg.images_dir +
                         "' and '" + cfg.sketches_dir + "'" +
                         (unmatched ? " (" + std::to_string(unmatched) + " unmatched images)"
                                    : ""));
    }
    report.finalize();

    const fs::path out(cfg.out);
    fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    write_recall_report(report, cfg.out);
    detail::echo_config(sub, cfg.command, out.parent_path().empty() ? "." : out.parent_path().string());
    std::printf("%s\n", cfg.out.c_str());
    return 0;
}

namespace detail {

// CLI11's stock INI reader turns `[section]` headers and bare dotted keys
// into subcommand paths, but every command here keeps its options on one
// flat app under dotted names ("data.n"), so section parents are folded
// back into the option name before lookup. Echoed configs (which quote
// dotted keys literally) parse identically through this path.
class SectionedConfig : public CLI::ConfigBase {
  public:
    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        std::vector<CLI::ConfigItem> flat;
        for (const auto& item : CLI::ConfigBase::from_config(input)) {
            if (item.name == "++" || item.name == "--") continue;  // section markers
            CLI::ConfigItem folded;
            folded.name = item.fullname();
            folded.inputs = item.inputs;
            flat.push_back(std::move(folded));
        }
        return flat;
    }
};

// ExistingFile that lets "" through: optional file options echo their empty
// default into config files, and re-reading that echo must stay a no-op.
inline const CLI::Validator file_or_unset = CLI::Validator(
    [](std::string& s) { return s.empty() ? std::string{} : CLI::ExistingFile(s); }, "FILE");

inline void add_config_support(CLI::App* sub) {
    sub->set_config("--config", "", "read options from a config file");
    sub->config_formatter(std::make_shared<SectionedConfig>());
    sub->allow_config_extras(false);  // unknown keys are an error, not a shrug
    sub->option_defaults()->always_capture_default();
}

inline void add_schedule_options(CLI::App* sub, ScheduleSection& s) {
    sub->add_option("--schedule.T,--T", s.T, "denoising steps");
    sub->add_option("--schedule.kind", s.kind, "beta curve")
        ->check(CLI::IsMember({"linear", "cosine"}));
    sub->add_option("--schedule.beta-start", s.beta_start, "beta at t=1");
    sub->add_option("--schedule.beta-end", s.beta_end, "beta at t=T");
}

inline void add_training_options(CLI::App* sub, TrainingSection& t, int default_epochs) {
    t.epochs = default_epochs;
    sub->add_option("--training.epochs,--epochs", t.epochs, "training epochs");
    sub->add_option("--training.batch-size,--batch-size", t.batch_size, "minibatch size");
    sub->add_option("--training.lr,--lr", t.lr, "learning rate");
}

}  // namespace detail

// Each command is a self-contained App (config files only apply at the root
// App in CLI11, so subcommand nesting would silently drop --config). The
// binary dispatches on argv[1].
inline std::unique_ptr<CLI::App> make_command_app(const std::string& command, RunConfig& cfg) {
    cfg.command = command;
    auto app = std::make_unique<CLI::App>("", "usketch " + command);
    detail::add_config_support(app.get());

    if (command == "make-shapes") {
        app->description("render a synthetic triplet dataset");
        app->add_option("--data.n,--n", cfg.data.n, "number of triplets");
        app->add_option("--data.dims,--dims", cfg.data.dims, "image dims as HxW");
        app->add_option("--seed", cfg.seed, "dataset seed")->required();
        app->add_option("--out", cfg.out, "output directory")->required();
        return app;
    }
    if (command == "train-backbone") {
        app->description("train the toy denoiser");
        app->add_option("--data", cfg.data_dir, "triplet dataset directory")
            ->required()
            ->check(CLI::ExistingDirectory);
        app->add_option("--out", cfg.out, "checkpoint path")->required();
        app->add_option("--seed", cfg.seed, "init + shuffle seed")->required();
        detail::add_training_options(app.get(), cfg.training, 30);
        app->add_option("--training.drop-rate,--drop-rate", cfg.training.drop_rate,
                        "label-drop probability for classifier-free mixing");
        detail::add_schedule_options(app.get(), cfg.schedule);
        app->add_option("--backbone.image-size", cfg.backbone.image_size, "input side length");
        app->add_option("--backbone.widths", cfg.backbone.widths, "encoder widths per level");
        app->add_option("--backbone.bottleneck", cfg.backbone.bottleneck, "bottleneck width");
        app->add_option("--backbone.embed-dim", cfg.backbone.embed_dim, "conditioning width");
        app->add_option("--backbone.labels", cfg.backbone.labels, "class vocabulary");
        return app;
    }
    if (command == "train-lep") {
        app->description("train an edge predictor on frozen taps");
        app->add_option("--lep.arch,--arch", cfg.lep.arch, "predictor architecture")
            ->check(CLI::IsMember({"unet", "mlp"}));
        app->add_option("--backbone", cfg.backbone_path, "backbone checkpoint")
            ->required()
            ->check(CLI::ExistingFile);
        app->add_option("--data", cfg.data_dir, "triplet dataset directory")
            ->required()
            ->check(CLI::ExistingDirectory);
        app->add_option("--out", cfg.out, "checkpoint path")->required();
        app->add_option("--seed", cfg.seed, "init + noise + shuffle seed")->required();
        detail::add_training_options(app.get(), cfg.training, 10);
        detail::add_schedule_options(app.get(), cfg.schedule);
        app->add_option("--lep.widths", cfg.lep.widths, "unet encoder widths");
        app->add_option("--lep.bottleneck", cfg.lep.bottleneck, "unet bottleneck width");
        app->add_option("--lep.hidden", cfg.lep.hidden, "mlp hidden widths");
        app->add_option("--lep.p-max,--p-max", cfg.lep.p_max, "positional encoding order");
        app->add_flag("--lep.normalize-t,--normalize-t", cfg.lep.normalize_t,
                      "encode t/T instead of raw t");
        return app;
    }
    if (command == "generate") {
        app->description("sample images, optionally sketch-guided");
        app->add_option("--backbone", cfg.backbone_path, "backbone checkpoint")
            ->required()
            ->check(CLI::ExistingFile);
        app->add_option("--lep", cfg.lep_path, "edge-predictor checkpoint (omit for unguided)")
            ->check(detail::file_or_unset);
        app->add_option("--sketch", cfg.sketch_path, "reference sketch image")
            ->check(detail::file_or_unset);
        app->add_option("--label", cfg.label, "condition label ('' = unconditioned)");
        app->add_option("--out", cfg.out, "output directory")->required();
        app->add_option("--seed", cfg.seed, "noise-init seed");
        app->add_option("--seeds", cfg.seeds, "comma-separated seeds, one run each");
        app->add_option("--jobs", cfg.jobs, "parallel workers for --seeds")
            ->check(CLI::PositiveNumber);
        app->add_flag("--simplify", cfg.simplify, "simplify the sketch before guidance");
        app->add_flag("--timing", cfg.timing, "record wall times in diagnostics");
        detail::add_schedule_options(app.get(), cfg.schedule);
        app->add_option("--guidance.S,--S", cfg.guidance.S,
                        "guided step budget (0 = ceil(T/2))");
        app->add_option("--guidance.beta,--beta", cfg.guidance.beta,
                        "guidance strength factor");
        app->add_option("--guidance.cfg-scale,--cfg-scale", cfg.guidance.cfg_scale,
                        "classifier-free guidance weight");
        app->add_option("--guidance.grad-eps,--grad-eps", cfg.guidance.grad_eps,
                        "minimum usable gradient norm");
        return app;
    }
    if (command == "eval") {
        app->description("recall of sketches against generated images");
        app->add_option("--images", cfg.images_dir, "generated image directory")->required();
        app->add_option("--sketches", cfg.sketches_dir, "reference sketch directory")
            ->required();
        app->add_option("--out", cfg.out, "report path")->required();
        app->add_option("--evaluation.extractor,--extractor", cfg.evaluation.extractor,
                        "edge extractor");
        app->add_option("--evaluation.threshold,--threshold", cfg.evaluation.threshold,
                        "binarization threshold");
        app->add_flag("--evaluation.erode,!--evaluation.no-erode", cfg.evaluation.erode,
                      "erode the reference before counting");
        return app;
    }
    throw ConfigError("unknown command '" + command + "'");
}

// Dispatch after App::parse. Seed requirements that CLI11 can't express
// (either --seed or --seeds) and the dynamic S default resolve here.
inline int run_command(const CLI::App& app, RunConfig& cfg) {
    if (cfg.command == "make-shapes") return run_make_shapes(cfg, app);
    if (cfg.command == "train-backbone") return run_train_backbone(cfg, app);
    if (cfg.command == "train-lep") return run_train_lep(cfg, app);
    if (cfg.command == "generate") {
        if (cfg.seeds.empty() && app.count("--seed") == 0) {
            throw ConfigError("generate: provide --seed or --seeds");
        }
        if (cfg.guidance.S == 0) cfg.guidance.S = (cfg.schedule.T + 1) / 2;
        return run_generate(cfg, app);
    }
    if (cfg.command == "eval") return run_eval(cfg, app);
    throw ConfigError("no command selected");
}

inline void print_usage(std::FILE* to) {
    std::fprintf(to,
                 "usage: usketch <command> [options]\n"
                 "\n"
                 "commands:\n"
                 "  make-shapes     render a synthetic triplet dataset\n"
                 "  train-backbone  train the toy denoiser\n"
                 "  train-lep       train an edge predictor on frozen taps\n"
                 "  generate        sample images, optionally sketch-guided\n"
                 "  eval            recall of sketches against generated images\n"
                 "\n"
                 "run 'usketch <command> --help' for options\n");
}

// Exit contract: 0 success, 1 runtime failure, 2 usage/config error.
inline int main_entry(int argc, const char* const* argv) {
    if (argc < 2) {
        print_usage(stderr);
        return 2;
    }
    const std::string command = argv[1];
    if (command == "--help" || command == "-h" || command == "help") {
        print_usage(stdout);
        return 0;
    }
    RunConfig cfg;
    std::unique_ptr<CLI::App> app;
    try {
        app = make_command_app(command, cfg);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        print_usage(stderr);
        return 2;
    }
    try {
        app->parse(argc - 1, argv + 1);
        return run_command(*app, cfg);
    } catch (const CLI::ParseError& e) {
        const int code = app->exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace usketch::cli

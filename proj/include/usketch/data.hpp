#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usketch/io.hpp"
#include "usketch/morphology.hpp"
#include "usketch/rng.hpp"
#include "usketch/tensor.hpp"
#include "usketch/triplet.hpp"

namespace usketch {

enum class ShapeKind { circle, rectangle, triangle };

inline const char* to_string(ShapeKind k) {
    switch (k) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::rectangle: return "rectangle";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}
inline ShapeKind shape_kind_from_string(const std::string& s) {
    if (s == "circle") return ShapeKind::circle;
    if (s == "rectangle") return ShapeKind::rectangle;
    if (s == "triangle") return ShapeKind::triangle;
    throw InputError("unknown shape kind '" + s + "'");
}
inline std::vector<std::string> shape_labels() { return {"circle", "rectangle", "triangle"}; }

struct ShapeSpec {
    ShapeKind kind = ShapeKind::circle;
    double cy = 0, cx = 0;   // center
    double size = 0;         // radius / half-extent / circumradius
    double aspect = 1.0;     // rectangle height = aspect * width
    double rotation = 0.0;   // radians
    double fill = 1.0;
    double bg = 0.0;
};

namespace detail {

inline bool inside_shape(const ShapeSpec& s, double y, double x) {
    const double dy = y - s.cy, dx = x - s.cx;
    switch (s.kind) {
        case ShapeKind::circle:
            return dy * dy + dx * dx <= s.size * s.size;
        case ShapeKind::rectangle: {
            const double c = std::cos(s.rotation), sn = std::sin(s.rotation);
            const double u = c * dx + sn * dy;
            const double v = -sn * dx + c * dy;
            return std::abs(u) <= s.size && std::abs(v) <= s.size * s.aspect;
        }
        case ShapeKind::triangle: {
            // Equilateral triangle of circumradius `size`, rotated.
            double vy[3], vx[3];
            for (int k = 0; k < 3; ++k) {
                const double a = s.rotation + 2.0 * M_PI * k / 3.0 - M_PI / 2.0;
                vy[k] = s.cy + s.size * std::sin(a);
                vx[k] = s.cx + s.size * std::cos(a);
            }
            // Inside iff on a consistent side of all three edges.
            double sign = 0.0;
            for (int k = 0; k < 3; ++k) {
                const int n = (k + 1) % 3;
                const double cross =
                    (vx[n] - vx[k]) * (y - vy[k]) - (vy[n] - vy[k]) * (x - vx[k]);
                if (cross == 0.0) continue;
                if (sign == 0.0) {
                    sign = cross;
                } else if ((cross > 0) != (sign > 0)) {
                    return false;
                }
            }
            return true;
        }
    }
    return false;
}

}  // namespace detail

template <typename S>
struct RenderedShape {
    Tensor<S> image;   // [1, H, W], intensities {bg, fill}
    SketchImage edge;  // analytic contour, 1 pixel wide
};

// Rasterizes the filled shape at pixel centers and takes the edge map as the
// inner boundary: filled pixels whose 3x3 neighborhood leaves the shape.
template <typename S>
RenderedShape<S> render_shape(const ShapeSpec& spec, int H, int W) {
    if (spec.size <= 0) throw InputError("render_shape: degenerate shape (size <= 0)");
    if (spec.fill < 0 || spec.fill > 1 || spec.bg < 0 || spec.bg > 1) {
        throw InputError("render_shape: intensities must lie in [0,1]");
    }
    if (spec.fill == spec.bg) throw InputError("render_shape: fill and background intensities must differ");
    if (spec.kind == ShapeKind::rectangle && spec.aspect <= 0) {
        throw InputError("render_shape: rectangle aspect must be positive");
    }

    SketchImage filled(H, W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            filled.at(y, x) = detail::inside_shape(spec, y, x) ? 1 : 0;
        }
    }
    if (filled.empty_mask()) throw InputError("render_shape: shape covers no pixels");
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            if (filled.at(y, x) && (y == 0 || y == H - 1 || x == 0 || x == W - 1)) {
                throw InputError("render_shape: shape is not fully inside the canvas");
            }
        }
    }

    const SketchImage interior = erode(filled);
    RenderedShape<S> out;
    out.edge = SketchImage(H, W, Provenance::synthetic);
    out.image = Tensor<S>(1, H, W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            out.edge.at(y, x) = filled.at(y, x) && !interior.at(y, x) ? 1 : 0;
            out.image.at(0, y, x) = static_cast<S>(filled.at(y, x) ? spec.fill : spec.bg);
        }
    }
    return out;
}

// Gradient-magnitude edge response (3x3 Sobel, replicate-padded so the
// canvas border itself produces no response), normalized by the image's own
// maximum so the strongest edge maps to 1. A constant image returns all
// zeros. The normalized magnitude is square-root compressed: staircase
// pixels on rotated contours see only a diagonal intensity step and respond
// at ~1/3 of the corner maximum, which would fall under the standard 0.5
// binarization threshold without the compression.
template <typename S>
Tensor<S> sobel_response(const Tensor<S>& image) {
    if (image.c != 1) throw InputError("edge extraction expects a single-channel image");
    const int H = image.h, W = image.w;
    auto px = [&](int y, int x) {
        y = std::min(std::max(y, 0), H - 1);
        x = std::min(std::max(x, 0), W - 1);
        return static_cast<double>(image.at(0, y, x));
    };
    Tensor<S> mag(1, H, W);
    double maxv = 0.0;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            // Differences first: equal operands cancel exactly, so flat
            // regions give a true zero instead of a summation residue that
            // max-normalization would amplify.
            const double gx = (px(y - 1, x + 1) - px(y - 1, x - 1)) +
                              2 * (px(y, x + 1) - px(y, x - 1)) +
                              (px(y + 1, x + 1) - px(y + 1, x - 1));
            const double gy = (px(y + 1, x - 1) - px(y - 1, x - 1)) +
                              2 * (px(y + 1, x) - px(y - 1, x)) +
                              (px(y + 1, x + 1) - px(y - 1, x + 1));
            const double m = std::sqrt(gx * gx + gy * gy);
            mag.at(0, y, x) = static_cast<S>(m);
            maxv = std::max(maxv, m);
        }
    }
    if (maxv > 0.0) {
        for (auto& v : mag.v) v = static_cast<S>(std::sqrt(static_cast<double>(v) / maxv));
    }
    return mag;
}

// Pluggable edge extraction; "sobel" is the built-in fallback. (The
// intended full-scale extractor is an external learned detector; it would
// register here.)
template <typename S>
Tensor<S> extract_edges(const Tensor<S>& image, const std::string& extractor = "sobel") {
    for (const auto v : image.v) {
        if (v < S(0) || v > S(1)) {
            throw InputError("extract_edges: image values must lie in [0,1]");
        }
    }
    if (extractor == "sobel") return sobel_response(image);
    throw ConfigError("unknown edge extractor '" + extractor + "'");
}

// response >= threshold (inclusive) -> 1.
template <typename S>
SketchImage binarize(const Tensor<S>& response, double threshold = 0.5) {
    if (response.c != 1) throw InputError("binarize expects a single-channel response");
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw InputError("binarize: threshold must lie in (0,1)");
    }
    SketchImage out(response.h, response.w, Provenance::extracted);
    for (size_t i = 0; i < response.v.size(); ++i) {
        const double r = static_cast<double>(response.v[i]);
        if (r < 0.0 || r > 1.0) throw InputError("binarize: response values must lie in [0,1]");
        out.v[i] = r >= threshold ? 1 : 0;
    }
    return out;
}

// Morphological simplification: close small gaps, thin to 1-pixel strokes,
// and repeat until the map stops changing. If the iteration falls into a
// short cycle instead of a fixed point, the bytewise-smallest state of the
// cycle is returned, which makes the whole operation idempotent.
inline SketchImage simplify_sketch(const SketchImage& sketch,
                                   const std::string& simplifier = "morph") {
    if (simplifier != "morph") throw ConfigError("unknown simplifier '" + simplifier + "'");
    if (sketch.empty_mask()) throw InputError("simplify_sketch: sketch has no set pixels");

    std::map<std::vector<uint8_t>, int> seen;
    std::vector<SketchImage> states;
    SketchImage cur = sketch;
    for (int iter = 0; iter < 1000; ++iter) {
        seen[cur.v] = static_cast<int>(states.size());
        states.push_back(cur);
        SketchImage next = thin(close_gaps(cur));
        next.prov = Provenance::simplified;
        if (next.v == cur.v) return next;
        auto hit = seen.find(next.v);
        if (hit != seen.end()) {
            // Cycle: canonicalize to its bytewise-minimal member.
            int best = hit->second;
            for (size_t k = hit->second; k < states.size(); ++k) {
                if (states[k].v < states[best].v) best = static_cast<int>(k);
            }
            SketchImage out = states[best];
            out.prov = Provenance::simplified;
            return out;
        }
        cur = std::move(next);
    }
    throw NumericalError("simplify_sketch: did not converge");
}

// Raster file -> binary sketch with auto-polarity: edges are taken as the
// minority pixel value, so both white-on-black and black-on-white inputs
// work. Pixels are first binarized at mid-gray.
inline SketchImage load_sketch(const std::string& path) {
    const GrayImage img = read_png_gray(path);
    SketchImage s(img.h, img.w, Provenance::hand_drawn);
    size_t high = 0;
    for (uint8_t b : img.v) high += b >= 128 ? 1 : 0;
    const bool edges_are_high = high * 2 <= img.v.size();
    for (size_t i = 0; i < img.v.size(); ++i) {
        const bool hi = img.v[i] >= 128;
        s.v[i] = hi == edges_are_high ? 1 : 0;
    }
    return s;
}

inline void save_sketch(const SketchImage& s, const std::string& path) {
    GrayImage img;
    img.h = s.h;
    img.w = s.w;
    img.v.resize(s.v.size());
    for (size_t i = 0; i < s.v.size(); ++i) img.v[i] = s.v[i] ? 255 : 0;
    write_png_gray(img, path);
}

// Draws one random spec of the given kind, comfortably inside the canvas.
inline ShapeSpec random_shape_spec(ShapeKind kind, int H, int W, Rng& rng) {
    ShapeSpec spec;
    spec.kind = kind;
    spec.aspect = kind == ShapeKind::rectangle ? rng.uniform(0.5, 1.0) : 1.0;
    // Farthest support point from the center per unit of `size`: size is the
    // circumradius for circles and triangles, but only the half-extent along
    // one axis for rectangles, whose corners reach out by hypot(1, aspect).
    const double reach =
        kind == ShapeKind::rectangle ? std::hypot(1.0, spec.aspect) : 1.0;
    const int m = std::min(H, W);
    const double max_size = ((m - 1) / 2.0 - 2.0) / reach;
    if (max_size < 3.0) throw InputError("canvas too small for shape generation");
    spec.size = rng.uniform(3.0, max_size);
    spec.rotation = rng.uniform(0.0, 2.0 * M_PI);
    // The reach-scaled margin keeps the whole support off the border ring at
    // every rotation.
    const double margin = spec.size * reach + 2.0;
    spec.cy = rng.uniform(margin, H - 1 - margin);
    spec.cx = rng.uniform(margin, W - 1 - margin);
    const bool light_on_dark = rng.uniform() < 0.5;
    const double a = rng.uniform(0.6, 0.95), b = rng.uniform(0.05, 0.4);
    spec.fill = light_on_dark ? a : b;
    spec.bg = light_on_dark ? b : a;
    return spec;
}

// Writes n triplets (round-robin over shape kinds, per-spec seed
// substreams) in the on-disk dataset layout. Deterministic: the same
// (n, dims, seed) always produces byte-identical files.
template <typename S>
void build_triplet_dataset(const std::string& dir, int n, int H, int W, uint64_t seed) {
    if (n < 1) throw InputError("build_triplet_dataset: n must be >= 1");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir + "/images", ec);
    fs::create_directories(dir + "/edges", ec);
    if (!fs::is_directory(dir + "/images") || !fs::is_directory(dir + "/edges")) {
        throw IoError("cannot create dataset directories under '" + dir + "'");
    }

    Rng root(seed);
    std::map<std::string, int> counts;
    std::string index;
    char name[32];
    for (int i = 0; i < n; ++i) {
        const ShapeKind kind = static_cast<ShapeKind>(i % 3);
        Rng rng = root.substream("shape", static_cast<size_t>(i));
        const ShapeSpec spec = random_shape_spec(kind, H, W, rng);
        const RenderedShape<S> r = render_shape<S>(spec, H, W);
        std::snprintf(name, sizeof(name), "%06d.png", i);
        write_png_gray(to_gray8(r.image), dir + "/images/" + name);
        save_sketch(r.edge, dir + "/edges/" + name);
        index += std::string("images/") + name + "\t" + "edges/" + name + "\t" +
                 to_string(kind) + "\n";
        ++counts[to_string(kind)];
    }
    {
        std::ofstream os(dir + "/index.tsv.tmp", std::ios::binary);
        os << index;
        if (!os) throw IoError("cannot write dataset index under '" + dir + "'");
    }
    fs::rename(dir + "/index.tsv.tmp", dir + "/index.tsv");

    nlohmann::json manifest = {{"n", n},
                               {"dims", {H, W}},
                               {"seed", seed},
                               {"counts", counts},
                               {"labels", shape_labels()}};
    {
        std::ofstream os(dir + "/manifest.json.tmp", std::ios::binary);
        os << manifest.dump(2) << "\n";
        if (!os) throw IoError("cannot write dataset manifest under '" + dir + "'");
    }
    fs::rename(dir + "/manifest.json.tmp", dir + "/manifest.json");
}

}  // namespace usketch

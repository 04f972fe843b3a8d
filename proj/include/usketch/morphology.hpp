#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "usketch/error.hpp"

namespace usketch {

enum class Provenance { hand_drawn, extracted, synthetic, simplified };

inline const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::hand_drawn: return "hand-drawn";
        case Provenance::extracted: return "extracted";
        case Provenance::synthetic: return "synthetic";
        case Provenance::simplified: return "simplified";
    }
    return "?";
}

// Binary [H, W] map with a provenance tag. A sketch must have at least one
// set pixel to be usable as guidance; emptiness is checked at the points of
// use rather than at construction (intermediate results may be empty).
struct SketchImage {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> v;  // values strictly {0,1}
    Provenance prov = Provenance::synthetic;

    SketchImage() = default;
    SketchImage(int h_, int w_, Provenance p = Provenance::synthetic)
        : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0), prov(p) {}

    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t nonzero_count() const {
        size_t n = 0;
        for (uint8_t b : v) n += b;
        return n;
    }
    bool empty_mask() const { return nonzero_count() == 0; }
    bool usable_for_guidance() const { return !empty_mask(); }
    bool same_mask(const SketchImage& o) const { return h == o.h && w == o.w && v == o.v; }
};

// Structuring element for morphological ops; odd dimensions, anchored at
// the center.
struct StructuringElement {
    int h = 3;
    int w = 3;
    std::vector<uint8_t> v = std::vector<uint8_t>(9, 1);

    static StructuringElement all_ones(int size) {
        StructuringElement se;
        se.h = se.w = size;
        se.v.assign(static_cast<size_t>(size) * size, 1);
        return se;
    }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

// Erosion with zero padding: a pixel survives iff every set position of the
// SE footprint lands on a set pixel inside the frame, so the result is
// always a subset of the input.
inline SketchImage erode(const SketchImage& s, const StructuringElement& se = {}) {
    if (se.h % 2 == 0 || se.w % 2 == 0) {
        throw InputError("erode: structuring element dims must be odd");
    }
    const int ay = se.h / 2, ax = se.w / 2;
    SketchImage out(s.h, s.w, s.prov);
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
            uint8_t keep = 1;
            for (int dy = 0; dy < se.h && keep; ++dy) {
                for (int dx = 0; dx < se.w && keep; ++dx) {
                    if (!se.at(dy, dx)) continue;
                    const int sy = y + dy - ay, sx = x + dx - ax;
                    if (sy < 0 || sy >= s.h || sx < 0 || sx >= s.w || !s.at(sy, sx)) keep = 0;
                }
            }
            out.at(y, x) = keep;
        }
    }
    return out;
}

inline SketchImage dilate(const SketchImage& s, const StructuringElement& se = {}) {
    if (se.h % 2 == 0 || se.w % 2 == 0) {
        throw InputError("dilate: structuring element dims must be odd");
    }
    const int ay = se.h / 2, ax = se.w / 2;
    SketchImage out(s.h, s.w, s.prov);
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
            uint8_t hit = 0;
            for (int dy = 0; dy < se.h && !hit; ++dy) {
                for (int dx = 0; dx < se.w && !hit; ++dx) {
                    if (!se.at(dy, dx)) continue;
                    const int sy = y + dy - ay, sx = x + dx - ax;
                    if (sy >= 0 && sy < s.h && sx >= 0 && sx < s.w && s.at(sy, sx)) hit = 1;
                }
            }
            out.at(y, x) = hit;
        }
    }
    return out;
}

inline SketchImage close_gaps(const SketchImage& s, const StructuringElement& se = {}) {
    return erode(dilate(s, se), se);
}

namespace detail {

// One thinning pass (both subiterations); returns true if anything changed.
// A pixel is peeled when it has 2..6 set neighbors, exactly one 0->1
// transition around its ring, and the directional products for the given
// subiteration vanish.
inline bool thin_pass(SketchImage& s) {
    auto px = [&](int y, int x) -> int {
        return (y < 0 || y >= s.h || x < 0 || x >= s.w) ? 0 : s.at(y, x);
    };
    bool changed = false;
    for (int phase = 0; phase < 2; ++phase) {
        std::vector<std::pair<int, int>> kill;
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                if (!s.at(y, x)) continue;
                const int p2 = px(y - 1, x), p3 = px(y - 1, x + 1), p4 = px(y, x + 1),
                          p5 = px(y + 1, x + 1), p6 = px(y + 1, x), p7 = px(y + 1, x - 1),
                          p8 = px(y, x - 1), p9 = px(y - 1, x - 1);
                const int ring[8] = {p2, p3, p4, p5, p6, p7, p8, p9};
                int b = 0, a = 0;
                for (int k = 0; k < 8; ++k) {
                    b += ring[k];
                    if (ring[k] == 0 && ring[(k + 1) % 8] == 1) ++a;
                }
                if (b < 2 || b > 6 || a != 1) continue;
                const bool ok = phase == 0 ? (p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0)
                                           : (p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0);
                if (ok) kill.emplace_back(y, x);
            }
        }
        // Batch peeling can erase a final 2x2 block outright (all four pixels
        // match the rule at once), so a phase that would wipe the image is
        // skipped: the last nonempty stage is the skeleton.
        if (kill.size() == s.nonzero_count()) continue;
        for (auto [y, x] : kill) s.at(y, x) = 0;
        changed |= !kill.empty();
    }
    return changed;
}

}  // namespace detail

// Iterative thinning to 1-pixel-wide strokes (medial-axis style); already
// thin strokes pass through unchanged.
inline SketchImage thin(const SketchImage& s) {
    SketchImage out = s;
    while (detail::thin_pass(out)) {
    }
    return out;
}

}  // namespace usketch

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "usketch/data.hpp"
#include "usketch/morphology.hpp"
#include "usketch/tensor.hpp"

namespace usketch {

struct BBox {
    int r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // inclusive

    bool operator==(const BBox&) const = default;
    std::string str() const {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "(%d,%d)-(%d,%d)", r0, c0, r1, c1);
        return buf;
    }
};

// Tight inclusive bounds of the nonzero support.
inline BBox contour_bbox(const SketchImage& s) {
    if (s.empty_mask()) throw InputError("contour_bbox: sketch has no set pixels");
    BBox b{s.h, s.w, -1, -1};
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
            if (!s.at(y, x)) continue;
            b.r0 = std::min(b.r0, y);
            b.c0 = std::min(b.c0, x);
            b.r1 = std::max(b.r1, y);
            b.c1 = std::max(b.c1, x);
        }
    }
    return b;
}

struct ImageRecall {
    std::string id;
    double recall = 0.0;  // undefined when excluded
    long tp = 0;
    long fn = 0;
    BBox bbox;
    bool excluded = false;
    // Auxiliary metrics, not part of the primary protocol (background edges
    // inside the crop depress precision without penalizing edge fidelity).
    double precision = 0.0;
    double f1 = 0.0;
};

struct EvalSettings {
    std::string extractor = "sobel";
    double threshold = 0.5;
    bool erode_reference = true;  // thin strokes may need this off
    StructuringElement se = {};   // 3x3 all-ones
};

// Counting stage of the recall protocol, on masks that have already been
// extracted: erode the reference sketch, crop both masks to the bounding
// box of the original sketch's contours, and count coverage of the
// reference.
inline ImageRecall recall_from_masks(const SketchImage& pred, const SketchImage& sketch,
                                     const EvalSettings& settings = {}) {
    if (pred.h != sketch.h || pred.w != sketch.w) {
        throw InputError("recall: prediction and sketch dims differ");
    }
    const SketchImage ref_full =
        settings.erode_reference ? erode(sketch, settings.se) : sketch;
    ImageRecall r;
    r.bbox = contour_bbox(sketch);  // from the pre-erosion contours

    long tp = 0, fn = 0, fp = 0;
    for (int y = r.bbox.r0; y <= r.bbox.r1; ++y) {
        for (int x = r.bbox.c0; x <= r.bbox.c1; ++x) {
            const bool p = pred.at(y, x), g = ref_full.at(y, x);
            tp += p && g;
            fn += !p && g;
            fp += p && !g;
        }
    }
    r.tp = tp;
    r.fn = fn;
    if (tp + fn == 0) {
        r.excluded = true;  // reference vanished under erosion
        r.recall = std::nan("");
        r.precision = std::nan("");
        r.f1 = std::nan("");
        return r;
    }
    r.recall = static_cast<double>(tp) / (tp + fn);
    r.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
    r.f1 = r.precision + r.recall == 0.0
               ? 0.0
               : 2.0 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

// The full recall protocol for one image: extract and binarize edges from
// the generated image, then count coverage of the (eroded) reference.
template <typename S>
ImageRecall recall(const Tensor<S>& generated_image, const SketchImage& sketch,
                   const EvalSettings& settings = {}) {
    if (generated_image.h != sketch.h || generated_image.w != sketch.w) {
        throw InputError("recall: image and sketch dims differ");
    }
    const SketchImage pred = binarize(extract_edges(generated_image, settings.extractor),
                                      settings.threshold);
    return recall_from_masks(pred, sketch, settings);
}

struct RecallReport {
    std::vector<ImageRecall> rows;
    double mean_recall = 0.0;  // over non-excluded rows
    int evaluated = 0;
    int excluded = 0;
    double mean_precision = 0.0;
    double mean_f1 = 0.0;

    void finalize() {
        double sr = 0, sp = 0, sf = 0;
        evaluated = 0;
        excluded = 0;
        for (const auto& r : rows) {
            if (r.excluded) {
                ++excluded;
                continue;
            }
            ++evaluated;
            sr += r.recall;
            sp += r.precision;
            sf += r.f1;
        }
        mean_recall = evaluated ? sr / evaluated : 0.0;
        mean_precision = evaluated ? sp / evaluated : 0.0;
        mean_f1 = evaluated ? sf / evaluated : 0.0;
    }
};

inline void write_recall_report(const RecallReport& report, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open report '" + tmp + "' for writing");
        os << "# per-image rows: id\trecall\ttp\tfn\tbbox\texcluded\tprecision\tf1\n";
        os << "# precision/f1 are auxiliary diagnostics, not the primary metric\n";
        char buf[256];
        for (const auto& r : report.rows) {
            if (r.excluded) {
                std::snprintf(buf, sizeof(buf), "%s\tundefined\t%ld\t%ld\t%s\t1\t-\t-\n",
                              r.id.c_str(), r.tp, r.fn, r.bbox.str().c_str());
            } else {
                std::snprintf(buf, sizeof(buf), "%s\t%.6f\t%ld\t%ld\t%s\t0\t%.6f\t%.6f\n",
                              r.id.c_str(), r.recall, r.tp, r.fn, r.bbox.str().c_str(),
                              r.precision, r.f1);
            }
            os << buf;
        }
        os << "# summary\n";
        std::snprintf(buf, sizeof(buf),
                      "mean_recall\t%.6f\nevaluated\t%d\nexcluded\t%d\n"
                      "mean_precision\t%.6f\nmean_f1\t%.6f\n",
                      report.mean_recall, report.evaluated, report.excluded,
                      report.mean_precision, report.mean_f1);
        os << buf;
        if (!os) throw IoError("write failed for report '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace usketch

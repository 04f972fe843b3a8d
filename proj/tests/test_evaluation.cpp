// Recall protocol: reference erosion, contour bounding boxes, and the
// cropped coverage count, each checked against brute-force oracles.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "usketch/evaluation.hpp"

using namespace usketch;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

SketchImage random_mask(int h, int w, double density, Rng& rng) {
    SketchImage s(h, w);
    for (auto& b : s.v) b = rng.uniform() < density ? 1 : 0;
    return s;
}

// Brute-force erosion: triple loop over the SE footprint with explicit
// zero padding, written independently of the library routine.
SketchImage erode_oracle(const SketchImage& s, int se_h, int se_w) {
    SketchImage out(s.h, s.w);
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
            bool all = true;
            for (int dy = -se_h / 2; dy <= se_h / 2 && all; ++dy) {
                for (int dx = -se_w / 2; dx <= se_w / 2 && all; ++dx) {
                    const int sy = y + dy, sx = x + dx;
                    const bool in = sy >= 0 && sy < s.h && sx >= 0 && sx < s.w;
                    all = in && s.at(sy, sx);
                }
            }
            out.at(y, x) = all ? 1 : 0;
        }
    }
    return out;
}

// Full recall protocol re-derived from first principles: erode the
// reference, scan for the pre-erosion bbox, count coverage inside it.
struct OracleCounts {
    long tp = 0, fn = 0;
};
OracleCounts recall_oracle(const SketchImage& pred, const SketchImage& sketch,
                           bool erode_ref) {
    const SketchImage ref = erode_ref ? erode_oracle(sketch, 3, 3) : sketch;
    int r0 = sketch.h, c0 = sketch.w, r1 = -1, c1 = -1;
    for (int y = 0; y < sketch.h; ++y) {
        for (int x = 0; x < sketch.w; ++x) {
            if (!sketch.at(y, x)) continue;
            r0 = std::min(r0, y);
            c0 = std::min(c0, x);
            r1 = std::max(r1, y);
            c1 = std::max(c1, x);
        }
    }
    OracleCounts c;
    for (int y = r0; y <= r1; ++y) {
        for (int x = c0; x <= c1; ++x) {
            c.tp += pred.at(y, x) && ref.at(y, x);
            c.fn += !pred.at(y, x) && ref.at(y, x);
        }
    }
    return c;
}

}  // namespace

TEST_CASE("erosion keeps only fully-covered footprints", "[evaluation]") {
    SECTION("5x5 all-ones erodes to the interior 3x3") {
        SketchImage s(5, 5);
        for (auto& b : s.v) b = 1;
        const SketchImage e = erode(s);
        for (int y = 0; y < 5; ++y) {
            for (int x = 0; x < 5; ++x) {
                const bool interior = y >= 1 && y <= 3 && x >= 1 && x <= 3;
                REQUIRE(e.at(y, x) == (interior ? 1 : 0));
            }
        }
    }

    SECTION("a 1px line vanishes entirely") {
        SketchImage s(7, 7);
        for (int x = 0; x < 7; ++x) s.at(3, x) = 1;
        REQUIRE(erode(s).empty_mask());
    }

    SECTION("random 16x16 maps match the brute-force oracle exactly") {
        Rng rng(606);
        for (int trial = 0; trial < 20; ++trial) {
            const SketchImage s = random_mask(16, 16, 0.25 + 0.5 * rng.uniform(), rng);
            INFO("trial " << trial);
            REQUIRE(erode(s).v == erode_oracle(s, 3, 3).v);
        }
    }

    SECTION("wider structuring elements follow the same contract") {
        Rng rng(607);
        const SketchImage s = random_mask(16, 16, 0.8, rng);
        REQUIRE(erode(s, StructuringElement::all_ones(5)).v == erode_oracle(s, 5, 5).v);
    }

    SECTION("the result is always a subset of the input") {
        Rng rng(608);
        for (int trial = 0; trial < 10; ++trial) {
            const SketchImage s = random_mask(12, 12, 0.6, rng);
            const SketchImage e = erode(s);
            for (size_t i = 0; i < s.v.size(); ++i) {
                // erode(s) AND s == erode(s)
                REQUIRE((e.v[i] & s.v[i]) == e.v[i]);
            }
        }
    }

    SECTION("even-sized structuring elements are rejected") {
        SketchImage s(4, 4);
        StructuringElement se;
        se.h = 2;
        se.v.assign(6, 1);
        REQUIRE_THROWS_AS(erode(s, se), InputError);
    }
}

TEST_CASE("contour bounding boxes are tight and inclusive", "[evaluation]") {
    SECTION("single pixel") {
        SketchImage s(6, 8);
        s.at(2, 3) = 1;
        const BBox b = contour_bbox(s);
        REQUIRE(b == BBox{2, 3, 2, 3});
    }

    SECTION("full frame") {
        SketchImage s(5, 9);
        for (auto& b : s.v) b = 1;
        REQUIRE(contour_bbox(s) == BBox{0, 0, 4, 8});
    }

    SECTION("random sparse maps match a coordinate-scan oracle") {
        Rng rng(1234);
        for (int trial = 0; trial < 25; ++trial) {
            SketchImage s = random_mask(14, 11, 0.05, rng);
            if (s.empty_mask()) s.at(static_cast<int>(rng.uniform_int(0, 13)),
                                     static_cast<int>(rng.uniform_int(0, 10))) = 1;
            int r0 = 99, c0 = 99, r1 = -1, c1 = -1;
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x) {
                    if (!s.at(y, x)) continue;
                    r0 = std::min(r0, y);
                    c0 = std::min(c0, x);
                    r1 = std::max(r1, y);
                    c1 = std::max(c1, x);
                }
            }
            REQUIRE(contour_bbox(s) == BBox{r0, c0, r1, c1});
        }
    }

    SECTION("empty sketch is an input error") {
        SketchImage s(4, 4);
        REQUIRE_THROWS_MATCHES(contour_bbox(s), InputError,
                               MessageMatches(ContainsSubstring("no set pixels")));
    }
}

TEST_CASE("recall counts coverage of the eroded reference", "[evaluation]") {
    SECTION("a superset prediction scores 1.0") {
        SketchImage sketch(10, 10);
        for (int y = 3; y <= 7; ++y) {
            for (int x = 2; x <= 8; ++x) sketch.at(y, x) = 1;
        }
        SketchImage pred(10, 10);
        for (auto& b : pred.v) b = 1;
        const ImageRecall r = recall_from_masks(pred, sketch);
        REQUIRE(r.recall == 1.0);
        REQUIRE(r.fn == 0);
        REQUIRE_FALSE(r.excluded);
        // tp must equal the eroded reference's support.
        REQUIRE(r.tp == static_cast<long>(erode(sketch).nonzero_count()));
    }

    SECTION("an all-zero prediction scores 0.0") {
        SketchImage sketch(10, 10);
        for (int y = 2; y <= 7; ++y) {
            for (int x = 2; x <= 7; ++x) sketch.at(y, x) = 1;
        }
        const SketchImage pred(10, 10);
        const ImageRecall r = recall_from_masks(pred, sketch);
        REQUIRE(r.recall == 0.0);
        REQUIRE(r.tp == 0);
        REQUIRE_FALSE(r.excluded);
    }

    SECTION("random 8x8 pairs match the counting oracle exactly") {
        Rng rng(2718);
        int defined = 0;
        for (int trial = 0; trial < 60; ++trial) {
            // Blocky references so erosion usually leaves something.
            SketchImage sketch(8, 8);
            const int y0 = static_cast<int>(rng.uniform_int(0, 3));
            const int x0 = static_cast<int>(rng.uniform_int(0, 3));
            const int y1 = y0 + static_cast<int>(rng.uniform_int(2, 4));
            const int x1 = x0 + static_cast<int>(rng.uniform_int(2, 4));
            for (int y = y0; y <= std::min(y1, 7); ++y) {
                for (int x = x0; x <= std::min(x1, 7); ++x) sketch.at(y, x) = 1;
            }
            const SketchImage pred = random_mask(8, 8, rng.uniform(), rng);

            const OracleCounts oracle = recall_oracle(pred, sketch, true);
            const ImageRecall r = recall_from_masks(pred, sketch);
            INFO("trial " << trial);
            REQUIRE(r.tp == oracle.tp);
            REQUIRE(r.fn == oracle.fn);
            if (oracle.tp + oracle.fn == 0) {
                REQUIRE(r.excluded);
                REQUIRE(std::isnan(r.recall));
            } else {
                ++defined;
                REQUIRE_FALSE(r.excluded);
                REQUIRE(r.recall == static_cast<double>(oracle.tp) / (oracle.tp + oracle.fn));
            }
        }
        REQUIRE(defined >= 40);  // the oracle must actually get exercised
    }

    SECTION("adding predicted pixels never decreases recall") {
        Rng rng(3141);
        SketchImage sketch(12, 12);
        for (int y = 3; y <= 9; ++y) {
            for (int x = 3; x <= 9; ++x) sketch.at(y, x) = 1;
        }
        SketchImage pred = random_mask(12, 12, 0.2, rng);
        double prev = recall_from_masks(pred, sketch).recall;
        for (int step = 0; step < 30; ++step) {
            const int y = static_cast<int>(rng.uniform_int(0, 11));
            const int x = static_cast<int>(rng.uniform_int(0, 11));
            pred.at(y, x) = 1;
            const double cur = recall_from_masks(pred, sketch).recall;
            REQUIRE(cur >= prev);
            prev = cur;
        }
        for (auto& v : pred.v) v = 1;  // saturate: recall must top out
        REQUIRE(recall_from_masks(pred, sketch).recall == 1.0);
    }

    SECTION("counting over the crop equals counting over the full frame") {
        // The eroded reference lives inside the pre-erosion bbox, so
        // restricting the count to the crop must not change tp or fn.
        Rng rng(951);
        for (int trial = 0; trial < 15; ++trial) {
            SketchImage sketch(10, 14);
            for (int y = 2; y <= 6; ++y) {
                for (int x = 4; x <= 9; ++x) sketch.at(y, x) = 1;
            }
            const SketchImage pred = random_mask(10, 14, 0.5, rng);
            const SketchImage ref = erode_oracle(sketch, 3, 3);
            long tp = 0, fn = 0;
            for (size_t i = 0; i < ref.v.size(); ++i) {
                tp += pred.v[i] && ref.v[i];
                fn += !pred.v[i] && ref.v[i];
            }
            const ImageRecall r = recall_from_masks(pred, sketch);
            REQUIRE(r.tp == tp);
            REQUIRE(r.fn == fn);
        }
    }

    SECTION("thin references erode to empty and are excluded") {
        SketchImage sketch(9, 9);
        for (int x = 1; x <= 7; ++x) sketch.at(4, x) = 1;  // 1px stroke
        SketchImage pred(9, 9);
        for (auto& b : pred.v) b = 1;
        const ImageRecall r = recall_from_masks(pred, sketch);
        REQUIRE(r.excluded);
        REQUIRE(r.tp == 0);
        REQUIRE(r.fn == 0);
        REQUIRE(std::isnan(r.recall));
        REQUIRE(std::isnan(r.precision));

        // Disabling reference erosion rescues the thin-stroke case.
        EvalSettings keep;
        keep.erode_reference = false;
        const ImageRecall r2 = recall_from_masks(pred, sketch, keep);
        REQUIRE_FALSE(r2.excluded);
        REQUIRE(r2.recall == 1.0);
        REQUIRE(r2.tp == 7);
    }

    SECTION("precision and f1 are consistent auxiliaries") {
        SketchImage sketch(10, 10);
        for (int y = 2; y <= 7; ++y) {
            for (int x = 2; x <= 7; ++x) sketch.at(y, x) = 1;
        }
        const SketchImage ref = erode(sketch);
        const ImageRecall exact = recall_from_masks(ref, sketch);
        REQUIRE(exact.recall == 1.0);
        REQUIRE(exact.precision == 1.0);
        REQUIRE(exact.f1 == 1.0);

        Rng rng(11);
        const SketchImage pred = random_mask(10, 10, 0.5, rng);
        const ImageRecall r = recall_from_masks(pred, sketch);
        if (!r.excluded && r.precision + r.recall > 0) {
            REQUIRE(r.f1 == Catch::Approx(2 * r.precision * r.recall /
                                          (r.precision + r.recall)));
        }
    }

    SECTION("dimension mismatches are rejected") {
        SketchImage a(8, 8), b(8, 9);
        b.at(1, 1) = 1;
        REQUIRE_THROWS_MATCHES(recall_from_masks(a, b), InputError,
                               MessageMatches(ContainsSubstring("dims differ")));
        Tensor<double> img(1, 8, 8);
        REQUIRE_THROWS_MATCHES(recall(img, b), InputError,
                               MessageMatches(ContainsSubstring("dims differ")));
    }
}

TEST_CASE("full-image recall wires extraction into the count", "[evaluation]") {
    // Thick ring sketch (survives erosion) around a rendered circle.
    ShapeSpec spec;
    spec.kind = ShapeKind::circle;
    spec.cy = spec.cx = 15.5;
    spec.size = 8;
    spec.fill = 0.9;
    spec.bg = 0.1;
    const auto r = render_shape<double>(spec, 32, 32);
    const SketchImage ring = dilate(r.edge);  // 3px-wide band

    const ImageRecall via_recall = recall(r.image, ring);
    const SketchImage pred = binarize(extract_edges(r.image), 0.5);
    const ImageRecall via_masks = recall_from_masks(pred, ring);
    REQUIRE_FALSE(via_recall.excluded);
    REQUIRE(via_recall.recall == via_masks.recall);
    REQUIRE(via_recall.tp == via_masks.tp);
    REQUIRE(via_recall.bbox == contour_bbox(ring));

    // Settings thread through: a different threshold changes the count.
    EvalSettings strict;
    strict.threshold = 0.99;
    const ImageRecall tight = recall(r.image, ring, strict);
    REQUIRE(tight.tp <= via_recall.tp);
}

TEST_CASE("recall reports aggregate and serialize", "[evaluation]") {
    RecallReport report;
    ImageRecall a;
    a.id = "a";
    a.recall = 0.25;
    a.precision = 0.5;
    a.f1 = 1.0 / 3.0;
    a.tp = 1;
    a.fn = 3;
    a.bbox = {1, 1, 4, 4};
    ImageRecall b;
    b.id = "b";
    b.recall = 0.75;
    b.precision = 1.0;
    b.f1 = 6.0 / 7.0;
    b.tp = 3;
    b.fn = 1;
    b.bbox = {0, 0, 3, 3};
    ImageRecall c;
    c.id = "c";
    c.excluded = true;
    c.recall = std::nan("");
    report.rows = {a, b, c};
    report.finalize();

    REQUIRE(report.evaluated == 2);
    REQUIRE(report.excluded == 1);
    REQUIRE(report.mean_recall == 0.5);
    REQUIRE(report.mean_precision == 0.75);

    namespace fs = std::filesystem;
    fs::create_directories("data_scratch");
    const std::string path = "data_scratch/report.tsv";
    write_recall_report(report, path);
    REQUIRE_FALSE(fs::exists(path + ".tmp"));

    std::ifstream is(path);
    REQUIRE(is.good());
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    REQUIRE_THAT(text, ContainsSubstring("a\t0.250000\t1\t3\t(1,1)-(4,4)\t0"));
    REQUIRE_THAT(text, ContainsSubstring("b\t0.750000"));
    REQUIRE_THAT(text, ContainsSubstring("c\tundefined"));
    REQUIRE_THAT(text, ContainsSubstring("mean_recall\t0.500000"));
    REQUIRE_THAT(text, ContainsSubstring("evaluated\t2"));
    REQUIRE_THAT(text, ContainsSubstring("excluded\t1"));

    // Serialization is deterministic byte-for-byte.
    write_recall_report(report, "data_scratch/report2.tsv");
    std::ifstream is2("data_scratch/report2.tsv");
    std::string text2((std::istreambuf_iterator<char>(is2)), std::istreambuf_iterator<char>());
    REQUIRE(text == text2);
}

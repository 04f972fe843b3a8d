#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "usketch/error.hpp"
#include "usketch/io.hpp"
#include "usketch/tensor.hpp"

namespace usketch {

// One training record: image x, binary edge map e (same dims, values {0,1}),
// condition label y.
template <typename S>
struct Triplet {
    Tensor<S> x;
    Tensor<S> e;
    std::string y;
};

// On-disk layout: <dir>/index.tsv with "image<TAB>edge<TAB>label" rows,
// paths relative to the directory. Edge-map rasters must be strictly
// {0, 255}, mapped to {0, 1} on load.
template <typename S>
std::vector<Triplet<S>> load_triplet_dataset(const std::string& dir) {
    const std::string index_path = dir + "/index.tsv";
    std::ifstream is(index_path);
    if (!is) throw IoError("cannot open dataset index '" + index_path + "'");
    std::vector<Triplet<S>> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string img_rel, edge_rel, label;
        if (!std::getline(ls, img_rel, '\t') || !std::getline(ls, edge_rel, '\t') ||
            !std::getline(ls, label)) {
            throw InputError(index_path + ":" + std::to_string(lineno) +
                             ": expected image<TAB>edge<TAB>label");
        }
        Triplet<S> t;
        t.x = from_gray8<S>(read_png_gray(dir + "/" + img_rel));
        const GrayImage edge = read_png_gray(dir + "/" + edge_rel);
        t.e = Tensor<S>(1, edge.h, edge.w);
        for (size_t i = 0; i < edge.v.size(); ++i) {
            if (edge.v[i] != 0 && edge.v[i] != 255) {
                throw InputError(dir + "/" + edge_rel + ": edge map must be strictly {0,255}, found " +
                                 std::to_string(int(edge.v[i])));
            }
            t.e.v[i] = edge.v[i] == 255 ? S(1) : S(0);
        }
        if (!t.x.same_shape(t.e)) {
            throw InputError(index_path + ":" + std::to_string(lineno) +
                             ": image and edge dims differ");
        }
        t.y = label;
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace usketch

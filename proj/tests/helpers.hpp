// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "gradlens/model.hpp"
#include "gradlens/rng.hpp"

namespace gradlens::testing {

inline ModuleSpec linear_spec(const std::string& name, const std::string& src, std::size_t in,
                              std::size_t out, bool bias = true) {
    ModuleSpec m;
    m.name = name;
    m.kind = ModuleKind::Linear;
    m.sources = {src};
    m.in_features = in;
    m.out_features = out;
    m.has_bias = bias;
    return m;
}

inline ModuleSpec act_spec(const std::string& name, const std::string& src, ModuleKind kind) {
    ModuleSpec m;
    m.name = name;
    m.kind = kind;
    m.sources = {src};
    return m;
}

inline std::vector<ParamSlot> linear_params(Rng& rng, std::size_t in, std::size_t out, bool bias = true,
                                            double scale = 0.7) {
    std::vector<double> w(in * out);
    for (auto& v : w) v = rng.normal(0.0, scale);
    std::vector<ParamSlot> slots;
    slots.push_back({"weight", Tensor({out, in}, w)});
    if (bias) {
        std::vector<double> b(out);
        for (auto& v : b) v = rng.normal(0.0, scale);
        slots.push_back({"bias", Tensor({out}, b)});
    }
    return slots;
}

// Chain MLP x -> L0 -> act -> L1 -> act -> ... -> L_{k-1}; output key is the
// last linear. Widths has k+1 entries.
inline ModelGraph make_mlp(Rng& rng, const std::vector<std::size_t>& widths, ModuleKind act,
                           bool bias = true) {
    std::vector<ModuleSpec> mods;
    std::vector<std::vector<ParamSlot>> params;
    std::string prev = "x";
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        std::string lname = "l" + std::to_string(i);
        mods.push_back(linear_spec(lname, prev, widths[i], widths[i + 1], bias));
        params.push_back(linear_params(rng, widths[i], widths[i + 1], bias));
        prev = lname;
        if (i + 2 < widths.size()) {
            std::string aname = "a" + std::to_string(i);
            mods.push_back(act_spec(aname, prev, act));
            params.push_back({});
            prev = aname;
        }
    }
    return ModelGraph(std::move(mods), std::move(params), {"x"}, {prev});
}

inline Tensor random_input(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
    std::vector<double> vals(shape_product(shape));
    for (auto& v : vals) v = rng.normal(0.0, scale);
    return Tensor(std::move(shape), std::move(vals));
}

// Straight-line scalar re-implementation of a bias MLP with one hidden
// activation, written against raw vectors on purpose: it shares no code with
// the engine and serves as its oracle.
inline std::vector<double> scalar_mlp_forward(const std::vector<double>& x, std::size_t in,
                                              const std::vector<double>& w0, const std::vector<double>& b0,
                                              std::size_t hidden, const std::vector<double>& w1,
                                              const std::vector<double>& b1, std::size_t out, bool relu) {
    std::vector<double> h(hidden);
    for (std::size_t j = 0; j < hidden; ++j) {
        double acc = b0[j];
        for (std::size_t i = 0; i < in; ++i) acc += w0[j * in + i] * x[i];
        if (relu && acc < 0.0) acc = 0.0;
        h[j] = acc;
    }
    std::vector<double> y(out);
    for (std::size_t k = 0; k < out; ++k) {
        double acc = b1[k];
        for (std::size_t j = 0; j < hidden; ++j) acc += w1[k * hidden + j] * h[j];
        y[k] = acc;
    }
    return y;
}

}  // namespace gradlens::testing

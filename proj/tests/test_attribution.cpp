// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "gradlens/attribution.hpp"
#include "gradlens/errors.hpp"
#include "helpers.hpp"

using namespace gradlens;
using namespace gradlens::testing;

namespace {

AttributionConfig target_cfg(const std::string& key, std::size_t index) {
    AttributionConfig cfg;
    cfg.target.output_key = key;
    cfg.target.index = index;
    return cfg;
}

// Midpoint-rule integrated gradients with one engine pass per step. Shares
// no code with the stacked implementation it checks.
TensorMap ig_loop_oracle(const ModelGraph& g, const TensorMap& x, const TensorMap& base,
                         const std::string& key, std::size_t index, std::size_t steps) {
    TensorMap acc;
    for (std::size_t k = 0; k < steps; ++k) {
        double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
        TensorMap xk;
        for (const auto& leaf : x.leaf_keys())
            xk.put(leaf, base.get(leaf).zip(x.get(leaf), "lerp", [&](double b, double v) {
                return b + alpha * (v - b);
            }));
        ForwardResult fr = forward(g, xk, true);
        TensorMap seeds;
        seeds.put(key, one_hot_seed(fr.outputs.get(key), index));
        TensorMap grads = backward(*fr.tape, seeds);
        for (const auto& leaf : x.leaf_keys()) {
            Tensor gi = grads.get(leaf);
            if (acc.contains(leaf)) acc.put(leaf, acc.get(leaf) + gi);
            else acc.put(leaf, gi);
        }
    }
    TensorMap attr;
    for (const auto& leaf : x.leaf_keys()) {
        Tensor mean = acc.get(leaf) * (1.0 / static_cast<double>(steps));
        attr.put(leaf, x.get(leaf).zip(base.get(leaf), "diff", [](double v, double b) { return v - b; })
                           .zip(mean, "scale", [](double d, double m) { return d * m; }));
    }
    return attr;
}

double target_value(const ModelGraph& g, const TensorMap& x, const std::string& key, std::size_t index) {
    ForwardResult fr = forward(g, x, false);
    Tensor y = fr.outputs.get(key);
    std::size_t per = y.size() / y.shape()[0];
    double v = 0.0;
    for (std::size_t n = 0; n < y.shape()[0]; ++n) v += y.data()[n * per + index];
    return v;
}

double map_sum(const TensorMap& m) {
    double s = 0.0;
    for (const auto& key : m.leaf_keys()) s += m.get(key).sum();
    return s;
}

}  // namespace

TEST_CASE("saliency on a linear map returns the target weight row") {
    std::vector<ModuleSpec> mods{linear_spec("out", "x", 3, 2, true)};
    Tensor w({2, 3}, {0.5, -1.0, 2.0, 4.0, 0.25, -3.0});
    Tensor b({2}, {10.0, -7.0});
    ModelGraph g({mods}, {{{"weight", w}, {"bias", b}}}, {"x"}, {"out"});
    HookedModel m(g);

    TensorMap in;
    in.put("x", Tensor({2, 3}, {1.0, 2.0, 3.0, -1.0, 0.5, 0.25}));
    AttributionResult r = saliency(m, in, target_cfg("out", 1));

    Tensor expect({2, 3}, {4.0, 0.25, -3.0, 4.0, 0.25, -3.0});
    CHECK(r.attributions.get("x").allclose(expect, 1e-15, 0.0));
    CHECK(r.method == "saliency");

    AttributionConfig cfg = target_cfg("out", 1);
    cfg.multiply_by_inputs = true;
    AttributionResult rx = saliency(m, in, cfg);
    Tensor expect_x({2, 3}, {4.0, 0.5, -9.0, -4.0, 0.125, -0.75});
    CHECK(rx.attributions.get("x").allclose(expect_x, 1e-15, 0.0));
    CHECK(rx.method == "saliency.input");
    CHECK(rx.config_digest != r.config_digest);
}

TEST_CASE("saliency accepts an explicit vector seed over the output") {
    Rng rng(11);
    ModelGraph g = make_mlp(rng, {4, 5, 3}, ModuleKind::Tanh);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {2, 4}));

    ForwardResult fr = forward(g, in, false);
    Tensor y = fr.outputs.get("l1");
    AttributionConfig cfg = target_cfg("l1", 0);
    cfg.target.seed = one_hot_seed(y, 2);
    AttributionResult seeded = saliency(m, in, cfg);
    AttributionResult indexed = saliency(m, in, target_cfg("l1", 2));
    CHECK(seeded.attributions.get("x").allclose(indexed.attributions.get("x"), 1e-14, 0.0));

    AttributionConfig bad = cfg;
    bad.target.seed = Tensor({2, 7}, 1.0);
    CHECK_THROWS_AS(saliency(m, in, bad), ShapeError);
}

TEST_CASE("integrated gradients on a linear map is exact for any step count") {
    std::vector<ModuleSpec> mods{linear_spec("out", "x", 3, 2, false)};
    Tensor w({2, 3}, {0.5, -1.0, 2.0, 4.0, 0.25, -3.0});
    ModelGraph g({mods}, {{{"weight", w}}}, {"x"}, {"out"});
    HookedModel m(g);

    TensorMap in, base;
    in.put("x", Tensor({1, 3}, {2.0, -1.0, 0.5}));
    base.put("x", Tensor({1, 3}, {0.5, 0.5, 0.5}));

    AttributionConfig cfg = target_cfg("out", 0);
    cfg.baseline = base;
    cfg.steps = 1;
    AttributionResult one = integrated_gradients(m, in, cfg);
    cfg.steps = 9;
    AttributionResult nine = integrated_gradients(m, in, cfg);

    Tensor closed({1, 3}, {0.5 * 1.5, -1.0 * -1.5, 2.0 * 0.0});
    CHECK(one.attributions.get("x").allclose(closed, 1e-14, 0.0));
    CHECK(nine.attributions.get("x").allclose(closed, 1e-14, 0.0));
}

TEST_CASE("integrated gradients matches a one-pass-per-step oracle") {
    Rng rng(23);
    ModelGraph g = make_mlp(rng, {5, 7, 6, 3}, ModuleKind::Tanh);
    HookedModel m(g);
    TensorMap in, base;
    in.put("x", random_input(rng, {3, 5}, 0.8));
    base.put("x", random_input(rng, {3, 5}, 0.2));

    AttributionConfig cfg = target_cfg("l2", 1);
    cfg.baseline = base;
    cfg.steps = 17;
    AttributionResult fast = integrated_gradients(m, in, cfg);
    TensorMap slow = ig_loop_oracle(g, in, base, "l2", 1, 17);
    CHECK(fast.attributions.get("x").allclose(slow.get("x"), 1e-10, 1e-10));
}

TEST_CASE("integrated gradients completeness gap shrinks below 1e-3 at 512 steps") {
    Rng rng(31);
    ModelGraph g = make_mlp(rng, {6, 8, 8, 3}, ModuleKind::Tanh, true);
    HookedModel m(g);
    TensorMap in, base;
    in.put("x", random_input(rng, {2, 6}, 0.8));
    base.put("x", Tensor({2, 6}, 0.0));

    AttributionConfig cfg = target_cfg("l2", 1);
    cfg.baseline = base;
    cfg.steps = 512;
    AttributionResult r = integrated_gradients(m, in, cfg);

    double gap = std::abs(map_sum(r.attributions) -
                          (target_value(g, in, "l2", 1) - target_value(g, base, "l2", 1)));
    CHECK(gap < 1e-3);
}

TEST_CASE("integrated gradients zero-fills inputs that cannot reach the target") {
    std::vector<ModuleSpec> mods;
    ModuleSpec fx;
    fx.name = "fx";
    fx.kind = ModuleKind::Flatten;
    fx.sources = {"x"};
    ModuleSpec fz = fx;
    fz.name = "fz";
    fz.sources = {"z"};
    mods.push_back(fx);
    mods.push_back(fz);
    mods.push_back(linear_spec("out", "fx", 3, 2, false));
    Rng rng(5);
    ModelGraph g({mods}, {{}, {}, linear_params(rng, 3, 2, false)}, {"x", "z"}, {"out", "fz"});
    HookedModel m(g);

    TensorMap in, base;
    in.put("x", random_input(rng, {2, 3}));
    in.put("z", random_input(rng, {2, 4}));
    base.put("x", Tensor({2, 3}, 0.0));
    base.put("z", Tensor({2, 4}, 0.0));

    AttributionConfig cfg = target_cfg("out", 0);
    cfg.baseline = base;
    cfg.steps = 4;
    AttributionResult r = integrated_gradients(m, in, cfg);
    CHECK(r.attributions.get("z").abs_max() == 0.0);
    CHECK(r.attributions.get("x").abs_max() > 0.0);
}

TEST_CASE("integrated gradients validates steps and baseline") {
    Rng rng(3);
    ModelGraph g = make_mlp(rng, {3, 2}, ModuleKind::Relu);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {1, 3}));

    AttributionConfig cfg = target_cfg("l0", 0);
    CHECK_THROWS_AS(integrated_gradients(m, in, cfg), ConfigError);  // no baseline
    cfg.baseline = TensorMap();
    cfg.baseline->put("x", Tensor({1, 5}, 0.0));
    CHECK_THROWS_AS(integrated_gradients(m, in, cfg), ShapeError);
    cfg.baseline = in;
    cfg.steps = 0;
    CHECK_THROWS_AS(integrated_gradients(m, in, cfg), ConfigError);
}

TEST_CASE("conductance at an identity layer equals input integrated gradients") {
    std::vector<ModuleSpec> mods;
    ModuleSpec f;
    f.name = "f";
    f.kind = ModuleKind::Flatten;
    f.sources = {"x"};
    mods.push_back(f);
    mods.push_back(linear_spec("out", "f", 4, 2, true));
    Rng rng(41);
    ModelGraph g({mods}, {{}, linear_params(rng, 4, 2)}, {"x"}, {"out"});
    HookedModel m(g);

    TensorMap in, base;
    in.put("x", random_input(rng, {2, 4}));
    base.put("x", random_input(rng, {2, 4}, 0.3));

    AttributionConfig cfg = target_cfg("out", 1);
    cfg.baseline = base;
    cfg.steps = 8;
    AttributionResult cond = layer_conductance(m, in, cfg, "f");
    AttributionResult ig = integrated_gradients(m, in, cfg);
    CHECK(cond.attributions.get("f").allclose(ig.attributions.get("x"), 1e-12, 1e-12));
}

TEST_CASE("conductance completeness gap stays below 1e-3 at 512 steps") {
    Rng rng(47);
    ModelGraph g = make_mlp(rng, {6, 8, 8, 3}, ModuleKind::Tanh, true);
    HookedModel m(g);
    TensorMap in, base;
    in.put("x", random_input(rng, {2, 6}, 0.8));
    base.put("x", Tensor({2, 6}, 0.0));

    AttributionConfig cfg = target_cfg("l2", 2);
    cfg.baseline = base;
    cfg.steps = 512;
    AttributionResult r = layer_conductance(m, in, cfg, "a0");

    double gap = std::abs(r.attributions.get("a0").sum() -
                          (target_value(g, in, "l2", 2) - target_value(g, base, "l2", 2)));
    CHECK(gap < 1e-3);
}

TEST_CASE("units with zero path gradient have exactly zero conductance") {
    // Second hidden unit feeds the target through a zero weight column.
    std::vector<ModuleSpec> mods{linear_spec("h", "x", 2, 2, false), linear_spec("out", "h", 2, 1, false)};
    Tensor w0({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor w1({1, 2}, {5.0, 0.0});
    ModelGraph g({mods}, {{{"weight", w0}}, {{"weight", w1}}}, {"x"}, {"out"});
    HookedModel m(g);

    TensorMap in, base;
    in.put("x", Tensor({1, 2}, {1.0, -2.0}));
    base.put("x", Tensor({1, 2}, 0.0));

    AttributionConfig cfg = target_cfg("out", 0);
    cfg.baseline = base;
    cfg.steps = 5;
    AttributionResult r = layer_conductance(m, in, cfg, "h");
    Tensor cond = r.attributions.get("h");
    CHECK(cond.at({0, 1}) == 0.0);
    CHECK(cond.at({0, 0}) == doctest::Approx(5.0 * (1.0 * 1.0 + 2.0 * -2.0)).epsilon(1e-12));
}

TEST_CASE("grad-cam on a 1x1 conv matches the hand-computed map") {
    std::vector<ModuleSpec> mods;
    ModuleSpec conv;
    conv.name = "c";
    conv.kind = ModuleKind::Conv2d;
    conv.sources = {"x"};
    conv.in_channels = 2;
    conv.out_channels = 2;
    conv.kernel = 1;
    conv.has_bias = false;
    mods.push_back(conv);
    ModuleSpec fl;
    fl.name = "f";
    fl.kind = ModuleKind::Flatten;
    fl.sources = {"c"};
    mods.push_back(fl);
    mods.push_back(linear_spec("out", "f", 8, 1, false));

    // conv: out0 = x0 + 2*x1, out1 = -x0 + x1; final layer sums everything.
    Tensor wc({2, 2, 1, 1}, {1.0, 2.0, -1.0, 1.0});
    Tensor wl({1, 8}, 1.0);
    ModelGraph g({mods}, {{{"weight", wc}}, {}, {{"weight", wl}}}, {"x"}, {"out"});
    HookedModel m(g);

    TensorMap in;
    Tensor x({1, 2, 2, 2}, {1.0, 2.0, 3.0, 4.0, 0.5, -0.5, 1.0, -2.0});
    in.put("x", x);

    AttributionResult r = grad_cam(m, in, target_cfg("out", 0), "c");

    // Channel weights are both 1 (gradient of a plain sum), so the pre-clamp
    // map is the channel sum of the conv output.
    Tensor pre({1, 2, 2}, 0.0);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t wpos = 0; wpos < 2; ++wpos) {
            double x0 = x.at({0, 0, h, wpos}), x1 = x.at({0, 1, h, wpos});
            pre.set({0, h, wpos}, (x0 + 2 * x1) + (-x0 + x1));
        }
    CHECK(r.details.get("c.pre").allclose(pre, 1e-12, 0.0));
    CHECK(r.details.get("c.cam").allclose(pre.map([](double v) { return v > 0 ? v : 0.0; }), 1e-12, 0.0));
    CHECK(r.attributions.get("x").shape() == std::vector<std::size_t>{1, 2, 2});

    // Doubling the seed doubles the pre-clamp map.
    AttributionConfig twice = target_cfg("out", 0);
    ForwardResult fr = forward(g, in, false);
    twice.target.seed = one_hot_seed(fr.outputs.get("out"), 0) * 2.0;
    AttributionResult r2 = grad_cam(m, in, twice, "c");
    CHECK(r2.details.get("c.pre").allclose(pre * 2.0, 1e-12, 0.0));
}

TEST_CASE("grad-cam clamps negative regions and upsamples by nearest neighbour") {
    std::vector<ModuleSpec> mods;
    ModuleSpec conv;
    conv.name = "c";
    conv.kind = ModuleKind::Conv2d;
    conv.sources = {"x"};
    conv.in_channels = 1;
    conv.out_channels = 1;
    conv.kernel = 2;
    conv.stride = 2;
    conv.has_bias = false;
    mods.push_back(conv);
    ModuleSpec fl;
    fl.name = "f";
    fl.kind = ModuleKind::Flatten;
    fl.sources = {"c"};
    mods.push_back(fl);
    mods.push_back(linear_spec("out", "f", 4, 1, false));

    Tensor wc({1, 1, 2, 2}, 0.25);
    Tensor wl({1, 4}, 1.0);
    ModelGraph g({mods}, {{{"weight", wc}}, {}, {{"weight", wl}}}, {"x"}, {"out"});
    HookedModel m(g);

    // Quadrant means: +2 in the top-left, -1 in the bottom-right.
    Tensor x({1, 1, 4, 4}, 0.0);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t wpos = 0; wpos < 2; ++wpos) {
            x.set({0, 0, h, wpos}, 2.0);
            x.set({0, 0, h + 2, wpos + 2}, -1.0);
        }
    TensorMap in;
    in.put("x", x);

    AttributionResult r = grad_cam(m, in, target_cfg("out", 0), "c");
    Tensor cam = r.details.get("c.cam");
    CHECK(cam.at({0, 0, 0}) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(cam.at({0, 1, 1}) == 0.0);  // negative quadrant clamps to zero

    Tensor up = r.attributions.get("x");
    CHECK(up.shape() == std::vector<std::size_t>{1, 4, 4});
    for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t wpos = 0; wpos < 4; ++wpos)
            CHECK(up.at({0, h, wpos}) == cam.at({0, h / 2, wpos / 2}));
}

TEST_CASE("grad-cam rejects sites without a spatial feature map") {
    Rng rng(7);
    ModelGraph g = make_mlp(rng, {4, 5, 2}, ModuleKind::Relu);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {1, 4}));
    CHECK_THROWS_AS(grad_cam(m, in, target_cfg("l1", 0), "l0"), ShapeError);
}

TEST_CASE("guided backprop equals saliency on relu-free models") {
    Rng rng(53);
    ModelGraph g = make_mlp(rng, {4, 6, 3}, ModuleKind::Tanh);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {2, 4}));

    AttributionResult guided = guided_backprop(m, in, target_cfg("l1", 1));
    AttributionResult plain = saliency(m, in, target_cfg("l1", 1));
    CHECK(guided.attributions.get("x").bitwise_equal(plain.attributions.get("x")));
}

TEST_CASE("guided backprop matches a manual modified-backward oracle") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        ModelGraph g = make_mlp(rng, {2, 2, 1}, ModuleKind::Relu);
        HookedModel m(g);
        Tensor x = random_input(rng, {1, 2});
        TensorMap in;
        in.put("x", x);

        AttributionResult r = guided_backprop(m, in, target_cfg("l1", 0));

        const auto& w0 = g.params_of(0)[0].value;
        const auto& b0 = g.params_of(0)[1].value;
        const auto& w1 = g.params_of(*g.module_index("l1"))[0].value;
        double gx[2] = {0.0, 0.0};
        for (std::size_t j = 0; j < 2; ++j) {
            double z = b0.data()[j];
            for (std::size_t i = 0; i < 2; ++i) z += w0.data()[j * 2 + i] * x.data()[i];
            double gin = w1.data()[j];
            if (gin < 0.0) gin = 0.0;  // guided: drop negative signal
            if (z <= 0.0) gin = 0.0;   // relu: drop inactive units
            for (std::size_t i = 0; i < 2; ++i) gx[i] += gin * w0.data()[j * 2 + i];
        }
        CHECK(r.attributions.get("x").allclose(Tensor({1, 2}, {gx[0], gx[1]}), 1e-13, 1e-13));
    }
}

TEST_CASE("guided backprop is nonnegative for positive weights and inputs") {
    Rng rng(61);
    std::vector<ModuleSpec> mods{linear_spec("l0", "x", 3, 4, false), act_spec("r", "l0", ModuleKind::Relu),
                                 linear_spec("l1", "r", 4, 2, false)};
    auto abs_params = [&](std::size_t in, std::size_t out) {
        std::vector<double> w(in * out);
        for (auto& v : w) v = std::abs(rng.normal(0.0, 1.0));
        return std::vector<ParamSlot>{{"weight", Tensor({out, in}, w)}};
    };
    ModelGraph g({mods}, {abs_params(3, 4), {}, abs_params(4, 2)}, {"x"}, {"l1"});
    HookedModel m(g);
    TensorMap in;
    in.put("x", Tensor({2, 3}, {0.5, 1.0, 2.0, 0.1, 0.2, 0.3}));

    AttributionConfig cfg = target_cfg("l1", 0);
    cfg.multiply_by_inputs = true;
    AttributionResult r = guided_backprop(m, in, cfg);
    CHECK(r.attributions.get("x").min_value() >= 0.0);
}

TEST_CASE("activation maximisation finds the closed-form ridge optimum") {
    std::vector<ModuleSpec> mods{linear_spec("l", "x", 1, 1, false)};
    ModelGraph g({mods}, {{{"weight", Tensor({1, 1}, {3.0})}}}, {"x"}, {"l"});
    HookedModel m(g);

    TensorMap start;
    start.put("x", Tensor({1, 1}, 0.0));
    MaximisationOptions opts;
    opts.lr = 0.2;
    opts.iters = 300;
    opts.l2 = 0.5;
    MaximisationResult r = activation_maximisation(m, "l", 0, start, opts);

    // argmax of 3x - 0.5 x^2 is x = w / (2 l2) = 3.
    CHECK(r.pre_image.get("x").at({0, 0}) == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(r.objective.size() == opts.iters + 1);
    CHECK(r.activation.size() == opts.iters + 1);
    for (std::size_t i = 1; i < r.objective.size(); ++i) CHECK(r.objective[i] >= r.objective[i - 1] - 1e-12);
}

TEST_CASE("activation maximisation stays at a symmetric saddle") {
    std::vector<ModuleSpec> mods{linear_spec("p", "x", 1, 1, false), act_spec("tp", "p", ModuleKind::Tanh),
                                 linear_spec("q", "x", 1, 1, false), act_spec("tq", "q", ModuleKind::Tanh)};
    ModuleSpec add;
    add.name = "s";
    add.kind = ModuleKind::Add;
    add.sources = {"tp", "tq"};
    mods.push_back(add);
    ModelGraph g({mods}, {{{"weight", Tensor({1, 1}, {2.0})}}, {}, {{"weight", Tensor({1, 1}, {-2.0})}}, {}, {}},
                 {"x"}, {"s"});
    HookedModel m(g);

    TensorMap start;
    start.put("x", Tensor({1, 1}, {0.7}));
    MaximisationOptions opts;
    opts.lr = 0.3;
    opts.iters = 25;
    MaximisationResult r = activation_maximisation(m, "s", 0, start, opts);
    CHECK(r.pre_image.get("x").bitwise_equal(start.get("x")));
    for (double a : r.activation) CHECK(std::abs(a) < 1e-15);
}

TEST_CASE("activation maximisation validates options and seeds its noise") {
    Rng rng(3);
    ModelGraph g = make_mlp(rng, {2, 3, 2}, ModuleKind::Tanh);
    HookedModel m(g);
    TensorMap start;
    start.put("x", Tensor({1, 2}, 0.0));

    MaximisationOptions opts;
    opts.lr = 0.0;
    CHECK_THROWS_AS(activation_maximisation(m, "l1", 0, start, opts), ConfigError);
    opts.lr = 0.1;
    opts.iters = 0;
    CHECK_THROWS_AS(activation_maximisation(m, "l1", 0, start, opts), ConfigError);
    opts.iters = 5;
    opts.l2 = -1.0;
    CHECK_THROWS_AS(activation_maximisation(m, "l1", 0, start, opts), ConfigError);

    opts.l2 = 0.0;
    opts.init_noise = 0.5;
    opts.seed = 99;
    MaximisationResult a = activation_maximisation(m, "l1", 1, start, opts);
    MaximisationResult b = activation_maximisation(m, "l1", 1, start, opts);
    CHECK(a.pre_image.get("x").bitwise_equal(b.pre_image.get("x")));
    opts.seed = 100;
    MaximisationResult c = activation_maximisation(m, "l1", 1, start, opts);
    CHECK_FALSE(a.pre_image.get("x").bitwise_equal(c.pre_image.get("x")));
}

TEST_CASE("pixel flipping produces the hand-computed curve on a linear model") {
    std::vector<ModuleSpec> mods{linear_spec("out", "x", 4, 2, false)};
    Tensor w({2, 4}, {1.0, 2.0, 3.0, 4.0, -1.0, 1.0, -1.0, 1.0});
    ModelGraph g({mods}, {{{"weight", w}}}, {"x"}, {"out"});
    HookedModel m(g);

    TensorMap in;
    Tensor x({1, 4}, {1.0, 1.0, 1.0, 1.0});
    in.put("x", x);

    AttributionConfig cfg = target_cfg("out", 0);
    cfg.multiply_by_inputs = true;
    AttributionResult attr = saliency(m, in, cfg);  // relevance 1,2,3,4

    TargetSpec metric;
    metric.output_key = "out";
    metric.index = 0;
    FlipCurve curve = pixel_flipping(m, in, attr, metric, {0.0, 0.5, 1.0}, FillMode::Zero);

    // f=0: logit 10; f=0.5 flips coords 3,2 -> logit 3; f=1: logit 0.
    CHECK(curve.logit[0] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(curve.logit[1] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(curve.logit[2] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(curve.auc_logit == doctest::Approx(0.25 * 13.0 + 0.25 * 3.0).epsilon(1e-12));

    // Probability uses the softmax over the output axis.
    double p0 = std::exp(10.0) / (std::exp(10.0) + std::exp(0.0));
    CHECK(curve.prob[0] == doctest::Approx(p0).epsilon(1e-12));
}

TEST_CASE("pixel flipping breaks relevance ties by ascending coordinate") {
    std::vector<ModuleSpec> mods{linear_spec("out", "x", 4, 2, false)};
    Tensor w({2, 4}, {1.0, 2.0, 4.0, 8.0, 0.0, 0.0, 0.0, 0.0});
    ModelGraph g({mods}, {{{"weight", w}}}, {"x"}, {"out"});
    HookedModel m(g);
    TensorMap in;
    in.put("x", Tensor({1, 4}, 1.0));

    AttributionResult attr;
    attr.attributions.put("x", Tensor({1, 4}, 1.0));  // all tied

    TargetSpec metric;
    metric.output_key = "out";
    FlipCurve curve = pixel_flipping(m, in, attr, metric, {0.5}, FillMode::Zero);
    // Coordinates 0 and 1 go first, so the surviving logit is 4 + 8.
    CHECK(curve.logit[0] == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("pixel flipping supports mean and baseline fills") {
    std::vector<ModuleSpec> mods{linear_spec("out", "x", 2, 2, false)};
    Tensor w({2, 2}, {1.0, 1.0, 0.0, 0.0});
    ModelGraph g({mods}, {{{"weight", w}}}, {"x"}, {"out"});
    HookedModel m(g);
    TensorMap in;
    in.put("x", Tensor({1, 2}, {4.0, 0.0}));

    AttributionResult attr;
    attr.attributions.put("x", Tensor({1, 2}, {1.0, 0.0}));

    TargetSpec metric;
    metric.output_key = "out";
    FlipCurve mean_curve = pixel_flipping(m, in, attr, metric, {0.5}, FillMode::Mean);
    CHECK(mean_curve.logit[0] == doctest::Approx(2.0 + 0.0).epsilon(1e-12));  // 4 -> mean 2

    TensorMap base;
    base.put("x", Tensor({1, 2}, {-1.0, -1.0}));
    FlipCurve base_curve = pixel_flipping(m, in, attr, metric, {0.5}, FillMode::Baseline, base);
    CHECK(base_curve.logit[0] == doctest::Approx(-1.0 + 0.0).epsilon(1e-12));

    CHECK_THROWS_AS(pixel_flipping(m, in, attr, metric, {0.5}, FillMode::Baseline), ConfigError);
}

TEST_CASE("pixel flipping validates fractions and attribution shapes") {
    Rng rng(9);
    ModelGraph g = make_mlp(rng, {3, 2}, ModuleKind::Relu);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {1, 3}));
    AttributionResult attr = saliency(m, in, target_cfg("l0", 0));

    TargetSpec metric;
    metric.output_key = "l0";
    CHECK_THROWS_AS(pixel_flipping(m, in, attr, metric, {}, FillMode::Zero), ConfigError);
    CHECK_THROWS_AS(pixel_flipping(m, in, attr, metric, {0.5, 0.25}, FillMode::Zero), ConfigError);
    CHECK_THROWS_AS(pixel_flipping(m, in, attr, metric, {-0.1}, FillMode::Zero), ConfigError);
    CHECK_THROWS_AS(pixel_flipping(m, in, attr, metric, {1.5}, FillMode::Zero), ConfigError);

    AttributionResult bad;
    bad.attributions.put("x", Tensor({1, 7}, 0.0));
    CHECK_THROWS_AS(pixel_flipping(m, in, bad, metric, {0.5}, FillMode::Zero), ShapeError);
    AttributionResult stranger;
    stranger.attributions.put("y", Tensor({1, 3}, 0.0));
    CHECK_THROWS_AS(pixel_flipping(m, in, stranger, metric, {0.5}, FillMode::Zero), KeyError);
}

TEST_CASE("flipping by gradient order degrades the logit faster than random order") {
    std::vector<double> fractions{0.0, 0.25, 0.5, 0.75, 1.0};
    double grad_auc = 0.0, rand_auc = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        std::vector<ModuleSpec> mods{linear_spec("out", "x", 8, 2, false)};
        ModelGraph g({mods}, {linear_params(rng, 8, 2, false)}, {"x"}, {"out"});
        HookedModel m(g);
        TensorMap in;
        std::vector<double> xv(8);
        for (auto& v : xv) v = rng.uniform(0.5, 1.5);
        in.put("x", Tensor({1, 8}, xv));

        AttributionConfig cfg = target_cfg("out", 0);
        cfg.multiply_by_inputs = true;
        AttributionResult grad_attr = saliency(m, in, cfg);

        AttributionResult rand_attr;
        rand_attr.attributions.put("x", random_input(rng, {1, 8}));

        TargetSpec metric;
        metric.output_key = "out";
        grad_auc += pixel_flipping(m, in, grad_attr, metric, fractions, FillMode::Zero).auc_logit;
        rand_auc += pixel_flipping(m, in, rand_attr, metric, fractions, FillMode::Zero).auc_logit;
    }
    CHECK(grad_auc / 20.0 < rand_auc / 20.0);
}

TEST_CASE("glob matching covers literal, star, and question patterns") {
    CHECK(glob_match("*", "anything.at.all"));
    CHECK(glob_match("backbone.*", "backbone.conv1"));
    CHECK_FALSE(glob_match("backbone.*", "head.fc"));
    CHECK(glob_match("l?", "l0"));
    CHECK_FALSE(glob_match("l?", "l10"));
    CHECK(glob_match("*.weight", "encoder.layer.weight"));
    CHECK(glob_match("exact", "exact"));
    CHECK_FALSE(glob_match("exact", "exactly"));
    CHECK(glob_match("a*b*c", "a-x-b-y-c"));
    CHECK_FALSE(glob_match("a*b*c", "a-x-c"));
}

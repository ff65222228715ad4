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

double row_sum(const Tensor& t, std::size_t n) {
    std::size_t per = t.size() / t.shape()[0];
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) s += t.data()[n * per + i];
    return s;
}

double map_row_sum(const TensorMap& m, std::size_t n) {
    double s = 0.0;
    for (const auto& key : m.leaf_keys()) s += row_sum(m.get(key), n);
    return s;
}

// Small conv stack: x[2,4,4] -> conv(2->3,k3,p1) -> relu -> pool2 -> flatten
// -> linear(12->3), everything bias-free.
ModelGraph conv_net(Rng& rng) {
    std::vector<ModuleSpec> mods;
    ModuleSpec conv;
    conv.name = "c";
    conv.kind = ModuleKind::Conv2d;
    conv.sources = {"x"};
    conv.in_channels = 2;
    conv.out_channels = 3;
    conv.kernel = 3;
    conv.pad = 1;
    conv.has_bias = false;
    mods.push_back(conv);
    mods.push_back(act_spec("r", "c", ModuleKind::Relu));
    ModuleSpec pool;
    pool.name = "p";
    pool.kind = ModuleKind::AvgPool2d;
    pool.sources = {"r"};
    pool.pool_kernel = 2;
    mods.push_back(pool);
    ModuleSpec fl;
    fl.name = "f";
    fl.kind = ModuleKind::Flatten;
    fl.sources = {"p"};
    mods.push_back(fl);
    mods.push_back(linear_spec("out", "f", 12, 3, false));

    std::vector<double> wc(3 * 2 * 3 * 3);
    for (auto& v : wc) v = rng.normal(0.0, 0.4);
    ModelGraph g({mods}, {{{"weight", Tensor({3, 2, 3, 3}, wc)}}, {}, {}, {}, linear_params(rng, 12, 3, false)},
                 {"x"}, {"out"});
    return g;
}

}  // namespace

TEST_CASE("conservative rules conserve relevance on bias-free relu networks") {
    Rng rng(101);
    ModelGraph g = make_mlp(rng, {5, 7, 6, 3}, ModuleKind::Relu, false);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {3, 5}));

    ForwardResult fr = forward(g, in, false);
    Tensor y = fr.outputs.get("l2");

    for (auto kind : {LrpRuleSpec::Kind::Lrp0, LrpRuleSpec::Kind::ZPlus, LrpRuleSpec::Kind::Flat,
                      LrpRuleSpec::Kind::WSquare}) {
        LrpRuleSpec spec;
        spec.kind = kind;
        AttributionResult r = lrp(m, in, target_cfg("l2", 1), LrpRules::uniform(spec));
        for (std::size_t n = 0; n < 3; ++n) {
            double init = y.at({n, 1});
            CHECK(map_row_sum(r.attributions, n) == doctest::Approx(init).epsilon(1e-10));
            // Layer audit: relevance entering every module equals the init.
            for (const auto& site : {"l0", "a0", "l1", "a1", "l2"})
                CHECK(row_sum(r.details.get(site), n) == doctest::Approx(init).epsilon(1e-10));
        }
    }
}

TEST_CASE("lrp0 equals gradient times input on bias-free relu networks") {
    for (std::uint64_t seed : {7ull, 19ull, 33ull}) {
        Rng rng(seed);
        ModelGraph g = make_mlp(rng, {4, 6, 5, 2}, ModuleKind::Relu, false);
        HookedModel m(g);
        TensorMap in;
        in.put("x", random_input(rng, {2, 4}));

        AttributionResult relevance = lrp(m, in, target_cfg("l2", 0), LrpRules::uniform(LrpRuleSpec::lrp0()));
        AttributionConfig cfg = target_cfg("l2", 0);
        cfg.multiply_by_inputs = true;
        AttributionResult grads = saliency(m, in, cfg);
        CHECK(relevance.attributions.get("x").allclose(grads.attributions.get("x"), 1e-8, 1e-8));
    }
}

TEST_CASE("epsilon rule approaches lrp0 as epsilon shrinks") {
    Rng rng(55);
    ModelGraph g = make_mlp(rng, {4, 5, 2}, ModuleKind::Relu, false);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {1, 4}));

    AttributionResult exact = lrp(m, in, target_cfg("l1", 1), LrpRules::uniform(LrpRuleSpec::lrp0()));
    AttributionResult tiny = lrp(m, in, target_cfg("l1", 1), LrpRules::uniform(LrpRuleSpec::eps(1e-12)));
    AttributionResult fat = lrp(m, in, target_cfg("l1", 1), LrpRules::uniform(LrpRuleSpec::eps(0.5)));

    CHECK(tiny.attributions.get("x").allclose(exact.attributions.get("x"), 1e-8, 1e-8));
    CHECK_FALSE(fat.attributions.get("x").allclose(exact.attributions.get("x"), 1e-4, 1e-4));
}

TEST_CASE("gamma at zero reduces to lrp0") {
    Rng rng(62);
    ModelGraph g = make_mlp(rng, {4, 6, 3}, ModuleKind::Relu, false);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {2, 4}));

    AttributionResult plain = lrp(m, in, target_cfg("l1", 2), LrpRules::uniform(LrpRuleSpec::lrp0()));
    AttributionResult g0 = lrp(m, in, target_cfg("l1", 2), LrpRules::uniform(LrpRuleSpec::gamma_rule(0.0)));
    CHECK(g0.attributions.get("x").allclose(plain.attributions.get("x"), 1e-12, 1e-12));

    AttributionResult g25 = lrp(m, in, target_cfg("l1", 2), LrpRules::uniform(LrpRuleSpec::gamma_rule(0.25)));
    CHECK_FALSE(g25.attributions.get("x").allclose(plain.attributions.get("x"), 1e-6, 1e-6));
}

TEST_CASE("zplus yields nonnegative attributions when the init is nonnegative") {
    Rng rng(71);
    ModelGraph g = make_mlp(rng, {4, 6, 2}, ModuleKind::Relu, false);
    HookedModel m(g);
    TensorMap in;
    in.put("x", Tensor({1, 4}, {0.5, 1.0, 0.25, 2.0}));

    ForwardResult fr = forward(g, in, false);
    std::size_t idx = fr.outputs.get("l1").at({0, 0}) >= 0.0 ? 0 : 1;
    REQUIRE(fr.outputs.get("l1").at({0, idx}) >= 0.0);

    AttributionResult r = lrp(m, in, target_cfg("l1", idx), LrpRules::uniform(LrpRuleSpec::zplus()));
    CHECK(r.attributions.get("x").min_value() >= 0.0);
}

TEST_CASE("wsquare distributes by squared weight independent of the input") {
    std::vector<ModuleSpec> mods{linear_spec("out", "x", 3, 1, false)};
    Tensor w({1, 3}, {1.0, 2.0, 2.0});
    ModelGraph g({mods}, {{{"weight", w}}}, {"x"}, {"out"});
    HookedModel m(g);

    for (double scale : {1.0, -3.0}) {
        TensorMap in;
        in.put("x", Tensor({1, 3}, {0.7 * scale, -1.1 * scale, 0.2 * scale}));
        ForwardResult fr = forward(g, in, false);
        double logit = fr.outputs.get("out").at({0, 0});

        AttributionResult r = lrp(m, in, target_cfg("out", 0), LrpRules::uniform(LrpRuleSpec::wsquare()));
        Tensor attr = r.attributions.get("x");
        CHECK(attr.at({0, 0}) == doctest::Approx(logit * 1.0 / 9.0).epsilon(1e-12));
        CHECK(attr.at({0, 1}) == doctest::Approx(logit * 4.0 / 9.0).epsilon(1e-12));
        CHECK(attr.at({0, 2}) == doctest::Approx(logit * 4.0 / 9.0).epsilon(1e-12));
    }
}

TEST_CASE("flat splits relevance uniformly across contributing inputs") {
    std::vector<ModuleSpec> mods{linear_spec("out", "x", 4, 1, false)};
    Tensor w({1, 4}, {5.0, -2.0, 0.5, 100.0});
    ModelGraph g({mods}, {{{"weight", w}}}, {"x"}, {"out"});
    HookedModel m(g);
    TensorMap in;
    in.put("x", Tensor({1, 4}, {1.0, 2.0, 3.0, 4.0}));

    ForwardResult fr = forward(g, in, false);
    double logit = fr.outputs.get("out").at({0, 0});
    AttributionResult r = lrp(m, in, target_cfg("out", 0), LrpRules::uniform(LrpRuleSpec::flat()));
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(r.attributions.get("x").at({0, i}) == doctest::Approx(logit / 4.0).epsilon(1e-12));
}

TEST_CASE("rule assignment is ordered and first match wins") {
    std::vector<ModuleSpec> mods{linear_spec("l0", "x", 2, 2, false), linear_spec("l1", "l0", 2, 1, false)};
    Tensor w0({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor w1({1, 2}, {3.0, 5.0});
    ModelGraph g({mods}, {{{"weight", w0}}, {{"weight", w1}}}, {"x"}, {"l1"});
    HookedModel m(g);
    TensorMap in;
    in.put("x", Tensor({1, 2}, {1.0, 2.0}));

    // y = 13. flat at l1 gives both hidden units 6.5; the identity first
    // layer then passes those straight to the inputs under lrp0.
    LrpRules mixed{{{"l1", LrpRuleSpec::flat()}, {"*", LrpRuleSpec::lrp0()}}};
    AttributionResult r = lrp(m, in, target_cfg("l1", 0), mixed);
    CHECK(r.attributions.get("x").allclose(Tensor({1, 2}, {6.5, 6.5}), 1e-12, 0.0));

    // An earlier match shadows the later catch-all.
    LrpRules shadowed{{{"l*", LrpRuleSpec::lrp0()}, {"l1", LrpRuleSpec::flat()}, {"*", LrpRuleSpec::lrp0()}}};
    AttributionResult shadow = lrp(m, in, target_cfg("l1", 0), shadowed);
    CHECK(shadow.attributions.get("x").allclose(Tensor({1, 2}, {3.0, 10.0}), 1e-12, 0.0));
}

TEST_CASE("rule assignment validation rejects bad lists") {
    Rng rng(5);
    ModelGraph g = make_mlp(rng, {3, 2}, ModuleKind::Relu, false);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {1, 3}));
    AttributionConfig cfg = target_cfg("l0", 0);

    CHECK_THROWS_AS(lrp(m, in, cfg, LrpRules{}), ConfigError);
    LrpRules no_default{{{"l0", LrpRuleSpec::lrp0()}}};
    CHECK_THROWS_AS(lrp(m, in, cfg, no_default), ConfigError);
    LrpRules bad_eps{{{"*", LrpRuleSpec::eps(0.0)}}};
    CHECK_THROWS_AS(lrp(m, in, cfg, bad_eps), ConfigError);
    LrpRules bad_gamma{{{"*", LrpRuleSpec::gamma_rule(-0.1)}}};
    CHECK_THROWS_AS(lrp(m, in, cfg, bad_gamma), ConfigError);
}

TEST_CASE("lrp0 fails hard on a zero denominator and points at epsilon") {
    std::vector<ModuleSpec> mods{linear_spec("l0", "x", 2, 2, false), linear_spec("l1", "l0", 2, 1, false)};
    Tensor w0({2, 2}, {1.0, -1.0, 1.0, 1.0});  // unit 0 cancels on x = (1, 1)
    Tensor w1({1, 2}, {1.0, 1.0});
    ModelGraph g({mods}, {{{"weight", w0}}, {{"weight", w1}}}, {"x"}, {"l1"});
    HookedModel m(g);
    TensorMap in;
    in.put("x", Tensor({1, 2}, {1.0, 1.0}));

    // flat pushes nonzero relevance into the cancelled unit.
    LrpRules mixed{{{"l1", LrpRuleSpec::flat()}, {"*", LrpRuleSpec::lrp0()}}};
    try {
        lrp(m, in, target_cfg("l1", 0), mixed);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("epsilon") != std::string::npos);
    }
}

TEST_CASE("conv, pool, and flatten conserve relevance layer by layer") {
    Rng rng(202);
    ModelGraph g = conv_net(rng);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {2, 2, 4, 4}, 0.8));

    ForwardResult fr = forward(g, in, false);
    Tensor y = fr.outputs.get("out");

    for (auto kind : {LrpRuleSpec::Kind::Lrp0, LrpRuleSpec::Kind::ZPlus, LrpRuleSpec::Kind::WSquare}) {
        LrpRuleSpec spec;
        spec.kind = kind;
        AttributionResult r = lrp(m, in, target_cfg("out", 2), LrpRules::uniform(spec));
        for (std::size_t n = 0; n < 2; ++n) {
            double init = y.at({n, 2});
            CHECK(map_row_sum(r.attributions, n) == doctest::Approx(init).epsilon(1e-10));
            for (const auto& site : {"c", "r", "p", "f", "out"})
                CHECK(row_sum(r.details.get(site), n) == doctest::Approx(init).epsilon(1e-10));
        }
    }
}

TEST_CASE("probability-space initialisation starts from the softmax score") {
    Rng rng(88);
    ModelGraph g = make_mlp(rng, {4, 6, 3}, ModuleKind::Relu, false);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {2, 4}));

    ForwardResult fr = forward(g, in, false);
    Tensor y = fr.outputs.get("l1");

    AttributionConfig cfg = target_cfg("l1", 1);
    cfg.prob_space = true;
    AttributionResult r = lrp(m, in, cfg, LrpRules::uniform(LrpRuleSpec::lrp0()));
    for (std::size_t n = 0; n < 2; ++n) {
        double z = 0.0;
        for (std::size_t j = 0; j < 3; ++j) z += std::exp(y.at({n, j}));
        double prob = std::exp(y.at({n, 1})) / z;
        CHECK(map_row_sum(r.attributions, n) == doctest::Approx(prob).epsilon(1e-10));
    }
}

TEST_CASE("activations and softmax pass relevance through unchanged") {
    Rng rng(93);
    ModelGraph g = make_mlp(rng, {4, 5, 3}, ModuleKind::Tanh, false);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {1, 4}));

    AttributionResult r = lrp(m, in, target_cfg("l1", 0), LrpRules::uniform(LrpRuleSpec::lrp0()));
    CHECK(r.details.get("a0").bitwise_equal(r.details.get("l0")));

    // Softmax output: the init is the masked probability and the pass-through
    // keeps sums equal to it.
    std::vector<ModuleSpec> mods{linear_spec("l", "x", 3, 3, false), act_spec("sm", "l", ModuleKind::Softmax)};
    ModelGraph gs({mods}, {linear_params(rng, 3, 3, false), {}}, {"x"}, {"sm"});
    HookedModel ms(gs);
    TensorMap ins;
    ins.put("x", random_input(rng, {1, 3}));
    ForwardResult fs = forward(gs, ins, false);
    double prob = fs.outputs.get("sm").at({0, 1});
    AttributionResult rs = lrp(ms, ins, target_cfg("sm", 1), LrpRules::uniform(LrpRuleSpec::lrp0()));
    CHECK(map_row_sum(rs.attributions, 0) == doctest::Approx(prob).epsilon(1e-10));
}

TEST_CASE("relevance through add splits by contribution") {
    std::vector<ModuleSpec> mods;
    ModuleSpec fa;
    fa.name = "fa";
    fa.kind = ModuleKind::Flatten;
    fa.sources = {"a"};
    ModuleSpec fb = fa;
    fb.name = "fb";
    fb.sources = {"b"};
    mods.push_back(fa);
    mods.push_back(fb);
    ModuleSpec add;
    add.name = "s";
    add.kind = ModuleKind::Add;
    add.sources = {"fa", "fb"};
    mods.push_back(add);
    mods.push_back(linear_spec("out", "s", 2, 1, false));
    Tensor w({1, 2}, {1.0, 1.0});
    ModelGraph g({mods}, {{}, {}, {}, {{"weight", w}}}, {"a", "b"}, {"out"});
    HookedModel m(g);

    TensorMap in;
    in.put("a", Tensor({1, 2}, {2.0, 6.0}));
    in.put("b", Tensor({1, 2}, {6.0, 2.0}));
    AttributionResult r = lrp(m, in, target_cfg("out", 0), LrpRules::uniform(LrpRuleSpec::lrp0()));
    CHECK(r.attributions.get("a").allclose(Tensor({1, 2}, {2.0, 6.0}), 1e-12, 0.0));
    CHECK(r.attributions.get("b").allclose(Tensor({1, 2}, {6.0, 2.0}), 1e-12, 0.0));
}

TEST_CASE("average pooling spreads relevance by cell contribution") {
    std::vector<ModuleSpec> mods;
    ModuleSpec pool;
    pool.name = "p";
    pool.kind = ModuleKind::AvgPool2d;
    pool.sources = {"x"};
    pool.pool_kernel = 2;
    mods.push_back(pool);
    ModelGraph g({mods}, {{}}, {"x"}, {"p"});
    HookedModel m(g);

    TensorMap in;
    in.put("x", Tensor({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}));
    AttributionResult r = lrp(m, in, target_cfg("p", 0), LrpRules::uniform(LrpRuleSpec::lrp0()));
    // Pool output is 2.5; each cell keeps its own quarter-contribution.
    CHECK(r.attributions.get("x").allclose(Tensor({1, 1, 2, 2}, {0.25, 0.5, 0.75, 1.0}), 1e-12, 0.0));
}

TEST_CASE("inputs that cannot reach the target receive zero relevance") {
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
    Rng rng(14);
    ModelGraph g({mods}, {{}, {}, linear_params(rng, 3, 2, false)}, {"x", "z"}, {"out", "fz"});
    HookedModel m(g);

    TensorMap in;
    in.put("x", random_input(rng, {2, 3}));
    in.put("z", random_input(rng, {2, 4}));
    AttributionResult r = lrp(m, in, target_cfg("out", 0), LrpRules::uniform(LrpRuleSpec::eps()));
    CHECK(r.attributions.get("z").bitwise_equal(Tensor({2, 4}, 0.0)));
}

TEST_CASE("channel conditioning masks relevance and is additive over channels") {
    Rng rng(303);
    ModelGraph g = conv_net(rng);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {1, 2, 4, 4}, 0.8));

    AttributionConfig cfg = target_cfg("out", 0);
    LrpRules rules = LrpRules::uniform(LrpRuleSpec::eps(1e-9));
    AttributionResult full = lrp(m, in, cfg, rules);

    Tensor sum({1, 2, 4, 4}, 0.0);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        ConceptCondition cond;
        cond.site = "c";
        cond.channels = {ch};
        AttributionResult part = lrp(m, in, cfg, rules, cond);
        sum = sum + part.attributions.get("x");

        // Off-channel relevance is zeroed at the site.
        Tensor site = part.details.get("c");
        for (std::size_t other = 0; other < 3; ++other) {
            if (other == ch) continue;
            for (std::size_t h = 0; h < 4; ++h)
                for (std::size_t wpos = 0; wpos < 4; ++wpos)
                    CHECK(site.at({0, other, h, wpos}) == 0.0);
        }
    }
    CHECK(sum.allclose(full.attributions.get("x"), 1e-9, 1e-9));
}

TEST_CASE("cav conditioning projects site relevance onto the direction") {
    Rng rng(404);
    ModelGraph g = make_mlp(rng, {4, 5, 3}, ModuleKind::Relu, false);
    HookedModel m(g);
    TensorMap in;
    in.put("x", random_input(rng, {2, 4}));

    AttributionConfig cfg = target_cfg("l1", 1);
    LrpRules rules = LrpRules::uniform(LrpRuleSpec::eps(1e-9));
    AttributionResult plain = lrp(m, in, cfg, rules);

    Tensor v({5}, {1.0, -2.0, 0.5, 0.0, 3.0});
    ConceptCondition cond;
    cond.site = "a0";
    cond.cav = v;
    AttributionResult proj = lrp(m, in, cfg, rules, cond);

    double norm = v.norm2();
    Tensor site = plain.details.get("a0");
    Tensor expect({2, 5}, 0.0);
    for (std::size_t n = 0; n < 2; ++n) {
        double d = 0.0;
        for (std::size_t i = 0; i < 5; ++i) d += site.at({n, i}) * v.data()[i] / norm;
        for (std::size_t i = 0; i < 5; ++i) expect.set({n, i}, d * v.data()[i] / norm);
    }
    CHECK(proj.details.get("a0").allclose(expect, 1e-10, 1e-10));

    ConceptCondition bad = cond;
    bad.cav = Tensor({3}, 1.0);
    CHECK_THROWS_AS(lrp(m, in, cfg, rules, bad), ShapeError);
    ConceptCondition zero = cond;
    zero.cav = Tensor({5}, 0.0);
    CHECK_THROWS_AS(lrp(m, in, cfg, rules, zero), ConfigError);
    ConceptCondition missing = cond;
    missing.site = "ghost";
    CHECK_THROWS_AS(lrp(m, in, cfg, rules, missing), KeyError);
    ConceptCondition empty;
    empty.site = "a0";
    CHECK_THROWS_AS(lrp(m, in, cfg, rules, empty), ConfigError);
}

TEST_CASE("rule names round-trip") {
    for (auto kind : {LrpRuleSpec::Kind::Lrp0, LrpRuleSpec::Kind::Epsilon, LrpRuleSpec::Kind::ZPlus,
                      LrpRuleSpec::Kind::Gamma, LrpRuleSpec::Kind::Flat, LrpRuleSpec::Kind::WSquare})
        CHECK(lrp_rule_from_name(lrp_rule_name(kind)) == kind);
    CHECK_THROWS_AS(lrp_rule_from_name("alphabeta"), ConfigError);
}

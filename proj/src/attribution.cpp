// SPDX-License-Identifier: Apache-2.0
#include "gradlens/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "gradlens/errors.hpp"
#include "gradlens/rng.hpp"

namespace gradlens {

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::size_t per_sample_size(const Tensor& t) {
    if (t.rank() == 0) throw ShapeError("output has rank 0, expected a leading batch axis");
    std::size_t per = 1;
    for (std::size_t d = 1; d < t.rank(); ++d) per *= t.shape()[d];
    return per;
}

// Seed over `output` selecting cfg's target: the explicit seed tensor when
// given, otherwise a per-sample one-hot at the flat index.
Tensor target_seed(const Tensor& output, const TargetSpec& target) {
    if (target.seed) {
        if (!target.seed->shape_equals(output))
            throw ShapeError("target seed shape " + target.seed->shape_str() + " does not match output shape " +
                             output.shape_str());
        return *target.seed;
    }
    return one_hot_seed(output, target.index);
}

// Stacks `reps` copies of `t` along axis 0 (block-major: block r holds copy r).
Tensor tile_batch(const Tensor& t, std::size_t reps) {
    std::vector<std::size_t> shape = t.shape();
    shape[0] *= reps;
    Tensor out(shape, 0.0, t.dtype());
    double* dst = out.mutable_data();
    for (std::size_t r = 0; r < reps; ++r)
        std::copy(t.data(), t.data() + t.size(), dst + r * t.size());
    return out;
}

void require_structure(const TensorMap& a, const TensorMap& b, const std::string& what) {
    if (!a.structure_equals(b))
        throw ShapeError(what + " does not match the input structure");
}

TensorMap input_grads(const TensorMap& grads, const ModelGraph& graph) {
    TensorMap out;
    for (const auto& key : graph.input_keys())
        out.put(key, grads.get(key));
    return out;
}

TensorMap maybe_multiply(TensorMap attr, const TensorMap& inputs, bool multiply) {
    if (!multiply) return attr;
    TensorMap out;
    for (const auto& key : attr.leaf_keys())
        out.put(key, attr.get(key).zip(inputs.get(key), "multiply", [](double a, double x) { return a * x; }));
    return out;
}

double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
    double area = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
    return area;
}

}  // namespace

Tensor one_hot_seed(const Tensor& output, std::size_t index) {
    std::size_t per = per_sample_size(output);
    if (index >= per)
        throw ShapeError("target index " + std::to_string(index) + " out of range for per-sample size " +
                         std::to_string(per));
    Tensor seed(output.shape(), 0.0);
    double* d = seed.mutable_data();
    for (std::size_t n = 0; n < output.shape()[0]; ++n) d[n * per + index] = 1.0;
    return seed;
}

std::string config_digest(const AttributionConfig& cfg) {
    std::string s = cfg.target.output_key + "|" + std::to_string(cfg.target.index) + "|" +
                    std::to_string(cfg.steps) + "|" + (cfg.multiply_by_inputs ? "mx" : "-") + "|" +
                    (cfg.prob_space ? "prob" : "logit") + "|" + (cfg.target.seed ? "seed" : "index") + "|" +
                    (cfg.baseline ? "baseline" : "-");
    return hex16(fnv1a(s));
}

std::string lrp_rule_name(LrpRuleSpec::Kind kind) {
    switch (kind) {
        case LrpRuleSpec::Kind::Lrp0: return "lrp0";
        case LrpRuleSpec::Kind::Epsilon: return "epsilon";
        case LrpRuleSpec::Kind::ZPlus: return "zplus";
        case LrpRuleSpec::Kind::Gamma: return "gamma";
        case LrpRuleSpec::Kind::Flat: return "flat";
        case LrpRuleSpec::Kind::WSquare: return "wsquare";
    }
    throw ConfigError("unknown lrp rule kind");
}

LrpRuleSpec::Kind lrp_rule_from_name(const std::string& name) {
    if (name == "lrp0") return LrpRuleSpec::Kind::Lrp0;
    if (name == "epsilon") return LrpRuleSpec::Kind::Epsilon;
    if (name == "zplus") return LrpRuleSpec::Kind::ZPlus;
    if (name == "gamma") return LrpRuleSpec::Kind::Gamma;
    if (name == "flat") return LrpRuleSpec::Kind::Flat;
    if (name == "wsquare") return LrpRuleSpec::Kind::WSquare;
    throw ConfigError("unknown lrp rule '" + name + "'");
}

bool glob_match(const std::string& pattern, const std::string& text) {
    // Iterative '*'/'?' matcher with backtracking to the last star.
    std::size_t p = 0, t = 0, star = std::string::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
            ++p;
            ++t;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (star != std::string::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

FillMode fill_mode_from_name(const std::string& name) {
    if (name == "mean") return FillMode::Mean;
    if (name == "zero") return FillMode::Zero;
    if (name == "baseline") return FillMode::Baseline;
    throw ConfigError("unknown fill mode '" + name + "'");
}

AttributionResult saliency(HookedModel& model, const TensorMap& inputs, const AttributionConfig& cfg) {
    TensorMap probe = forward(model.inner(), inputs, false).outputs;
    Tensor seed = target_seed(probe.get(cfg.target.output_key), cfg.target);

    RunContext ctx(model);
    TensorMap seeds;
    seeds.put(cfg.target.output_key, seed);
    ctx.seed_backward(seeds);
    ctx.run(inputs);

    TensorMap attr = input_grads(ctx.gradients(), model.inner());
    AttributionResult result;
    result.attributions = maybe_multiply(std::move(attr), inputs, cfg.multiply_by_inputs);
    result.method = cfg.multiply_by_inputs ? "saliency.input" : "saliency";
    result.config_digest = config_digest(cfg);
    return result;
}

AttributionResult integrated_gradients(HookedModel& model, const TensorMap& inputs,
                                       const AttributionConfig& cfg) {
    if (cfg.steps < 1) throw ConfigError("integrated gradients needs steps >= 1");
    if (!cfg.baseline) throw ConfigError("integrated gradients needs a baseline");
    require_structure(*cfg.baseline, inputs, "baseline");

    const std::size_t steps = cfg.steps;

    // One stacked forward over all midpoints; block k holds the whole batch
    // at alpha = (k + 1/2) / steps.
    TensorMap stacked;
    for (const auto& key : inputs.leaf_keys()) {
        const Tensor& x = inputs.get(key);
        const Tensor& b = cfg.baseline->get(key);
        std::vector<std::size_t> shape = x.shape();
        shape[0] *= steps;
        Tensor rows(shape, 0.0, x.dtype());
        double* d = rows.mutable_data();
        for (std::size_t k = 0; k < steps; ++k) {
            double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
            for (std::size_t i = 0; i < x.size(); ++i)
                d[k * x.size() + i] = b.data()[i] + alpha * (x.data()[i] - b.data()[i]);
        }
        stacked.put(key, rows);
    }

    TensorMap probe = forward(model.inner(), inputs, false).outputs;
    Tensor seed = tile_batch(target_seed(probe.get(cfg.target.output_key), cfg.target), steps);

    RunContext ctx(model);
    TensorMap seeds;
    seeds.put(cfg.target.output_key, seed);
    ctx.seed_backward(seeds);
    ctx.run(stacked);
    const TensorMap& grads = ctx.gradients();

    AttributionResult result;
    for (const auto& key : model.inner().input_keys()) {
        const Tensor& x = inputs.get(key);
        const Tensor& b = cfg.baseline->get(key);
        const Tensor& g = grads.get(key);
        Tensor attr(x.shape(), 0.0);
        double* d = attr.mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            double avg = 0.0;
            for (std::size_t k = 0; k < steps; ++k) avg += g.data()[k * x.size() + i];
            avg /= static_cast<double>(steps);
            d[i] = (x.data()[i] - b.data()[i]) * avg;
        }
        result.attributions.put(key, attr);
    }
    result.method = "integrated_gradients";
    result.config_digest = config_digest(cfg);
    return result;
}

AttributionResult layer_conductance(HookedModel& model, const TensorMap& inputs,
                                    const AttributionConfig& cfg, const std::string& site) {
    if (cfg.steps < 1) throw ConfigError("layer conductance needs steps >= 1");
    if (!cfg.baseline) throw ConfigError("layer conductance needs a baseline");
    require_structure(*cfg.baseline, inputs, "baseline");

    const std::size_t steps = cfg.steps;
    const std::size_t batch = inputs.get(inputs.leaf_keys().front()).shape()[0];

    // One stacked run: steps+1 boundary blocks (alpha = i/steps) followed by
    // steps midpoint blocks. Activations come from the boundaries, gradients
    // from the midpoints; the boundary rows carry a zero seed.
    const std::size_t blocks = 2 * steps + 1;
    TensorMap stacked;
    for (const auto& key : inputs.leaf_keys()) {
        const Tensor& x = inputs.get(key);
        const Tensor& b = cfg.baseline->get(key);
        std::vector<std::size_t> shape = x.shape();
        shape[0] *= blocks;
        Tensor rows(shape, 0.0, x.dtype());
        double* d = rows.mutable_data();
        for (std::size_t blk = 0; blk < blocks; ++blk) {
            double alpha = blk <= steps
                               ? static_cast<double>(blk) / static_cast<double>(steps)
                               : (static_cast<double>(blk - steps) - 0.5) / static_cast<double>(steps);
            for (std::size_t i = 0; i < x.size(); ++i)
                d[blk * x.size() + i] = b.data()[i] + alpha * (x.data()[i] - b.data()[i]);
        }
        stacked.put(key, rows);
    }

    TensorMap probe = forward(model.inner(), inputs, false).outputs;
    Tensor base_seed = target_seed(probe.get(cfg.target.output_key), cfg.target);
    std::vector<std::size_t> seed_shape = base_seed.shape();
    seed_shape[0] *= blocks;
    Tensor seed(seed_shape, 0.0);
    double* sd = seed.mutable_data();
    for (std::size_t k = 0; k < steps; ++k)
        std::copy(base_seed.data(), base_seed.data() + base_seed.size(),
                  sd + (steps + 1 + k) * base_seed.size());

    RunContext ctx(model);
    CacheProxy acts = ctx.get(site, SiteKind::Output);
    CacheProxy grads = ctx.get(site, SiteKind::GradOutput);
    TensorMap seeds;
    seeds.put(cfg.target.output_key, seed);
    ctx.seed_backward(seeds);
    ctx.run(stacked);

    const Tensor& h = acts.value();
    const Tensor& g = grads.value();
    std::size_t per = h.size() / (blocks * batch);
    std::vector<std::size_t> shape = h.shape();
    shape[0] = batch;
    Tensor cond(shape, 0.0);
    double* cd = cond.mutable_data();
    for (std::size_t k = 0; k < steps; ++k) {
        const double* h_lo = h.data() + k * batch * per;
        const double* h_hi = h.data() + (k + 1) * batch * per;
        const double* g_mid = g.data() + (steps + 1 + k) * batch * per;
        for (std::size_t i = 0; i < batch * per; ++i) cd[i] += g_mid[i] * (h_hi[i] - h_lo[i]);
    }

    AttributionResult result;
    result.attributions.put(site, cond);
    result.method = "layer_conductance";
    result.config_digest = config_digest(cfg);
    return result;
}

AttributionResult grad_cam(HookedModel& model, const TensorMap& inputs, const AttributionConfig& cfg,
                           const std::string& conv_site) {
    TensorMap probe = forward(model.inner(), inputs, false).outputs;
    Tensor seed = target_seed(probe.get(cfg.target.output_key), cfg.target);

    RunContext ctx(model);
    CacheProxy acts = ctx.get(conv_site, SiteKind::Output);
    CacheProxy grads = ctx.get(conv_site, SiteKind::GradOutput);
    TensorMap seeds;
    seeds.put(cfg.target.output_key, seed);
    ctx.seed_backward(seeds);
    ctx.run(inputs);

    const Tensor& a = acts.value();
    if (a.rank() != 4)
        throw ShapeError("grad-cam site '" + conv_site + "' has shape " + a.shape_str() +
                         ", expected a [batch, channel, height, width] feature map");
    const Tensor& g = grads.value();
    const std::size_t n = a.shape()[0], c = a.shape()[1], hs = a.shape()[2], ws = a.shape()[3];

    Tensor pre({n, hs, ws}, 0.0);
    double* pd = pre.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double w = 0.0;
            const double* gch = g.data() + (i * c + ch) * hs * ws;
            for (std::size_t s = 0; s < hs * ws; ++s) w += gch[s];
            w /= static_cast<double>(hs * ws);
            const double* ach = a.data() + (i * c + ch) * hs * ws;
            for (std::size_t s = 0; s < hs * ws; ++s) pd[i * hs * ws + s] += w * ach[s];
        }
    }
    Tensor cam = pre.map([](double v) { return v > 0.0 ? v : 0.0; });

    // Nearest-neighbour upsample to the (single) image-shaped graph input.
    std::string image_key;
    for (const auto& key : model.inner().input_keys())
        if (inputs.get(key).rank() == 4) {
            if (!image_key.empty())
                throw ConfigError("grad-cam needs a unique image-shaped input, found '" + image_key +
                                  "' and '" + key + "'");
            image_key = key;
        }
    if (image_key.empty()) throw ShapeError("grad-cam needs one rank-4 graph input to upsample onto");
    const Tensor& img = inputs.get(image_key);
    const std::size_t hi = img.shape()[2], wi = img.shape()[3];
    Tensor up({n, hi, wi}, 0.0);
    double* ud = up.mutable_data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t y = 0; y < hi; ++y)
            for (std::size_t x = 0; x < wi; ++x) {
                std::size_t sy = y * hs / hi, sx = x * ws / wi;
                ud[(i * hi + y) * wi + x] = cam.data()[(i * hs + sy) * ws + sx];
            }

    AttributionResult result;
    result.attributions.put(image_key, up);
    result.details.put(conv_site + ".cam", cam);
    result.details.put(conv_site + ".pre", pre);
    result.method = "grad_cam";
    result.config_digest = config_digest(cfg);
    return result;
}

AttributionResult guided_backprop(HookedModel& model, const TensorMap& inputs,
                                  const AttributionConfig& cfg) {
    TensorMap probe = forward(model.inner(), inputs, false).outputs;
    Tensor seed = target_seed(probe.get(cfg.target.output_key), cfg.target);

    RunContext ctx(model);
    for (const auto& mod : model.inner().modules())
        if (mod.kind == ModuleKind::Relu)
            ctx.set(mod.name, SiteKind::GradOutput,
                    [](const Tensor& g) { return g.map([](double v) { return v > 0.0 ? v : 0.0; }); });
    TensorMap seeds;
    seeds.put(cfg.target.output_key, seed);
    ctx.seed_backward(seeds);
    ctx.run(inputs);

    TensorMap attr = input_grads(ctx.gradients(), model.inner());
    AttributionResult result;
    result.attributions = maybe_multiply(std::move(attr), inputs, cfg.multiply_by_inputs);
    result.method = "guided_backprop";
    result.config_digest = config_digest(cfg);
    return result;
}

MaximisationResult activation_maximisation(HookedModel& model, const std::string& site, std::size_t unit,
                                           const TensorMap& start, const MaximisationOptions& opts) {
    if (opts.lr <= 0.0) throw ConfigError("activation maximisation needs lr > 0");
    if (opts.iters < 1) throw ConfigError("activation maximisation needs iters >= 1");
    if (opts.l2 < 0.0) throw ConfigError("activation maximisation needs l2 >= 0");

    TensorMap x = start;
    if (opts.init_noise > 0.0) {
        Rng rng(opts.seed);
        x = x.apply([&](const Tensor& t) { return t.map([&](double v) { return v + rng.normal(0.0, opts.init_noise); }); });
    }

    // Shape discovery for the site seed: run once without gradients.
    Tensor site_shape_probe;
    {
        RunContext ctx(model);
        CacheProxy h = ctx.get(site, SiteKind::Output);
        ctx.run(x);
        site_shape_probe = h.value();
    }
    Tensor seed = one_hot_seed(site_shape_probe, unit);
    std::size_t per = per_sample_size(site_shape_probe);

    MaximisationResult result;
    auto penalty = [&](const TensorMap& m) {
        double p = 0.0;
        for (const auto& key : m.leaf_keys()) {
            const Tensor& t = m.get(key);
            p += t.dot(t);
        }
        return p;
    };

    for (std::size_t it = 0; it < opts.iters; ++it) {
        RunContext ctx(model);
        CacheProxy h = ctx.get(site, SiteKind::Output);
        TensorMap seeds;
        seeds.put(site, seed);
        ctx.seed_backward(seeds);
        ctx.run(x);

        const Tensor& hv = h.value();
        double act = 0.0;
        for (std::size_t n = 0; n < hv.shape()[0]; ++n) act += hv.data()[n * per + unit];
        result.activation.push_back(act);
        result.objective.push_back(act - opts.l2 * penalty(x));

        const TensorMap& grads = ctx.gradients();
        TensorMap next;
        for (const auto& key : model.inner().input_keys()) {
            const Tensor& xi = x.get(key);
            const Tensor& gi = grads.get(key);
            next.put(key, xi.zip(gi, "ascend", [&](double xv, double gv) {
                return xv + opts.lr * (gv - 2.0 * opts.l2 * xv);
            }));
        }
        x = std::move(next);
    }

    // Final iterate's value, so the trajectory brackets every update.
    {
        RunContext ctx(model);
        CacheProxy h = ctx.get(site, SiteKind::Output);
        ctx.run(x);
        const Tensor& hv = h.value();
        double act = 0.0;
        for (std::size_t n = 0; n < hv.shape()[0]; ++n) act += hv.data()[n * per + unit];
        result.activation.push_back(act);
        result.objective.push_back(act - opts.l2 * penalty(x));
    }

    result.pre_image = std::move(x);
    return result;
}

FlipCurve pixel_flipping(HookedModel& model, const TensorMap& inputs, const AttributionResult& attribution,
                         const TargetSpec& metric, const std::vector<double>& fractions, FillMode fill,
                         const std::optional<TensorMap>& baseline) {
    if (fractions.empty()) throw ConfigError("pixel flipping needs at least one fraction");
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        if (fractions[i] < 0.0 || fractions[i] > 1.0)
            throw ConfigError("flip fractions must lie in [0, 1]");
        if (i > 0 && fractions[i] < fractions[i - 1])
            throw ConfigError("flip fractions must be ascending");
    }
    if (fill == FillMode::Baseline && !baseline) throw ConfigError("fill mode 'baseline' needs a baseline");
    if (baseline) require_structure(*baseline, inputs, "baseline");

    // Per attributed key: sample-wise coordinate order, most relevant first,
    // ties broken by ascending flat coordinate.
    struct KeyPlan {
        std::string key;
        std::size_t per = 0;
        std::vector<std::vector<std::size_t>> order;  // [sample][rank] -> coordinate
        std::vector<double> mean;                     // per-sample fill value
    };
    std::vector<KeyPlan> plans;
    std::size_t batch = inputs.get(inputs.leaf_keys().front()).shape()[0];
    for (const auto& key : attribution.attributions.leaf_keys()) {
        if (!inputs.contains(key)) throw KeyError("attribution key '" + key + "' is not a model input");
        const Tensor& a = attribution.attributions.get(key);
        const Tensor& x = inputs.get(key);
        if (!a.shape_equals(x))
            throw ShapeError("attribution for '" + key + "' has shape " + a.shape_str() +
                             ", input has shape " + x.shape_str());
        KeyPlan plan;
        plan.key = key;
        plan.per = x.size() / batch;
        plan.order.resize(batch);
        plan.mean.resize(batch);
        for (std::size_t n = 0; n < batch; ++n) {
            std::vector<std::size_t> idx(plan.per);
            std::iota(idx.begin(), idx.end(), 0);
            const double* rel = a.data() + n * plan.per;
            std::stable_sort(idx.begin(), idx.end(),
                             [&](std::size_t lhs, std::size_t rhs) { return rel[lhs] > rel[rhs]; });
            plan.order[n] = std::move(idx);
            double m = 0.0;
            const double* xv = x.data() + n * plan.per;
            for (std::size_t i = 0; i < plan.per; ++i) m += xv[i];
            plan.mean[n] = plan.per == 0 ? 0.0 : m / static_cast<double>(plan.per);
        }
        plans.push_back(std::move(plan));
    }
    if (plans.empty()) throw ConfigError("attribution map has no leaves to flip");

    FlipCurve curve;
    curve.fractions = fractions;
    for (double f : fractions) {
        TensorMap flipped = inputs;
        for (const auto& plan : plans) {
            std::size_t count = static_cast<std::size_t>(
                std::llround(f * static_cast<double>(plan.per)));
            count = std::min(count, plan.per);
            if (count == 0) continue;
            Tensor x = flipped.get(plan.key);
            double* d = x.mutable_data();
            for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t r = 0; r < count; ++r) {
                    std::size_t coord = plan.order[n][r];
                    double v = 0.0;
                    if (fill == FillMode::Mean) v = plan.mean[n];
                    else if (fill == FillMode::Baseline) v = baseline->get(plan.key).data()[n * plan.per + coord];
                    d[n * plan.per + coord] = v;
                }
            flipped.put(plan.key, x);
        }

        TensorMap out = model.forward(flipped);
        Tensor y = out.get(metric.output_key);
        std::size_t per = per_sample_size(y);
        if (metric.index >= per)
            throw ShapeError("metric index " + std::to_string(metric.index) +
                             " out of range for per-sample size " + std::to_string(per));
        double logit_sum = 0.0, prob_sum = 0.0;
        for (std::size_t n = 0; n < batch; ++n) {
            const double* row = y.data() + n * per;
            logit_sum += row[metric.index];
            double mx = row[0];
            for (std::size_t j = 1; j < per; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < per; ++j) z += std::exp(row[j] - mx);
            prob_sum += std::exp(row[metric.index] - mx) / z;
        }
        curve.logit.push_back(logit_sum / static_cast<double>(batch));
        curve.prob.push_back(prob_sum / static_cast<double>(batch));
    }
    curve.auc_logit = trapezoid(curve.fractions, curve.logit);
    curve.auc_prob = trapezoid(curve.fractions, curve.prob);
    return curve;
}

}  // namespace gradlens

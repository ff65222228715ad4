// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "gradlens/attribution.hpp"
#include "gradlens/errors.hpp"

namespace gradlens {

namespace {

// One input-side contribution to an output unit: value x entering through
// weight w, landing at flat index `index` of source slot `slot`.
struct Contrib {
    std::size_t slot;
    std::size_t index;
    double w;
    double x;
};

const LrpRuleSpec& match_rule(const LrpRules& rules, const std::string& module_name) {
    for (const auto& [pattern, spec] : rules.assignment)
        if (glob_match(pattern, module_name)) return spec;
    throw ConfigError("no lrp rule matches module '" + module_name + "'");
}

void validate_rules(const LrpRules& rules) {
    if (rules.assignment.empty()) throw ConfigError("lrp rule assignment is empty");
    if (rules.assignment.back().first != "*")
        throw ConfigError("lrp rule assignment must end with a '*' default");
    for (const auto& [pattern, spec] : rules.assignment) {
        if (pattern.empty()) throw ConfigError("lrp rule pattern is empty");
        if (spec.kind == LrpRuleSpec::Kind::Epsilon && spec.epsilon <= 0.0)
            throw ConfigError("epsilon rule needs epsilon > 0");
        if (spec.kind == LrpRuleSpec::Kind::Gamma && spec.gamma < 0.0)
            throw ConfigError("gamma rule needs gamma >= 0");
    }
}

// Splits r_out over the contributions per the rule. Bias joins the
// denominator only: its share is absorbed, not redistributed.
void spread(const LrpRuleSpec& rule, const std::vector<Contrib>& contribs, double bias, double r_out,
            const std::string& module_name, std::vector<double*>& dst) {
    if (r_out == 0.0) return;
    switch (rule.kind) {
        case LrpRuleSpec::Kind::Lrp0: {
            double den = bias;
            for (const auto& c : contribs) den += c.w * c.x;
            if (den == 0.0)
                throw ConfigError("lrp0 denominator is zero in module '" + module_name +
                                  "'; use the epsilon rule");
            for (const auto& c : contribs) dst[c.slot][c.index] += c.w * c.x / den * r_out;
            return;
        }
        case LrpRuleSpec::Kind::Epsilon: {
            double den = bias;
            for (const auto& c : contribs) den += c.w * c.x;
            den += (den < 0.0 ? -rule.epsilon : rule.epsilon);
            for (const auto& c : contribs) dst[c.slot][c.index] += c.w * c.x / den * r_out;
            return;
        }
        case LrpRuleSpec::Kind::ZPlus: {
            double den = std::max(bias, 0.0);
            for (const auto& c : contribs) den += std::max(c.w * c.x, 0.0);
            if (den == 0.0) return;
            for (const auto& c : contribs) dst[c.slot][c.index] += std::max(c.w * c.x, 0.0) / den * r_out;
            return;
        }
        case LrpRuleSpec::Kind::Gamma: {
            double den = bias + rule.gamma * std::max(bias, 0.0);
            for (const auto& c : contribs) {
                double wt = c.w + rule.gamma * std::max(c.w, 0.0);
                den += wt * c.x;
            }
            if (den == 0.0)
                throw ConfigError("gamma denominator is zero in module '" + module_name +
                                  "'; use the epsilon rule");
            for (const auto& c : contribs) {
                double wt = c.w + rule.gamma * std::max(c.w, 0.0);
                dst[c.slot][c.index] += wt * c.x / den * r_out;
            }
            return;
        }
        case LrpRuleSpec::Kind::Flat: {
            if (contribs.empty()) return;
            double share = r_out / static_cast<double>(contribs.size());
            for (const auto& c : contribs) dst[c.slot][c.index] += share;
            return;
        }
        case LrpRuleSpec::Kind::WSquare: {
            double den = 0.0;
            for (const auto& c : contribs) den += c.w * c.w;
            if (den == 0.0) return;
            for (const auto& c : contribs) dst[c.slot][c.index] += c.w * c.w / den * r_out;
            return;
        }
    }
}

void apply_condition(Tensor& r, const ConceptCondition& cond) {
    if (!cond.channels.empty()) {
        if (r.rank() < 2)
            throw ShapeError("channel conditioning needs a [batch, channel, ...] site, got " + r.shape_str());
        std::size_t channels = r.shape()[1];
        for (std::size_t ch : cond.channels)
            if (ch >= channels)
                throw ShapeError("condition channel " + std::to_string(ch) + " out of range for " +
                                 std::to_string(channels) + " channels");
        std::size_t inner = 1;
        for (std::size_t d = 2; d < r.rank(); ++d) inner *= r.shape()[d];
        Tensor masked(r.shape(), 0.0);
        double* md = masked.mutable_data();
        for (std::size_t n = 0; n < r.shape()[0]; ++n)
            for (std::size_t ch : cond.channels)
                std::copy(r.data() + (n * channels + ch) * inner, r.data() + (n * channels + ch + 1) * inner,
                          md + (n * channels + ch) * inner);
        r = masked;
        return;
    }
    if (cond.cav) {
        std::size_t per = r.size() / r.shape()[0];
        if (cond.cav->size() != per)
            throw ShapeError("cav has " + std::to_string(cond.cav->size()) + " entries, site has " +
                             std::to_string(per) + " per sample");
        double norm = cond.cav->norm2();
        if (norm == 0.0) throw ConfigError("cav direction has zero norm");
        Tensor projected(r.shape(), 0.0);
        double* pd = projected.mutable_data();
        const double* v = cond.cav->data();
        for (std::size_t n = 0; n < r.shape()[0]; ++n) {
            const double* row = r.data() + n * per;
            double d = 0.0;
            for (std::size_t i = 0; i < per; ++i) d += row[i] * v[i] / norm;
            for (std::size_t i = 0; i < per; ++i) pd[n * per + i] = d * v[i] / norm;
        }
        r = projected;
        return;
    }
    throw ConfigError("concept condition needs channels or a cav direction");
}

}  // namespace

AttributionResult lrp(HookedModel& model, const TensorMap& inputs, const AttributionConfig& cfg,
                      const LrpRules& rules, const std::optional<ConceptCondition>& condition) {
    validate_rules(rules);
    const ModelGraph& graph = model.inner();
    if (condition && !graph.module_index(condition->site))
        throw KeyError("condition site '" + condition->site + "' is not a module");

    ForwardResult run = forward(graph, inputs, true);
    const Tape& tape = *run.tape;

    // Relevance at the selected output: masked output value. The mask is the
    // target seed (one-hot in the common case); prob_space swaps the raw
    // logit for its softmax probability.
    Tensor out = run.outputs.get(cfg.target.output_key);
    std::size_t batch = out.shape()[0];
    std::size_t per = out.size() / batch;
    Tensor mask;
    if (cfg.target.seed) {
        if (!cfg.target.seed->shape_equals(out))
            throw ShapeError("target seed shape " + cfg.target.seed->shape_str() +
                             " does not match output shape " + out.shape_str());
        mask = *cfg.target.seed;
    } else {
        mask = one_hot_seed(out, cfg.target.index);
    }
    Tensor init(out.shape(), 0.0);
    {
        double* id = init.mutable_data();
        for (std::size_t n = 0; n < batch; ++n) {
            const double* row = out.data() + n * per;
            double mx = row[0];
            for (std::size_t j = 1; j < per; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < per; ++j) z += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < per; ++j) {
                double v = cfg.prob_space ? std::exp(row[j] - mx) / z : row[j];
                id[n * per + j] = mask.data()[n * per + j] * v;
            }
        }
    }

    // Relevance per value name (module name or graph input key), accumulated
    // as the reverse walk reaches each producer.
    std::unordered_map<std::string, Tensor> rel;
    rel.emplace(cfg.target.output_key, std::move(init));

    AttributionResult result;
    std::vector<Contrib> contribs;
    for (auto it = tape.entries().rbegin(); it != tape.entries().rend(); ++it) {
        const ModuleSpec& mod = graph.modules()[it->module_index];
        auto found = rel.find(mod.name);
        if (found == rel.end()) continue;
        Tensor r_out = found->second;
        if (condition && condition->site == mod.name) apply_condition(r_out, *condition);
        result.details.put(mod.name, r_out);

        // Destination accumulators, one per source slot.
        std::vector<Tensor> r_src;
        std::vector<double*> dst_base(mod.sources.size());
        for (std::size_t s = 0; s < mod.sources.size(); ++s) {
            r_src.emplace_back(it->inputs[s].shape(), 0.0);
            dst_base[s] = r_src.back().mutable_data();
        }

        switch (mod.kind) {
            case ModuleKind::Relu:
            case ModuleKind::Tanh:
            case ModuleKind::Sigmoid:
            case ModuleKind::Softmax:
                r_src[0] = r_out;
                break;
            case ModuleKind::Flatten:
                r_src[0] = r_out.reshape(it->inputs[0].shape());
                break;
            case ModuleKind::Linear: {
                const LrpRuleSpec& rule = match_rule(rules, mod.name);
                const auto& params = graph.params_of(it->module_index);
                const double* w = params[0].value.data();
                const double* b = mod.has_bias ? params[1].value.data() : nullptr;
                const double* x = it->inputs[0].data();
                std::size_t in = mod.in_features, outf = mod.out_features;
                contribs.resize(in);
                for (std::size_t n = 0; n < batch; ++n) {
                    std::vector<double*> dst{dst_base[0] + n * in};
                    for (std::size_t o = 0; o < outf; ++o) {
                        for (std::size_t i = 0; i < in; ++i)
                            contribs[i] = {0, i, w[o * in + i], x[n * in + i]};
                        spread(rule, contribs, b ? b[o] : 0.0, r_out.data()[n * outf + o], mod.name, dst);
                    }
                }
                break;
            }
            case ModuleKind::Conv2d: {
                const LrpRuleSpec& rule = match_rule(rules, mod.name);
                const auto& params = graph.params_of(it->module_index);
                const double* w = params[0].value.data();
                const double* b = mod.has_bias ? params[1].value.data() : nullptr;
                const Tensor& xin = it->inputs[0];
                const double* x = xin.data();
                std::size_t cin = mod.in_channels, h = xin.shape()[2], wd = xin.shape()[3];
                std::size_t k = mod.kernel, s = mod.stride, p = mod.pad;
                std::size_t ho = r_out.shape()[2], wo = r_out.shape()[3];
                std::size_t cout = mod.out_channels;
                for (std::size_t n = 0; n < batch; ++n) {
                    std::vector<double*> dst{dst_base[0] + n * cin * h * wd};
                    for (std::size_t co = 0; co < cout; ++co)
                        for (std::size_t oy = 0; oy < ho; ++oy)
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                contribs.clear();
                                for (std::size_t ci = 0; ci < cin; ++ci)
                                    for (std::size_t ky = 0; ky < k; ++ky) {
                                        long long yy = static_cast<long long>(oy * s + ky) -
                                                       static_cast<long long>(p);
                                        if (yy < 0 || yy >= static_cast<long long>(h)) continue;
                                        for (std::size_t kx = 0; kx < k; ++kx) {
                                            long long xx = static_cast<long long>(ox * s + kx) -
                                                           static_cast<long long>(p);
                                            if (xx < 0 || xx >= static_cast<long long>(wd)) continue;
                                            std::size_t src = (ci * h + yy) * wd + xx;
                                            contribs.push_back({0, src,
                                                                w[((co * cin + ci) * k + ky) * k + kx],
                                                                x[n * cin * h * wd + src]});
                                        }
                                    }
                                double r = r_out.data()[((n * cout + co) * ho + oy) * wo + ox];
                                spread(rule, contribs, b ? b[co] : 0.0, r, mod.name, dst);
                            }
                }
                break;
            }
            case ModuleKind::AvgPool2d: {
                const LrpRuleSpec& rule = match_rule(rules, mod.name);
                const Tensor& xin = it->inputs[0];
                const double* x = xin.data();
                std::size_t c = xin.shape()[1], h = xin.shape()[2], wd = xin.shape()[3];
                std::size_t k = mod.pool_kernel, ho = h / k, wo = wd / k;
                double inv = 1.0 / static_cast<double>(k * k);
                for (std::size_t n = 0; n < batch; ++n) {
                    std::vector<double*> dst{dst_base[0] + n * c * h * wd};
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t oy = 0; oy < ho; ++oy)
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                contribs.clear();
                                for (std::size_t ky = 0; ky < k; ++ky)
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        std::size_t src = (ch * h + oy * k + ky) * wd + ox * k + kx;
                                        contribs.push_back({0, src, inv, x[n * c * h * wd + src]});
                                    }
                                double r = r_out.data()[((n * c + ch) * ho + oy) * wo + ox];
                                spread(rule, contribs, 0.0, r, mod.name, dst);
                            }
                }
                break;
            }
            case ModuleKind::Add: {
                const LrpRuleSpec& rule = match_rule(rules, mod.name);
                const double* a = it->inputs[0].data();
                const double* bb = it->inputs[1].data();
                std::size_t size = it->inputs[0].size();
                std::size_t stride = size / batch;
                contribs.resize(2);
                for (std::size_t n = 0; n < batch; ++n) {
                    std::vector<double*> dst{dst_base[0] + n * stride, dst_base[1] + n * stride};
                    for (std::size_t i = 0; i < stride; ++i) {
                        std::size_t idx = n * stride + i;
                        contribs[0] = {0, i, 1.0, a[idx]};
                        contribs[1] = {1, i, 1.0, bb[idx]};
                        spread(rule, contribs, 0.0, r_out.data()[idx], mod.name, dst);
                    }
                }
                break;
            }
        }

        for (std::size_t s = 0; s < mod.sources.size(); ++s) {
            const std::string& src = mod.sources[s];
            auto [pos, inserted] = rel.try_emplace(src, r_src[s]);
            if (!inserted) pos->second = pos->second + r_src[s];
        }
    }

    for (const auto& key : graph.input_keys()) {
        auto found = rel.find(key);
        if (found != rel.end()) result.attributions.put(key, found->second);
        else result.attributions.put(key, Tensor(inputs.get(key).shape(), 0.0));
    }
    result.method = "lrp";
    result.config_digest = config_digest(cfg);
    return result;
}

}  // namespace gradlens

// SPDX-License-Identifier: Apache-2.0
#include "gradlens/weights.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "gradlens/errors.hpp"

namespace gradlens {
namespace {

void require_same_structure(const TensorMap& a, const TensorMap& b, const char* what) {
    auto ka = a.leaf_keys(), kb = b.leaf_keys();
    if (ka != kb) throw KeyError(std::string(what) + ": parameter key sets differ");
    for (const auto& k : ka)
        if (!a.get(k).shape_equals(b.get(k)))
            throw ShapeError(std::string(what) + ": shape mismatch at '" + k + "'");
}

TensorMap zip_maps(const TensorMap& a, const TensorMap& b, double (*op)(double, double)) {
    TensorMap out;
    for (const auto& k : a.leaf_keys()) out.put(k, a.get(k).zip(b.get(k), "zip", op));
    return out;
}

// Walks forward through elementwise activations to the Linear modules that
// consume `name`'s units.
void collect_unit_consumers(const ModelGraph& model, const std::string& name,
                            std::vector<std::string>& consumers) {
    for (const auto& mod : model.modules()) {
        if (std::find(mod.sources.begin(), mod.sources.end(), name) == mod.sources.end()) continue;
        switch (mod.kind) {
            case ModuleKind::Linear:
                consumers.push_back(mod.name);
                break;
            case ModuleKind::Relu:
            case ModuleKind::Tanh:
            case ModuleKind::Sigmoid:
                collect_unit_consumers(model, mod.name, consumers);
                break;
            default:
                throw ConfigError("unit pruning cannot cross module '" + mod.name + "'");
        }
    }
}

}  // namespace

TaskVector task_vector(const ModelGraph& pre, const ModelGraph& fine) {
    TensorMap p = pre.parameters(), f = fine.parameters();
    require_same_structure(p, f, "task_vector");
    return {zip_maps(f, p, [](double a, double b) { return a - b; })};
}

ModelGraph apply(const ModelGraph& model, const TaskVector& tv, double alpha) {
    TensorMap params = model.parameters();
    require_same_structure(params, tv.deltas, "apply");
    TensorMap next;
    for (const auto& k : params.leaf_keys())
        next.put(k, params.get(k).zip(tv.deltas.get(k), "apply",
                                      [alpha](double p, double d) { return p + alpha * d; }));
    return model.with_parameters(next);
}

TaskVector negate(const TaskVector& tv) {
    TensorMap out;
    for (const auto& k : tv.deltas.leaf_keys()) out.put(k, tv.deltas.get(k) * -1.0);
    return {std::move(out)};
}

TaskVector add(const TaskVector& a, const TaskVector& b) {
    require_same_structure(a.deltas, b.deltas, "add");
    return {zip_maps(a.deltas, b.deltas, [](double x, double y) { return x + y; })};
}

std::pair<ModelGraph, PruneMask> prune(const ModelGraph& model, const TensorMap& relevance,
                                       double sparsity, PruneGranularity granularity) {
    if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ConfigError("sparsity must lie in [0, 1]");
    std::vector<std::string> keys = relevance.leaf_keys();
    if (keys.empty()) throw ConfigError("relevance map is empty");

    TensorMap params = model.parameters();
    PruneMask mask;
    mask.granularity = granularity;

    if (granularity == PruneGranularity::Weight) {
        std::size_t total = 0;
        for (const auto& k : keys) {
            if (!params.contains(k)) throw KeyError("relevance key '" + k + "' is not a parameter path");
            if (!relevance.get(k).shape_equals(params.get(k)))
                throw ShapeError("relevance shape mismatch at '" + k + "'");
            total += relevance.get(k).size();
        }
        std::size_t zeros = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(total)));

        // Global ranking; ties by ascending flat index across keys in map order.
        std::vector<std::size_t> order(total);
        std::vector<double> rel(total);
        std::size_t off = 0;
        for (const auto& k : keys) {
            const Tensor& r = relevance.get(k);
            std::copy(r.data(), r.data() + r.size(), rel.begin() + off);
            off += r.size();
        }
        for (std::size_t i = 0; i < total; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t l, std::size_t r) { return rel[l] < rel[r]; });

        std::vector<bool> dropped(total, false);
        for (std::size_t i = 0; i < zeros; ++i) dropped[order[i]] = true;

        TensorMap next = params;
        off = 0;
        for (const auto& k : keys) {
            Tensor m(relevance.get(k).shape(), 1.0);
            Tensor v = params.get(k);
            double* md = m.mutable_data();
            double* vd = v.mutable_data();
            for (std::size_t i = 0; i < m.size(); ++i)
                if (dropped[off + i]) {
                    md[i] = 0.0;
                    vd[i] = 0.0;
                }
            off += m.size();
            mask.masks.put(k, m);
            next.put(k, v);
        }
        mask.sparsity = total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
        return {model.with_parameters(next), mask};
    }

    // Unit granularity: relevance keys are Linear module names, one value per
    // output unit.
    std::size_t total = 0;
    for (const auto& k : keys) {
        if (!model.has_module(k)) throw KeyError("relevance key '" + k + "' is not a module");
        const ModuleSpec& mod = model.module(k);
        if (mod.kind != ModuleKind::Linear)
            throw ConfigError("unit pruning supports Linear modules; '" + k + "' is not one");
        std::size_t units = params.get(k + ".weight").shape()[0];
        if (relevance.get(k).size() != units)
            throw ShapeError("relevance for '" + k + "' must have one value per unit");
        std::vector<std::string> consumers;
        collect_unit_consumers(model, k, consumers);  // throws on unsupported topology
        total += units;
    }
    std::size_t zeros = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(total)));

    std::vector<std::pair<std::string, std::size_t>> unit_of;  // global index → (module, unit)
    std::vector<double> rel;
    for (const auto& k : keys) {
        const Tensor& r = relevance.get(k);
        for (std::size_t u = 0; u < r.size(); ++u) {
            unit_of.emplace_back(k, u);
            rel.push_back(r.data()[u]);
        }
    }
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t l, std::size_t r) { return rel[l] < rel[r]; });

    TensorMap next = params;
    for (const auto& k : keys) mask.masks.put(k, Tensor({relevance.get(k).size()}, 1.0));
    for (std::size_t i = 0; i < zeros; ++i) {
        const auto& [name, unit] = unit_of[order[i]];
        Tensor unit_mask = mask.masks.get(name);
        unit_mask.mutable_data()[unit] = 0.0;
        mask.masks.put(name, unit_mask);

        // Incoming row and bias entry.
        Tensor w = next.get(name + ".weight");
        std::size_t in = w.shape()[1];
        for (std::size_t j = 0; j < in; ++j) w.mutable_data()[unit * in + j] = 0.0;
        next.put(name + ".weight", w);
        if (next.contains(name + ".bias")) {
            Tensor b = next.get(name + ".bias");
            b.mutable_data()[unit] = 0.0;
            next.put(name + ".bias", b);
        }

        // Outgoing columns of every Linear consumer.
        std::vector<std::string> consumers;
        collect_unit_consumers(model, name, consumers);
        for (const auto& c : consumers) {
            Tensor cw = next.get(c + ".weight");
            std::size_t cout = cw.shape()[0], cin = cw.shape()[1];
            if (unit >= cin) throw ShapeError("consumer '" + c + "' has fewer inputs than unit index");
            for (std::size_t o = 0; o < cout; ++o) cw.mutable_data()[o * cin + unit] = 0.0;
            next.put(c + ".weight", cw);
        }
    }
    mask.sparsity = total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
    return {model.with_parameters(next), mask};
}

std::uint64_t insert_adapter(HookedModel& model, const Adapter& adapter) {
    const Tensor& we = adapter.encoder_weight;
    const Tensor& wd = adapter.decoder_weight;
    if (we.rank() != 2 || wd.rank() != 2) throw ShapeError("adapter weights must be rank-2");
    std::size_t bottleneck = we.shape()[0], units = we.shape()[1];
    if (wd.shape()[0] != units || wd.shape()[1] != bottleneck)
        throw ShapeError("decoder must map the encoder's bottleneck back to its input width");
    if (adapter.encoder_bias.size() != bottleneck) throw ShapeError("encoder bias width mismatch");
    if (adapter.decoder_bias.size() != units) throw ShapeError("decoder bias width mismatch");
    if (!model.inner().has_module(adapter.site)) throw KeyError("unknown site '" + adapter.site + "'");

    Adapter a = adapter;
    return model.register_hook(
        a.site, HookKind::Forward,
        [a, bottleneck, units](const std::string&, const TensorMap& payload) -> std::optional<TensorMap> {
            Tensor h = payload.get("output");
            if (h.rank() != 2 || h.shape()[1] != units)
                throw ShapeError("adapter expects [batch, " + std::to_string(units) + "] at '" + a.site +
                                 "'");
            std::size_t batch = h.shape()[0];
            Tensor out({batch, units}, 0.0);
            double* od = out.mutable_data();
            std::vector<double> z(bottleneck);
            for (std::size_t n = 0; n < batch; ++n) {
                for (std::size_t b = 0; b < bottleneck; ++b) {
                    double acc = a.encoder_bias.data()[b];
                    for (std::size_t j = 0; j < units; ++j)
                        acc += a.encoder_weight.data()[b * units + j] * h.data()[n * units + j];
                    z[b] = acc;
                }
                for (std::size_t u = 0; u < units; ++u) {
                    double acc = a.decoder_bias.data()[u];
                    for (std::size_t b = 0; b < bottleneck; ++b)
                        acc += a.decoder_weight.data()[u * bottleneck + b] * z[b];
                    od[n * units + u] =
                        a.mode == AdapterMode::Residual ? h.data()[n * units + u] + acc : acc;
                }
            }
            TensorMap replaced;
            replaced.put("output", out);
            return replaced;
        },
        HookScope::Persistent);
}

}  // namespace gradlens

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gradlens/hooking.hpp"
#include "gradlens/model.hpp"
#include "gradlens/tensormap.hpp"

namespace gradlens {

// Difference between two parameter sets of the same architecture, keyed by
// parameter path ("<module>.<role>").
struct TaskVector {
    TensorMap deltas;
};

TaskVector task_vector(const ModelGraph& pre, const ModelGraph& fine);
ModelGraph apply(const ModelGraph& model, const TaskVector& tv, double alpha);
TaskVector negate(const TaskVector& tv);
TaskVector add(const TaskVector& a, const TaskVector& b);

enum class PruneGranularity { Weight, Unit };

// Weight granularity: masks are keyed by parameter path, one {0,1} entry per
// weight. Unit granularity: masks are keyed by module name, one {0,1} entry
// per output unit.
struct PruneMask {
    PruneGranularity granularity = PruneGranularity::Weight;
    TensorMap masks;
    double sparsity = 0.0;  // realised fraction of zeroed entries
};

// Zeroes the lowest-relevance fraction of the entries named by `relevance`
// (ties broken by ascending index). Weight granularity ranks individual
// parameter entries; unit granularity ranks whole units and disconnects each
// pruned unit's incoming row, bias entry, and outgoing columns.
std::pair<ModelGraph, PruneMask> prune(const ModelGraph& model, const TensorMap& relevance,
                                       double sparsity, PruneGranularity granularity);

enum class AdapterMode { Replace, Residual };

// Bottleneck map spliced into a site: h → D(E(h)) (replace) or h + D(E(h))
// (residual). Weights are supplied by the caller, never trained here.
struct Adapter {
    std::string site;
    Tensor encoder_weight;  // [bottleneck, units]
    Tensor encoder_bias;    // [bottleneck]
    Tensor decoder_weight;  // [units, bottleneck]
    Tensor decoder_bias;    // [units]
    AdapterMode mode = AdapterMode::Replace;
};

// Installs the adapter as a persistent forward hook and returns its hook id;
// deregistering the id restores the original model exactly.
std::uint64_t insert_adapter(HookedModel& model, const Adapter& adapter);

}  // namespace gradlens

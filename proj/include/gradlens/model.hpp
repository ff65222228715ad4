// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradlens/tensormap.hpp"

namespace gradlens {

enum class ModuleKind { Linear, Conv2d, Relu, Tanh, Sigmoid, Softmax, Flatten, AvgPool2d, Add };

std::string module_kind_name(ModuleKind kind);
ModuleKind module_kind_from_name(const std::string& name);

// One node of the graph. `name` is the full dot path ("backbone.0"); sources
// reference graph input keys or earlier module names, so list order is a
// topological order by construction.
struct ModuleSpec {
    std::string name;
    ModuleKind kind = ModuleKind::Relu;
    std::vector<std::string> sources;

    // linear
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    bool has_bias = true;
    // conv2d
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    // softmax
    int axis = -1;
    // avgpool2d
    std::size_t pool_kernel = 0;

    bool is_parameterised() const { return kind == ModuleKind::Linear || kind == ModuleKind::Conv2d; }
    std::size_t arity() const { return kind == ModuleKind::Add ? 2 : 1; }
};

struct ParamSlot {
    std::string role;  // "weight" | "bias"
    Tensor value;
};

// Fired at module boundaries during execution; the hooking layer implements
// this to dispatch user hooks. Mutating the tensors replaces the payloads.
struct ExecObserver {
    virtual ~ExecObserver() = default;
    virtual void on_inputs(const ModuleSpec& mod, std::vector<Tensor>& inputs) { (void)mod, (void)inputs; }
    virtual void on_output(const ModuleSpec& mod, Tensor& output) { (void)mod, (void)output; }
    virtual bool stop_after(const ModuleSpec& mod) {
        (void)mod;
        return false;
    }
    virtual void on_grad_output(const ModuleSpec& mod, Tensor& grad) { (void)mod, (void)grad; }
    virtual void on_grad_inputs(const ModuleSpec& mod, std::vector<Tensor>& grads) { (void)mod, (void)grads; }
};

class Tape;

// Immutable-after-construction module graph. Multiple inputs and outputs
// are first-class; outputs name the modules that produce them.
class ModelGraph {
public:
    ModelGraph(std::vector<ModuleSpec> modules, std::vector<std::vector<ParamSlot>> params,
               std::vector<std::string> inputs, std::vector<std::string> outputs);

    const std::vector<ModuleSpec>& modules() const { return modules_; }
    const std::vector<std::string>& input_keys() const { return inputs_; }
    const std::vector<std::string>& output_keys() const { return outputs_; }

    bool has_module(const std::string& name) const { return module_index(name).has_value(); }
    std::optional<std::size_t> module_index(const std::string& name) const;
    const ModuleSpec& module(const std::string& name) const;
    const std::vector<ParamSlot>& params_of(std::size_t module_index) const { return params_[module_index]; }

    // Parameter map keyed "<module>.<role>", unbatched.
    TensorMap parameters() const;
    ModelGraph with_parameters(const TensorMap& params) const;

    std::size_t parameter_count() const;

    // True when `candidate` runs strictly downstream of `site` (site feeds it
    // through the topology).
    bool is_downstream(const std::string& site, const std::string& candidate) const;

private:
    std::vector<ModuleSpec> modules_;
    std::vector<std::vector<ParamSlot>> params_;
    std::vector<std::string> inputs_;
    std::vector<std::string> outputs_;
};

// Recording of one forward pass: per executed module, its (post-hook) input
// and output values. Feeds exactly one reverse pass; relevance propagation
// reads it without consuming.
class Tape {
public:
    struct Entry {
        std::size_t module_index;
        std::vector<Tensor> inputs;
        Tensor output;
    };

    const ModelGraph& model() const { return *model_; }
    const std::vector<Entry>& entries() const { return entries_; }
    const TensorMap& graph_inputs() const { return graph_inputs_; }
    bool consumed() const { return consumed_; }

    const Entry* entry_for(const std::string& module_name) const;

private:
    friend struct ForwardRunner;
    friend TensorMap backward(Tape&, const TensorMap&, ExecObserver*);

    const ModelGraph* model_ = nullptr;
    std::vector<Entry> entries_;
    TensorMap graph_inputs_;
    bool consumed_ = false;
};

struct ForwardResult {
    TensorMap outputs;
    std::optional<Tape> tape;
};

// Runs the graph. Hooks fire through `obs` at each module boundary; when
// `record` is set the returned tape supports one backward pass.
ForwardResult forward(const ModelGraph& model, const TensorMap& inputs, bool record,
                      ExecObserver* obs = nullptr);

// Reverse pass over a recorded tape. Seed keys must name executed modules
// (graph outputs in the common case); each seed matches that output's shape.
// Gradients come back keyed by input keys and "<module>.<role>" parameter
// paths; unreachable inputs are zero-filled.
TensorMap backward(Tape& tape, const TensorMap& seed, ExecObserver* obs = nullptr);

// Central finite differences of output[*, output_index] (summed over batch)
// with respect to every input coordinate. Test oracle; O(2 * coords) forwards.
TensorMap finite_difference_gradient(const ModelGraph& model, const TensorMap& inputs,
                                     const std::string& output_key, std::size_t output_index, double h);

// Computes a module's forward given explicit inputs and parameters (used by
// LRP and by manual sub-graph composition in tests).
Tensor module_forward(const ModuleSpec& mod, const std::vector<ParamSlot>& params,
                      const std::vector<Tensor>& inputs);

}  // namespace gradlens

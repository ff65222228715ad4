// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradlens/hooking.hpp"

namespace gradlens {

// Selects what gets attributed: one scalar per batch element (flat index
// into the per-sample output) or an explicit vector seed over the output.
struct TargetSpec {
    std::string output_key;
    std::size_t index = 0;
    std::optional<Tensor> seed;
};

struct AttributionConfig {
    TargetSpec target;
    std::optional<TensorMap> baseline;  // path methods' x'
    std::size_t steps = 32;
    bool multiply_by_inputs = false;
    bool prob_space = false;  // initialise relevance from softmax probability instead of the raw logit
};

// attributions: keyed like the inputs (or like the probed layer for layer
// methods). details: method-specific extras (per-site relevance, raw maps).
struct AttributionResult {
    TensorMap attributions;
    TensorMap details;
    std::string method;
    std::string config_digest;
};

struct LrpRuleSpec {
    enum class Kind { Lrp0, Epsilon, ZPlus, Gamma, Flat, WSquare };
    Kind kind = Kind::Epsilon;
    double epsilon = 1e-6;
    double gamma = 0.25;

    static LrpRuleSpec lrp0() { return {Kind::Lrp0, 1e-6, 0.25}; }
    static LrpRuleSpec eps(double e = 1e-6) { return {Kind::Epsilon, e, 0.25}; }
    static LrpRuleSpec zplus() { return {Kind::ZPlus, 1e-6, 0.25}; }
    static LrpRuleSpec gamma_rule(double g = 0.25) { return {Kind::Gamma, 1e-6, g}; }
    static LrpRuleSpec flat() { return {Kind::Flat, 1e-6, 0.25}; }
    static LrpRuleSpec wsquare() { return {Kind::WSquare, 1e-6, 0.25}; }
};

std::string lrp_rule_name(LrpRuleSpec::Kind kind);
LrpRuleSpec::Kind lrp_rule_from_name(const std::string& name);

// Ordered (module-path glob -> rule); first match wins and the list must end
// with a "*" default so every module is covered.
struct LrpRules {
    std::vector<std::pair<std::string, LrpRuleSpec>> assignment;

    static LrpRules uniform(LrpRuleSpec rule) { return LrpRules{{{"*", rule}}}; }
};

bool glob_match(const std::string& pattern, const std::string& text);

// Concept conditioning for relevance propagation: restrict the relevance at
// `site` to selected channels, or project it onto a CAV direction.
struct ConceptCondition {
    std::string site;
    std::vector<std::size_t> channels;  // channel mask when non-empty
    std::optional<Tensor> cav;          // (R.v̂)v̂ projection when set
};

struct MaximisationOptions {
    double lr = 0.05;
    std::size_t iters = 200;
    double l2 = 0.0;
    std::uint64_t seed = 0;
    double init_noise = 0.0;  // stddev of seeded noise added to the start point
};

struct MaximisationResult {
    TensorMap pre_image;
    std::vector<double> objective;   // target minus l2 penalty, per iterate
    std::vector<double> activation;  // raw selected unit value, per iterate
};

enum class FillMode { Mean, Zero, Baseline };
FillMode fill_mode_from_name(const std::string& name);

struct FlipCurve {
    std::vector<double> fractions;
    std::vector<double> logit;  // mean target logit per fraction
    std::vector<double> prob;   // mean target softmax probability per fraction
    double auc_logit = 0.0;
    double auc_prob = 0.0;
};

AttributionResult saliency(HookedModel& model, const TensorMap& inputs, const AttributionConfig& cfg);
AttributionResult integrated_gradients(HookedModel& model, const TensorMap& inputs,
                                       const AttributionConfig& cfg);
AttributionResult layer_conductance(HookedModel& model, const TensorMap& inputs,
                                    const AttributionConfig& cfg, const std::string& site);
AttributionResult grad_cam(HookedModel& model, const TensorMap& inputs, const AttributionConfig& cfg,
                           const std::string& conv_site);
AttributionResult guided_backprop(HookedModel& model, const TensorMap& inputs,
                                  const AttributionConfig& cfg);
AttributionResult lrp(HookedModel& model, const TensorMap& inputs, const AttributionConfig& cfg,
                      const LrpRules& rules, const std::optional<ConceptCondition>& condition = std::nullopt);
MaximisationResult activation_maximisation(HookedModel& model, const std::string& site, std::size_t unit,
                                           const TensorMap& start, const MaximisationOptions& opts);
FlipCurve pixel_flipping(HookedModel& model, const TensorMap& inputs, const AttributionResult& attribution,
                         const TargetSpec& metric, const std::vector<double>& fractions, FillMode fill,
                         const std::optional<TensorMap>& baseline = std::nullopt);

// Internal shared helpers (also used by the latent module).
Tensor one_hot_seed(const Tensor& output, std::size_t index);
std::string config_digest(const AttributionConfig& cfg);

}  // namespace gradlens

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gradlens/attribution.hpp"
#include "gradlens/hooking.hpp"

namespace gradlens {

// Flattened per-sample activations per site plus the k most activating
// samples per unit (ties resolved toward the lower sample id).
class ActivationStore {
public:
    struct Exemplar {
        double value;
        std::size_t sample;
    };

    const std::vector<std::string>& sites() const { return sites_; }
    std::size_t k() const { return k_; }
    std::size_t samples() const { return samples_; }

    const Tensor& activations(const std::string& site) const;  // [samples, units]
    const std::vector<Exemplar>& top(const std::string& site, std::size_t unit) const;

private:
    friend ActivationStore cache_activations(HookedModel&, const std::vector<TensorMap>&,
                                             const std::vector<std::string>&, std::size_t);
    std::vector<std::string> sites_;
    std::unordered_map<std::string, Tensor> acts_;
    std::unordered_map<std::string, std::vector<std::vector<Exemplar>>> top_;
    std::size_t k_ = 0;
    std::size_t samples_ = 0;
};

struct ProbeReport {
    std::string site;
    Tensor weights;    // [units, targets]
    Tensor intercept;  // [targets]
    double r2_train = 0.0;
    double r2_test = 0.0;
    bool r2_train_defined = true;
    bool r2_test_defined = true;
    double lambda = 0.0;
};

enum class CavMethod { MeanDifference, Logistic };

struct Cav {
    std::string site;
    Tensor direction;  // unit norm
    CavMethod method = CavMethod::MeanDifference;
};

enum class PatchMode { Gradient, Relevance };

// Per-unit effect tensor for each probed site, one entry per method column.
// Pearson correlations pool every unit of every site and are absent when a
// column has zero variance.
struct PatchReport {
    std::vector<std::string> sites;
    std::vector<Tensor> activation;
    std::vector<Tensor> gradient;
    std::vector<Tensor> relevance;
    std::optional<double> pearson_gradient;
    std::optional<double> pearson_relevance;
};

ActivationStore cache_activations(HookedModel& model, const std::vector<TensorMap>& dataset,
                                  const std::vector<std::string>& sites, std::size_t k);

ProbeReport fit_probe(const Tensor& activations, const Tensor& targets, double lambda = 1e-6,
                      std::uint64_t seed = 0);
ProbeReport fit_probe(const ActivationStore& store, const std::string& site, const Tensor& targets,
                      double lambda = 1e-6, std::uint64_t seed = 0);

Cav fit_cav(const Tensor& positives, const Tensor& negatives, const std::string& site, CavMethod method);

double tcav_score(HookedModel& model, const std::vector<TensorMap>& dataset, const Cav& cav,
                  const TargetSpec& target);

PatchReport activation_patch(HookedModel& model, const TensorMap& clean, const TensorMap& corrupt,
                             const std::vector<std::string>& sites, const TargetSpec& metric);
PatchReport attribution_patch(HookedModel& model, const TensorMap& clean, const TensorMap& corrupt,
                              const std::vector<std::string>& sites, const TargetSpec& metric,
                              PatchMode mode,
                              const LrpRules& rules = LrpRules::uniform(LrpRuleSpec::eps()));

Tensor steering_vector(HookedModel& model, const std::vector<TensorMap>& positives,
                       const std::vector<TensorMap>& negatives, const std::string& site);
// Installs a persistent hook adding alpha * vector at the site; returns the
// hook id so deregister() can undo it.
std::uint64_t apply_steering(HookedModel& model, const std::string& site, const Tensor& vector,
                             double alpha);

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace gradlens

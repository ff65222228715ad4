// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gradlens/model.hpp"

namespace gradlens {

enum class HookKind { ForwardPre, Forward, Backward };
enum class HookScope { Persistent, Context };
enum class DeregisterResult { Removed, NotRegistered };

// Payload sites a proxy or intervention can address. Forward-pre hooks see
// "input[.i]" keys, forward hooks "output", backward hooks "grad_output" and
// "grad_input[.i]".
enum class SiteKind { Input, Output, GradInput, GradOutput };

std::string site_kind_name(SiteKind kind);
SiteKind site_kind_from_name(const std::string& name);

// Returning a map replaces the payload keys it mentions; nullopt observes.
using HookCallback = std::function<std::optional<TensorMap>(const std::string& site, const TensorMap& payload)>;

struct HookRecord {
    std::size_t id = 0;
    std::string site;
    HookKind kind = HookKind::Forward;
    HookScope scope = HookScope::Persistent;
    std::size_t order = 0;  // registration index, fire order within a site
    std::uint32_t fire_mask = 0;
    HookCallback callback;
};

// Pending until its site fires inside a run; resolved values are immutable.
class CacheProxy {
public:
    CacheProxy() = default;
    bool resolved() const { return state_ && state_->value.has_value(); }
    const Tensor& value() const;
    const std::string& site() const { return state_->site; }
    SiteKind kind() const { return state_->kind; }

private:
    friend class RunContext;
    struct State {
        std::string site;
        SiteKind kind = SiteKind::Output;
        std::size_t index = 0;
        std::optional<Tensor> value;
    };
    std::shared_ptr<State> state_;
};

// Wraps a ModelGraph with an ordered hook registry and a capture cache.
// Behaviourally identical to the inner graph until hooks are added.
class HookedModel {
public:
    explicit HookedModel(ModelGraph inner) : inner_(std::move(inner)) {}

    const ModelGraph& inner() const { return inner_; }
    bool idle() const { return !running_; }

    std::size_t register_hook(const std::string& site, HookKind kind, HookCallback callback,
                              HookScope scope = HookScope::Persistent);
    DeregisterResult deregister(std::size_t id);
    std::size_t deregister_scope(HookScope scope);

    const std::vector<HookRecord>& registry() const { return registry_; }
    std::uint64_t registry_digest() const;

    // Captures from the most recent run, keyed "<site>.<kind>[.<index>]".
    const TensorMap& cache() const { return cache_; }

    // Plain forward; persistent hooks fire, no recording.
    TensorMap forward(const TensorMap& inputs);

    // Replaces the wrapped graph's parameters in place (weight-space edits).
    void set_inner(ModelGraph inner);

private:
    friend class RunContext;
    friend struct HookDispatcher;

    std::size_t add_record(const std::string& site, HookKind kind, std::uint32_t mask, HookScope scope,
                           HookCallback callback);
    void ensure_site(const std::string& site) const;
    void ensure_idle_for_edit() const;

    ModelGraph inner_;
    std::vector<HookRecord> registry_;
    TensorMap cache_;
    std::size_t next_id_ = 1;
    std::size_t next_order_ = 0;
    bool running_ = false;
};

// One prepared execution: get/set/stop_at stage context-scoped hooks, run()
// fires them exactly once, and every exit path restores the registry.
class RunContext {
public:
    explicit RunContext(HookedModel& model);
    ~RunContext();
    RunContext(const RunContext&) = delete;
    RunContext& operator=(const RunContext&) = delete;

    CacheProxy get(const std::string& site, SiteKind kind, std::size_t index = 0);
    void set(const std::string& site, SiteKind kind, Tensor replacement, std::size_t index = 0);
    void set(const std::string& site, SiteKind kind, std::function<Tensor(const Tensor&)> transform,
             std::size_t index = 0);
    void stop_at(const std::string& site);

    // Requests a backward pass; seed keys name executed modules.
    void seed_backward(TensorMap seed);

    TensorMap run(const TensorMap& inputs);

    bool ran() const { return ran_; }
    const TensorMap& gradients() const;

private:
    std::string payload_key(const std::string& site, SiteKind kind, std::size_t index) const;
    std::string cache_key(const std::string& site, SiteKind kind, std::size_t index) const;
    void remove_context_hooks();

    HookedModel& model_;
    std::vector<std::size_t> hook_ids_;
    std::vector<std::shared_ptr<CacheProxy::State>> proxies_;
    std::optional<std::string> stop_site_;
    std::optional<TensorMap> seed_;
    std::optional<TensorMap> gradients_;
    bool has_grad_proxies_ = false;
    bool ran_ = false;
};

}  // namespace gradlens

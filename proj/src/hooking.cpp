// SPDX-License-Identifier: Apache-2.0
#include "gradlens/hooking.hpp"

#include <algorithm>

namespace gradlens {

namespace {

enum FirePoint : std::uint32_t {
    FireInput = 1u << 0,
    FireOutput = 1u << 1,
    FireGradOutput = 1u << 2,
    FireGradInput = 1u << 3,
};

std::uint32_t mask_of(HookKind kind) {
    switch (kind) {
        case HookKind::ForwardPre: return FireInput;
        case HookKind::Forward: return FireOutput;
        case HookKind::Backward: return FireGradOutput | FireGradInput;
    }
    return 0;
}

std::uint32_t point_of(SiteKind kind) {
    switch (kind) {
        case SiteKind::Input: return FireInput;
        case SiteKind::Output: return FireOutput;
        case SiteKind::GradOutput: return FireGradOutput;
        case SiteKind::GradInput: return FireGradInput;
    }
    return 0;
}

HookKind hook_kind_of(SiteKind kind) {
    switch (kind) {
        case SiteKind::Input: return HookKind::ForwardPre;
        case SiteKind::Output: return HookKind::Forward;
        default: return HookKind::Backward;
    }
}

}  // namespace

std::string site_kind_name(SiteKind kind) {
    switch (kind) {
        case SiteKind::Input: return "input";
        case SiteKind::Output: return "output";
        case SiteKind::GradInput: return "grad_input";
        case SiteKind::GradOutput: return "grad_output";
    }
    return "?";
}

SiteKind site_kind_from_name(const std::string& name) {
    if (name == "input") return SiteKind::Input;
    if (name == "output") return SiteKind::Output;
    if (name == "grad_input") return SiteKind::GradInput;
    if (name == "grad_output") return SiteKind::GradOutput;
    throw ConfigError("unknown site kind '" + name + "'");
}

const Tensor& CacheProxy::value() const {
    if (!state_) throw StateError("empty cache proxy");
    if (!state_->value) {
        throw StateError("cache proxy for '" + state_->site + "." + site_kind_name(state_->kind) +
                         "' is still pending; resolve it after run()");
    }
    return *state_->value;
}

// Routes engine boundary events into the registry, ascending by
// registration order at each (site, point).
struct HookDispatcher : ExecObserver {
    HookedModel* model;
    const std::string* stop_site = nullptr;

    void fire(const std::string& site, std::uint32_t point, TensorMap& payload) {
        for (const auto& rec : model->registry_) {
            if (rec.site != site || !(rec.fire_mask & point)) continue;
            auto replacement = rec.callback(site, payload);
            if (!replacement) continue;
            for (const auto& [key, value] : flatten_keys(*replacement)) {
                if (!payload.contains(key) || !payload.is_leaf_at(key)) {
                    throw KeyError("hook at '" + site + "' replaced unknown payload key '" + key + "'");
                }
                if (value.shape() != payload.get(key).shape()) {
                    throw ShapeError("hook at '" + site + "' replaced '" + key + "' with shape " +
                                     value.shape_str() + ", expected " + payload.get(key).shape_str());
                }
                payload.put(key, value);
            }
        }
    }

    bool wants(const std::string& site, std::uint32_t point) const {
        for (const auto& rec : model->registry_) {
            if (rec.site == site && (rec.fire_mask & point)) return true;
        }
        return false;
    }

    void on_inputs(const ModuleSpec& mod, std::vector<Tensor>& inputs) override {
        if (!wants(mod.name, FireInput)) return;
        TensorMap payload;
        if (inputs.size() == 1) {
            payload.put("input", inputs[0]);
        } else {
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                payload.put("input." + std::to_string(i), inputs[i]);
            }
        }
        fire(mod.name, FireInput, payload);
        if (inputs.size() == 1) {
            inputs[0] = payload.get("input");
        } else {
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                inputs[i] = payload.get("input." + std::to_string(i));
            }
        }
    }

    void on_output(const ModuleSpec& mod, Tensor& output) override {
        if (!wants(mod.name, FireOutput)) return;
        TensorMap payload;
        payload.put("output", output);
        fire(mod.name, FireOutput, payload);
        output = payload.get("output");
    }

    void on_grad_output(const ModuleSpec& mod, Tensor& grad) override {
        if (!wants(mod.name, FireGradOutput)) return;
        TensorMap payload;
        payload.put("grad_output", grad);
        fire(mod.name, FireGradOutput, payload);
        grad = payload.get("grad_output");
    }

    void on_grad_inputs(const ModuleSpec& mod, std::vector<Tensor>& grads) override {
        if (!wants(mod.name, FireGradInput)) return;
        TensorMap payload;
        if (grads.size() == 1) {
            payload.put("grad_input", grads[0]);
        } else {
            for (std::size_t i = 0; i < grads.size(); ++i) {
                payload.put("grad_input." + std::to_string(i), grads[i]);
            }
        }
        fire(mod.name, FireGradInput, payload);
        if (grads.size() == 1) {
            grads[0] = payload.get("grad_input");
        } else {
            for (std::size_t i = 0; i < grads.size(); ++i) {
                grads[i] = payload.get("grad_input." + std::to_string(i));
            }
        }
    }

    bool stop_after(const ModuleSpec& mod) override { return stop_site && mod.name == *stop_site; }
};

void HookedModel::ensure_site(const std::string& site) const {
    if (!inner_.has_module(site)) throw KeyError("unknown site '" + site + "'");
}

void HookedModel::ensure_idle_for_edit() const {
    if (running_) throw StateError("registry is frozen while a run is active");
}

std::size_t HookedModel::add_record(const std::string& site, HookKind kind, std::uint32_t mask,
                                    HookScope scope, HookCallback callback) {
    ensure_site(site);
    ensure_idle_for_edit();
    HookRecord rec;
    rec.id = next_id_++;
    rec.site = site;
    rec.kind = kind;
    rec.scope = scope;
    rec.order = next_order_++;
    rec.fire_mask = mask;
    rec.callback = std::move(callback);
    registry_.push_back(std::move(rec));
    return registry_.back().id;
}

std::size_t HookedModel::register_hook(const std::string& site, HookKind kind, HookCallback callback,
                                       HookScope scope) {
    return add_record(site, kind, mask_of(kind), scope, std::move(callback));
}

DeregisterResult HookedModel::deregister(std::size_t id) {
    ensure_idle_for_edit();
    auto it = std::find_if(registry_.begin(), registry_.end(),
                           [&](const HookRecord& r) { return r.id == id; });
    if (it == registry_.end()) return DeregisterResult::NotRegistered;
    registry_.erase(it);
    return DeregisterResult::Removed;
}

std::size_t HookedModel::deregister_scope(HookScope scope) {
    ensure_idle_for_edit();
    std::size_t before = registry_.size();
    registry_.erase(std::remove_if(registry_.begin(), registry_.end(),
                                   [&](const HookRecord& r) { return r.scope == scope; }),
                    registry_.end());
    return before - registry_.size();
}

std::uint64_t HookedModel::registry_digest() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::uint64_t v) {
        h ^= v;
        h *= 1099511628211ull;
    };
    for (const auto& rec : registry_) {
        mix(rec.id);
        mix(static_cast<std::uint64_t>(rec.kind));
        mix(static_cast<std::uint64_t>(rec.scope));
        mix(rec.fire_mask);
        mix(rec.order);
        for (char c : rec.site) mix(static_cast<unsigned char>(c));
    }
    return h;
}

TensorMap HookedModel::forward(const TensorMap& inputs) {
    if (running_) throw StateError("model already has an active run");
    running_ = true;
    HookDispatcher disp;
    disp.model = this;
    try {
        TensorMap out = gradlens::forward(inner_, inputs, false, &disp).outputs;
        running_ = false;
        return out;
    } catch (...) {
        running_ = false;
        throw;
    }
}

void HookedModel::set_inner(ModelGraph inner) {
    ensure_idle_for_edit();
    inner_ = std::move(inner);
}

RunContext::RunContext(HookedModel& model) : model_(model) {}

RunContext::~RunContext() { remove_context_hooks(); }

void RunContext::remove_context_hooks() {
    for (std::size_t id : hook_ids_) {
        auto it = std::find_if(model_.registry_.begin(), model_.registry_.end(),
                               [&](const HookRecord& r) { return r.id == id; });
        if (it != model_.registry_.end()) model_.registry_.erase(it);
    }
    hook_ids_.clear();
}

std::string RunContext::payload_key(const std::string& site, SiteKind kind, std::size_t index) const {
    std::size_t arity = model_.inner_.module(site).arity();
    if (index >= arity) {
        throw KeyError("site '" + site + "' has arity " + std::to_string(arity) + ", index " +
                       std::to_string(index) + " is out of range");
    }
    switch (kind) {
        case SiteKind::Input: return arity == 1 ? "input" : "input." + std::to_string(index);
        case SiteKind::Output: return "output";
        case SiteKind::GradOutput: return "grad_output";
        case SiteKind::GradInput: return arity == 1 ? "grad_input" : "grad_input." + std::to_string(index);
    }
    throw Error("unreachable");
}

std::string RunContext::cache_key(const std::string& site, SiteKind kind, std::size_t index) const {
    std::size_t arity = model_.inner_.module(site).arity();
    std::string key = site + "." + site_kind_name(kind);
    bool indexed = (kind == SiteKind::Input || kind == SiteKind::GradInput) && arity > 1;
    return indexed ? key + "." + std::to_string(index) : key;
}

CacheProxy RunContext::get(const std::string& site, SiteKind kind, std::size_t index) {
    model_.ensure_site(site);
    if (ran_) throw StateError("run context already executed");
    auto state = std::make_shared<CacheProxy::State>();
    state->site = site;
    state->kind = kind;
    state->index = index;
    proxies_.push_back(state);
    if (kind == SiteKind::GradInput || kind == SiteKind::GradOutput) has_grad_proxies_ = true;

    std::string pkey = payload_key(site, kind, index);
    std::string ckey = cache_key(site, kind, index);
    HookedModel* model = &model_;
    auto capture = [state, model, pkey, ckey](const std::string&,
                                              const TensorMap& payload) -> std::optional<TensorMap> {
        Tensor v = payload.get(pkey);
        state->value = v;
        model->cache_.put(ckey, v);
        return std::nullopt;
    };
    hook_ids_.push_back(
        model_.add_record(site, hook_kind_of(kind), point_of(kind), HookScope::Context, capture));

    CacheProxy proxy;
    proxy.state_ = state;
    return proxy;
}

void RunContext::set(const std::string& site, SiteKind kind, Tensor replacement, std::size_t index) {
    set(
        site, kind, [replacement](const Tensor&) { return replacement; }, index);
}

void RunContext::set(const std::string& site, SiteKind kind, std::function<Tensor(const Tensor&)> transform,
                     std::size_t index) {
    model_.ensure_site(site);
    if (ran_) throw StateError("run context already executed");
    std::string pkey = payload_key(site, kind, index);
    auto intervene = [pkey, transform](const std::string&,
                                       const TensorMap& payload) -> std::optional<TensorMap> {
        TensorMap repl;
        repl.put(pkey, transform(payload.get(pkey)));
        return repl;
    };
    hook_ids_.push_back(
        model_.add_record(site, hook_kind_of(kind), point_of(kind), HookScope::Context, intervene));
}

void RunContext::stop_at(const std::string& site) {
    model_.ensure_site(site);
    stop_site_ = site;
}

void RunContext::seed_backward(TensorMap seed) { seed_ = std::move(seed); }

TensorMap RunContext::run(const TensorMap& inputs) {
    if (ran_) throw StateError("run context already executed");
    if (model_.running_) throw StateError("model already has an active run");
    bool backward_enabled = seed_.has_value();
    if (has_grad_proxies_ && !backward_enabled) {
        throw StateError("grad_* proxies need a backward-enabled run; call seed_backward first");
    }
    ran_ = true;
    model_.running_ = true;
    model_.cache_ = TensorMap{};

    HookDispatcher disp;
    disp.model = &model_;
    if (stop_site_) disp.stop_site = &*stop_site_;

    try {
        ForwardResult res = forward(model_.inner_, inputs, backward_enabled, &disp);
        if (backward_enabled) gradients_ = backward(*res.tape, *seed_, &disp);

        std::string pending;
        for (const auto& proxy : proxies_) {
            if (!proxy->value) {
                if (!pending.empty()) pending += ", ";
                pending += proxy->site + "." + site_kind_name(proxy->kind);
            }
        }
        if (!pending.empty()) {
            throw StateError("proxies left pending after run (site skipped?): " + pending);
        }

        model_.running_ = false;
        remove_context_hooks();
        return std::move(res.outputs);
    } catch (...) {
        model_.running_ = false;
        remove_context_hooks();
        throw;
    }
}

const TensorMap& RunContext::gradients() const {
    if (!gradients_) throw StateError("no backward pass ran in this context");
    return *gradients_;
}

}  // namespace gradlens

// SPDX-License-Identifier: Apache-2.0
#include "gradlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace gradlens {

std::string module_kind_name(ModuleKind kind) {
    switch (kind) {
        case ModuleKind::Linear: return "linear";
        case ModuleKind::Conv2d: return "conv2d";
        case ModuleKind::Relu: return "relu";
        case ModuleKind::Tanh: return "tanh";
        case ModuleKind::Sigmoid: return "sigmoid";
        case ModuleKind::Softmax: return "softmax";
        case ModuleKind::Flatten: return "flatten";
        case ModuleKind::AvgPool2d: return "avgpool2d";
        case ModuleKind::Add: return "add";
    }
    return "?";
}

ModuleKind module_kind_from_name(const std::string& name) {
    if (name == "linear") return ModuleKind::Linear;
    if (name == "conv2d") return ModuleKind::Conv2d;
    if (name == "relu") return ModuleKind::Relu;
    if (name == "tanh") return ModuleKind::Tanh;
    if (name == "sigmoid") return ModuleKind::Sigmoid;
    if (name == "softmax") return ModuleKind::Softmax;
    if (name == "flatten") return ModuleKind::Flatten;
    if (name == "avgpool2d") return ModuleKind::AvgPool2d;
    if (name == "add") return ModuleKind::Add;
    throw ConfigError("unknown module kind '" + name + "'");
}

namespace {

void validate_params(const ModuleSpec& mod, const std::vector<ParamSlot>& params) {
    auto expect = [&](std::size_t i, const std::string& role, const std::vector<std::size_t>& shape) {
        if (i >= params.size() || params[i].role != role) {
            throw ShapeError("module '" + mod.name + "' expects parameter '" + role + "' at slot " +
                             std::to_string(i));
        }
        if (params[i].value.shape() != shape) {
            throw ShapeError("module '" + mod.name + "' parameter '" + role + "' has shape " +
                             params[i].value.shape_str() + ", expected " + shape_to_string(shape));
        }
    };
    switch (mod.kind) {
        case ModuleKind::Linear: {
            std::size_t want = mod.has_bias ? 2 : 1;
            if (params.size() != want) {
                throw ShapeError("module '" + mod.name + "' expects " + std::to_string(want) + " parameters");
            }
            expect(0, "weight", {mod.out_features, mod.in_features});
            if (mod.has_bias) expect(1, "bias", {mod.out_features});
            break;
        }
        case ModuleKind::Conv2d: {
            std::size_t want = mod.has_bias ? 2 : 1;
            if (params.size() != want) {
                throw ShapeError("module '" + mod.name + "' expects " + std::to_string(want) + " parameters");
            }
            expect(0, "weight", {mod.out_channels, mod.in_channels, mod.kernel, mod.kernel});
            if (mod.has_bias) expect(1, "bias", {mod.out_channels});
            break;
        }
        default:
            if (!params.empty()) {
                throw ShapeError("module '" + mod.name + "' (" + module_kind_name(mod.kind) +
                                 ") takes no parameters");
            }
    }
}

std::size_t normalize_axis(int axis, std::size_t rank, const std::string& name) {
    long long a = axis;
    if (a < 0) a += static_cast<long long>(rank);
    if (a < 0 || a >= static_cast<long long>(rank)) {
        throw ShapeError("module '" + name + "': softmax axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

struct ConvDims {
    std::size_t n, cin, h, w, cout, k, s, p, ho, wo;
};

ConvDims conv_dims(const ModuleSpec& mod, const Tensor& x) {
    if (x.rank() != 4) {
        throw ShapeError("module '" + mod.name + "': conv2d input must be [N,C,H,W], got " + x.shape_str());
    }
    ConvDims d{};
    d.n = x.shape()[0];
    d.cin = x.shape()[1];
    d.h = x.shape()[2];
    d.w = x.shape()[3];
    d.cout = mod.out_channels;
    d.k = mod.kernel;
    d.s = mod.stride;
    d.p = mod.pad;
    if (d.cin != mod.in_channels) {
        throw ShapeError("module '" + mod.name + "': expected " + std::to_string(mod.in_channels) +
                         " input channels, got " + std::to_string(d.cin));
    }
    if (d.h + 2 * d.p < d.k || d.w + 2 * d.p < d.k) {
        throw ShapeError("module '" + mod.name + "': kernel larger than padded input");
    }
    d.ho = (d.h + 2 * d.p - d.k) / d.s + 1;
    d.wo = (d.w + 2 * d.p - d.k) / d.s + 1;
    return d;
}

Tensor linear_forward(const ModuleSpec& mod, const std::vector<ParamSlot>& params, const Tensor& x) {
    if (x.rank() != 2 || x.shape()[1] != mod.in_features) {
        throw ShapeError("module '" + mod.name + "': linear expects [N," + std::to_string(mod.in_features) +
                         "], got " + x.shape_str());
    }
    std::size_t n = x.shape()[0];
    std::size_t in = mod.in_features;
    std::size_t out = mod.out_features;
    const double* w = params[0].value.data();
    const double* b = mod.has_bias ? params[1].value.data() : nullptr;
    Tensor y = Tensor::zeros({n, out});
    double* yd = y.mutable_data();
    const double* xd = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b ? b[o] : 0.0;
            const double* wrow = w + o * in;
            const double* xrow = xd + r * in;
            for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * xrow[i];
            yd[r * out + o] = acc;
        }
    }
    return y;
}

Tensor conv2d_forward(const ModuleSpec& mod, const std::vector<ParamSlot>& params, const Tensor& x) {
    ConvDims d = conv_dims(mod, x);
    const double* w = params[0].value.data();
    const double* b = mod.has_bias ? params[1].value.data() : nullptr;
    const double* xd = x.data();
    Tensor y = Tensor::zeros({d.n, d.cout, d.ho, d.wo});
    double* yd = y.mutable_data();
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t co = 0; co < d.cout; ++co) {
            for (std::size_t ho = 0; ho < d.ho; ++ho) {
                for (std::size_t wo = 0; wo < d.wo; ++wo) {
                    double acc = b ? b[co] : 0.0;
                    for (std::size_t ci = 0; ci < d.cin; ++ci) {
                        for (std::size_t i = 0; i < d.k; ++i) {
                            long long yy = static_cast<long long>(ho * d.s + i) - static_cast<long long>(d.p);
                            if (yy < 0 || yy >= static_cast<long long>(d.h)) continue;
                            for (std::size_t j = 0; j < d.k; ++j) {
                                long long xx =
                                    static_cast<long long>(wo * d.s + j) - static_cast<long long>(d.p);
                                if (xx < 0 || xx >= static_cast<long long>(d.w)) continue;
                                acc += w[((co * d.cin + ci) * d.k + i) * d.k + j] *
                                       xd[((n * d.cin + ci) * d.h + yy) * d.w + xx];
                            }
                        }
                    }
                    yd[((n * d.cout + co) * d.ho + ho) * d.wo + wo] = acc;
                }
            }
        }
    }
    return y;
}

Tensor softmax_forward(const ModuleSpec& mod, const Tensor& x) {
    std::size_t ax = normalize_axis(mod.axis, x.rank(), mod.name);
    std::size_t axis_dim = x.shape()[ax];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
    for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[i];
    Tensor y = Tensor::zeros(x.shape());
    double* yd = y.mutable_data();
    const double* xd = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            double mx = -1e300;
            for (std::size_t a = 0; a < axis_dim; ++a) mx = std::max(mx, xd[(o * axis_dim + a) * inner + in]);
            double denom = 0.0;
            for (std::size_t a = 0; a < axis_dim; ++a) {
                denom += std::exp(xd[(o * axis_dim + a) * inner + in] - mx);
            }
            for (std::size_t a = 0; a < axis_dim; ++a) {
                std::size_t idx = (o * axis_dim + a) * inner + in;
                yd[idx] = std::exp(xd[idx] - mx) / denom;
            }
        }
    }
    return y;
}

Tensor avgpool_forward(const ModuleSpec& mod, const Tensor& x) {
    if (x.rank() != 4) {
        throw ShapeError("module '" + mod.name + "': avgpool2d input must be [N,C,H,W], got " + x.shape_str());
    }
    std::size_t k = mod.pool_kernel;
    std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (k == 0 || h % k != 0 || w % k != 0) {
        throw ShapeError("module '" + mod.name + "': spatial dims " + x.shape_str() +
                         " not divisible by pool kernel " + std::to_string(k));
    }
    std::size_t ho = h / k, wo = w / k;
    Tensor y = Tensor::zeros({n, c, ho, wo});
    double* yd = y.mutable_data();
    const double* xd = x.data();
    double scale = 1.0 / static_cast<double>(k * k);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t i = 0; i < ho; ++i) {
                for (std::size_t j = 0; j < wo; ++j) {
                    double acc = 0.0;
                    for (std::size_t di = 0; di < k; ++di) {
                        for (std::size_t dj = 0; dj < k; ++dj) {
                            acc += xd[((b * c + ch) * h + i * k + di) * w + j * k + dj];
                        }
                    }
                    yd[((b * c + ch) * ho + i) * wo + j] = acc * scale;
                }
            }
        }
    }
    return y;
}

}  // namespace

Tensor module_forward(const ModuleSpec& mod, const std::vector<ParamSlot>& params,
                      const std::vector<Tensor>& inputs) {
    if (inputs.size() != mod.arity()) {
        throw ShapeError("module '" + mod.name + "' expects " + std::to_string(mod.arity()) + " inputs, got " +
                         std::to_string(inputs.size()));
    }
    const Tensor& x = inputs[0];
    switch (mod.kind) {
        case ModuleKind::Linear: return linear_forward(mod, params, x);
        case ModuleKind::Conv2d: return conv2d_forward(mod, params, x);
        case ModuleKind::Relu: return x.map([](double v) { return v > 0.0 ? v : 0.0; });
        case ModuleKind::Tanh: return x.map([](double v) { return std::tanh(v); });
        case ModuleKind::Sigmoid: return x.map([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        case ModuleKind::Softmax: return softmax_forward(mod, x);
        case ModuleKind::Flatten: {
            if (x.rank() < 1) throw ShapeError("module '" + mod.name + "': flatten needs a batch dim");
            std::size_t n = x.shape()[0];
            std::size_t rest = x.size() / std::max<std::size_t>(n, 1);
            return x.reshape({n, rest});
        }
        case ModuleKind::AvgPool2d: return avgpool_forward(mod, x);
        case ModuleKind::Add: {
            if (!x.shape_equals(inputs[1])) {
                throw ShapeError("module '" + mod.name + "': add inputs differ, " + x.shape_str() + " vs " +
                                 inputs[1].shape_str());
            }
            return x + inputs[1];
        }
    }
    throw Error("unreachable module kind");
}

namespace {

// g_inputs and g_params are filled with tensors shaped like the module's
// inputs and parameters.
void module_backward(const ModuleSpec& mod, const std::vector<ParamSlot>& params,
                     const std::vector<Tensor>& inputs, const Tensor& output, const Tensor& g_out,
                     std::vector<Tensor>& g_inputs, std::vector<Tensor>& g_params) {
    const Tensor& x = inputs[0];
    switch (mod.kind) {
        case ModuleKind::Linear: {
            std::size_t n = x.shape()[0], in = mod.in_features, out = mod.out_features;
            const double* w = params[0].value.data();
            const double* xd = x.data();
            const double* gd = g_out.data();
            Tensor gx = Tensor::zeros(x.shape());
            Tensor gw = Tensor::zeros(params[0].value.shape());
            double* gxd = gx.mutable_data();
            double* gwd = gw.mutable_data();
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t o = 0; o < out; ++o) {
                    double g = gd[r * out + o];
                    if (g == 0.0) continue;
                    const double* wrow = w + o * in;
                    double* gxrow = gxd + r * in;
                    double* gwrow = gwd + o * in;
                    const double* xrow = xd + r * in;
                    for (std::size_t i = 0; i < in; ++i) {
                        gxrow[i] += g * wrow[i];
                        gwrow[i] += g * xrow[i];
                    }
                }
            }
            g_inputs.push_back(std::move(gx));
            g_params.push_back(std::move(gw));
            if (mod.has_bias) {
                Tensor gb = Tensor::zeros({out});
                double* gbd = gb.mutable_data();
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t o = 0; o < out; ++o) gbd[o] += gd[r * out + o];
                }
                g_params.push_back(std::move(gb));
            }
            break;
        }
        case ModuleKind::Conv2d: {
            ConvDims d = conv_dims(mod, x);
            const double* w = params[0].value.data();
            const double* xd = x.data();
            const double* gd = g_out.data();
            Tensor gx = Tensor::zeros(x.shape());
            Tensor gw = Tensor::zeros(params[0].value.shape());
            double* gxd = gx.mutable_data();
            double* gwd = gw.mutable_data();
            for (std::size_t n = 0; n < d.n; ++n) {
                for (std::size_t co = 0; co < d.cout; ++co) {
                    for (std::size_t ho = 0; ho < d.ho; ++ho) {
                        for (std::size_t wo = 0; wo < d.wo; ++wo) {
                            double g = gd[((n * d.cout + co) * d.ho + ho) * d.wo + wo];
                            if (g == 0.0) continue;
                            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                                for (std::size_t i = 0; i < d.k; ++i) {
                                    long long yy =
                                        static_cast<long long>(ho * d.s + i) - static_cast<long long>(d.p);
                                    if (yy < 0 || yy >= static_cast<long long>(d.h)) continue;
                                    for (std::size_t j = 0; j < d.k; ++j) {
                                        long long xx =
                                            static_cast<long long>(wo * d.s + j) - static_cast<long long>(d.p);
                                        if (xx < 0 || xx >= static_cast<long long>(d.w)) continue;
                                        std::size_t wi = ((co * d.cin + ci) * d.k + i) * d.k + j;
                                        std::size_t xi = ((n * d.cin + ci) * d.h + yy) * d.w + xx;
                                        gxd[xi] += g * w[wi];
                                        gwd[wi] += g * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            g_inputs.push_back(std::move(gx));
            g_params.push_back(std::move(gw));
            if (mod.has_bias) {
                Tensor gb = Tensor::zeros({d.cout});
                double* gbd = gb.mutable_data();
                for (std::size_t n = 0; n < d.n; ++n) {
                    for (std::size_t co = 0; co < d.cout; ++co) {
                        for (std::size_t q = 0; q < d.ho * d.wo; ++q) {
                            gbd[co] += gd[(n * d.cout + co) * d.ho * d.wo + q];
                        }
                    }
                }
                g_params.push_back(std::move(gb));
            }
            break;
        }
        case ModuleKind::Relu:
            g_inputs.push_back(g_out.zip(x, "relu_bw", [](double g, double v) { return v > 0.0 ? g : 0.0; }));
            break;
        case ModuleKind::Tanh:
            g_inputs.push_back(
                g_out.zip(output, "tanh_bw", [](double g, double y) { return g * (1.0 - y * y); }));
            break;
        case ModuleKind::Sigmoid:
            g_inputs.push_back(
                g_out.zip(output, "sigmoid_bw", [](double g, double y) { return g * y * (1.0 - y); }));
            break;
        case ModuleKind::Softmax: {
            // Fused Jacobian-vector product: gx = y * (g - sum(g*y)) along axis.
            std::size_t ax = normalize_axis(mod.axis, x.rank(), mod.name);
            std::size_t axis_dim = x.shape()[ax];
            std::size_t outer = 1, inner = 1;
            for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
            for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[i];
            Tensor gx = Tensor::zeros(x.shape());
            double* gxd = gx.mutable_data();
            const double* yd = output.data();
            const double* gd = g_out.data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    double dotv = 0.0;
                    for (std::size_t a = 0; a < axis_dim; ++a) {
                        std::size_t idx = (o * axis_dim + a) * inner + in;
                        dotv += gd[idx] * yd[idx];
                    }
                    for (std::size_t a = 0; a < axis_dim; ++a) {
                        std::size_t idx = (o * axis_dim + a) * inner + in;
                        gxd[idx] = yd[idx] * (gd[idx] - dotv);
                    }
                }
            }
            g_inputs.push_back(std::move(gx));
            break;
        }
        case ModuleKind::Flatten:
            g_inputs.push_back(g_out.reshape(x.shape()));
            break;
        case ModuleKind::AvgPool2d: {
            std::size_t k = mod.pool_kernel;
            std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
            std::size_t ho = h / k, wo = w / k;
            double scale = 1.0 / static_cast<double>(k * k);
            Tensor gx = Tensor::zeros(x.shape());
            double* gxd = gx.mutable_data();
            const double* gd = g_out.data();
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t i = 0; i < ho; ++i) {
                        for (std::size_t j = 0; j < wo; ++j) {
                            double g = gd[((b * c + ch) * ho + i) * wo + j] * scale;
                            for (std::size_t di = 0; di < k; ++di) {
                                for (std::size_t dj = 0; dj < k; ++dj) {
                                    gxd[((b * c + ch) * h + i * k + di) * w + j * k + dj] += g;
                                }
                            }
                        }
                    }
                }
            }
            g_inputs.push_back(std::move(gx));
            break;
        }
        case ModuleKind::Add:
            g_inputs.push_back(g_out);
            g_inputs.push_back(g_out);
            break;
    }
}

}  // namespace

ModelGraph::ModelGraph(std::vector<ModuleSpec> modules, std::vector<std::vector<ParamSlot>> params,
                       std::vector<std::string> inputs, std::vector<std::string> outputs)
    : modules_(std::move(modules)), params_(std::move(params)), inputs_(std::move(inputs)),
      outputs_(std::move(outputs)) {
    if (params_.size() != modules_.size()) throw Error("one parameter list per module required");
    std::unordered_set<std::string> names;
    for (const auto& key : inputs_) {
        if (key.empty()) throw KeyError("empty input key");
        if (!names.insert(key).second) throw KeyError("duplicate input key '" + key + "'");
    }
    std::unordered_set<std::string> known = names;
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        const ModuleSpec& mod = modules_[i];
        KeyPath::parse(mod.name);  // rejects empty segments
        if (!names.insert(mod.name).second) throw KeyError("duplicate module name '" + mod.name + "'");
        if (mod.sources.size() != mod.arity()) {
            throw Error("module '" + mod.name + "' needs " + std::to_string(mod.arity()) +
                        " sources, has " + std::to_string(mod.sources.size()));
        }
        for (const auto& src : mod.sources) {
            if (!known.count(src)) {
                throw Error("module '" + mod.name + "' source '" + src +
                            "' is not an input or an earlier module (cyclic or dangling topology)");
            }
        }
        validate_params(mod, params_[i]);
        known.insert(mod.name);
    }
    if (outputs_.empty()) throw Error("model declares no outputs");
    std::unordered_set<std::string> seen_outputs;
    for (const auto& out : outputs_) {
        if (!module_index(out)) throw KeyError("output key '" + out + "' does not name a module");
        if (!seen_outputs.insert(out).second) throw KeyError("duplicate output key '" + out + "'");
    }
}

std::optional<std::size_t> ModelGraph::module_index(const std::string& name) const {
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        if (modules_[i].name == name) return i;
    }
    return std::nullopt;
}

const ModuleSpec& ModelGraph::module(const std::string& name) const {
    auto idx = module_index(name);
    if (!idx) throw KeyError("unknown module '" + name + "'");
    return modules_[*idx];
}

TensorMap ModelGraph::parameters() const {
    TensorMap out;
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        for (const auto& slot : params_[i]) {
            out.put(modules_[i].name + "." + slot.role, slot.value);
        }
    }
    return out;
}

ModelGraph ModelGraph::with_parameters(const TensorMap& params) const {
    std::vector<std::vector<ParamSlot>> new_params = params_;
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        for (auto& slot : new_params[i]) {
            const Tensor& t = params.get(modules_[i].name + "." + slot.role);
            if (t.shape() != slot.value.shape()) {
                throw ShapeError("parameter '" + modules_[i].name + "." + slot.role + "' shape " +
                                 t.shape_str() + " does not match " + slot.value.shape_str());
            }
            slot.value = t;
        }
    }
    return ModelGraph(modules_, std::move(new_params), inputs_, outputs_);
}

std::size_t ModelGraph::parameter_count() const {
    std::size_t n = 0;
    for (const auto& slots : params_) {
        for (const auto& s : slots) n += s.value.size();
    }
    return n;
}

bool ModelGraph::is_downstream(const std::string& site, const std::string& candidate) const {
    if (site == candidate) return false;
    std::unordered_set<std::string> reached{site};
    for (const auto& mod : modules_) {
        for (const auto& src : mod.sources) {
            if (reached.count(src)) {
                reached.insert(mod.name);
                break;
            }
        }
    }
    return reached.count(candidate) > 0;
}

struct ForwardRunner {
    static ForwardResult run(const ModelGraph& model, const TensorMap& inputs, bool record,
                             ExecObserver* obs) {
        std::size_t batch = 0;
        bool batch_set = false;
        for (const auto& key : model.input_keys()) {
            if (!inputs.contains(key)) throw KeyError("missing input key '" + key + "'");
            const Tensor& t = inputs.get(key);
            if (t.rank() < 1) throw ShapeError("input '" + key + "' must have a leading batch dim");
            if (!batch_set) {
                batch = t.shape()[0];
                batch_set = true;
            } else if (t.shape()[0] != batch) {
                throw ShapeError("input '" + key + "' batch extent " + std::to_string(t.shape()[0]) +
                                 " differs from " + std::to_string(batch));
            }
        }

        std::unordered_map<std::string, Tensor> values;
        for (const auto& key : model.input_keys()) values.emplace(key, inputs.get(key));

        Tape tape;
        tape.model_ = &model;
        if (record) {
            tape.graph_inputs_ = TensorMap{};
            for (const auto& key : model.input_keys()) tape.graph_inputs_.put(key, inputs.get(key));
        }

        const auto& modules = model.modules();
        bool stopped = false;
        for (std::size_t i = 0; i < modules.size() && !stopped; ++i) {
            const ModuleSpec& mod = modules[i];
            std::vector<Tensor> ins;
            ins.reserve(mod.sources.size());
            bool runnable = true;
            for (const auto& src : mod.sources) {
                auto it = values.find(src);
                if (it == values.end()) {
                    runnable = false;  // source skipped by an upstream stop
                    break;
                }
                ins.push_back(it->second);
            }
            if (!runnable) continue;
            if (obs) obs->on_inputs(mod, ins);
            Tensor out = module_forward(mod, model.params_of(i), ins);
            if (obs) obs->on_output(mod, out);
            if (record) tape.entries_.push_back(Tape::Entry{i, ins, out});
            values.insert_or_assign(mod.name, out);
            if (obs && obs->stop_after(mod)) stopped = true;
        }

        TensorMap outputs(batch_set ? std::vector<std::size_t>{batch} : std::vector<std::size_t>{});
        for (const auto& key : model.output_keys()) {
            auto it = values.find(key);
            if (it != values.end()) outputs.put(key, it->second);
        }
        ForwardResult result{std::move(outputs), std::nullopt};
        if (record) result.tape = std::move(tape);
        return result;
    }
};

ForwardResult forward(const ModelGraph& model, const TensorMap& inputs, bool record, ExecObserver* obs) {
    return ForwardRunner::run(model, inputs, record, obs);
}

const Tape::Entry* Tape::entry_for(const std::string& module_name) const {
    auto idx = model_->module_index(module_name);
    if (!idx) return nullptr;
    for (const auto& e : entries_) {
        if (e.module_index == *idx) return &e;
    }
    return nullptr;
}

TensorMap backward(Tape& tape, const TensorMap& seed, ExecObserver* obs) {
    if (tape.consumed_) throw StateError("tape already consumed; record a fresh forward pass");
    tape.consumed_ = true;
    const ModelGraph& model = *tape.model_;

    std::unordered_map<std::string, Tensor> grads;
    for (const auto& [key, t] : flatten_keys(seed)) {
        const Tape::Entry* entry = tape.entry_for(key);
        if (!entry) throw KeyError("seed key '" + key + "' does not name an executed module output");
        if (t.shape() != entry->output.shape()) {
            throw ShapeError("seed '" + key + "' shape " + t.shape_str() + " does not match output " +
                             entry->output.shape_str());
        }
        grads.emplace(key, t);
    }

    TensorMap result;
    for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
        const Tape::Entry& entry = *it;
        const ModuleSpec& mod = model.modules()[entry.module_index];
        Tensor g_out;
        auto git = grads.find(mod.name);
        if (git != grads.end()) {
            g_out = git->second;
        } else {
            g_out = Tensor::zeros(entry.output.shape());
        }
        if (obs) obs->on_grad_output(mod, g_out);

        std::vector<Tensor> g_inputs;
        std::vector<Tensor> g_params;
        module_backward(mod, model.params_of(entry.module_index), entry.inputs, entry.output, g_out,
                        g_inputs, g_params);
        if (obs) obs->on_grad_inputs(mod, g_inputs);

        for (std::size_t s = 0; s < mod.sources.size(); ++s) {
            auto [slot, inserted] = grads.try_emplace(mod.sources[s], g_inputs[s]);
            if (!inserted) slot->second = slot->second + g_inputs[s];
        }
        const auto& slots = model.params_of(entry.module_index);
        for (std::size_t p = 0; p < g_params.size(); ++p) {
            std::string key = mod.name + "." + slots[p].role;
            if (result.contains(key)) {
                result.put(key, result.get(key) + g_params[p]);
            } else {
                result.put(key, std::move(g_params[p]));
            }
        }
    }

    for (const auto& key : model.input_keys()) {
        auto it = grads.find(key);
        if (it != grads.end()) {
            result.put(key, it->second);
        } else {
            result.put(key, Tensor::zeros(tape.graph_inputs_.get(key).shape()));
        }
    }
    return result;
}

TensorMap finite_difference_gradient(const ModelGraph& model, const TensorMap& inputs,
                                     const std::string& output_key, std::size_t output_index, double h) {
    if (h <= 0.0) throw ConfigError("finite difference step must be positive");
    auto eval = [&](const TensorMap& in) {
        TensorMap out = forward(model, in, false).outputs;
        const Tensor& t = out.get(output_key);
        std::size_t n = t.shape().empty() ? 1 : t.shape()[0];
        std::size_t per = t.size() / std::max<std::size_t>(n, 1);
        if (output_index >= per) throw ShapeError("output index out of range");
        double s = 0.0;
        for (std::size_t b = 0; b < n; ++b) s += t[b * per + output_index];
        return s;
    };

    TensorMap grad;
    for (const auto& key : model.input_keys()) {
        const Tensor& x = inputs.get(key);
        Tensor g = Tensor::zeros(x.shape());
        double* gd = g.mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            TensorMap plus = inputs;
            TensorMap minus = inputs;
            Tensor xp = x;
            Tensor xm = x;
            xp.mutable_data()[i] += h;
            xm.mutable_data()[i] -= h;
            plus.put(key, xp);
            minus.put(key, xm);
            gd[i] = (eval(plus) - eval(minus)) / (2.0 * h);
        }
        grad.put(key, std::move(g));
    }
    return grad;
}

}  // namespace gradlens

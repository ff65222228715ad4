// SPDX-License-Identifier: Apache-2.0
#include "gradlens/model_io.hpp"

#include <cstdio>

#include <json.hpp>

#include "gradlens/rng.hpp"
#include "gradlens/tensormap_io.hpp"

namespace gradlens {

namespace {

using nlohmann::json;

json shape_json(const std::vector<std::size_t>& shape) {
    json arr = json::array();
    for (auto d : shape) arr.push_back(d);
    return arr;
}

std::vector<std::size_t> shape_from_json(const json& arr, const std::string& what) {
    if (!arr.is_array()) throw IoError("'" + what + "' shape must be an array");
    std::vector<std::size_t> shape;
    for (const auto& v : arr) {
        if (!v.is_number_unsigned()) throw IoError("'" + what + "' shape must hold nonnegative extents");
        shape.push_back(v.get<std::size_t>());
    }
    return shape;
}

// Accepts "uniform(lo,hi)" or "normal(mean,std)".
struct InitScheme {
    enum class Kind { Uniform, Normal } kind;
    double a = 0.0, b = 0.0;
};

InitScheme parse_init(const std::string& text) {
    InitScheme s{};
    char name[16];
    double a = 0.0, b = 0.0;
    if (std::sscanf(text.c_str(), "%15[a-z](%lf,%lf)", name, &a, &b) != 3) {
        throw IoError("bad init scheme '" + text + "', expected name(a,b)");
    }
    std::string n = name;
    if (n == "uniform") {
        if (a >= b) throw IoError("init uniform(lo,hi) needs lo < hi");
        s.kind = InitScheme::Kind::Uniform;
    } else if (n == "normal") {
        if (b < 0) throw IoError("init normal(mean,std) needs std >= 0");
        s.kind = InitScheme::Kind::Normal;
    } else {
        throw IoError("unknown init scheme '" + n + "'");
    }
    s.a = a;
    s.b = b;
    return s;
}

ModuleSpec module_from_json(const json& j) {
    ModuleSpec m;
    m.name = j.at("name").get<std::string>();
    m.kind = module_kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("sources")) {
        for (const auto& s : j.at("sources")) m.sources.push_back(s.get<std::string>());
    }
    switch (m.kind) {
        case ModuleKind::Linear:
            m.in_features = j.at("in").get<std::size_t>();
            m.out_features = j.at("out").get<std::size_t>();
            m.has_bias = j.value("bias", true);
            break;
        case ModuleKind::Conv2d:
            m.in_channels = j.at("cin").get<std::size_t>();
            m.out_channels = j.at("cout").get<std::size_t>();
            m.kernel = j.at("k").get<std::size_t>();
            m.stride = j.value("stride", std::size_t{1});
            m.pad = j.value("pad", std::size_t{0});
            m.has_bias = j.value("bias", true);
            break;
        case ModuleKind::Softmax:
            m.axis = j.value("axis", -1);
            break;
        case ModuleKind::AvgPool2d:
            m.pool_kernel = j.at("k").get<std::size_t>();
            break;
        default:
            break;
    }
    return m;
}

json module_to_json(const ModuleSpec& m, const std::vector<ParamSlot>& slots) {
    json j;
    j["name"] = m.name;
    j["kind"] = module_kind_name(m.kind);
    j["sources"] = m.sources;
    switch (m.kind) {
        case ModuleKind::Linear:
            j["in"] = m.in_features;
            j["out"] = m.out_features;
            j["bias"] = m.has_bias;
            break;
        case ModuleKind::Conv2d:
            j["cin"] = m.in_channels;
            j["cout"] = m.out_channels;
            j["k"] = m.kernel;
            j["stride"] = m.stride;
            j["pad"] = m.pad;
            j["bias"] = m.has_bias;
            break;
        case ModuleKind::Softmax:
            j["axis"] = m.axis;
            break;
        case ModuleKind::AvgPool2d:
            j["k"] = m.pool_kernel;
            break;
        default:
            break;
    }
    json params = json::array();
    for (const auto& slot : slots) {
        json p;
        p["role"] = slot.role;
        p["shape"] = shape_json(slot.value.shape());
        params.push_back(std::move(p));
    }
    j["params"] = std::move(params);
    return j;
}

}  // namespace

ModelGraph build_model(const std::string& document) {
    std::size_t nl = document.find('\n');
    if (nl == std::string::npos) throw IoError("model document has no header line");
    json header;
    try {
        header = json::parse(document.substr(0, nl));
    } catch (const json::exception& e) {
        throw IoError(std::string("bad model header: ") + e.what());
    }
    if (header.value("byte_order", "") != "LE") throw IoError("model byte_order must be \"LE\"");
    Dtype dtype = dtype_from_name(header.value("dtype", "f64"));

    std::vector<std::string> inputs;
    for (const auto& s : header.at("inputs")) inputs.push_back(s.get<std::string>());
    std::vector<std::string> outputs;
    for (const auto& s : header.at("outputs")) outputs.push_back(s.get<std::string>());

    struct Declared {
        ModuleSpec spec;
        std::vector<std::pair<std::string, std::vector<std::size_t>>> params;
    };
    std::vector<Declared> declared;
    std::size_t blob_values = 0;
    for (const auto& jm : header.at("modules")) {
        Declared d;
        d.spec = module_from_json(jm);
        if (jm.contains("params")) {
            for (const auto& jp : jm.at("params")) {
                std::string role = jp.at("role").get<std::string>();
                auto shape = shape_from_json(jp.at("shape"), d.spec.name + "." + role);
                blob_values += shape_product(shape);
                d.params.emplace_back(std::move(role), std::move(shape));
            }
        }
        declared.push_back(std::move(d));
    }

    std::size_t width = dtype == Dtype::F64 ? 8 : 4;
    std::size_t blob_bytes = document.size() - (nl + 1);
    std::vector<std::vector<ParamSlot>> params;

    if (blob_bytes == 0 && blob_values > 0) {
        if (!header.contains("init") || !header.contains("seed")) {
            throw IoError("model document carries no parameter blobs and no init/seed pair");
        }
        InitScheme scheme = parse_init(header.at("init").get<std::string>());
        Rng rng(header.at("seed").get<std::uint64_t>());
        for (const auto& d : declared) {
            std::vector<ParamSlot> slots;
            for (const auto& [role, shape] : d.params) {
                std::vector<double> values(shape_product(shape));
                for (auto& v : values) {
                    v = scheme.kind == InitScheme::Kind::Uniform ? rng.uniform(scheme.a, scheme.b)
                                                                 : rng.normal(scheme.a, scheme.b);
                    if (dtype == Dtype::F32) v = static_cast<double>(static_cast<float>(v));
                }
                slots.push_back({role, Tensor(shape, std::move(values), dtype)});
            }
            params.push_back(std::move(slots));
        }
    } else {
        if (blob_bytes != blob_values * width) {
            throw IoError("parameter blob length mismatch: header declares " +
                          std::to_string(blob_values * width) + " bytes, document carries " +
                          std::to_string(blob_bytes));
        }
        std::size_t offset = nl + 1;
        for (const auto& d : declared) {
            std::vector<ParamSlot> slots;
            for (const auto& [role, shape] : d.params) {
                slots.push_back(
                    {role, wire::read_le(document, offset, shape, dtype, d.spec.name + "." + role)});
            }
            params.push_back(std::move(slots));
        }
    }

    std::vector<ModuleSpec> specs;
    specs.reserve(declared.size());
    for (auto& d : declared) specs.push_back(std::move(d.spec));
    return ModelGraph(std::move(specs), std::move(params), std::move(inputs), std::move(outputs));
}

std::string serialize_model(const ModelGraph& model, Dtype dtype) {
    json header;
    header["version"] = 1;
    header["dtype"] = dtype_name(dtype);
    header["byte_order"] = "LE";
    header["inputs"] = model.input_keys();
    header["outputs"] = model.output_keys();
    json modules = json::array();
    std::string blobs;
    for (std::size_t i = 0; i < model.modules().size(); ++i) {
        const auto& slots = model.params_of(i);
        modules.push_back(module_to_json(model.modules()[i], slots));
        for (const auto& slot : slots) wire::append_le(blobs, slot.value.with_dtype(dtype));
    }
    header["modules"] = std::move(modules);
    return header.dump() + "\n" + blobs;
}

ModelGraph load_model(const std::filesystem::path& path) {
    try {
        return build_model(wire::read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void save_model(const std::filesystem::path& path, const ModelGraph& model, Dtype dtype) {
    wire::write_file(path, serialize_model(model, dtype));
}

}  // namespace gradlens

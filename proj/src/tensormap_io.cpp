// SPDX-License-Identifier: Apache-2.0
#include "gradlens/tensormap_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace gradlens {

namespace wire {

namespace {

void push_u64_le(std::string& out, std::uint64_t bits, int width) {
    for (int i = 0; i < width; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint64_t pull_u64_le(const std::string& buf, std::size_t off, int width) {
    std::uint64_t bits = 0;
    for (int i = 0; i < width; ++i) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    }
    return bits;
}

}  // namespace

void append_le(std::string& out, const Tensor& t) {
    if (t.dtype() == Dtype::F64) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            push_u64_le(out, std::bit_cast<std::uint64_t>(t[i]), 8);
        }
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) {
            push_u64_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])), 4);
        }
    }
}

Tensor read_le(const std::string& buf, std::size_t& offset, const std::vector<std::size_t>& shape, Dtype dt,
               const std::string& what) {
    std::size_t count = shape_product(shape);
    std::size_t width = dt == Dtype::F64 ? 8 : 4;
    if (offset + count * width > buf.size()) {
        throw IoError("parameter blob truncated while reading '" + what + "' (need " +
                      std::to_string(count * width) + " bytes at offset " + std::to_string(offset) + ")");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (dt == Dtype::F64) {
            values[i] = std::bit_cast<double>(pull_u64_le(buf, offset, 8));
            offset += 8;
        } else {
            values[i] = static_cast<double>(
                std::bit_cast<float>(static_cast<std::uint32_t>(pull_u64_le(buf, offset, 4))));
            offset += 4;
        }
    }
    return Tensor(shape, std::move(values), dt);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace wire

namespace {

nlohmann::json shape_json(const std::vector<std::size_t>& shape) {
    nlohmann::json arr = nlohmann::json::array();
    for (auto d : shape) arr.push_back(d);
    return arr;
}

std::vector<std::size_t> shape_from_json(const nlohmann::json& arr, const std::string& what) {
    if (!arr.is_array()) throw IoError("'" + what + "' shape must be an array");
    std::vector<std::size_t> shape;
    for (const auto& v : arr) {
        if (!v.is_number_unsigned()) throw IoError("'" + what + "' shape must hold nonnegative extents");
        shape.push_back(v.get<std::size_t>());
    }
    return shape;
}

}  // namespace

std::string serialize_tensormap(const TensorMap& map) {
    nlohmann::json header;
    header["version"] = 1;
    header["byte_order"] = "LE";
    header["batch_shape"] = shape_json(map.batch_shape());
    nlohmann::json leaves = nlohmann::json::array();
    std::string blobs;
    for (const auto& [key, t] : flatten_keys(map)) {
        nlohmann::json leaf;
        leaf["key"] = key;
        leaf["dtype"] = dtype_name(t.dtype());
        leaf["shape"] = shape_json(t.shape());
        leaves.push_back(std::move(leaf));
        wire::append_le(blobs, t);
    }
    header["leaves"] = std::move(leaves);
    return header.dump() + "\n" + blobs;
}

TensorMap parse_tensormap(const std::string& document) {
    std::size_t nl = document.find('\n');
    if (nl == std::string::npos) throw IoError("tensormap document has no header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(document.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad tensormap header: ") + e.what());
    }
    if (header.value("byte_order", "") != "LE") {
        throw IoError("tensormap byte_order must be \"LE\"");
    }
    TensorMap map(shape_from_json(header.at("batch_shape"), "batch_shape"));
    std::size_t offset = nl + 1;
    for (const auto& leaf : header.at("leaves")) {
        std::string key = leaf.at("key").get<std::string>();
        Dtype dt = dtype_from_name(leaf.at("dtype").get<std::string>());
        auto shape = shape_from_json(leaf.at("shape"), key);
        map.put(key, wire::read_le(document, offset, shape, dt, key));
    }
    if (offset != document.size()) {
        throw IoError("tensormap document has " + std::to_string(document.size() - offset) +
                      " trailing bytes after the declared blobs");
    }
    return map;
}

TensorMap load_tensormap(const std::filesystem::path& path) {
    try {
        return parse_tensormap(wire::read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void save_tensormap(const std::filesystem::path& path, const TensorMap& map) {
    wire::write_file(path, serialize_tensormap(map));
}

}  // namespace gradlens

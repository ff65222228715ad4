// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "gradlens/tensormap.hpp"

namespace gradlens {

// Same convention as the model format: one JSON header line, then raw
// little-endian blobs for the flattened leaves in header order.
std::string serialize_tensormap(const TensorMap& map);
TensorMap parse_tensormap(const std::string& document);

TensorMap load_tensormap(const std::filesystem::path& path);
void save_tensormap(const std::filesystem::path& path, const TensorMap& map);

// Shared low-level helpers for the two formats.
namespace wire {
void append_le(std::string& out, const Tensor& t);
Tensor read_le(const std::string& buf, std::size_t& offset, const std::vector<std::size_t>& shape, Dtype dt,
               const std::string& what);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);
}  // namespace wire

}  // namespace gradlens

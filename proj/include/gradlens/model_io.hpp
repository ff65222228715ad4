// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "gradlens/model.hpp"

namespace gradlens {

// Model documents are a single-line JSON header terminated by '\n', followed
// immediately by the concatenated little-endian parameter blobs in header
// declaration order. A document may omit the blobs and instead carry
// init="uniform(lo,hi)"|"normal(mean,std)" plus an integer seed.
ModelGraph build_model(const std::string& document);

ModelGraph load_model(const std::filesystem::path& path);
void save_model(const std::filesystem::path& path, const ModelGraph& model, Dtype dtype = Dtype::F64);

std::string serialize_model(const ModelGraph& model, Dtype dtype = Dtype::F64);

}  // namespace gradlens

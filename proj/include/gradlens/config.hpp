// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradlens/tensor.hpp"

namespace gradlens {

// Value of one config entry. Arrays hold scalars only.
struct TomlValue {
    enum class Kind { String, Number, Boolean, Array };
    Kind kind = Kind::String;
    std::string str;
    double num = 0.0;
    bool flag = false;
    std::vector<TomlValue> items;
};

// Flat view of a TOML document: dotted paths ("job.model") in file order.
// Covers the subset used by job configs: tables, bare keys, strings, numbers,
// booleans, single-line scalar arrays, and # comments.
class TomlDoc {
public:
    void insert(const std::string& path, TomlValue value);

    bool contains(const std::string& path) const;
    const TomlValue& at(const std::string& path) const;
    std::vector<std::string> paths() const;

    // Typed access; throws ConfigError on missing keys or kind mismatch.
    // Reads mark the key as consumed so validators can reject leftovers.
    std::string get_string(const std::string& path) const;
    double get_number(const std::string& path) const;
    std::size_t get_index(const std::string& path) const;  // integral and >= 0
    bool get_bool(const std::string& path) const;
    std::vector<TomlValue> get_array(const std::string& path) const;

    std::string get_string_or(const std::string& path, const std::string& fallback) const;
    double get_number_or(const std::string& path, double fallback) const;
    std::size_t get_index_or(const std::string& path, std::size_t fallback) const;
    bool get_bool_or(const std::string& path, bool fallback) const;

    // Every key not read by one of the getters; validation errors on these.
    std::vector<std::string> unconsumed() const;

private:
    const TomlValue* find(const std::string& path) const;
    std::vector<std::pair<std::string, TomlValue>> entries_;
    mutable std::vector<bool> consumed_;
};

TomlDoc parse_toml(const std::string& text);
TomlDoc load_toml(const std::filesystem::path& path);

// Common [job] table shared by every command; command tables stay in `doc`.
struct JobConfig {
    std::string command;
    std::filesystem::path model;
    std::vector<std::filesystem::path> data;
    std::filesystem::path out_dir = "out";
    std::uint64_t seed = 0;
    Dtype dtype = Dtype::F64;
    TomlDoc doc;
};

// Parses and validates the [job] table: referenced paths must exist, unknown
// [job] keys are rejected. Command tables are validated by their command.
JobConfig load_job_config(const std::filesystem::path& path, const std::string& command);

}  // namespace gradlens

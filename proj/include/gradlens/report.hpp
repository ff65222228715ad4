// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gradlens/tensor.hpp"

namespace gradlens {

// Shortest decimal string that parses back to exactly `v`. Locale independent,
// "." decimal point; the basis of bitwise-stable CSV goldens.
std::string format_number(double v);

// Comma-separated, LF line endings, header row first. Cells containing a
// comma, quote, or newline are quoted with doubled quotes.
class Csv {
public:
    explicit Csv(std::vector<std::string> header);
    void row(std::vector<std::string> cells);
    std::string str() const;
    void write(const std::filesystem::path& path) const;

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

// 8-bit ASCII PGM (P2), min-max normalised; constant images map to 0.
void write_pgm(const std::filesystem::path& path, const Tensor& image);

}  // namespace gradlens

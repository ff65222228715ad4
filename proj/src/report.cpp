// SPDX-License-Identifier: Apache-2.0
#include "gradlens/report.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "gradlens/errors.hpp"

namespace gradlens {

std::string format_number(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

Csv::Csv(std::vector<std::string> header) : header_(std::move(header)) {
    if (header_.empty()) throw ConfigError("csv needs at least one column");
}

void Csv::row(std::vector<std::string> cells) {
    if (cells.size() != header_.size())
        throw ShapeError("csv row has " + std::to_string(cells.size()) + " cells, header has " +
                         std::to_string(header_.size()));
    rows_.push_back(std::move(cells));
}

namespace {

void append_cell(std::string& out, const std::string& cell) {
    if (cell.find_first_of(",\"\n") == std::string::npos) {
        out += cell;
        return;
    }
    out += '"';
    for (char c : cell) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
}

void append_line(std::string& out, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        append_cell(out, cells[i]);
    }
    out += '\n';
}

}  // namespace

std::string Csv::str() const {
    std::string out;
    append_line(out, header_);
    for (const auto& row : rows_) append_line(out, row);
    return out;
}

void Csv::write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw StateError("cannot write '" + path.string() + "'");
    out << str();
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 2) throw ShapeError("pgm images must be rank-2");
    std::size_t h = image.shape()[0], w = image.shape()[1];
    if (h == 0 || w == 0) throw ShapeError("pgm images must be nonempty");

    double lo = image.data()[0], hi = image.data()[0];
    for (std::size_t i = 0; i < image.size(); ++i) {
        lo = std::min(lo, image.data()[i]);
        hi = std::max(hi, image.data()[i]);
    }
    double span = hi - lo;

    std::string out = "P2\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            long level = 0;
            if (span > 0.0) level = std::lround((image.data()[y * w + x] - lo) / span * 255.0);
            if (x) out += ' ';
            out += std::to_string(level);
        }
        out += '\n';
    }
    std::ofstream file(path, std::ios::binary);
    if (!file) throw StateError("cannot write '" + path.string() + "'");
    file << out;
}

}  // namespace gradlens

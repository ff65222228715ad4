// SPDX-License-Identifier: Apache-2.0
#include "gradlens/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "gradlens/errors.hpp"

namespace gradlens {
namespace {

bool bare_key_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
}

struct Cursor {
    const std::string& text;
    std::size_t pos = 0;
    std::size_t line = 1;

    bool done() const { return pos >= text.size(); }
    char peek() const { return text[pos]; }
    void advance() {
        if (text[pos] == '\n') ++line;
        ++pos;
    }
    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError("config line " + std::to_string(line) + ": " + what);
    }

    void skip_inline_space() {
        while (!done() && (peek() == ' ' || peek() == '\t')) advance();
    }
    void skip_comment() {
        if (!done() && peek() == '#')
            while (!done() && peek() != '\n') advance();
    }
    void expect_line_end() {
        skip_inline_space();
        skip_comment();
        if (done()) return;
        if (peek() != '\n') fail("unexpected trailing characters");
        advance();
    }

    std::string bare_key() {
        std::size_t start = pos;
        while (!done() && bare_key_char(peek())) advance();
        if (pos == start) fail("expected a key");
        return text.substr(start, pos - start);
    }

    std::string dotted_key() {
        std::string key = bare_key();
        while (!done() && peek() == '.') {
            advance();
            key += '.';
            key += bare_key();
        }
        return key;
    }

    std::string string_literal() {
        advance();  // opening quote
        std::string out;
        while (true) {
            if (done() || peek() == '\n') fail("unterminated string");
            char c = peek();
            advance();
            if (c == '"') return out;
            if (c != '\\') {
                out += c;
                continue;
            }
            if (done()) fail("unterminated escape");
            char e = peek();
            advance();
            switch (e) {
                case '"': out += '"'; break;
                case '\\': out += '\\'; break;
                case 'n': out += '\n'; break;
                case 't': out += '\t'; break;
                default: fail(std::string("unsupported escape '\\") + e + "'");
            }
        }
    }

    TomlValue scalar() {
        TomlValue v;
        if (peek() == '"') {
            v.kind = TomlValue::Kind::String;
            v.str = string_literal();
            return v;
        }
        std::size_t start = pos;
        while (!done() && peek() != ',' && peek() != ']' && peek() != '#' && peek() != '\n' &&
               peek() != ' ' && peek() != '\t')
            advance();
        std::string token = text.substr(start, pos - start);
        if (token.empty()) fail("expected a value");
        if (token == "true" || token == "false") {
            v.kind = TomlValue::Kind::Boolean;
            v.flag = token == "true";
            return v;
        }
        double parsed = 0.0;
        auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), parsed);
        if (ec != std::errc() || ptr != token.data() + token.size())
            fail("cannot parse value '" + token + "'");
        v.kind = TomlValue::Kind::Number;
        v.num = parsed;
        return v;
    }

    TomlValue value() {
        if (peek() == '[') {
            advance();
            TomlValue arr;
            arr.kind = TomlValue::Kind::Array;
            skip_inline_space();
            if (!done() && peek() == ']') {
                advance();
                return arr;
            }
            while (true) {
                skip_inline_space();
                if (done() || peek() == '\n') fail("arrays must close on one line");
                arr.items.push_back(scalar());
                skip_inline_space();
                if (done()) fail("unterminated array");
                if (peek() == ',') {
                    advance();
                    continue;
                }
                if (peek() == ']') {
                    advance();
                    return arr;
                }
                fail("expected ',' or ']' in array");
            }
        }
        return scalar();
    }
};

}  // namespace

void TomlDoc::insert(const std::string& path, TomlValue value) {
    if (find(path)) throw ConfigError("duplicate config key '" + path + "'");
    entries_.emplace_back(path, std::move(value));
    consumed_.push_back(false);
}

const TomlValue* TomlDoc::find(const std::string& path) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].first == path) {
            consumed_[i] = true;
            return &entries_[i].second;
        }
    return nullptr;
}

bool TomlDoc::contains(const std::string& path) const {
    for (const auto& [key, value] : entries_)
        if (key == path) return true;
    return false;
}

const TomlValue& TomlDoc::at(const std::string& path) const {
    const TomlValue* v = find(path);
    if (!v) throw ConfigError("missing config key '" + path + "'");
    return *v;
}

std::vector<std::string> TomlDoc::paths() const {
    std::vector<std::string> out;
    for (const auto& [key, value] : entries_) out.push_back(key);
    return out;
}

std::string TomlDoc::get_string(const std::string& path) const {
    const TomlValue& v = at(path);
    if (v.kind != TomlValue::Kind::String) throw ConfigError("'" + path + "' must be a string");
    return v.str;
}

double TomlDoc::get_number(const std::string& path) const {
    const TomlValue& v = at(path);
    if (v.kind != TomlValue::Kind::Number) throw ConfigError("'" + path + "' must be a number");
    return v.num;
}

std::size_t TomlDoc::get_index(const std::string& path) const {
    double v = get_number(path);
    if (v < 0.0 || v != std::floor(v)) throw ConfigError("'" + path + "' must be a non-negative integer");
    return static_cast<std::size_t>(v);
}

bool TomlDoc::get_bool(const std::string& path) const {
    const TomlValue& v = at(path);
    if (v.kind != TomlValue::Kind::Boolean) throw ConfigError("'" + path + "' must be true or false");
    return v.flag;
}

std::vector<TomlValue> TomlDoc::get_array(const std::string& path) const {
    const TomlValue& v = at(path);
    if (v.kind != TomlValue::Kind::Array) throw ConfigError("'" + path + "' must be an array");
    return v.items;
}

std::string TomlDoc::get_string_or(const std::string& path, const std::string& fallback) const {
    return contains(path) ? get_string(path) : fallback;
}
double TomlDoc::get_number_or(const std::string& path, double fallback) const {
    return contains(path) ? get_number(path) : fallback;
}
std::size_t TomlDoc::get_index_or(const std::string& path, std::size_t fallback) const {
    return contains(path) ? get_index(path) : fallback;
}
bool TomlDoc::get_bool_or(const std::string& path, bool fallback) const {
    return contains(path) ? get_bool(path) : fallback;
}

std::vector<std::string> TomlDoc::unconsumed() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
        if (!consumed_[i]) out.push_back(entries_[i].first);
    return out;
}

TomlDoc parse_toml(const std::string& text) {
    TomlDoc doc;
    Cursor cur{text};
    std::string table;
    while (!cur.done()) {
        cur.skip_inline_space();
        cur.skip_comment();
        if (cur.done()) break;
        if (cur.peek() == '\n') {
            cur.advance();
            continue;
        }
        if (cur.peek() == '[') {
            cur.advance();
            cur.skip_inline_space();
            table = cur.dotted_key();
            cur.skip_inline_space();
            if (cur.done() || cur.peek() != ']') cur.fail("expected ']' after table name");
            cur.advance();
            cur.expect_line_end();
            continue;
        }
        std::string key = cur.dotted_key();
        cur.skip_inline_space();
        if (cur.done() || cur.peek() != '=') cur.fail("expected '=' after key '" + key + "'");
        cur.advance();
        cur.skip_inline_space();
        if (cur.done() || cur.peek() == '\n') cur.fail("missing value for '" + key + "'");
        TomlValue value = cur.value();
        cur.expect_line_end();
        doc.insert(table.empty() ? key : table + "." + key, std::move(value));
    }
    return doc;
}

TomlDoc load_toml(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_toml(buf.str());
}

JobConfig load_job_config(const std::filesystem::path& path, const std::string& command) {
    JobConfig cfg;
    cfg.command = command;
    cfg.doc = load_toml(path);
    const TomlDoc& doc = cfg.doc;

    cfg.model = doc.get_string("job.model");
    if (doc.contains("job.data")) {
        const TomlValue& data = doc.at("job.data");
        if (data.kind == TomlValue::Kind::String) {
            cfg.data.emplace_back(data.str);
        } else if (data.kind == TomlValue::Kind::Array) {
            for (const auto& item : data.items) {
                if (item.kind != TomlValue::Kind::String)
                    throw ConfigError("'job.data' entries must be strings");
                cfg.data.emplace_back(item.str);
            }
        } else {
            throw ConfigError("'job.data' must be a path or an array of paths");
        }
    }
    cfg.out_dir = doc.get_string_or("job.out", "out");
    cfg.seed = doc.get_index_or("job.seed", 0);
    cfg.dtype = dtype_from_name(doc.get_string_or("job.dtype", "f64"));

    // Resolve relative paths against the config file's directory.
    std::filesystem::path base = path.parent_path();
    auto resolve = [&](const std::filesystem::path& p) { return p.is_relative() ? base / p : p; };
    cfg.model = resolve(cfg.model);
    for (auto& p : cfg.data) p = resolve(p);

    if (!std::filesystem::exists(cfg.model))
        throw ConfigError("model file '" + cfg.model.string() + "' does not exist");
    for (const auto& p : cfg.data)
        if (!std::filesystem::exists(p)) throw ConfigError("data file '" + p.string() + "' does not exist");

    for (const auto& leftover : doc.unconsumed())
        if (leftover.rfind("job.", 0) == 0) throw ConfigError("unknown config key '" + leftover + "'");
    return cfg;
}

}  // namespace gradlens

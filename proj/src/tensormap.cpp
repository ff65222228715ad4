// SPDX-License-Identifier: Apache-2.0
#include "gradlens/tensormap.hpp"

#include <algorithm>

namespace gradlens {

KeyPath KeyPath::parse(const std::string& dotted) {
    KeyPath p;
    if (dotted.empty()) throw KeyError("empty key path");
    std::size_t start = 0;
    while (true) {
        std::size_t pos = dotted.find('.', start);
        if (pos == std::string::npos) {
            p.segments.push_back(dotted.substr(start));
            break;
        }
        p.segments.push_back(dotted.substr(start, pos - start));
        start = pos + 1;
    }
    for (const auto& s : p.segments) {
        if (s.empty()) throw KeyError("empty key segment in path '" + dotted + "'");
    }
    return p;
}

std::string KeyPath::join() const {
    std::string out;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (i) out += '.';
        out += segments[i];
    }
    return out;
}

TensorMap::Entry::Entry(std::string key, TensorMap m)
    : key_(std::move(key)), sub_(std::make_unique<TensorMap>(std::move(m))) {}

TensorMap::Entry::Entry(const Entry& o) : key_(o.key_), leaf_(o.leaf_) {
    if (o.sub_) sub_ = std::make_unique<TensorMap>(*o.sub_);
}

TensorMap::Entry& TensorMap::Entry::operator=(const Entry& o) {
    key_ = o.key_;
    leaf_ = o.leaf_;
    sub_ = o.sub_ ? std::make_unique<TensorMap>(*o.sub_) : nullptr;
    return *this;
}

const Tensor& TensorMap::Entry::leaf() const {
    if (!leaf_) throw StateError("entry '" + key_ + "' is a nested map, not a tensor");
    return *leaf_;
}

Tensor& TensorMap::Entry::leaf() {
    if (!leaf_) throw StateError("entry '" + key_ + "' is a nested map, not a tensor");
    return *leaf_;
}

const TensorMap& TensorMap::Entry::sub() const {
    if (!sub_) throw StateError("entry '" + key_ + "' is a tensor leaf, not a nested map");
    return *sub_;
}

TensorMap& TensorMap::Entry::sub() {
    if (!sub_) throw StateError("entry '" + key_ + "' is a tensor leaf, not a nested map");
    return *sub_;
}

const TensorMap::Entry* TensorMap::find(const std::string& key) const {
    for (const auto& e : entries_) {
        if (e.key() == key) return &e;
    }
    return nullptr;
}

TensorMap::Entry* TensorMap::find(const std::string& key) {
    for (auto& e : entries_) {
        if (e.key() == key) return &e;
    }
    return nullptr;
}

void TensorMap::validate_key(const std::string& key) const {
    if (key.empty()) throw KeyError("empty key");
    if (key.find('.') != std::string::npos) {
        throw KeyError("key '" + key + "' contains the separator character '.'");
    }
}

void TensorMap::validate_leaf(const KeyPath& path, const Tensor& t) const {
    const auto& shape = t.shape();
    if (shape.size() < batch_shape_.size() ||
        !std::equal(batch_shape_.begin(), batch_shape_.end(), shape.begin())) {
        throw ShapeError("leaf '" + path.join() + "' shape " + t.shape_str() +
                         " does not start with batch shape " + shape_to_string(batch_shape_));
    }
}

bool TensorMap::contains(const KeyPath& path) const {
    if (path.empty()) return false;
    const TensorMap* cur = this;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        const Entry* e = cur->find(path.segments[i]);
        if (!e || e->is_leaf()) return false;
        cur = &e->sub();
    }
    return cur->find(path.segments.back()) != nullptr;
}

void TensorMap::put(const KeyPath& path, Tensor value) {
    if (path.empty()) throw KeyError("put with empty path");
    for (const auto& seg : path.segments) validate_key(seg);
    validate_leaf(path, value);
    TensorMap* cur = this;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        Entry* e = cur->find(path.segments[i]);
        if (!e) {
            cur->entries_.emplace_back(path.segments[i], TensorMap(batch_shape_));
            e = &cur->entries_.back();
        } else if (e->is_leaf()) {
            *e = Entry(path.segments[i], TensorMap(batch_shape_));
        }
        cur = &e->sub();
    }
    Entry* leaf = cur->find(path.segments.back());
    if (leaf) {
        *leaf = Entry(path.segments.back(), std::move(value));
    } else {
        cur->entries_.emplace_back(path.segments.back(), std::move(value));
    }
}

void TensorMap::put(const KeyPath& path, TensorMap value) {
    if (path.empty()) throw KeyError("put with empty path");
    for (const auto& seg : path.segments) validate_key(seg);
    value.for_each_leaf([&](const std::string& sub_path, const Tensor& t) {
        validate_leaf(path.appended(sub_path), t);
    });
    TensorMap* cur = this;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        Entry* e = cur->find(path.segments[i]);
        if (!e) {
            cur->entries_.emplace_back(path.segments[i], TensorMap(batch_shape_));
            e = &cur->entries_.back();
        } else if (e->is_leaf()) {
            *e = Entry(path.segments[i], TensorMap(batch_shape_));
        }
        cur = &e->sub();
    }
    Entry* slot = cur->find(path.segments.back());
    if (slot) {
        *slot = Entry(path.segments.back(), std::move(value));
    } else {
        cur->entries_.emplace_back(path.segments.back(), std::move(value));
    }
}

const Tensor& TensorMap::get(const KeyPath& path) const {
    if (path.empty()) throw KeyError("get with empty path");
    const TensorMap* cur = this;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        const Entry* e = cur->find(path.segments[i]);
        if (!e) throw KeyError("missing path '" + path.join() + "'");
        if (e->is_leaf()) {
            throw StateError("path prefix '" + path.segments[i] + "' resolves to a leaf while getting '" +
                           path.join() + "'");
        }
        cur = &e->sub();
    }
    const Entry* e = cur->find(path.segments.back());
    if (!e) throw KeyError("missing path '" + path.join() + "'");
    return e->leaf();
}

const TensorMap& TensorMap::get_map(const KeyPath& path) const {
    if (path.empty()) throw KeyError("get_map with empty path");
    const TensorMap* cur = this;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        const Entry* e = cur->find(path.segments[i]);
        if (!e) throw KeyError("missing path '" + path.join() + "'");
        if (e->is_leaf()) {
            throw StateError("path prefix '" + path.segments[i] + "' resolves to a leaf while getting '" +
                           path.join() + "'");
        }
        cur = &e->sub();
    }
    const Entry* e = cur->find(path.segments.back());
    if (!e) throw KeyError("missing path '" + path.join() + "'");
    return e->sub();
}

bool TensorMap::is_leaf_at(const KeyPath& path) const {
    if (!contains(path)) throw KeyError("missing path '" + path.join() + "'");
    const TensorMap* cur = this;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) cur = &cur->find(path.segments[i])->sub();
    return cur->find(path.segments.back())->is_leaf();
}

TensorMap TensorMap::apply(const std::function<Tensor(const Tensor&)>& fn) const {
    TensorMap out(batch_shape_);
    for (const auto& e : entries_) {
        if (e.is_leaf()) {
            Tensor t = fn(e.leaf());
            const auto& shape = t.shape();
            if (shape.size() < batch_shape_.size() ||
                !std::equal(batch_shape_.begin(), batch_shape_.end(), shape.begin())) {
                throw ShapeError("apply changed batch dims at '" + e.key() + "'");
            }
            out.entries_.emplace_back(e.key(), std::move(t));
        } else {
            out.entries_.emplace_back(e.key(), e.sub().apply(fn));
        }
    }
    return out;
}

std::vector<std::string> TensorMap::leaf_keys() const {
    std::vector<std::string> keys;
    for_each_leaf([&](const std::string& path, const Tensor&) { keys.push_back(path); });
    return keys;
}

void TensorMap::for_each_leaf(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    for (const auto& e : entries_) {
        if (e.is_leaf()) {
            fn(e.key(), e.leaf());
        } else {
            e.sub().for_each_leaf([&](const std::string& sub_path, const Tensor& t) {
                fn(e.key() + "." + sub_path, t);
            });
        }
    }
}

bool TensorMap::structure_equals(const TensorMap& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const Entry& a = entries_[i];
        const Entry& b = o.entries_[i];
        if (a.key() != b.key() || a.is_leaf() != b.is_leaf()) return false;
        if (a.is_leaf()) {
            if (a.leaf().shape() != b.leaf().shape()) return false;
        } else if (!a.sub().structure_equals(b.sub())) {
            return false;
        }
    }
    return true;
}

bool TensorMap::bitwise_equal(const TensorMap& o) const {
    if (!structure_equals(o)) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const Entry& a = entries_[i];
        const Entry& b = o.entries_[i];
        if (a.is_leaf()) {
            if (!a.leaf().bitwise_equal(b.leaf())) return false;
        } else if (!a.sub().bitwise_equal(b.sub())) {
            return false;
        }
    }
    return true;
}

bool TensorMap::allclose(const TensorMap& o, double atol, double rtol) const {
    if (!structure_equals(o)) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const Entry& a = entries_[i];
        const Entry& b = o.entries_[i];
        if (a.is_leaf()) {
            if (!a.leaf().allclose(b.leaf(), atol, rtol)) return false;
        } else if (!a.sub().allclose(b.sub(), atol, rtol)) {
            return false;
        }
    }
    return true;
}

TensorMap stack(const std::vector<TensorMap>& maps) {
    if (maps.empty()) throw ShapeError("stack of zero maps");
    for (std::size_t i = 1; i < maps.size(); ++i) {
        if (!maps[0].structure_equals(maps[i])) {
            throw ShapeError("stack: map " + std::to_string(i) + " has a different structure");
        }
        if (maps[0].batch_shape() != maps[i].batch_shape()) {
            throw ShapeError("stack: map " + std::to_string(i) + " has a different batch shape");
        }
    }
    std::vector<std::size_t> new_batch;
    new_batch.push_back(maps.size());
    for (std::size_t d : maps[0].batch_shape()) new_batch.push_back(d);

    TensorMap out(new_batch);
    auto flat0 = flatten_keys(maps[0]);
    for (const auto& [key, t0] : flat0) {
        std::vector<std::size_t> shape;
        shape.push_back(maps.size());
        for (std::size_t d : t0.shape()) shape.push_back(d);
        std::vector<double> data;
        data.reserve(shape_product(shape));
        for (const auto& m : maps) {
            const Tensor& t = m.get(key);
            data.insert(data.end(), t.data(), t.data() + t.size());
        }
        out.put(key, Tensor(std::move(shape), std::move(data), t0.dtype()));
    }
    return out;
}

std::vector<TensorMap> unstack(const TensorMap& map) {
    if (map.batch_shape().empty()) throw ShapeError("unstack: map has an empty batch shape");
    std::size_t n = map.batch_shape()[0];
    std::vector<std::size_t> inner_batch(map.batch_shape().begin() + 1, map.batch_shape().end());
    std::vector<TensorMap> out(n, TensorMap(inner_batch));
    map.for_each_leaf([&](const std::string& key, const Tensor& t) {
        std::vector<std::size_t> inner_shape(t.shape().begin() + 1, t.shape().end());
        std::size_t chunk = shape_product(inner_shape);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> data(t.data() + i * chunk, t.data() + (i + 1) * chunk);
            out[i].put(key, Tensor(inner_shape, std::move(data), t.dtype()));
        }
    });
    return out;
}

std::vector<std::pair<std::string, Tensor>> flatten_keys(const TensorMap& map) {
    std::vector<std::pair<std::string, Tensor>> flat;
    map.for_each_leaf([&](const std::string& key, const Tensor& t) { flat.emplace_back(key, t); });
    return flat;
}

TensorMap unflatten_keys(const std::vector<std::pair<std::string, Tensor>>& flat,
                         std::vector<std::size_t> batch_shape) {
    TensorMap out(std::move(batch_shape));
    for (const auto& [key, t] : flat) out.put(key, t);
    return out;
}

}  // namespace gradlens

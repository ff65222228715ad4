// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gradlens/tensor.hpp"

namespace gradlens {

// Dot-separated key path. Individual segments must not contain the
// separator, which makes flattening injective.
struct KeyPath {
    std::vector<std::string> segments;

    KeyPath() = default;
    KeyPath(std::initializer_list<std::string> segs) : segments(segs) {}
    explicit KeyPath(std::vector<std::string> segs) : segments(std::move(segs)) {}

    static KeyPath parse(const std::string& dotted);
    std::string join() const;
    bool empty() const { return segments.empty(); }
    std::size_t size() const { return segments.size(); }

    KeyPath appended(const std::string& seg) const {
        KeyPath p = *this;
        p.segments.push_back(seg);
        return p;
    }
};

// Ordered, nested string-keyed tensor container. Every leaf's shape starts
// with the map's batch_shape; entry order is insertion order and survives
// all transforms.
class TensorMap {
public:
    class Entry {
    public:
        Entry(std::string key, Tensor t) : key_(std::move(key)), leaf_(std::move(t)) {}
        Entry(std::string key, TensorMap m);
        Entry(const Entry& o);
        Entry(Entry&&) noexcept = default;
        Entry& operator=(const Entry& o);
        Entry& operator=(Entry&&) noexcept = default;

        const std::string& key() const { return key_; }
        bool is_leaf() const { return leaf_.has_value(); }
        const Tensor& leaf() const;
        Tensor& leaf();
        const TensorMap& sub() const;
        TensorMap& sub();

    private:
        std::string key_;
        std::optional<Tensor> leaf_;
        std::unique_ptr<TensorMap> sub_;
    };

    TensorMap() = default;
    explicit TensorMap(std::vector<std::size_t> batch_shape) : batch_shape_(std::move(batch_shape)) {}

    const std::vector<std::size_t>& batch_shape() const { return batch_shape_; }
    std::size_t entry_count() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::vector<Entry>& entries() const { return entries_; }

    bool contains(const KeyPath& path) const;
    bool contains(const std::string& dotted) const { return contains(KeyPath::parse(dotted)); }

    // put: intermediate nests are auto-created, an existing value at the
    // path is replaced. Leaf leading dims must match batch_shape.
    void put(const KeyPath& path, Tensor value);
    void put(const std::string& dotted, Tensor value) { put(KeyPath::parse(dotted), std::move(value)); }
    void put(const KeyPath& path, TensorMap value);
    void put(const std::string& dotted, TensorMap value) { put(KeyPath::parse(dotted), std::move(value)); }

    // get: missing path and prefix-resolves-to-a-leaf are distinct errors.
    const Tensor& get(const KeyPath& path) const;
    const Tensor& get(const std::string& dotted) const { return get(KeyPath::parse(dotted)); }
    const TensorMap& get_map(const KeyPath& path) const;
    const TensorMap& get_map(const std::string& dotted) const { return get_map(KeyPath::parse(dotted)); }
    bool is_leaf_at(const KeyPath& path) const;
    bool is_leaf_at(const std::string& dotted) const { return is_leaf_at(KeyPath::parse(dotted)); }

    // Structure-preserving leaf transform; fn must keep leading batch dims.
    TensorMap apply(const std::function<Tensor(const Tensor&)>& fn) const;

    // All leaf key paths in entry order.
    std::vector<std::string> leaf_keys() const;

    void for_each_leaf(const std::function<void(const std::string& path, const Tensor&)>& fn) const;

    bool structure_equals(const TensorMap& o) const;  // keys, order, leaf shapes
    bool bitwise_equal(const TensorMap& o) const;
    bool allclose(const TensorMap& o, double atol = 1e-12, double rtol = 1e-9) const;

private:
    friend TensorMap stack(const std::vector<TensorMap>& maps);
    friend std::vector<TensorMap> unstack(const TensorMap& map);

    const Entry* find(const std::string& key) const;
    Entry* find(const std::string& key);
    void validate_leaf(const KeyPath& path, const Tensor& t) const;
    void validate_key(const std::string& key) const;

    std::vector<std::size_t> batch_shape_;
    std::vector<Entry> entries_;
};

// Leading-axis stack of structurally identical maps; unstack is its inverse.
TensorMap stack(const std::vector<TensorMap>& maps);
std::vector<TensorMap> unstack(const TensorMap& map);

// Dotted-key flat view and its inverse (bijective given the key rule).
std::vector<std::pair<std::string, Tensor>> flatten_keys(const TensorMap& map);
TensorMap unflatten_keys(const std::vector<std::pair<std::string, Tensor>>& flat,
                         std::vector<std::size_t> batch_shape = {});

}  // namespace gradlens

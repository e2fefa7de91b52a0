#pragma once

#include <string>
#include <utility>
#include <vector>

#include "jemlab/errors.hpp"
#include "jemlab/tensor.hpp"

namespace jemlab {

// Named collection of trainable tensors with deterministic iteration order.
// Order is insertion order and survives checkpoint round-trips.
template <class T>
class ParameterSet {
  public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
    };

    void add(std::string name, Tensor<T> tensor) {
        if (has(name)) throw ValueError("parameter '" + name + "' already exists");
        entries_.push_back({std::move(name), std::move(tensor)});
    }

    bool has(const std::string& name) const { return find(name) >= 0; }

    Tensor<T>& at(const std::string& name) {
        const int i = find(name);
        if (i < 0) throw ValueError("no parameter named '" + name + "'");
        return entries_[static_cast<std::size_t>(i)].tensor;
    }
    const Tensor<T>& at(const std::string& name) const {
        const int i = find(name);
        if (i < 0) throw ValueError("no parameter named '" + name + "'");
        return entries_[static_cast<std::size_t>(i)].tensor;
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    Entry& operator[](std::size_t i) { return entries_[i]; }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    bool same_layout(const ParameterSet& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name != o.entries_[i].name ||
                entries_[i].tensor.shape() != o.entries_[i].tensor.shape())
                return false;
        return true;
    }

  private:
    int find(const std::string& name) const {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name == name) return static_cast<int>(i);
        return -1;
    }

    std::vector<Entry> entries_;
};

}  // namespace jemlab

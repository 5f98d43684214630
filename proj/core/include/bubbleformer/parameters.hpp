#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bubbleformer/tensor.hpp"

namespace bubbleformer {

/// Flat learnable-parameter registry; iteration order is registration order.
template <typename Real>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<Real> value;
  };

  std::size_t add(std::string name, Tensor<Real> value) {
    if (index_.count(name)) throw ShapeError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  std::size_t index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ShapeError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  Tensor<Real>& at(std::string_view name) { return entries_[index(name)].value; }
  const Tensor<Real>& at(std::string_view name) const { return entries_[index(name)].value; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <typename Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<Other>());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace bubbleformer

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ltx/error.hpp"
#include "ltx/tensor.hpp"

namespace ltx {

struct MaskTensor {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> bits;  // each entry exactly 0 or 1

  std::size_t remaining() const {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
};

/// Binary keep-masks for the prunable parameters, in layer order.
/// Parameters without an entry (biases, and the head unless configured
/// otherwise) are never masked.
class PruneMask {
 public:
  PruneMask() = default;
  explicit PruneMask(std::vector<MaskTensor> entries) : entries_(std::move(entries)) {
    for (const auto& e : entries_) {
      require(e.bits.size() == element_count(e.shape), ErrorCode::MaskShapeMismatch,
              "mask '" + e.name + "' payload does not match " + shape_string(e.shape));
      for (auto b : e.bits)
        require(b <= 1, ErrorCode::InvalidArgument, "mask '" + e.name + "' has a non-binary entry");
    }
  }

  const std::vector<MaskTensor>& entries() const { return entries_; }
  std::vector<MaskTensor>& entries() { return entries_; }

  const MaskTensor* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.bits.size();
    return n;
  }

  std::size_t remaining() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.remaining();
    return n;
  }

  double remaining_fraction() const {
    const std::size_t t = total();
    return t == 0 ? 1.0 : static_cast<double>(remaining()) / static_cast<double>(t);
  }

  /// True when every kept entry here is also kept in `outer` (this <= outer).
  bool nested_in(const PruneMask& outer) const {
    if (outer.entries_.size() != entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = outer.entries_[i];
      if (a.name != b.name || a.bits.size() != b.bits.size()) return false;
      for (std::size_t j = 0; j < a.bits.size(); ++j)
        if (a.bits[j] > b.bits[j]) return false;
    }
    return true;
  }

  friend bool operator==(const PruneMask& a, const PruneMask& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.shape != y.shape || x.bits != y.bits) return false;
    }
    return true;
  }

 private:
  std::vector<MaskTensor> entries_;
};

}  // namespace ltx

// Parameter bundles, module grouping and the wire manifest.
#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/tensor.hpp"

namespace fedstgcrn {

// The three swappable parameter groups. Declaration order is the
// lexicographic order used for tie-breaking during client-side validation.
enum class ModuleId : std::uint8_t { Lstm = 0, Attention = 1, Agcrn = 2 };

inline constexpr std::array<ModuleId, 3> kAllModules{ModuleId::Lstm, ModuleId::Attention, ModuleId::Agcrn};

inline std::string_view module_name(ModuleId id) {
  switch (id) {
    case ModuleId::Lstm: return "lstm";
    case ModuleId::Attention: return "attention";
    case ModuleId::Agcrn: return "agcrn";
  }
  return "?";
}

// Subset of ModuleId as a 3-bit mask.
class ModuleSet {
 public:
  constexpr ModuleSet() = default;
  constexpr explicit ModuleSet(std::uint8_t bits) : bits_(bits & 0x7u) {}
  constexpr ModuleSet(std::initializer_list<ModuleId> ids) {
    for (auto id : ids) bits_ |= bit(id);
  }

  static constexpr ModuleSet none() { return ModuleSet{}; }
  static constexpr ModuleSet all() { return ModuleSet(std::uint8_t{0x7}); }

  constexpr bool contains(ModuleId id) const { return (bits_ & bit(id)) != 0; }
  constexpr std::size_t size() const {
    return static_cast<std::size_t>((bits_ & 1u) + ((bits_ >> 1) & 1u) + ((bits_ >> 2) & 1u));
  }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }
  constexpr bool operator==(const ModuleSet&) const = default;

  // "{}", "{lstm}", "{lstm+agcrn}", ...; no commas, so it is safe in CSV fields
  std::string to_string() const {
    std::string s = "{";
    bool first = true;
    for (auto id : kAllModules) {
      if (!contains(id)) continue;
      if (!first) s += '+';
      s += module_name(id);
      first = false;
    }
    return s + "}";
  }

 private:
  static constexpr std::uint8_t bit(ModuleId id) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(id)); }
  std::uint8_t bits_ = 0;
};

// All 8 subsets ordered by size, then lexicographically by member ModuleId.
// The first minimum in this order wins a tie.
inline const std::array<ModuleSet, 8>& subsets_in_tie_order() {
  static const std::array<ModuleSet, 8> order = [] {
    std::array<ModuleSet, 8> out{};
    for (std::uint8_t b = 0; b < 8; ++b) out[b] = ModuleSet(b);
    auto members = [](ModuleSet s) {
      std::vector<int> m;
      for (auto id : kAllModules)
        if (s.contains(id)) m.push_back(static_cast<int>(id));
      return m;
    };
    std::sort(out.begin(), out.end(), [&](ModuleSet a, ModuleSet b) {
      if (a.size() != b.size()) return a.size() < b.size();
      return members(a) < members(b);
    });
    return out;
  }();
  return order;
}

enum class DType : std::uint8_t { F32 = 4, F64 = 8 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

inline std::size_t dtype_bytes(DType d) { return static_cast<std::size_t>(d); }

struct TensorSpec {
  std::string name;
  ModuleId module = ModuleId::Lstm;
  Shape shape;

  bool operator==(const TensorSpec&) const = default;
};

// Ordered (name, module, shape) list plus element type; the wire layout of a
// bundle. Participants in a federation must hold identical manifests.
struct Manifest {
  DType dtype = DType::F32;
  std::vector<TensorSpec> tensors;

  bool operator==(const Manifest&) const = default;

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += shape_numel(t.shape);
    return n;
  }
};

namespace manifest_layout {
inline constexpr std::array<char, 4> kMagic{'P', 'B', 'N', 'D'};
inline constexpr std::uint32_t kVersion = 1;
// magic + version + dtype + tensor count
inline constexpr std::size_t kFixedHeader = 4 + 4 + 1 + 4;
// name length (u16) + module (u8) + rank (u8)
inline constexpr std::size_t kPerTensor = 2 + 1 + 1;
inline constexpr std::size_t kPerExtent = 4;
}  // namespace manifest_layout

// Bytes the manifest occupies at the front of a serialized bundle.
inline std::size_t manifest_encoded_size(const Manifest& m) {
  std::size_t n = manifest_layout::kFixedHeader;
  for (const auto& t : m.tensors) {
    n += manifest_layout::kPerTensor + t.name.size() + manifest_layout::kPerExtent * t.shape.size();
  }
  return n;
}

// Throws ManifestError naming the first divergent tensor.
inline void require_same_manifest(const Manifest& expected, const Manifest& got, std::string_view context) {
  const std::string where(context);
  if (expected.dtype != got.dtype) {
    throw ManifestError(where + ": dtype mismatch (" + std::to_string(dtype_bytes(expected.dtype)) + "-byte vs " +
                        std::to_string(dtype_bytes(got.dtype)) + "-byte elements)");
  }
  const std::size_t n = std::min(expected.tensors.size(), got.tensors.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = expected.tensors[i];
    const auto& b = got.tensors[i];
    if (a.name != b.name) {
      throw ManifestError(where + ": tensor #" + std::to_string(i) + " is '" + b.name + "', expected '" + a.name + "'");
    }
    if (a.module != b.module || a.shape != b.shape) {
      throw ManifestError(where + ": tensor '" + a.name + "' has shape " + shape_str(b.shape) + " in module " +
                          std::string(module_name(b.module)) + ", expected " + shape_str(a.shape) + " in module " +
                          std::string(module_name(a.module)));
    }
  }
  if (expected.tensors.size() != got.tensors.size()) {
    const auto& longer = expected.tensors.size() > got.tensors.size() ? expected : got;
    throw ManifestError(where + ": tensor count " + std::to_string(got.tensors.size()) + " vs expected " +
                        std::to_string(expected.tensors.size()) + "; first unmatched tensor '" +
                        longer.tensors[n].name + "'");
  }
}

// Named parameter tensors grouped by module. Copying a bundle deep-copies
// every tensor, so bundles behave as values.
template <typename T>
class ParamBundle {
 public:
  struct Entry {
    std::string name;
    ModuleId module;
    Tensor<T> tensor;
  };

  ParamBundle() = default;
  ParamBundle(const ParamBundle& other) { copy_from(other); }
  ParamBundle& operator=(const ParamBundle& other) {
    if (this != &other) copy_from(other);
    return *this;
  }
  ParamBundle(ParamBundle&&) noexcept = default;
  ParamBundle& operator=(ParamBundle&&) noexcept = default;

  void add(std::string name, ModuleId module, Tensor<T> tensor) {
    if (find(name) != nullptr) throw ManifestError("ParamBundle::add: duplicate tensor '" + name + "'");
    entries_.push_back(Entry{std::move(name), module, std::move(tensor)});
  }

  const Tensor<T>& at(std::string_view name) const {
    const Entry* e = find(name);
    if (e == nullptr) throw ManifestError("ParamBundle: no tensor named '" + std::string(name) + "'");
    return e->tensor;
  }
  Tensor<T>& at(std::string_view name) { return const_cast<Tensor<T>&>(std::as_const(*this).at(name)); }

  bool contains(std::string_view name) const { return find(name) != nullptr; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t tensor_count() const { return entries_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  Manifest manifest() const {
    Manifest m;
    m.dtype = dtype_of<T>();
    m.tensors.reserve(entries_.size());
    for (const auto& e : entries_) m.tensors.push_back(TensorSpec{e.name, e.module, e.tensor.shape()});
    return m;
  }

  // Handles (not copies) of every tensor, in manifest order.
  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& e : entries_) e.tensor.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.clear_grad();
  }

  // Copy of *this whose tensors in `modules` are taken from `donor`.
  ParamBundle with_modules_from(const ParamBundle& donor, ModuleSet modules) const {
    require_same_manifest(manifest(), donor.manifest(), "module replacement");
    ParamBundle out(*this);
    for (std::size_t i = 0; i < out.entries_.size(); ++i) {
      if (modules.contains(out.entries_[i].module)) out.entries_[i].tensor = donor.entries_[i].tensor.clone();
    }
    return out;
  }

  // Bitwise equality of manifests and values.
  bool identical_to(const ParamBundle& other) const {
    if (manifest() != other.manifest()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto a = entries_[i].tensor.values();
      auto b = other.entries_[i].tensor.values();
      if (!std::equal(a.begin(), a.end(), b.begin(), b.end(),
                      [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; }))
        return false;
    }
    return true;
  }

 private:
  const Entry* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  void copy_from(const ParamBundle& other) {
    entries_.clear();
    entries_.reserve(other.entries_.size());
    for (const auto& e : other.entries_) entries_.push_back(Entry{e.name, e.module, e.tensor.clone()});
  }

  std::vector<Entry> entries_;
};

}  // namespace fedstgcrn

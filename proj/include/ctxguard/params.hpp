#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxguard/numerics.hpp"

namespace ctxguard {

struct NamedTensor {
  std::string name;
  Matrix value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered collection of named weight tensors. The insertion order is the
/// schema order used by flatten/unflatten and by checkpoints.
class ParamSet {
 public:
  std::size_t add(std::string name, Matrix value);

  std::size_t count() const noexcept { return tensors_.size(); }
  Matrix& operator[](std::size_t i) { return tensors_[i].value; }
  const Matrix& operator[](std::size_t i) const { return tensors_[i].value; }
  const std::string& name(std::size_t i) const { return tensors_[i].name; }
  const Matrix& at(std::string_view name) const;

  std::span<NamedTensor> tensors() noexcept { return tensors_; }
  std::span<const NamedTensor> tensors() const noexcept { return tensors_; }

  std::size_t total_size() const noexcept;
  ParamSet zeros_like() const;
  bool same_schema(const ParamSet& other) const noexcept;
  void set_zero();
  /// this += scale * other; schemas must match.
  void add_scaled(const ParamSet& other, double scale);

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<NamedTensor> tensors_;
};

std::vector<double> flatten_params(const ParamSet& params);
/// Writes `flat` into `params` in schema order.
void unflatten_into(std::span<const double> flat, ParamSet& params);
ParamSet unflatten_params(std::span<const double> flat, const ParamSet& schema);

/// Checkpoint text: {"version":1,"layers":[{"name","shape":[r,c],"data":[...]}]}.
std::string checkpoint_to_string(const ParamSet& params);
ParamSet checkpoint_from_string(const std::string& text);
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);
/// Loads and verifies names and shapes against `schema`.
ParamSet load_checkpoint(const std::filesystem::path& path, const ParamSet& schema);

}  // namespace ctxguard

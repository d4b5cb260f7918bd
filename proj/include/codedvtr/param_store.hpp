#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cvtr {

struct ParamSlice {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool trainable = true;
};

// One flat parameter vector with a matching gradient vector. Slices are
// appended contiguously and cannot change once the store is frozen.
class ParamStore {
 public:
  using Id = std::size_t;

  Id add(std::string name, std::vector<std::size_t> shape, bool trainable = true);
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  std::span<double> values(Id id);
  std::span<const double> values(Id id) const;
  std::span<double> grads(Id id);
  std::span<const double> grads(Id id) const;

  std::span<double> all_values() { return values_; }
  std::span<const double> all_values() const { return values_; }
  std::span<double> all_grads() { return grads_; }
  std::span<const double> all_grads() const { return grads_; }

  const std::vector<ParamSlice>& slices() const { return slices_; }
  const ParamSlice& slice(Id id) const { return slices_.at(id); }
  // Slice id by name; throws if absent.
  Id find(const std::string& name) const;

  void zero_grads();
  std::size_t size() const { return values_.size(); }
  std::size_t trainable_size() const;

 private:
  std::vector<ParamSlice> slices_;
  std::vector<double> values_;
  std::vector<double> grads_;
  bool frozen_ = false;
};

}  // namespace cvtr

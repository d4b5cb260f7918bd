#include "codedvtr/param_store.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "codedvtr/error.hpp"

namespace cvtr {

ParamStore::Id ParamStore::add(std::string name, std::vector<std::size_t> shape, bool trainable) {
  if (frozen_) throw StructuralError("ParamStore: cannot add '" + name + "' after freeze");
  for (const auto& s : slices_)
    if (s.name == name) throw StructuralError("ParamStore: duplicate slice '" + name + "'");
  const std::size_t size =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
  ParamSlice slice{std::move(name), std::move(shape), values_.size(), size, trainable};
  values_.resize(values_.size() + size, 0.0);
  grads_.resize(grads_.size() + size, 0.0);
  slices_.push_back(std::move(slice));
  return slices_.size() - 1;
}

std::span<double> ParamStore::values(Id id) {
  const auto& s = slices_.at(id);
  return {values_.data() + s.offset, s.size};
}
std::span<const double> ParamStore::values(Id id) const {
  const auto& s = slices_.at(id);
  return {values_.data() + s.offset, s.size};
}
std::span<double> ParamStore::grads(Id id) {
  const auto& s = slices_.at(id);
  return {grads_.data() + s.offset, s.size};
}
std::span<const double> ParamStore::grads(Id id) const {
  const auto& s = slices_.at(id);
  return {grads_.data() + s.offset, s.size};
}

ParamStore::Id ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < slices_.size(); ++i)
    if (slices_[i].name == name) return i;
  throw StructuralError("ParamStore: no slice named '" + name + "'");
}

void ParamStore::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

std::size_t ParamStore::trainable_size() const {
  std::size_t n = 0;
  for (const auto& s : slices_)
    if (s.trainable) n += s.size;
  return n;
}

}  // namespace cvtr

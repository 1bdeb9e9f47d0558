#include "a3net/parameters.hpp"

namespace a3net {

Tensor ParameterSet::add(const std::string& name, Tensor t, ParamGroup group) {
  if (find(name)) throw ContractError("duplicate parameter name '" + name + "'");
  params_.push_back({name, t, group});
  return t;
}

Tensor ParameterSet::normal(const std::string& name, Shape shape, ParamGroup group, Rng& rng, double stddev) {
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = stddev * rng.normal();
  return add(name, Tensor::from(std::move(shape), std::move(values), true), group);
}

Tensor ParameterSet::constant(const std::string& name, Shape shape, ParamGroup group, double value) {
  return add(name, Tensor::full(std::move(shape), value, true), group);
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParameterSet::zero_grads() {
  for (auto& p : params_) p.value.zero_grad();
}

std::vector<NamedTensor> ParameterSet::named() const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back({p.name, p.value});
  return out;
}

}  // namespace a3net

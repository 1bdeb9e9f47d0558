#pragma once

#include <string>
#include <vector>

#include "a3net/gradcheck.hpp"
#include "a3net/rng.hpp"
#include "a3net/tensor.hpp"

namespace a3net {

/// Learning-rate group. The visual extractor trains with its own rate.
enum class ParamGroup { Visual, Rest };

struct Parameter {
  std::string name;
  Tensor value;
  ParamGroup group;
};

/// Owns every trainable tensor of a model, in creation order.
class ParameterSet {
 public:
  Tensor normal(const std::string& name, Shape shape, ParamGroup group, Rng& rng, double stddev);
  Tensor constant(const std::string& name, Shape shape, ParamGroup group, double value);

  const std::vector<Parameter>& all() const { return params_; }
  const Parameter* find(const std::string& name) const;
  std::size_t scalar_count() const;
  void zero_grads();
  std::vector<NamedTensor> named() const;

 private:
  Tensor add(const std::string& name, Tensor t, ParamGroup group);
  std::vector<Parameter> params_;
};

}  // namespace a3net

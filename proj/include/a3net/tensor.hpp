#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace a3net {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct TensorImpl;

struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads the output gradient and accumulates into the inputs' gradients.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient slot.
///
/// A Tensor is a cheap handle: copies share the underlying storage. Values
/// produced by operations are immutable; only leaves (parameters) expose
/// mutable data, which is how optimizers update them in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of axis `axis`; negative values count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access for leaf tensors only.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool is_leaf() const;
  /// Empty span when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Gradients accumulate (+=).
  void backward() const;

  /// Same values, no graph history, no gradient.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_op(const char*, Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(const detail::TensorImpl&)>);

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Records a primitive op. When grad mode is on and any input requires a
/// gradient, the result joins the graph with `backward` as its rule.
Tensor make_op(const char* name, Shape shape, std::vector<double> values,
               std::vector<Tensor> inputs,
               std::function<void(const detail::TensorImpl& out)> backward);

/// Gradient accumulator of `t`, or nullptr when `t` takes no gradient.
std::vector<double>* grad_sink(const Tensor& t);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Fingerprints the on/off pattern of every ReLU evaluated while installed.
/// Two evaluations with equal fingerprints lie in the same linear piece.
class ActivationProbe {
 public:
  ActivationProbe();
  ~ActivationProbe();
  ActivationProbe(const ActivationProbe&) = delete;
  ActivationProbe& operator=(const ActivationProbe&) = delete;

  std::uint64_t fingerprint() const { return hash_; }
  void mix(std::span<const double> preactivation);

  static ActivationProbe* active();

 private:
  std::uint64_t hash_ = 1469598103934665603ULL;
  ActivationProbe* previous_;
};

}  // namespace a3net

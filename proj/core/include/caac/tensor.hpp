#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace caac {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised whenever a forward operation produces NaN or Inf from finite input.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool tracked = false;  // participates in the active tape's backward pass
};
}  // namespace detail

/// Dense row-major tensor of doubles. Cheap handle; copies share storage.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool valid() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  /// Detached deep copy (fresh storage, no grad, not tracked).
  Tensor clone() const;

  detail::TensorData* raw() const { return impl_.get(); }

 private:
  friend class Tape;
  std::shared_ptr<detail::TensorData> impl_;
};

/// Defines elementwise binary kinds with restricted broadcasting:
/// same-shape, scalar-vs-tensor, and [d] vector against [...,d].
enum class Activation { Relu, Gelu };

/// Reverse-mode tape. Rebuilt per forward pass (define-by-run); records one
/// node per op with a closure implementing its backward rule.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor add_const(const Tensor& a, double c);

  Tensor relu(const Tensor& a);
  Tensor gelu(const Tensor& a);
  Tensor activation(Activation kind, const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor log1p(const Tensor& a);

  /// Softmax over the last axis, max-subtracted for stability.
  Tensor softmax(const Tensor& a);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    double eps = 1e-5);

  Tensor sum_all(const Tensor& a);
  Tensor mean_all(const Tensor& a);

  // 2-D structural ops.
  Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
  Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor reshape(const Tensor& a, Shape shape);

  /// Broadcast-add a [1,d] row to every row of a [n,d] matrix.
  Tensor add_rowvec(const Tensor& a, const Tensor& row);

  /// out[i] = a[index[i]]. Backward scatters (accumulates) by the same
  /// index, so repeated indices sum their gradients.
  Tensor gather(const Tensor& a, const std::vector<std::size_t>& index,
                Shape out_shape);

  /// Runs the chain rule from a scalar loss back through every recorded
  /// node, exactly once each, in reverse topological order. Gradients
  /// accumulate (sum) across fan-out.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;

  Tensor make_output(Shape shape, std::vector<double> data, bool tracked,
                     const char* op);
  void record(std::function<void()> fn) { nodes_.push_back({std::move(fn)}); }
};

/// Adam with bias correction over a fixed ordered parameter list.
class Adam {
 public:
  struct Config {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam(Config cfg, const std::vector<Tensor>& params);

  /// One update from the grads currently stored on the parameters.
  void step(std::vector<Tensor>& params);

  std::int64_t steps() const { return t_; }
  const Config& config() const { return cfg_; }

 private:
  Config cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace caac

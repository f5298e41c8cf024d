#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dtlab {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

// Records the producing operation of a tensor. backward_fn reads the output's
// accumulated gradient and adds each parent's contribution to parent.grad.
struct GraphNode {
  std::vector<Tensor> parents;
  std::function<void()> backward_fn;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until first accumulation
  std::unique_ptr<GraphNode> node;
  bool requires_grad = false;
};

// Dense float32 n-d array, optionally part of a reverse-mode graph.
// Copying a Tensor shares the underlying storage (handle semantics).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<float> values,
                            bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->values.size()); }
  int64_t extent(size_t axis) const { return impl_->shape[axis]; }
  size_t rank() const { return impl_->shape.size(); }

  std::span<const float> values() const { return impl_->values; }
  std::span<float> mutable_values() { return impl_->values; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  // Allocates a zero-filled gradient buffer on first use.
  std::span<float> mutable_grad();
  void zero_grad();

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  const GraphNode* node() const { return impl_ ? impl_->node.get() : nullptr; }

  // Same values, no graph node; the result never accumulates gradient.
  Tensor detach() const;

  float item() const;

  TensorImpl* impl() const { return impl_.get(); }

  // Used by the op implementations to attach a graph node.
  static Tensor make(Shape shape);
  void attach_node(std::vector<Tensor> parents,
                   std::function<void()> backward_fn);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// While alive, newly created ops do not record graph nodes (thread-local).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Integer class labels, one per output position.
struct Labels {
  Shape shape;  // (B, spatial...) matching the logits without the class axis
  std::vector<int32_t> values;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
};

// 3-wide (3x3 in 2D) convolution, stride 1, zero padding 1 on every spatial
// edge, so spatial extents are preserved. input (B, Cin, spatial...),
// weights (Cout, Cin, 3[, 3]), bias (Cout) -> (B, Cout, spatial...).
Tensor conv(const Tensor& input, const Tensor& weights, const Tensor& bias,
            int dims);

Tensor relu(const Tensor& input);

// (B, Ca, spatial...) ++ (B, Cb, spatial...) -> (B, Ca+Cb, spatial...).
Tensor concat_channels(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);

// Elementwise product / scalar scaling; used to mix weighted loss terms.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);

// Sum of all elements (double accumulation), as a scalar tensor.
Tensor sum(const Tensor& a);

// Mean over batch and positions of -log softmax(logits)[target].
// logits (B, 2, spatial...), target values in {0, 1}. Returns a scalar.
Tensor cross_entropy_per_position(const Tensor& logits, const Labels& target);

// Reverse pass from a scalar loss; repeated calls accumulate gradients.
void backward(const Tensor& loss);

}  // namespace dtlab

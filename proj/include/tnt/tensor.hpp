#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tnt/common.hpp"
#include "tnt/rng.hpp"

namespace tnt {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Allocated lazily; once present it stays the same length as data.
  std::vector<double> grad;
  // True when this node wants gradients itself or sits on a path to a node
  // that does. Backward rules consult it to skip dead branches.
  bool requires_grad = false;
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

// Value-semantics handle onto shared storage. All math is f64; there is no
// other dtype. Ops record backward rules onto the thread's active Tape when
// one exists, otherwise they are pure forward computations.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t dim(int axis) const;
  int64_t numel() const;
  std::span<double> data();
  std::span<const double> data() const;
  double value() const;  // scalar convenience; usage_error otherwise

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);
  // Empty span until a backward pass (or zero_grad) touches this tensor.
  std::span<const double> grad() const;
  void zero_grad();  // allocates if needed, then clears

  // Leaf copy of the data; gradients never flow back through it.
  Tensor detach() const;

  std::shared_ptr<detail::TensorImpl> ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Define-by-run tape. Ops append their backward rules in forward execution
// order while a Tape is active on the current thread; backward() replays them
// in reverse, which is a valid reverse-topological order visiting each
// recorded node exactly once. A tape and the tensors recorded on it are
// confined to the thread that built them; one tape at a time per thread, and
// each tape is consumed by a single backward() call.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> rule);
  // Seeds d(loss)/d(loss) = 1 and accumulates into .grad of everything
  // reachable. `loss` must be scalar.
  void backward(const Tensor& loss);
  std::size_t node_count() const { return rules_.size(); }

  static Tape* active();

 private:
  std::vector<std::function<void()>> rules_;
  bool consumed_ = false;
};

// ---- ops ----
// Shapes are checked eagerly; violations throw shape_error. Reductions and
// normalizations act on explicit axes; nothing broadcasts implicitly except
// the documented *_bcast/_last helpers.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] or batched [B,m,k]x[B,k,n]
Tensor transpose(const Tensor& a);                // swaps the last two axes
Tensor reshape(const Tensor& a, Shape s);
Tensor add(const Tensor& a, const Tensor& b);         // same shape
Tensor add_bcast(const Tensor& x, const Tensor& p);   // p.shape is a suffix of x.shape
Tensor add_scalar(const Tensor& a, double c);
Tensor mul(const Tensor& a, const Tensor& b);         // same shape, elementwise
Tensor scale(const Tensor& a, double s);
Tensor scale_last(const Tensor& x, const Tensor& s);  // s.shape == x.shape minus last axis
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& shift, double eps);
Tensor gelu(const Tensor& x);  // exact erf form
// Mean over the batch of -log p(label); logits [B,C], stabilized log-sum-exp.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);
Tensor sum(const Tensor& x);  // full reduction to a scalar
Tensor mean_axis(const Tensor& x, int axis);
Tensor slice_axis(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor concat_axis(std::span<const Tensor> parts, int axis);
Tensor repeat_first(const Tensor& t, int64_t n);  // [..] -> [n, ..]
// out[b,j,:] = x[b, idx[b][j], :]; every row list must have the same length.
Tensor gather_axis1(const Tensor& x, const std::vector<std::vector<int64_t>>& idx);
// x [..,k] @ w [k,n] + b [n]; the workhorse behind every projection.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Unit-normal leaf tensor; never differentiable.
Tensor gaussian(RngStream& rng, Shape shape);

// Plain data helper (no autodiff): rows of the first axis by index.
Tensor take_first_axis(const Tensor& x, std::span<const int64_t> idx);

}  // namespace tnt

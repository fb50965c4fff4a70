#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mstkd/rng.hpp"

namespace mstkd {

struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct value_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

enum class AxisReduceMode { kMax, kMin, kMean };

class Tensor;

struct TensorNode {
    std::vector<Tensor> parents;
    // Accumulates into parent grads given the output tensor (whose grad is set).
    std::function<void(const Tensor& out)> backward;
    const char* op = "";
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<TensorNode> node;  // null for leaves and constants
};

// Dense row-major tensor of doubles with a single-pass reverse-mode tape.
// Value semantics: copies share the underlying buffer.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);
    // uniform in [-bound, bound]
    static Tensor uniform(const Shape& shape, double bound, Rng& rng, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t extent(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double value_at(std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad();              // allocates zeros on first use
    const std::vector<double>& grad() const;  // throws if absent
    void zero_grad();
    void accumulate_grad(const std::vector<double>& g);

    // Scalar extraction (numel must be 1).
    double item() const;

    // Copy of the values with no graph attached.
    Tensor detach() const;
    // Deep copy (fresh buffer), keeps requires_grad, drops graph.
    Tensor clone() const;

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorNode>& node() const { return impl_->node; }
    void set_node(std::shared_ptr<TensorNode> n) { impl_->node = std::move(n); }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

// Tape recording is enabled per thread; disable around frozen-teacher passes.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Reverse-mode sweep from a scalar loss; grads accumulate until zeroed.
void backward(const Tensor& loss);

// Elementwise, same-shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor elem_div(const Tensor& a, const Tensor& b);

// Scalar-tensor.
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// Elementwise maps.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor silu(const Tensor& a);  // x * sigmoid(x), smooth everywhere
Tensor clamp(const Tensor& a, double lo, double hi);

// Shape ops.
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor transpose(const Tensor& a);  // rank-2
Tensor concat(const std::vector<Tensor>& parts, int axis);

// Linear algebra / reductions.
Tensor matmul(const Tensor& a, const Tensor& b);  // rank-2 x rank-2
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
Tensor reduce(const Tensor& a, int axis, AxisReduceMode mode);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// b has shape a.shape[1:]; multiplies every leading slice of a by b.
Tensor mul_broadcast_leading(const Tensor& a, const Tensor& b);
// a is (R, C), b is (C); adds b to every row.
Tensor add_rowvec(const Tensor& a, const Tensor& b);

// Volumetric ops on (C, H, W, D) tensors.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);
Tensor upsample_nearest(const Tensor& input, int factor);
Tensor avg_pool3d(const Tensor& input, int factor);
Tensor global_max_pool(const Tensor& input);
Tensor global_mean_pool(const Tensor& input);

// Normalization over the last axis with per-feature scale/shift.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Per-slice z-score along `axis`: (x - mean) / ((stddev + 1e-7) * tau).
Tensor standardize(const Tensor& a, int axis, double tau);

}  // namespace mstkd

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "hitt/errors.hpp"

namespace hitt {

class Rng;

// "[3,4,5]"-style rendering for error messages.
std::string shape_str(const std::vector<int>& shape);

// Row-major f32 tensor. Channel-first layout for maps: [C, h, w].
struct TensorData {
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until first touched, then numel zeros
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float v,
                       bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<float> data,
                       bool requires_grad = false);
    static Tensor random_normal(std::vector<int> shape, Rng& rng, float stddev,
                                float mean = 0.0f, bool requires_grad = false);
    static Tensor random_uniform(std::vector<int> shape, Rng& rng, float lo,
                                 float hi, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<int>& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return d_->value.size(); }

    float* data() { return d_->value.data(); }
    const float* data() const { return d_->value.data(); }
    std::vector<float>& values() { return d_->value; }
    const std::vector<float>& values() const { return d_->value; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool b) { d_->requires_grad = b; }

    // Gradient buffer, allocated as zeros on first access.
    float* grad();
    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<float>& grad_values() const { return d_->grad; }
    void zero_grad();

    float at(std::initializer_list<int> idx) const;
    float& at(std::initializer_list<int> idx);

    Tensor detach() const;  // value copy, no grad tracking
    Tensor clone() const;   // leaf copy preserving requires_grad

    std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape. One may be alive per thread; ops record backward
// closures onto it while it exists. Replay happens newest-first, visiting
// every node exactly once, then the tape is cleared for reuse.
class GradientTape {
public:
    GradientTape();
    ~GradientTape();
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    std::size_t node_count() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 on the scalar `loss`, runs all recorded
    // closures in reverse order, then clears the tape.
    void backward(Tensor& loss);

    static GradientTape* active();

private:
    std::vector<std::function<void()>> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Elementwise binary ops broadcast along trailing dims
// (right-aligned; each dim must match or be 1). Every op validates shapes
// and rejects non-finite results.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_axis0(const Tensor& a, int begin, int end);

Tensor softmax(const Tensor& a, int axis);      // max-subtracted
Tensor log_softmax(const Tensor& a, int axis);  // stable log of softmax
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);  // log(1 + exp(x)), overflow-safe
Tensor abs_val(const Tensor& a);

Tensor sum(const Tensor& a);                // -> [1]
Tensor sum_axis(const Tensor& a, int axis); // removes `axis`
Tensor mean(const Tensor& a);               // -> [1]
Tensor rsqrt(const Tensor& a, float eps);   // 1/sqrt(x + eps)

// x: [Cin,h,w], w: [Cout,Cin,k,k] with k in {1,3}, bias: [Cout].
// Zero padding k/2; output [Cout, (h+2p-k)/stride+1, (w+2p-k)/stride+1].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride = 1);

Tensor upsample_nearest(const Tensor& x, int factor);  // [C,h,w] -> [C,h*f,w*f]

// Non-differentiable helpers (never recorded on the tape).
// Per-pixel argmax over channel 0 of [C,h,w]; ties -> lowest index.
std::vector<int> argmax_channel(const Tensor& x);
std::vector<float> max_channel(const Tensor& x);

}  // namespace hitt

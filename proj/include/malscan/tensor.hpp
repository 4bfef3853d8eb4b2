#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "malscan/errors.hpp"

namespace malscan {

struct Shape4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const {
        return std::int64_t(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

namespace detail {

struct TensorNode {
    Shape4 shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
    }
};

bool grad_enabled();

}  // namespace detail

// RAII switch that disables graph recording on the current thread; used by
// inference paths so forward passes stay allocation-light.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// 4-D float tensor (batch, channel, row, col) with reverse-mode autodiff.
// Value-semantics handle: copies share the underlying node.
class Tensor4 {
  public:
    Tensor4() = default;

    static Tensor4 zeros(Shape4 s, bool requires_grad = false);
    static Tensor4 full(Shape4 s, float value, bool requires_grad = false);
    static Tensor4 from_data(Shape4 s, std::vector<float> values,
                             bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape4& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->shape.numel(); }

    std::span<const float> data() const { return node_->data; }
    std::span<float> data() { return node_->data; }

    float at(int n, int c, int y, int x) const;
    float& at(int n, int c, int y, int x);

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const float> grad() const { return node_->grad; }
    void zero_grad();

    // Deep copy with no graph attached.
    Tensor4 detach() const;

    // Reverse-mode sweep from a scalar (1,1,1,1) tensor; accumulates into
    // every reachable requires_grad node.
    void backward() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    static Tensor4 wrap(std::shared_ptr<detail::TensorNode> node);

  private:
    std::shared_ptr<detail::TensorNode> node_;
};

// --- elementwise / reduction ops -------------------------------------------

Tensor4 add(const Tensor4& a, const Tensor4& b);
Tensor4 sub(const Tensor4& a, const Tensor4& b);
Tensor4 mul(const Tensor4& a, const Tensor4& b);
Tensor4 div(const Tensor4& a, const Tensor4& b);
Tensor4 scalar_mul(const Tensor4& a, float s);
Tensor4 scalar_add(const Tensor4& a, float s);
// elementwise sqrt; subgradient 0 where the input is 0
Tensor4 sqrt_elem(const Tensor4& a);
Tensor4 relu(const Tensor4& a);
Tensor4 sigmoid(const Tensor4& a);
Tensor4 sum_all(const Tensor4& a);
Tensor4 mean_all(const Tensor4& a);

// --- structural ops ---------------------------------------------------------

Tensor4 concat_channels(const Tensor4& a, const Tensor4& b);
std::pair<Tensor4, Tensor4> split_channels(const Tensor4& t, int c_first);

// --- neural-net ops ---------------------------------------------------------

// weight (out_c, in_c, kh, kw), odd kernel dims; bias (1, out_c, 1, 1) or an
// undefined tensor for no bias.
Tensor4 conv2d(const Tensor4& input, const Tensor4& weight, const Tensor4& bias,
               int stride = 1, int padding = 0);

// weight (in_c, out_c, kh, kw); stride 2 with a 2x2 kernel doubles the
// spatial dims exactly.
Tensor4 conv_transpose2d(const Tensor4& input, const Tensor4& weight,
                         const Tensor4& bias, int stride);

Tensor4 maxpool2d(const Tensor4& input, int size = 2);

struct BatchNormState {
    std::vector<float> running_mean;
    std::vector<float> running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;

    explicit BatchNormState(int channels = 0)
        : running_mean(channels, 0.0f), running_var(channels, 1.0f) {}
};

// gamma/beta shaped (1, c, 1, 1). Training mode normalizes with batch
// statistics and updates the running stats; eval mode uses the running stats.
Tensor4 batchnorm2d(const Tensor4& input, const Tensor4& gamma,
                    const Tensor4& beta, BatchNormState& state, bool training);

// Inverted dropout; identity in eval mode. Mask is drawn from `rng`.
Tensor4 dropout(const Tensor4& input, float rate, std::mt19937_64& rng,
                bool training);

// Per-image RMS contrast (population std of pixel intensities), output
// shaped (n, 1, 1, 1).
Tensor4 rms_contrast_batch(const Tensor4& input);

// --- optimizer --------------------------------------------------------------

struct Parameter {
    std::string name;
    Tensor4 value;

    Parameter() = default;
    Parameter(std::string n, Tensor4 v) : name(std::move(n)), value(std::move(v)) {
        value.set_requires_grad(true);
    }
};

struct AdamState {
    struct Slot {
        std::vector<float> m;
        std::vector<float> v;
    };
    std::vector<Slot> slots;  // parallel to the parameter list
    std::int64_t t = 0;
    float lr = 0.01f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
};

// Bias-corrected Adam update over `params`; reads each parameter's
// accumulated gradient and leaves it untouched (caller zeroes).
void adam_step(const std::vector<Parameter*>& params, AdamState& state);

// uniform in [lo, hi) built portably from raw mt19937_64 draws
float uniform_float(std::mt19937_64& rng, float lo, float hi);

}  // namespace malscan

#include "malscan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "malscan/kernels.hpp"

namespace malscan {

namespace detail {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() {
    return g_grad_enabled;
}

}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(detail::grad_enabled()) {
    detail::g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    detail::g_grad_enabled = prev_;
}

std::string Shape4::str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor4
// ---------------------------------------------------------------------------

Tensor4 Tensor4::zeros(Shape4 s, bool requires_grad) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = s;
    node->data.assign(size_t(s.numel()), 0.0f);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor4 Tensor4::full(Shape4 s, float value, bool requires_grad) {
    Tensor4 t = zeros(s, requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
}

Tensor4 Tensor4::from_data(Shape4 s, std::vector<float> values,
                           bool requires_grad) {
    if (std::int64_t(values.size()) != s.numel()) {
        throw DimensionError("from_data: " + std::to_string(values.size()) +
                             " values for shape " + s.str());
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = s;
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor4 Tensor4::wrap(std::shared_ptr<detail::TensorNode> node) {
    Tensor4 t;
    t.node_ = std::move(node);
    return t;
}

float Tensor4::at(int n, int c, int y, int x) const {
    const Shape4& s = node_->shape;
    return node_->data[((size_t(n) * s.c + c) * s.h + y) * s.w + x];
}

float& Tensor4::at(int n, int c, int y, int x) {
    const Shape4& s = node_->shape;
    return node_->data[((size_t(n) * s.c + c) * s.h + y) * s.w + x];
}

void Tensor4::zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor4 Tensor4::detach() const {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = node_->shape;
    node->data = node_->data;
    node->requires_grad = false;
    return wrap(std::move(node));
}

void Tensor4::backward() const {
    if (!node_ || node_->shape.numel() != 1) {
        throw ArgumentError("backward requires a scalar tensor, got shape " +
                            (node_ ? node_->shape.str() : std::string("()")));
    }
    // post-order DFS: a node is appended after all of its parents, so the
    // reversed list runs each backward_fn only once its grad is complete
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> visited;
    struct Frame {
        detail::TensorNode* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorNode* p = f.node->parents[f.next_parent++].get();
            if (visited.insert(p).second) {
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn && !(*it)->grad.empty()) {
            (*it)->backward_fn(**it);
        }
    }
}

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace {

using NodePtr = std::shared_ptr<detail::TensorNode>;

bool tracking(std::initializer_list<const Tensor4*> inputs) {
    if (!detail::grad_enabled()) return false;
    for (const Tensor4* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void attach(Tensor4& out, std::vector<NodePtr> parents,
            std::function<void(detail::TensorNode&)> fn) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(fn);
}

void check_same_shape(const char* op, const Tensor4& a, const Tensor4& b) {
    if (!(a.shape() == b.shape())) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             a.shape().str() + " vs " + b.shape().str());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

Tensor4 add(const Tensor4& a, const Tensor4& b) {
    check_same_shape("add", a, b);
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) po[i] = pa[i] + pb[i];
    if (tracking({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        attach(out, {na, nb}, [na, nb](detail::TensorNode& self) {
            if (na->requires_grad) {
                na->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    na->grad[i] += self.grad[i];
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    nb->grad[i] += self.grad[i];
            }
        });
    }
    return out;
}

Tensor4 sub(const Tensor4& a, const Tensor4& b) {
    check_same_shape("sub", a, b);
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) po[i] = pa[i] - pb[i];
    if (tracking({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        attach(out, {na, nb}, [na, nb](detail::TensorNode& self) {
            if (na->requires_grad) {
                na->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    na->grad[i] += self.grad[i];
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    nb->grad[i] -= self.grad[i];
            }
        });
    }
    return out;
}

Tensor4 mul(const Tensor4& a, const Tensor4& b) {
    check_same_shape("mul", a, b);
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) po[i] = pa[i] * pb[i];
    if (tracking({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        attach(out, {na, nb}, [na, nb](detail::TensorNode& self) {
            if (na->requires_grad) {
                na->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    na->grad[i] += self.grad[i] * nb->data[i];
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    nb->grad[i] += self.grad[i] * na->data[i];
            }
        });
    }
    return out;
}

Tensor4 div(const Tensor4& a, const Tensor4& b) {
    check_same_shape("div", a, b);
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) po[i] = pa[i] / pb[i];
    if (tracking({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        attach(out, {na, nb}, [na, nb](detail::TensorNode& self) {
            if (na->requires_grad) {
                na->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    na->grad[i] += self.grad[i] / nb->data[i];
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) {
                    const float q = na->data[i] / (nb->data[i] * nb->data[i]);
                    nb->grad[i] -= self.grad[i] * q;
                }
            }
        });
    }
    return out;
}

Tensor4 scalar_mul(const Tensor4& a, float s) {
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) po[i] = pa[i] * s;
    if (tracking({&a})) {
        NodePtr na = a.node();
        attach(out, {na}, [na, s](detail::TensorNode& self) {
            if (!na->requires_grad) return;
            na->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                na->grad[i] += self.grad[i] * s;
        });
    }
    return out;
}

Tensor4 scalar_add(const Tensor4& a, float s) {
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) po[i] = pa[i] + s;
    if (tracking({&a})) {
        NodePtr na = a.node();
        attach(out, {na}, [na](detail::TensorNode& self) {
            if (!na->requires_grad) return;
            na->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                na->grad[i] += self.grad[i];
        });
    }
    return out;
}

Tensor4 sqrt_elem(const Tensor4& a) {
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) po[i] = std::sqrt(pa[i]);
    if (tracking({&a})) {
        NodePtr na = a.node(), no = out.node();
        attach(out, {na}, [na, no](detail::TensorNode& self) {
            if (!na->requires_grad) return;
            na->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const float y = no->data[i];
                if (y > 0.0f) na->grad[i] += self.grad[i] / (2.0f * y);
            }
        });
    }
    return out;
}

Tensor4 relu(const Tensor4& a) {
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) po[i] = pa[i] > 0.0f ? pa[i] : 0.0f;
    if (tracking({&a})) {
        NodePtr na = a.node();
        attach(out, {na}, [na](detail::TensorNode& self) {
            if (!na->requires_grad) return;
            na->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (na->data[i] > 0.0f) na->grad[i] += self.grad[i];
        });
    }
    return out;
}

Tensor4 sigmoid(const Tensor4& a) {
    Tensor4 out = Tensor4::zeros(a.shape());
    const std::int64_t m = a.numel();
    const float* pa = a.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i)
        po[i] = 1.0f / (1.0f + std::exp(-pa[i]));
    if (tracking({&a})) {
        NodePtr na = a.node(), no = out.node();
        attach(out, {na}, [na, no](detail::TensorNode& self) {
            if (!na->requires_grad) return;
            na->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const float y = no->data[i];
                na->grad[i] += self.grad[i] * y * (1.0f - y);
            }
        });
    }
    return out;
}

Tensor4 sum_all(const Tensor4& a) {
    Tensor4 out = Tensor4::zeros({1, 1, 1, 1});
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    out.data()[0] = float(acc);
    if (tracking({&a})) {
        NodePtr na = a.node();
        attach(out, {na}, [na](detail::TensorNode& self) {
            if (!na->requires_grad) return;
            na->ensure_grad();
            const float g = self.grad[0];
            for (size_t i = 0; i < na->grad.size(); ++i) na->grad[i] += g;
        });
    }
    return out;
}

Tensor4 mean_all(const Tensor4& a) {
    return scalar_mul(sum_all(a), 1.0f / float(a.numel()));
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

Tensor4 concat_channels(const Tensor4& a, const Tensor4& b) {
    const Shape4& sa = a.shape();
    const Shape4& sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
        throw DimensionError("concat_channels: shape mismatch " + sa.str() +
                             " vs " + sb.str());
    }
    Tensor4 out = Tensor4::zeros({sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::int64_t plane = std::int64_t(sa.h) * sa.w;
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    for (int n = 0; n < sa.n; ++n) {
        std::copy_n(pa + std::int64_t(n) * sa.c * plane, sa.c * plane,
                    po + std::int64_t(n) * (sa.c + sb.c) * plane);
        std::copy_n(pb + std::int64_t(n) * sb.c * plane, sb.c * plane,
                    po + std::int64_t(n) * (sa.c + sb.c) * plane +
                        sa.c * plane);
    }
    if (tracking({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        const int ca = sa.c, cb = sb.c;
        attach(out, {na, nb}, [na, nb, ca, cb, plane](detail::TensorNode& self) {
            const int nbatch = self.shape.n;
            if (na->requires_grad) {
                na->ensure_grad();
                for (int n = 0; n < nbatch; ++n) {
                    const float* g =
                        self.grad.data() + std::int64_t(n) * (ca + cb) * plane;
                    float* dst = na->grad.data() + std::int64_t(n) * ca * plane;
                    for (std::int64_t i = 0; i < ca * plane; ++i)
                        dst[i] += g[i];
                }
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
                for (int n = 0; n < nbatch; ++n) {
                    const float* g = self.grad.data() +
                                     std::int64_t(n) * (ca + cb) * plane +
                                     ca * plane;
                    float* dst = nb->grad.data() + std::int64_t(n) * cb * plane;
                    for (std::int64_t i = 0; i < cb * plane; ++i)
                        dst[i] += g[i];
                }
            }
        });
    }
    return out;
}

std::pair<Tensor4, Tensor4> split_channels(const Tensor4& t, int c_first) {
    const Shape4& s = t.shape();
    if (c_first <= 0 || c_first >= s.c) {
        throw ArgumentError("split_channels: split point " +
                            std::to_string(c_first) + " out of range for " +
                            s.str());
    }
    const int cb = s.c - c_first;
    Tensor4 a = Tensor4::zeros({s.n, c_first, s.h, s.w});
    Tensor4 b = Tensor4::zeros({s.n, cb, s.h, s.w});
    const std::int64_t plane = std::int64_t(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
        const float* src = t.data().data() + std::int64_t(n) * s.c * plane;
        std::copy_n(src, c_first * plane,
                    a.data().data() + std::int64_t(n) * c_first * plane);
        std::copy_n(src + c_first * plane, cb * plane,
                    b.data().data() + std::int64_t(n) * cb * plane);
    }
    if (tracking({&t})) {
        NodePtr nt = t.node();
        auto make_bwd = [nt, plane](int c_off, int c_len) {
            return [nt, plane, c_off, c_len](detail::TensorNode& self) {
                if (!nt->requires_grad) return;
                nt->ensure_grad();
                const int ct = nt->shape.c;
                for (int n = 0; n < self.shape.n; ++n) {
                    const float* g =
                        self.grad.data() + std::int64_t(n) * c_len * plane;
                    float* dst = nt->grad.data() +
                                 (std::int64_t(n) * ct + c_off) * plane;
                    for (std::int64_t i = 0; i < c_len * plane; ++i)
                        dst[i] += g[i];
                }
            };
        };
        attach(a, {nt}, make_bwd(0, c_first));
        attach(b, {nt}, make_bwd(c_first, cb));
    }
    return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// neural-net ops
// ---------------------------------------------------------------------------

Tensor4 conv2d(const Tensor4& input, const Tensor4& weight, const Tensor4& bias,
               int stride, int padding) {
    const Shape4& si = input.shape();
    const Shape4& sw = weight.shape();
    if (si.c != sw.c) {
        throw DimensionError("conv2d: input channels " + si.str() +
                             " do not match weight " + sw.str());
    }
    if (sw.h % 2 == 0 || sw.w % 2 == 0) {
        throw DimensionError("conv2d: kernel dims must be odd, got " +
                             sw.str());
    }
    if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
    if (padding < 0) throw ArgumentError("conv2d: padding must be >= 0");
    if (bias.defined() && bias.shape().c != sw.n) {
        throw DimensionError("conv2d: bias shape " + bias.shape().str() +
                             " does not match out channels of " + sw.str());
    }
    kernels::Conv2dDims d{si.n, si.c, si.h, si.w, sw.n,
                          sw.h, sw.w, stride, padding};
    if (d.hout() < 1 || d.wout() < 1) {
        throw DimensionError("conv2d: kernel " + sw.str() +
                             " larger than padded input " + si.str());
    }
    Tensor4 out = Tensor4::zeros({si.n, sw.n, d.hout(), d.wout()});
    kernels::conv2d_forward(input.data().data(), weight.data().data(),
                            bias.defined() ? bias.data().data() : nullptr,
                            out.data().data(), d);
    if (tracking({&input, &weight, &bias})) {
        NodePtr ni = input.node(), nw = weight.node();
        NodePtr nb = bias.defined() ? bias.node() : nullptr;
        std::vector<NodePtr> parents{ni, nw};
        if (nb) parents.push_back(nb);
        attach(out, std::move(parents), [ni, nw, nb, d](detail::TensorNode& self) {
            if (ni->requires_grad) {
                ni->ensure_grad();
                kernels::conv2d_backward_input(self.grad.data(),
                                               nw->data.data(),
                                               ni->grad.data(), d);
            }
            if (nw->requires_grad) {
                nw->ensure_grad();
                kernels::conv2d_backward_weight(ni->data.data(),
                                                self.grad.data(),
                                                nw->grad.data(), d);
            }
            if (nb && nb->requires_grad) {
                nb->ensure_grad();
                kernels::conv2d_backward_bias(self.grad.data(),
                                              nb->grad.data(), d);
            }
        });
    }
    return out;
}

Tensor4 conv_transpose2d(const Tensor4& input, const Tensor4& weight,
                         const Tensor4& bias, int stride) {
    if (stride < 1)
        throw ArgumentError("conv_transpose2d: stride must be >= 1, got " +
                            std::to_string(stride));
    const Shape4& si = input.shape();
    const Shape4& sw = weight.shape();
    if (si.c != sw.n) {
        throw DimensionError("conv_transpose2d: input channels " + si.str() +
                             " do not match weight " + sw.str());
    }
    if (bias.defined() && bias.shape().c != sw.c) {
        throw DimensionError("conv_transpose2d: bias shape " +
                             bias.shape().str() +
                             " does not match out channels of " + sw.str());
    }
    kernels::ConvT2dDims d{si.n, si.c, si.h, si.w, sw.c, sw.h, sw.w, stride};
    Tensor4 out = Tensor4::zeros({si.n, sw.c, d.hout(), d.wout()});
    kernels::conv_transpose2d_forward(
        input.data().data(), weight.data().data(),
        bias.defined() ? bias.data().data() : nullptr, out.data().data(), d);
    if (tracking({&input, &weight, &bias})) {
        NodePtr ni = input.node(), nw = weight.node();
        NodePtr nb = bias.defined() ? bias.node() : nullptr;
        std::vector<NodePtr> parents{ni, nw};
        if (nb) parents.push_back(nb);
        attach(out, std::move(parents), [ni, nw, nb, d](detail::TensorNode& self) {
            if (ni->requires_grad) {
                ni->ensure_grad();
                kernels::conv_transpose2d_backward_input(self.grad.data(),
                                                         nw->data.data(),
                                                         ni->grad.data(), d);
            }
            if (nw->requires_grad) {
                nw->ensure_grad();
                kernels::conv_transpose2d_backward_weight(ni->data.data(),
                                                          self.grad.data(),
                                                          nw->grad.data(), d);
            }
            if (nb && nb->requires_grad) {
                nb->ensure_grad();
                kernels::conv_transpose2d_backward_bias(self.grad.data(),
                                                        nb->grad.data(), d);
            }
        });
    }
    return out;
}

Tensor4 maxpool2d(const Tensor4& input, int size) {
    const Shape4& s = input.shape();
    if (size < 1) throw ArgumentError("maxpool2d: size must be >= 1");
    if (s.h % size != 0 || s.w % size != 0) {
        throw DimensionError("maxpool2d: input " + s.str() +
                             " not divisible by window " +
                             std::to_string(size));
    }
    kernels::Pool2dDims d{s.n, s.c, s.h, s.w, size};
    Tensor4 out = Tensor4::zeros({s.n, s.c, d.hout(), d.wout()});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        size_t(out.numel()), std::int64_t(-1));
    kernels::maxpool2d_forward(input.data().data(), out.data().data(),
                               argmax->data(), d);
    if (tracking({&input})) {
        NodePtr ni = input.node();
        attach(out, {ni}, [ni, argmax](detail::TensorNode& self) {
            if (!ni->requires_grad) return;
            ni->ensure_grad();
            kernels::maxpool2d_backward(self.grad.data(), argmax->data(),
                                        ni->grad.data(),
                                        std::int64_t(self.grad.size()));
        });
    }
    return out;
}

Tensor4 batchnorm2d(const Tensor4& input, const Tensor4& gamma,
                    const Tensor4& beta, BatchNormState& state,
                    bool training) {
    const Shape4& s = input.shape();
    if (gamma.shape().c != s.c || beta.shape().c != s.c) {
        throw DimensionError("batchnorm2d: gamma " + gamma.shape().str() +
                             " / beta " + beta.shape().str() +
                             " do not match input " + s.str());
    }
    if (int(state.running_mean.size()) != s.c) {
        throw DimensionError("batchnorm2d: state has " +
                             std::to_string(state.running_mean.size()) +
                             " channels, input " + s.str());
    }
    kernels::BatchNormDims d{s.n, s.c, s.h, s.w};
    Tensor4 out = Tensor4::zeros(s);
    if (training) {
        auto save_mean = std::make_shared<std::vector<float>>(s.c, 0.0f);
        auto save_inv_std = std::make_shared<std::vector<float>>(s.c, 0.0f);
        kernels::batchnorm2d_forward_train(
            input.data().data(), gamma.data().data(), beta.data().data(),
            out.data().data(), save_mean->data(), save_inv_std->data(),
            state.running_mean.data(), state.running_var.data(),
            state.momentum, state.eps, d);
        if (tracking({&input, &gamma, &beta})) {
            NodePtr ni = input.node(), ng = gamma.node(), nb = beta.node();
            attach(out, {ni, ng, nb},
                   [ni, ng, nb, save_mean, save_inv_std,
                    d](detail::TensorNode& self) {
                       // gamma/beta grads fall out of the same sweep, so
                       // run it whenever anything needs a gradient
                       std::vector<float> scratch_gin;
                       float* gin = nullptr;
                       if (ni->requires_grad) {
                           ni->ensure_grad();
                           gin = ni->grad.data();
                       } else {
                           scratch_gin.assign(ni->data.size(), 0.0f);
                           gin = scratch_gin.data();
                       }
                       std::vector<float> scratch_gg, scratch_gb;
                       float* gg = nullptr;
                       float* gb = nullptr;
                       if (ng->requires_grad) {
                           ng->ensure_grad();
                           gg = ng->grad.data();
                       } else {
                           scratch_gg.assign(ng->data.size(), 0.0f);
                           gg = scratch_gg.data();
                       }
                       if (nb->requires_grad) {
                           nb->ensure_grad();
                           gb = nb->grad.data();
                       } else {
                           scratch_gb.assign(nb->data.size(), 0.0f);
                           gb = scratch_gb.data();
                       }
                       kernels::batchnorm2d_backward_train(
                           ni->data.data(), self.grad.data(), ng->data.data(),
                           save_mean->data(), save_inv_std->data(), gin, gg,
                           gb, d);
                   });
        }
    } else {
        kernels::batchnorm2d_forward_eval(
            input.data().data(), gamma.data().data(), beta.data().data(),
            state.running_mean.data(), state.running_var.data(),
            out.data().data(), state.eps, d);
        if (tracking({&input, &gamma, &beta})) {
            NodePtr ni = input.node(), ng = gamma.node(), nb = beta.node();
            auto rm = std::make_shared<std::vector<float>>(state.running_mean);
            auto rv = std::make_shared<std::vector<float>>(state.running_var);
            const float eps = state.eps;
            attach(out, {ni, ng, nb},
                   [ni, ng, nb, rm, rv, eps, d](detail::TensorNode& self) {
                       std::vector<float> scratch_gin, scratch_gg, scratch_gb;
                       float* gin = nullptr;
                       float* gg = nullptr;
                       float* gb = nullptr;
                       if (ni->requires_grad) {
                           ni->ensure_grad();
                           gin = ni->grad.data();
                       } else {
                           scratch_gin.assign(ni->data.size(), 0.0f);
                           gin = scratch_gin.data();
                       }
                       if (ng->requires_grad) {
                           ng->ensure_grad();
                           gg = ng->grad.data();
                       } else {
                           scratch_gg.assign(ng->data.size(), 0.0f);
                           gg = scratch_gg.data();
                       }
                       if (nb->requires_grad) {
                           nb->ensure_grad();
                           gb = nb->grad.data();
                       } else {
                           scratch_gb.assign(nb->data.size(), 0.0f);
                           gb = scratch_gb.data();
                       }
                       kernels::batchnorm2d_backward_eval(
                           ni->data.data(), self.grad.data(), ng->data.data(),
                           rm->data(), rv->data(), gin, gg, gb, eps, d);
                   });
        }
    }
    return out;
}

Tensor4 dropout(const Tensor4& input, float rate, std::mt19937_64& rng,
                bool training) {
    if (rate < 0.0f || rate >= 1.0f)
        throw ArgumentError("dropout: rate must be in [0,1), got " +
                            std::to_string(rate));
    if (!training || rate == 0.0f) {
        // pass-through that keeps the graph connected
        return scalar_mul(input, 1.0f);
    }
    const float keep = 1.0f - rate;
    auto mask = std::make_shared<std::vector<float>>(size_t(input.numel()));
    for (float& m : *mask) {
        m = uniform_float(rng, 0.0f, 1.0f) < keep ? 1.0f / keep : 0.0f;
    }
    Tensor4 out = Tensor4::zeros(input.shape());
    const float* pi = input.data().data();
    float* po = out.data().data();
    for (std::int64_t i = 0, m = input.numel(); i < m; ++i)
        po[i] = pi[i] * (*mask)[size_t(i)];
    if (tracking({&input})) {
        NodePtr ni = input.node();
        attach(out, {ni}, [ni, mask](detail::TensorNode& self) {
            if (!ni->requires_grad) return;
            ni->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                ni->grad[i] += self.grad[i] * (*mask)[i];
        });
    }
    return out;
}

Tensor4 rms_contrast_batch(const Tensor4& input) {
    const Shape4& s = input.shape();
    const std::int64_t m = std::int64_t(s.c) * s.h * s.w;
    Tensor4 out = Tensor4::zeros({s.n, 1, 1, 1});
    auto means = std::make_shared<std::vector<float>>(s.n, 0.0f);
    for (int n = 0; n < s.n; ++n) {
        const float* p = input.data().data() + std::int64_t(n) * m;
        double sum = 0.0;
        for (std::int64_t i = 0; i < m; ++i) sum += p[i];
        const double mean = sum / double(m);
        double var = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
            const double dlt = p[i] - mean;
            var += dlt * dlt;
        }
        (*means)[n] = float(mean);
        out.data()[n] = float(std::sqrt(var / double(m)));
    }
    if (tracking({&input})) {
        NodePtr ni = input.node(), no = out.node();
        attach(out, {ni}, [ni, no, means, m](detail::TensorNode& self) {
            if (!ni->requires_grad) return;
            ni->ensure_grad();
            for (int n = 0; n < self.shape.n; ++n) {
                const float h = no->data[n];
                if (h <= 0.0f) continue;  // constant image: subgradient 0
                const float g = self.grad[n];
                const float mean = (*means)[n];
                const float* p = ni->data.data() + std::int64_t(n) * m;
                float* q = ni->grad.data() + std::int64_t(n) * m;
                const float scale = g / (float(m) * h);
                for (std::int64_t i = 0; i < m; ++i)
                    q[i] += scale * (p[i] - mean);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(const std::vector<Parameter*>& params, AdamState& state) {
    if (state.slots.empty()) {
        state.slots.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            const size_t n = params[i]->value.data().size();
            state.slots[i].m.assign(n, 0.0f);
            state.slots[i].v.assign(n, 0.0f);
        }
    }
    if (state.slots.size() != params.size()) {
        throw DimensionError("adam_step: state has " +
                             std::to_string(state.slots.size()) +
                             " slots for " + std::to_string(params.size()) +
                             " parameters");
    }
    state.t += 1;
    const float bc1 = 1.0f - std::pow(state.beta1, float(state.t));
    const float bc2 = 1.0f - std::pow(state.beta2, float(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        AdamState::Slot& slot = state.slots[i];
        if (slot.m.size() != p.value.data().size()) {
            throw DimensionError("adam_step: slot " + std::to_string(i) +
                                 " size " + std::to_string(slot.m.size()) +
                                 " does not match parameter " + p.name +
                                 " of size " +
                                 std::to_string(p.value.data().size()));
        }
        if (!p.value.has_grad()) continue;  // unused by the loss this step
        const std::span<const float> g = p.value.grad();
        std::span<float> w = p.value.data();
        for (size_t j = 0; j < w.size(); ++j) {
            slot.m[j] = state.beta1 * slot.m[j] + (1.0f - state.beta1) * g[j];
            slot.v[j] =
                state.beta2 * slot.v[j] + (1.0f - state.beta2) * g[j] * g[j];
            const float mhat = slot.m[j] / bc1;
            const float vhat = slot.v[j] / bc2;
            w[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

float uniform_float(std::mt19937_64& rng, float lo, float hi) {
    // 24 high bits -> [0,1) with exact float spacing, identical on every
    // platform (std::uniform_real_distribution is not portable)
    const float u = float(rng() >> 40) * (1.0f / 16777216.0f);
    return lo + (hi - lo) * u;
}

}  // namespace malscan

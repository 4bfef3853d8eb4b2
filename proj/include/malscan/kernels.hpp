#pragma once

#include <cstdint>

// Raw dense kernels behind the tensor ops. Every kernel exists twice: the
// OpenMP-parallel version used in production (this namespace) and a plain
// serial version under kernels::ref kept as the reference implementation for
// tests and the kernel benchmark. Parallel loops always partition output
// elements, so results are bitwise identical for any thread count.
//
// Layout convention: NCHW, row-major within (h, w).
// Forward kernels overwrite `out`; backward kernels accumulate (+=) into the
// gradient buffers.

namespace malscan::kernels {

struct Conv2dDims {
    int n;
    int cin;
    int hin;
    int win;
    int cout;
    int kh;
    int kw;
    int stride;
    int pad;

    int hout() const { return (hin + 2 * pad - kh) / stride + 1; }
    int wout() const { return (win + 2 * pad - kw) / stride + 1; }
};

// weight layout (cout, cin, kh, kw); bias may be null.
void conv2d_forward(const float* in, const float* weight, const float* bias,
                    float* out, const Conv2dDims& d);
void conv2d_backward_input(const float* gout, const float* weight, float* gin,
                           const Conv2dDims& d);
void conv2d_backward_weight(const float* in, const float* gout, float* gweight,
                            const Conv2dDims& d);
void conv2d_backward_bias(const float* gout, float* gbias, const Conv2dDims& d);

struct ConvT2dDims {
    int n;
    int cin;
    int hin;
    int win;
    int cout;
    int kh;
    int kw;
    int stride;

    int hout() const { return (hin - 1) * stride + kh; }
    int wout() const { return (win - 1) * stride + kw; }
};

// weight layout (cin, cout, kh, kw); bias may be null.
void conv_transpose2d_forward(const float* in, const float* weight,
                              const float* bias, float* out,
                              const ConvT2dDims& d);
void conv_transpose2d_backward_input(const float* gout, const float* weight,
                                     float* gin, const ConvT2dDims& d);
void conv_transpose2d_backward_weight(const float* in, const float* gout,
                                      float* gweight, const ConvT2dDims& d);
void conv_transpose2d_backward_bias(const float* gout, float* gbias,
                                    const ConvT2dDims& d);

struct Pool2dDims {
    int n;
    int c;
    int hin;
    int win;
    int size;

    int hout() const { return hin / size; }
    int wout() const { return win / size; }
};

// argmax records, per output cell, the flat input index of the winning pixel
// (first in row-major order on ties).
void maxpool2d_forward(const float* in, float* out, std::int64_t* argmax,
                       const Pool2dDims& d);
void maxpool2d_backward(const float* gout, const std::int64_t* argmax,
                        float* gin, std::int64_t out_count);

struct BatchNormDims {
    int n;
    int c;
    int h;
    int w;
};

// Train-mode forward: per-channel batch mean/var (biased, denominator n*h*w),
// y = gamma * (x - mean) / sqrt(var + eps) + beta. Saves mean and inv_std for
// the backward pass and updates running stats in place.
void batchnorm2d_forward_train(const float* in, const float* gamma,
                               const float* beta, float* out,
                               float* save_mean, float* save_inv_std,
                               float* running_mean, float* running_var,
                               float momentum, float eps,
                               const BatchNormDims& d);
void batchnorm2d_forward_eval(const float* in, const float* gamma,
                              const float* beta, const float* running_mean,
                              const float* running_var, float* out, float eps,
                              const BatchNormDims& d);
void batchnorm2d_backward_train(const float* in, const float* gout,
                                const float* gamma, const float* save_mean,
                                const float* save_inv_std, float* gin,
                                float* ggamma, float* gbeta,
                                const BatchNormDims& d);
void batchnorm2d_backward_eval(const float* in, const float* gout,
                               const float* gamma, const float* running_mean,
                               const float* running_var, float* gin,
                               float* ggamma, float* gbeta, float eps,
                               const BatchNormDims& d);

// Serial reference implementations, same contracts as above.
namespace ref {

void conv2d_forward(const float* in, const float* weight, const float* bias,
                    float* out, const Conv2dDims& d);
void conv2d_backward_input(const float* gout, const float* weight, float* gin,
                           const Conv2dDims& d);
void conv2d_backward_weight(const float* in, const float* gout, float* gweight,
                            const Conv2dDims& d);
void conv2d_backward_bias(const float* gout, float* gbias, const Conv2dDims& d);

void conv_transpose2d_forward(const float* in, const float* weight,
                              const float* bias, float* out,
                              const ConvT2dDims& d);

void maxpool2d_forward(const float* in, float* out, std::int64_t* argmax,
                       const Pool2dDims& d);

void batchnorm2d_forward_train(const float* in, const float* gamma,
                               const float* beta, float* out,
                               float* save_mean, float* save_inv_std,
                               float* running_mean, float* running_var,
                               float momentum, float eps,
                               const BatchNormDims& d);

}  // namespace ref

}  // namespace malscan::kernels

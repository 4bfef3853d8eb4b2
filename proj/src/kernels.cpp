#include "malscan/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace malscan::kernels {

namespace {

inline std::int64_t idx4(int i0, int i1, int i2, int i3, int d1, int d2,
                         int d3) {
    return ((std::int64_t(i0) * d1 + i1) * d2 + i2) * d3 + i3;
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

void conv2d_forward(const float* in, const float* weight, const float* bias,
                    float* out, const Conv2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int oc = 0; oc < d.cout; ++oc) {
            const float b = bias ? bias[oc] : 0.0f;
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    float acc = b;
                    for (int ic = 0; ic < d.cin; ++ic) {
                        for (int ky = 0; ky < d.kh; ++ky) {
                            const int iy = oh * d.stride + ky - d.pad;
                            if (iy < 0 || iy >= d.hin) continue;
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int ix = ow * d.stride + kx - d.pad;
                                if (ix < 0 || ix >= d.win) continue;
                                acc += in[idx4(n, ic, iy, ix, d.cin, d.hin,
                                               d.win)] *
                                       weight[idx4(oc, ic, ky, kx, d.cin, d.kh,
                                                   d.kw)];
                            }
                        }
                    }
                    out[idx4(n, oc, oh, ow, d.cout, ho, wo)] = acc;
                }
            }
        }
    }
}

void conv2d_backward_input(const float* gout, const float* weight, float* gin,
                           const Conv2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int ic = 0; ic < d.cin; ++ic) {
            for (int iy = 0; iy < d.hin; ++iy) {
                for (int ix = 0; ix < d.win; ++ix) {
                    float acc = 0.0f;
                    for (int oc = 0; oc < d.cout; ++oc) {
                        for (int ky = 0; ky < d.kh; ++ky) {
                            const int num_y = iy + d.pad - ky;
                            if (num_y < 0 || num_y % d.stride != 0) continue;
                            const int oh = num_y / d.stride;
                            if (oh >= ho) continue;
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int num_x = ix + d.pad - kx;
                                if (num_x < 0 || num_x % d.stride != 0)
                                    continue;
                                const int ow = num_x / d.stride;
                                if (ow >= wo) continue;
                                acc += gout[idx4(n, oc, oh, ow, d.cout, ho,
                                                 wo)] *
                                       weight[idx4(oc, ic, ky, kx, d.cin, d.kh,
                                                   d.kw)];
                            }
                        }
                    }
                    gin[idx4(n, ic, iy, ix, d.cin, d.hin, d.win)] += acc;
                }
            }
        }
    }
}

void conv2d_backward_weight(const float* in, const float* gout, float* gweight,
                            const Conv2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for collapse(2) schedule(static)
    for (int oc = 0; oc < d.cout; ++oc) {
        for (int ic = 0; ic < d.cin; ++ic) {
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    float acc = 0.0f;
                    for (int n = 0; n < d.n; ++n) {
                        for (int oh = 0; oh < ho; ++oh) {
                            const int iy = oh * d.stride + ky - d.pad;
                            if (iy < 0 || iy >= d.hin) continue;
                            for (int ow = 0; ow < wo; ++ow) {
                                const int ix = ow * d.stride + kx - d.pad;
                                if (ix < 0 || ix >= d.win) continue;
                                acc += in[idx4(n, ic, iy, ix, d.cin, d.hin,
                                               d.win)] *
                                       gout[idx4(n, oc, oh, ow, d.cout, ho,
                                                 wo)];
                            }
                        }
                    }
                    gweight[idx4(oc, ic, ky, kx, d.cin, d.kh, d.kw)] += acc;
                }
            }
        }
    }
}

void conv2d_backward_bias(const float* gout, float* gbias,
                          const Conv2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < d.cout; ++oc) {
        float acc = 0.0f;
        for (int n = 0; n < d.n; ++n) {
            const float* p = gout + idx4(n, oc, 0, 0, d.cout, ho, wo);
            for (int i = 0; i < ho * wo; ++i) acc += p[i];
        }
        gbias[oc] += acc;
    }
}

// ---------------------------------------------------------------------------
// conv_transpose2d
// ---------------------------------------------------------------------------

void conv_transpose2d_forward(const float* in, const float* weight,
                              const float* bias, float* out,
                              const ConvT2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int oc = 0; oc < d.cout; ++oc) {
            const float b = bias ? bias[oc] : 0.0f;
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    float acc = b;
                    // gather form: output pixel (oh,ow) receives from input
                    // pixels (iy,ix) with oh = iy*stride + ky.
                    for (int ic = 0; ic < d.cin; ++ic) {
                        for (int ky = 0; ky < d.kh; ++ky) {
                            const int num_y = oh - ky;
                            if (num_y < 0 || num_y % d.stride != 0) continue;
                            const int iy = num_y / d.stride;
                            if (iy >= d.hin) continue;
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int num_x = ow - kx;
                                if (num_x < 0 || num_x % d.stride != 0)
                                    continue;
                                const int ix = num_x / d.stride;
                                if (ix >= d.win) continue;
                                acc += in[idx4(n, ic, iy, ix, d.cin, d.hin,
                                               d.win)] *
                                       weight[idx4(ic, oc, ky, kx, d.cout,
                                                   d.kh, d.kw)];
                            }
                        }
                    }
                    out[idx4(n, oc, oh, ow, d.cout, ho, wo)] = acc;
                }
            }
        }
    }
}

void conv_transpose2d_backward_input(const float* gout, const float* weight,
                                     float* gin, const ConvT2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int ic = 0; ic < d.cin; ++ic) {
            for (int iy = 0; iy < d.hin; ++iy) {
                for (int ix = 0; ix < d.win; ++ix) {
                    float acc = 0.0f;
                    for (int oc = 0; oc < d.cout; ++oc) {
                        for (int ky = 0; ky < d.kh; ++ky) {
                            const int oh = iy * d.stride + ky;
                            if (oh >= ho) continue;
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int ow = ix * d.stride + kx;
                                if (ow >= wo) continue;
                                acc += gout[idx4(n, oc, oh, ow, d.cout, ho,
                                                 wo)] *
                                       weight[idx4(ic, oc, ky, kx, d.cout,
                                                   d.kh, d.kw)];
                            }
                        }
                    }
                    gin[idx4(n, ic, iy, ix, d.cin, d.hin, d.win)] += acc;
                }
            }
        }
    }
}

void conv_transpose2d_backward_weight(const float* in, const float* gout,
                                      float* gweight, const ConvT2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for collapse(2) schedule(static)
    for (int ic = 0; ic < d.cin; ++ic) {
        for (int oc = 0; oc < d.cout; ++oc) {
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    float acc = 0.0f;
                    for (int n = 0; n < d.n; ++n) {
                        for (int iy = 0; iy < d.hin; ++iy) {
                            const int oh = iy * d.stride + ky;
                            if (oh >= ho) continue;
                            for (int ix = 0; ix < d.win; ++ix) {
                                const int ow = ix * d.stride + kx;
                                if (ow >= wo) continue;
                                acc += in[idx4(n, ic, iy, ix, d.cin, d.hin,
                                               d.win)] *
                                       gout[idx4(n, oc, oh, ow, d.cout, ho,
                                                 wo)];
                            }
                        }
                    }
                    gweight[idx4(ic, oc, ky, kx, d.cout, d.kh, d.kw)] += acc;
                }
            }
        }
    }
}

void conv_transpose2d_backward_bias(const float* gout, float* gbias,
                                    const ConvT2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < d.cout; ++oc) {
        float acc = 0.0f;
        for (int n = 0; n < d.n; ++n) {
            const float* p = gout + idx4(n, oc, 0, 0, d.cout, ho, wo);
            for (int i = 0; i < ho * wo; ++i) acc += p[i];
        }
        gbias[oc] += acc;
    }
}

// ---------------------------------------------------------------------------
// maxpool2d
// ---------------------------------------------------------------------------

void maxpool2d_forward(const float* in, float* out, std::int64_t* argmax,
                       const Pool2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int64_t best_idx = -1;
                    for (int py = 0; py < d.size; ++py) {
                        for (int px = 0; px < d.size; ++px) {
                            const std::int64_t i =
                                idx4(n, c, oh * d.size + py, ow * d.size + px,
                                     d.c, d.hin, d.win);
                            if (in[i] > best) {
                                best = in[i];
                                best_idx = i;
                            }
                        }
                    }
                    const std::int64_t o = idx4(n, c, oh, ow, d.c, ho, wo);
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
}

void maxpool2d_backward(const float* gout, const std::int64_t* argmax,
                        float* gin, std::int64_t out_count) {
    // scatter; argmax positions are unique per output cell, windows disjoint
    for (std::int64_t i = 0; i < out_count; ++i) {
        gin[argmax[i]] += gout[i];
    }
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

void batchnorm2d_forward_train(const float* in, const float* gamma,
                               const float* beta, float* out,
                               float* save_mean, float* save_inv_std,
                               float* running_mean, float* running_var,
                               float momentum, float eps,
                               const BatchNormDims& d) {
    const std::int64_t plane = std::int64_t(d.h) * d.w;
    const std::int64_t m = std::int64_t(d.n) * plane;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < d.c; ++c) {
        double sum = 0.0;
        for (int n = 0; n < d.n; ++n) {
            const float* p = in + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) sum += p[i];
        }
        const double mean = sum / double(m);
        double var_sum = 0.0;
        for (int n = 0; n < d.n; ++n) {
            const float* p = in + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const double dlt = p[i] - mean;
                var_sum += dlt * dlt;
            }
        }
        const double var = var_sum / double(m);
        const float inv_std = float(1.0 / std::sqrt(var + double(eps)));
        save_mean[c] = float(mean);
        save_inv_std[c] = inv_std;
        running_mean[c] =
            (1.0f - momentum) * running_mean[c] + momentum * float(mean);
        running_var[c] =
            (1.0f - momentum) * running_var[c] + momentum * float(var);
        const float g = gamma[c];
        const float b = beta[c];
        for (int n = 0; n < d.n; ++n) {
            const float* p = in + (std::int64_t(n) * d.c + c) * plane;
            float* q = out + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                q[i] = g * (p[i] - float(mean)) * inv_std + b;
            }
        }
    }
}

void batchnorm2d_forward_eval(const float* in, const float* gamma,
                              const float* beta, const float* running_mean,
                              const float* running_var, float* out, float eps,
                              const BatchNormDims& d) {
    const std::int64_t plane = std::int64_t(d.h) * d.w;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < d.c; ++c) {
        const float inv_std = 1.0f / std::sqrt(running_var[c] + eps);
        const float g = gamma[c];
        const float b = beta[c];
        const float mean = running_mean[c];
        for (int n = 0; n < d.n; ++n) {
            const float* p = in + (std::int64_t(n) * d.c + c) * plane;
            float* q = out + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                q[i] = g * (p[i] - mean) * inv_std + b;
            }
        }
    }
}

void batchnorm2d_backward_train(const float* in, const float* gout,
                                const float* gamma, const float* save_mean,
                                const float* save_inv_std, float* gin,
                                float* ggamma, float* gbeta,
                                const BatchNormDims& d) {
    const std::int64_t plane = std::int64_t(d.h) * d.w;
    const std::int64_t m = std::int64_t(d.n) * plane;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < d.c; ++c) {
        const float mean = save_mean[c];
        const float inv_std = save_inv_std[c];
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (int n = 0; n < d.n; ++n) {
            const float* px = in + (std::int64_t(n) * d.c + c) * plane;
            const float* pg = gout + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const double xhat = (px[i] - mean) * inv_std;
                sum_dy += pg[i];
                sum_dy_xhat += pg[i] * xhat;
            }
        }
        ggamma[c] += float(sum_dy_xhat);
        gbeta[c] += float(sum_dy);
        const double mean_dy = sum_dy / double(m);
        const double mean_dy_xhat = sum_dy_xhat / double(m);
        const float g = gamma[c];
        for (int n = 0; n < d.n; ++n) {
            const float* px = in + (std::int64_t(n) * d.c + c) * plane;
            const float* pg = gout + (std::int64_t(n) * d.c + c) * plane;
            float* pq = gin + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const double xhat = (px[i] - mean) * inv_std;
                pq[i] += float(double(g) * double(inv_std) *
                               (pg[i] - mean_dy - xhat * mean_dy_xhat));
            }
        }
    }
}

void batchnorm2d_backward_eval(const float* in, const float* gout,
                               const float* gamma, const float* running_mean,
                               const float* running_var, float* gin,
                               float* ggamma, float* gbeta, float eps,
                               const BatchNormDims& d) {
    const std::int64_t plane = std::int64_t(d.h) * d.w;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < d.c; ++c) {
        const float inv_std = 1.0f / std::sqrt(running_var[c] + eps);
        const float mean = running_mean[c];
        const float g = gamma[c];
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (int n = 0; n < d.n; ++n) {
            const float* px = in + (std::int64_t(n) * d.c + c) * plane;
            const float* pg = gout + (std::int64_t(n) * d.c + c) * plane;
            float* pq = gin + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const double xhat = (px[i] - mean) * inv_std;
                sum_dy += pg[i];
                sum_dy_xhat += pg[i] * xhat;
                pq[i] += g * inv_std * pg[i];
            }
        }
        ggamma[c] += float(sum_dy_xhat);
        gbeta[c] += float(sum_dy);
    }
}

// ---------------------------------------------------------------------------
// serial reference implementations
// ---------------------------------------------------------------------------

namespace ref {

void conv2d_forward(const float* in, const float* weight, const float* bias,
                    float* out, const Conv2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
    for (int n = 0; n < d.n; ++n)
        for (int oc = 0; oc < d.cout; ++oc)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    float acc = bias ? bias[oc] : 0.0f;
                    for (int ic = 0; ic < d.cin; ++ic)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int iy = oh * d.stride + ky - d.pad;
                                const int ix = ow * d.stride + kx - d.pad;
                                if (iy < 0 || iy >= d.hin || ix < 0 ||
                                    ix >= d.win)
                                    continue;
                                acc += in[idx4(n, ic, iy, ix, d.cin, d.hin,
                                               d.win)] *
                                       weight[idx4(oc, ic, ky, kx, d.cin, d.kh,
                                                   d.kw)];
                            }
                    out[idx4(n, oc, oh, ow, d.cout, ho, wo)] = acc;
                }
}

void conv2d_backward_input(const float* gout, const float* weight, float* gin,
                           const Conv2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
    for (int n = 0; n < d.n; ++n)
        for (int oc = 0; oc < d.cout; ++oc)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    const float g =
                        gout[idx4(n, oc, oh, ow, d.cout, ho, wo)];
                    for (int ic = 0; ic < d.cin; ++ic)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int iy = oh * d.stride + ky - d.pad;
                                const int ix = ow * d.stride + kx - d.pad;
                                if (iy < 0 || iy >= d.hin || ix < 0 ||
                                    ix >= d.win)
                                    continue;
                                gin[idx4(n, ic, iy, ix, d.cin, d.hin, d.win)] +=
                                    g * weight[idx4(oc, ic, ky, kx, d.cin,
                                                    d.kh, d.kw)];
                            }
                }
}

void conv2d_backward_weight(const float* in, const float* gout, float* gweight,
                            const Conv2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
    for (int n = 0; n < d.n; ++n)
        for (int oc = 0; oc < d.cout; ++oc)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    const float g =
                        gout[idx4(n, oc, oh, ow, d.cout, ho, wo)];
                    for (int ic = 0; ic < d.cin; ++ic)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int iy = oh * d.stride + ky - d.pad;
                                const int ix = ow * d.stride + kx - d.pad;
                                if (iy < 0 || iy >= d.hin || ix < 0 ||
                                    ix >= d.win)
                                    continue;
                                gweight[idx4(oc, ic, ky, kx, d.cin, d.kh,
                                             d.kw)] +=
                                    g * in[idx4(n, ic, iy, ix, d.cin, d.hin,
                                                d.win)];
                            }
                }
}

void conv2d_backward_bias(const float* gout, float* gbias,
                          const Conv2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
    for (int n = 0; n < d.n; ++n)
        for (int oc = 0; oc < d.cout; ++oc)
            for (int i = 0; i < ho * wo; ++i)
                gbias[oc] += gout[idx4(n, oc, 0, 0, d.cout, ho, wo) + i];
}

void conv_transpose2d_forward(const float* in, const float* weight,
                              const float* bias, float* out,
                              const ConvT2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
    // scatter form, opposite loop structure of the parallel gather kernel
    for (std::int64_t i = 0, e = std::int64_t(d.n) * d.cout * ho * wo; i < e;
         ++i)
        out[i] = 0.0f;
    for (int n = 0; n < d.n; ++n)
        for (int ic = 0; ic < d.cin; ++ic)
            for (int iy = 0; iy < d.hin; ++iy)
                for (int ix = 0; ix < d.win; ++ix) {
                    const float v =
                        in[idx4(n, ic, iy, ix, d.cin, d.hin, d.win)];
                    for (int oc = 0; oc < d.cout; ++oc)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx)
                                out[idx4(n, oc, iy * d.stride + ky,
                                         ix * d.stride + kx, d.cout, ho, wo)] +=
                                    v * weight[idx4(ic, oc, ky, kx, d.cout,
                                                    d.kh, d.kw)];
                }
    if (bias) {
        for (int n = 0; n < d.n; ++n)
            for (int oc = 0; oc < d.cout; ++oc)
                for (int i = 0; i < ho * wo; ++i)
                    out[idx4(n, oc, 0, 0, d.cout, ho, wo) + i] += bias[oc];
    }
}

void maxpool2d_forward(const float* in, float* out, std::int64_t* argmax,
                       const Pool2dDims& d) {
    const int ho = d.hout();
    const int wo = d.wout();
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int64_t best_idx = -1;
                    for (int py = 0; py < d.size; ++py)
                        for (int px = 0; px < d.size; ++px) {
                            const std::int64_t i =
                                idx4(n, c, oh * d.size + py, ow * d.size + px,
                                     d.c, d.hin, d.win);
                            if (in[i] > best) {
                                best = in[i];
                                best_idx = i;
                            }
                        }
                    const std::int64_t o = idx4(n, c, oh, ow, d.c, ho, wo);
                    out[o] = best;
                    argmax[o] = best_idx;
                }
}

void batchnorm2d_forward_train(const float* in, const float* gamma,
                               const float* beta, float* out,
                               float* save_mean, float* save_inv_std,
                               float* running_mean, float* running_var,
                               float momentum, float eps,
                               const BatchNormDims& d) {
    const std::int64_t plane = std::int64_t(d.h) * d.w;
    const std::int64_t m = std::int64_t(d.n) * plane;
    for (int c = 0; c < d.c; ++c) {
        double sum = 0.0;
        for (int n = 0; n < d.n; ++n) {
            const float* p = in + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) sum += p[i];
        }
        const double mean = sum / double(m);
        double var_sum = 0.0;
        for (int n = 0; n < d.n; ++n) {
            const float* p = in + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const double dlt = p[i] - mean;
                var_sum += dlt * dlt;
            }
        }
        const double var = var_sum / double(m);
        const float inv_std = float(1.0 / std::sqrt(var + double(eps)));
        save_mean[c] = float(mean);
        save_inv_std[c] = inv_std;
        running_mean[c] =
            (1.0f - momentum) * running_mean[c] + momentum * float(mean);
        running_var[c] =
            (1.0f - momentum) * running_var[c] + momentum * float(var);
        for (int n = 0; n < d.n; ++n) {
            const float* p = in + (std::int64_t(n) * d.c + c) * plane;
            float* q = out + (std::int64_t(n) * d.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i)
                q[i] = gamma[c] * (p[i] - float(mean)) * inv_std + beta[c];
        }
    }
}

}  // namespace ref

}  // namespace malscan::kernels

#include "sfl/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sfl {
namespace {

struct ConvGeometry {
    std::size_t n, c, h, w, k, kh, kw, ho, wo;
    int stride, pad;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, int stride, int pad) {
    if (input.rank() != 4) throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
    if (kernel.rank() != 4) throw std::invalid_argument("conv2d: kernel must be [K,C,kh,kw], got " + shape_str(kernel.shape()));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
    ConvGeometry g{};
    g.n = input.dim(0);
    g.c = input.dim(1);
    g.h = input.dim(2);
    g.w = input.dim(3);
    g.k = kernel.dim(0);
    g.kh = kernel.dim(2);
    g.kw = kernel.dim(3);
    g.stride = stride;
    g.pad = pad;
    if (kernel.dim(1) != g.c)
        throw std::invalid_argument("conv2d: kernel channels " + std::to_string(kernel.dim(1)) +
                                    " do not match input channels " + std::to_string(g.c));
    const std::size_t hp = g.h + 2 * static_cast<std::size_t>(pad);
    const std::size_t wp = g.w + 2 * static_cast<std::size_t>(pad);
    if (g.kh > hp || g.kw > wp)
        throw std::invalid_argument("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                                    shape_str(input.shape()));
    if ((hp - g.kh) % stride != 0 || (wp - g.kw) % stride != 0)
        throw std::invalid_argument("conv2d: output extent is not an integer for input " + shape_str(input.shape()) +
                                    ", kernel " + shape_str(kernel.shape()) + ", stride " + std::to_string(stride));
    g.ho = (hp - g.kh) / stride + 1;
    g.wo = (wp - g.kw) / stride + 1;
    return g;
}

// Copies one image [C,H,W] into a zero-padded [C,H+2p,W+2p] buffer.
void pad_image(const double* src, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, double* dst) {
    const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
    std::fill(dst, dst + c * hp * wp, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(src + (ch * h + y) * w, w, dst + (ch * hp + y + pad) * wp + pad);
}

constexpr std::size_t kConvKBlock = 4;
constexpr std::size_t kConvTile = 16;

// Computes KB output channels over wide positions [0, len). Each output keeps
// the sequential tap order of the reference loop nest; blocking only changes
// which outputs are in flight together.

// Four-lane double vector; the unaligned variant is for loads from arbitrary
// tap offsets. Only elementwise mul/add are used, so lanes stay independent.
typedef double v4d __attribute__((vector_size(32)));
typedef double v4d_u __attribute__((vector_size(32), aligned(8)));

template <std::size_t KB>
void conv_block(const double* padded, const double* weights, std::size_t taps, const std::size_t* tap_off,
                std::size_t len, double* acc) {
    constexpr std::size_t kVecs = kConvTile / 4;
    std::size_t i0 = 0;
    for (; i0 + kConvTile <= len; i0 += kConvTile) {
        v4d a[KB][kVecs] = {};
        for (std::size_t t = 0; t < taps; ++t) {
            const double* s = padded + tap_off[t] + i0;
            v4d src[kVecs];
            for (std::size_t j = 0; j < kVecs; ++j) src[j] = *reinterpret_cast<const v4d_u*>(s + 4 * j);
            for (std::size_t kb = 0; kb < KB; ++kb) {
                const double w = weights[kb * taps + t];
                for (std::size_t j = 0; j < kVecs; ++j) a[kb][j] += src[j] * w;
            }
        }
        for (std::size_t kb = 0; kb < KB; ++kb)
            for (std::size_t j = 0; j < kVecs; ++j) *reinterpret_cast<v4d_u*>(acc + kb * len + i0 + 4 * j) = a[kb][j];
    }
    for (; i0 < len; ++i0)
        for (std::size_t kb = 0; kb < KB; ++kb) {
            double a = 0.0;
            for (std::size_t t = 0; t < taps; ++t) a += padded[tap_off[t] + i0] * weights[kb * taps + t];
            acc[kb * len + i0] = a;
        }
}

Tensor conv2d_generic(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvGeometry& g) {
    Tensor out({g.n, g.k, g.ho, g.wo});
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t k = 0; k < g.k; ++k)
            for (std::size_t oy = 0; oy < g.ho; ++oy)
                for (std::size_t ox = 0; ox < g.wo; ++ox) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < g.c; ++c)
                        for (std::size_t ky = 0; ky < g.kh; ++ky) {
                            const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
                            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
                                if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                                acc += input(n, c, iy, ix) * kernel(k, c, ky, kx);
                            }
                        }
                    out(n, k, oy, ox) = acc + bias[k];
                }
    return out;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
    const ConvGeometry g = conv_geometry(input, kernel, stride, pad);
    if (bias.rank() != 1 || bias.dim(0) != g.k)
        throw std::invalid_argument("conv2d: bias must be [" + std::to_string(g.k) + "], got " + shape_str(bias.shape()));
    if (stride != 1) return conv2d_generic(input, kernel, bias, g);

    // Stride 1: accumulate on a "wide" grid whose row pitch equals the padded
    // input width, so every (c, ky, kx) tap reads a contiguous run of the
    // padded image. Columns beyond wo wrap into the next row and are
    // discarded. Padded zeros add +-0 to an accumulator that starts at +0,
    // which leaves its bits unchanged.
    const std::size_t p = static_cast<std::size_t>(pad);
    const std::size_t hp = g.h + 2 * p, wp = g.w + 2 * p;
    const std::size_t span_len = (g.ho - 1) * wp + g.wo;
    std::vector<double> padded(g.c * hp * wp);
    Tensor out({g.n, g.k, g.ho, g.wo});
    const std::size_t taps = g.c * g.kh * g.kw;
    std::vector<std::size_t> tap_off(taps);
    for (std::size_t c = 0, t = 0; c < g.c; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx, ++t) tap_off[t] = c * hp * wp + ky * wp + kx;
    std::vector<double> acc(kConvKBlock * span_len);
    for (std::size_t n = 0; n < g.n; ++n) {
        pad_image(input.raw() + n * g.c * g.h * g.w, g.c, g.h, g.w, p, padded.data());
        for (std::size_t k = 0; k < g.k;) {
            const std::size_t kb = g.k - k >= kConvKBlock ? kConvKBlock : 1;
            if (kb == kConvKBlock)
                conv_block<kConvKBlock>(padded.data(), kernel.raw() + k * taps, taps, tap_off.data(), span_len,
                                        acc.data());
            else
                conv_block<1>(padded.data(), kernel.raw() + k * taps, taps, tap_off.data(), span_len, acc.data());
            for (std::size_t j = 0; j < kb; ++j) {
                double* dst = out.raw() + (n * g.k + k + j) * g.ho * g.wo;
                const double* src = acc.data() + j * span_len;
                const double b = bias[k + j];
                for (std::size_t oy = 0; oy < g.ho; ++oy)
                    for (std::size_t ox = 0; ox < g.wo; ++ox) dst[oy * g.wo + ox] = src[oy * wp + ox] + b;
            }
            k += kb;
        }
    }
    return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream, int stride, int pad,
                          bool need_input_grad) {
    const ConvGeometry g = conv_geometry(input, kernel, stride, pad);
    const Shape out_shape{g.n, g.k, g.ho, g.wo};
    if (upstream.shape() != out_shape)
        throw std::invalid_argument("conv2d_backward: upstream shape " + shape_str(upstream.shape()) +
                                    " does not match output shape " + shape_str(out_shape));

    ConvGrads grads{Tensor(kernel.shape()), Tensor({g.k}), Tensor()};
    if (need_input_grad) grads.input = Tensor(input.shape());

    for (std::size_t k = 0; k < g.k; ++k) {
        double s = 0.0;
        for (std::size_t n = 0; n < g.n; ++n) {
            const double* up = upstream.raw() + (n * g.k + k) * g.ho * g.wo;
            for (std::size_t i = 0; i < g.ho * g.wo; ++i) s += up[i];
        }
        grads.bias[k] = s;
    }

    if (stride != 1) {
        for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t k = 0; k < g.k; ++k)
                for (std::size_t oy = 0; oy < g.ho; ++oy)
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const double up = upstream(n, k, oy, ox);
                        for (std::size_t c = 0; c < g.c; ++c)
                            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                                const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
                                if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                    const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
                                    if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                                    grads.kernel(k, c, ky, kx) += up * input(n, c, iy, ix);
                                    if (need_input_grad) grads.input(n, c, iy, ix) += up * kernel(k, c, ky, kx);
                                }
                            }
                    }
        return grads;
    }

    // Stride 1 mirrors the forward wide-grid layout: per image, unfold the
    // padded input into a [taps, len] matrix and the upstream gradient into
    // [K, len] (zeros in wrapped columns), then both gradients are GEMMs.
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const std::size_t p = static_cast<std::size_t>(pad);
    const std::size_t hp = g.h + 2 * p, wp = g.w + 2 * p;
    const std::size_t len = (g.ho - 1) * wp + g.wo;
    const std::size_t taps = g.c * g.kh * g.kw;
    const auto rows = static_cast<Eigen::Index>(taps);
    const auto cols = static_cast<Eigen::Index>(len);
    const auto outs = static_cast<Eigen::Index>(g.k);
    std::vector<double> padded(g.c * hp * wp);
    RowMat unfolded(rows, cols);
    RowMat up_wide = RowMat::Zero(outs, cols);
    RowMat unfolded_grad;
    Eigen::Map<RowMat> kernel_grad(grads.kernel.raw(), outs, rows);
    Eigen::Map<const RowMat> weights(kernel.raw(), outs, rows);
    std::vector<double> grad_padded(need_input_grad ? g.c * hp * wp : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
        pad_image(input.raw() + n * g.c * g.h * g.w, g.c, g.h, g.w, p, padded.data());
        for (std::size_t c = 0, t = 0; c < g.c; ++c)
            for (std::size_t ky = 0; ky < g.kh; ++ky)
                for (std::size_t kx = 0; kx < g.kw; ++kx, ++t)
                    std::copy_n(padded.data() + c * hp * wp + ky * wp + kx, len, unfolded.data() + t * len);
        for (std::size_t k = 0; k < g.k; ++k) {
            const double* up = upstream.raw() + (n * g.k + k) * g.ho * g.wo;
            for (std::size_t oy = 0; oy < g.ho; ++oy)
                std::copy_n(up + oy * g.wo, g.wo, up_wide.data() + k * len + oy * wp);
        }
        kernel_grad.noalias() += up_wide * unfolded.transpose();
        if (!need_input_grad) continue;
        unfolded_grad.noalias() = weights.transpose() * up_wide;
        std::fill(grad_padded.begin(), grad_padded.end(), 0.0);
        for (std::size_t c = 0, t = 0; c < g.c; ++c)
            for (std::size_t ky = 0; ky < g.kh; ++ky)
                for (std::size_t kx = 0; kx < g.kw; ++kx, ++t) {
                    double* dst = grad_padded.data() + c * hp * wp + ky * wp + kx;
                    const double* src = unfolded_grad.data() + t * len;
                    for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                }
        double* dst = grads.input.raw() + n * g.c * g.h * g.w;
        for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t y = 0; y < g.h; ++y)
                std::copy_n(grad_padded.data() + (c * hp + y + p) * wp + p, g.w, dst + (c * g.h + y) * g.w);
    }
    return grads;
}

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& x, const Tensor& upstream) {
    require_same_shape(x, upstream, "relu_backward");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? upstream[i] : 0.0;
    return out;
}

Tensor avg_pool2(const Tensor& x) {
    if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
        throw std::invalid_argument("avg_pool2: expected [N,C,H,W] with even H,W, got " + shape_str(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({x.dim(0), x.dim(1), h / 2, w / 2});
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const double* src = x.raw() + pl * h * w;
        double* dst = out.raw() + pl * (h / 2) * (w / 2);
        for (std::size_t y = 0; y < h / 2; ++y)
            for (std::size_t xx = 0; xx < w / 2; ++xx) {
                const double* a = src + (2 * y) * w + 2 * xx;
                dst[y * (w / 2) + xx] = (a[0] + a[1] + a[w] + a[w + 1]) * 0.25;
            }
    }
    return out;
}

Tensor avg_pool2_backward(const Tensor& upstream) {
    if (upstream.rank() != 4) throw std::invalid_argument("avg_pool2_backward: expected [N,C,h,w]");
    const std::size_t planes = upstream.dim(0) * upstream.dim(1), h = upstream.dim(2), w = upstream.dim(3);
    Tensor out({upstream.dim(0), upstream.dim(1), 2 * h, 2 * w});
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const double* src = upstream.raw() + pl * h * w;
        double* dst = out.raw() + pl * 4 * h * w;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
                const double g = src[y * w + xx] * 0.25;
                double* a = dst + (2 * y) * (2 * w) + 2 * xx;
                a[0] = a[1] = a[2 * w] = a[2 * w + 1] = g;
            }
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t area = x.dim(2) * x.dim(3);
    Tensor out({x.dim(0), x.dim(1)});
    for (std::size_t pl = 0; pl < out.size(); ++pl) {
        const double* src = x.raw() + pl * area;
        double s = 0.0;
        for (std::size_t i = 0; i < area; ++i) s += src[i];
        out[pl] = s / static_cast<double>(area);
    }
    return out;
}

Tensor global_avg_pool_backward(const Tensor& upstream, const Shape& input_shape) {
    if (input_shape.size() != 4 || upstream.shape() != Shape{input_shape[0], input_shape[1]})
        throw std::invalid_argument("global_avg_pool_backward: upstream " + shape_str(upstream.shape()) +
                                    " incompatible with input " + shape_str(input_shape));
    const std::size_t area = input_shape[2] * input_shape[3];
    Tensor out(input_shape);
    for (std::size_t pl = 0; pl < upstream.size(); ++pl)
        std::fill_n(out.raw() + pl * area, area, upstream[pl] / static_cast<double>(area));
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
        bias.dim(0) != weight.dim(0))
        throw std::invalid_argument("linear: incompatible shapes x" + shape_str(x.shape()) + " weight" +
                                    shape_str(weight.shape()) + " bias" + shape_str(bias.shape()));
    const std::size_t n = x.dim(0), f = x.dim(1), k = weight.dim(0);
    Tensor out({n, k});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < f; ++t) acc += x[i * f + t] * weight[j * f + t];
            out[i * k + j] = acc + bias[j];
        }
    return out;
}

LinearGrads linear_backward(const Tensor& x, const Tensor& weight, const Tensor& upstream) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1) ||
        upstream.shape() != Shape{x.dim(0), weight.dim(0)})
        throw std::invalid_argument("linear_backward: incompatible shapes x" + shape_str(x.shape()) + " weight" +
                                    shape_str(weight.shape()) + " upstream" + shape_str(upstream.shape()));
    const std::size_t n = x.dim(0), f = x.dim(1), k = weight.dim(0);
    LinearGrads g{Tensor(weight.shape()), Tensor({k}), Tensor(x.shape())};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double up = upstream[i * k + j];
            g.bias[j] += up;
            for (std::size_t t = 0; t < f; ++t) {
                g.weight[j * f + t] += up * x[i * f + t];
                g.input[i * f + t] += up * weight[j * f + t];
            }
        }
    return g;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace {
// log(1 + exp(x)) without overflow.
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
}  // namespace

LossResult multilabel_soft_margin_loss(const Tensor& logits, const Tensor& targets) {
    if (logits.rank() != 2) throw std::invalid_argument("multilabel_soft_margin_loss: logits must be [N,K]");
    require_same_shape(logits, targets, "multilabel_soft_margin_loss");
    for (double y : targets.data())
        if (!(y >= 0.0 && y <= 1.0))
            throw std::invalid_argument("multilabel_soft_margin_loss: target " + std::to_string(y) + " outside [0,1]");
    const double scale = 1.0 / static_cast<double>(logits.size());
    LossResult r{0.0, Tensor(logits.shape())};
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double x = logits[i], y = targets[i];
        // -[y log s(x) + (1-y) log(1-s(x))] = y softplus(-x) + (1-y) softplus(x)
        r.loss += y * softplus(-x) + (1.0 - y) * softplus(x);
        r.grad[i] = (sigmoid(x) - y) * scale;
    }
    r.loss *= scale;
    return r;
}

AdamState AdamState::for_params(std::span<const Tensor* const> params) {
    AdamState s;
    for (const Tensor* p : params) {
        s.m.emplace_back(p->shape());
        s.v.emplace_back(p->shape());
    }
    return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
        throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
    if (!(cfg.lr >= 0.0)) throw std::invalid_argument("adam_step: learning rate must be non-negative");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_same_shape(*params[i], grads[i], "adam_step");
        require_same_shape(*params[i], state.m[i], "adam_step state");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace sfl

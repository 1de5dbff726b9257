#pragma once

#include "sfl/tensor.hpp"

#include <span>
#include <vector>

namespace sfl {

// Forward/backward kernels for the fixed CAM backbone. All functions are pure:
// they read their arguments and return fresh tensors.

struct ConvGrads {
    Tensor kernel;
    Tensor bias;
    Tensor input;  ///< empty when the caller did not ask for it
};

struct LinearGrads {
    Tensor weight;
    Tensor bias;
    Tensor input;
};

/// Cross-correlation of input [N,C,H,W] with kernel [K,C,kh,kw] plus bias [K].
///
/// Output extent is (H + 2*pad - kh) / stride + 1 and must divide exactly.
/// Each output element is accumulated over (c, ky, kx) in row-major order
/// starting from zero, then the bias is added; the stride-1 path keeps that
/// order so results are reproducible against a plain loop nest.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride = 1, int pad = 0);

/// Gradients of sum(upstream * conv2d(input, kernel, bias)).
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream, int stride = 1,
                          int pad = 0, bool need_input_grad = true);

Tensor relu(const Tensor& x);
/// Passes upstream where x > 0, zero elsewhere.
Tensor relu_backward(const Tensor& x, const Tensor& upstream);

/// 2x2 average pooling with stride 2 over [N,C,H,W]; H and W must be even.
Tensor avg_pool2(const Tensor& x);
Tensor avg_pool2_backward(const Tensor& upstream);

/// [N,C,H,W] -> [N,C] spatial mean.
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& upstream, const Shape& input_shape);

/// x [N,F] * weight[K,F]^T + bias [K].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
LinearGrads linear_backward(const Tensor& x, const Tensor& weight, const Tensor& upstream);

double sigmoid(double x);

struct LossResult {
    double loss = 0.0;
    Tensor grad;
};

/// Mean over all N*K entries of the binary cross-entropy between sigmoid(logits)
/// and targets. Targets may be soft but must lie in [0, 1].
LossResult multilabel_soft_margin_loss(const Tensor& logits, const Tensor& targets);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment buffers, one per parameter, and the step counter.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long step = 0;

    static AdamState for_params(std::span<const Tensor* const> params);
};

/// One bias-corrected Adam update applied in place.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg);

}  // namespace sfl

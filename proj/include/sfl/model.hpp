#pragma once

#include "sfl/data.hpp"
#include "sfl/ops.hpp"
#include "sfl/rng.hpp"
#include "sfl/shuffle.hpp"
#include "sfl/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfl {

/// Subtracted from every input pixel before the first convolution, so that
/// images in [0,1] enter the network roughly centered.
inline constexpr double kInputShift = 0.5;

struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t num_classes = 2;
    std::array<std::size_t, 3> widths{16, 32, 64};
    std::size_t theta_dim = 32;  ///< D', output width of the PCM embedding

    /// Channels of the hidden aggregation X: block 2 and block 3 outputs.
    std::size_t hidden_dim() const { return widths[1] + widths[2]; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Three blocks of (3x3 conv, ReLU, 2x2 average pool) on the shifted input,
/// followed by a CAM head.
///
/// The classifier is a linear map over globally pooled block-3 features; the
/// same weights applied as a 1x1 convolution give the per-class feature maps,
/// which are the class activation maps. `theta` embeds hidden features for
/// pixel affinities and is not touched by the classification loss.
struct BackboneParams {
    ModelConfig config;
    Tensor conv1_w, conv1_b;
    Tensor conv2_w, conv2_b;
    Tensor conv3_w, conv3_b;
    Tensor cls_w, cls_b;  ///< [K, widths[2]], [K]
    Tensor theta;         ///< [theta_dim, hidden_dim]

    /// Kaiming fan-in normal weights, zero biases.
    static BackboneParams init(const ModelConfig& config, Rng& rng);

    /// Parameters updated by the optimizer, in a fixed order.
    std::vector<Tensor*> trainable();
    std::vector<const Tensor*> trainable() const;

    /// Every tensor with a stable name, for checkpoints.
    std::vector<std::pair<std::string, Tensor*>> named();
    std::vector<std::pair<std::string, const Tensor*>> named() const;
};

struct ForwardResult {
    Tensor logits;          ///< [N,K]
    Tensor class_features;  ///< [N,K,h,w] with h = H/8
    Tensor hidden;          ///< [N,D,h,w]
};

ForwardResult forward_classify(const BackboneParams& params, const Tensor& images);

struct TwinLoss {
    double total = 0.0;
    double orig = 0.0;
    double mixed = 0.0;
    std::vector<Tensor> grads;  ///< aligned with BackboneParams::trainable()
};

/// Multilabel soft margin loss on the original batch (hard labels) plus the
/// same loss on the mixed batch (soft labels), with gradients of the sum.
TwinLoss twin_loss(const BackboneParams& params, const Tensor& orig_images, const Tensor& orig_targets,
                   const Tensor& mixed_images, const Tensor& mixed_targets);

/// Raised when a training loss is NaN or infinite.
class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(const std::string& what, std::vector<std::size_t> sample_ids)
        : std::runtime_error(what), sample_ids_(std::move(sample_ids)) {}
    const std::vector<std::size_t>& sample_ids() const { return sample_ids_; }

private:
    std::vector<std::size_t> sample_ids_;
};

struct StepLosses {
    double total = 0.0;
    double orig = 0.0;
    double mixed = 0.0;
};

/// One optimizer step on the twin loss. Throws NonFiniteLoss before touching
/// the parameters if the loss is not finite.
StepLosses train_step(BackboneParams& params, const Batch& orig, const MixedBatch& mixed, AdamState& optimizer,
                      const AdamConfig& adam);

/// Channel c of a [K,h,w] class-feature stack.
Tensor cam_extract(const Tensor& class_features, std::size_t class_index);

/// Per-channel standardization of hidden features [D,h,w] over the pixels of
/// one image (zero mean, unit variance; constant channels become zero). This
/// is the aggregation X handed to the affinity.
Tensor standardize_features(const Tensor& hidden);

/// A[i,j] = ReLU(cos(theta x_i, theta x_j)) over the h*w pixels of X [D,h,w].
/// Norms are guarded by adding 1e-8.
Tensor pcm_affinity(const Tensor& features, const Tensor& theta);

/// Y_p[c,i] = sum_j Abar[i,j] ReLU(Y)[c,j] with Abar the row-normalized
/// affinity; all-zero rows act as identity rows. Results are clamped to the
/// per-class range of ReLU(Y), which only trims rounding error.
Tensor pcm_refine(const Tensor& raw_cam, const Tensor& affinity);

struct CamStack {
    Tensor raw_cam;      ///< [K,h,w]
    Tensor refined_cam;  ///< [K,h,w]
    Tensor features;     ///< standardized hidden aggregation X, [D,h,w]
    Tensor logits;       ///< [K]
};

/// Forward pass, CAM extraction, feature standardization and PCM refinement
/// for one [C,H,W] image.
CamStack infer_cams(const BackboneParams& params, const Tensor& image);

void save_checkpoint(const std::filesystem::path& path, const BackboneParams& params, std::uint64_t config_hash);

/// Rejects files whose stored config hash differs from `expected_hash`.
BackboneParams load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash);

}  // namespace sfl

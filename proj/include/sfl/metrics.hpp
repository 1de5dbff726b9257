#pragma once

#include "sfl/label_mask.hpp"
#include "sfl/model.hpp"
#include "sfl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace sfl {

enum class CamSource { refined, raw };
enum class Averaging { micro, macro };

std::string to_string(CamSource s);
std::string to_string(Averaging a);
CamSource parse_cam_source(const std::string& text);
Averaging parse_averaging(const std::string& text);

struct PseudoMask {
    LabelMask mask;
    std::string source_id;
    double threshold = 0.0;
};

/// Bilinear resize of an [h,w] plane with half-pixel centers and edge clamping.
Tensor upsample_bilinear(const Tensor& plane, std::size_t height, std::size_t width);

/// Turns per-class CAMs [K,h,w] into a mask of size height x width.
///
/// Each class map is min-max normalized over the image and upsampled; a pixel
/// takes the highest-scoring class whose score is >= tau (lower id on ties),
/// else background. A constant map normalizes to 1 when positive and to 0
/// otherwise. `allowed`, when non-empty, holds K indicators restricting which
/// classes may be assigned (the image-level label).
PseudoMask cam_to_mask(const Tensor& cams, double tau, std::size_t height, std::size_t width,
                       std::span<const int> allowed = {}, std::string source_id = {});

struct OverlapCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    OverlapCounts& operator+=(const OverlapCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const OverlapCounts&, const OverlapCounts&) = default;
};

/// Pixel counts for one class id (non-zero pixels when id is 0).
OverlapCounts overlap(const LabelMask& pred, const LabelMask& gt, std::uint8_t id = 0);

/// 2TP / (2TP + FP + FN); 1 when both masks are empty.
double dice(const OverlapCounts& c);
/// TP / (TP + FP + FN); 1 when both masks are empty.
double iou(const OverlapCounts& c);

/// Binary scores treating every non-zero pixel as foreground.
double dice(const LabelMask& pred, const LabelMask& gt);
double iou(const LabelMask& pred, const LabelMask& gt);

struct ClassScore {
    std::size_t class_index = 0;
    double dice = 0.0;
    double iou = 0.0;
    OverlapCounts counts;  ///< pooled over the dataset
    bool present = false;  ///< ground truth contains this class somewhere
};

struct MaskReport {
    std::vector<ClassScore> classes;
    double dice_present = 0.0;  ///< mean over classes present in the ground truth
    double iou_present = 0.0;
    double dice_all = 0.0;  ///< mean over all classes
    double iou_all = 0.0;
    std::size_t samples = 0;
    Averaging averaging = Averaging::micro;
    std::string config_hash;
    std::uint64_t seed = 0;
};

/// Scores pseudo masks against ground truth keyed by sample id.
MaskReport evaluate(std::span<const PseudoMask> masks, const std::map<std::string, LabelMask>& ground_truth,
                    std::size_t num_classes, Averaging averaging = Averaging::micro);

/// Structured (JSON) report with per-class table and both averages.
void write_report_json(const std::filesystem::path& path, const MaskReport& report);
/// Flat `class,dice,iou` table.
void write_report_csv(const std::filesystem::path& path, const MaskReport& report);

}  // namespace sfl

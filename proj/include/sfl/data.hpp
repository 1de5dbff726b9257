#pragma once

#include "sfl/label_mask.hpp"
#include "sfl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sfl {

/// One labeled image. The ground-truth mask is for evaluation only and never
/// reaches a Batch.
struct Sample {
    std::string id;          ///< file stem; unique within a dataset
    Tensor image;            ///< [C,H,W], values in [0,1]
    std::vector<int> label;  ///< K indicators in {0,1}, at least one set
    std::optional<LabelMask> gt_mask;
};

/// Parameters for the synthetic pathology-like generator. Class 1 ("abnormal")
/// images carry large irregular cells with a dark core; class 0 images carry
/// only small round normal cells. The ground truth marks abnormal cells.
struct SynthConfig {
    std::size_t image_size = 64;
    std::size_t channels = 1;
    std::size_t num_samples = 285;
    std::size_t patch_multiple = 32;  ///< image_size must be a multiple of this
    double abnormal_fraction = 0.5;   ///< probability that an image is drawn as class 1

    int normal_count_min = 10;
    int normal_count_max = 18;
    double normal_radius_min = 1.8;
    double normal_radius_max = 3.0;
    double normal_intensity = 0.50;

    int abnormal_count_min = 1;
    int abnormal_count_max = 1;
    double abnormal_radius_min = 14.0;
    double abnormal_radius_max = 18.0;
    double abnormal_eccentricity = 1.4;  ///< max ratio of ellipse axes
    double abnormal_irregularity = 0.2;  ///< relative boundary modulation
    double abnormal_intensity = 0.48;    ///< cell body
    double abnormal_core_intensity = 0.15;
    double abnormal_core_fraction = 0.25;  ///< core radius relative to the cell

    double background_level = 0.82;
    double noise_level = 0.04;

    static constexpr std::size_t num_classes = 2;

    void validate() const;
};

/// Deterministic in (cfg, seed). Pixel values are multiples of 1/255 so the
/// dataset survives an 8-bit round trip unchanged.
std::vector<Sample> generate_synthetic(const SynthConfig& cfg, std::uint64_t seed);

struct DirectoryDataset {
    std::vector<Sample> samples;
    std::vector<std::string> warnings;
};

/// Loads `images/` (PNG or PGM), `labels.csv` and optional `masks/`.
DirectoryDataset load_directory(const std::filesystem::path& root);

/// Writes the layout read by load_directory (PNG images and masks).
void save_directory(const std::filesystem::path& root, std::span<const Sample> samples);

struct SplitRatios {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
};

/// Indices into the sample list.
struct DatasetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
    std::uint64_t seed = 0;
};

/// Seeded shuffle followed by contiguous slicing; val and test get
/// max(1, floor(n * ratio)) and train takes the remainder.
DatasetSplit split(std::size_t num_samples, const SplitRatios& ratios, std::uint64_t seed);

/// Training view of a few samples: no ground-truth masks.
struct Batch {
    Tensor images;                 ///< [N,C,H,W]
    Tensor labels;                 ///< [N,K]
    std::vector<std::size_t> ids;  ///< indices into the sample list
};

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> members);

/// Per-epoch seeded reshuffle of `members`, cut into full batches; the final
/// short batch is dropped.
std::vector<Batch> batches(std::span<const Sample> samples, std::span<const std::size_t> members,
                           std::size_t batch_size, std::uint64_t seed, std::size_t epoch);

}  // namespace sfl

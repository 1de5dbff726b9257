#pragma once

#include "sfl/config.hpp"
#include "sfl/data.hpp"
#include "sfl/metrics.hpp"
#include "sfl/model.hpp"
#include "sfl/shuffle.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace sfl {

/// Samples plus the seeded train/val/test split, both derived from the
/// master seed.
struct Dataset {
    std::vector<Sample> samples;
    DatasetSplit split;
    std::vector<std::string> warnings;

    const std::vector<std::size_t>& members(const std::string& split_name) const;
};

Dataset load_dataset(const RunConfig& config);

struct IterationLog {
    std::size_t iteration = 0;
    std::size_t epoch = 0;
    double total = 0.0;
    double orig = 0.0;
    double mixed = 0.0;
    double smoothed = 0.0;  ///< EMA of `total`, the curriculum signal
    std::size_t patch = 0;  ///< patch size used for this step
    double ratio = 0.0;     ///< shuffle ratio used for this step

    friend bool operator==(const IterationLog&, const IterationLog&) = default;
};

struct TrainRecord {
    BackboneParams params;
    std::vector<IterationLog> losses;
    std::vector<CurriculumEvent> history;
    double seconds = 0.0;
};

/// Runs the epoch loop: threshold decay, shuffle, twin step, feedback.
/// `run_seed` drives initialization, batch order and shuffling.
TrainRecord train_model(const RunConfig& config, const Dataset& data, std::uint64_t run_seed,
                        std::ostream* log = nullptr);

/// Pseudo masks for the given sample indices; CAM stacks are returned through
/// `cams` when it is non-null.
std::vector<PseudoMask> make_masks(const RunConfig& config, const BackboneParams& params, const Dataset& data,
                                   std::span<const std::size_t> members, std::vector<CamStack>* cams = nullptr);

/// Ground truth for the given members keyed by sample id; samples without a
/// mask are skipped.
std::map<std::string, LabelMask> ground_truth(const Dataset& data, std::span<const std::size_t> members);

void write_loss_csv(std::ostream& out, std::span<const IterationLog> losses);
std::vector<IterationLog> read_loss_csv(std::istream& in);

// Commands. Each writes into `out_dir` and stamps its artifacts with the
// config hash. ConfigError signals bad input; other exceptions are run aborts.

TrainRecord cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream* log = nullptr);

/// Writes masks/<id>.png, cams/<id>.<raw|refined>.c<k>.pfm and manifest.json.
std::size_t cmd_genmask(const RunConfig& config, const std::filesystem::path& checkpoint,
                        const std::string& split_name, const std::filesystem::path& out_dir);

/// Scores a genmask directory; writes report.json and report.csv and appends
/// one row to comparison.csv in `out_dir`.
MaskReport cmd_eval(const RunConfig& config, const std::filesystem::path& mask_dir,
                    const std::filesystem::path& out_dir, const std::string& label);

inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> names{"baseline_cam", "no_fl", "group", "back", "full"};
    return names;
}

/// Config for one ablation variant derived from `base`.
RunConfig variant_config(const RunConfig& base, const std::string& variant);

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    MaskReport report;
};

struct AblationSummary {
    std::string variant;
    double median_dice = 0.0;
    double median_iou = 0.0;
    std::size_t runs = 0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<AblationSummary> summary;
};

/// Trains and scores every variant on seeds base.seed + 0..num_seeds-1 over
/// one shared dataset and split. Writes ablation.csv, summary.csv and one
/// record directory per run under `out_dir`.
AblationResult cmd_ablate(const RunConfig& config, const std::vector<std::string>& variants, std::size_t num_seeds,
                          const std::filesystem::path& out_dir, std::ostream* log = nullptr);

/// Plot-ready CSVs from a record directory. Returns warnings for missing or
/// unreadable inputs; whatever can be emitted is emitted.
std::vector<std::string> cmd_report(const std::filesystem::path& record_dir, const std::filesystem::path& out_dir);

double median(std::vector<double> values);

}  // namespace sfl

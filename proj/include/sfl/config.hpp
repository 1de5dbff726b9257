#pragma once

#include "sfl/data.hpp"
#include "sfl/metrics.hpp"
#include "sfl/model.hpp"
#include "sfl/ops.hpp"
#include "sfl/shuffle.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace sfl {

/// Invalid or unknown configuration entry; the message names the key.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DataSource { synthetic, directory };
enum class ClassFilter { label, none };

std::string to_string(DataSource s);
std::string to_string(ClassFilter f);

struct DatasetConfig {
    DataSource source = DataSource::synthetic;
    std::filesystem::path path;  ///< used when source is directory
    SynthConfig synth;
    SplitRatios ratios;
};

struct TrainConfig {
    AdamConfig adam;
    std::size_t batch_size = 4;
    std::size_t epochs = 8;
    std::size_t max_steps = 0;  ///< 0 means no step budget
    double loss_ema = 0.9;      ///< smoothing of the loss fed to the curriculum
};

struct ScheduleConfig {
    ShuffleSchedule schedule;
    ShuffleVariant variant = ShuffleVariant::independent;
    LabelBlend blend = LabelBlend::realized;
    bool shuffle = true;  ///< false trains on the original batch twice (plain CAM)
};

struct EvalConfig {
    double threshold = 0.4;
    Averaging averaging = Averaging::micro;
    CamSource cam = CamSource::refined;
    ClassFilter class_filter = ClassFilter::label;
    std::string split = "test";
};

/// Fully resolved run configuration. Text form is one `key = value` per line
/// with dotted section prefixes; every key has a default.
struct RunConfig {
    std::uint64_t seed = 7;
    DatasetConfig dataset;
    ScheduleConfig schedule;
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    std::filesystem::path output_dir = "runs/default";

    /// Throws ConfigError on any out-of-range value.
    void validate() const;
};

/// Parses text, starting from defaults. Unknown keys, malformed values and
/// duplicates raise ConfigError with the line number and key.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical text; parse_config(format_config(c)) reproduces c exactly.
std::string format_config(const RunConfig& config);

/// Applies one `key = value` override.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

/// FNV-1a over the canonical text of the sections that shape a checkpoint
/// (seed, dataset, schedule, model, train).
std::uint64_t config_hash(const RunConfig& config);
std::string hash_hex(std::uint64_t hash);

}  // namespace sfl

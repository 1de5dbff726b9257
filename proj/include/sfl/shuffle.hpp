#pragma once

#include "sfl/data.hpp"
#include "sfl/rng.hpp"
#include "sfl/tensor.hpp"

#include <iosfwd>
#include <numbers>
#include <string>
#include <vector>

namespace sfl {

// Cross-batch patch shuffling under a feedback-driven curriculum.
//
// Images are cut into a p x p patch grid. A batch-global subset R of grid
// positions (the relation positions, |R| = round(n * f)) is permuted across
// the images of the batch while every patch keeps its grid position; the
// remaining fixed positions are left alone. Training feedback moves the
// curriculum from coarse (large p, small f) to fine (small p, large f).

enum class ScheduleMode {
    standard,  ///< advance on l < T, hold otherwise
    back,      ///< advance on l < T, step back otherwise
    frozen,    ///< never moves
};

enum class ShuffleVariant {
    independent,  ///< fresh permutation per relation position
    group,        ///< one permutation per batch shared by all relation positions
};

enum class LabelBlend {
    realized,  ///< exact per-image patch-source fractions
    nominal,   ///< (1 - m/n) own label + (m/n) batch-mean label
};

std::string to_string(ScheduleMode mode);
std::string to_string(ShuffleVariant variant);
std::string to_string(LabelBlend blend);
ScheduleMode parse_schedule_mode(const std::string& text);
ShuffleVariant parse_shuffle_variant(const std::string& text);
LabelBlend parse_label_blend(const std::string& text);

struct ShuffleSchedule {
    std::vector<std::size_t> patch_sizes{32, 16, 8};  ///< strictly decreasing
    double alpha = 1.3;
    double f_init = 0.1;
    double f_min = 0.05;
    double f_max = 0.7;
    double t_init = 2.0 * std::numbers::ln2;  ///< untrained level of the summed twin loss
    double t_decay = 0.85;
    ScheduleMode mode = ScheduleMode::standard;

    void validate() const;
    friend bool operator==(const ShuffleSchedule&, const ShuffleSchedule&) = default;
};

enum class Transition { hold, advance, retreat, frozen };
std::string to_string(Transition t);
Transition parse_transition(const std::string& text);

struct CurriculumEvent {
    std::size_t iteration = 0;
    double loss = 0.0;
    double threshold = 0.0;  ///< T compared against `loss`
    std::size_t patch_size = 0;  ///< after the update
    double ratio = 0.0;          ///< after the update
    Transition transition = Transition::hold;

    friend bool operator==(const CurriculumEvent&, const CurriculumEvent&) = default;
};

struct ShuffleState {
    std::size_t size_index = 0;  ///< 0 is the largest patch size
    double ratio = 0.0;
    double threshold = 0.0;
    std::vector<CurriculumEvent> history;

    static ShuffleState initial(const ShuffleSchedule& schedule);
    std::size_t patch_size(const ShuffleSchedule& schedule) const { return schedule.patch_sizes.at(size_index); }
};

/// Applies one feedback step: strict `loss < threshold` is positive feedback.
ShuffleState feedback_update(ShuffleState state, const ShuffleSchedule& schedule, double loss, std::size_t iteration);

/// T = t_init * t_decay^epoch.
ShuffleState decay_threshold(ShuffleState state, const ShuffleSchedule& schedule, std::size_t epoch);

/// Line-oriented CSV: iteration,loss,threshold,patch_size,ratio,transition.
/// The reader skips leading and embedded `#` comment lines.
void write_history(std::ostream& out, const std::vector<CurriculumEvent>& history);
std::vector<CurriculumEvent> read_history(std::istream& in);

/// Row-major patch grid of one [C,H,W] image.
struct PatchGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t patch = 0;
    std::vector<Tensor> patches;  ///< each [C,p,p]
};

PatchGrid partition(const Tensor& image, std::size_t patch);
Tensor reassemble(const PatchGrid& grid);

/// round(n * f), halves rounded up.
std::size_t relation_count(std::size_t num_positions, double ratio);

struct RelationPositions {
    std::vector<std::size_t> relation;  ///< sorted
    std::vector<std::size_t> fixed;     ///< sorted complement
};

/// Uniform draw of relation_count(n, f) positions without replacement.
RelationPositions select_relation_positions(std::size_t num_positions, double ratio, Rng& rng);

struct MixedBatch {
    Tensor images;       ///< [N,C,H,W]
    Tensor soft_labels;  ///< [N,K], rows sum to 1
    /// provenance[b][pos]: batch index of the image that supplied patch pos of
    /// output image b.
    std::vector<std::vector<std::size_t>> provenance;
    RelationPositions positions;
    std::size_t patch = 0;
};

MixedBatch shuffle_batch(const Batch& batch, std::size_t patch, double ratio, Rng& rng, ShuffleVariant variant,
                         LabelBlend blend = LabelBlend::realized);

}  // namespace sfl

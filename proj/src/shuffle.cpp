#include "sfl/shuffle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace sfl {

std::string to_string(ScheduleMode mode) {
    switch (mode) {
        case ScheduleMode::standard: return "standard";
        case ScheduleMode::back: return "back";
        case ScheduleMode::frozen: return "frozen";
    }
    return "?";
}

std::string to_string(ShuffleVariant variant) {
    return variant == ShuffleVariant::independent ? "independent" : "group";
}

std::string to_string(LabelBlend blend) { return blend == LabelBlend::realized ? "realized" : "nominal"; }

ScheduleMode parse_schedule_mode(const std::string& text) {
    if (text == "standard") return ScheduleMode::standard;
    if (text == "back") return ScheduleMode::back;
    if (text == "frozen") return ScheduleMode::frozen;
    throw std::invalid_argument("unknown schedule mode '" + text + "' (standard|back|frozen)");
}

ShuffleVariant parse_shuffle_variant(const std::string& text) {
    if (text == "independent") return ShuffleVariant::independent;
    if (text == "group") return ShuffleVariant::group;
    throw std::invalid_argument("unknown shuffle variant '" + text + "' (independent|group)");
}

LabelBlend parse_label_blend(const std::string& text) {
    if (text == "realized") return LabelBlend::realized;
    if (text == "nominal") return LabelBlend::nominal;
    throw std::invalid_argument("unknown label blend '" + text + "' (realized|nominal)");
}

std::string to_string(Transition t) {
    switch (t) {
        case Transition::hold: return "hold";
        case Transition::advance: return "advance";
        case Transition::retreat: return "retreat";
        case Transition::frozen: return "frozen";
    }
    return "?";
}

Transition parse_transition(const std::string& text) {
    if (text == "hold") return Transition::hold;
    if (text == "advance") return Transition::advance;
    if (text == "retreat") return Transition::retreat;
    if (text == "frozen") return Transition::frozen;
    throw std::invalid_argument("unknown transition '" + text + "'");
}

void ShuffleSchedule::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("shuffle schedule: " + what); };
    if (patch_sizes.empty()) fail("patch_sizes must not be empty");
    for (std::size_t i = 0; i < patch_sizes.size(); ++i) {
        if (patch_sizes[i] < 1) fail("patch sizes must be >= 1");
        if (i > 0 && patch_sizes[i] >= patch_sizes[i - 1]) fail("patch_sizes must be strictly decreasing");
    }
    if (!(alpha > 1.0)) fail("alpha must be > 1");
    if (!(f_min >= 0.0 && f_min <= f_max && f_max <= 1.0)) fail("need 0 <= f_min <= f_max <= 1");
    if (!(f_init >= f_min && f_init <= f_max)) fail("f_init must lie in [f_min, f_max]");
    if (!(t_init > 0.0)) fail("t_init must be positive");
    if (!(t_decay > 0.0 && t_decay <= 1.0)) fail("t_decay must lie in (0, 1]");
}

ShuffleState ShuffleState::initial(const ShuffleSchedule& schedule) {
    schedule.validate();
    ShuffleState s;
    s.size_index = 0;
    s.ratio = schedule.f_init;
    s.threshold = schedule.t_init;
    return s;
}

ShuffleState feedback_update(ShuffleState state, const ShuffleSchedule& schedule, double loss, std::size_t iteration) {
    if (!(loss >= 0.0) || !std::isfinite(loss))
        throw std::invalid_argument("feedback_update: loss must be finite and non-negative");
    const std::size_t last = schedule.patch_sizes.size() - 1;
    Transition t = Transition::hold;
    if (schedule.mode == ScheduleMode::frozen) {
        t = Transition::frozen;
    } else if (loss < state.threshold) {
        t = Transition::advance;
        state.size_index = std::min(state.size_index + 1, last);
        state.ratio = std::min(state.ratio * schedule.alpha, schedule.f_max);
    } else if (schedule.mode == ScheduleMode::back) {
        t = Transition::retreat;
        state.size_index = state.size_index == 0 ? 0 : state.size_index - 1;
        state.ratio = std::max(state.ratio / schedule.alpha, schedule.f_min);
    }
    state.history.push_back(
        {iteration, loss, state.threshold, schedule.patch_sizes[state.size_index], state.ratio, t});
    return state;
}

ShuffleState decay_threshold(ShuffleState state, const ShuffleSchedule& schedule, std::size_t epoch) {
    state.threshold = schedule.t_init * std::pow(schedule.t_decay, static_cast<double>(epoch));
    return state;
}

void write_history(std::ostream& out, const std::vector<CurriculumEvent>& history) {
    out << "iteration,loss,threshold,patch_size,ratio,transition\n";
    char buf[160];
    for (const auto& e : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%zu,%.17g,", e.iteration, e.loss, e.threshold, e.patch_size,
                      e.ratio);
        out << buf << to_string(e.transition) << "\n";
    }
}

std::vector<CurriculumEvent> read_history(std::istream& in) {
    std::vector<CurriculumEvent> events;
    std::string line;
    while (std::getline(in, line) && line.starts_with("#")) {
    }
    if (line.rfind("iteration,", 0) != 0) throw std::runtime_error("curriculum log: missing header");
    while (std::getline(in, line)) {
        if (line.empty() || line.starts_with("#")) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() != 6) throw std::runtime_error("curriculum log: malformed row '" + line + "'");
        events.push_back({std::stoull(f[0]), std::stod(f[1]), std::stod(f[2]), std::stoull(f[3]), std::stod(f[4]),
                          parse_transition(f[5])});
    }
    return events;
}

PatchGrid partition(const Tensor& image, std::size_t patch) {
    if (image.rank() != 3) throw std::invalid_argument("partition: expected [C,H,W], got " + shape_str(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw std::invalid_argument("partition: patch size " + std::to_string(patch) + " does not divide " +
                                    std::to_string(h) + "x" + std::to_string(w));
    PatchGrid grid{h / patch, w / patch, patch, {}};
    for (std::size_t gy = 0; gy < grid.rows; ++gy)
        for (std::size_t gx = 0; gx < grid.cols; ++gx) {
            Tensor p({c, patch, patch});
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < patch; ++y)
                    for (std::size_t x = 0; x < patch; ++x) p(ch, y, x) = image(ch, gy * patch + y, gx * patch + x);
            grid.patches.push_back(std::move(p));
        }
    return grid;
}

Tensor reassemble(const PatchGrid& grid) {
    if (grid.patches.size() != grid.rows * grid.cols || grid.patches.empty())
        throw std::invalid_argument("reassemble: patch count does not match grid");
    const std::size_t c = grid.patches.front().dim(0), p = grid.patch;
    Tensor image({c, grid.rows * p, grid.cols * p});
    for (std::size_t gy = 0; gy < grid.rows; ++gy)
        for (std::size_t gx = 0; gx < grid.cols; ++gx) {
            const Tensor& src = grid.patches[gy * grid.cols + gx];
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x) image(ch, gy * p + y, gx * p + x) = src(ch, y, x);
        }
    return image;
}

std::size_t relation_count(std::size_t num_positions, double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("shuffle ratio must lie in [0,1]");
    const auto m = static_cast<std::size_t>(std::floor(static_cast<double>(num_positions) * ratio + 0.5));
    return std::min(m, num_positions);
}

RelationPositions select_relation_positions(std::size_t num_positions, double ratio, Rng& rng) {
    const std::size_t m = relation_count(num_positions, ratio);
    std::vector<std::size_t> order(num_positions);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Partial Fisher-Yates: the first m entries are a uniform m-subset.
    for (std::size_t i = 0; i < m; ++i) std::swap(order[i], order[i + uniform_index(rng, num_positions - i)]);
    RelationPositions out;
    out.relation.assign(order.begin(), order.begin() + m);
    out.fixed.assign(order.begin() + m, order.end());
    std::sort(out.relation.begin(), out.relation.end());
    std::sort(out.fixed.begin(), out.fixed.end());
    return out;
}

namespace {

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
    return perm;
}

}  // namespace

MixedBatch shuffle_batch(const Batch& batch, std::size_t patch, double ratio, Rng& rng, ShuffleVariant variant,
                         LabelBlend blend) {
    const Tensor& in = batch.images;
    if (in.rank() != 4) throw std::invalid_argument("shuffle_batch: images must be [N,C,H,W]");
    const std::size_t n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
    if (n < 2) throw std::invalid_argument("shuffle_batch: need at least 2 images, got " + std::to_string(n));
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw std::invalid_argument("shuffle_batch: patch size " + std::to_string(patch) + " does not divide " +
                                    std::to_string(h) + "x" + std::to_string(w));
    if (batch.labels.rank() != 2 || batch.labels.dim(0) != n)
        throw std::invalid_argument("shuffle_batch: labels must be [N,K]");
    const std::size_t k = batch.labels.dim(1);
    const std::size_t cols = w / patch;
    const std::size_t positions = (h / patch) * cols;

    MixedBatch out;
    out.patch = patch;
    out.images = in;
    out.positions = select_relation_positions(positions, ratio, rng);
    out.provenance.resize(n);
    for (std::size_t b = 0; b < n; ++b) out.provenance[b].assign(positions, b);

    std::vector<std::size_t> shared;
    if (variant == ShuffleVariant::group && !out.positions.relation.empty()) shared = random_permutation(n, rng);
    const std::size_t plane = h * w;
    for (std::size_t pos : out.positions.relation) {
        const std::vector<std::size_t> perm = variant == ShuffleVariant::group ? shared : random_permutation(n, rng);
        const std::size_t y0 = (pos / cols) * patch, x0 = (pos % cols) * patch;
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t src = perm[b];
            out.provenance[b][pos] = src;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < patch; ++y) {
                    const std::size_t off = ch * plane + (y0 + y) * w + x0;
                    std::copy_n(in.raw() + src * c * plane + off, patch, out.images.raw() + b * c * plane + off);
                }
        }
    }

    // Source labels normalized to unit mass so every blended row sums to 1.
    Tensor unit(batch.labels.shape());
    for (std::size_t b = 0; b < n; ++b) {
        double mass = 0.0;
        for (std::size_t j = 0; j < k; ++j) mass += batch.labels(b, j);
        if (!(mass > 0.0)) throw std::invalid_argument("shuffle_batch: image label has no positive class");
        for (std::size_t j = 0; j < k; ++j) unit(b, j) = batch.labels(b, j) / mass;
    }

    out.soft_labels = Tensor({n, k});
    const auto total = static_cast<double>(positions);
    if (blend == LabelBlend::realized) {
        for (std::size_t b = 0; b < n; ++b) {
            std::vector<std::size_t> counts(n, 0);
            for (std::size_t src : out.provenance[b]) ++counts[src];
            for (std::size_t j = 0; j < k; ++j) {
                double acc = 0.0;
                for (std::size_t src = 0; src < n; ++src) acc += static_cast<double>(counts[src]) * unit(src, j);
                out.soft_labels(b, j) = acc / total;
            }
        }
    } else {
        const double mixed = static_cast<double>(out.positions.relation.size()) / total;
        for (std::size_t j = 0; j < k; ++j) {
            double mean = 0.0;
            for (std::size_t src = 0; src < n; ++src) mean += unit(src, j);
            mean /= static_cast<double>(n);
            for (std::size_t b = 0; b < n; ++b) out.soft_labels(b, j) = (1.0 - mixed) * unit(b, j) + mixed * mean;
        }
    }
    return out;
}

}  // namespace sfl

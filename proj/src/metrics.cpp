#include "sfl/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace sfl {

std::string to_string(CamSource s) { return s == CamSource::refined ? "refined" : "raw"; }
std::string to_string(Averaging a) { return a == Averaging::micro ? "micro" : "macro"; }

CamSource parse_cam_source(const std::string& text) {
    if (text == "refined") return CamSource::refined;
    if (text == "raw") return CamSource::raw;
    throw std::invalid_argument("unknown CAM source '" + text + "' (refined|raw)");
}

Averaging parse_averaging(const std::string& text) {
    if (text == "micro") return Averaging::micro;
    if (text == "macro") return Averaging::macro;
    throw std::invalid_argument("unknown averaging mode '" + text + "' (micro|macro)");
}

Tensor upsample_bilinear(const Tensor& plane, std::size_t height, std::size_t width) {
    if (plane.rank() != 2) throw std::invalid_argument("upsample_bilinear: expected [h,w]");
    const std::size_t h = plane.dim(0), w = plane.dim(1);
    Tensor out({height, width});
    const double sy = static_cast<double>(h) / static_cast<double>(height);
    const double sx = static_cast<double>(w) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = plane(y0, x0) * (1.0 - wx) + plane(y0, x1) * wx;
            const double bottom = plane(y1, x0) * (1.0 - wx) + plane(y1, x1) * wx;
            out(y, x) = top * (1.0 - wy) + bottom * wy;
        }
    }
    return out;
}

PseudoMask cam_to_mask(const Tensor& cams, double tau, std::size_t height, std::size_t width,
                       std::span<const int> allowed, std::string source_id) {
    if (cams.rank() != 3) throw std::invalid_argument("cam_to_mask: CAMs must be [K,h,w]");
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("cam_to_mask: threshold must lie in (0,1)");
    const std::size_t k = cams.dim(0), h = cams.dim(1), w = cams.dim(2), area = h * w;
    if (!allowed.empty() && allowed.size() != k)
        throw std::invalid_argument("cam_to_mask: class filter has " + std::to_string(allowed.size()) +
                                    " entries for " + std::to_string(k) + " classes");

    std::vector<Tensor> scores;
    std::vector<std::size_t> classes;
    for (std::size_t c = 0; c < k; ++c) {
        if (!allowed.empty() && allowed[c] == 0) continue;
        const double* v = cams.raw() + c * area;
        const auto [mn, mx] = std::minmax_element(v, v + area);
        Tensor norm({h, w});
        if (*mx > *mn) {
            const double range = *mx - *mn;
            for (std::size_t i = 0; i < area; ++i) norm[i] = (v[i] - *mn) / range;
        } else {
            norm.fill(*mx > 0.0 ? 1.0 : 0.0);
        }
        scores.push_back(upsample_bilinear(norm, height, width));
        classes.push_back(c);
    }

    PseudoMask out{LabelMask(height, width, 0), std::move(source_id), tau};
    for (std::size_t i = 0; i < height * width; ++i) {
        double best = -1.0;
        for (std::size_t s = 0; s < scores.size(); ++s) {
            const double v = scores[s][i];
            if (v >= tau && v > best) {
                best = v;
                out.mask.ids[i] = mask_id(classes[s]);
            }
        }
    }
    return out;
}

OverlapCounts overlap(const LabelMask& pred, const LabelMask& gt, std::uint8_t id) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("mask shape mismatch: " + std::to_string(pred.height) + "x" +
                                    std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                                    std::to_string(gt.width));
    OverlapCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = id == 0 ? pred.ids[i] != 0 : pred.ids[i] == id;
        const bool g = id == 0 ? gt.ids[i] != 0 : gt.ids[i] == id;
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
    }
    return c;
}

double dice(const OverlapCounts& c) {
    const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
    return denom == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

double iou(const OverlapCounts& c) {
    const std::uint64_t denom = c.tp + c.fp + c.fn;
    return denom == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double dice(const LabelMask& pred, const LabelMask& gt) { return dice(overlap(pred, gt)); }
double iou(const LabelMask& pred, const LabelMask& gt) { return iou(overlap(pred, gt)); }

MaskReport evaluate(std::span<const PseudoMask> masks, const std::map<std::string, LabelMask>& ground_truth,
                    std::size_t num_classes, Averaging averaging) {
    std::vector<std::string> missing;
    for (const auto& m : masks)
        if (!ground_truth.contains(m.source_id)) missing.push_back(m.source_id);
    if (!missing.empty()) {
        std::string list;
        for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
        throw std::invalid_argument("no ground truth for " + std::to_string(missing.size()) + " mask(s): " + list);
    }

    MaskReport report;
    report.samples = masks.size();
    report.averaging = averaging;
    for (std::size_t c = 0; c < num_classes; ++c) {
        ClassScore score;
        score.class_index = c;
        double dice_sum = 0.0, iou_sum = 0.0;
        for (const auto& m : masks) {
            const LabelMask& gt = ground_truth.at(m.source_id);
            const OverlapCounts counts = overlap(m.mask, gt, mask_id(c));
            score.counts += counts;
            dice_sum += dice(counts);
            iou_sum += iou(counts);
        }
        score.present = score.counts.tp + score.counts.fn > 0;
        if (averaging == Averaging::micro || masks.empty()) {
            score.dice = dice(score.counts);
            score.iou = iou(score.counts);
        } else {
            score.dice = dice_sum / static_cast<double>(masks.size());
            score.iou = iou_sum / static_cast<double>(masks.size());
        }
        // Pooled counts satisfy IoU = Dice / (2 - Dice) <= Dice; per-image
        // means preserve the ordering.
        if (score.iou > score.dice + 1e-12 || score.dice > 1.0 || score.iou < 0.0)
            throw std::logic_error("metric invariant 0 <= IoU <= Dice <= 1 violated for class " + std::to_string(c));
        report.classes.push_back(score);
    }

    std::size_t present = 0;
    for (const auto& s : report.classes) {
        report.dice_all += s.dice;
        report.iou_all += s.iou;
        if (s.present) {
            report.dice_present += s.dice;
            report.iou_present += s.iou;
            ++present;
        }
    }
    if (num_classes > 0) {
        report.dice_all /= static_cast<double>(num_classes);
        report.iou_all /= static_cast<double>(num_classes);
    }
    if (present > 0) {
        report.dice_present /= static_cast<double>(present);
        report.iou_present /= static_cast<double>(present);
    } else {
        report.dice_present = report.dice_all;
        report.iou_present = report.iou_all;
    }
    return report;
}

void write_report_json(const std::filesystem::path& path, const MaskReport& report) {
    nlohmann::ordered_json j;
    j["samples"] = report.samples;
    j["averaging"] = to_string(report.averaging);
    j["config_hash"] = report.config_hash;
    j["seed"] = report.seed;
    nlohmann::ordered_json classes = nlohmann::ordered_json::array();
    for (const auto& c : report.classes) {
        nlohmann::ordered_json row;
        row["class"] = c.class_index;
        row["mask_id"] = mask_id(c.class_index);
        row["present"] = c.present;
        row["dice"] = c.dice;
        row["iou"] = c.iou;
        row["tp"] = c.counts.tp;
        row["fp"] = c.counts.fp;
        row["fn"] = c.counts.fn;
        classes.push_back(row);
    }
    j["classes"] = classes;
    j["average_present"] = {{"dice", report.dice_present}, {"iou", report.iou_present}};
    j["average_all"] = {{"dice", report.dice_all}, {"iou", report.iou_all}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_report_csv(const std::filesystem::path& path, const MaskReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "class,dice,iou\n";
    char buf[128];
    for (const auto& c : report.classes) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", c.class_index, c.dice, c.iou);
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "average_present,%.17g,%.17g\n", report.dice_present, report.iou_present);
    out << buf;
    std::snprintf(buf, sizeof buf, "average_all,%.17g,%.17g\n", report.dice_all, report.iou_all);
    out << buf;
}

}  // namespace sfl

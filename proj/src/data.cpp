#include "sfl/data.hpp"

#include "sfl/image_io.hpp"
#include "sfl/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace sfl {
namespace {

struct Blob {
    double cx, cy;
    double radius;
    double stretch;  // sqrt of the axis ratio
    double angle;
    double phase3, phase5;
    double extent;  // bounding radius
};

// Boundary radius multiplier at polar angle theta; mean-free modulation.
double boundary_scale(const Blob& b, double irregularity, double theta) {
    return 1.0 + irregularity * 0.5 * (std::sin(3.0 * theta + b.phase3) + std::sin(5.0 * theta + b.phase5));
}

// Normalized radial coordinate: <= 1 inside the blob outline.
double blob_level(const Blob& b, double irregularity, double px, double py) {
    const double dx = px - b.cx, dy = py - b.cy;
    const double c = std::cos(b.angle), s = std::sin(b.angle);
    const double u = (dx * c + dy * s) / b.stretch;
    const double v = (-dx * s + dy * c) * b.stretch;
    const double rho = std::hypot(u, v);
    if (rho == 0.0) return 0.0;
    return rho / (b.radius * boundary_scale(b, irregularity, std::atan2(v, u)));
}

int uniform_count(Rng& rng, int lo, int hi) {
    return lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

Sample render_sample(const SynthConfig& cfg, std::uint64_t seed, std::size_t index) {
    Rng rng = make_rng(seed, "synth-image", index);
    const std::size_t n = cfg.image_size;
    const double size = static_cast<double>(n);

    const bool abnormal = uniform01(rng) < cfg.abnormal_fraction;
    const int abnormal_count = abnormal ? uniform_count(rng, cfg.abnormal_count_min, cfg.abnormal_count_max) : 0;

    std::vector<Blob> blobs;
    for (int i = 0; i < abnormal_count; ++i) {
        Blob b{};
        b.radius = uniform(rng, cfg.abnormal_radius_min, cfg.abnormal_radius_max);
        b.stretch = std::sqrt(uniform(rng, 1.0, cfg.abnormal_eccentricity));
        b.angle = uniform(rng, 0.0, std::numbers::pi);
        b.phase3 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        b.phase5 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        b.extent = b.radius * (1.0 + cfg.abnormal_irregularity) * b.stretch;
        const double lo = b.extent + 1.0, hi = size - b.extent - 1.0;
        bool placed = false;
        for (int attempt = 0; attempt < 2000 && !placed && lo < hi; ++attempt) {
            b.cx = uniform(rng, lo, hi);
            b.cy = uniform(rng, lo, hi);
            placed = std::all_of(blobs.begin(), blobs.end(), [&](const Blob& o) {
                return std::hypot(b.cx - o.cx, b.cy - o.cy) >= b.extent + o.extent + 2.0;
            });
        }
        if (!placed)
            throw std::invalid_argument("synthetic config too dense: cannot place abnormal cell " +
                                        std::to_string(i + 1) + " of " + std::to_string(abnormal_count) +
                                        " in a " + std::to_string(n) + "x" + std::to_string(n) + " image");
        blobs.push_back(b);
    }

    Tensor gray({n, n});
    // Smooth background texture: a few random plane waves.
    struct Wave {
        double kx, ky, phase, amp;
    };
    std::vector<Wave> waves(3);
    for (auto& w : waves) {
        const double freq = uniform(rng, 0.04, 0.15) * 2.0 * std::numbers::pi;
        const double dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        w = {freq * std::cos(dir), freq * std::sin(dir), uniform(rng, 0.0, 2.0 * std::numbers::pi), 0.025};
    }
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            double v = cfg.background_level;
            for (const auto& w : waves) v += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
            gray(y, x) = v;
        }

    const int normal_count = uniform_count(rng, cfg.normal_count_min, cfg.normal_count_max);
    for (int i = 0; i < normal_count; ++i) {
        const double r = uniform(rng, cfg.normal_radius_min, cfg.normal_radius_max);
        double cx = 0.0, cy = 0.0;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            cx = uniform(rng, 0.0, size);
            cy = uniform(rng, 0.0, size);
            placed = std::all_of(blobs.begin(), blobs.end(), [&](const Blob& o) {
                return std::hypot(cx - o.cx, cy - o.cy) >= o.extent + r + 1.0;
            });
        }
        if (!placed) continue;
        const double shade = cfg.normal_intensity + uniform(rng, -0.05, 0.05);
        const auto y0 = static_cast<long>(std::floor(cy - r)), y1 = static_cast<long>(std::ceil(cy + r));
        const auto x0 = static_cast<long>(std::floor(cx - r)), x1 = static_cast<long>(std::ceil(cx + r));
        for (long y = std::max(0L, y0); y <= std::min<long>(n - 1, y1); ++y)
            for (long x = std::max(0L, x0); x <= std::min<long>(n - 1, x1); ++x)
                if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r) gray(y, x) = shade;
    }

    LabelMask mask(n, n, 0);
    for (const Blob& b : blobs) {
        const double shade = cfg.abnormal_intensity + uniform(rng, -0.04, 0.04);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double level = blob_level(b, cfg.abnormal_irregularity, x + 0.5, y + 0.5);
                if (level > 1.0) continue;
                gray(y, x) = level <= cfg.abnormal_core_fraction ? cfg.abnormal_core_intensity : shade;
                mask.at(y, x) = mask_id(1);
            }
    }

    Sample s;
    s.id = "synth_" + std::to_string(index);
    s.image = Tensor({cfg.channels, n, n});
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double v = std::clamp(gray(y, x) + cfg.noise_level * standard_normal(rng), 0.0, 1.0);
            const double q = std::round(v * 255.0) / 255.0;
            for (std::size_t c = 0; c < cfg.channels; ++c) s.image(c, y, x) = q;
        }
    s.label = abnormal_count > 0 ? std::vector<int>{0, 1} : std::vector<int>{1, 0};
    s.gt_mask = std::move(mask);
    return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
        const auto b = field.find_first_not_of(" \t\r");
        const auto e = field.find_last_not_of(" \t\r");
        fields.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
    }
    return fields;
}

}  // namespace

void SynthConfig::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("synthetic config: " + what); };
    if (image_size == 0) fail("image_size must be positive");
    if (patch_multiple == 0 || image_size % patch_multiple != 0)
        fail("image_size " + std::to_string(image_size) + " is not divisible by the largest patch size " +
             std::to_string(patch_multiple));
    if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
    if (!(abnormal_fraction >= 0.0 && abnormal_fraction <= 1.0)) fail("abnormal_fraction must lie in [0,1]");
    if (normal_count_min < 0 || normal_count_max < normal_count_min) fail("invalid normal count range");
    if (abnormal_count_min < 0 || abnormal_count_max < abnormal_count_min) fail("invalid abnormal count range");
    if (!(normal_radius_min > 0.0 && normal_radius_max >= normal_radius_min)) fail("invalid normal radius range");
    if (!(abnormal_radius_min > 0.0 && abnormal_radius_max >= abnormal_radius_min)) fail("invalid abnormal radius range");
    if (!(abnormal_eccentricity >= 1.0)) fail("abnormal_eccentricity must be >= 1");
    if (!(abnormal_irregularity >= 0.0 && abnormal_irregularity < 1.0)) fail("abnormal_irregularity must lie in [0,1)");
    if (!(abnormal_core_fraction >= 0.0 && abnormal_core_fraction <= 1.0)) fail("abnormal_core_fraction must lie in [0,1]");
    if (!(noise_level >= 0.0)) fail("noise_level must be non-negative");
}

std::vector<Sample> generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::vector<Sample> samples;
    samples.reserve(cfg.num_samples);
    for (std::size_t i = 0; i < cfg.num_samples; ++i) samples.push_back(render_sample(cfg, seed, i));
    return samples;
}

DirectoryDataset load_directory(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    DirectoryDataset out;
    const fs::path image_dir = root / "images";
    if (!fs::is_directory(image_dir)) return out;

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(image_dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".pgm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) return out;

    const fs::path labels_path = root / "labels.csv";
    std::ifstream labels_in(labels_path);
    if (!labels_in) throw std::runtime_error("cannot open " + labels_path.string());
    std::string line;
    if (!std::getline(labels_in, line)) throw std::runtime_error(labels_path.string() + " is empty");
    const auto header = split_csv_line(line);
    if (header.size() < 2 || header[0] != "filename")
        throw std::runtime_error(labels_path.string() + ": header must be filename,class_0,...");
    const std::size_t k = header.size() - 1;
    std::map<std::string, std::vector<int>> labels;
    for (std::size_t row = 2; std::getline(labels_in, line); ++row) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != k + 1)
            throw std::runtime_error(labels_path.string() + ":" + std::to_string(row) + ": expected " +
                                     std::to_string(k + 1) + " fields");
        std::vector<int> indicators;
        for (std::size_t c = 1; c <= k; ++c) {
            if (fields[c] != "0" && fields[c] != "1")
                throw std::runtime_error(labels_path.string() + ":" + std::to_string(row) +
                                         ": class indicators must be 0 or 1");
            indicators.push_back(fields[c] == "1" ? 1 : 0);
        }
        if (std::none_of(indicators.begin(), indicators.end(), [](int v) { return v == 1; }))
            throw std::runtime_error(labels_path.string() + ":" + std::to_string(row) + ": row for " + fields[0] +
                                     " has no positive class");
        labels[fields[0]] = std::move(indicators);
    }

    std::size_t used = 0;
    for (const fs::path& file : files) {
        const std::string name = file.filename().string();
        const auto it = labels.find(name);
        if (it == labels.end()) throw std::runtime_error("missing label row for " + name + " in " + labels_path.string());
        ++used;
        Sample s;
        s.id = file.stem().string();
        s.image = raster_to_tensor(read_raster(file));
        s.label = it->second;
        const fs::path mask_path = root / "masks" / (file.stem().string() + ".png");
        if (fs::exists(mask_path)) {
            const Raster m = read_raster(mask_path);
            if (m.width != s.image.dim(2) || m.height != s.image.dim(1))
                throw std::runtime_error("mask " + mask_path.string() + " size does not match image " + name);
            if (m.channels != 1) throw std::runtime_error("mask " + mask_path.string() + " must be single-channel");
            LabelMask mask(m.height, m.width);
            for (std::size_t i = 0; i < mask.size(); ++i) {
                if (m.pixels[i] > k)
                    throw std::runtime_error("mask " + mask_path.string() + " has class id " +
                                             std::to_string(m.pixels[i]) + " outside [0," + std::to_string(k) + "]");
                mask.ids[i] = m.pixels[i];
            }
            s.gt_mask = std::move(mask);
        }
        out.samples.push_back(std::move(s));
    }
    if (used < labels.size())
        out.warnings.push_back(std::to_string(labels.size() - used) + " label row(s) have no matching image");
    return out;
}

void save_directory(const std::filesystem::path& root, std::span<const Sample> samples) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    std::ofstream labels(root / "labels.csv");
    if (!labels) throw std::runtime_error("cannot write " + (root / "labels.csv").string());
    const std::size_t k = samples.empty() ? SynthConfig::num_classes : samples.front().label.size();
    labels << "filename";
    for (std::size_t c = 0; c < k; ++c) labels << ",class_" << c;
    labels << "\n";
    for (const Sample& s : samples) {
        const std::string name = s.id + ".png";
        write_png(root / "images" / name, tensor_to_raster(s.image));
        labels << name;
        for (int v : s.label) labels << "," << v;
        labels << "\n";
        if (s.gt_mask) {
            fs::create_directories(root / "masks");
            write_png(root / "masks" / name, Raster{s.gt_mask->width, s.gt_mask->height, 1, s.gt_mask->ids});
        }
    }
}

DatasetSplit split(std::size_t num_samples, const SplitRatios& ratios, std::uint64_t seed) {
    if (!(ratios.train > 0.0 && ratios.val > 0.0 && ratios.test > 0.0) ||
        std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must be positive and sum to 1");
    if (num_samples < 3)
        throw std::invalid_argument("split needs at least 3 samples, got " + std::to_string(num_samples));
    std::vector<std::size_t> order(num_samples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, "split");
    for (std::size_t i = num_samples; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    const auto portion = [&](double r) {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(num_samples * r + 1e-9)));
    };
    const std::size_t n_val = portion(ratios.val);
    const std::size_t n_test = portion(ratios.test);
    if (n_val + n_test >= num_samples) throw std::invalid_argument("split leaves no training samples");
    const std::size_t n_train = num_samples - n_val - n_test;

    DatasetSplit s;
    s.seed = seed;
    s.train.assign(order.begin(), order.begin() + n_train);
    s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    s.test.assign(order.begin() + n_train + n_val, order.end());
    return s;
}

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> members) {
    if (members.empty()) throw std::invalid_argument("make_batch: no members");
    const Sample& first = samples[members.front()];
    const Shape& img = first.image.shape();
    const std::size_t k = first.label.size();
    Batch b{Tensor({members.size(), img[0], img[1], img[2]}), Tensor({members.size(), k}), {}};
    const std::size_t stride = first.image.size();
    for (std::size_t i = 0; i < members.size(); ++i) {
        const Sample& s = samples[members[i]];
        if (s.image.shape() != img || s.label.size() != k)
            throw std::invalid_argument("make_batch: sample " + s.id + " has a different shape or class count");
        std::copy(s.image.data().begin(), s.image.data().end(), b.images.raw() + i * stride);
        for (std::size_t c = 0; c < k; ++c) b.labels(i, c) = s.label[c];
        b.ids.push_back(members[i]);
    }
    return b;
}

std::vector<Batch> batches(std::span<const Sample> samples, std::span<const std::size_t> members,
                           std::size_t batch_size, std::uint64_t seed, std::size_t epoch) {
    if (batch_size < 2) throw std::invalid_argument("batch size must be at least 2 for cross-batch shuffling");
    std::vector<std::size_t> order(members.begin(), members.end());
    Rng rng = make_rng(seed, "batch-order", epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    std::vector<Batch> out;
    for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size)
        out.push_back(make_batch(samples, std::span(order).subspan(start, batch_size)));
    return out;
}

}  // namespace sfl

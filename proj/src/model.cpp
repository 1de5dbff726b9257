#include "sfl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sfl {
namespace {

Tensor kaiming(const Shape& shape, std::size_t fan_in, double gain, Rng& rng) {
    Tensor t(shape);
    const double std_dev = std::sqrt(gain / static_cast<double>(fan_in));
    for (double& v : t.data()) v = std_dev * standard_normal(rng);
    return t;
}

struct Activations {
    Tensor input, a1, p1, a2, p2, a3, p3, pooled, logits;
};

void check_images(const BackboneParams& params, const Tensor& images) {
    if (images.rank() != 4) throw std::invalid_argument("backbone: images must be [N,C,H,W], got " + shape_str(images.shape()));
    if (images.dim(1) != params.config.in_channels)
        throw std::invalid_argument("backbone: expected " + std::to_string(params.config.in_channels) +
                                    " input channels, got " + std::to_string(images.dim(1)));
    if (images.dim(2) % 8 != 0 || images.dim(3) % 8 != 0)
        throw std::invalid_argument("backbone: image height and width must be divisible by 8, got " +
                                    shape_str(images.shape()));
}

Tensor center_input(const Tensor& images) {
    Tensor x = images;
    for (double& v : x.data()) v -= kInputShift;
    return x;
}

Activations run_forward(const BackboneParams& p, const Tensor& images) {
    check_images(p, images);
    Activations a;
    a.input = center_input(images);
    a.a1 = conv2d(a.input, p.conv1_w, p.conv1_b, 1, 1);
    a.p1 = avg_pool2(relu(a.a1));
    a.a2 = conv2d(a.p1, p.conv2_w, p.conv2_b, 1, 1);
    a.p2 = avg_pool2(relu(a.a2));
    a.a3 = conv2d(a.p2, p.conv3_w, p.conv3_b, 1, 1);
    a.p3 = avg_pool2(relu(a.a3));
    a.pooled = global_avg_pool(a.p3);
    a.logits = linear(a.pooled, p.cls_w, p.cls_b);
    return a;
}

std::vector<Tensor> run_backward(const BackboneParams& p, const Activations& a,
                                 const Tensor& grad_logits) {
    LinearGrads head = linear_backward(a.pooled, p.cls_w, grad_logits);
    Tensor d = global_avg_pool_backward(head.input, a.p3.shape());
    d = relu_backward(a.a3, avg_pool2_backward(d));
    ConvGrads c3 = conv2d_backward(a.p2, p.conv3_w, d, 1, 1);
    d = relu_backward(a.a2, avg_pool2_backward(c3.input));
    ConvGrads c2 = conv2d_backward(a.p1, p.conv2_w, d, 1, 1);
    d = relu_backward(a.a1, avg_pool2_backward(c2.input));
    ConvGrads c1 = conv2d_backward(a.input, p.conv1_w, d, 1, 1, false);
    std::vector<Tensor> grads;
    grads.push_back(std::move(c1.kernel));
    grads.push_back(std::move(c1.bias));
    grads.push_back(std::move(c2.kernel));
    grads.push_back(std::move(c2.bias));
    grads.push_back(std::move(c3.kernel));
    grads.push_back(std::move(c3.bias));
    grads.push_back(std::move(head.weight));
    grads.push_back(std::move(head.bias));
    return grads;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    Shape s = a.shape();
    s[0] += b.dim(0);
    Tensor out(s);
    std::copy(a.data().begin(), a.data().end(), out.raw());
    std::copy(b.data().begin(), b.data().end(), out.raw() + a.size());
    return out;
}

// Concatenates [N,C1,h,w] and [N,C2,h,w] along channels.
Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.dim(0), area = a.dim(2) * a.dim(3);
    const std::size_t ca = a.dim(1), cb = b.dim(1);
    Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.raw() + i * ca * area, ca * area, out.raw() + i * (ca + cb) * area);
        std::copy_n(b.raw() + i * cb * area, cb * area, out.raw() + (i * (ca + cb) + ca) * area);
    }
    return out;
}

Tensor slice_first(const Tensor& t) {
    Shape s(t.shape().begin() + 1, t.shape().end());
    return Tensor(s, std::vector<double>(t.raw(), t.raw() + shape_numel(s)));
}

}  // namespace

BackboneParams BackboneParams::init(const ModelConfig& config, Rng& rng) {
    if (config.in_channels == 0 || config.num_classes == 0 || config.theta_dim == 0 ||
        std::any_of(config.widths.begin(), config.widths.end(), [](std::size_t w) { return w == 0; }))
        throw std::invalid_argument("model config: all widths and counts must be positive");
    const auto& w = config.widths;
    BackboneParams p;
    p.config = config;
    p.conv1_w = kaiming({w[0], config.in_channels, 3, 3}, config.in_channels * 9, 2.0, rng);
    p.conv1_b = Tensor({w[0]});
    p.conv2_w = kaiming({w[1], w[0], 3, 3}, w[0] * 9, 2.0, rng);
    p.conv2_b = Tensor({w[1]});
    p.conv3_w = kaiming({w[2], w[1], 3, 3}, w[1] * 9, 2.0, rng);
    p.conv3_b = Tensor({w[2]});
    p.cls_w = kaiming({config.num_classes, w[2]}, w[2], 1.0, rng);
    p.cls_b = Tensor({config.num_classes});
    p.theta = kaiming({config.theta_dim, config.hidden_dim()}, config.hidden_dim(), 1.0, rng);
    return p;
}

std::vector<Tensor*> BackboneParams::trainable() {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w, &conv3_b, &cls_w, &cls_b};
}

std::vector<const Tensor*> BackboneParams::trainable() const {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w, &conv3_b, &cls_w, &cls_b};
}

std::vector<std::pair<std::string, Tensor*>> BackboneParams::named() {
    return {{"conv1.weight", &conv1_w}, {"conv1.bias", &conv1_b}, {"conv2.weight", &conv2_w},
            {"conv2.bias", &conv2_b},   {"conv3.weight", &conv3_w}, {"conv3.bias", &conv3_b},
            {"cls.weight", &cls_w},     {"cls.bias", &cls_b},     {"pcm.theta", &theta}};
}

std::vector<std::pair<std::string, const Tensor*>> BackboneParams::named() const {
    auto& self = const_cast<BackboneParams&>(*this);
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [name, t] : self.named()) out.emplace_back(name, t);
    return out;
}

ForwardResult forward_classify(const BackboneParams& params, const Tensor& images) {
    Activations a = run_forward(params, images);
    const std::size_t k = params.config.num_classes, width = params.config.widths[2];
    ForwardResult r;
    r.logits = std::move(a.logits);
    r.class_features = conv2d(a.p3, params.cls_w.reshaped({k, width, 1, 1}), params.cls_b, 1, 0);
    r.hidden = concat_channels(avg_pool2(a.p2), a.p3);
    return r;
}

TwinLoss twin_loss(const BackboneParams& params, const Tensor& orig_images, const Tensor& orig_targets,
                   const Tensor& mixed_images, const Tensor& mixed_targets) {
    if (orig_images.shape() != mixed_images.shape())
        throw std::invalid_argument("twin_loss: original and mixed batches differ in shape");
    require_same_shape(orig_targets, mixed_targets, "twin_loss targets");
    const std::size_t n = orig_images.dim(0), k = orig_targets.dim(1);
    const Tensor images = concat_rows(orig_images, mixed_images);
    const Activations a = run_forward(params, images);

    Tensor logits_orig({n, k}), logits_mixed({n, k});
    std::copy_n(a.logits.raw(), n * k, logits_orig.raw());
    std::copy_n(a.logits.raw() + n * k, n * k, logits_mixed.raw());
    const LossResult lo = multilabel_soft_margin_loss(logits_orig, orig_targets);
    const LossResult lm = multilabel_soft_margin_loss(logits_mixed, mixed_targets);

    TwinLoss out;
    out.orig = lo.loss;
    out.mixed = lm.loss;
    out.total = lo.loss + lm.loss;
    if (!std::isfinite(out.total)) return out;
    out.grads = run_backward(params, a, concat_rows(lo.grad, lm.grad));
    return out;
}

StepLosses train_step(BackboneParams& params, const Batch& orig, const MixedBatch& mixed, AdamState& optimizer,
                      const AdamConfig& adam) {
    TwinLoss l = twin_loss(params, orig.images, orig.labels, mixed.images, mixed.soft_labels);
    if (!std::isfinite(l.total)) {
        std::ostringstream msg;
        msg << "non-finite training loss (orig " << l.orig << ", mixed " << l.mixed << ") on samples";
        for (std::size_t id : orig.ids) msg << " " << id;
        throw NonFiniteLoss(msg.str(), orig.ids);
    }
    const std::vector<Tensor*> ps = params.trainable();
    adam_step(ps, l.grads, optimizer, adam);
    return {l.total, l.orig, l.mixed};
}

Tensor cam_extract(const Tensor& class_features, std::size_t class_index) {
    if (class_features.rank() != 3) throw std::invalid_argument("cam_extract: expected [K,h,w]");
    if (class_index >= class_features.dim(0))
        throw std::out_of_range("cam_extract: class " + std::to_string(class_index) + " out of range [0," +
                                std::to_string(class_features.dim(0)) + ")");
    const std::size_t area = class_features.dim(1) * class_features.dim(2);
    return Tensor({class_features.dim(1), class_features.dim(2)},
                  std::vector<double>(class_features.raw() + class_index * area,
                                      class_features.raw() + (class_index + 1) * area));
}

Tensor standardize_features(const Tensor& hidden) {
    if (hidden.rank() != 3) throw std::invalid_argument("standardize_features: expected [D,h,w]");
    const std::size_t d = hidden.dim(0), n = hidden.dim(1) * hidden.dim(2);
    Tensor out(hidden.shape());
    for (std::size_t c = 0; c < d; ++c) {
        const double* x = hidden.raw() + c * n;
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += x[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= static_cast<double>(n);
        if (var <= 1e-24) continue;
        const double inv = 1.0 / std::sqrt(var);
        for (std::size_t i = 0; i < n; ++i) out[c * n + i] = (x[i] - mean) * inv;
    }
    return out;
}

Tensor pcm_affinity(const Tensor& features, const Tensor& theta) {
    if (features.rank() != 3 || theta.rank() != 2 || theta.dim(1) != features.dim(0))
        throw std::invalid_argument("pcm_affinity: incompatible shapes X" + shape_str(features.shape()) + " theta" +
                                    shape_str(theta.shape()));
    constexpr double kNormGuard = 1e-8;
    const std::size_t d = features.dim(0), e = theta.dim(0);
    const std::size_t pixels = features.dim(1) * features.dim(2);
    // Embedding z = theta x per pixel, stored [pixels, e].
    std::vector<double> z(pixels * e, 0.0), norm(pixels);
    for (std::size_t i = 0; i < pixels; ++i) {
        double sq = 0.0;
        for (std::size_t r = 0; r < e; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += theta[r * d + c] * features[c * pixels + i];
            z[i * e + r] = acc;
            sq += acc * acc;
        }
        norm[i] = std::sqrt(sq) + kNormGuard;
    }
    Tensor a({pixels, pixels});
    for (std::size_t i = 0; i < pixels; ++i)
        for (std::size_t j = i; j < pixels; ++j) {
            double dot = 0.0;
            for (std::size_t r = 0; r < e; ++r) dot += z[i * e + r] * z[j * e + r];
            const double cosine = dot / (norm[i] * norm[j]);
            a(i, j) = a(j, i) = cosine > 0.0 ? cosine : 0.0;
        }
    return a;
}

Tensor pcm_refine(const Tensor& raw_cam, const Tensor& affinity) {
    if (raw_cam.rank() != 3) throw std::invalid_argument("pcm_refine: CAM must be [K,h,w]");
    const std::size_t k = raw_cam.dim(0), pixels = raw_cam.dim(1) * raw_cam.dim(2);
    if (affinity.shape() != Shape{pixels, pixels})
        throw std::invalid_argument("pcm_refine: affinity " + shape_str(affinity.shape()) + " does not match " +
                                    std::to_string(pixels) + " pixels");
    for (double v : affinity.data())
        if (!(v >= 0.0)) throw std::invalid_argument("pcm_refine: affinity must be non-negative");

    const Tensor y = relu(raw_cam);
    std::vector<double> lo(k), hi(k);
    for (std::size_t c = 0; c < k; ++c) {
        const auto first = y.data().begin() + static_cast<std::ptrdiff_t>(c * pixels);
        const auto [mn, mx] = std::minmax_element(first, first + static_cast<std::ptrdiff_t>(pixels));
        lo[c] = *mn;
        hi[c] = *mx;
    }
    Tensor out(raw_cam.shape());
    std::vector<double> row(pixels);
    for (std::size_t i = 0; i < pixels; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < pixels; ++j) sum += affinity(i, j);
        if (sum > 0.0) {
            for (std::size_t j = 0; j < pixels; ++j) row[j] = affinity(i, j) / sum;
        } else {
            std::fill(row.begin(), row.end(), 0.0);
            row[i] = 1.0;
        }
        for (std::size_t c = 0; c < k; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < pixels; ++j) acc += row[j] * y[c * pixels + j];
            out[c * pixels + i] = std::clamp(acc, lo[c], hi[c]);
        }
    }
    return out;
}

CamStack infer_cams(const BackboneParams& params, const Tensor& image) {
    if (image.rank() != 3) throw std::invalid_argument("infer_cams: image must be [C,H,W]");
    Shape s{1};
    s.insert(s.end(), image.shape().begin(), image.shape().end());
    const ForwardResult f = forward_classify(params, image.reshaped(s));
    CamStack stack;
    stack.raw_cam = slice_first(f.class_features);
    stack.features = standardize_features(slice_first(f.hidden));
    stack.logits = slice_first(f.logits);
    stack.refined_cam = pcm_refine(stack.raw_cam, pcm_affinity(stack.features, params.theta));
    return stack;
}

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'F', 'L', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const BackboneParams& params, std::uint64_t config_hash) {
    static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put<std::uint64_t>(out, config_hash);
    const ModelConfig& c = params.config;
    for (std::uint64_t v : {std::uint64_t(c.in_channels), std::uint64_t(c.num_classes), std::uint64_t(c.widths[0]),
                            std::uint64_t(c.widths[1]), std::uint64_t(c.widths[2]), std::uint64_t(c.theta_dim)})
        put(out, v);
    const auto tensors = params.named();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) put<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(t->raw()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("error while writing checkpoint " + path.string());
}

BackboneParams load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[sizeof kCheckpointMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw std::runtime_error(path.string() + " is not a checkpoint");
    const auto hash = get<std::uint64_t>(in, path);
    if (hash != expected_hash) {
        std::ostringstream msg;
        msg << "checkpoint " << path.string() << " was written for config hash " << std::hex << hash
            << ", current config hash is " << expected_hash;
        throw std::runtime_error(msg.str());
    }
    ModelConfig c;
    c.in_channels = get<std::uint64_t>(in, path);
    c.num_classes = get<std::uint64_t>(in, path);
    for (auto& w : c.widths) w = get<std::uint64_t>(in, path);
    c.theta_dim = get<std::uint64_t>(in, path);
    Rng unused(0);
    BackboneParams p = BackboneParams::init(c, unused);
    auto tensors = p.named();
    const auto count = get<std::uint32_t>(in, path);
    if (count != tensors.size()) throw std::runtime_error("checkpoint " + path.string() + " has wrong tensor count");
    for (auto& [name, t] : tensors) {
        const auto len = get<std::uint32_t>(in, path);
        std::string stored(len, '\0');
        in.read(stored.data(), len);
        if (stored != name) throw std::runtime_error("checkpoint tensor '" + stored + "' where '" + name + "' expected");
        const auto rank = get<std::uint32_t>(in, path);
        Shape shape(rank);
        for (auto& d : shape) d = get<std::uint64_t>(in, path);
        if (shape != t->shape())
            throw std::runtime_error("checkpoint tensor " + name + " has shape " + shape_str(shape) + ", expected " +
                                     shape_str(t->shape()));
        in.read(reinterpret_cast<char*>(t->raw()), static_cast<std::streamsize>(t->size() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
    }
    return p;
}

}  // namespace sfl

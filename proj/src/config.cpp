#include "sfl/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

namespace sfl {

std::string to_string(DataSource s) { return s == DataSource::synthetic ? "synthetic" : "directory"; }
std::string to_string(ClassFilter f) { return f == ClassFilter::label ? "label" : "none"; }

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Shortest text that parses back to the same double; plain decimals are
// kept when they are short (0.0001 rather than 1e-04).
std::string fmt_double(double v) {
    char buf[400];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    std::string text(buf, end);
    if (text.find('e') != std::string::npos) {
        const auto [fend, fec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed);
        if (fec == std::errc() && fend - buf <= 12) text.assign(buf, fend);
    }
    return text;
}

double parse_double(const std::string& key, const std::string& text) {
    double v = 0.0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size() || !std::isfinite(v))
        throw ConfigError(key + ": expected a number, got '" + text + "'");
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size() || text.empty())
        throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
    return v;
}

int parse_int(const std::string& key, const std::string& text) {
    int v = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size() || text.empty())
        throw ConfigError(key + ": expected an integer, got '" + text + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true") return true;
    if (text == "false") return false;
    throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_u64(key, trim(item)));
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
    return out;
}

template <typename F>
auto wrap_enum(const std::string& key, const std::string& text, F parse) {
    try {
        return parse(text);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
    bool hashed;
};

#define SFL_DOUBLE(KEY, MEMBER, HASHED)                                                                   \
    Field {                                                                                               \
        KEY, [](const RunConfig& c) { return fmt_double(c.MEMBER); },                                     \
            [](RunConfig& c, const std::string& v) { c.MEMBER = parse_double(KEY, v); }, HASHED           \
    }
#define SFL_SIZE(KEY, MEMBER, HASHED)                                                                     \
    Field {                                                                                               \
        KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },                                 \
            [](RunConfig& c, const std::string& v) { c.MEMBER = parse_u64(KEY, v); }, HASHED              \
    }
#define SFL_INT(KEY, MEMBER, HASHED)                                                                      \
    Field {                                                                                               \
        KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },                                 \
            [](RunConfig& c, const std::string& v) { c.MEMBER = parse_int(KEY, v); }, HASHED              \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        SFL_SIZE("seed", seed, true),

        {"dataset.source", [](const RunConfig& c) { return to_string(c.dataset.source); },
         [](RunConfig& c, const std::string& v) {
             if (v == "synthetic") c.dataset.source = DataSource::synthetic;
             else if (v == "directory") c.dataset.source = DataSource::directory;
             else throw ConfigError("dataset.source: expected synthetic or directory, got '" + v + "'");
         },
         true},
        {"dataset.path", [](const RunConfig& c) { return c.dataset.path.string(); },
         [](RunConfig& c, const std::string& v) { c.dataset.path = v; }, true},
        SFL_SIZE("dataset.image_size", dataset.synth.image_size, true),
        SFL_SIZE("dataset.channels", dataset.synth.channels, true),
        SFL_SIZE("dataset.num_samples", dataset.synth.num_samples, true),
        SFL_DOUBLE("dataset.abnormal_fraction", dataset.synth.abnormal_fraction, true),
        SFL_INT("dataset.normal_count_min", dataset.synth.normal_count_min, true),
        SFL_INT("dataset.normal_count_max", dataset.synth.normal_count_max, true),
        SFL_DOUBLE("dataset.normal_radius_min", dataset.synth.normal_radius_min, true),
        SFL_DOUBLE("dataset.normal_radius_max", dataset.synth.normal_radius_max, true),
        SFL_DOUBLE("dataset.normal_intensity", dataset.synth.normal_intensity, true),
        SFL_INT("dataset.abnormal_count_min", dataset.synth.abnormal_count_min, true),
        SFL_INT("dataset.abnormal_count_max", dataset.synth.abnormal_count_max, true),
        SFL_DOUBLE("dataset.abnormal_radius_min", dataset.synth.abnormal_radius_min, true),
        SFL_DOUBLE("dataset.abnormal_radius_max", dataset.synth.abnormal_radius_max, true),
        SFL_DOUBLE("dataset.abnormal_eccentricity", dataset.synth.abnormal_eccentricity, true),
        SFL_DOUBLE("dataset.abnormal_irregularity", dataset.synth.abnormal_irregularity, true),
        SFL_DOUBLE("dataset.abnormal_intensity", dataset.synth.abnormal_intensity, true),
        SFL_DOUBLE("dataset.abnormal_core_intensity", dataset.synth.abnormal_core_intensity, true),
        SFL_DOUBLE("dataset.abnormal_core_fraction", dataset.synth.abnormal_core_fraction, true),
        SFL_DOUBLE("dataset.background_level", dataset.synth.background_level, true),
        SFL_DOUBLE("dataset.noise_level", dataset.synth.noise_level, true),
        SFL_DOUBLE("dataset.split_train", dataset.ratios.train, true),
        SFL_DOUBLE("dataset.split_val", dataset.ratios.val, true),
        SFL_DOUBLE("dataset.split_test", dataset.ratios.test, true),

        {"schedule.patch_sizes",
         [](const RunConfig& c) {
             std::string s;
             for (std::size_t p : c.schedule.schedule.patch_sizes) s += (s.empty() ? "" : ",") + std::to_string(p);
             return s;
         },
         [](RunConfig& c, const std::string& v) { c.schedule.schedule.patch_sizes = parse_list("schedule.patch_sizes", v); },
         true},
        SFL_DOUBLE("schedule.alpha", schedule.schedule.alpha, true),
        SFL_DOUBLE("schedule.f_init", schedule.schedule.f_init, true),
        SFL_DOUBLE("schedule.f_min", schedule.schedule.f_min, true),
        SFL_DOUBLE("schedule.f_max", schedule.schedule.f_max, true),
        SFL_DOUBLE("schedule.t_init", schedule.schedule.t_init, true),
        SFL_DOUBLE("schedule.t_decay", schedule.schedule.t_decay, true),
        {"schedule.mode", [](const RunConfig& c) { return to_string(c.schedule.schedule.mode); },
         [](RunConfig& c, const std::string& v) {
             c.schedule.schedule.mode = wrap_enum("schedule.mode", v, parse_schedule_mode);
         },
         true},
        {"schedule.variant", [](const RunConfig& c) { return to_string(c.schedule.variant); },
         [](RunConfig& c, const std::string& v) {
             c.schedule.variant = wrap_enum("schedule.variant", v, parse_shuffle_variant);
         },
         true},
        {"schedule.label_blend", [](const RunConfig& c) { return to_string(c.schedule.blend); },
         [](RunConfig& c, const std::string& v) {
             c.schedule.blend = wrap_enum("schedule.label_blend", v, parse_label_blend);
         },
         true},
        {"schedule.shuffle", [](const RunConfig& c) { return std::string(c.schedule.shuffle ? "true" : "false"); },
         [](RunConfig& c, const std::string& v) { c.schedule.shuffle = parse_bool("schedule.shuffle", v); }, true},

        SFL_SIZE("model.width1", model.widths[0], true),
        SFL_SIZE("model.width2", model.widths[1], true),
        SFL_SIZE("model.width3", model.widths[2], true),
        SFL_SIZE("model.theta_dim", model.theta_dim, true),

        SFL_DOUBLE("train.lr", train.adam.lr, true),
        SFL_DOUBLE("train.beta1", train.adam.beta1, true),
        SFL_DOUBLE("train.beta2", train.adam.beta2, true),
        SFL_DOUBLE("train.eps", train.adam.eps, true),
        SFL_SIZE("train.batch_size", train.batch_size, true),
        SFL_SIZE("train.epochs", train.epochs, true),
        SFL_SIZE("train.max_steps", train.max_steps, true),
        SFL_DOUBLE("train.loss_ema", train.loss_ema, true),

        SFL_DOUBLE("eval.threshold", eval.threshold, false),
        {"eval.averaging", [](const RunConfig& c) { return to_string(c.eval.averaging); },
         [](RunConfig& c, const std::string& v) { c.eval.averaging = wrap_enum("eval.averaging", v, parse_averaging); },
         false},
        {"eval.cam", [](const RunConfig& c) { return to_string(c.eval.cam); },
         [](RunConfig& c, const std::string& v) { c.eval.cam = wrap_enum("eval.cam", v, parse_cam_source); }, false},
        {"eval.class_filter", [](const RunConfig& c) { return to_string(c.eval.class_filter); },
         [](RunConfig& c, const std::string& v) {
             if (v == "label") c.eval.class_filter = ClassFilter::label;
             else if (v == "none") c.eval.class_filter = ClassFilter::none;
             else throw ConfigError("eval.class_filter: expected label or none, got '" + v + "'");
         },
         false},
        {"eval.split", [](const RunConfig& c) { return c.eval.split; },
         [](RunConfig& c, const std::string& v) {
             if (v != "val" && v != "test") throw ConfigError("eval.split: expected val or test, got '" + v + "'");
             c.eval.split = v;
         },
         false},

        {"output.dir", [](const RunConfig& c) { return c.output_dir.string(); },
         [](RunConfig& c, const std::string& v) { c.output_dir = v; }, false},
    };
    return table;
}

#undef SFL_DOUBLE
#undef SFL_SIZE
#undef SFL_INT

const Field& find_field(const std::string& key) {
    for (const auto& f : fields())
        if (f.key == key) return f;
    throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
    auto check = [](bool ok, const std::string& key, const std::string& why) {
        if (!ok) throw ConfigError(key + ": " + why);
    };
    const auto& s = dataset.synth;
    check(s.image_size > 0, "dataset.image_size", "must be positive");
    check(s.image_size % 8 == 0, "dataset.image_size", "must be a multiple of 8");
    check(s.channels == model.in_channels || dataset.source == DataSource::directory, "dataset.channels",
          "must be 1 for the default model");
    check(s.num_samples >= 3, "dataset.num_samples", "need at least 3 samples");
    check(s.abnormal_fraction >= 0.0 && s.abnormal_fraction <= 1.0, "dataset.abnormal_fraction", "must lie in [0,1]");
    check(s.normal_count_min >= 0 && s.normal_count_min <= s.normal_count_max, "dataset.normal_count_min",
          "must be in [0, normal_count_max]");
    check(s.abnormal_count_min >= 0 && s.abnormal_count_min <= s.abnormal_count_max, "dataset.abnormal_count_min",
          "must be in [0, abnormal_count_max]");
    check(s.normal_radius_min > 0 && s.normal_radius_min <= s.normal_radius_max, "dataset.normal_radius_min",
          "must be in (0, normal_radius_max]");
    check(s.abnormal_radius_min > 0 && s.abnormal_radius_min <= s.abnormal_radius_max, "dataset.abnormal_radius_min",
          "must be in (0, abnormal_radius_max]");
    check(s.abnormal_eccentricity >= 1.0, "dataset.abnormal_eccentricity", "must be >= 1");
    check(s.noise_level >= 0.0, "dataset.noise_level", "must be >= 0");
    check(dataset.source == DataSource::synthetic || !dataset.path.empty(), "dataset.path",
          "required when dataset.source = directory");
    const auto& r = dataset.ratios;
    check(r.train > 0 && r.val > 0 && r.test > 0, "dataset.split_train", "split ratios must be positive");
    check(std::abs(r.train + r.val + r.test - 1.0) < 1e-9, "dataset.split_train", "split ratios must sum to 1");

    try {
        schedule.schedule.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("schedule: ") + e.what());
    }
    if (dataset.source == DataSource::synthetic) {
        check(s.image_size % schedule.schedule.patch_sizes.front() == 0, "schedule.patch_sizes",
              "largest patch size must divide dataset.image_size");
    }
    for (std::size_t p : schedule.schedule.patch_sizes)
        check(s.image_size % p == 0 || dataset.source == DataSource::directory, "schedule.patch_sizes",
              "patch size " + std::to_string(p) + " does not divide the image size");

    for (std::size_t w : model.widths) check(w > 0, "model.width1", "channel widths must be positive");
    check(model.theta_dim > 0, "model.theta_dim", "must be positive");

    check(train.adam.lr >= 0.0, "train.lr", "must be >= 0");
    check(train.adam.beta1 >= 0.0 && train.adam.beta1 < 1.0, "train.beta1", "must lie in [0,1)");
    check(train.adam.beta2 >= 0.0 && train.adam.beta2 < 1.0, "train.beta2", "must lie in [0,1)");
    check(train.adam.eps > 0.0, "train.eps", "must be positive");
    check(train.batch_size >= 2, "train.batch_size", "cross-batch shuffling needs at least 2 images");
    check(train.loss_ema >= 0.0 && train.loss_ema < 1.0, "train.loss_ema", "must lie in [0,1)");

    check(eval.threshold > 0.0 && eval.threshold < 1.0, "eval.threshold", "must lie in (0,1)");
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    find_field(key).set(config, value);
}

RunConfig parse_config(const std::string& text) {
    RunConfig config;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        try {
            set_config_value(config, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return config;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string format_config(const RunConfig& config) {
    std::string out;
    for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
    return out;
}

std::uint64_t config_hash(const RunConfig& config) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& f : fields()) {
        if (!f.hashed) continue;
        const std::string line = f.key + "=" + f.get(config) + "\n";
        for (unsigned char ch : line) {
            h ^= ch;
            h *= 1099511628211ull;
        }
    }
    return h;
}

std::string hash_hex(std::uint64_t hash) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
    return buf;
}

}  // namespace sfl

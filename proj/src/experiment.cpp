#include "sfl/experiment.hpp"

#include "sfl/image_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace sfl {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream out(path, mode);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

std::string hash_comment(std::uint64_t hash) { return "# config_hash " + hash_hex(hash) + "\n"; }

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

void write_record_files(const fs::path& dir, const RunConfig& config, const TrainRecord& record) {
    const std::uint64_t hash = config_hash(config);
    {
        auto out = open_out(dir / "config.txt");
        out << hash_comment(hash) << format_config(config);
    }
    save_checkpoint(dir / "checkpoint.bin", record.params, hash);
    {
        auto out = open_out(dir / "loss.csv");
        out << hash_comment(hash);
        write_loss_csv(out, record.losses);
    }
    {
        auto out = open_out(dir / "curriculum.log");
        out << hash_comment(hash);
        write_history(out, record.history);
    }
    {
        auto out = open_out(dir / "timings.txt");
        out << hash_comment(hash) << "train_seconds = " << record.seconds << "\n"
            << "steps = " << record.losses.size() << "\n";
    }
}

}  // namespace

const std::vector<std::size_t>& Dataset::members(const std::string& split_name) const {
    if (split_name == "train") return split.train;
    if (split_name == "val") return split.val;
    if (split_name == "test") return split.test;
    throw ConfigError("unknown split '" + split_name + "' (train|val|test)");
}

Dataset load_dataset(const RunConfig& config) {
    config.validate();
    Dataset data;
    if (config.dataset.source == DataSource::synthetic) {
        SynthConfig synth = config.dataset.synth;
        synth.patch_multiple = config.schedule.schedule.patch_sizes.front();
        try {
            synth.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("dataset: ") + e.what());
        }
        data.samples = generate_synthetic(synth, derive_seed(config.seed, "data"));
    } else {
        DirectoryDataset loaded = load_directory(config.dataset.path);
        data.samples = std::move(loaded.samples);
        data.warnings = std::move(loaded.warnings);
        for (const Sample& s : data.samples) {
            if (s.image.dim(0) != config.model.in_channels)
                throw ConfigError("dataset.path: " + s.id + " has " + std::to_string(s.image.dim(0)) +
                                  " channels, model expects " + std::to_string(config.model.in_channels));
            if (s.label.size() != config.model.num_classes)
                throw ConfigError("dataset.path: " + s.id + " has " + std::to_string(s.label.size()) +
                                  " labels, model expects " + std::to_string(config.model.num_classes));
            for (std::size_t p : config.schedule.schedule.patch_sizes)
                if (s.image.dim(1) % p != 0 || s.image.dim(2) % p != 0 || s.image.dim(1) % 8 != 0 ||
                    s.image.dim(2) % 8 != 0)
                    throw ConfigError("schedule.patch_sizes: patch size " + std::to_string(p) +
                                      " does not tile image " + s.id);
        }
    }
    try {
        data.split = split(data.samples.size(), config.dataset.ratios, config.seed);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("dataset: ") + e.what());
    }
    return data;
}

TrainRecord train_model(const RunConfig& config, const Dataset& data, std::uint64_t run_seed, std::ostream* log) {
    const auto start = std::chrono::steady_clock::now();
    const ShuffleSchedule& schedule = config.schedule.schedule;
    const TrainConfig& tc = config.train;

    Rng init_rng = make_rng(run_seed, "init");
    Rng shuffle_rng = make_rng(run_seed, "shuffle");
    TrainRecord record{BackboneParams::init(config.model, init_rng), {}, {}, 0.0};
    AdamState adam = AdamState::for_params(record.params.trainable());

    ShuffleState state = ShuffleState::initial(schedule);
    std::size_t iteration = 0;
    double smoothed = 0.0;
    const auto budget_left = [&] { return tc.max_steps == 0 || iteration < tc.max_steps; };

    for (std::size_t epoch = 0; epoch < tc.epochs && budget_left(); ++epoch) {
        state = decay_threshold(std::move(state), schedule, epoch);
        double epoch_loss = 0.0;
        std::size_t epoch_steps = 0;
        for (const Batch& batch : batches(data.samples, data.split.train, tc.batch_size, run_seed, epoch)) {
            if (!budget_left()) break;
            const std::size_t patch = state.patch_size(schedule);
            const double ratio = config.schedule.shuffle ? state.ratio : 0.0;
            const MixedBatch mixed =
                shuffle_batch(batch, patch, ratio, shuffle_rng, config.schedule.variant, config.schedule.blend);
            const StepLosses l = train_step(record.params, batch, mixed, adam, tc.adam);
            smoothed = iteration == 0 ? l.total : tc.loss_ema * smoothed + (1.0 - tc.loss_ema) * l.total;
            record.losses.push_back({iteration, epoch, l.total, l.orig, l.mixed, smoothed, patch, ratio});
            if (config.schedule.shuffle) state = feedback_update(std::move(state), schedule, smoothed, iteration);
            epoch_loss += l.total;
            ++epoch_steps;
            ++iteration;
        }
        if (log && epoch_steps > 0) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "epoch %zu  steps %zu  loss %.4f  ema %.4f  p %zu  f %.3f  T %.4f\n", epoch,
                          epoch_steps, epoch_loss / static_cast<double>(epoch_steps), smoothed,
                          state.patch_size(schedule), state.ratio, state.threshold);
            *log << buf << std::flush;
        }
    }
    record.history = std::move(state.history);
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return record;
}

std::vector<PseudoMask> make_masks(const RunConfig& config, const BackboneParams& params, const Dataset& data,
                                   std::span<const std::size_t> members, std::vector<CamStack>* cams) {
    std::vector<PseudoMask> masks;
    masks.reserve(members.size());
    for (std::size_t idx : members) {
        const Sample& s = data.samples.at(idx);
        CamStack stack = infer_cams(params, s.image);
        const Tensor& cam = config.eval.cam == CamSource::refined ? stack.refined_cam : stack.raw_cam;
        std::span<const int> allowed;
        if (config.eval.class_filter == ClassFilter::label) allowed = s.label;
        masks.push_back(cam_to_mask(cam, config.eval.threshold, s.image.dim(1), s.image.dim(2), allowed, s.id));
        if (cams) cams->push_back(std::move(stack));
    }
    return masks;
}

std::map<std::string, LabelMask> ground_truth(const Dataset& data, std::span<const std::size_t> members) {
    std::map<std::string, LabelMask> gt;
    for (std::size_t idx : members) {
        const Sample& s = data.samples.at(idx);
        if (s.gt_mask) gt.emplace(s.id, *s.gt_mask);
    }
    return gt;
}

void write_loss_csv(std::ostream& out, std::span<const IterationLog> losses) {
    out << "iteration,epoch,total,orig,mixed,smoothed,patch_size,ratio\n";
    for (const auto& l : losses)
        out << l.iteration << ',' << l.epoch << ',' << fmt(l.total) << ',' << fmt(l.orig) << ',' << fmt(l.mixed) << ','
            << fmt(l.smoothed) << ',' << l.patch << ',' << fmt(l.ratio) << '\n';
}

std::vector<IterationLog> read_loss_csv(std::istream& in) {
    std::vector<IterationLog> out;
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
        if (line.empty() || line.starts_with("#")) continue;
        if (!header) {
            if (!line.starts_with("iteration,")) throw std::runtime_error("loss log: missing header");
            header = true;
            continue;
        }
        const auto f = split_fields(line);
        if (f.size() != 8) throw std::runtime_error("loss log: malformed row '" + line + "'");
        out.push_back({std::stoull(f[0]), std::stoull(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                       std::stod(f[5]), std::stoull(f[6]), std::stod(f[7])});
    }
    if (!header) throw std::runtime_error("loss log: missing header");
    return out;
}

TrainRecord cmd_train(const RunConfig& config, const fs::path& out_dir, std::ostream* log) {
    const Dataset data = load_dataset(config);
    fs::create_directories(out_dir);
    {
        auto out = open_out(out_dir / "config.txt");
        out << hash_comment(config_hash(config)) << format_config(config);
    }
    if (log)
        *log << "dataset: " << data.samples.size() << " samples, split " << data.split.train.size() << "/"
             << data.split.val.size() << "/" << data.split.test.size() << "\n";
    TrainRecord record = train_model(config, data, config.seed, log);
    write_record_files(out_dir, config, record);
    return record;
}

std::size_t cmd_genmask(const RunConfig& config, const fs::path& checkpoint, const std::string& split_name,
                        const fs::path& out_dir) {
    const std::uint64_t hash = config_hash(config);
    const BackboneParams params = load_checkpoint(checkpoint, hash);
    const Dataset data = load_dataset(config);
    const auto& members = data.members(split_name);

    fs::create_directories(out_dir / "masks");
    fs::create_directories(out_dir / "cams");
    std::vector<CamStack> cams;
    const std::vector<PseudoMask> masks = make_masks(config, params, data, members, &cams);

    nlohmann::ordered_json ids = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const PseudoMask& m = masks[i];
        write_png(out_dir / "masks" / (m.source_id + ".png"), Raster{m.mask.width, m.mask.height, 1, m.mask.ids});
        for (std::size_t c = 0; c < cams[i].raw_cam.dim(0); ++c) {
            const std::string suffix = ".c" + std::to_string(c) + ".pfm";
            write_pfm(out_dir / "cams" / (m.source_id + ".raw" + suffix), cam_extract(cams[i].raw_cam, c));
            write_pfm(out_dir / "cams" / (m.source_id + ".refined" + suffix), cam_extract(cams[i].refined_cam, c));
        }
        ids.push_back(m.source_id);
    }
    nlohmann::ordered_json manifest;
    manifest["config_hash"] = hash_hex(hash);
    manifest["split"] = split_name;
    manifest["threshold"] = config.eval.threshold;
    manifest["cam"] = to_string(config.eval.cam);
    manifest["class_filter"] = to_string(config.eval.class_filter);
    manifest["samples"] = ids;
    auto out = open_out(out_dir / "manifest.json");
    out << manifest.dump(2) << "\n";
    return masks.size();
}

MaskReport cmd_eval(const RunConfig& config, const fs::path& mask_dir, const fs::path& out_dir,
                    const std::string& label) {
    const std::uint64_t hash = config_hash(config);
    std::ifstream in(mask_dir / "manifest.json");
    if (!in) throw std::runtime_error("no manifest.json in " + mask_dir.string());
    const nlohmann::json manifest = nlohmann::json::parse(in);
    const std::string stored = manifest.at("config_hash").get<std::string>();
    if (stored != hash_hex(hash))
        throw std::runtime_error("masks in " + mask_dir.string() + " were generated under config hash " + stored +
                                 ", current config hash is " + hash_hex(hash));

    std::vector<std::string> missing;
    std::vector<PseudoMask> masks;
    for (const auto& id : manifest.at("samples")) {
        const fs::path path = mask_dir / "masks" / (id.get<std::string>() + ".png");
        if (!fs::exists(path)) {
            missing.push_back(path.string());
            continue;
        }
        const Raster r = read_raster(path);
        if (r.channels != 1) throw std::runtime_error(path.string() + ": mask must be single-channel");
        PseudoMask m{LabelMask(r.height, r.width), id.get<std::string>(), manifest.value("threshold", 0.0)};
        m.mask.ids = r.pixels;
        masks.push_back(std::move(m));
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& p : missing) list += "\n  " + p;
        throw std::runtime_error(std::to_string(missing.size()) + " mask file(s) missing:" + list);
    }

    const Dataset data = load_dataset(config);
    std::map<std::string, LabelMask> gt;
    for (const Sample& s : data.samples)
        if (s.gt_mask) gt.emplace(s.id, *s.gt_mask);
    MaskReport report = evaluate(masks, gt, config.model.num_classes, config.eval.averaging);
    report.config_hash = hash_hex(hash);
    report.seed = config.seed;

    fs::create_directories(out_dir);
    write_report_json(out_dir / "report.json", report);
    write_report_csv(out_dir / "report.csv", report);
    const fs::path comparison = out_dir / "comparison.csv";
    const bool fresh = !fs::exists(comparison);
    auto out = open_out(comparison, std::ios::app);
    if (fresh) out << "label,config_hash,seed,samples,dice_present,iou_present,dice_all,iou_all\n";
    out << label << ',' << report.config_hash << ',' << report.seed << ',' << report.samples << ','
        << fmt(report.dice_present) << ',' << fmt(report.iou_present) << ',' << fmt(report.dice_all) << ','
        << fmt(report.iou_all) << '\n';
    return report;
}

RunConfig variant_config(const RunConfig& base, const std::string& variant) {
    RunConfig c = base;
    ShuffleSchedule& s = c.schedule.schedule;
    if (variant == "full") {
    } else if (variant == "group") {
        c.schedule.variant = ShuffleVariant::group;
    } else if (variant == "back") {
        s.mode = ScheduleMode::back;
    } else if (variant == "no_fl") {
        const std::size_t size = c.dataset.synth.image_size;
        const std::size_t patch = size >= 64 ? 32 : std::max<std::size_t>(1, size / 2);
        s.mode = ScheduleMode::frozen;
        s.patch_sizes = {patch};
        s.f_init = 0.3;
        s.f_min = std::min(s.f_min, 0.3);
        s.f_max = std::max(s.f_max, 0.3);
    } else if (variant == "baseline_cam") {
        c.schedule.shuffle = false;
        c.eval.cam = CamSource::raw;
    } else {
        std::string known;
        for (const auto& v : ablation_variants()) known += (known.empty() ? "" : ", ") + v;
        throw ConfigError("unknown variant '" + variant + "' (expected one of " + known + ")");
    }
    return c;
}

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

AblationResult cmd_ablate(const RunConfig& config, const std::vector<std::string>& variants, std::size_t num_seeds,
                          const fs::path& out_dir, std::ostream* log) {
    if (variants.size() < 2) throw ConfigError("ablate needs at least 2 variants");
    if (num_seeds == 0) throw ConfigError("ablate needs at least 1 seed");
    std::vector<RunConfig> configs;
    for (const auto& v : variants) {
        configs.push_back(variant_config(config, v));
        configs.back().validate();
    }
    const Dataset data = load_dataset(config);
    const auto& test = data.members(config.eval.split);
    const auto gt = ground_truth(data, test);

    fs::create_directories(out_dir / "runs");
    AblationResult result;
    for (std::size_t v = 0; v < variants.size(); ++v) {
        for (std::size_t i = 0; i < num_seeds; ++i) {
            const std::uint64_t run_seed = config.seed + i;
            const fs::path dir = out_dir / "runs" / (variants[v] + "_seed" + std::to_string(run_seed));
            fs::create_directories(dir);
            const TrainRecord record = train_model(configs[v], data, run_seed);
            write_record_files(dir, configs[v], record);
            const auto masks = make_masks(configs[v], record.params, data, test);
            MaskReport report = evaluate(masks, gt, configs[v].model.num_classes, configs[v].eval.averaging);
            report.config_hash = hash_hex(config_hash(configs[v]));
            report.seed = run_seed;
            write_report_json(dir / "report.json", report);
            write_report_csv(dir / "report.csv", report);
            if (log) {
                char buf[160];
                std::snprintf(buf, sizeof buf, "%-12s seed %llu  dice %.4f  iou %.4f  (%.1f s)\n",
                              variants[v].c_str(), static_cast<unsigned long long>(run_seed), report.dice_present,
                              report.iou_present, record.seconds);
                *log << buf << std::flush;
            }
            result.rows.push_back({variants[v], run_seed, std::move(report)});
        }
    }

    const std::string stamp = hash_comment(config_hash(config));
    {
        auto out = open_out(out_dir / "ablation.csv");
        out << stamp << "variant,seed,dice,iou,dice_all,iou_all\n";
        for (const auto& r : result.rows)
            out << r.variant << ',' << r.seed << ',' << fmt(r.report.dice_present) << ','
                << fmt(r.report.iou_present) << ',' << fmt(r.report.dice_all) << ',' << fmt(r.report.iou_all) << '\n';
    }
    auto out = open_out(out_dir / "summary.csv");
    out << stamp << "variant,median_dice,median_iou,runs\n";
    for (const auto& v : variants) {
        std::vector<double> d, u;
        for (const auto& r : result.rows)
            if (r.variant == v) {
                d.push_back(r.report.dice_present);
                u.push_back(r.report.iou_present);
            }
        result.summary.push_back({v, median(d), median(u), d.size()});
        out << v << ',' << fmt(median(d)) << ',' << fmt(median(u)) << ',' << d.size() << '\n';
    }
    return result;
}

namespace {

void report_record(const fs::path& dir, const fs::path& out_dir, std::vector<std::string>& warnings) {
    std::vector<IterationLog> losses;
    std::vector<CurriculumEvent> history;
    bool have_losses = false, have_history = false;
    try {
        std::ifstream in(dir / "loss.csv");
        if (!in) throw std::runtime_error("missing");
        losses = read_loss_csv(in);
        have_losses = true;
    } catch (const std::exception& e) {
        warnings.push_back((dir / "loss.csv").string() + ": " + e.what());
    }
    try {
        std::ifstream in(dir / "curriculum.log");
        if (!in) throw std::runtime_error("missing");
        history = read_history(in);
        have_history = true;
    } catch (const std::exception& e) {
        warnings.push_back((dir / "curriculum.log").string() + ": " + e.what());
    }
    if (!have_losses && !have_history) return;
    fs::create_directories(out_dir);

    if (have_losses) {
        auto out = open_out(out_dir / "loss_vs_iteration.csv");
        out << "iteration,epoch,total,orig,mixed,smoothed\n";
        for (const auto& l : losses)
            out << l.iteration << ',' << l.epoch << ',' << fmt(l.total) << ',' << fmt(l.orig) << ','
                << fmt(l.mixed) << ',' << fmt(l.smoothed) << '\n';
    }
    // Curriculum rows carry the state after each update; runs without
    // feedback fall back to the per-step values from the loss log.
    auto out = open_out(out_dir / "trajectory.csv");
    out << "iteration,patch_size,ratio,threshold,transition\n";
    if (have_history && !history.empty()) {
        for (const auto& e : history)
            out << e.iteration << ',' << e.patch_size << ',' << fmt(e.ratio) << ',' << fmt(e.threshold) << ','
                << to_string(e.transition) << '\n';
    } else if (have_losses) {
        for (const auto& l : losses) out << l.iteration << ',' << l.patch << ',' << fmt(l.ratio) << ",,none\n";
    }
}

}  // namespace

std::vector<std::string> cmd_report(const fs::path& record_dir, const fs::path& out_dir) {
    std::vector<std::string> warnings;
    if (!fs::is_directory(record_dir)) throw std::runtime_error("record directory " + record_dir.string() + " not found");

    const fs::path ablation = record_dir / "ablation.csv";
    if (fs::exists(ablation)) {
        std::ifstream in(ablation);
        std::map<std::string, std::vector<std::pair<double, double>>> by_variant;
        std::vector<std::string> order;
        std::string line;
        bool header = false;
        while (std::getline(in, line)) {
            if (line.empty() || line.starts_with("#")) continue;
            if (!header) {
                header = true;
                continue;
            }
            const auto f = split_fields(line);
            if (f.size() < 4) {
                warnings.push_back(ablation.string() + ": malformed row '" + line + "'");
                continue;
            }
            if (!by_variant.contains(f[0])) order.push_back(f[0]);
            by_variant[f[0]].emplace_back(std::stod(f[2]), std::stod(f[3]));
        }
        fs::create_directories(out_dir);
        auto out = open_out(out_dir / "metrics_table.csv");
        out << "variant,runs,median_dice,median_iou,min_dice,max_dice\n";
        for (const auto& v : order) {
            std::vector<double> d, u;
            for (const auto& [a, b] : by_variant[v]) {
                d.push_back(a);
                u.push_back(b);
            }
            out << v << ',' << d.size() << ',' << fmt(median(d)) << ',' << fmt(median(u)) << ','
                << fmt(*std::min_element(d.begin(), d.end())) << ',' << fmt(*std::max_element(d.begin(), d.end()))
                << '\n';
        }
        if (fs::is_directory(record_dir / "runs")) {
            std::vector<fs::path> runs;
            for (const auto& e : fs::directory_iterator(record_dir / "runs"))
                if (e.is_directory()) runs.push_back(e.path());
            std::sort(runs.begin(), runs.end());
            for (const auto& r : runs) report_record(r, out_dir / "runs" / r.filename(), warnings);
        }
        return warnings;
    }
    report_record(record_dir, out_dir, warnings);
    return warnings;
}

}  // namespace sfl

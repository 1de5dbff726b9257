// Command-line front end: train, genmask, eval, ablate, report.

#include "sfl/config.hpp"
#include "sfl/experiment.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>
#include <optional>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<double> threshold;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "config file (key = value lines)");
    cmd->add_option("--seed", c.seed, "master seed");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--threshold", c.threshold, "mask threshold in (0,1)");
    cmd->add_option("--set", c.overrides, "override one entry, key=value (repeatable)");
}

sfl::RunConfig resolve(const Common& c) {
    sfl::RunConfig cfg = c.config_path.empty() ? sfl::RunConfig{} : sfl::load_config(c.config_path);
    for (const auto& kv : c.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw sfl::ConfigError("--set expects key=value, got '" + kv + "'");
        sfl::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (c.seed) cfg.seed = *c.seed;
    if (c.threshold) cfg.eval.threshold = *c.threshold;
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Training allocates many same-sized temporaries; keep them off mmap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
    CLI::App app{"Shuffle-based feedback learning for weakly supervised segmentation"};
    app.require_subcommand(1);

    Common train_opts, gen_opts, eval_opts, ablate_opts;
    auto* train = app.add_subcommand("train", "train a classifier under the shuffle curriculum");
    add_common(train, train_opts);

    auto* genmask = app.add_subcommand("genmask", "write pseudo masks and CAM dumps for a split");
    add_common(genmask, gen_opts);
    std::string checkpoint, split = "test", cam;
    genmask->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/checkpoint.bin)");
    genmask->add_option("--split", split, "val or test")->check(CLI::IsMember({"val", "test"}));
    genmask->add_option("--cam", cam, "refined or raw")->check(CLI::IsMember({"refined", "raw"}));

    auto* eval = app.add_subcommand("eval", "score pseudo masks against ground truth");
    add_common(eval, eval_opts);
    std::string mask_dir, label;
    eval->add_option("--masks", mask_dir, "genmask output directory")->required();
    eval->add_option("--label", label, "row label in comparison.csv");

    auto* ablate = app.add_subcommand("ablate", "compare variants over several seeds");
    add_common(ablate, ablate_opts);
    std::vector<std::string> variants;
    std::size_t seeds = 5;
    ablate->add_option("--variant", variants, "variant name (repeatable; default all)");
    ablate->add_option("--seeds", seeds, "number of seeds");

    auto* report = app.add_subcommand("report", "emit plot-ready CSVs from a record directory");
    std::string record, report_out;
    report->add_option("--record", record, "train or ablate output directory")->required();
    report->add_option("--out", report_out, "output directory (default <record>/report)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*train) {
            const sfl::RunConfig cfg = resolve(train_opts);
            std::cout << sfl::format_config(cfg);
            const auto rec = sfl::cmd_train(cfg, cfg.output_dir, &std::cerr);
            std::printf("trained %zu steps in %.1f s, config hash %s, output %s\n", rec.losses.size(), rec.seconds,
                        sfl::hash_hex(sfl::config_hash(cfg)).c_str(), cfg.output_dir.string().c_str());
        } else if (*genmask) {
            sfl::RunConfig cfg = resolve(gen_opts);
            if (!cam.empty()) cfg.eval.cam = sfl::parse_cam_source(cam);
            const auto ckpt = checkpoint.empty() ? cfg.output_dir / "checkpoint.bin" : std::filesystem::path(checkpoint);
            const auto out = cfg.output_dir / ("masks_" + split + "_" + sfl::to_string(cfg.eval.cam));
            const std::size_t n = sfl::cmd_genmask(cfg, ckpt, split, out);
            std::printf("wrote %zu masks to %s\n", n, out.string().c_str());
        } else if (*eval) {
            const sfl::RunConfig cfg = resolve(eval_opts);
            const auto r = sfl::cmd_eval(cfg, mask_dir, cfg.output_dir,
                                         label.empty() ? std::filesystem::path(mask_dir).filename().string() : label);
            std::printf("%zu samples  dice %.4f  iou %.4f  (all classes: dice %.4f  iou %.4f)\n", r.samples,
                        r.dice_present, r.iou_present, r.dice_all, r.iou_all);
        } else if (*ablate) {
            const sfl::RunConfig cfg = resolve(ablate_opts);
            const auto names = variants.empty() ? sfl::ablation_variants() : variants;
            const auto res = sfl::cmd_ablate(cfg, names, seeds, cfg.output_dir, &std::cerr);
            std::printf("%-12s %10s %10s\n", "variant", "dice", "iou");
            for (const auto& s : res.summary)
                std::printf("%-12s %10.4f %10.4f\n", s.variant.c_str(), s.median_dice, s.median_iou);
        } else if (*report) {
            const auto out = report_out.empty() ? std::filesystem::path(record) / "report" : std::filesystem::path(report_out);
            for (const auto& w : sfl::cmd_report(record, out)) std::cerr << "warning: " << w << "\n";
            std::printf("report written to %s\n", out.string().c_str());
        }
    } catch (const sfl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}

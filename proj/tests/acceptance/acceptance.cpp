// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance_tests [--only 1,2,...] [--work DIR]

#include "testkit.hpp"

#include "sfl/experiment.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

using namespace sfl;
using namespace sfl::testkit;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool report(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("%s criterion %d (%s): %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
    return pass;
}

bool run_suite(int id, const std::string& name, double limit_s, SuiteResult (*suite)(std::size_t, std::uint64_t),
               std::size_t count, std::uint64_t seed) {
    const auto t0 = Clock::now();
    const SuiteResult r = suite(count, seed);
    const double s = seconds_since(t0);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu checks, worst %.3g, %.1f s (limit %.0f s)", r.checks, r.worst, s, limit_s);
    std::string detail = buf;
    if (!r.pass) detail += "; " + r.detail;
    return report(id, name, r.pass && s < limit_s, detail);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Every metric file under `a` must exist under `b` with the same bytes.
std::vector<std::string> differing_metric_files(const fs::path& a, const fs::path& b, std::size_t& compared) {
    std::vector<std::string> diffs;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (name != "ablation.csv" && name != "summary.csv" && name != "report.csv" && name != "report.json") continue;
        const fs::path rel = fs::relative(e.path(), a);
        ++compared;
        if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) diffs.push_back(rel.string());
    }
    return diffs;
}

const AblationSummary* find(const AblationResult& r, const std::string& v) {
    for (const auto& s : r.summary)
        if (s.variant == v) return &s;
    return nullptr;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Training allocates many same-sized temporaries; keep them off mmap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
    CLI::App app{"acceptance criteria"};
    std::vector<int> only;
    std::string work = (fs::temp_directory_path() / "sfl_acceptance").string();
    app.add_option("--only", only, "criteria to run")->delimiter(',');
    app.add_option("--work", work, "scratch directory for the ablation runs");
    CLI11_PARSE(app, argc, argv);
    const std::set<int> chosen(only.begin(), only.end());
    auto want = [&](int id) { return chosen.empty() || chosen.contains(id); };

    bool all = true;
    if (want(1)) all &= run_suite(1, "gradients", 60.0, gradient_suite, 20, 1);
    if (want(2)) all &= run_suite(2, "shuffle", 60.0, shuffle_suite, 1000, 2);
    if (want(3)) all &= run_suite(3, "scheduler", 30.0, scheduler_suite, 10000, 3);
    if (want(4)) all &= run_suite(4, "pcm", 60.0, pcm_suite, 1000, 4);
    if (want(5)) all &= run_suite(5, "metrics", 60.0, metric_suite, 1000, 5);

    if (want(6) || want(7) || want(8)) {
        const RunConfig base;
        const fs::path first = fs::path(work) / "run_a", second = fs::path(work) / "run_b";
        fs::remove_all(first);
        fs::remove_all(second);

        const auto t0 = Clock::now();
        const AblationResult a = cmd_ablate(base, ablation_variants(), 5, first, &std::cout);
        const double secs = seconds_since(t0);
        const auto* full = find(a, "full");
        const auto* no_fl = find(a, "no_fl");
        const auto* cam = find(a, "baseline_cam");
        const auto* group = find(a, "group");
        const auto* back = find(a, "back");

        for (const auto& s : a.summary)
            std::printf("  %-12s median dice %.4f  median iou %.4f  (%zu runs)\n", s.variant.c_str(), s.median_dice,
                        s.median_iou, s.runs);

        if (want(6)) {
            const double gain = 100.0 * (full->median_dice - cam->median_dice);
            const bool ordered = full->median_dice >= no_fl->median_dice && no_fl->median_dice >= cam->median_dice;
            char buf[256];
            std::snprintf(buf, sizeof buf,
                          "full %.4f, no_fl %.4f, baseline_cam %.4f; full >= no_fl: %s, no_fl >= baseline_cam: %s; "
                          "gain %.2f points (need 3); %.0f s (limit 900 s)",
                          full->median_dice, no_fl->median_dice, cam->median_dice,
                          full->median_dice >= no_fl->median_dice ? "yes" : "no",
                          no_fl->median_dice >= cam->median_dice ? "yes" : "no", gain, secs);
            all &= report(6, "ablation dice", ordered && gain >= 3.0 && secs <= 900.0, buf);
        }
        if (want(7)) {
            const bool ok = full->median_iou >= group->median_iou - 0.005 && full->median_iou >= back->median_iou - 0.005;
            char buf[200];
            std::snprintf(buf, sizeof buf, "full %.4f, group %.4f, back %.4f (margin 0.005)", full->median_iou,
                          group->median_iou, back->median_iou);
            all &= report(7, "variant iou", ok, buf);
        }
        if (want(8)) {
            cmd_ablate(base, ablation_variants(), 5, second);
            std::size_t compared = 0;
            const auto diffs = differing_metric_files(first, second, compared);
            std::string detail = std::to_string(compared) + " metric files compared";
            if (!diffs.empty()) detail += ", differing: " + diffs.front();
            all &= report(8, "rerun identical", compared > 0 && diffs.empty(), detail);
        }
    }
    return all ? 0 : 1;
}

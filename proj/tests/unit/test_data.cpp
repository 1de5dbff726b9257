#include "doctest.h"

#include "sfl/data.hpp"
#include "sfl/image_io.hpp"
#include "sfl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

using namespace sfl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("sfl_unit_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

SynthConfig small_config(std::size_t n = 12) {
    SynthConfig cfg;
    cfg.num_samples = n;
    return cfg;
}

}  // namespace

TEST_CASE("synthetic: no abnormal cells gives all class 0 and empty masks") {
    SynthConfig cfg = small_config();
    cfg.abnormal_count_min = cfg.abnormal_count_max = 0;
    for (const Sample& s : generate_synthetic(cfg, 3)) {
        CHECK(s.label == std::vector<int>{1, 0});
        REQUIRE(s.gt_mask);
        CHECK(std::all_of(s.gt_mask->ids.begin(), s.gt_mask->ids.end(), [](auto v) { return v == 0; }));
    }
}

TEST_CASE("synthetic: deterministic in config and seed") {
    const SynthConfig cfg = small_config();
    const auto a = generate_synthetic(cfg, 5), b = generate_synthetic(cfg, 5), c = generate_synthetic(cfg, 6);
    REQUIRE(a.size() == b.size());
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(bitwise_equal(a[i].image, b[i].image));
        CHECK(a[i].label == b[i].label);
        CHECK(a[i].gt_mask == b[i].gt_mask);
        differs = differs || !bitwise_equal(a[i].image, c[i].image);
    }
    CHECK(differs);
}

TEST_CASE("synthetic: sample invariants") {
    SynthConfig cfg = small_config(30);
    for (const Sample& s : generate_synthetic(cfg, 9)) {
        CHECK(s.image.shape() == Shape{1, 64, 64});
        CHECK(std::count(s.label.begin(), s.label.end(), 1) >= 1);
        for (double v : s.image.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            CHECK(std::round(v * 255.0) / 255.0 == v);
        }
        REQUIRE(s.gt_mask);
        CHECK(s.gt_mask->height == 64);
        const bool any = std::any_of(s.gt_mask->ids.begin(), s.gt_mask->ids.end(), [](auto v) { return v != 0; });
        CHECK(any == (s.label[1] == 1));
        for (auto id : s.gt_mask->ids) CHECK(id <= 2);
    }
}

TEST_CASE("synthetic: foreground area lies within the analytic blob bound") {
    SynthConfig cfg = small_config(25);
    cfg.abnormal_fraction = 1.0;
    cfg.abnormal_count_min = 3;
    cfg.abnormal_count_max = 5;
    cfg.abnormal_radius_min = 3.0;
    cfg.abnormal_radius_max = 5.0;
    cfg.abnormal_irregularity = 0.0;
    cfg.abnormal_eccentricity = 1.0;
    const double pi = std::numbers::pi;
    // One perimeter of pixels per blob covers rasterization.
    const double lo = 3.0 * (pi * 9.0 - 2.0 * pi * 3.0), hi = 5.0 * (pi * 25.0 + 2.0 * pi * 5.0);
    for (const Sample& s : generate_synthetic(cfg, 21)) {
        const auto fg = static_cast<double>(std::count(s.gt_mask->ids.begin(), s.gt_mask->ids.end(), 2));
        CHECK(fg / 4096.0 >= lo / 4096.0);
        CHECK(fg / 4096.0 <= hi / 4096.0);
    }
}

TEST_CASE("synthetic: size must be a multiple of the largest patch") {
    SynthConfig cfg = small_config();
    cfg.image_size = 48;
    CHECK_THROWS_AS(generate_synthetic(cfg, 1), std::invalid_argument);
    cfg.patch_multiple = 16;
    CHECK_NOTHROW(generate_synthetic(cfg, 1));
}

TEST_CASE("loader: empty directory") {
    const fs::path root = scratch("empty");
    const DirectoryDataset d = load_directory(root);
    CHECK(d.samples.empty());
    CHECK(d.warnings.empty());
}

TEST_CASE("loader: one image with a label row and no mask") {
    const fs::path root = scratch("one");
    fs::create_directories(root / "images");
    Raster r{2, 2, 1, {0, 255, 128, 7}};
    write_png(root / "images" / "a.png", r);
    std::ofstream(root / "labels.csv") << "filename,class_0,class_1\na.png,0,1\n";
    const DirectoryDataset d = load_directory(root);
    REQUIRE(d.samples.size() == 1);
    const Sample& s = d.samples[0];
    CHECK(s.id == "a");
    CHECK(!s.gt_mask);
    CHECK(s.label == std::vector<int>{0, 1});
    CHECK(s.image(0, 0, 1) == 1.0);
    CHECK(s.image(0, 0, 0) == 0.0);
    CHECK(s.image(0, 1, 0) == 128.0 / 255.0);
}

TEST_CASE("loader: PGM input and errors") {
    const fs::path root = scratch("pgm");
    fs::create_directories(root / "images");
    {
        std::ofstream f(root / "images" / "b.pgm", std::ios::binary);
        f << "P5\n2 1\n255\n";
        f.put(static_cast<char>(255));
        f.put(static_cast<char>(0));
    }
    std::ofstream(root / "labels.csv") << "filename,class_0,class_1\nb.pgm,1,0\n";
    const DirectoryDataset d = load_directory(root);
    REQUIRE(d.samples.size() == 1);
    CHECK(d.samples[0].image(0, 0, 0) == 1.0);

    std::ofstream(root / "labels.csv") << "filename,class_0,class_1\nother.pgm,1,0\n";
    CHECK_THROWS_WITH_AS(load_directory(root), doctest::Contains("b.pgm"), std::runtime_error);

    std::ofstream(root / "labels.csv") << "filename,class_0,class_1\nb.pgm,1,0\n";
    fs::create_directories(root / "masks");
    write_png(root / "masks" / "b.png", Raster{3, 1, 1, {0, 1, 0}});
    CHECK_THROWS(load_directory(root));

    std::ofstream(root / "images" / "c.png") << "not a png";
    std::ofstream(root / "labels.csv") << "filename,class_0,class_1\nb.pgm,1,0\nc.png,0,1\n";
    fs::remove_all(root / "masks");
    CHECK_THROWS(load_directory(root));
}

TEST_CASE("loader: round trip of a generated dataset is bitwise") {
    const auto samples = generate_synthetic(small_config(10), 4);
    const fs::path root = scratch("roundtrip");
    save_directory(root, samples);
    const DirectoryDataset d = load_directory(root);
    REQUIRE(d.samples.size() == samples.size());
    for (const Sample& s : samples) {
        const auto it = std::find_if(d.samples.begin(), d.samples.end(), [&](const Sample& o) { return o.id == s.id; });
        REQUIRE(it != d.samples.end());
        CHECK(bitwise_equal(it->image, s.image));
        CHECK(it->label == s.label);
        CHECK(it->gt_mask == s.gt_mask);
    }
}

TEST_CASE("split sizes and determinism") {
    const DatasetSplit s10 = split(10, {}, 1);
    CHECK(s10.train.size() == 7);
    CHECK(s10.val.size() == 1);
    CHECK(s10.test.size() == 2);

    const DatasetSplit s3 = split(3, {}, 1);
    CHECK(s3.train.size() == 1);
    CHECK(s3.val.size() == 1);
    CHECK(s3.test.size() == 1);

    const DatasetSplit d = split(285, {}, 7);
    CHECK(d.train.size() == 200);
    std::set<std::size_t> all(d.train.begin(), d.train.end());
    all.insert(d.val.begin(), d.val.end());
    all.insert(d.test.begin(), d.test.end());
    CHECK(all.size() == 285);
    CHECK(*all.rbegin() == 284);

    const DatasetSplit again = split(285, {}, 7);
    CHECK(again.train == d.train);
    CHECK(again.test == d.test);
    CHECK(split(285, {}, 8).train != d.train);
    CHECK_THROWS_AS(split(2, {}, 1), std::invalid_argument);
}

TEST_CASE("batches: drop-last and per-epoch order") {
    const auto samples = generate_synthetic(small_config(9), 2);
    std::vector<std::size_t> eight{0, 1, 2, 3, 4, 5, 6, 7}, nine{0, 1, 2, 3, 4, 5, 6, 7, 8};

    const auto b8 = batches(samples, eight, 4, 1, 0);
    REQUIRE(b8.size() == 2);
    std::multiset<std::size_t> covered;
    for (const Batch& b : b8) {
        CHECK(b.images.shape() == Shape{4, 1, 64, 64});
        CHECK(b.labels.shape() == Shape{4, 2});
        covered.insert(b.ids.begin(), b.ids.end());
    }
    CHECK(covered == std::multiset<std::size_t>(eight.begin(), eight.end()));

    CHECK(batches(samples, nine, 4, 1, 0).size() == 2);

    const auto e1 = batches(samples, eight, 4, 1, 1), e2 = batches(samples, eight, 4, 1, 2);
    std::vector<std::size_t> o1, o2;
    for (const Batch& b : e1) o1.insert(o1.end(), b.ids.begin(), b.ids.end());
    for (const Batch& b : e2) o2.insert(o2.end(), b.ids.begin(), b.ids.end());
    CHECK(o1 != o2);
    std::sort(o1.begin(), o1.end());
    std::sort(o2.begin(), o2.end());
    CHECK(o1 == o2);

    const auto again = batches(samples, eight, 4, 1, 1);
    for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].ids == e1[i].ids);
    CHECK_THROWS_AS(batches(samples, eight, 1, 1, 0), std::invalid_argument);
}

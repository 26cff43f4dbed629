#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "rfga/checkpoint.hpp"
#include "rfga/experiment.hpp"
#include "rfga/kvconfig.hpp"
#include "rfga/raster.hpp"
#include "rfga/svg_plot.hpp"

using namespace rfga;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("checkpoint files round-trip tensors exactly") {
    Prng rng(1);
    Checkpoint ckpt;
    ckpt.add("a", oracle::random_tensor({3, 4}, rng));
    ckpt.add("deep.name.b", oracle::random_tensor({2, 2, 2, 2}, rng));
    ckpt.add("scalar", Tensor::scalar(-7.25));

    const std::string path = fs::temp_directory_path() / "rfga_ckpt_test.rfga";
    save_checkpoint(path, ckpt);
    const Checkpoint back = load_checkpoint(path);
    REQUIRE(back.records.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(back.records[i].first == ckpt.records[i].first);
        CHECK(back.records[i].second.shape() == ckpt.records[i].second.shape());
        CHECK(max_abs_diff(back.records[i].second, ckpt.records[i].second) == 0.0);
    }
    // magic bytes are literally "RFGA1"
    CHECK(slurp(path).substr(0, 5) == "RFGA1");

    std::ofstream bad(path, std::ios::binary);
    bad << "NOPE!";
    bad.close();
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    fs::remove(path);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("model checkpoints restore every parameter and running stat") {
    Prng rng(2);
    RfgaConfig rcfg;
    rcfg.residual = false;
    rcfg.views = {true, false, true};
    BackboneParams params = BackboneParams::init(6, 16, rcfg, rng);
    // dirty the state so the round trip is meaningful
    params.block2.bn.running_mean.fill(0.33);
    params.block2.bn.updates = 7;
    params.rfga->bn_c.running_var.fill(2.5);

    const std::string path = fs::temp_directory_path() / "rfga_model_test.rfga";
    save_checkpoint(path, model_to_checkpoint(params));
    BackboneParams back = model_from_checkpoint(load_checkpoint(path));

    CHECK(back.n_classes == 6);
    CHECK(back.image_size == 16);
    REQUIRE(back.rfga_cfg.has_value());
    CHECK(back.rfga_cfg->residual == false);
    CHECK(back.rfga_cfg->views.height == false);
    auto a = params.state_tensors();
    auto b = back.state_tensors();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(max_abs_diff(*a[i].second, *b[i].second) == 0.0);
    }
    CHECK(back.block2.bn.updates == 7);

    // config/checkpoint mismatch is a descriptive error
    ExperimentConfig cfg;
    cfg.variant = "cam_baseline";
    cfg.dataset.n_classes = 6;
    cfg.dataset.image_size = 16;
    const Checkpoint ck = load_checkpoint(path);
    CHECK_THROWS_AS(check_model_matches(ck, cfg), IoError);
    cfg.variant = "rfga_nonresidual";
    CHECK_NOTHROW(check_model_matches(ck, cfg));
    cfg.dataset.n_classes = 8;
    CHECK_THROWS_AS(check_model_matches(ck, cfg), IoError);
    fs::remove(path);
}

TEST_CASE("kvconfig parses sections and reports malformed lines by number") {
    const std::string text =
        "# comment\n"
        "top = 1\n"
        "[dataset]\n"
        "n_classes = 12\n"
        "noise=0.125\n"
        "[train]\n"
        "lr = 0.05\n"
        "flag = true\n";
    const KvConfig kv = KvConfig::parse(text, "test.cfg");
    CHECK(kv.get_int("top", 0) == 1);
    CHECK(kv.get_int("dataset.n_classes", 0) == 12);
    CHECK(kv.get_double("dataset.noise", 0) == 0.125);
    CHECK(kv.get_double("train.lr", 0) == 0.05);
    CHECK(kv.get_bool("train.flag", false));
    CHECK(kv.get("missing", "fallback") == "fallback");

    try {
        KvConfig::parse("a = 1\nbroken line\n", "bad.cfg");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("bad.cfg:2") != std::string::npos);
    }
    CHECK_THROWS_AS(KvConfig::parse("[oops\n", "x"), ParseError);
    CHECK_THROWS_AS(KvConfig::parse("k = v\n", "x").get_int("k", 0), ParseError);
    CHECK_THROWS_AS(KvConfig::parse_file("/nonexistent/path.cfg"), IoError);
}

TEST_CASE("experiment config comes from kv with CLI-style overrides applied by callers") {
    const KvConfig kv = KvConfig::parse(
        "[dataset]\nn_classes = 4\nimage_size = 32\nseed = 9\ndir = data/x\n"
        "[train]\nepochs = 3\nbatch_size = 6\n"
        "[experiment]\nvariant = rfga_channel_only\nout = runs/x\n",
        "cfg");
    const ExperimentConfig cfg = ExperimentConfig::from_kv(kv);
    CHECK(cfg.dataset.n_classes == 4);
    CHECK(cfg.dataset.image_size == 32);
    CHECK(cfg.dataset.seed == 9);
    CHECK(cfg.dataset_dir == "data/x");
    CHECK(cfg.train.epochs == 3);
    CHECK(cfg.variant == "rfga_channel_only");
    CHECK(cfg.out_dir == "runs/x");

    CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("[experiment]\nvariant = nope\n", "c")),
                    ConfigError);
}

TEST_CASE("variant table covers the comparison grid") {
    CHECK_FALSE(parse_variant("cam_baseline").rfga.has_value());
    CHECK(parse_variant("rfga_residual").rfga->residual);
    CHECK_FALSE(parse_variant("rfga_nonresidual").rfga->residual);
    CHECK(parse_variant("rfga_channel_only").rfga->views.channel);
    CHECK_FALSE(parse_variant("rfga_channel_only").rfga->views.height);
    CHECK(parse_variant("rfga_height_only").rfga->views.height);
    CHECK(parse_variant("rfga_width_only").rfga->views.width);
    CHECK(known_variants().size() == 6);
}

TEST_CASE("training log csv round-trips") {
    std::vector<EpochRow> rows(3);
    for (int i = 0; i < 3; ++i) {
        rows[static_cast<size_t>(i)] = {i + 1, 0.01 / (i + 1), 1.5 - 0.3 * i, 0.4 + 0.1 * i,
                                        0.35 + 0.1 * i, 0.2 + 0.05 * i, 0.3, 0.12, i == 2 ? 1 : 0};
    }
    const std::string csv = train_log_to_csv(rows);
    const auto back = train_log_from_csv(csv);
    REQUIRE(back.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(back[i].epoch == rows[i].epoch);
        CHECK(back[i].lr == rows[i].lr);
        CHECK(back[i].train_loss == rows[i].train_loss);
        CHECK(back[i].test_top1 == rows[i].test_top1);
        CHECK(back[i].maxboxacc_avg == rows[i].maxboxacc_avg);
        CHECK(back[i].is_final == rows[i].is_final);
    }
    CHECK(train_log_to_csv(back) == csv);
    CHECK_THROWS_AS(train_log_from_csv("nope"), ParseError);
}

TEST_CASE("raster: ppm output, ramp endpoints, text, grids") {
    uint8_t lo[3], hi[3];
    viridis(0.0, lo);
    viridis(1.0, hi);
    CHECK(static_cast<int>(lo[2]) > static_cast<int>(lo[0]));  // dark purple end
    CHECK(static_cast<int>(hi[0]) > 200);                      // bright yellow end
    CHECK(static_cast<int>(hi[1]) > 200);

    Tensor map({2, 2}, {0.0, 0.25, 0.75, 1.0});
    const RasterImage hm = heatmap(map, 4);
    CHECK(hm.width == 8);
    CHECK(hm.height == 8);

    RasterImage img(32, 16, 10);
    draw_text(img, 1, 1, "RFGA 0.5", 255, 255, 255);
    draw_box_outline(img, Box{0, 0, 31, 15}, 255, 0, 0);
    const std::string path = fs::temp_directory_path() / "rfga_raster_test.ppm";
    img.write_ppm(path);
    const std::string bytes = slurp(path);
    CHECK(bytes.substr(0, 2) == "P6");
    img.write_ppm(path);
    CHECK(slurp(path) == bytes);  // deterministic emission
    fs::remove(path);

    const Tensor narrow({3, 1}, {0.1, 0.5, 0.9});
    const Tensor wide = stretch_map(narrow, 3, 6);
    CHECK(wide(int64_t{1}, int64_t{5}) == 0.5);

    std::vector<std::pair<std::string, RasterImage>> panels;
    panels.emplace_back("A", RasterImage(8, 8, 0));
    panels.emplace_back("B", RasterImage(8, 8, 0));
    panels.emplace_back("C", RasterImage(8, 8, 0));
    const RasterImage grid = panel_grid(panels, 2);
    CHECK(grid.width == 2 * 10 + 2);
    CHECK(grid.height == 2 * 20 + 2);
}

TEST_CASE("svg plot contains one polyline per series") {
    std::vector<SvgSeries> series(3);
    for (size_t s = 0; s < 3; ++s) {
        series[s].label = "series" + std::to_string(s);
        for (int i = 0; i <= 10; ++i) {
            series[s].x.push_back(i / 10.0);
            series[s].y.push_back((s + 1) / 4.0);
        }
    }
    const std::string svg = line_plot_svg("title", "x", "y", series);
    size_t count = 0, pos = 0;
    while ((pos = svg.find("<polyline", pos)) != std::string::npos) {
        ++count;
        ++pos;
    }
    CHECK(count == 3);
    CHECK(svg.find("series2") != std::string::npos);
    CHECK(svg.find("</svg>") != std::string::npos);
}

// Command-line harness: dataset generation, training, WSOL evaluation,
// threshold sweeps, and attention visualization. Every command is a pure
// function of (config, seed, disk inputs); wall-clock notes go to run.log.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "rfga/experiment.hpp"
#include "rfga/raster.hpp"
#include "rfga/svg_plot.hpp"

namespace fs = std::filesystem;
using namespace rfga;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<int64_t> seed;
    std::string out;
    std::string variant;
    std::string checkpoint;
    bool force = false;
    bool bilinear = false;
};

ExperimentConfig load_config(const CommonArgs& args) {
    KvConfig kv;
    if (!args.config_path.empty()) kv = KvConfig::parse_file(args.config_path);
    ExperimentConfig cfg = ExperimentConfig::from_kv(kv);
    if (args.seed.has_value()) {
        cfg.dataset.seed = static_cast<uint64_t>(*args.seed);
        cfg.train.seed = static_cast<uint64_t>(*args.seed);
    }
    if (!args.variant.empty()) cfg.variant = args.variant;
    if (args.bilinear) cfg.bilinear = true;
    parse_variant(cfg.variant);
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << text;
}

std::string run_dir_for(const ExperimentConfig& cfg, const CommonArgs& args) {
    if (!args.out.empty()) return args.out;
    return cfg.out_dir + "/" + cfg.variant + "_seed" + std::to_string(cfg.train.seed);
}

RasterImage preview_grid(const SynthDataset& ds) {
    std::vector<std::pair<std::string, RasterImage>> panels;
    const size_t count = std::min<size_t>(16, ds.train.size());
    for (size_t i = 0; i < count; ++i) {
        const GtSample& g = ds.train[i];
        RasterImage img = rgb_image(g.image);
        draw_box_outline(img, g.gt_box, 255, 40, 40);
        panels.emplace_back("C" + std::to_string(g.label), std::move(img));
    }
    return panel_grid(panels, 4);
}

int cmd_gen(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    const std::string dir = args.out.empty() ? cfg.dataset_dir : args.out;
    if (fs::exists(dir + "/manifest.txt") && !args.force) {
        std::cerr << "error: dataset already exists at " << dir << " (use --force to overwrite)\n";
        return 2;
    }
    const SynthDataset ds = generate_dataset(cfg.dataset);
    save_dataset(dir, ds);
    preview_grid(ds).write_ppm(dir + "/preview.ppm");
    std::cout << "dataset written to " << dir << "\n" << ds.manifest.to_text();
    return 0;
}

int cmd_train(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    const SynthDataset ds = load_dataset(cfg.dataset_dir);
    const std::string run_dir = run_dir_for(cfg, args);
    const TrainResult result = run_train(ds, cfg, run_dir);
    const EpochRow& last = result.log.back();
    std::cout << "trained " << cfg.variant << " for " << last.epoch
              << " epochs; final loss=" << last.train_loss << " test top1=" << last.test_top1
              << "\nfinal checkpoint: " << result.final_checkpoint << "\nlog: " << run_dir
              << "/log.csv\n";
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    const SynthDataset ds = load_dataset(cfg.dataset_dir);
    const std::string out = args.out.empty()
                                ? (args.checkpoint.empty() ? cfg.out_dir
                                                           : fs::path(args.checkpoint).parent_path().string())
                                : args.out;
    fs::create_directories(out);

    EvalResult result;
    std::string shown_variant = cfg.variant;
    if (args.checkpoint == "oracle" || (args.checkpoint.empty() && cfg.variant == "oracle")) {
        // perfect-oracle stub: the activation map is the ground-truth mask
        result = run_eval_mask_oracle(ds.test);
        shown_variant = "oracle";
    } else {
        if (args.checkpoint.empty()) {
            std::cerr << "error: eval needs --checkpoint PATH (or the literal 'oracle')\n";
            return 2;
        }
        const Checkpoint ckpt = load_checkpoint(args.checkpoint);
        check_model_matches(ckpt, cfg);
        BackboneParams params = model_from_checkpoint(ckpt);
        result = run_eval(ds.test, params, cfg.upsample());
    }
    write_text(out + "/report.csv", report_to_csv(result.report));
    const std::string summary = summary_table(shown_variant, result.report, result.top1);
    write_text(out + "/summary.txt", summary);
    std::cout << summary;
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    const SynthDataset ds = load_dataset(cfg.dataset_dir);
    const std::string out = args.out.empty() ? cfg.out_dir + "/sweep" : args.out;
    fs::create_directories(out);

    KvConfig kv;
    if (!args.config_path.empty()) kv = KvConfig::parse_file(args.config_path);
    std::vector<std::string> variants;
    {
        std::string list = kv.get("sweep.variants", "");
        if (list.empty()) {
            variants = known_variants();
        } else {
            std::string cur;
            for (char ch : list + ",") {
                if (ch == ',') {
                    if (!cur.empty()) variants.push_back(cur);
                    cur.clear();
                } else if (!std::isspace(static_cast<unsigned char>(ch))) {
                    cur.push_back(ch);
                }
            }
        }
    }

    std::ostringstream csv;
    csv << "variant,tau,acc_delta05,acc_mean\n";
    std::vector<SvgSeries> series;
    for (const std::string& name : variants) {
        const std::string ckpt_path =
            cfg.out_dir + "/" + name + "_seed" + std::to_string(cfg.train.seed) + "/ckpt_final.rfga";
        if (!fs::exists(ckpt_path)) {
            std::cerr << "warning: no checkpoint for variant '" << name << "' at " << ckpt_path
                      << "; skipped\n";
            continue;
        }
        ExperimentConfig vcfg = cfg;
        vcfg.variant = name;
        const Checkpoint ckpt = load_checkpoint(ckpt_path);
        check_model_matches(ckpt, vcfg);
        BackboneParams params = model_from_checkpoint(ckpt);
        const EvalResult result = run_eval(ds.test, params, cfg.upsample());

        SvgSeries s;
        s.label = name;
        const auto& rep = result.report;
        for (size_t t = 0; t < rep.taus.size(); ++t) {
            double mean = 0.0;
            for (size_t d = 0; d < rep.deltas.size(); ++d) mean += rep.acc[d][t];
            mean /= static_cast<double>(rep.deltas.size());
            char buf[96];
            std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g\n", name.c_str(), rep.taus[t],
                          rep.acc[0][t], mean);
            csv << buf;
            s.x.push_back(rep.taus[t]);
            s.y.push_back(mean);
        }
        series.push_back(std::move(s));
    }
    write_text(out + "/sweep.csv", csv.str());
    write_text(out + "/sweep.svg",
               line_plot_svg("box accuracy vs activation threshold", "tau",
                             "mean box accuracy over deltas", series));
    std::cout << "sweep written to " << out << " (" << series.size() << " variants)\n";
    return 0;
}

int cmd_visualize(const CommonArgs& args, const std::vector<int64_t>& ids) {
    ExperimentConfig cfg = load_config(args);
    const SynthDataset ds = load_dataset(cfg.dataset_dir);
    if (args.checkpoint.empty()) {
        std::cerr << "error: visualize needs --checkpoint PATH\n";
        return 2;
    }
    const std::string out = args.out.empty() ? cfg.out_dir + "/visualize" : args.out;
    fs::create_directories(out);

    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    check_model_matches(ckpt, cfg);
    BackboneParams params = model_from_checkpoint(ckpt);

    // boxes are drawn at the optimal threshold of the full test-set report
    const EvalResult eval = run_eval(ds.test, params, cfg.upsample());
    const double tau = eval.report.overall_optimal_tau;

    std::vector<int64_t> chosen = ids;
    if (chosen.empty()) {
        for (int64_t i = 0; i < std::min<int64_t>(8, static_cast<int64_t>(ds.test.size())); ++i) {
            chosen.push_back(i);
        }
    }

    const int64_t s = params.map_size();
    const int64_t scale = params.image_size / s;
    std::vector<std::pair<std::string, RasterImage>> panels;
    std::ostringstream caption;
    caption << "panels per row: INPUT, BOXES (GT=RED PRED=GREEN), CAM, ZC, ZH, ZW, M, AX, XHAT, D\n";
    caption << "boxes at overall optimal tau = " << tau << "\n";

    for (int64_t id : chosen) {
        if (id < 0 || id >= static_cast<int64_t>(ds.test.size())) {
            throw ContractError("sample id " + std::to_string(id) + " out of range");
        }
        const GtSample& g = ds.test[static_cast<size_t>(id)];
        Tape tape;
        Shape bshape = g.image.shape();
        bshape.insert(bshape.begin(), 1);
        const Var images = tape.leaf(g.image.reshaped(bshape), false);
        ForwardResult fwd = forward_classify(tape, images, params, Mode::eval, false);

        const Tensor& maps = tape.value(fwd.score_maps);
        const ActivationMap am = cam(maps, 0, g.label);
        const Tensor norm = normalize_map(am.map);
        const auto pred = extract_box(norm, tau, params.image_size, params.image_size,
                                      cfg.upsample());

        panels.emplace_back("IN " + std::to_string(id), rgb_image(g.image));
        RasterImage boxed = rgb_image(g.image);
        draw_box_outline(boxed, g.gt_box, 255, 40, 40);
        if (pred) draw_box_outline(boxed, *pred, 40, 255, 40);
        panels.emplace_back("BOXES", std::move(boxed));
        panels.emplace_back("CAM", heatmap(stretch_map(norm, s, s), scale));

        auto feature_summary = [&](const Tensor& batched) {
            // slice sample 0 out of [1,C,h,w] and summarize
            Tensor per({batched.dim(1), batched.dim(2), batched.dim(3)},
                       std::vector<double>(batched.data(), batched.data() + batched.size()));
            return stretch_map(attention_summary(per), s, s);
        };

        if (fwd.attention.has_value()) {
            const AttentionBundle att = snapshot_attention(tape, *fwd.attention);
            auto panel_or_na = [&](const char* name, const Tensor& t) {
                if (t.empty()) {
                    RasterImage na(s * scale, s * scale, 40);
                    draw_text(na, 4, s * scale / 2 - 3, "N/A", 160, 160, 160);
                    panels.emplace_back(name, std::move(na));
                } else {
                    panels.emplace_back(name, heatmap(feature_summary(t), scale));
                }
            };
            panel_or_na("ZC", att.z_c);
            panel_or_na("ZH", att.z_h);
            panel_or_na("ZW", att.z_w);
            panel_or_na("M", att.m);

            const Tensor& x = tape.value(fwd.features);
            const Tensor& xhat = tape.value(fwd.calibrated);
            Tensor m_full = att.m;
            Tensor ax(x.shape());
            {
                // A(X) = X (.) M with M broadcast over its singleton dims
                const Shape& xs = x.shape();
                for (int64_t c = 0; c < xs[1]; ++c) {
                    for (int64_t y = 0; y < xs[2]; ++y) {
                        for (int64_t w = 0; w < xs[3]; ++w) {
                            const int64_t mc = c % m_full.dim(1);
                            const int64_t my = m_full.dim(2) == 1 ? 0 : y;
                            const int64_t mw = m_full.dim(3) == 1 ? 0 : w;
                            ax(int64_t{0}, c, y, w) = x(int64_t{0}, c, y, w) * m_full(int64_t{0}, mc, my, mw);
                        }
                    }
                }
            }
            panels.emplace_back("AX", heatmap(feature_summary(ax), scale));
            panels.emplace_back("XHAT", heatmap(feature_summary(xhat), scale));
            Tensor diff(x.shape());
            for (int64_t i = 0; i < x.size(); ++i) diff[i] = xhat[i] - x[i];
            panels.emplace_back("D", heatmap(feature_summary(diff), scale));
        } else {
            for (const char* name : {"ZC", "ZH", "ZW", "M", "AX", "XHAT", "D"}) {
                RasterImage na(s * scale, s * scale, 40);
                draw_text(na, 4, s * scale / 2 - 3, "N/A", 160, 160, 160);
                panels.emplace_back(name, std::move(na));
            }
            caption << "sample " << id << ": attention panels omitted (no attention module)\n";
        }
        caption << "sample " << id << ": label=" << g.label
                << " pred_class=" << argmax_lowest(tape.value(fwd.logits), 0) << " gt_box=("
                << g.gt_box.x_min << ',' << g.gt_box.y_min << ',' << g.gt_box.x_max << ','
                << g.gt_box.y_max << ")";
        if (pred) {
            caption << " pred_box=(" << pred->x_min << ',' << pred->y_min << ',' << pred->x_max
                    << ',' << pred->y_max << ") iou=" << iou(*pred, g.gt_box);
        } else {
            caption << " pred_box=none";
        }
        caption << "\n";
    }

    panel_grid(panels, 10).write_ppm(out + "/grid.ppm");
    write_text(out + "/caption.txt", caption.str());
    std::cout << "visualization written to " << out << "/grid.ppm\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"residual fine-grained attention: training and WSOL evaluation harness"};
    app.require_subcommand(1);

    CommonArgs args;
    std::vector<int64_t> ids;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", args.config_path, "config file (key=value with [sections])");
        sub->add_option("--seed", args.seed, "overrides dataset and training seeds");
        sub->add_option("--out", args.out, "output directory");
        sub->add_option("--variant", args.variant, "model variant");
        sub->add_option("--checkpoint", args.checkpoint, "checkpoint path");
        sub->add_flag("--force", args.force, "overwrite existing outputs");
        sub->add_flag("--bilinear", args.bilinear, "bilinear CAM upsampling for box extraction");
    };

    CLI::App* gen = app.add_subcommand("gen", "generate the synthetic dataset");
    CLI::App* train = app.add_subcommand("train", "train one variant");
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    CLI::App* sweep = app.add_subcommand("sweep", "per-tau curves across trained variants");
    CLI::App* visualize = app.add_subcommand("visualize", "attention heatmap grid");
    for (CLI::App* sub : {gen, train, eval, sweep, visualize}) add_common(sub);
    visualize->add_option("--ids", ids, "test sample ids to render");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(args);
        if (train->parsed()) return cmd_train(args);
        if (eval->parsed()) return cmd_eval(args);
        if (sweep->parsed()) return cmd_sweep(args);
        if (visualize->parsed()) return cmd_visualize(args, ids);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

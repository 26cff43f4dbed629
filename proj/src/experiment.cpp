#include "rfga/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rfga/grad_check.hpp"

namespace rfga {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
    return buf;
}

double parse_num(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str()) throw ParseError("expected a number, got '" + s + "'");
    return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

void append_sidecar(const std::string& run_dir, const std::string& msg) {
    std::ofstream os(run_dir + "/run.log", std::ios::app);
    const auto now = std::chrono::system_clock::now();
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch());
    os << "[t+" << secs.count() << "s] " << msg << '\n';
}

}  // namespace

const std::vector<std::string>& known_variants() {
    static const std::vector<std::string> v = {"cam_baseline",    "rfga_residual",
                                               "rfga_nonresidual", "rfga_channel_only",
                                               "rfga_height_only", "rfga_width_only"};
    return v;
}

VariantSpec parse_variant(const std::string& name) {
    VariantSpec spec;
    spec.name = name;
    if (name == "cam_baseline") {
        spec.rfga = std::nullopt;
        return spec;
    }
    RfgaConfig cfg;
    if (name == "rfga_residual") {
        cfg.residual = true;
    } else if (name == "rfga_nonresidual") {
        cfg.residual = false;
    } else if (name == "rfga_channel_only") {
        cfg.residual = true;
        cfg.views = ViewSet::only(View::channel);
    } else if (name == "rfga_height_only") {
        cfg.residual = true;
        cfg.views = ViewSet::only(View::height);
    } else if (name == "rfga_width_only") {
        cfg.residual = true;
        cfg.views = ViewSet::only(View::width);
    } else {
        throw ConfigError("unknown variant '" + name + "'");
    }
    spec.rfga = cfg;
    return spec;
}

ExperimentConfig ExperimentConfig::from_kv(const KvConfig& kv) {
    ExperimentConfig cfg;
    cfg.dataset.n_classes = kv.get_int("dataset.n_classes", cfg.dataset.n_classes);
    cfg.dataset.train_per_class = kv.get_int("dataset.train_per_class", cfg.dataset.train_per_class);
    cfg.dataset.test_per_class = kv.get_int("dataset.test_per_class", cfg.dataset.test_per_class);
    cfg.dataset.image_size = kv.get_int("dataset.image_size", cfg.dataset.image_size);
    cfg.dataset.part_min = kv.get_int("dataset.part_min", cfg.dataset.part_min);
    cfg.dataset.part_max = kv.get_int("dataset.part_max", cfg.dataset.part_max);
    cfg.dataset.body_min = kv.get_int("dataset.body_min", cfg.dataset.body_min);
    cfg.dataset.body_max = kv.get_int("dataset.body_max", cfg.dataset.body_max);
    cfg.dataset.noise = kv.get_double("dataset.noise", cfg.dataset.noise);
    cfg.dataset.seed = static_cast<uint64_t>(kv.get_int("dataset.seed", static_cast<int64_t>(cfg.dataset.seed)));
    cfg.dataset_dir = kv.get("dataset.dir", cfg.dataset_dir);

    cfg.train.lr = kv.get_double("train.lr", cfg.train.lr);
    cfg.train.momentum = kv.get_double("train.momentum", cfg.train.momentum);
    cfg.train.epochs = kv.get_int("train.epochs", cfg.train.epochs);
    cfg.train.batch_size = kv.get_int("train.batch_size", cfg.train.batch_size);
    cfg.train.lr_decay = kv.get_double("train.lr_decay", cfg.train.lr_decay);
    cfg.train.lr_decay_period = kv.get_int("train.lr_decay_period", cfg.train.lr_decay_period);
    cfg.train.seed = static_cast<uint64_t>(kv.get_int("train.seed", static_cast<int64_t>(cfg.train.seed)));

    cfg.variant = kv.get("experiment.variant", cfg.variant);
    cfg.out_dir = kv.get("experiment.out", cfg.out_dir);
    cfg.eval_subset = kv.get_int("experiment.eval_subset", cfg.eval_subset);
    cfg.bilinear = kv.get_bool("experiment.bilinear", cfg.bilinear);
    cfg.self_check = kv.get_bool("experiment.self_check", cfg.self_check);
    parse_variant(cfg.variant);  // fail fast on unknown names
    return cfg;
}

// ---------------------------------------------------------------------------
// checkpoint conversion
// ---------------------------------------------------------------------------

Checkpoint model_to_checkpoint(BackboneParams& p) {
    Checkpoint ckpt;
    auto scalar = [](double v) { return Tensor::scalar(v); };
    ckpt.add("meta.version", scalar(1));
    ckpt.add("meta.n_classes", scalar(static_cast<double>(p.n_classes)));
    ckpt.add("meta.image_size", scalar(static_cast<double>(p.image_size)));
    ckpt.add("meta.rfga_enabled", scalar(p.rfga.has_value() ? 1.0 : 0.0));
    if (p.rfga_cfg.has_value()) {
        ckpt.add("meta.kernel_size", scalar(static_cast<double>(p.rfga_cfg->kernel_size)));
        ckpt.add("meta.residual", scalar(p.rfga_cfg->residual ? 1.0 : 0.0));
        ckpt.add("meta.view_channel", scalar(p.rfga_cfg->views.channel ? 1.0 : 0.0));
        ckpt.add("meta.view_height", scalar(p.rfga_cfg->views.height ? 1.0 : 0.0));
        ckpt.add("meta.view_width", scalar(p.rfga_cfg->views.width ? 1.0 : 0.0));
    }
    for (const auto& [name, t] : p.state_tensors()) ckpt.add(name, *t);
    for (const auto& [name, c] : p.state_counters()) {
        ckpt.add(name, scalar(static_cast<double>(*c)));
    }
    return ckpt;
}

BackboneParams model_from_checkpoint(const Checkpoint& ckpt) {
    auto meta = [&](const std::string& key) -> double {
        const Tensor* t = ckpt.find(key);
        if (!t) throw IoError("checkpoint missing record '" + key + "'");
        return (*t)[0];
    };
    const int64_t n_classes = static_cast<int64_t>(meta("meta.n_classes"));
    const int64_t image_size = static_cast<int64_t>(meta("meta.image_size"));
    std::optional<RfgaConfig> rcfg;
    if (meta("meta.rfga_enabled") != 0.0) {
        RfgaConfig c;
        c.kernel_size = static_cast<int64_t>(meta("meta.kernel_size"));
        c.residual = meta("meta.residual") != 0.0;
        c.views.channel = meta("meta.view_channel") != 0.0;
        c.views.height = meta("meta.view_height") != 0.0;
        c.views.width = meta("meta.view_width") != 0.0;
        rcfg = c;
    }
    Prng scratch(0);
    BackboneParams p = BackboneParams::init(n_classes, image_size, rcfg, scratch);
    for (auto& [name, t] : p.state_tensors()) {
        const Tensor* rec = ckpt.find(name);
        if (!rec) throw IoError("checkpoint missing record '" + name + "'");
        if (!same_shape(rec->shape(), t->shape())) {
            throw IoError("checkpoint record '" + name + "' has shape " + shape_str(rec->shape()) +
                          " but the model expects " + shape_str(t->shape()));
        }
        *t = *rec;
    }
    for (auto& [name, c] : p.state_counters()) {
        const Tensor* rec = ckpt.find(name);
        *c = rec ? static_cast<int64_t>((*rec)[0]) : 0;
    }
    return p;
}

void check_model_matches(const Checkpoint& ckpt, const ExperimentConfig& cfg) {
    const VariantSpec vs = parse_variant(cfg.variant);
    const Tensor* ncls = ckpt.find("meta.n_classes");
    const Tensor* isz = ckpt.find("meta.image_size");
    const Tensor* ren = ckpt.find("meta.rfga_enabled");
    if (!ncls || !isz || !ren) throw IoError("checkpoint lacks model metadata");
    if (static_cast<int64_t>((*ncls)[0]) != cfg.dataset.n_classes) {
        throw IoError("checkpoint has " + std::to_string(static_cast<int64_t>((*ncls)[0])) +
                      " classes but the config expects " + std::to_string(cfg.dataset.n_classes));
    }
    if (static_cast<int64_t>((*isz)[0]) != cfg.dataset.image_size) {
        throw IoError("checkpoint image size " + std::to_string(static_cast<int64_t>((*isz)[0])) +
                      " does not match config image size " + std::to_string(cfg.dataset.image_size));
    }
    if ((((*ren)[0]) != 0.0) != vs.rfga.has_value()) {
        throw IoError("checkpoint attention configuration does not match variant '" + cfg.variant + "'");
    }
}

// ---------------------------------------------------------------------------
// train log csv
// ---------------------------------------------------------------------------

static const char* kLogHeader =
    "epoch,lr,train_loss,train_top1,test_top1,maxboxacc_avg,maxboxacc_d50,optimal_tau,is_final";

std::string train_log_to_csv(const std::vector<EpochRow>& rows) {
    std::ostringstream os;
    os << kLogHeader << '\n';
    for (const EpochRow& r : rows) {
        os << r.epoch << ',' << fmt(r.lr) << ',' << fmt(r.train_loss) << ',' << fmt(r.train_top1)
           << ',' << fmt(r.test_top1) << ',' << fmt(r.maxboxacc_avg) << ',' << fmt(r.maxboxacc_d50)
           << ',' << fmt(r.optimal_tau) << ',' << r.is_final << '\n';
    }
    return os.str();
}

std::vector<EpochRow> train_log_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kLogHeader) {
        throw ParseError("training log: unexpected header");
    }
    std::vector<EpochRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 9) throw ParseError("training log: bad row '" + line + "'");
        EpochRow r;
        r.epoch = static_cast<int64_t>(parse_num(f[0]));
        r.lr = parse_num(f[1]);
        r.train_loss = parse_num(f[2]);
        r.train_top1 = parse_num(f[3]);
        r.test_top1 = parse_num(f[4]);
        r.maxboxacc_avg = parse_num(f[5]);
        r.maxboxacc_d50 = parse_num(f[6]);
        r.optimal_tau = parse_num(f[7]);
        r.is_final = static_cast<int>(parse_num(f[8]));
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// data adapters
// ---------------------------------------------------------------------------

std::vector<TrainExample> to_examples(std::span<const GtSample> data) {
    std::vector<TrainExample> out(data.size());
    for (size_t i = 0; i < data.size(); ++i) out[i] = {&data[i].image, data[i].label};
    return out;
}

std::vector<EvalSample> to_eval_samples(std::span<const GtSample> data, const Tensor& score_maps) {
    std::vector<EvalSample> out(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        const GtSample& g = data[i];
        EvalSample& e = out[i];
        e.activation = cam(score_maps, static_cast<int64_t>(i), g.label);
        e.activation.image_id = static_cast<int32_t>(i);
        e.gt_box = g.gt_box;
        e.width = static_cast<int32_t>(g.image.dim(2));
        e.height = static_cast<int32_t>(g.image.dim(1));
    }
    return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

TrainResult run_train(const SynthDataset& ds, const ExperimentConfig& cfg,
                      const std::string& run_dir) {
    cfg.train.validate();
    const VariantSpec variant = parse_variant(cfg.variant);
    fs::create_directories(run_dir);
    append_sidecar(run_dir, "train start: variant=" + cfg.variant +
                                " seed=" + std::to_string(cfg.train.seed));

    if (cfg.self_check) {
        const double err = composite_grad_spot_check(ds, cfg, 2);
        append_sidecar(run_dir, "gradient spot check max rel err = " + fmt(err));
        if (!(err < 1e-4)) {
            throw ContractError("gradient spot check failed before training: " + fmt(err));
        }
    }

    Prng init_rng(cfg.train.seed, 0x494e4954ull);
    BackboneParams params =
        BackboneParams::init(ds.manifest.get_int("n_classes"), ds.manifest.get_int("image_size"),
                             variant.rfga, init_rng);

    const std::vector<TrainExample> train_examples = to_examples(ds.train);
    const int64_t subset_n = cfg.eval_subset <= 0
                                 ? static_cast<int64_t>(ds.test.size())
                                 : std::min<int64_t>(cfg.eval_subset, static_cast<int64_t>(ds.test.size()));
    const std::span<const GtSample> subset(ds.test.data(), static_cast<size_t>(subset_n));
    const std::vector<TrainExample> subset_examples = to_examples(subset);

    SgdMomentum opt;
    opt.momentum = cfg.train.momentum;
    TrainResult result;

    for (int64_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        const EpochStats stats = train_epoch(train_examples, params, cfg.train, epoch, opt);

        const auto [logits, maps] = eval_forward(subset_examples, params);
        int64_t correct = 0;
        for (int64_t i = 0; i < subset_n; ++i) {
            if (argmax_lowest(logits, i) == subset[static_cast<size_t>(i)].label) ++correct;
        }
        const auto eval_samples = to_eval_samples(subset, maps);
        const WsolReport rep = max_box_acc(eval_samples, {}, cfg.upsample());

        EpochRow row;
        row.epoch = epoch + 1;
        row.lr = cfg.train.lr_at(epoch);
        row.train_loss = stats.mean_loss;
        row.train_top1 = stats.train_top1;
        row.test_top1 = static_cast<double>(correct) / static_cast<double>(subset_n);
        row.maxboxacc_avg = rep.mean_max_box_acc();
        row.maxboxacc_d50 = rep.max_box_acc[0];
        row.optimal_tau = rep.overall_optimal_tau;
        row.is_final = (epoch + 1 == cfg.train.epochs) ? 1 : 0;
        result.log.push_back(row);

        char name[64];
        std::snprintf(name, sizeof(name), "ckpt_epoch_%03lld.rfga",
                      static_cast<long long>(epoch + 1));
        const Checkpoint ckpt = model_to_checkpoint(params);
        save_checkpoint(run_dir + "/" + name, ckpt);
        if (epoch + 1 == cfg.train.epochs) {
            result.final_checkpoint = run_dir + "/ckpt_final.rfga";
            save_checkpoint(result.final_checkpoint, ckpt);
        }
        append_sidecar(run_dir, "epoch " + std::to_string(epoch + 1) +
                                    " loss=" + fmt(stats.mean_loss) +
                                    " top1=" + fmt(row.test_top1));
    }

    std::ofstream log(run_dir + "/log.csv");
    if (!log) throw IoError("cannot write " + run_dir + "/log.csv");
    log << train_log_to_csv(result.log);
    append_sidecar(run_dir, "train done");
    return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalResult run_eval(std::span<const GtSample> test, BackboneParams& params, Upsample upsample) {
    if (test.empty()) throw ContractError("run_eval on empty test set");
    const std::vector<TrainExample> examples = to_examples(test);
    const auto [logits, maps] = eval_forward(examples, params);
    int64_t correct = 0;
    for (int64_t i = 0; i < static_cast<int64_t>(test.size()); ++i) {
        if (argmax_lowest(logits, i) == test[static_cast<size_t>(i)].label) ++correct;
    }
    const auto samples = to_eval_samples(test, maps);
    EvalResult out;
    out.report = max_box_acc(samples, {}, upsample);
    out.top1 = static_cast<double>(correct) / static_cast<double>(test.size());
    return out;
}

EvalResult run_eval_mask_oracle(std::span<const GtSample> test) {
    if (test.empty()) throw ContractError("run_eval on empty test set");
    std::vector<EvalSample> samples(test.size());
    for (size_t i = 0; i < test.size(); ++i) {
        const GtSample& g = test[i];
        const int64_t s = g.image.dim(1);
        EvalSample& e = samples[i];
        e.activation.map = Tensor({s, s});
        for (int64_t j = 0; j < s * s; ++j) {
            e.activation.map[j] = static_cast<double>(g.mask[static_cast<size_t>(j)]);
        }
        e.activation.class_idx = g.label;
        e.activation.image_id = static_cast<int32_t>(i);
        e.gt_box = g.gt_box;
        e.width = static_cast<int32_t>(s);
        e.height = static_cast<int32_t>(s);
    }
    EvalResult out;
    out.report = max_box_acc(samples, {}, Upsample::nearest);
    out.top1 = 1.0;  // the oracle stub has no classifier
    return out;
}

std::string summary_table(const std::string& variant, const WsolReport& rep, double top1) {
    std::ostringstream os;
    os << "variant: " << variant << '\n';
    os << "MaxBoxAcc (%):";
    for (size_t d = 0; d < rep.deltas.size(); ++d) {
        os << " delta=" << rep.deltas[d] << ": " << fmt_pct(rep.max_box_acc[d]);
    }
    os << '\n';
    os << "Avg. MaxBoxAcc (%): " << fmt_pct(rep.mean_max_box_acc()) << '\n';
    os << "optimal tau per delta:";
    for (size_t d = 0; d < rep.deltas.size(); ++d) {
        os << " delta=" << rep.deltas[d] << ": " << rep.optimal_tau[d];
    }
    os << '\n';
    os << "overall optimal tau: " << rep.overall_optimal_tau << '\n';
    char miou[32];
    std::snprintf(miou, sizeof(miou), "%.4f", rep.miou_at_optimal_tau);
    os << "mIoU (optimal tau): " << miou << '\n';
    os << "classification top-1 (%): " << fmt_pct(top1) << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// composite gradient spot check
// ---------------------------------------------------------------------------

double composite_grad_spot_check(const SynthDataset& ds, const ExperimentConfig& cfg,
                                 int64_t coords_per_param) {
    const VariantSpec variant = parse_variant(cfg.variant);
    Prng init_rng(cfg.train.seed, 0x494e4954ull);
    BackboneParams params =
        BackboneParams::init(ds.manifest.get_int("n_classes"), ds.manifest.get_int("image_size"),
                             variant.rfga, init_rng);

    const int64_t batch = std::min<int64_t>(8, static_cast<int64_t>(ds.train.size()));
    if (batch < 2) throw ContractError("spot check needs at least two samples");
    const int64_t per = ds.train[0].image.size();
    Shape bshape = ds.train[0].image.shape();
    bshape.insert(bshape.begin(), batch);
    Tensor images(bshape);
    std::vector<int32_t> labels(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i) {
        const GtSample& g = ds.train[static_cast<size_t>(i)];
        std::copy(g.image.data(), g.image.data() + per, images.data() + i * per);
        labels[static_cast<size_t>(i)] = g.label;
    }

    std::vector<Tensor> inputs;
    inputs.push_back(images);
    for (const auto& [name, t] : params.trainable()) inputs.push_back(*t);
    const bool has_rfga = params.rfga.has_value();

    MultiScalarFn f = [&params, &labels, has_rfga](Tape& tape, const std::vector<Var>& vars) {
        BackboneParams local = params;  // fresh BN state per evaluation
        std::vector<Var> ordered(vars.begin() + 1, vars.end());
        const LiftedBackbone lifted = lifted_from_ordered(ordered, has_rfga);
        ForwardResult fwd = forward_with_vars(tape, vars[0], local, lifted, Mode::train);
        return tape.softmax_cross_entropy(fwd.logits, labels);
    };

    GradCheckOptions opts;
    opts.eps = 1e-5;
    opts.max_coords = coords_per_param;
    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        opts.coord_seed = cfg.train.seed + i;
        worst = std::max(worst, grad_check_multi(f, inputs, i, opts));
    }
    return worst;
}

}  // namespace rfga

#include "rfga/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace rfga {

namespace {

constexpr int64_t kWidths[3] = {16, 32, 64};

Tensor conv_init(int64_t co, int64_t ci, int64_t k, Prng& rng) {
    Tensor w({co, ci, k, k});
    const double bound = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
    for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
    return w;
}

}  // namespace

BackboneParams BackboneParams::init(int64_t n_classes, int64_t image_size,
                                    std::optional<RfgaConfig> rfga_cfg, Prng& rng) {
    if (n_classes < 2) throw ConfigError("need at least two classes");
    if (image_size < 8 || image_size % 8 != 0) {
        throw ConfigError("image size must be a positive multiple of 8, got " +
                          std::to_string(image_size));
    }
    BackboneParams p;
    p.n_classes = n_classes;
    p.image_size = image_size;
    p.block1.w = conv_init(kWidths[0], 3, 3, rng);
    p.block1.bn = BatchNorm::make({kWidths[0]});
    p.block2.w = conv_init(kWidths[1], kWidths[0], 3, rng);
    p.block2.bn = BatchNorm::make({kWidths[1]});
    p.block3.w = conv_init(kWidths[2], kWidths[1], 3, rng);
    p.block3.bn = BatchNorm::make({kWidths[2]});
    p.head_w = conv_init(n_classes, kWidths[2], 1, rng);
    p.rfga_cfg = rfga_cfg;
    if (rfga_cfg.has_value()) {
        const int64_t s = image_size / 8;
        p.rfga = RfgaParams::init(*rfga_cfg, {kWidths[2], s, s}, rng);
    }
    return p;
}

std::vector<std::pair<std::string, Tensor*>> BackboneParams::trainable() {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"block1.w", &block1.w},     {"block1.bn.gamma", &block1.bn.gamma},
        {"block1.bn.beta", &block1.bn.beta},
        {"block2.w", &block2.w},     {"block2.bn.gamma", &block2.bn.gamma},
        {"block2.bn.beta", &block2.bn.beta},
        {"block3.w", &block3.w},     {"block3.bn.gamma", &block3.bn.gamma},
        {"block3.bn.beta", &block3.bn.beta},
        {"head.w", &head_w},
    };
    if (rfga.has_value()) {
        RfgaParams& r = *rfga;
        out.insert(out.end(), {
            {"rfga.kernel_h", &r.kernel_h}, {"rfga.kernel_w", &r.kernel_w},
            {"rfga.kernel_c", &r.kernel_c},
            {"rfga.bn_h.gamma", &r.bn_h.gamma}, {"rfga.bn_h.beta", &r.bn_h.beta},
            {"rfga.bn_w.gamma", &r.bn_w.gamma}, {"rfga.bn_w.beta", &r.bn_w.beta},
            {"rfga.bn_c.gamma", &r.bn_c.gamma}, {"rfga.bn_c.beta", &r.bn_c.beta},
        });
    }
    return out;
}

std::vector<std::pair<std::string, Tensor*>> BackboneParams::state_tensors() {
    auto out = trainable();
    auto add_bn = [&out](const std::string& prefix, BatchNorm& bn) {
        out.emplace_back(prefix + ".running_mean", &bn.running_mean);
        out.emplace_back(prefix + ".running_var", &bn.running_var);
    };
    add_bn("block1.bn", block1.bn);
    add_bn("block2.bn", block2.bn);
    add_bn("block3.bn", block3.bn);
    if (rfga.has_value()) {
        add_bn("rfga.bn_h", rfga->bn_h);
        add_bn("rfga.bn_w", rfga->bn_w);
        add_bn("rfga.bn_c", rfga->bn_c);
    }
    return out;
}

std::vector<std::pair<std::string, int64_t*>> BackboneParams::state_counters() {
    std::vector<std::pair<std::string, int64_t*>> out = {
        {"block1.bn.updates", &block1.bn.updates},
        {"block2.bn.updates", &block2.bn.updates},
        {"block3.bn.updates", &block3.bn.updates},
    };
    if (rfga.has_value()) {
        out.emplace_back("rfga.bn_h.updates", &rfga->bn_h.updates);
        out.emplace_back("rfga.bn_w.updates", &rfga->bn_w.updates);
        out.emplace_back("rfga.bn_c.updates", &rfga->bn_c.updates);
    }
    return out;
}

LiftedBackbone lift_backbone(Tape& tape, BackboneParams& p, bool rg) {
    LiftedBackbone l;
    l.vars.w1 = tape.leaf(p.block1.w, rg);
    l.vars.g1 = tape.leaf(p.block1.bn.gamma, rg);
    l.vars.b1 = tape.leaf(p.block1.bn.beta, rg);
    l.vars.w2 = tape.leaf(p.block2.w, rg);
    l.vars.g2 = tape.leaf(p.block2.bn.gamma, rg);
    l.vars.b2 = tape.leaf(p.block2.bn.beta, rg);
    l.vars.w3 = tape.leaf(p.block3.w, rg);
    l.vars.g3 = tape.leaf(p.block3.bn.gamma, rg);
    l.vars.b3 = tape.leaf(p.block3.bn.beta, rg);
    l.vars.head = tape.leaf(p.head_w, rg);
    l.ordered = {l.vars.w1, l.vars.g1, l.vars.b1, l.vars.w2, l.vars.g2, l.vars.b2,
                 l.vars.w3, l.vars.g3, l.vars.b3, l.vars.head};
    if (p.rfga.has_value()) {
        RfgaVars rv = lift_rfga(tape, *p.rfga, rg);
        l.vars.rfga = rv;
        l.ordered.insert(l.ordered.end(),
                         {rv.kernel_h, rv.kernel_w, rv.kernel_c, rv.gamma_h, rv.beta_h,
                          rv.gamma_w, rv.beta_w, rv.gamma_c, rv.beta_c});
    }
    return l;
}

LiftedBackbone lifted_from_ordered(const std::vector<Var>& ordered, bool has_rfga) {
    const size_t want = has_rfga ? 19 : 10;
    if (ordered.size() != want) {
        throw ContractError("lifted_from_ordered: expected " + std::to_string(want) +
                            " vars, got " + std::to_string(ordered.size()));
    }
    LiftedBackbone l;
    l.ordered = ordered;
    l.vars.w1 = ordered[0];
    l.vars.g1 = ordered[1];
    l.vars.b1 = ordered[2];
    l.vars.w2 = ordered[3];
    l.vars.g2 = ordered[4];
    l.vars.b2 = ordered[5];
    l.vars.w3 = ordered[6];
    l.vars.g3 = ordered[7];
    l.vars.b3 = ordered[8];
    l.vars.head = ordered[9];
    if (has_rfga) {
        RfgaVars rv;
        rv.kernel_h = ordered[10];
        rv.kernel_w = ordered[11];
        rv.kernel_c = ordered[12];
        rv.gamma_h = ordered[13];
        rv.beta_h = ordered[14];
        rv.gamma_w = ordered[15];
        rv.beta_w = ordered[16];
        rv.gamma_c = ordered[17];
        rv.beta_c = ordered[18];
        l.vars.rfga = rv;
    }
    return l;
}

ForwardResult forward_classify(Tape& tape, Var images, BackboneParams& p, Mode mode,
                               bool requires_grad) {
    return forward_with_vars(tape, images, p, lift_backbone(tape, p, requires_grad), mode);
}

ForwardResult forward_with_vars(Tape& tape, Var images, BackboneParams& p,
                                const LiftedBackbone& lifted, Mode mode) {
    const Tensor& vx = tape.value(images);
    if (vx.rank() != 4 || vx.dim(1) != 3) {
        throw ShapeError("forward_classify expects [N,3,S,S] images, got " + shape_str(vx.shape()));
    }
    if (vx.dim(2) != p.image_size || vx.dim(3) != p.image_size) {
        throw ShapeError("image size mismatch: model expects " + std::to_string(p.image_size));
    }

    ForwardResult r;
    r.lifted = lifted;
    const BackboneVars& v = r.lifted.vars;

    auto block = [&](Var in, Var w, Var gamma, Var beta, BatchNorm& bn) {
        Var y = tape.conv2d(in, w, 1);
        y = tape.batch_norm(y, gamma, beta, bn, mode, BnLanes::per_channel);
        y = tape.relu(y);
        return tape.avg_pool2x2(y);
    };

    Var y = block(images, v.w1, v.g1, v.b1, p.block1.bn);
    y = block(y, v.w2, v.g2, v.b2, p.block2.bn);
    y = block(y, v.w3, v.g3, v.b3, p.block3.bn);
    r.features = y;

    if (p.rfga.has_value()) {
        if (!v.rfga.has_value()) throw ContractError("lifted vars lack the attention module");
        RfgaForward rf = rfga_forward(tape, y, *v.rfga, *p.rfga, *p.rfga_cfg, mode);
        r.calibrated = rf.calibrated;
        r.attention = rf.attention;
    } else {
        r.calibrated = y;
    }

    r.score_maps = tape.conv2d(r.calibrated, v.head, 0);  // 1x1 head, no bias
    r.logits = tape.spatial_mean(r.score_maps);
    return r;
}

ActivationMap cam(const Tensor& score_maps, int64_t sample_idx, int64_t class_idx) {
    if (score_maps.rank() != 4) {
        throw ShapeError("cam expects [N,K,s,s] score maps, got " + shape_str(score_maps.shape()));
    }
    if (sample_idx < 0 || sample_idx >= score_maps.dim(0)) {
        throw std::out_of_range("cam sample index out of range");
    }
    if (class_idx < 0 || class_idx >= score_maps.dim(1)) {
        throw std::out_of_range("cam class index out of range");
    }
    const int64_t s_h = score_maps.dim(2), s_w = score_maps.dim(3);
    ActivationMap am;
    am.map = Tensor({s_h, s_w});
    const double* src = score_maps.data() + (sample_idx * score_maps.dim(1) + class_idx) * s_h * s_w;
    std::copy(src, src + s_h * s_w, am.map.data());
    am.class_idx = static_cast<int32_t>(class_idx);
    am.image_id = static_cast<int32_t>(sample_idx);
    return am;
}

double TrainConfig::lr_at(int64_t epoch) const {
    const int64_t steps = lr_decay_period > 0 ? epoch / lr_decay_period : 0;
    return lr * std::pow(lr_decay, static_cast<double>(steps));
}

void TrainConfig::validate() const {
    if (lr < 0.0) throw ConfigError("learning rate must not be negative");
    if (batch_size < 2) throw ConfigError("batch size must be >= 2 for batch norm");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
}

void SgdMomentum::step(const std::vector<std::pair<std::string, Tensor*>>& params,
                       const std::vector<const Tensor*>& grads, double lr) {
    if (params.size() != grads.size()) throw ContractError("optimizer param/grad count mismatch");
    if (velocity.empty()) {
        velocity.reserve(params.size());
        for (const auto& [name, t] : params) velocity.emplace_back(t->shape());
    }
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i].second;
        Tensor& v = velocity[i];
        const Tensor& g = *grads[i];
        for (int64_t j = 0; j < p.size(); ++j) {
            v[j] = momentum * v[j] + g[j];
            p[j] -= lr * v[j];
        }
    }
}

namespace {

Tensor gather_batch(std::span<const TrainExample> data, std::span<const int64_t> idx) {
    const Tensor& first = *data[static_cast<size_t>(idx[0])].image;
    const int64_t per = first.size();
    Shape shape = first.shape();
    shape.insert(shape.begin(), static_cast<int64_t>(idx.size()));
    Tensor batch(shape);
    for (size_t i = 0; i < idx.size(); ++i) {
        const Tensor& img = *data[static_cast<size_t>(idx[i])].image;
        std::copy(img.data(), img.data() + per, batch.data() + static_cast<int64_t>(i) * per);
    }
    return batch;
}

}  // namespace

EpochStats train_epoch(std::span<const TrainExample> data, BackboneParams& params,
                       const TrainConfig& cfg, int64_t epoch, SgdMomentum& opt) {
    cfg.validate();
    if (data.empty()) throw ContractError("train_epoch on empty dataset");
    const double lr = cfg.lr_at(epoch);

    std::vector<int64_t> order(data.size());
    for (size_t i = 0; i < data.size(); ++i) order[i] = static_cast<int64_t>(i);
    Prng shuffle_rng = Prng(cfg.seed, 0x5348464cull).substream(static_cast<uint64_t>(epoch));
    for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
        const int64_t j = shuffle_rng.uniform_int(i + 1);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    double loss_sum = 0.0;
    int64_t batches = 0, correct = 0, seen = 0;
    const auto plist = params.trainable();

    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
        const size_t take = std::min(static_cast<size_t>(cfg.batch_size), order.size() - pos);
        if (take < 2) break;  // a trailing singleton cannot be batch-normalized
        std::span<const int64_t> idx(order.data() + pos, take);

        std::vector<int32_t> labels(take);
        for (size_t i = 0; i < take; ++i) labels[i] = data[static_cast<size_t>(idx[i])].label;

        Tape tape;
        const Var images = tape.leaf(gather_batch(data, idx), false);
        ForwardResult fwd = forward_classify(tape, images, params, Mode::train, true);
        const Var loss = tape.softmax_cross_entropy(fwd.logits, labels);

        const double loss_v = tape.value(loss)[0];
        if (!std::isfinite(loss_v)) {
            throw ContractError("non-finite training loss at epoch " + std::to_string(epoch) +
                                " batch " + std::to_string(batches) +
                                "; the learning rate is likely too high");
        }
        const Tensor& logits = tape.value(fwd.logits);
        for (size_t i = 0; i < take; ++i) {
            if (argmax_lowest(logits, static_cast<int64_t>(i)) == labels[i]) ++correct;
        }
        seen += static_cast<int64_t>(take);

        tape.backward(loss);
        std::vector<const Tensor*> grads;
        grads.reserve(fwd.lifted.ordered.size());
        for (Var v : fwd.lifted.ordered) grads.push_back(&tape.grad(v));
        opt.momentum = cfg.momentum;
        opt.step(plist, grads, lr);

        loss_sum += loss_v;
        ++batches;
    }
    if (batches == 0) throw ContractError("no trainable batch of size >= 2");
    return EpochStats{loss_sum / static_cast<double>(batches),
                      static_cast<double>(correct) / static_cast<double>(seen)};
}

std::pair<Tensor, Tensor> eval_forward(std::span<const TrainExample> data, BackboneParams& params,
                                       int64_t chunk) {
    if (data.empty()) throw ContractError("eval_forward on empty dataset");
    const int64_t n = static_cast<int64_t>(data.size());
    const int64_t s = params.map_size();
    Tensor logits({n, params.n_classes});
    Tensor maps({n, params.n_classes, s, s});
    std::vector<int64_t> idx;
    for (int64_t pos = 0; pos < n; pos += chunk) {
        const int64_t take = std::min(chunk, n - pos);
        idx.resize(static_cast<size_t>(take));
        for (int64_t i = 0; i < take; ++i) idx[static_cast<size_t>(i)] = pos + i;
        Tape tape;
        const Var images = tape.leaf(gather_batch(data, idx), false);
        ForwardResult fwd = forward_classify(tape, images, params, Mode::eval, false);
        const Tensor& lv = tape.value(fwd.logits);
        const Tensor& mv = tape.value(fwd.score_maps);
        std::copy(lv.data(), lv.data() + lv.size(), logits.data() + pos * params.n_classes);
        std::copy(mv.data(), mv.data() + mv.size(),
                  maps.data() + pos * params.n_classes * s * s);
    }
    return {std::move(logits), std::move(maps)};
}

int64_t argmax_lowest(const Tensor& logits, int64_t row) {
    const int64_t k = logits.dim(1);
    const double* p = logits.data() + row * k;
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j) {
        if (p[j] > p[best]) best = j;  // strict: ties keep the lowest index
    }
    return best;
}

double top1_accuracy(std::span<const TrainExample> data, BackboneParams& params) {
    if (data.empty()) throw ContractError("top1_accuracy on empty dataset");
    const auto [logits, maps] = eval_forward(data, params);
    int64_t correct = 0;
    for (int64_t i = 0; i < static_cast<int64_t>(data.size()); ++i) {
        if (argmax_lowest(logits, i) == data[static_cast<size_t>(i)].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace rfga

#include "rfga/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace rfga {

namespace {

static_assert(std::endian::native == std::endian::little,
              "dataset dumps assume a little-endian host");

struct Rgb {
    double r, g, b;
};

Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp)) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

// class-specific patch look: evenly spaced hues, complementary second color,
// pattern kind cycling through four primitives
struct PatchStyle {
    Rgb a, b;
    int kind;  // 0 solid, 1 checker, 2 hstripes, 3 vstripes
};

PatchStyle patch_style(int64_t class_idx, int64_t n_classes) {
    const double hue = static_cast<double>(class_idx) / static_cast<double>(n_classes);
    PatchStyle st;
    st.a = hsv(hue, 0.9, 0.95);
    st.b = hsv(hue + 0.5, 0.85, 0.75);
    st.kind = static_cast<int>(class_idx % 4);
    return st;
}

// class-independent body texture pool
const Rgb kBodyColors[4] = {
    {0.45, 0.45, 0.45}, {0.46, 0.34, 0.22}, {0.40, 0.46, 0.28}, {0.32, 0.38, 0.48}};

Rgb texel(const Rgb& a, const Rgb& b, int kind, int64_t x, int64_t y, int64_t cell) {
    bool use_a = true;
    switch (kind) {
        case 0: use_a = true; break;
        case 1: use_a = ((x / cell) + (y / cell)) % 2 == 0; break;
        case 2: use_a = (y / cell) % 2 == 0; break;
        default: use_a = (x / cell) % 2 == 0; break;
    }
    return use_a ? a : b;
}

void put_pixel(Tensor& img, int64_t x, int64_t y, const Rgb& c) {
    const int64_t s = img.dim(1);
    img[0 * s * s + y * s + x] = std::clamp(c.r, 0.0, 1.0);
    img[1 * s * s + y * s + x] = std::clamp(c.g, 0.0, 1.0);
    img[2 * s * s + y * s + x] = std::clamp(c.b, 0.0, 1.0);
}

Box tight_box(const std::vector<uint8_t>& mask, int64_t s) {
    int64_t x0 = s, y0 = s, x1 = -1, y1 = -1;
    for (int64_t y = 0; y < s; ++y) {
        for (int64_t x = 0; x < s; ++x) {
            if (!mask[static_cast<size_t>(y * s + x)]) continue;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
    }
    if (x1 < 0) throw ContractError("empty object mask");
    return Box{static_cast<int32_t>(x0), static_cast<int32_t>(y0), static_cast<int32_t>(x1),
               static_cast<int32_t>(y1)};
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void SynthSpec::validate() const {
    if (n_classes < 2) throw ConfigError("synth: need at least 2 classes");
    if (image_size < 32 || image_size % 8 != 0) {
        throw ConfigError("synth: image size must be a multiple of 8 and >= 32");
    }
    if (part_min < 4 || part_min > part_max) throw ConfigError("synth: bad patch range");
    if (body_min < part_max || body_min > body_max) throw ConfigError("synth: bad body range");
    if (body_max + part_max / 2 + 4 > image_size) {
        throw ConfigError("synth: object does not fit in the image");
    }
    if (noise < 0.0 || noise > 0.5) throw ConfigError("synth: noise must be in [0, 0.5]");
    if (train_per_class < 1 || test_per_class < 1) throw ConfigError("synth: empty split");
}

GtSample generate_sample(const SynthSpec& spec, int64_t class_idx, Prng rng, PartMode mode) {
    spec.validate();
    if (class_idx < 0 || class_idx >= spec.n_classes) {
        throw ContractError("class index out of range");
    }
    const int64_t s = spec.image_size;
    const int64_t margin = 2;

    // geometry draws happen in a fixed order so each sample is a pure
    // function of (spec, class, rng)
    const int64_t body_w = rng.uniform_int(spec.body_min, spec.body_max);
    const int64_t body_h = rng.uniform_int(spec.body_min, spec.body_max);
    const bool ellipse = rng.coin();
    const int64_t body_tex_kind = rng.uniform_int(4);
    const int64_t body_color_a = rng.uniform_int(4);
    const int64_t body_color_b = (body_color_a + 1 + rng.uniform_int(3)) % 4;
    const int64_t patch_side = rng.uniform_int(spec.part_min, spec.part_max);

    int64_t body_x0 = 0, body_y0 = 0, patch_x0 = 0, patch_y0 = 0;
    bool placed = false;
    for (int attempt = 0; attempt < 128 && !placed; ++attempt) {
        body_x0 = rng.uniform_int(margin, s - margin - body_w);
        body_y0 = rng.uniform_int(margin, s - margin - body_h);
        // anchor the patch center on the body outline so the two parts
        // overlap or abut
        const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double cx = static_cast<double>(body_x0) + static_cast<double>(body_w) / 2.0;
        const double cy = static_cast<double>(body_y0) + static_cast<double>(body_h) / 2.0;
        double ax, ay;
        if (ellipse) {
            ax = cx + (static_cast<double>(body_w) / 2.0) * std::cos(theta);
            ay = cy + (static_cast<double>(body_h) / 2.0) * std::sin(theta);
        } else {
            // project the ray onto the rectangle border
            const double dx = std::cos(theta), dy = std::sin(theta);
            const double tx = (static_cast<double>(body_w) / 2.0) / std::max(1e-9, std::abs(dx));
            const double ty = (static_cast<double>(body_h) / 2.0) / std::max(1e-9, std::abs(dy));
            const double t = std::min(tx, ty);
            ax = cx + t * dx;
            ay = cy + t * dy;
        }
        patch_x0 = static_cast<int64_t>(std::llround(ax)) - patch_side / 2;
        patch_y0 = static_cast<int64_t>(std::llround(ay)) - patch_side / 2;
        placed = patch_x0 >= margin && patch_y0 >= margin && patch_x0 + patch_side <= s - margin &&
                 patch_y0 + patch_side <= s - margin;
    }
    if (!placed) throw ContractError("synth: failed to place object after 128 attempts");

    GtSample out;
    out.label = static_cast<int32_t>(class_idx);
    out.image = Tensor({3, s, s});
    out.mask.assign(static_cast<size_t>(s * s), 0);

    // background: lightly tinted gray plus per-pixel noise
    const double tint_r = 0.5 + rng.uniform(-0.03, 0.03);
    const double tint_g = 0.5 + rng.uniform(-0.03, 0.03);
    const double tint_b = 0.5 + rng.uniform(-0.03, 0.03);
    for (int64_t y = 0; y < s; ++y) {
        for (int64_t x = 0; x < s; ++x) {
            put_pixel(out.image, x, y,
                      {tint_r + rng.uniform(-spec.noise, spec.noise),
                       tint_g + rng.uniform(-spec.noise, spec.noise),
                       tint_b + rng.uniform(-spec.noise, spec.noise)});
        }
    }

    if (mode != PartMode::patch_only) {
        const Rgb ca = kBodyColors[body_color_a];
        const Rgb cb = kBodyColors[body_color_b];
        const double cx = static_cast<double>(body_x0) + static_cast<double>(body_w) / 2.0;
        const double cy = static_cast<double>(body_y0) + static_cast<double>(body_h) / 2.0;
        for (int64_t y = body_y0; y < body_y0 + body_h; ++y) {
            for (int64_t x = body_x0; x < body_x0 + body_w; ++x) {
                if (ellipse) {
                    const double nx = (static_cast<double>(x) + 0.5 - cx) / (static_cast<double>(body_w) / 2.0);
                    const double ny = (static_cast<double>(y) + 0.5 - cy) / (static_cast<double>(body_h) / 2.0);
                    if (nx * nx + ny * ny > 1.0) continue;
                }
                Rgb c = texel(ca, cb, static_cast<int>(body_tex_kind), x, y, 5);
                if (body_tex_kind == 3) {  // noisy texture variant
                    const double j = rng.uniform(-0.08, 0.08);
                    c = {ca.r + j, ca.g + j, ca.b + j};
                }
                put_pixel(out.image, x, y, c);
                out.mask[static_cast<size_t>(y * s + x)] = 1;
            }
        }
    }

    if (mode != PartMode::body_only) {
        const PatchStyle st = patch_style(class_idx, spec.n_classes);
        for (int64_t y = patch_y0; y < patch_y0 + patch_side; ++y) {
            for (int64_t x = patch_x0; x < patch_x0 + patch_side; ++x) {
                put_pixel(out.image, x, y, texel(st.a, st.b, st.kind, x - patch_x0, y - patch_y0, 3));
                out.mask[static_cast<size_t>(y * s + x)] = 1;
            }
        }
    }

    out.gt_box = tight_box(out.mask, s);
    out.patch_box = Box{static_cast<int32_t>(patch_x0), static_cast<int32_t>(patch_y0),
                        static_cast<int32_t>(patch_x0 + patch_side - 1),
                        static_cast<int32_t>(patch_y0 + patch_side - 1)};
    return out;
}

SynthDataset generate_dataset(const SynthSpec& spec, PartMode mode) {
    spec.validate();
    const Prng root(spec.seed, 0x53594e5448ull);
    const Prng train_root = root.substream(1);
    const Prng test_root = root.substream(2);

    SynthDataset ds;
    const int64_t n_train = spec.n_classes * spec.train_per_class;
    const int64_t n_test = spec.n_classes * spec.test_per_class;
    ds.train.resize(static_cast<size_t>(n_train));
    ds.test.resize(static_cast<size_t>(n_test));

    // samples interleave classes: index i has class i % n_classes
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n_train; ++i) {
        ds.train[static_cast<size_t>(i)] = generate_sample(
            spec, i % spec.n_classes, train_root.substream(static_cast<uint64_t>(i)), mode);
    }
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n_test; ++i) {
        ds.test[static_cast<size_t>(i)] = generate_sample(
            spec, i % spec.n_classes, test_root.substream(static_cast<uint64_t>(i)), mode);
    }

    double gt_area = 0.0, patch_area = 0.0, patch_iou = 0.0;
    for (const auto* split : {&ds.train, &ds.test}) {
        for (const GtSample& g : *split) {
            gt_area += static_cast<double>(g.gt_box.area());
            patch_area += static_cast<double>(g.patch_box.area());
            patch_iou += iou(g.patch_box, g.gt_box);
        }
    }
    const double n_all = static_cast<double>(n_train + n_test);
    gt_area /= n_all;
    patch_area /= n_all;
    patch_iou /= n_all;
    const double ratio = gt_area / patch_area;

    if (mode == PartMode::full) {
        if (ratio < 3.0 || ratio > 8.0) {
            throw ContractError("synth: gt-box/patch area ratio " + std::to_string(ratio) +
                                " outside [3, 8]");
        }
        if (patch_iou >= 0.35) {
            throw ContractError("synth: mean patch-vs-gt IoU " + std::to_string(patch_iou) +
                                " not below 0.35");
        }
    }

    auto& m = ds.manifest.entries;
    m["n_classes"] = std::to_string(spec.n_classes);
    m["train_per_class"] = std::to_string(spec.train_per_class);
    m["test_per_class"] = std::to_string(spec.test_per_class);
    m["train_total"] = std::to_string(n_train);
    m["test_total"] = std::to_string(n_test);
    m["image_size"] = std::to_string(spec.image_size);
    m["seed"] = std::to_string(spec.seed);
    m["noise"] = fmt_double(spec.noise);
    m["part_min"] = std::to_string(spec.part_min);
    m["part_max"] = std::to_string(spec.part_max);
    m["body_min"] = std::to_string(spec.body_min);
    m["body_max"] = std::to_string(spec.body_max);
    m["mean_gt_box_area"] = fmt_double(gt_area);
    m["mean_patch_area"] = fmt_double(patch_area);
    m["gt_patch_area_ratio"] = fmt_double(ratio);
    m["mean_patch_gt_iou"] = fmt_double(patch_iou);
    return ds;
}

std::string DatasetManifest::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries) os << k << '=' << v << '\n';
    return os.str();
}

DatasetManifest DatasetManifest::from_text(const std::string& text) {
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError("manifest line " + std::to_string(lineno) + ": expected key=value");
        }
        m.entries[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return m;
}

double DatasetManifest::get_double(const std::string& key) const {
    const auto it = entries.find(key);
    if (it == entries.end()) throw ParseError("manifest missing key '" + key + "'");
    return std::strtod(it->second.c_str(), nullptr);
}

int64_t DatasetManifest::get_int(const std::string& key) const {
    const auto it = entries.find(key);
    if (it == entries.end()) throw ParseError("manifest missing key '" + key + "'");
    return std::strtoll(it->second.c_str(), nullptr, 10);
}

namespace {

void save_split(const std::string& dir, const std::string& split,
                const std::vector<GtSample>& samples) {
    std::ofstream img(dir + "/" + split + "_images.f64", std::ios::binary);
    std::ofstream meta(dir + "/" + split + "_meta.txt");
    std::ofstream masks(dir + "/" + split + "_masks.u8", std::ios::binary);
    if (!img || !meta || !masks) throw IoError("cannot write dataset files under " + dir);
    for (const GtSample& g : samples) {
        img.write(reinterpret_cast<const char*>(g.image.data()),
                  static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(g.image.size())));
        meta << g.label << ' ' << g.gt_box.x_min << ' ' << g.gt_box.y_min << ' ' << g.gt_box.x_max
             << ' ' << g.gt_box.y_max << ' ' << g.patch_box.x_min << ' ' << g.patch_box.y_min
             << ' ' << g.patch_box.x_max << ' ' << g.patch_box.y_max << '\n';
        masks.write(reinterpret_cast<const char*>(g.mask.data()),
                    static_cast<std::streamsize>(g.mask.size()));
    }
}

std::vector<GtSample> load_split(const std::string& dir, const std::string& split, int64_t count,
                                 int64_t image_size) {
    const int64_t s = image_size;
    std::ifstream img(dir + "/" + split + "_images.f64", std::ios::binary);
    std::ifstream meta(dir + "/" + split + "_meta.txt");
    std::ifstream masks(dir + "/" + split + "_masks.u8", std::ios::binary);
    if (!img || !meta || !masks) throw IoError("cannot read dataset files under " + dir);

    std::vector<GtSample> out(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        GtSample& g = out[static_cast<size_t>(i)];
        g.image = Tensor({3, s, s});
        img.read(reinterpret_cast<char*>(g.image.data()),
                 static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(g.image.size())));
        int label = 0;
        Box gb{}, pb{};
        meta >> label >> gb.x_min >> gb.y_min >> gb.x_max >> gb.y_max >> pb.x_min >> pb.y_min >>
            pb.x_max >> pb.y_max;
        g.label = static_cast<int32_t>(label);
        g.gt_box = gb;
        g.patch_box = pb;
        g.mask.resize(static_cast<size_t>(s * s));
        masks.read(reinterpret_cast<char*>(g.mask.data()),
                   static_cast<std::streamsize>(g.mask.size()));
        if (!img || !meta || !masks) {
            throw IoError("truncated dataset files under " + dir + " at sample " + std::to_string(i));
        }
    }
    return out;
}

}  // namespace

void save_dataset(const std::string& dir, const SynthDataset& ds) {
    std::filesystem::create_directories(dir);
    std::ofstream mf(dir + "/manifest.txt");
    if (!mf) throw IoError("cannot write " + dir + "/manifest.txt");
    mf << ds.manifest.to_text();
    save_split(dir, "train", ds.train);
    save_split(dir, "test", ds.test);
}

SynthDataset load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.txt");
    if (!mf) throw IoError("no dataset manifest under " + dir);
    std::stringstream buf;
    buf << mf.rdbuf();
    SynthDataset ds;
    ds.manifest = DatasetManifest::from_text(buf.str());
    const int64_t image_size = ds.manifest.get_int("image_size");
    ds.train = load_split(dir, "train", ds.manifest.get_int("train_total"), image_size);
    ds.test = load_split(dir, "test", ds.manifest.get_int("test_total"), image_size);
    return ds;
}

}  // namespace rfga

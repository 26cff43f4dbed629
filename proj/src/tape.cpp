#include "rfga/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <utility>

namespace rfga {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

// strides for reading `in` while iterating over broadcasted `out`; 0 where a
// size-1 dim of `in` is stretched
std::vector<int64_t> stretch_strides(const Shape& out, const Shape& in) {
    std::vector<int64_t> s = row_major_strides(in);
    for (size_t d = 0; d < in.size(); ++d) {
        if (in[d] == 1 && out[d] != 1) s[d] = 0;
    }
    return s;
}

// visits every element of the broadcast shape with flat offsets into a and b
template <class F>
void for_each_pair(const Shape& out, const Shape& a, const Shape& b, F&& f) {
    const int64_t total = numel(out);
    const size_t r = out.size();
    const std::vector<int64_t> sa = stretch_strides(out, a);
    const std::vector<int64_t> sb = stretch_strides(out, b);
    std::vector<int64_t> idx(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t io = 0; io < total; ++io) {
        f(io, oa, ob);
        for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
            const size_t ud = static_cast<size_t>(d);
            ++idx[ud];
            oa += sa[ud];
            ob += sb[ud];
            if (idx[ud] < out[ud]) break;
            oa -= sa[ud] * out[ud];
            ob -= sb[ud] * out[ud];
            idx[ud] = 0;
        }
    }
}

struct PoolDims {
    int64_t n, c, h, w;
    bool batched;
};

PoolDims pool_dims(const Shape& s, bool batched) {
    if (batched) return {s[0], s[1], s[2], s[3], true};
    return {1, s[0], s[1], s[2], false};
}

Shape pooled_shape(const PoolDims& d, View view) {
    Shape out;
    if (d.batched) out.push_back(d.n);
    switch (view) {
        case View::channel: out.insert(out.end(), {d.c, 1, 1}); break;
        case View::height: out.insert(out.end(), {d.c, d.h, 1}); break;
        case View::width: out.insert(out.end(), {d.c, 1, d.w}); break;
    }
    return out;
}

}  // namespace

BatchNorm BatchNorm::make(Shape lane_shape) {
    BatchNorm bn;
    bn.gamma = Tensor::ones(lane_shape);
    bn.beta = Tensor(lane_shape);
    bn.running_mean = Tensor(lane_shape);
    bn.running_var = Tensor::ones(std::move(lane_shape));
    return bn;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    if (a.size() != b.size()) {
        throw ShapeError("broadcast rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    Shape out(a.size());
    for (size_t d = 0; d < a.size(); ++d) {
        if (a[d] == b[d] || b[d] == 1) {
            out[d] = a[d];
        } else if (a[d] == 1) {
            out[d] = b[d];
        } else {
            throw ShapeError("incompatible broadcast " + shape_str(a) + " vs " + shape_str(b));
        }
    }
    return out;
}

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(backprop)});
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Tape::Node& Tape::node(Var v) {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) {
        throw ContractError("invalid tape handle");
    }
    return nodes_[static_cast<size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) {
        throw ContractError("invalid tape handle");
    }
    return nodes_[static_cast<size_t>(v.id)];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) throw ContractError("gradient not populated; run backward first");
    return n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor& Tape::grad_mut(Var v) { return node(v).grad; }

void Tape::backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_str(ln.value.shape()));
    }
    for (Node& n : nodes_) {
        if (n.requires_grad) n.grad = Tensor(n.value.shape());
    }
    if (!ln.requires_grad) return;  // constant graph, nothing reachable to fill
    ln.grad.fill(1.0);
    for (int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.requires_grad && n.backprop) n.backprop(*this);
    }
}

// ---------------------------------------------------------------------------
// elementwise / broadcast
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    const Shape out_shape = broadcast_shape(va.shape(), vb.shape());
    Tensor out(out_shape);
    if (same_shape(va.shape(), vb.shape())) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    } else {
        for_each_pair(out_shape, va.shape(), vb.shape(),
                      [&](int64_t io, int64_t ia, int64_t ib) { out[io] = va[ia] + vb[ib]; });
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    if (!rg) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [a, b, result](Tape& t) {
        const Tensor& g = t.grad(result);
        const Shape& os = t.value(result).shape();
        const bool need_a = t.requires_grad(a);
        const bool need_b = t.requires_grad(b);
        Tensor* ga = need_a ? &t.grad_mut(a) : nullptr;
        Tensor* gb = need_b ? &t.grad_mut(b) : nullptr;
        if (same_shape(t.value(a).shape(), t.value(b).shape())) {
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < g.size(); ++i) {
                if (ga) (*ga)[i] += g[i];
                if (gb) (*gb)[i] += g[i];
            }
        } else {
            for_each_pair(os, t.value(a).shape(), t.value(b).shape(),
                          [&](int64_t io, int64_t ia, int64_t ib) {
                              if (ga) (*ga)[ia] += g[io];
                              if (gb) (*gb)[ib] += g[io];
                          });
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::mul(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    const Shape out_shape = broadcast_shape(va.shape(), vb.shape());
    Tensor out(out_shape);
    if (same_shape(va.shape(), vb.shape())) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    } else {
        for_each_pair(out_shape, va.shape(), vb.shape(),
                      [&](int64_t io, int64_t ia, int64_t ib) { out[io] = va[ia] * vb[ib]; });
    }
    const bool rg = requires_grad(a) || requires_grad(b);
    if (!rg) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [a, b, result](Tape& t) {
        const Tensor& g = t.grad(result);
        const Tensor& va = t.value(a);
        const Tensor& vb = t.value(b);
        const bool need_a = t.requires_grad(a);
        const bool need_b = t.requires_grad(b);
        Tensor* ga = need_a ? &t.grad_mut(a) : nullptr;
        Tensor* gb = need_b ? &t.grad_mut(b) : nullptr;
        if (same_shape(va.shape(), vb.shape())) {
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < g.size(); ++i) {
                if (ga) (*ga)[i] += g[i] * vb[i];
                if (gb) (*gb)[i] += g[i] * va[i];
            }
        } else {
            for_each_pair(t.value(result).shape(), va.shape(), vb.shape(),
                          [&](int64_t io, int64_t ia, int64_t ib) {
                              if (ga) (*ga)[ia] += g[io] * vb[ib];
                              if (gb) (*gb)[ib] += g[io] * va[ia];
                          });
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::sigmoid(Var x) {
    const Tensor& vx = value(x);
    Tensor out(vx.shape());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < vx.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-vx[i]));
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, result](Tape& t) {
        const Tensor& g = t.grad(result);
        const Tensor& s = t.value(result);
        Tensor& gx = t.grad_mut(x);
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::relu(Var x) {
    const Tensor& vx = value(x);
    Tensor out(vx.shape());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < vx.size(); ++i) out[i] = vx[i] > 0.0 ? vx[i] : 0.0;
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, result](Tape& t) {
        const Tensor& g = t.grad(result);
        const Tensor& vx = t.value(x);
        Tensor& gx = t.grad_mut(x);
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < g.size(); ++i) {
            if (vx[i] > 0.0) gx[i] += g[i];
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::scale(Var x, double c) {
    const Tensor& vx = value(x);
    Tensor out(vx.shape());
    for (int64_t i = 0; i < vx.size(); ++i) out[i] = c * vx[i];
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, c, result](Tape& t) {
        const Tensor& g = t.grad(result);
        Tensor& gx = t.grad_mut(x);
        for (int64_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    };
    return push(std::move(out), true, std::move(backprop));
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

namespace {

void pool_forward(const PoolDims& d, View view, const double* in, double* out) {
    const int64_t hw = d.h * d.w;
    for (int64_t n = 0; n < d.n; ++n) {
        const double* xs = in + n * d.c * hw;
        switch (view) {
            case View::channel: {
                double* os = out + n * d.c;
                for (int64_t c = 0; c < d.c; ++c) {
                    double acc = 0.0;
                    const double* p = xs + c * hw;
                    for (int64_t i = 0; i < hw; ++i) acc += p[i];
                    os[c] = acc / static_cast<double>(hw);
                }
                break;
            }
            case View::height: {
                double* os = out + n * d.c * d.h;
                for (int64_t c = 0; c < d.c; ++c) {
                    for (int64_t h = 0; h < d.h; ++h) {
                        double acc = 0.0;
                        const double* p = xs + (c * d.h + h) * d.w;
                        for (int64_t w = 0; w < d.w; ++w) acc += p[w];
                        os[c * d.h + h] = acc / static_cast<double>(d.w);
                    }
                }
                break;
            }
            case View::width: {
                double* os = out + n * d.c * d.w;
                for (int64_t c = 0; c < d.c; ++c) {
                    for (int64_t w = 0; w < d.w; ++w) {
                        double acc = 0.0;
                        for (int64_t h = 0; h < d.h; ++h) acc += xs[(c * d.h + h) * d.w + w];
                        os[c * d.w + w] = acc / static_cast<double>(d.h);
                    }
                }
                break;
            }
        }
    }
}

void pool_backward(const PoolDims& d, View view, const double* g, double* gx) {
    const int64_t hw = d.h * d.w;
    for (int64_t n = 0; n < d.n; ++n) {
        double* gs = gx + n * d.c * hw;
        switch (view) {
            case View::channel: {
                const double* go = g + n * d.c;
                for (int64_t c = 0; c < d.c; ++c) {
                    const double v = go[c] / static_cast<double>(hw);
                    double* p = gs + c * hw;
                    for (int64_t i = 0; i < hw; ++i) p[i] += v;
                }
                break;
            }
            case View::height: {
                const double* go = g + n * d.c * d.h;
                for (int64_t c = 0; c < d.c; ++c) {
                    for (int64_t h = 0; h < d.h; ++h) {
                        const double v = go[c * d.h + h] / static_cast<double>(d.w);
                        double* p = gs + (c * d.h + h) * d.w;
                        for (int64_t w = 0; w < d.w; ++w) p[w] += v;
                    }
                }
                break;
            }
            case View::width: {
                const double* go = g + n * d.c * d.w;
                for (int64_t c = 0; c < d.c; ++c) {
                    for (int64_t w = 0; w < d.w; ++w) {
                        const double v = go[c * d.w + w] / static_cast<double>(d.h);
                        for (int64_t h = 0; h < d.h; ++h) gs[(c * d.h + h) * d.w + w] += v;
                    }
                }
                break;
            }
        }
    }
}

}  // namespace

Var Tape::avg_pool(Var x, View view) {
    const Tensor& vx = value(x);
    if (vx.rank() != 3) {
        throw ShapeError("avg_pool expects rank-3 [C,H,W], got " + shape_str(vx.shape()));
    }
    const PoolDims d = pool_dims(vx.shape(), false);
    Tensor out(pooled_shape(d, view));
    pool_forward(d, view, vx.data(), out.data());
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, view, d, result](Tape& t) {
        pool_backward(d, view, t.grad(result).data(), t.grad_mut(x).data());
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::avg_pool_batched(Var x, View view) {
    const Tensor& vx = value(x);
    if (vx.rank() != 4) {
        throw ShapeError("avg_pool_batched expects rank-4 [N,C,H,W], got " + shape_str(vx.shape()));
    }
    const PoolDims d = pool_dims(vx.shape(), true);
    Tensor out(pooled_shape(d, view));
    pool_forward(d, view, vx.data(), out.data());
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, view, d, result](Tape& t) {
        pool_backward(d, view, t.grad(result).data(), t.grad_mut(x).data());
    };
    return push(std::move(out), true, std::move(backprop));
}

// ---------------------------------------------------------------------------
// 1-D shared-kernel convolution (cross-correlation, zero pad, no bias)
// ---------------------------------------------------------------------------

Var Tape::conv1d_shared(Var signal, Var kernel, int64_t axis) {
    const Tensor& vx = value(signal);
    const Tensor& vk = value(kernel);
    if (vk.rank() != 1) throw ShapeError("conv1d kernel must be rank 1");
    const int64_t k = vk.size();
    if (k % 2 == 0) throw ConfigError("conv1d kernel length must be odd, got " + std::to_string(k));
    if (axis < 0 || axis >= vx.rank()) {
        throw ShapeError("conv1d axis " + std::to_string(axis) + " out of range for " +
                         shape_str(vx.shape()));
    }
    const int64_t pad = (k - 1) / 2;
    const Shape& s = vx.shape();
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
    for (int64_t d = axis + 1; d < vx.rank(); ++d) inner *= s[static_cast<size_t>(d)];
    const int64_t len = s[static_cast<size_t>(axis)];

    Tensor out(vx.shape());
    for (int64_t o = 0; o < outer; ++o) {
        const double* xs = vx.data() + o * len * inner;
        double* os = out.data() + o * len * inner;
        for (int64_t i = 0; i < len; ++i) {
            for (int64_t j = 0; j < k; ++j) {
                const int64_t src = i + j - pad;
                if (src < 0 || src >= len) continue;
                const double coeff = vk[j];
                const double* xp = xs + src * inner;
                double* op = os + i * inner;
                for (int64_t t = 0; t < inner; ++t) op[t] += coeff * xp[t];
            }
        }
    }
    const bool rg = requires_grad(signal) || requires_grad(kernel);
    if (!rg) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [signal, kernel, k, pad, outer, inner, len, result](Tape& t) {
        const Tensor& g = t.grad(result);
        const Tensor& vx = t.value(signal);
        const Tensor& vk = t.value(kernel);
        const bool need_x = t.requires_grad(signal);
        const bool need_k = t.requires_grad(kernel);
        Tensor* gx = need_x ? &t.grad_mut(signal) : nullptr;
        Tensor* gk = need_k ? &t.grad_mut(kernel) : nullptr;
        for (int64_t o = 0; o < outer; ++o) {
            const int64_t base = o * len * inner;
            for (int64_t i = 0; i < len; ++i) {
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t src = i + j - pad;
                    if (src < 0 || src >= len) continue;
                    const double* gp = g.data() + base + i * inner;
                    if (gx) {
                        const double coeff = vk[j];
                        double* xp = gx->data() + base + src * inner;
                        for (int64_t s2 = 0; s2 < inner; ++s2) xp[s2] += coeff * gp[s2];
                    }
                    if (gk) {
                        const double* xp = vx.data() + base + src * inner;
                        double acc = 0.0;
                        for (int64_t s2 = 0; s2 < inner; ++s2) acc += gp[s2] * xp[s2];
                        (*gk)[j] += acc;
                    }
                }
            }
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

// ---------------------------------------------------------------------------
// 2-D convolution (stride 1, zero pad), im2col + GEMM per sample
// ---------------------------------------------------------------------------

namespace {

void im2col(const double* x, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t pad, double* col) {
    const int64_t hw = h * w;
    for (int64_t c = 0; c < ci; ++c) {
        for (int64_t r = 0; r < kh; ++r) {
            for (int64_t s = 0; s < kw; ++s) {
                double* row = col + ((c * kh + r) * kw + s) * hw;
                for (int64_t y = 0; y < h; ++y) {
                    const int64_t sy = y + r - pad;
                    if (sy < 0 || sy >= h) {
                        std::fill(row + y * w, row + (y + 1) * w, 0.0);
                        continue;
                    }
                    const double* src = x + (c * h + sy) * w;
                    for (int64_t xx = 0; xx < w; ++xx) {
                        const int64_t sx = xx + s - pad;
                        row[y * w + xx] = (sx < 0 || sx >= w) ? 0.0 : src[sx];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t pad, double* gx) {
    const int64_t hw = h * w;
    for (int64_t c = 0; c < ci; ++c) {
        for (int64_t r = 0; r < kh; ++r) {
            for (int64_t s = 0; s < kw; ++s) {
                const double* row = col + ((c * kh + r) * kw + s) * hw;
                for (int64_t y = 0; y < h; ++y) {
                    const int64_t sy = y + r - pad;
                    if (sy < 0 || sy >= h) continue;
                    double* dst = gx + (c * h + sy) * w;
                    for (int64_t xx = 0; xx < w; ++xx) {
                        const int64_t sx = xx + s - pad;
                        if (sx < 0 || sx >= w) continue;
                        dst[sx] += row[y * w + xx];
                    }
                }
            }
        }
    }
}

}  // namespace

namespace {
// per-thread im2col scratch; column blocks stay cache-resident instead of
// materializing batch-sized buffers
double* col_scratch(size_t need) {
    static thread_local std::vector<double> buf;
    if (buf.size() < need) buf.resize(need);
    return buf.data();
}
}  // namespace

Var Tape::conv2d(Var x, Var w, int64_t pad) {
    const Tensor& vx = value(x);
    const Tensor& vw = value(w);
    if (vx.rank() != 4) throw ShapeError("conv2d input must be [N,Ci,H,W], got " + shape_str(vx.shape()));
    if (vw.rank() != 4) throw ShapeError("conv2d weight must be [Co,Ci,kh,kw], got " + shape_str(vw.shape()));
    const int64_t n = vx.dim(0), ci = vx.dim(1), h = vx.dim(2), ww = vx.dim(3);
    const int64_t co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (vw.dim(1) != ci) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(vx.shape()) + " weight " +
                         shape_str(vw.shape()));
    }
    const int64_t oh = h + 2 * pad - kh + 1;
    const int64_t ow = ww + 2 * pad - kw + 1;
    if (oh != h || ow != ww) {
        throw ShapeError("conv2d requires same-size output: pad must be (k-1)/2");
    }
    const int64_t hw = oh * ow;
    const int64_t cik = ci * kh * kw;
    const bool rg = requires_grad(x) || requires_grad(w);
    const bool one_by_one = (kh == 1 && kw == 1 && pad == 0);

    Tensor out({n, co, oh, ow});
    MapConstMat wm(vw.data(), co, cik);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        MapMat om(out.data() + i * co * hw, co, hw);
        if (one_by_one) {
            MapConstMat xm(vx.data() + i * ci * hw, ci, hw);
            om.noalias() = wm * xm;
        } else {
            double* col = col_scratch(static_cast<size_t>(cik * hw));
            im2col(vx.data() + i * ci * h * ww, ci, h, ww, kh, kw, pad, col);
            MapConstMat cm(col, cik, hw);
            om.noalias() = wm * cm;
        }
    }
    if (!rg) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, w, pad, n, ci, h, ww, co, kh, kw, hw, cik, one_by_one, result](Tape& t) {
        const Tensor& g = t.grad(result);
        const Tensor& vx = t.value(x);
        const Tensor& vw = t.value(w);
        const bool need_x = t.requires_grad(x);
        const bool need_w = t.requires_grad(w);
        MapConstMat wm(vw.data(), co, cik);

        std::vector<double> dws;
        if (need_w) dws.assign(static_cast<size_t>(n) * co * cik, 0.0);
        Tensor* gx = need_x ? &t.grad_mut(x) : nullptr;

#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
            MapConstMat gm(g.data() + i * co * hw, co, hw);
            if (need_w) {
                MapMat dwm(dws.data() + i * co * cik, co, cik);
                if (one_by_one) {
                    MapConstMat xm(vx.data() + i * ci * hw, ci, hw);
                    dwm.noalias() = gm * xm.transpose();
                } else {
                    // the forward columns are cheap to rebuild and stay in cache
                    double* col = col_scratch(static_cast<size_t>(2 * cik * hw));
                    im2col(vx.data() + i * ci * h * ww, ci, h, ww, kh, kw, pad, col);
                    MapConstMat cm(col, cik, hw);
                    dwm.noalias() = gm * cm.transpose();
                }
            }
            if (gx) {
                if (one_by_one) {
                    MapMat gxm(gx->data() + i * ci * hw, ci, hw);
                    gxm.noalias() += wm.transpose() * gm;
                } else {
                    double* dcol = col_scratch(static_cast<size_t>(2 * cik * hw)) + cik * hw;
                    MapMat dcm(dcol, cik, hw);
                    dcm.noalias() = wm.transpose() * gm;
                    col2im_add(dcol, ci, h, ww, kh, kw, pad, gx->data() + i * ci * h * ww);
                }
            }
        }
        if (need_w) {
            Tensor& gw = t.grad_mut(w);
            // sequential reduction keeps results independent of thread count
            for (int64_t i = 0; i < n; ++i) {
                const double* src = dws.data() + i * co * cik;
                for (int64_t j = 0; j < co * cik; ++j) gw[j] += src[j];
            }
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::avg_pool2x2(Var x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 4) throw ShapeError("avg_pool2x2 expects [N,C,H,W], got " + shape_str(vx.shape()));
    const int64_t n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("avg_pool2x2 needs even spatial dims, got " + shape_str(vx.shape()));
    }
    const int64_t oh = h / 2, ow = w / 2;
    Tensor out({n, c, oh, ow});
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const double* xs = vx.data() + nc * h * w;
        double* os = out.data() + nc * oh * ow;
        for (int64_t y = 0; y < oh; ++y) {
            for (int64_t xx = 0; xx < ow; ++xx) {
                const double* p = xs + 2 * y * w + 2 * xx;
                os[y * ow + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
            }
        }
    }
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, n, c, h, w, oh, ow, result](Tape& t) {
        const Tensor& g = t.grad(result);
        Tensor& gx = t.grad_mut(x);
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < n * c; ++nc) {
            const double* gs = g.data() + nc * oh * ow;
            double* xs = gx.data() + nc * h * w;
            for (int64_t y = 0; y < oh; ++y) {
                for (int64_t xx = 0; xx < ow; ++xx) {
                    const double v = 0.25 * gs[y * ow + xx];
                    double* p = xs + 2 * y * w + 2 * xx;
                    p[0] += v;
                    p[1] += v;
                    p[w] += v;
                    p[w + 1] += v;
                }
            }
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

Var Tape::batch_norm(Var x, Var gamma, Var beta, BatchNorm& state, Mode mode, BnLanes lanes) {
    const Tensor& vx = value(x);
    if (vx.rank() < 2) throw ShapeError("batch_norm input must have a batch dim, got " + shape_str(vx.shape()));
    if (lanes == BnLanes::per_channel && vx.rank() != 4) {
        throw ShapeError("per-channel batch_norm expects [N,C,H,W], got " + shape_str(vx.shape()));
    }
    const int64_t batch = vx.dim(0);
    const int64_t lane_count = (lanes == BnLanes::per_lane) ? vx.size() / batch : vx.dim(1);
    const int64_t inner = (lanes == BnLanes::per_lane) ? 1 : vx.dim(2) * vx.dim(3);
    const int64_t m = batch * inner;  // elements per lane
    if (state.gamma.size() != lane_count) {
        throw ShapeError("batch_norm state lanes " + std::to_string(state.gamma.size()) +
                         " do not match input lanes " + std::to_string(lane_count));
    }
    const Tensor& vg = value(gamma);
    const Tensor& vb = value(beta);
    if (vg.size() != lane_count || vb.size() != lane_count) {
        throw ShapeError("batch_norm affine size mismatch");
    }

    std::vector<double> mean(static_cast<size_t>(lane_count), 0.0);
    std::vector<double> invstd(static_cast<size_t>(lane_count), 0.0);

    // x is laid out as [batch][lane][inner]; all loops walk contiguous runs
    if (mode == Mode::train) {
        if (batch < 2) {
            throw BatchError("batch_norm train mode requires batch size >= 2, got " +
                             std::to_string(batch));
        }
        std::vector<double> var(static_cast<size_t>(lane_count), 0.0);
#pragma omp parallel for schedule(static)
        for (int64_t l = 0; l < lane_count; ++l) {
            double acc = 0.0;
            for (int64_t n = 0; n < batch; ++n) {
                const double* p = vx.data() + (n * lane_count + l) * inner;
                for (int64_t s = 0; s < inner; ++s) acc += p[s];
            }
            mean[static_cast<size_t>(l)] = acc / static_cast<double>(m);
        }
#pragma omp parallel for schedule(static)
        for (int64_t l = 0; l < lane_count; ++l) {
            const double mu = mean[static_cast<size_t>(l)];
            double acc = 0.0;
            for (int64_t n = 0; n < batch; ++n) {
                const double* p = vx.data() + (n * lane_count + l) * inner;
                for (int64_t s = 0; s < inner; ++s) acc += (p[s] - mu) * (p[s] - mu);
            }
            var[static_cast<size_t>(l)] = acc / static_cast<double>(m);
        }
        for (int64_t l = 0; l < lane_count; ++l) {
            invstd[static_cast<size_t>(l)] = 1.0 / std::sqrt(var[static_cast<size_t>(l)] + state.eps);
        }
        // running stats: momentum update, unbiased variance
        const double mom = state.momentum;
        const double unbias = static_cast<double>(m) / static_cast<double>(m - 1);
        for (int64_t l = 0; l < lane_count; ++l) {
            state.running_mean[l] = (1.0 - mom) * state.running_mean[l] + mom * mean[static_cast<size_t>(l)];
            state.running_var[l] = (1.0 - mom) * state.running_var[l] + mom * var[static_cast<size_t>(l)] * unbias;
        }
        state.updates += 1;
    } else {
        if (state.updates == 0 && !state.warned_fresh_eval) {
            std::fprintf(stderr,
                         "[rfga] batch_norm eval before any running-stat update; "
                         "using initialized stats (mean 0, var 1)\n");
            state.warned_fresh_eval = true;
        }
        for (int64_t l = 0; l < lane_count; ++l) {
            mean[static_cast<size_t>(l)] = state.running_mean[l];
            invstd[static_cast<size_t>(l)] = 1.0 / std::sqrt(state.running_var[l] + state.eps);
        }
    }

    Tensor out(vx.shape());
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < batch; ++n) {
        for (int64_t l = 0; l < lane_count; ++l) {
            const int64_t base = (n * lane_count + l) * inner;
            const double mu = mean[static_cast<size_t>(l)];
            const double is = invstd[static_cast<size_t>(l)];
            const double g = vg[l], b = vb[l];
            for (int64_t s = 0; s < inner; ++s) {
                out[base + s] = g * (vx[base + s] - mu) * is + b;
            }
        }
    }
    const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    if (!rg) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    const bool train = (mode == Mode::train);
    // xhat is rebuilt from (x, mean, invstd) in backward instead of being saved
    auto backprop = [x, gamma, beta, mean = std::move(mean), invstd = std::move(invstd), inner,
                     lane_count, m, train, result](Tape& t) {
        const Tensor& g = t.grad(result);
        const Tensor& vx = t.value(x);
        const Tensor& vg = t.value(gamma);
        const bool need_x = t.requires_grad(x);
        const bool need_g = t.requires_grad(gamma);
        const bool need_b = t.requires_grad(beta);

        const int64_t batch = m / inner;
        std::vector<double> sum_g(static_cast<size_t>(lane_count), 0.0);
        std::vector<double> sum_gx(static_cast<size_t>(lane_count), 0.0);
#pragma omp parallel for schedule(static)
        for (int64_t l = 0; l < lane_count; ++l) {
            const double mu = mean[static_cast<size_t>(l)];
            const double is = invstd[static_cast<size_t>(l)];
            double ag = 0.0, agx = 0.0;
            for (int64_t n = 0; n < batch; ++n) {
                const int64_t base = (n * lane_count + l) * inner;
                for (int64_t s = 0; s < inner; ++s) {
                    ag += g[base + s];
                    agx += g[base + s] * (vx[base + s] - mu) * is;
                }
            }
            sum_g[static_cast<size_t>(l)] = ag;
            sum_gx[static_cast<size_t>(l)] = agx;
        }
        if (need_g) {
            Tensor& gg = t.grad_mut(gamma);
            for (int64_t l = 0; l < lane_count; ++l) gg[l] += sum_gx[static_cast<size_t>(l)];
        }
        if (need_b) {
            Tensor& gb = t.grad_mut(beta);
            for (int64_t l = 0; l < lane_count; ++l) gb[l] += sum_g[static_cast<size_t>(l)];
        }
        if (need_x) {
            Tensor& gx = t.grad_mut(x);
            const double inv_m = 1.0 / static_cast<double>(m);
#pragma omp parallel for schedule(static)
            for (int64_t n = 0; n < batch; ++n) {
                for (int64_t l = 0; l < lane_count; ++l) {
                    const int64_t base = (n * lane_count + l) * inner;
                    const double mu = mean[static_cast<size_t>(l)];
                    const double is = invstd[static_cast<size_t>(l)];
                    const double scale = vg[l] * is;
                    if (train) {
                        const double cg = sum_g[static_cast<size_t>(l)] * inv_m;
                        const double cgx = sum_gx[static_cast<size_t>(l)] * inv_m;
                        for (int64_t s = 0; s < inner; ++s) {
                            const double xh = (vx[base + s] - mu) * is;
                            gx[base + s] += scale * (g[base + s] - cg - xh * cgx);
                        }
                    } else {
                        for (int64_t s = 0; s < inner; ++s) gx[base + s] += scale * g[base + s];
                    }
                }
            }
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

// ---------------------------------------------------------------------------
// reductions and loss
// ---------------------------------------------------------------------------

Var Tape::spatial_mean(Var x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 4) throw ShapeError("spatial_mean expects [N,C,H,W], got " + shape_str(vx.shape()));
    const int64_t n = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
    Tensor out({n, c});
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const double* p = vx.data() + nc * hw;
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += p[i];
        out[nc] = acc / static_cast<double>(hw);
    }
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, n, c, hw, result](Tape& t) {
        const Tensor& g = t.grad(result);
        Tensor& gx = t.grad_mut(x);
        for (int64_t nc = 0; nc < n * c; ++nc) {
            const double v = g[nc] / static_cast<double>(hw);
            double* p = gx.data() + nc * hw;
            for (int64_t i = 0; i < hw; ++i) p[i] += v;
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::mean_all(Var x) {
    const Tensor& vx = value(x);
    Tensor out = Tensor::scalar(vx.mean());
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, result](Tape& t) {
        const double v = t.grad(result)[0] / static_cast<double>(t.value(x).size());
        Tensor& gx = t.grad_mut(x);
        for (int64_t i = 0; i < gx.size(); ++i) gx[i] += v;
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::sum_all(Var x) {
    const Tensor& vx = value(x);
    Tensor out = Tensor::scalar(vx.sum());
    if (!requires_grad(x)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [x, result](Tape& t) {
        const double v = t.grad(result)[0];
        Tensor& gx = t.grad_mut(x);
        for (int64_t i = 0; i < gx.size(); ++i) gx[i] += v;
    };
    return push(std::move(out), true, std::move(backprop));
}

Var Tape::softmax_cross_entropy(Var logits, const std::vector<int32_t>& labels) {
    const Tensor& vl = value(logits);
    if (vl.rank() != 2) throw ShapeError("softmax_cross_entropy expects [N,K] logits");
    const int64_t n = vl.dim(0), k = vl.dim(1);
    if (static_cast<int64_t>(labels.size()) != n) {
        throw ContractError("label count does not match batch size");
    }
    for (int32_t y : labels) {
        if (y < 0 || y >= k) throw ContractError("label out of range");
    }

    Tensor probs({n, k});
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double* row = vl.data() + i * k;
        double mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        for (int64_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
        loss += lse - row[labels[static_cast<size_t>(i)]];
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(n));
    if (!requires_grad(logits)) return push(std::move(out), false, nullptr);

    Var result{static_cast<int32_t>(nodes_.size())};
    auto backprop = [logits, labels, probs = std::move(probs), n, k, result](Tape& t) {
        const double gs = t.grad(result)[0] / static_cast<double>(n);
        Tensor& gl = t.grad_mut(logits);
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < k; ++j) {
                const double onehot = (j == labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                gl[i * k + j] += gs * (probs[i * k + j] - onehot);
            }
        }
    };
    return push(std::move(out), true, std::move(backprop));
}

}  // namespace rfga

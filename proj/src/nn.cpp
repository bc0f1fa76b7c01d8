#include "qaf/nn.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "qaf/error.hpp"

namespace qaf {

using nlohmann::json;

std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::ReLU: return "relu";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Unpool: return "unpool";
        case LayerKind::Dropout: return "dropout";
    }
    return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
    for (LayerKind k : {LayerKind::Conv, LayerKind::ReLU, LayerKind::AvgPool, LayerKind::MaxPool, LayerKind::Unpool,
                        LayerKind::Dropout})
        if (to_string(k) == s) return k;
    throw FormatError("unknown layer kind '" + s + "'");
}

int NetworkGraph::conv_count() const {
    return static_cast<int>(std::count_if(layers.begin(), layers.end(),
                                          [](const LayerSpec& l) { return l.kind == LayerKind::Conv; }));
}

std::vector<Shape> infer_shapes(const NetworkGraph& net, int h, int w, bool surrogate) {
    const int n = static_cast<int>(net.layers.size());
    if (n > kMaxLayers) throw GraphError(kMaxLayers, "network has " + std::to_string(n) + " layers, at most 9 allowed");
    if (net.params.size() != net.layers.size()) throw GraphError(0, "parameter list not congruent with layers");
    if (net.in_channels < 1) throw GraphError(0, "in_channels must be >= 1");
    if (surrogate && n == 0) throw GraphError(0, "empty network");

    std::vector<Shape> shapes;
    Shape cur{net.in_channels, h, w};
    for (int l = 0; l < n; ++l) {
        const LayerSpec& s = net.layers[static_cast<std::size_t>(l)];
        const ConvParams& p = net.params[static_cast<std::size_t>(l)];
        switch (s.kind) {
            case LayerKind::Conv:
                if (s.kernel < 1 || s.kernel % 2 == 0) throw GraphError(l, "kernel must be odd and >= 1");
                if (s.channels_out < 1) throw GraphError(l, "channels_out must be >= 1");
                if (p.cin != cur.c) throw GraphError(l, "conv expects " + std::to_string(p.cin) + " input channels, got " + std::to_string(cur.c));
                if (p.cout != s.channels_out || p.k != s.kernel ||
                    p.w.size() != static_cast<std::size_t>(p.cout) * p.cin * p.k * p.k ||
                    p.b.size() != static_cast<std::size_t>(p.cout))
                    throw GraphError(l, "conv parameters do not match the layer spec");
                cur.c = s.channels_out;
                break;
            case LayerKind::ReLU:
                if (!p.w.empty() || !p.b.empty()) throw GraphError(l, "non-conv layer carries weights");
                break;
            case LayerKind::Dropout:
                if (!(s.drop_p >= 0.0 && s.drop_p < 1.0)) throw GraphError(l, "drop_p must be in [0, 1)");
                if (!p.w.empty() || !p.b.empty()) throw GraphError(l, "non-conv layer carries weights");
                break;
            case LayerKind::AvgPool:
            case LayerKind::MaxPool:
                if (s.pool < 2) throw GraphError(l, "pool factor must be >= 2");
                if (cur.h % s.pool || cur.w % s.pool)
                    throw GraphError(l, "resolution " + std::to_string(cur.h) + "x" + std::to_string(cur.w) +
                                            " not divisible by pool factor " + std::to_string(s.pool));
                cur.h /= s.pool;
                cur.w /= s.pool;
                break;
            case LayerKind::Unpool:
                if (s.pool < 2) throw GraphError(l, "unpool factor must be >= 2");
                cur.h *= s.pool;
                cur.w *= s.pool;
                break;
        }
        if (s.residual_from) {
            const int r = *s.residual_from;
            if (r < 0 || r >= l) throw GraphError(l, "residual_from must name an earlier layer");
            if (!(shapes[static_cast<std::size_t>(r)] == cur)) throw GraphError(l, "residual source shape mismatch");
        }
        shapes.push_back(cur);
    }
    if (surrogate && !(cur == Shape{1, h, w}))
        throw GraphError(n - 1, "output must be a single channel at input resolution");
    return shapes;
}

void validate(const NetworkGraph& net, int h, int w) { infer_shapes(net, h, w, true); }

void push_layer(NetworkGraph& net, const LayerSpec& spec, int cin) {
    ConvParams p;
    if (spec.kind == LayerKind::Conv) {
        p.cin = cin;
        p.cout = spec.channels_out;
        p.k = spec.kernel;
        p.w.assign(static_cast<std::size_t>(p.cout) * p.cin * p.k * p.k, 0.0);
        p.b.assign(static_cast<std::size_t>(p.cout), 0.0);
    }
    net.layers.push_back(spec);
    net.params.push_back(std::move(p));
}

void init_weights(NetworkGraph& net, Rng& rng) {
    for (ConvParams& p : net.params) {
        if (p.w.empty()) continue;
        const double sd = std::sqrt(2.0 / (p.cin * p.k * p.k));
        for (double& x : p.w) x = sd * rng.normal();
        std::fill(p.b.begin(), p.b.end(), 0.0);
    }
}

namespace {

Tensor conv_forward(const ConvParams& p, const Tensor& in) {
    Tensor out(p.cout, in.h, in.w);
    const int pad = p.k / 2;
    for (int o = 0; o < p.cout; ++o) {
        double* dst = &out.data[static_cast<std::size_t>(o) * in.h * in.w];
        std::fill(dst, dst + static_cast<std::size_t>(in.h) * in.w, p.b[static_cast<std::size_t>(o)]);
        for (int i = 0; i < p.cin; ++i)
            for (int dy = 0; dy < p.k; ++dy)
                for (int dx = 0; dx < p.k; ++dx) {
                    const double wv = p.at(o, i, dy, dx);
                    if (wv == 0.0) continue;
                    const int oy = dy - pad, ox = dx - pad;
                    const int y0 = std::max(0, -oy), y1 = std::min(in.h, in.h - oy);
                    const int x0 = std::max(0, -ox), x1 = std::min(in.w, in.w - ox);
                    for (int y = y0; y < y1; ++y) {
                        const double* src = &in.data[(static_cast<std::size_t>(i) * in.h + y + oy) * in.w];
                        double* row = dst + static_cast<std::size_t>(y) * in.w;
                        for (int x = x0; x < x1; ++x) row[x] += wv * src[x + ox];
                    }
                }
    }
    return out;
}

void conv_backward(const ConvParams& p, const Tensor& in, const Tensor& g, ConvParams& gp, Tensor& gin) {
    const int pad = p.k / 2;
    for (int o = 0; o < p.cout; ++o) {
        const double* go = &g.data[static_cast<std::size_t>(o) * g.h * g.w];
        double sb = 0.0;
        for (std::size_t q = 0; q < static_cast<std::size_t>(g.h) * g.w; ++q) sb += go[q];
        gp.b[static_cast<std::size_t>(o)] += sb;
        for (int i = 0; i < p.cin; ++i)
            for (int dy = 0; dy < p.k; ++dy)
                for (int dx = 0; dx < p.k; ++dx) {
                    const int oy = dy - pad, ox = dx - pad;
                    const int y0 = std::max(0, -oy), y1 = std::min(in.h, in.h - oy);
                    const int x0 = std::max(0, -ox), x1 = std::min(in.w, in.w - ox);
                    const double wv = p.at(o, i, dy, dx);
                    double sw = 0.0;
                    for (int y = y0; y < y1; ++y) {
                        const std::size_t srow = (static_cast<std::size_t>(i) * in.h + y + oy) * in.w;
                        const double* src = &in.data[srow];
                        double* gsrc = &gin.data[srow];
                        const double* grow = go + static_cast<std::size_t>(y) * in.w;
                        for (int x = x0; x < x1; ++x) {
                            sw += grow[x] * src[x + ox];
                            gsrc[x + ox] += wv * grow[x];
                        }
                    }
                    gp.at(o, i, dy, dx) += sw;
                }
    }
}

Tensor pool_forward(const Tensor& in, int f, bool max) {
    Tensor out(in.c, in.h / f, in.w / f);
    for (int c = 0; c < in.c; ++c)
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x) {
                double acc = max ? -std::numeric_limits<double>::infinity() : 0.0;
                for (int a = 0; a < f; ++a)
                    for (int b = 0; b < f; ++b) {
                        const double v = in.at(c, y * f + a, x * f + b);
                        acc = max ? std::max(acc, v) : acc + v;
                    }
                out.at(c, y, x) = max ? acc : acc / (f * f);
            }
    return out;
}

void pool_backward(const Tensor& in, const Tensor& g, int f, bool max, Tensor& gin) {
    for (int c = 0; c < g.c; ++c)
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x) {
                const double gv = g.at(c, y, x);
                if (max) {
                    int ba = 0, bb = 0;
                    double best = -std::numeric_limits<double>::infinity();
                    for (int a = 0; a < f; ++a)
                        for (int b = 0; b < f; ++b)
                            if (in.at(c, y * f + a, x * f + b) > best) {
                                best = in.at(c, y * f + a, x * f + b);
                                ba = a;
                                bb = b;
                            }
                    gin.at(c, y * f + ba, x * f + bb) += gv;
                } else {
                    for (int a = 0; a < f; ++a)
                        for (int b = 0; b < f; ++b) gin.at(c, y * f + a, x * f + b) += gv / (f * f);
                }
            }
}

Tensor unpool_forward(const Tensor& in, int f) {
    Tensor out(in.c, in.h * f, in.w * f);
    for (int c = 0; c < out.c; ++c)
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x) out.at(c, y, x) = in.at(c, y / f, x / f);
    return out;
}

Tensor run(const NetworkGraph& net, const Tensor& input, Rng* rng, ForwardCache* cache) {
    infer_shapes(net, input.h, input.w, false);
    if (input.c != net.in_channels) throw GraphError(0, "input has " + std::to_string(input.c) + " channels");
    std::vector<Tensor> outs;
    outs.reserve(net.layers.size());
    if (cache) {
        cache->input = input;
        cache->masks.assign(net.layers.size(), {});
    }
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const LayerSpec& s = net.layers[l];
        const Tensor& x = l == 0 ? input : outs[l - 1];
        Tensor y;
        switch (s.kind) {
            case LayerKind::Conv: y = conv_forward(net.params[l], x); break;
            case LayerKind::ReLU:
                y = x;
                for (double& v : y.data) v = v > 0.0 ? v : 0.0;
                break;
            case LayerKind::AvgPool: y = pool_forward(x, s.pool, false); break;
            case LayerKind::MaxPool: y = pool_forward(x, s.pool, true); break;
            case LayerKind::Unpool: y = unpool_forward(x, s.pool); break;
            case LayerKind::Dropout:
                y = x;
                if (rng && s.drop_p > 0.0) {
                    std::vector<std::uint8_t> mask(static_cast<std::size_t>(x.c));
                    for (auto& m : mask) m = rng->uniform() >= s.drop_p ? 1 : 0;
                    const double keep = 1.0 / (1.0 - s.drop_p);
                    for (int c = 0; c < y.c; ++c)
                        for (std::size_t q = 0; q < static_cast<std::size_t>(y.h) * y.w; ++q)
                            y.data[static_cast<std::size_t>(c) * y.h * y.w + q] *= mask[static_cast<std::size_t>(c)] ? keep : 0.0;
                    if (cache) cache->masks[l] = std::move(mask);
                }
                break;
        }
        if (s.residual_from) {
            const Tensor& r = outs[static_cast<std::size_t>(*s.residual_from)];
            for (std::size_t q = 0; q < y.data.size(); ++q) y.data[q] += r.data[q];
        }
        outs.push_back(std::move(y));
    }
    Tensor result = outs.empty() ? input : outs.back();
    if (cache) cache->outs = std::move(outs);
    return result;
}

}  // namespace

Tensor forward(const NetworkGraph& net, const Tensor& input, ForwardCache* cache) {
    return run(net, input, nullptr, cache);
}

Tensor forward_train(const NetworkGraph& net, const Tensor& input, Rng& rng, ForwardCache& cache) {
    return run(net, input, &rng, &cache);
}

void Gradients::zero_like(const NetworkGraph& net) {
    params.clear();
    for (const ConvParams& p : net.params) {
        ConvParams z = p;
        std::fill(z.w.begin(), z.w.end(), 0.0);
        std::fill(z.b.begin(), z.b.end(), 0.0);
        params.push_back(std::move(z));
    }
    input = Tensor();
}

Gradients& Gradients::operator+=(const Gradients& o) {
    if (params.empty()) {
        *this = o;
        return *this;
    }
    for (std::size_t l = 0; l < params.size(); ++l) {
        for (std::size_t q = 0; q < params[l].w.size(); ++q) params[l].w[q] += o.params[l].w[q];
        for (std::size_t q = 0; q < params[l].b.size(); ++q) params[l].b[q] += o.params[l].b[q];
    }
    return *this;
}

Gradients& Gradients::operator*=(double s) {
    for (ConvParams& p : params) {
        for (double& x : p.w) x *= s;
        for (double& x : p.b) x *= s;
    }
    for (double& x : input.data) x *= s;
    return *this;
}

double Gradients::sq_norm() const {
    double s = 0.0;
    for (const ConvParams& p : params) {
        for (double x : p.w) s += x * x;
        for (double x : p.b) s += x * x;
    }
    return s;
}

Gradients backward(const NetworkGraph& net, const ForwardCache& cache, const Tensor& upstream) {
    Gradients grad;
    grad.zero_like(net);
    const std::size_t n = net.layers.size();
    if (n == 0) {
        grad.input = upstream;
        return grad;
    }
    if (cache.outs.size() != n || !upstream.same_shape(cache.outs.back()))
        throw GraphError(static_cast<int>(n) - 1, "backward: cache or upstream shape mismatch");

    std::vector<Tensor> g(n);
    g[n - 1] = upstream;
    for (std::size_t l = n; l-- > 0;) {
        const LayerSpec& s = net.layers[l];
        const Tensor& x = l == 0 ? cache.input : cache.outs[l - 1];
        Tensor& gl = g[l];
        if (gl.data.empty()) gl = Tensor(cache.outs[l].c, cache.outs[l].h, cache.outs[l].w);
        if (s.residual_from) {
            Tensor& gr = g[static_cast<std::size_t>(*s.residual_from)];
            if (gr.data.empty()) gr = Tensor(gl.c, gl.h, gl.w);
            for (std::size_t q = 0; q < gl.data.size(); ++q) gr.data[q] += gl.data[q];
        }
        Tensor gin(x.c, x.h, x.w);
        switch (s.kind) {
            case LayerKind::Conv: conv_backward(net.params[l], x, gl, grad.params[l], gin); break;
            case LayerKind::ReLU:
                for (std::size_t q = 0; q < gin.data.size(); ++q) gin.data[q] = x.data[q] > 0.0 ? gl.data[q] : 0.0;
                break;
            case LayerKind::AvgPool: pool_backward(x, gl, s.pool, false, gin); break;
            case LayerKind::MaxPool: pool_backward(x, gl, s.pool, true, gin); break;
            case LayerKind::Unpool:
                for (int c = 0; c < gl.c; ++c)
                    for (int y = 0; y < gl.h; ++y)
                        for (int xx = 0; xx < gl.w; ++xx) gin.at(c, y / s.pool, xx / s.pool) += gl.at(c, y, xx);
                break;
            case LayerKind::Dropout: {
                const auto& mask = cache.masks.size() > l ? cache.masks[l] : std::vector<std::uint8_t>{};
                if (mask.empty()) {
                    gin = gl;
                } else {
                    const double keep = 1.0 / (1.0 - s.drop_p);
                    const std::size_t plane = static_cast<std::size_t>(gl.h) * gl.w;
                    for (std::size_t q = 0; q < gl.data.size(); ++q) gin.data[q] = mask[q / plane] ? gl.data[q] * keep : 0.0;
                }
                break;
            }
        }
        if (l == 0) {
            grad.input = std::move(gin);
        } else {
            Tensor& gp = g[l - 1];
            if (gp.data.empty())
                gp = std::move(gin);
            else
                for (std::size_t q = 0; q < gp.data.size(); ++q) gp.data[q] += gin.data[q];
        }
    }
    return grad;
}

double divergence_scale(const ScalarField& div, const GeometryField& geo) {
    const GridDims& d = geo.dims();
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (geo.is_fluid(i, j)) {
                sum += div(i, j);
                sq += div(i, j) * div(i, j);
                ++n;
            }
    if (n == 0) return 0.0;
    const double mean = sum / static_cast<double>(n);
    return std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
}

Tensor make_input(const ScalarField& div, const GeometryField& geo, double* scale_out) {
    require_same_dims(div.dims(), geo.dims(), "make_input");
    const GridDims& d = geo.dims();
    const double s = divergence_scale(div, geo);
    Tensor t(kNetInChannels, d.ny, d.nx);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) {
            t.at(0, j, i) = (s > 0.0 && geo.is_fluid(i, j)) ? div(i, j) / s : 0.0;
            t.at(1, j, i) = geo.is_solid(i, j) ? 1.0 : 0.0;
        }
    if (scale_out) *scale_out = s;
    return t;
}

ScalarField output_to_pressure(const Tensor& out, double s, const GeometryField& geo, const ProjectionParams& pp) {
    const GridDims& d = geo.dims();
    if (out.c != 1 || out.h != d.ny || out.w != d.nx) throw GraphError(0, "output shape does not match the grid");
    const double scale = s * (pp.rho / pp.dt) * d.h * d.h;
    ScalarField p(d, 0.0);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (geo.is_fluid(i, j)) p(i, j) = out.at(0, j, i) * scale;
    return p;
}

ScalarField predict_pressure(const NetworkGraph& net, const ScalarField& div, const GeometryField& geo,
                             const ProjectionParams& pp) {
    double s = 0.0;
    const Tensor in = make_input(div, geo, &s);
    const Tensor out = forward(net, in);
    ScalarField p = output_to_pressure(out, s, geo, pp);
    if (!p.all_finite()) throw NumericError("network produced a non-finite pressure");
    return p;
}

ScalarField apply_neg_laplacian(const ScalarField& x, const GeometryField& geo) {
    const GridDims& d = geo.dims();
    const double inv_h2 = 1.0 / (d.h * d.h);
    ScalarField y(d, 0.0);
    for (int j = 1; j < d.ny - 1; ++j)
        for (int i = 1; i < d.nx - 1; ++i) {
            if (!geo.is_fluid(i, j)) continue;
            double acc = 0.0;
            const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
            for (auto& q : nb)
                if (geo.is_fluid(q[0], q[1])) acc += x(i, j) - x(q[0], q[1]);
            y(i, j) = acc * inv_h2;
        }
    return y;
}

LossGrad loss_and_gradient(const NetworkGraph& net, const MacVelocityField& vel, const GeometryField& geo,
                           double dt, double rho, double kappa, Rng* train_rng) {
    MacVelocityField bounded = vel;
    enforce_solid_faces(bounded, geo);
    const ScalarField div = divergence(bounded, geo);
    LossGrad out;
    out.baseline = div_norm(div, geo, kappa);

    double s = 0.0;
    const Tensor in = make_input(div, geo, &s);
    ForwardCache cache;
    const Tensor y = train_rng ? forward_train(net, in, *train_rng, cache) : forward(net, in, &cache);
    const ProjectionParams pp{dt, rho};
    const ScalarField p = output_to_pressure(y, s, geo, pp);
    const ScalarField div_new = divergence(subtract_pressure_gradient(bounded, p, geo, dt, rho), geo);
    out.loss = div_norm(div_new, geo, kappa);

    // dL/dp = (dt/rho) A (2 w div_new); dp/dout = s (rho/dt) h^2.
    const GridDims& d = geo.dims();
    ScalarField q(d, 0.0);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (geo.is_fluid(i, j)) q(i, j) = 2.0 * std::max(1.0, kappa - geo.distance()(i, j)) * div_new(i, j);
    const ScalarField aq = apply_neg_laplacian(q, geo);
    Tensor up(1, d.ny, d.nx);
    const double chain = s * d.h * d.h;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) up.at(0, j, i) = aq(i, j) * chain;
    out.grad = backward(net, cache, up);
    return out;
}

double loss_divnorm(const NetworkGraph& net, const MacVelocityField& vel, const GeometryField& geo, double dt,
                    double rho, double kappa) {
    MacVelocityField bounded = vel;
    enforce_solid_faces(bounded, geo);
    const ScalarField div = divergence(bounded, geo);
    const ScalarField p = predict_pressure(net, div, geo, ProjectionParams{dt, rho});
    return div_norm(subtract_pressure_gradient(bounded, p, geo, dt, rho), geo, kappa);
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("train: learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must be in [0, 1)");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("train: clip_norm must be >= 0");
    if (!(kappa >= 1.0) || !(dt > 0.0) || !(rho > 0.0)) throw std::invalid_argument("train: bad kappa/dt/rho");
}

namespace {

std::vector<double> baselines(const std::vector<TrainSample>& data, double kappa) {
    std::vector<double> out;
    out.reserve(data.size());
    for (const TrainSample& s : data) {
        MacVelocityField b = s.vel;
        enforce_solid_faces(b, s.geo);
        out.push_back(div_norm(b, s.geo, kappa));
    }
    return out;
}

}  // namespace

TrainResult train(const NetworkGraph& net, const std::vector<TrainSample>& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    validate(net, data.front().geo.dims().ny, data.front().geo.dims().nx);

    TrainResult res;
    res.net = net;
    const std::vector<double> base = baselines(data, cfg.kappa);
    std::vector<std::size_t> usable;
    for (std::size_t k = 0; k < data.size(); ++k)
        if (base[k] > 0.0) usable.push_back(k);

    Gradients velocity;
    velocity.zero_like(net);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::uint64_t epoch_seed = Rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> order = usable;
        Rng shuffler(epoch_seed);
        shuffler.shuffle(order);

        double sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Gradients acc;
            acc.zero_like(res.net);
            for (std::size_t q = start; q < stop; ++q) {
                const std::size_t k = order[q];
                Rng drop(Rng::derive(epoch_seed, k + 1));
                LossGrad lg = loss_and_gradient(res.net, data[k].vel, data[k].geo, cfg.dt, cfg.rho, cfg.kappa, &drop);
                const double rel = lg.loss / lg.baseline;
                if (!std::isfinite(rel))
                    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                                        std::to_string(k));
                sum += rel;
                lg.grad *= 1.0 / lg.baseline;
                acc += lg.grad;
            }
            acc *= 1.0 / static_cast<double>(stop - start);
            if (cfg.clip_norm > 0.0) {
                const double norm = std::sqrt(acc.sq_norm());
                if (norm > cfg.clip_norm) acc *= cfg.clip_norm / norm;
            }
            for (std::size_t l = 0; l < res.net.params.size(); ++l) {
                ConvParams& p = res.net.params[l];
                ConvParams& v = velocity.params[l];
                const ConvParams& g = acc.params[l];
                for (std::size_t t = 0; t < p.w.size(); ++t) {
                    v.w[t] = cfg.momentum * v.w[t] - cfg.learning_rate * g.w[t];
                    p.w[t] += v.w[t];
                }
                for (std::size_t t = 0; t < p.b.size(); ++t) {
                    v.b[t] = cfg.momentum * v.b[t] - cfg.learning_rate * g.b[t];
                    p.b[t] += v.b[t];
                }
            }
        }
        res.loss_curve.push_back(order.empty() ? 0.0 : sum / static_cast<double>(order.size()));
    }
    return res;
}

double mean_relative_loss(const NetworkGraph& net, const std::vector<TrainSample>& data, const TrainConfig& cfg) {
    const std::vector<double> base = baselines(data, cfg.kappa);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < data.size(); ++k) {
        if (!(base[k] > 0.0)) continue;
        sum += loss_divnorm(net, data[k].vel, data[k].geo, cfg.dt, cfg.rho, cfg.kappa) / base[k];
        ++n;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

std::int64_t count_flops(const NetworkGraph& net, const GridDims& dims) {
    const std::vector<Shape> shapes = infer_shapes(net, dims.ny, dims.nx, false);
    std::int64_t total = 0;
    Shape in{net.in_channels, dims.ny, dims.nx};
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const LayerSpec& s = net.layers[l];
        const Shape& o = shapes[l];
        const std::int64_t out_elems = static_cast<std::int64_t>(o.c) * o.h * o.w;
        const std::int64_t in_elems = static_cast<std::int64_t>(in.c) * in.h * in.w;
        switch (s.kind) {
            case LayerKind::Conv:
                total += 2LL * s.kernel * s.kernel * in.c * o.c * static_cast<std::int64_t>(o.h) * o.w;
                break;
            case LayerKind::ReLU: total += out_elems; break;
            case LayerKind::AvgPool:
            case LayerKind::MaxPool: total += in_elems; break;
            case LayerKind::Unpool: total += out_elems; break;
            case LayerKind::Dropout: break;
        }
        if (s.residual_from) total += out_elems;
        in = o;
    }
    return total;
}

std::int64_t total_neurons(const NetworkGraph& net, int h, int w) {
    std::int64_t n = 0;
    for (const Shape& s : infer_shapes(net, h, w, false)) n += static_cast<std::int64_t>(s.c) * s.h * s.w;
    return n;
}

namespace {

json to_json(const NetworkGraph& net) {
    json layers = json::array();
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const LayerSpec& s = net.layers[l];
        json j{{"kind", to_string(s.kind)}};
        switch (s.kind) {
            case LayerKind::Conv:
                j["kernel"] = s.kernel;
                j["channels_out"] = s.channels_out;
                j["channels_in"] = net.params[l].cin;
                j["weights"] = net.params[l].w;
                j["bias"] = net.params[l].b;
                break;
            case LayerKind::AvgPool:
            case LayerKind::MaxPool:
            case LayerKind::Unpool: j["pool"] = s.pool; break;
            case LayerKind::Dropout: j["drop_p"] = s.drop_p; break;
            case LayerKind::ReLU: break;
        }
        j["residual_from"] = s.residual_from ? json(*s.residual_from) : json(nullptr);
        layers.push_back(std::move(j));
    }
    return json{{"format", "qaf-net"}, {"version", kModelFormatVersion}, {"in_channels", net.in_channels},
                {"layers", std::move(layers)}};
}

NetworkGraph from_json(const json& j) {
    NetworkGraph net;
    try {
        if (!j.is_object() || j.value("format", "") != "qaf-net") throw FormatError("not a qaf-net model file");
        const int version = j.at("version").get<int>();
        if (version != kModelFormatVersion)
            throw FormatError("model version " + std::to_string(version) + " unsupported (expected " +
                              std::to_string(kModelFormatVersion) + ")");
        net.in_channels = j.at("in_channels").get<int>();
        const json& layers = j.at("layers");
        if (!layers.is_array()) throw FormatError("layers must be an array");
        if (layers.size() > static_cast<std::size_t>(kMaxLayers))
            throw GraphError(kMaxLayers, "model file has " + std::to_string(layers.size()) + " layers, at most 9 allowed");
        for (const json& lj : layers) {
            LayerSpec s;
            s.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
            ConvParams p;
            switch (s.kind) {
                case LayerKind::Conv:
                    s.kernel = lj.at("kernel").get<int>();
                    s.channels_out = lj.at("channels_out").get<int>();
                    p.cin = lj.at("channels_in").get<int>();
                    p.cout = s.channels_out;
                    p.k = s.kernel;
                    p.w = lj.at("weights").get<std::vector<double>>();
                    p.b = lj.at("bias").get<std::vector<double>>();
                    break;
                case LayerKind::AvgPool:
                case LayerKind::MaxPool:
                case LayerKind::Unpool: s.pool = lj.at("pool").get<int>(); break;
                case LayerKind::Dropout: s.drop_p = lj.at("drop_p").get<double>(); break;
                case LayerKind::ReLU: break;
            }
            if (lj.contains("residual_from") && !lj.at("residual_from").is_null())
                s.residual_from = lj.at("residual_from").get<int>();
            net.layers.push_back(s);
            net.params.push_back(std::move(p));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed model file: ") + e.what());
    }
    validate(net);
    return net;
}

}  // namespace

void save_network(std::ostream& os, const NetworkGraph& net) {
    validate(net);
    os << to_json(net).dump(1) << '\n';
}

NetworkGraph load_network(std::istream& is) {
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed model file: ") + e.what());
    }
    return from_json(j);
}

std::string network_to_string(const NetworkGraph& net) {
    std::ostringstream os;
    save_network(os, net);
    return os.str();
}

NetworkGraph network_from_string(const std::string& text) {
    std::istringstream is(text);
    return load_network(is);
}

NetPressureSolver::NetPressureSolver(NetworkGraph net, std::string id) : net_(std::move(net)), id_(std::move(id)) {
    validate(net_);
}

PressureSolveResult NetPressureSolver::solve(const ScalarField& divergence, const GeometryField& geo,
                                             const ProjectionParams& params) {
    const auto t0 = std::chrono::steady_clock::now();
    PressureSolveResult out;
    out.pressure = predict_pressure(net_, divergence, geo, params);
    // Input normalisation and output scaling: ~6 FLOPs per cell.
    out.cost.flops = count_flops(net_, geo.dims()) + static_cast<std::int64_t>(6 * geo.dims().cells());
    out.cost.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace qaf

#include "qaf/forge.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "qaf/csv.hpp"
#include "qaf/error.hpp"
#include "qaf/parallel.hpp"
#include "qaf/poisson.hpp"

namespace qaf {

std::string to_string(CandidateSource s) {
    switch (s) {
        case CandidateSource::Seed: return "seed";
        case CandidateSource::Accurate: return "accurate";
        case CandidateSource::Shallow: return "shallow";
        case CandidateSource::Narrow: return "narrow";
        case CandidateSource::Pool: return "pool";
        case CandidateSource::Dropout: return "dropout";
        case CandidateSource::Iterative: return "iterative";
    }
    return "?";
}

CandidateSource candidate_source_from_string(const std::string& s) {
    for (auto c : {CandidateSource::Seed, CandidateSource::Accurate, CandidateSource::Shallow, CandidateSource::Narrow,
                   CandidateSource::Pool, CandidateSource::Dropout, CandidateSource::Iterative})
        if (to_string(c) == s) return c;
    throw FormatError("unknown candidate source '" + s + "'");
}

std::unique_ptr<PressureSolver> make_solver(const SolverCandidate& c) {
    if (c.net.has_value() == c.iters.has_value())
        throw std::invalid_argument("candidate " + c.id + ": exactly one of net / iters must be set");
    if (c.iters) {
        return std::make_unique<PcgPressureSolver>(PcgPressureSolver::truncated(*c.iters));
    }
    return std::make_unique<NetPressureSolver>(*c.net, c.id);
}

NetworkGraph make_seed_network(Rng& rng, int width) {
    if (width < 2) throw std::invalid_argument("seed width must be >= 2");
    NetworkGraph net;
    int c = net.in_channels;
    auto conv = [&](int cout) {
        LayerSpec s;
        s.kind = LayerKind::Conv;
        s.kernel = 3;
        s.channels_out = cout;
        push_layer(net, s, c);
        c = cout;
    };
    auto relu = [&] {
        LayerSpec s;
        s.kind = LayerKind::ReLU;
        push_layer(net, s, c);
    };
    conv(width);
    relu();
    conv(width);
    relu();
    conv(width / 2);
    relu();
    conv(1);
    init_weights(net, rng);
    validate(net);
    return net;
}

namespace {

int n_layers(const NetworkGraph& n) { return static_cast<int>(n.layers.size()); }

void require_conv(const NetworkGraph& net, int layer, const char* op) {
    if (layer < 0 || layer >= n_layers(net))
        throw TransformError(std::string(op) + ": layer " + std::to_string(layer) + " out of range");
    if (net.layers[static_cast<std::size_t>(layer)].kind != LayerKind::Conv)
        throw TransformError(std::string(op) + ": layer " + std::to_string(layer) + " is not a Conv");
}

/// First Conv after `layer`, or -1.
int consumer_of(const NetworkGraph& net, int layer) {
    for (int l = layer + 1; l < n_layers(net); ++l)
        if (net.layers[static_cast<std::size_t>(l)].kind == LayerKind::Conv) return l;
    return -1;
}

void finish(NetworkGraph& net, const char* op, int ref) {
    try {
        validate(net, ref, ref);
    } catch (const GraphError& e) {
        throw TransformError(std::string(op) + ": result is not a valid network (" + e.what() + ")");
    }
}

/// Channels of Conv `layer` touched by a residual between it and its consumer.
bool residual_touches(const NetworkGraph& net, int layer, int consumer) {
    for (int l = 0; l < n_layers(net); ++l) {
        const auto& r = net.layers[static_cast<std::size_t>(l)].residual_from;
        if (!r) continue;
        const bool src_in = *r >= layer && *r < consumer;
        const bool dst_in = l >= layer && l < consumer;
        if (src_in || dst_in) return true;
    }
    return false;
}

/// Drops output channels `gone` (sorted) of Conv `layer` and the matching
/// input channels of `consumer`.
void remove_channels(NetworkGraph& net, int layer, int consumer, const std::vector<int>& gone, double rescale) {
    ConvParams& p = net.params[static_cast<std::size_t>(layer)];
    ConvParams& q = net.params[static_cast<std::size_t>(consumer)];
    std::vector<int> keep;
    for (int c = 0; c < p.cout; ++c)
        if (!std::binary_search(gone.begin(), gone.end(), c)) keep.push_back(c);

    ConvParams np;
    np.cin = p.cin;
    np.cout = static_cast<int>(keep.size());
    np.k = p.k;
    for (int c : keep) {
        for (int i = 0; i < p.cin; ++i)
            for (int a = 0; a < p.k; ++a)
                for (int b = 0; b < p.k; ++b) np.w.push_back(p.at(c, i, a, b));
        np.b.push_back(p.b[static_cast<std::size_t>(c)]);
    }
    ConvParams nq;
    nq.cin = np.cout;
    nq.cout = q.cout;
    nq.k = q.k;
    for (int o = 0; o < q.cout; ++o)
        for (int c : keep)
            for (int a = 0; a < q.k; ++a)
                for (int b = 0; b < q.k; ++b) nq.w.push_back(q.at(o, c, a, b) * rescale);
    nq.b = q.b;

    p = std::move(np);
    q = std::move(nq);
    net.layers[static_cast<std::size_t>(layer)].channels_out = p.cout;
}

void insert_layer(NetworkGraph& net, int at, const LayerSpec& spec) {
    // Shift residual references at or beyond the insertion point.
    for (auto& l : net.layers)
        if (l.residual_from && *l.residual_from >= at) ++*l.residual_from;
    net.layers.insert(net.layers.begin() + at, spec);
    net.params.insert(net.params.begin() + at, ConvParams{});
}

}  // namespace

std::vector<int> inner_convs(const NetworkGraph& net) {
    std::vector<int> out;
    for (int l = 0; l < n_layers(net); ++l)
        if (net.layers[static_cast<std::size_t>(l)].kind == LayerKind::Conv && consumer_of(net, l) >= 0)
            out.push_back(l);
    return out;
}

std::int64_t layer_neurons(const NetworkGraph& net, int layer, int ref) {
    const auto shapes = infer_shapes(net, ref, ref, false);
    const Shape& s = shapes.at(static_cast<std::size_t>(layer));
    return static_cast<std::int64_t>(s.c) * s.h * s.w;
}

NetworkGraph op_shallow(const NetworkGraph& net, int layer) {
    const int n = n_layers(net);
    if (layer <= 0 || layer >= n - 1)
        throw TransformError("shallow: layer " + std::to_string(layer) + " is the input or output layer");
    const LayerKind kind = net.layers[static_cast<std::size_t>(layer)].kind;
    if (kind == LayerKind::AvgPool || kind == LayerKind::MaxPool || kind == LayerKind::Unpool)
        throw TransformError("shallow: layer " + std::to_string(layer) + " belongs to a pool/unpool pair");

    NetworkGraph out = net;
    if (kind == LayerKind::Conv) {
        const int c = consumer_of(net, layer);
        const ConvParams& d = net.params[static_cast<std::size_t>(layer)];
        const ConvParams& q = net.params[static_cast<std::size_t>(c)];
        // 1x1 projection of the deleted kernel.
        std::vector<double> proj(static_cast<std::size_t>(d.cout) * d.cin, 0.0);
        for (int o = 0; o < d.cout; ++o)
            for (int i = 0; i < d.cin; ++i)
                for (int a = 0; a < d.k; ++a)
                    for (int b = 0; b < d.k; ++b) proj[static_cast<std::size_t>(o) * d.cin + i] += d.at(o, i, a, b);
        ConvParams nq;
        nq.cin = d.cin;
        nq.cout = q.cout;
        nq.k = q.k;
        nq.w.assign(static_cast<std::size_t>(nq.cout) * nq.cin * nq.k * nq.k, 0.0);
        nq.b = q.b;
        for (int o = 0; o < q.cout; ++o)
            for (int m = 0; m < q.cin; ++m) {
                double ksum = 0.0;
                for (int a = 0; a < q.k; ++a)
                    for (int b = 0; b < q.k; ++b) {
                        const double wv = q.at(o, m, a, b);
                        ksum += wv;
                        for (int i = 0; i < d.cin; ++i) nq.at(o, i, a, b) += wv * proj[static_cast<std::size_t>(m) * d.cin + i];
                    }
                nq.b[static_cast<std::size_t>(o)] += ksum * d.b[static_cast<std::size_t>(m)];
            }
        out.params[static_cast<std::size_t>(c)] = std::move(nq);
    }
    out.layers.erase(out.layers.begin() + layer);
    out.params.erase(out.params.begin() + layer);
    for (auto& l : out.layers)
        if (l.residual_from) {
            if (*l.residual_from == layer) *l.residual_from = layer - 1;
            else if (*l.residual_from > layer) --*l.residual_from;
        }
    for (int l = 0; l < n_layers(out); ++l) {
        auto& r = out.layers[static_cast<std::size_t>(l)].residual_from;
        if (r && *r >= l) r.reset();
    }
    finish(out, "shallow", 32);
    return out;
}

NetworkGraph op_narrow(const NetworkGraph& net, int layer, int r, Rng& rng) {
    require_conv(net, layer, "narrow");
    if (r < 1) throw TransformError("narrow: r must be >= 1");
    const int c = consumer_of(net, layer);
    if (c < 0) throw TransformError("narrow: layer " + std::to_string(layer) + " is the output layer");
    const int cout = net.layers[static_cast<std::size_t>(layer)].channels_out;
    if (r >= cout)
        throw TransformError("narrow: r=" + std::to_string(r) + " >= channels_out=" + std::to_string(cout));
    if (residual_touches(net, layer, c)) throw TransformError("narrow: layer feeds a residual connection");
    std::vector<int> gone;
    for (std::size_t k : rng.sample_without_replacement(static_cast<std::size_t>(cout), static_cast<std::size_t>(r)))
        gone.push_back(static_cast<int>(k));
    std::sort(gone.begin(), gone.end());
    NetworkGraph out = net;
    remove_channels(out, layer, c, gone, 1.0);
    finish(out, "narrow", 32);
    return out;
}

NetworkGraph op_pooling(const NetworkGraph& net, int layer, int factor, const ForgePolicy& policy) {
    require_conv(net, layer, "pooling");
    if (factor < 2) throw TransformError("pooling: factor must be >= 2");
    if (n_layers(net) + 2 > kMaxLayers) throw TransformError("pooling: result would exceed 9 layers");
    const int ref = policy.reference_size;
    const auto shapes = infer_shapes(net, ref, ref, false);
    const Shape in = layer == 0 ? Shape{net.in_channels, ref, ref} : shapes[static_cast<std::size_t>(layer - 1)];
    if (in.h % factor || in.w % factor) throw TransformError("pooling: resolution not divisible by factor");
    const double discarded = static_cast<double>(in.c) * in.h * in.w * (1.0 - 1.0 / (factor * factor));
    const double budget = policy.neuron_budget * static_cast<double>(total_neurons(net, ref, ref));
    if (discarded > budget) {
        std::ostringstream msg;
        msg << "pooling: layer " << layer << " discards " << discarded << " neurons, budget is " << budget << " ("
            << policy.neuron_budget * 100 << "% of " << total_neurons(net, ref, ref) << ")";
        throw TransformError(msg.str());
    }

    NetworkGraph out = net;
    for (auto& l : out.layers)
        if (l.residual_from && *l.residual_from >= layer) *l.residual_from += 2;  // == layer lands on the Unpool
    LayerSpec pool;
    pool.kind = policy.pool_kind;
    pool.pool = factor;
    LayerSpec unpool;
    unpool.kind = LayerKind::Unpool;
    unpool.pool = factor;
    // A residual into the conv now joins at full resolution.
    std::swap(unpool.residual_from, out.layers[static_cast<std::size_t>(layer)].residual_from);
    out.layers.insert(out.layers.begin() + layer + 1, unpool);
    out.params.insert(out.params.begin() + layer + 1, ConvParams{});
    out.layers.insert(out.layers.begin() + layer, pool);
    out.params.insert(out.params.begin() + layer, ConvParams{});
    finish(out, "pooling", ref);
    return out;
}

NetworkGraph op_dropout(const NetworkGraph& net, int layer, double p, Rng& rng, const ForgePolicy& policy) {
    require_conv(net, layer, "dropout");
    if (!(p > 0.0 && p < 1.0)) throw TransformError("dropout: p must be in (0, 1)");
    const int c = consumer_of(net, layer);
    if (c < 0) throw TransformError("dropout: layer " + std::to_string(layer) + " is the output layer");
    if (n_layers(net) + 1 > kMaxLayers) throw TransformError("dropout: result would exceed 9 layers");
    if (residual_touches(net, layer, c)) throw TransformError("dropout: layer feeds a residual connection");
    const int ref = policy.reference_size;
    const double affected = p * static_cast<double>(layer_neurons(net, layer, ref));
    const double budget = policy.neuron_budget * static_cast<double>(total_neurons(net, ref, ref));
    if (affected > budget * (1.0 + 1e-12)) {
        std::ostringstream msg;
        msg << "dropout: p=" << p << " at layer " << layer << " affects " << affected << " neurons, budget is "
            << budget;
        throw TransformError(msg.str());
    }
    const int cout = net.layers[static_cast<std::size_t>(layer)].channels_out;
    const int dropped = std::max(1, static_cast<int>(std::floor(p * cout)));
    if (dropped >= cout) throw TransformError("dropout: would remove every channel of layer " + std::to_string(layer));

    std::vector<int> gone;
    for (std::size_t k :
         rng.sample_without_replacement(static_cast<std::size_t>(cout), static_cast<std::size_t>(dropped)))
        gone.push_back(static_cast<int>(k));
    std::sort(gone.begin(), gone.end());
    NetworkGraph out = net;
    remove_channels(out, layer, c, gone, static_cast<double>(cout) / (cout - dropped));
    LayerSpec rec;
    rec.kind = LayerKind::Dropout;
    rec.drop_p = p;
    insert_layer(out, layer + 1, rec);
    finish(out, "dropout", ref);
    return out;
}

SolverCandidate shallow_candidate(const SolverCandidate& c, int layer, const std::string& id,
                                  const ForgePolicy& policy) {
    if (!c.net) throw TransformError("shallow: candidate " + c.id + " has no network");
    if (c.deletions >= policy.max_deletions)
        throw TransformError("shallow: candidate " + c.id + " already has " + std::to_string(c.deletions) +
                             " deleted layer(s); policy allows " + std::to_string(policy.max_deletions));
    SolverCandidate out;
    out.id = id;
    out.source = CandidateSource::Shallow;
    out.net = op_shallow(*c.net, layer);
    out.deletions = c.deletions + 1;
    out.lineage = c.lineage + ">shallow(" + std::to_string(layer) + ")";
    return out;
}

namespace {

// Extra channels get small incoming weights and zero outgoing weights, so
// the widened net computes the same function as the original.
NetworkGraph widen(const NetworkGraph& net, double factor, Rng& rng) {
    NetworkGraph out;
    out.in_channels = net.in_channels;
    int prev_old = net.in_channels, prev_new = net.in_channels;
    const auto inner = inner_convs(net);
    for (int l = 0; l < n_layers(net); ++l) {
        LayerSpec s = net.layers[static_cast<std::size_t>(l)];
        if (s.kind != LayerKind::Conv) {
            push_layer(out, s, prev_new);
            continue;
        }
        const ConvParams& p = net.params[static_cast<std::size_t>(l)];
        const bool grow = std::find(inner.begin(), inner.end(), l) != inner.end();
        const int cout = grow ? static_cast<int>(std::lround(p.cout * factor)) : p.cout;
        s.channels_out = cout;
        push_layer(out, s, prev_new);
        ConvParams& q = out.params.back();
        const double sd = 0.1 * std::sqrt(2.0 / (prev_new * p.k * p.k));
        for (int o = 0; o < cout; ++o) {
            for (int i = 0; i < prev_new; ++i)
                for (int a = 0; a < p.k; ++a)
                    for (int b = 0; b < p.k; ++b) {
                        if (o < p.cout && i < prev_old)
                            q.at(o, i, a, b) = p.at(o, i, a, b);
                        else if (o >= p.cout)
                            q.at(o, i, a, b) = sd * rng.normal();
                        // o < p.cout, i >= prev_old: new input channel, weight 0
                    }
            q.b[static_cast<std::size_t>(o)] = o < p.cout ? p.b[static_cast<std::size_t>(o)] : 0.0;
        }
        prev_old = p.cout;
        prev_new = cout;
    }
    return out;
}

// Inserts Conv3(C->C) + ReLU after layer `after` (a ReLU). With `residual`
// the conv starts at zero and adds its input back; otherwise it starts as
// the identity. Both preserve the function on non-negative inputs.
NetworkGraph deepen(const NetworkGraph& net, int after, bool residual) {
    if (net.layers[static_cast<std::size_t>(after)].kind != LayerKind::ReLU)
        throw TransformError("deepen: insertion point must follow a ReLU");
    const auto shapes = infer_shapes(net, 32, 32, false);
    const int c = shapes[static_cast<std::size_t>(after)].c;
    NetworkGraph out = net;
    LayerSpec conv;
    conv.kind = LayerKind::Conv;
    conv.kernel = 3;
    conv.channels_out = c;
    if (residual) conv.residual_from = after;
    insert_layer(out, after + 1, conv);
    ConvParams& p = out.params[static_cast<std::size_t>(after + 1)];
    p.cin = p.cout = c;
    p.k = 3;
    p.w.assign(static_cast<std::size_t>(c) * c * 9, 0.0);
    p.b.assign(static_cast<std::size_t>(c), 0.0);
    if (!residual)
        for (int o = 0; o < c; ++o) p.at(o, o, 1, 1) = 1.0;
    LayerSpec relu;
    relu.kind = LayerKind::ReLU;
    insert_layer(out, after + 2, relu);
    finish(out, "deepen", 32);
    return out;
}

std::string nn_id(int k) {
    std::ostringstream os;
    os << "nn" << std::setw(3) << std::setfill('0') << k;
    return os.str();
}

}  // namespace

std::vector<SolverCandidate> generate_family(const NetworkGraph& seed, std::uint64_t rng_seed,
                                             const ForgePolicy& policy) {
    validate(seed);
    if (n_layers(seed) > kMaxLayers - 2)
        throw TransformError("family: seed must have at most 7 layers so pooled variants fit in 9");
    Rng rng(rng_seed);
    std::vector<SolverCandidate> fam;
    auto add = [&](CandidateSource src, NetworkGraph net, const std::string& lineage, int deletions) {
        SolverCandidate c;
        c.id = nn_id(static_cast<int>(fam.size()));
        c.source = src;
        c.net = std::move(net);
        c.lineage = lineage;
        c.deletions = deletions;
        fam.push_back(std::move(c));
    };
    auto step = [&](const std::string& what, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            throw TransformError("family step '" + what + "': " + e.what());
        }
    };

    // Accurate: wider or deeper, function-preserving at construction.
    std::vector<int> relus;
    for (int l = 0; l < n_layers(seed); ++l)
        if (seed.layers[static_cast<std::size_t>(l)].kind == LayerKind::ReLU) relus.push_back(l);
    step("accurate", [&] {
        const int mid = relus.empty() ? -1 : relus[relus.size() / 2];
        add(CandidateSource::Accurate, widen(seed, 1.5, rng), "seed>widen(1.5)", 0);
        add(CandidateSource::Accurate, widen(seed, 2.0, rng), "seed>widen(2)", 0);
        if (mid < 0 || n_layers(seed) + 2 > kMaxLayers) {
            add(CandidateSource::Accurate, widen(seed, 2.5, rng), "seed>widen(2.5)", 0);
            add(CandidateSource::Accurate, widen(seed, 3.0, rng), "seed>widen(3)", 0);
            add(CandidateSource::Accurate, widen(seed, 1.25, rng), "seed>widen(1.25)", 0);
        } else {
            add(CandidateSource::Accurate, deepen(seed, mid, false), "seed>deepen(" + std::to_string(mid) + ")", 0);
            add(CandidateSource::Accurate, deepen(seed, mid, true),
                "seed>deepen(" + std::to_string(mid) + ",residual)", 0);
            add(CandidateSource::Accurate, deepen(widen(seed, 1.5, rng), mid, false),
                "seed>widen(1.5)>deepen(" + std::to_string(mid) + ")", 0);
        }
    });

    // Shallow: round-robin over deletable positions.
    std::vector<int> deletable;
    for (int l = 1; l < n_layers(seed) - 1; ++l) {
        const LayerKind k = seed.layers[static_cast<std::size_t>(l)].kind;
        if (k == LayerKind::Conv || k == LayerKind::ReLU || k == LayerKind::Dropout) deletable.push_back(l);
    }
    if (deletable.empty()) throw TransformError("family: seed has no deletable layer");
    SolverCandidate seed_c;
    seed_c.id = "seed";
    seed_c.net = seed;
    seed_c.lineage = "seed";
    const std::size_t shallow_begin = fam.size();
    for (int k = 0; k < 5; ++k) {
        step("shallow " + std::to_string(k), [&] {
            SolverCandidate c = shallow_candidate(seed_c, deletable[static_cast<std::size_t>(k) % deletable.size()],
                                                  nn_id(static_cast<int>(fam.size())), policy);
            fam.push_back(std::move(c));
        });
    }

    // Narrow: ten per shallow model, r = ceil(C/10), distinct results.
    const std::size_t narrow_begin = fam.size();
    for (std::size_t s = shallow_begin; s < narrow_begin; ++s) {
        const SolverCandidate parent = fam[s];
        const auto convs = inner_convs(*parent.net);
        std::vector<NetworkGraph> made;
        for (int k = 0; k < 10; ++k) {
            step("narrow " + parent.id + "/" + std::to_string(k), [&] {
                if (convs.empty()) throw TransformError("no narrowable layer");
                // Round-robin start; a layer whose choices are used up passes to the next.
                int layer = -1, r = 0;
                NetworkGraph net;
                for (std::size_t shift = 0; shift < convs.size() && layer < 0; ++shift) {
                    const int l = convs[(static_cast<std::size_t>(k) + shift) % convs.size()];
                    const int cout = parent.net->layers[static_cast<std::size_t>(l)].channels_out;
                    const int rl = std::max(1, (cout + 9) / 10);
                    for (int attempt = 0; attempt < 32; ++attempt) {
                        net = op_narrow(*parent.net, l, rl, rng);
                        if (std::find(made.begin(), made.end(), net) == made.end()) {
                            layer = l;
                            r = rl;
                            break;
                        }
                    }
                }
                if (layer < 0) throw TransformError("no distinct narrowing left");
                made.push_back(net);
                add(CandidateSource::Narrow, net,
                    parent.lineage + ">narrow(" + std::to_string(layer) + ",r=" + std::to_string(r) + ")",
                    parent.deletions);
            });
        }
    }

    // Pool: one per shallow and narrow model, at a random placement within budget.
    const std::size_t pool_begin = fam.size();
    for (std::size_t s = shallow_begin; s < pool_begin; ++s) {
        const SolverCandidate parent = fam[s];
        step("pool " + parent.id, [&] {
            std::vector<std::pair<int, NetworkGraph>> options;
            for (int l = 0; l < n_layers(*parent.net); ++l) {
                if (parent.net->layers[static_cast<std::size_t>(l)].kind != LayerKind::Conv) continue;
                try {
                    options.emplace_back(l, op_pooling(*parent.net, l, 2, policy));
                } catch (const TransformError&) {
                }
            }
            if (options.empty()) throw TransformError("no placement fits the neuron budget");
            auto& pick = options[rng.index(options.size())];
            add(CandidateSource::Pool, std::move(pick.second),
                parent.lineage + ">pool(" + std::to_string(pick.first) + ",2)", parent.deletions);
        });
    }

    // Dropout: 18 targets drawn without replacement from the 110 derived models.
    const std::size_t pool_end = fam.size();
    std::vector<std::size_t> targets = rng.sample_without_replacement(pool_end - shallow_begin, 18);
    std::sort(targets.begin(), targets.end());
    for (std::size_t t : targets) {
        const SolverCandidate parent = fam[shallow_begin + t];
        step("dropout " + parent.id, [&] {
            std::vector<int> convs = inner_convs(*parent.net);
            rng.shuffle(convs);
            const double total = static_cast<double>(total_neurons(*parent.net, policy.reference_size, policy.reference_size));
            for (int l : convs) {
                const int cout = parent.net->layers[static_cast<std::size_t>(l)].channels_out;
                const double cap = policy.neuron_budget * total /
                                   static_cast<double>(layer_neurons(*parent.net, l, policy.reference_size));
                const double p = std::min(0.5, cap);
                if (p * cout < 1.0) continue;
                try {
                    NetworkGraph net = op_dropout(*parent.net, l, p, rng, policy);
                    std::ostringstream lin;
                    lin << parent.lineage << ">dropout(" << l << ",p=" << p << ")";
                    add(CandidateSource::Dropout, std::move(net), lin.str(), parent.deletions);
                    return;
                } catch (const TransformError&) {
                }
            }
            throw TransformError("no layer admits dropout within the budget");
        });
    }
    return fam;
}

std::vector<SolverCandidate> iterative_family(const std::vector<int>& iters) {
    std::vector<SolverCandidate> out;
    for (int m : iters) {
        if (m < 1) throw std::invalid_argument("iterative family: iteration count must be >= 1");
        SolverCandidate c;
        c.id = "it" + std::to_string(m);
        c.source = CandidateSource::Iterative;
        c.iters = m;
        c.lineage = "pcg-trunc(" + std::to_string(m) + ")";
        out.push_back(std::move(c));
    }
    return out;
}

Baseline run_baseline(const Problem& p, const SimConfig& cfg, bool keep_densities) {
    PcgPressureSolver exact;
    SimulateOptions opts;
    opts.keep_states = false;
    opts.keep_densities = keep_densities;
    const Trajectory t = simulate(p.initial, cfg, [&](int) -> PressureSolver& { return exact; }, opts);
    Baseline b;
    b.problem_id = p.id;
    b.final_density = t.final_state.density;
    b.densities = t.densities;
    b.cum_div_norm = t.cum_div_norm;
    b.total = t.total;
    return b;
}

std::vector<Baseline> run_baselines(const std::vector<Problem>& problems, const SimConfig& cfg, int threads,
                                    bool keep_densities) {
    std::vector<Baseline> out(problems.size());
    parallel_for(problems.size(), threads,
                 [&](std::size_t i) { out[i] = run_baseline(problems[i], cfg, keep_densities); });
    return out;
}

std::vector<ExecutionRecord> collect_records(const std::vector<SolverCandidate>& candidates,
                                             const std::vector<Problem>& problems,
                                             const std::vector<Baseline>& baselines, const SimConfig& cfg,
                                             int threads) {
    if (baselines.size() != problems.size()) throw std::invalid_argument("collect_records: one baseline per problem");
    const std::size_t np = problems.size();
    std::vector<ExecutionRecord> out(candidates.size() * np);
    parallel_for(out.size(), threads, [&](std::size_t idx) {
        const SolverCandidate& c = candidates[idx / np];
        const Problem& p = problems[idx % np];
        ExecutionRecord r;
        r.candidate_id = c.id;
        r.problem_id = p.id;
        try {
            auto solver = make_solver(c);
            SimulateOptions opts;
            opts.keep_states = false;
            opts.keep_densities = false;
            const Trajectory t = simulate(p.initial, cfg, [&](int) -> PressureSolver& { return *solver; }, opts);
            r.qloss = quality_loss(baselines[idx % np].final_density, t.final_state.density);
            r.time_s = t.total.modeled_time();
            r.flops = t.total.flops;
            if (!std::isfinite(r.qloss)) throw NumericError("non-finite density");
        } catch (const std::exception&) {
            r.failed = true;
            r.qloss = std::numeric_limits<double>::infinity();
        }
        out[idx] = std::move(r);
    });
    return out;
}

void summarize(std::vector<SolverCandidate>& candidates, const std::vector<ExecutionRecord>& records) {
    std::map<std::string, std::vector<const ExecutionRecord*>> by_id;
    for (const auto& r : records) by_id[r.candidate_id].push_back(&r);
    for (SolverCandidate& c : candidates) {
        const auto it = by_id.find(c.id);
        if (it == by_id.end()) throw std::invalid_argument("summarize: no records for " + c.id);
        double q = 0.0, t = 0.0, f = 0.0;
        for (const ExecutionRecord* r : it->second) {
            q += r->qloss;
            t += r->time_s;
            f += static_cast<double>(r->flops);
        }
        const double n = static_cast<double>(it->second.size());
        c.mean_qloss = q / n;
        c.mean_time = t / n;
        c.flops = static_cast<std::int64_t>(std::llround(f / n));
    }
}

std::vector<std::size_t> pareto_front(const std::vector<TimeQuality>& pts) {
    if (pts.empty()) throw std::invalid_argument("pareto: empty pool");
    std::vector<std::size_t> order(pts.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (pts[a].time != pts[b].time) return pts[a].time < pts[b].time;
        if (pts[a].qloss != pts[b].qloss) return pts[a].qloss < pts[b].qloss;
        return a < b;
    });
    std::vector<std::size_t> keep;
    double best = std::numeric_limits<double>::infinity();
    const TimeQuality* last = nullptr;
    for (std::size_t k : order) {
        const TimeQuality& p = pts[k];
        const bool duplicate = last && last->time == p.time && last->qloss == p.qloss;
        if (p.qloss < best || duplicate) {
            keep.push_back(k);
            best = std::min(best, p.qloss);
            last = &p;
        }
    }
    std::sort(keep.begin(), keep.end());
    return keep;
}

std::vector<SolverCandidate> pareto_select(const std::vector<SolverCandidate>& pool) {
    std::vector<TimeQuality> pts;
    for (const auto& c : pool) pts.push_back({c.mean_time, c.mean_qloss});
    std::vector<SolverCandidate> out;
    for (std::size_t k : pareto_front(pts)) out.push_back(pool[k]);
    return out;
}

void write_records_csv(std::ostream& os, const std::vector<ExecutionRecord>& records) {
    CsvTable t;
    t.header = {"candidate_id", "problem_id", "qloss", "time_s", "flops"};
    for (const auto& r : records)
        t.rows.push_back({r.candidate_id, std::to_string(r.problem_id), format_double(r.qloss), format_double(r.time_s),
                          std::to_string(r.flops)});
    write_csv(os, t);
}

std::vector<ExecutionRecord> read_records_csv(std::istream& is) {
    const CsvTable t = read_csv(is);
    std::vector<ExecutionRecord> out;
    for (std::size_t k = 0; k < t.rows.size(); ++k) {
        ExecutionRecord r;
        r.candidate_id = t.at(k, "candidate_id");
        r.problem_id = std::stoi(t.at(k, "problem_id"));
        r.qloss = t.number(k, "qloss");
        r.time_s = t.number(k, "time_s");
        r.flops = std::stoll(t.at(k, "flops"));
        r.failed = !std::isfinite(r.qloss);
        out.push_back(std::move(r));
    }
    return out;
}

void write_manifest(std::ostream& os, const std::vector<SolverCandidate>& candidates) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : candidates) {
        nlohmann::json j{{"id", c.id}, {"source", to_string(c.source)}, {"lineage", c.lineage},
                         {"deletions", c.deletions}, {"mean_qloss", c.mean_qloss}, {"mean_time", c.mean_time},
                         {"flops", c.flops}};
        if (c.iters) j["iters"] = *c.iters;
        if (c.net) j["layers"] = c.net->layers.size();
        arr.push_back(std::move(j));
    }
    os << arr.dump(1) << '\n';
}

}  // namespace qaf

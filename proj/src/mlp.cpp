#include "qaf/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "qaf/csv.hpp"
#include "qaf/error.hpp"

namespace qaf {

using nlohmann::json;

void UserRequirement::validate() const {
    if (!(q > 0.0) || !(t > 0.0)) throw std::invalid_argument("requirement needs q > 0 and t > 0");
}

FeatureVector build_feature_vector(const UserRequirement& req, const SolverCandidate& cand) {
    FeatureVector f(kFeatureLength, 0.0);
    f[0] = req.q;
    f[1] = req.t;
    double* ker = &f[3];
    double* chn = ker + kFeatureLayers;
    double* pool = chn + kFeatureLayers;
    double* unp = pool + kFeatureLayers;
    double* res = unp + kFeatureLayers;
    if (cand.iters) {
        chn[0] = *cand.iters;
        return f;
    }
    if (!cand.net) throw std::invalid_argument("candidate " + cand.id + " has neither a net nor an iteration count");
    const NetworkGraph& net = *cand.net;
    const int n = static_cast<int>(net.layers.size());
    if (n > kFeatureLayers)
        throw GraphError(n - 1, "network has " + std::to_string(n) + " layers, features cover " +
                                    std::to_string(kFeatureLayers));
    const auto shapes = infer_shapes(net, 32, 32);
    f[2] = n;
    for (int l = 0; l < n; ++l) {
        const LayerSpec& s = net.layers[static_cast<std::size_t>(l)];
        chn[l] = shapes[static_cast<std::size_t>(l)].c;
        if (s.kind == LayerKind::Conv) ker[l] = s.kernel;
        if (s.kind == LayerKind::AvgPool || s.kind == LayerKind::MaxPool) pool[l] = s.pool;
        if (s.kind == LayerKind::Unpool) unp[l] = s.pool;
        if (s.residual_from) res[l] = l - *s.residual_from;
    }
    return f;
}

double label_success_rate(const std::vector<ExecutionRecord>& records, const UserRequirement& req) {
    if (records.empty()) throw std::invalid_argument("label_success_rate: no records");
    std::size_t ok = 0;
    for (const auto& r : records)
        if (r.qloss <= req.q && r.time_s <= req.t) ++ok;
    return static_cast<double>(ok) / static_cast<double>(records.size());
}

double percentile(std::vector<double> v, double pct) {
    if (v.empty()) throw std::invalid_argument("percentile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<UserRequirement> requirement_grid(const std::vector<ExecutionRecord>& records) {
    std::vector<double> qs, ts;
    for (const auto& r : records) {
        if (std::isfinite(r.qloss)) qs.push_back(r.qloss);
        if (std::isfinite(r.time_s)) ts.push_back(r.time_s);
    }
    if (qs.empty() || ts.empty()) throw std::invalid_argument("requirement_grid: no finite records");
    std::set<double> qv, tv;
    for (double p : {10.0, 25.0, 50.0, 75.0, 90.0}) {
        qv.insert(percentile(qs, p));
        tv.insert(percentile(ts, p));
    }
    std::vector<UserRequirement> out;
    for (double q : qv)
        for (double t : tv)
            if (q > 0.0 && t > 0.0) out.push_back({q, t});
    if (out.empty()) throw std::invalid_argument("requirement_grid: percentiles are all zero");
    return out;
}

std::vector<LabeledSample> generate_samples(const std::vector<ExecutionRecord>& records,
                                            const std::vector<SolverCandidate>& candidates,
                                            const std::vector<UserRequirement>& grid) {
    if (grid.empty()) throw std::invalid_argument("generate_samples: empty requirement grid");
    std::map<std::string, std::vector<ExecutionRecord>> by_id;
    for (const auto& r : records) by_id[r.candidate_id].push_back(r);
    std::vector<LabeledSample> out;
    out.reserve(candidates.size() * grid.size());
    for (const auto& c : candidates) {
        const auto it = by_id.find(c.id);
        if (it == by_id.end()) throw std::invalid_argument("generate_samples: no records for " + c.id);
        for (const auto& req : grid) {
            LabeledSample s;
            s.candidate_id = c.id;
            s.req = req;
            s.features = build_feature_vector(req, c);
            s.label = label_success_rate(it->second, req);
            out.push_back(std::move(s));
        }
    }
    return out;
}

std::vector<int> mlp_topology(int variant) {
    switch (variant) {
        case 1: return {48, 32, 16, 1};
        case 2: return {48, 32, 16, 8, 1};
        case 3: return {48, 32, 32, 16, 8, 1};
        case 4: return {48, 64, 32, 32, 16, 8, 1};
        case 5: return {48, 64, 64, 32, 32, 16, 8, 1};
    }
    throw std::invalid_argument("mlp topology variant must be 1..5");
}

MlpModel make_mlp(const std::vector<int>& sizes, Rng& rng) {
    if (sizes.size() < 2 || sizes.front() != kFeatureLength || sizes.back() != 1)
        throw std::invalid_argument("mlp sizes must run from 48 to 1");
    MlpModel m;
    m.sizes = sizes;
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
        if (sizes[k + 1] < 1) throw std::invalid_argument("mlp layer width must be >= 1");
        const double sd = std::sqrt(2.0 / sizes[k]);
        std::vector<double> w(static_cast<std::size_t>(sizes[k]) * sizes[k + 1]);
        for (double& x : w) x = sd * rng.normal();
        m.w.push_back(std::move(w));
        m.b.emplace_back(static_cast<std::size_t>(sizes[k + 1]), 0.0);
    }
    m.scale.assign(kFeatureLength, 1.0);
    return m;
}

std::vector<double> fit_feature_scale(const std::vector<LabeledSample>& samples) {
    std::vector<double> s(kFeatureLength, 0.0);
    for (const auto& x : samples)
        for (int k = 0; k < kFeatureLength; ++k) s[k] = std::max(s[k], std::abs(x.features[static_cast<std::size_t>(k)]));
    for (double& v : s)
        if (!(v > 0.0) || !std::isfinite(v)) v = 1.0;
    return s;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Activations of every layer (acts[0] = scaled input).
std::vector<std::vector<double>> forward_all(const MlpModel& m, const FeatureVector& x) {
    if (x.size() != static_cast<std::size_t>(kFeatureLength))
        throw std::invalid_argument("feature vector has " + std::to_string(x.size()) + " entries, expected 48");
    std::vector<std::vector<double>> acts;
    acts.emplace_back(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) acts[0][k] = x[k] / m.scale[k];
    const std::size_t L = m.w.size();
    for (std::size_t l = 0; l < L; ++l) {
        const auto& in = acts.back();
        const std::size_t n_in = static_cast<std::size_t>(m.sizes[l]), n_out = static_cast<std::size_t>(m.sizes[l + 1]);
        std::vector<double> out(n_out);
        for (std::size_t o = 0; o < n_out; ++o) {
            double z = m.b[l][o];
            const double* row = &m.w[l][o * n_in];
            for (std::size_t i = 0; i < n_in; ++i) z += row[i] * in[i];
            out[o] = l + 1 == L ? sigmoid(z) : std::max(0.0, z);
        }
        acts.push_back(std::move(out));
    }
    return acts;
}

}  // namespace

double predict_success(const MlpModel& mlp, const FeatureVector& features) {
    return forward_all(mlp, features).back()[0];
}

double mlp_mse(const MlpModel& mlp, const std::vector<LabeledSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("mlp_mse: no samples");
    double s = 0.0;
    for (const auto& x : samples) {
        const double e = predict_success(mlp, x.features) - x.label;
        s += e * e;
    }
    return s / static_cast<double>(samples.size());
}

void MlpTrainConfig::validate() const {
    if (epochs < 0 || batch_size < 1 || learning_rate < 0.0 || momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("invalid MLP training configuration");
    mlp_topology(topology);
}

MlpTrainResult train_mlp(const std::vector<LabeledSample>& samples, const MlpTrainConfig& cfg) {
    cfg.validate();
    if (samples.size() < 10) throw std::invalid_argument("train_mlp needs at least 10 samples");
    for (std::size_t k = 0; k < samples.size(); ++k) {
        const auto& s = samples[k];
        if (!(s.label >= 0.0 && s.label <= 1.0)) throw std::invalid_argument("sample label outside [0, 1]");
        // ReLU would silently swallow a NaN, so reject it here.
        for (double x : s.features)
            if (!std::isfinite(x))
                throw TrainingError("sample " + std::to_string(k) + " (" + s.candidate_id + ") has a non-finite feature");
    }
    Rng rng(cfg.seed);
    MlpTrainResult res;
    MlpModel& m = res.model;
    m = make_mlp(mlp_topology(cfg.topology), rng);
    m.scale = fit_feature_scale(samples);
    const std::size_t L = m.w.size();
    std::vector<std::vector<double>> vw(L), vb(L), gw(L), gb(L);
    for (std::size_t l = 0; l < L; ++l) {
        vw[l].assign(m.w[l].size(), 0.0);
        vb[l].assign(m.b[l].size(), 0.0);
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            for (std::size_t l = 0; l < L; ++l) {
                gw[l].assign(m.w[l].size(), 0.0);
                gb[l].assign(m.b[l].size(), 0.0);
            }
            for (std::size_t k = start; k < end; ++k) {
                const LabeledSample& s = samples[order[k]];
                const auto acts = forward_all(m, s.features);
                const double y = acts.back()[0];
                const double e = y - s.label;
                epoch_loss += e * e;
                // d(e^2)/dz at the sigmoid output
                std::vector<double> delta{2.0 * e * y * (1.0 - y)};
                for (std::size_t l = L; l-- > 0;) {
                    const std::size_t n_in = static_cast<std::size_t>(m.sizes[l]);
                    const std::vector<double>& in = acts[l];
                    std::vector<double> back(n_in, 0.0);
                    for (std::size_t o = 0; o < delta.size(); ++o) {
                        gb[l][o] += delta[o];
                        const double* row = &m.w[l][o * n_in];
                        double* grow = &gw[l][o * n_in];
                        for (std::size_t i = 0; i < n_in; ++i) {
                            grow[i] += delta[o] * in[i];
                            back[i] += delta[o] * row[i];
                        }
                    }
                    if (l > 0)
                        for (std::size_t i = 0; i < n_in; ++i)
                            if (in[i] <= 0.0) back[i] = 0.0;
                    delta = std::move(back);
                }
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t l = 0; l < L; ++l) {
                for (std::size_t k = 0; k < m.w[l].size(); ++k) {
                    vw[l][k] = cfg.momentum * vw[l][k] - cfg.learning_rate * gw[l][k] * inv;
                    m.w[l][k] += vw[l][k];
                }
                for (std::size_t k = 0; k < m.b[l].size(); ++k) {
                    vb[l][k] = cfg.momentum * vb[l][k] - cfg.learning_rate * gb[l][k] * inv;
                    m.b[l][k] += vb[l][k];
                }
            }
        }
        epoch_loss /= static_cast<double>(samples.size());
        if (!std::isfinite(epoch_loss))
            throw TrainingError("MLP training diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
        res.loss_curve.push_back(epoch_loss);
    }
    return res;
}

double expected_total_time(double r_hat, double time_candidate, double time_exact) {
    return r_hat * time_candidate + (1.0 - r_hat) * time_exact;
}

std::vector<SelectedCandidate> select_by_rate(const std::vector<SolverCandidate>& frontier,
                                              const std::vector<double>& r_hat, const UserRequirement& req,
                                              double time_exact, int cap) {
    if (frontier.empty()) throw std::invalid_argument("select_candidates: empty frontier");
    if (r_hat.size() != frontier.size()) throw std::invalid_argument("select_by_rate: one rate per candidate");
    std::vector<SelectedCandidate> out;
    for (std::size_t k = 0; k < frontier.size(); ++k) {
        const double tt = expected_total_time(r_hat[k], frontier[k].mean_time, time_exact);
        if (tt < req.t) out.push_back({frontier[k], r_hat[k], tt});
    }
    std::sort(out.begin(), out.end(), [](const SelectedCandidate& a, const SelectedCandidate& b) {
        if (a.r_hat != b.r_hat) return a.r_hat > b.r_hat;
        if (a.cand.mean_time != b.cand.mean_time) return a.cand.mean_time < b.cand.mean_time;
        return a.cand.id < b.cand.id;
    });
    if (out.size() > static_cast<std::size_t>(std::max(0, cap))) out.resize(static_cast<std::size_t>(std::max(0, cap)));
    return out;
}

std::vector<SelectedCandidate> select_candidates(const MlpModel& mlp, const std::vector<SolverCandidate>& frontier,
                                                 const UserRequirement& req, double time_exact, int cap) {
    std::vector<double> r;
    for (const auto& c : frontier) r.push_back(predict_success(mlp, build_feature_vector(req, c)));
    return select_by_rate(frontier, r, req, time_exact, cap);
}

void save_mlp(std::ostream& os, const MlpModel& mlp) {
    json j{{"format", "qaf-mlp"}, {"version", kMlpFormatVersion}, {"sizes", mlp.sizes},
           {"weights", mlp.w},    {"biases", mlp.b},               {"scale", mlp.scale}};
    os << j.dump(1) << '\n';
}

MlpModel load_mlp(std::istream& is) {
    MlpModel m;
    try {
        const json j = json::parse(is);
        if (!j.is_object() || j.value("format", "") != "qaf-mlp") throw FormatError("not a qaf-mlp model file");
        if (j.at("version").get<int>() != kMlpFormatVersion) throw FormatError("unsupported qaf-mlp version");
        m.sizes = j.at("sizes").get<std::vector<int>>();
        m.w = j.at("weights").get<std::vector<std::vector<double>>>();
        m.b = j.at("biases").get<std::vector<std::vector<double>>>();
        m.scale = j.at("scale").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed mlp file: ") + e.what());
    }
    if (m.sizes.size() < 2 || m.sizes.front() != kFeatureLength || m.sizes.back() != 1 ||
        m.w.size() + 1 != m.sizes.size() || m.b.size() != m.w.size() ||
        m.scale.size() != static_cast<std::size_t>(kFeatureLength))
        throw FormatError("mlp file: inconsistent layer sizes");
    for (std::size_t l = 0; l < m.w.size(); ++l)
        if (m.w[l].size() != static_cast<std::size_t>(m.sizes[l]) * m.sizes[l + 1] ||
            m.b[l].size() != static_cast<std::size_t>(m.sizes[l + 1]))
            throw FormatError("mlp file: layer " + std::to_string(l) + " has the wrong number of weights");
    return m;
}

void write_samples_csv(std::ostream& os, const std::vector<LabeledSample>& samples) {
    CsvTable t;
    t.header = {"candidate_id", "q", "t"};
    for (int k = 0; k < kFeatureLength; ++k) t.header.push_back("f" + std::to_string(k));
    t.header.push_back("label");
    for (const auto& s : samples) {
        std::vector<std::string> row{s.candidate_id, format_double(s.req.q), format_double(s.req.t)};
        for (double x : s.features) row.push_back(format_double(x));
        row.push_back(format_double(s.label));
        t.rows.push_back(std::move(row));
    }
    write_csv(os, t);
}

}  // namespace qaf

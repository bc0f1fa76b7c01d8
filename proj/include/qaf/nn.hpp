#pragma once

// Small CNN engine for the pressure surrogate: forward, reverse-mode
// gradients through the velocity-update / DivNorm head, SGD training,
// FLOP counting and a JSON model format.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qaf/fluid.hpp"
#include "qaf/grid.hpp"
#include "qaf/rng.hpp"
#include "qaf/solver.hpp"

namespace qaf {

inline constexpr int kMaxLayers = 9;
inline constexpr int kNetInChannels = 2;  // divergence, occupancy

enum class LayerKind { Conv, ReLU, AvgPool, MaxPool, Unpool, Dropout };

std::string to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    int kernel = 3;        ///< Conv only, odd
    int channels_out = 1;  ///< Conv only
    int pool = 2;          ///< pools and unpools
    double drop_p = 0.0;   ///< Dropout only
    std::optional<int> residual_from;  ///< output of this earlier layer is added

    bool operator==(const LayerSpec&) const = default;
};

/// Kernel layout [cout][cin][k][k].
struct ConvParams {
    int cin = 0, cout = 0, k = 0;
    std::vector<double> w;
    std::vector<double> b;

    double& at(int o, int i, int dy, int dx) { return w[((static_cast<std::size_t>(o) * cin + i) * k + dy) * k + dx]; }
    double at(int o, int i, int dy, int dx) const {
        return w[((static_cast<std::size_t>(o) * cin + i) * k + dy) * k + dx];
    }
    bool operator==(const ConvParams&) const = default;
};

struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, double fill = 0.0)
        : c(c_), h(h_), w(w_), data(static_cast<std::size_t>(c_) * h_ * w_, fill) {}
    double& at(int ch, int y, int x) { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    double at(int ch, int y, int x) const { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
    bool operator==(const Tensor&) const = default;
};

struct Shape {
    int c = 0, h = 0, w = 0;
    bool operator==(const Shape&) const = default;
};

struct NetworkGraph {
    std::vector<LayerSpec> layers;
    std::vector<ConvParams> params;  ///< one per layer, empty for non-Conv
    int in_channels = kNetInChannels;

    bool operator==(const NetworkGraph&) const = default;

    int conv_count() const;
};

/// Output shape of every layer for an input of h x w. Throws GraphError
/// (with the layer index) on any inconsistency; with `surrogate` the final
/// output must be one channel at input resolution and the net non-empty.
std::vector<Shape> infer_shapes(const NetworkGraph& net, int h, int w, bool surrogate = true);

/// Full invariant check at a reference resolution (layer count, weights
/// congruent with specs, shapes).
void validate(const NetworkGraph& net, int h = 32, int w = 32);

/// Appends a layer with freshly allocated (zero) parameters.
void push_layer(NetworkGraph& net, const LayerSpec& spec, int cin);

/// He-normal weights, zero biases.
void init_weights(NetworkGraph& net, Rng& rng);

struct ForwardCache {
    Tensor input;
    std::vector<Tensor> outs;                  ///< per layer, after the residual add
    std::vector<std::vector<std::uint8_t>> masks;  ///< Dropout masks (training only)
};

/// Inference (dropout is the identity).
Tensor forward(const NetworkGraph& net, const Tensor& input, ForwardCache* cache = nullptr);
/// Training-mode forward: Dropout layers draw a channel-wise mask from rng
/// and rescale kept activations by 1/(1-p).
Tensor forward_train(const NetworkGraph& net, const Tensor& input, Rng& rng, ForwardCache& cache);

struct Gradients {
    std::vector<ConvParams> params;  ///< congruent with NetworkGraph::params
    Tensor input;

    void zero_like(const NetworkGraph& net);
    Gradients& operator+=(const Gradients& o);
    Gradients& operator*=(double s);
    double sq_norm() const;
};

/// Reverse pass for the linear functional sum(upstream * output).
Gradients backward(const NetworkGraph& net, const ForwardCache& cache, const Tensor& upstream);

/// Network input channels: div / s and occupancy (1 = Solid).
Tensor make_input(const ScalarField& div, const GeometryField& geo, double* scale_out = nullptr);
/// Standard deviation of div over Fluid cells (0 if none).
double divergence_scale(const ScalarField& div, const GeometryField& geo);

/// p = out * s * (rho/dt) * h^2 on Fluid cells, 0 on Solid.
ScalarField output_to_pressure(const Tensor& out, double s, const GeometryField& geo, const ProjectionParams& pp);

/// Predicted pressure for one projection.
ScalarField predict_pressure(const NetworkGraph& net, const ScalarField& div, const GeometryField& geo,
                             const ProjectionParams& pp);

/// DivNorm of the velocity after projecting with the network's pressure.
double loss_divnorm(const NetworkGraph& net, const MacVelocityField& vel, const GeometryField& geo, double dt,
                    double rho, double kappa);

/// y = A x with A the Fluid-cell negative Laplacian (Neumann at Solid);
/// Solid entries of y are 0.
ScalarField apply_neg_laplacian(const ScalarField& x, const GeometryField& geo);

struct LossGrad {
    double loss = 0.0;       ///< DivNorm after correction
    double baseline = 0.0;   ///< DivNorm before correction
    Gradients grad;          ///< of `loss`
};

/// Forward + head + backward for one velocity field. With `train_rng` set,
/// dropout is active.
LossGrad loss_and_gradient(const NetworkGraph& net, const MacVelocityField& vel, const GeometryField& geo,
                           double dt, double rho, double kappa, Rng* train_rng = nullptr);

struct TrainSample {
    MacVelocityField vel;  ///< pre-projection velocity
    GeometryField geo;
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double clip_norm = 1.0;  ///< 0 disables
    std::uint64_t seed = 1;
    double kappa = 3.0;
    double dt = 0.1;
    double rho = 1.0;

    void validate() const;
};

struct TrainResult {
    NetworkGraph net;
    std::vector<double> loss_curve;  ///< mean per-sample objective, per epoch
};

/// Mini-batch SGD with momentum on the per-sample ratio
/// DivNorm(corrected) / DivNorm(before); samples with a zero baseline are
/// skipped. Throws TrainingError on a non-finite loss.
TrainResult train(const NetworkGraph& net, const std::vector<TrainSample>& data, const TrainConfig& cfg);

/// Mean objective of `train` without updating.
double mean_relative_loss(const NetworkGraph& net, const std::vector<TrainSample>& data, const TrainConfig& cfg);

/// Multiply-adds counted as 2 FLOPs; ReLU, pooling, unpooling and residual
/// adds count one per element; Dropout is free at inference.
std::int64_t count_flops(const NetworkGraph& net, const GridDims& dims);

/// Activations summed over every layer output at h x w.
std::int64_t total_neurons(const NetworkGraph& net, int h = 32, int w = 32);

inline constexpr int kModelFormatVersion = 1;

void save_network(std::ostream& os, const NetworkGraph& net);
/// Throws FormatError (malformed, wrong version) or GraphError (invariants).
NetworkGraph load_network(std::istream& is);
std::string network_to_string(const NetworkGraph& net);
NetworkGraph network_from_string(const std::string& text);

/// Network surrogate behind the PressureSolver interface.
class NetPressureSolver final : public PressureSolver {
  public:
    NetPressureSolver(NetworkGraph net, std::string id);

    PressureSolveResult solve(const ScalarField& divergence, const GeometryField& geo,
                              const ProjectionParams& params) override;
    std::string id() const override { return id_; }
    const NetworkGraph& net() const { return net_; }

  private:
    NetworkGraph net_;
    std::string id_;
};

}  // namespace qaf

#pragma once

// Dense numeric substrate: flat parameter vectors with a layer layout, small
// feed-forward networks (dense + 1-D/2-D convolution), exact reverse-mode
// gradients, Hessian-vector products, and a plain SGD stepper.
//
// Everything is templated on the scalar type. Instantiating with `double`
// gives values and first-order gradients; instantiating with `Dual` runs the
// same reverse-mode pass in forward-over-reverse fashion, which yields exact
// Hessian-vector products (needed to differentiate through unrolled inner
// gradient steps).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "metalab/errors.hpp"
#include "metalab/rng.hpp"

namespace metalab {

// ---------------------------------------------------------------------------
// scalars

struct Dual {
    double v = 0.0;  // value
    double d = 0.0;  // directional derivative

    Dual() = default;
    Dual(double value) : v(value) {}
    Dual(double value, double dot) : v(value), d(dot) {}
};

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator-(Dual a) { return {-a.v, -a.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) {
    const double inv = 1.0 / b.v;
    return {a.v * inv, (a.d - a.v * inv * b.d) * inv};
}
inline Dual& operator+=(Dual& a, Dual b) { return a = a + b; }
inline Dual& operator-=(Dual& a, Dual b) { return a = a - b; }
inline Dual& operator*=(Dual& a, Dual b) { return a = a * b; }
inline Dual exp(Dual a) {
    const double e = std::exp(a.v);
    return {e, e * a.d};
}
inline Dual log(Dual a) { return {std::log(a.v), a.d / a.v}; }

inline double value_of(double x) { return x; }
inline double value_of(Dual x) { return x.v; }

using std::exp;
using std::log;

// ---------------------------------------------------------------------------
// data containers

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
};

// Labeled (or unlabeled) examples. Labels, when present, are class indices;
// labels.size() must equal features.rows.
struct Batch {
    Matrix features;
    std::vector<int> labels;

    bool has_labels() const { return labels.size() == features.rows; }
    std::size_t size() const { return features.rows; }
    bool empty() const { return features.rows == 0; }
};

// ---------------------------------------------------------------------------
// parameters

struct LayoutEntry {
    std::string name;                // e.g. "dense0.w"
    std::vector<std::size_t> shape;  // row-major

    std::size_t count() const {
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        return n;
    }
};

// Flat model parameters theta paired with the (layer-id, shape) layout that
// maps them back onto the network.
struct ParamVector {
    std::vector<double> values;
    std::vector<LayoutEntry> layout;

    std::size_t size() const { return values.size(); }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    ParamVector zeros_like() const {
        ParamVector z;
        z.values.assign(values.size(), 0.0);
        z.layout = layout;
        return z;
    }

    static std::size_t layout_count(const std::vector<LayoutEntry>& layout) {
        std::size_t n = 0;
        for (const auto& e : layout) n += e.count();
        return n;
    }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// ---------------------------------------------------------------------------
// network description

enum class Nonlinearity { relu, identity };

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    Nonlinearity act = Nonlinearity::relu;
};

struct Conv1dLayer {
    std::size_t in_channels = 1;
    std::size_t in_length = 0;
    std::size_t filters = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    Nonlinearity act = Nonlinearity::relu;

    std::size_t out_length() const { return (in_length - kernel) / stride + 1; }
};

struct Conv2dLayer {
    std::size_t in_channels = 1;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    std::size_t filters = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    Nonlinearity act = Nonlinearity::relu;

    std::size_t out_h() const { return (in_h - kernel) / stride + 1; }
    std::size_t out_w() const { return (in_w - kernel) / stride + 1; }
};

using Layer = std::variant<DenseLayer, Conv1dLayer, Conv2dLayer>;

inline std::size_t layer_in_dim(const Layer& l) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) return d->in;
    if (const auto* c = std::get_if<Conv1dLayer>(&l)) return c->in_channels * c->in_length;
    const auto& c2 = std::get<Conv2dLayer>(l);
    return c2.in_channels * c2.in_h * c2.in_w;
}

inline std::size_t layer_out_dim(const Layer& l) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) return d->out;
    if (const auto* c = std::get_if<Conv1dLayer>(&l)) return c->filters * c->out_length();
    const auto& c2 = std::get<Conv2dLayer>(l);
    return c2.filters * c2.out_h() * c2.out_w();
}

inline std::size_t layer_param_count(const Layer& l) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) return d->out * d->in + d->out;
    if (const auto* c = std::get_if<Conv1dLayer>(&l))
        return c->filters * c->in_channels * c->kernel + c->filters;
    const auto& c2 = std::get<Conv2dLayer>(l);
    return c2.filters * c2.in_channels * c2.kernel * c2.kernel + c2.filters;
}

enum class Head { linear_logits, embedding_only };

struct NetworkSpec {
    std::vector<Layer> layers;
    Head head = Head::linear_logits;

    std::size_t in_dim() const { return layers.empty() ? 0 : layer_in_dim(layers.front()); }
    std::size_t out_dim() const { return layers.empty() ? 0 : layer_out_dim(layers.back()); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += layer_param_count(l);
        return n;
    }

    // Throws config_error naming the first offending layer.
    void validate() const {
        if (layers.empty()) throw config_error("network has no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const Layer& l = layers[i];
            if (const auto* c = std::get_if<Conv1dLayer>(&l)) {
                if (c->kernel == 0 || c->stride == 0 || c->in_length < c->kernel)
                    throw config_error("layer " + std::to_string(i) + ": bad conv1d geometry");
            }
            if (const auto* c = std::get_if<Conv2dLayer>(&l)) {
                if (c->kernel == 0 || c->stride == 0 || c->in_h < c->kernel || c->in_w < c->kernel)
                    throw config_error("layer " + std::to_string(i) + ": bad conv2d geometry");
            }
            if (layer_in_dim(l) == 0 || layer_out_dim(l) == 0)
                throw config_error("layer " + std::to_string(i) + ": zero dimension");
            if (i + 1 < layers.size() && layer_out_dim(l) != layer_in_dim(layers[i + 1]))
                throw config_error("layer " + std::to_string(i) + " out-dim " +
                                   std::to_string(layer_out_dim(l)) + " does not match layer " +
                                   std::to_string(i + 1) + " in-dim " +
                                   std::to_string(layer_in_dim(layers[i + 1])));
        }
    }

    std::vector<LayoutEntry> layout() const {
        std::vector<LayoutEntry> out;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const Layer& l = layers[i];
            const std::string id = std::to_string(i);
            if (const auto* d = std::get_if<DenseLayer>(&l)) {
                out.push_back({"dense" + id + ".w", {d->out, d->in}});
                out.push_back({"dense" + id + ".b", {d->out}});
            } else if (const auto* c = std::get_if<Conv1dLayer>(&l)) {
                out.push_back({"conv1d" + id + ".w", {c->filters, c->in_channels, c->kernel}});
                out.push_back({"conv1d" + id + ".b", {c->filters}});
            } else {
                const auto& c2 = std::get<Conv2dLayer>(l);
                out.push_back(
                    {"conv2d" + id + ".w", {c2.filters, c2.in_channels, c2.kernel, c2.kernel}});
                out.push_back({"conv2d" + id + ".b", {c2.filters}});
            }
        }
        return out;
    }
};

// Fully-connected net from a list of dimensions; hidden layers use relu,
// the last layer is linear.
inline NetworkSpec dense_net(const std::vector<std::size_t>& dims,
                             Head head = Head::linear_logits) {
    if (dims.size() < 2) throw config_error("dense_net needs at least (in, out)");
    NetworkSpec spec;
    spec.head = head;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const bool last = (i + 2 == dims.size());
        spec.layers.push_back(
            DenseLayer{dims[i], dims[i + 1], last ? Nonlinearity::identity : Nonlinearity::relu});
    }
    return spec;
}

// Small convolutional preset: `conv_layers` strided conv2d blocks followed by
// a linear head (or none, for embedding networks).
inline NetworkSpec conv_preset(std::size_t channels, std::size_t height, std::size_t width,
                               std::size_t filters, std::size_t classes,
                               Head head = Head::linear_logits, std::size_t conv_layers = 4,
                               std::size_t kernel = 3, std::size_t stride = 2) {
    NetworkSpec spec;
    spec.head = head;
    std::size_t c = channels, h = height, w = width;
    for (std::size_t i = 0; i < conv_layers; ++i) {
        if (h < kernel || w < kernel)
            throw config_error("conv_preset: input too small for " + std::to_string(conv_layers) +
                               " conv layers");
        Conv2dLayer layer{c, h, w, filters, kernel, stride, Nonlinearity::relu};
        h = layer.out_h();
        w = layer.out_w();
        c = filters;
        spec.layers.push_back(layer);
    }
    if (head == Head::linear_logits)
        spec.layers.push_back(DenseLayer{c * h * w, classes, Nonlinearity::identity});
    return spec;
}

// ---------------------------------------------------------------------------
// loss description

enum class LossKind { softmax_cross_entropy, squared_error };

struct LossSpec {
    LossKind kind = LossKind::softmax_cross_entropy;
    // Upper bound M on the loss; consumed only by the bound evaluators.
    double bound_m = 30.0;
};

// ---------------------------------------------------------------------------
// validation helpers

inline void check_params_match(const NetworkSpec& spec, std::size_t param_count) {
    spec.validate();
    if (param_count != spec.param_count())
        throw config_error("parameter vector has " + std::to_string(param_count) +
                           " values, network needs " + std::to_string(spec.param_count()));
}

inline void check_batch_matches(const NetworkSpec& spec, const Batch& batch) {
    if (!batch.empty() && batch.features.cols != spec.in_dim())
        throw config_error("batch feature dim " + std::to_string(batch.features.cols) +
                           " does not match layer 0 in-dim " + std::to_string(spec.in_dim()));
}

// ---------------------------------------------------------------------------
// forward / backward core (templated on scalar)

namespace detail {

template <typename S>
void layer_forward(const Layer& l, std::span<const S> params, std::span<const S> in,
                   std::span<S> out) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) {
        const S* w = params.data();
        const S* b = params.data() + d->out * d->in;
        for (std::size_t o = 0; o < d->out; ++o) {
            S z = b[o];
            const S* wrow = w + o * d->in;
            for (std::size_t i = 0; i < d->in; ++i) z += wrow[i] * in[i];
            out[o] = (d->act == Nonlinearity::relu && value_of(z) <= 0.0) ? S(0.0) : z;
        }
    } else if (const auto* c = std::get_if<Conv1dLayer>(&l)) {
        const S* w = params.data();
        const S* b = params.data() + c->filters * c->in_channels * c->kernel;
        const std::size_t out_len = c->out_length();
        for (std::size_t f = 0; f < c->filters; ++f) {
            for (std::size_t p = 0; p < out_len; ++p) {
                S z = b[f];
                for (std::size_t ch = 0; ch < c->in_channels; ++ch) {
                    const S* wk = w + (f * c->in_channels + ch) * c->kernel;
                    const S* xs = in.data() + ch * c->in_length + p * c->stride;
                    for (std::size_t k = 0; k < c->kernel; ++k) z += wk[k] * xs[k];
                }
                S& slot = out[f * out_len + p];
                slot = (c->act == Nonlinearity::relu && value_of(z) <= 0.0) ? S(0.0) : z;
            }
        }
    } else {
        const auto& c2 = std::get<Conv2dLayer>(l);
        const S* w = params.data();
        const S* b = params.data() + c2.filters * c2.in_channels * c2.kernel * c2.kernel;
        const std::size_t oh = c2.out_h(), ow = c2.out_w();
        for (std::size_t f = 0; f < c2.filters; ++f) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t x = 0; x < ow; ++x) {
                    S z = b[f];
                    for (std::size_t ch = 0; ch < c2.in_channels; ++ch) {
                        const S* wch = w + ((f * c2.in_channels + ch) * c2.kernel) * c2.kernel;
                        const S* xch = in.data() + ch * c2.in_h * c2.in_w;
                        for (std::size_t ky = 0; ky < c2.kernel; ++ky) {
                            const S* wr = wch + ky * c2.kernel;
                            const S* xr = xch + (y * c2.stride + ky) * c2.in_w + x * c2.stride;
                            for (std::size_t kx = 0; kx < c2.kernel; ++kx) z += wr[kx] * xr[kx];
                        }
                    }
                    S& slot = out[(f * oh + y) * ow + x];
                    slot = (c2.act == Nonlinearity::relu && value_of(z) <= 0.0) ? S(0.0) : z;
                }
            }
        }
    }
}

// Accumulates parameter gradients into pgrad and writes the input-side
// gradient into gin. `act_out` is this layer's post-activation output (used
// for the relu mask), `act_in` its input.
template <typename S>
void layer_backward(const Layer& l, std::span<const S> params, std::span<const S> act_in,
                    std::span<const S> act_out, std::span<const S> gout, std::span<S> pgrad,
                    std::span<S> gin) {
    for (auto& g : gin) g = S(0.0);
    if (const auto* d = std::get_if<DenseLayer>(&l)) {
        const S* w = params.data();
        S* gw = pgrad.data();
        S* gb = pgrad.data() + d->out * d->in;
        for (std::size_t o = 0; o < d->out; ++o) {
            // relu: output zero means the unit was clamped (ties at exactly 0
            // take the zero branch, matching forward)
            const bool off = d->act == Nonlinearity::relu && value_of(act_out[o]) <= 0.0;
            if (off) continue;
            const S g = gout[o];
            if constexpr (std::is_same_v<S, double>) {
                if (g == 0.0) continue;
            }
            const S* wrow = w + o * d->in;
            S* gwrow = gw + o * d->in;
            for (std::size_t i = 0; i < d->in; ++i) {
                gwrow[i] += g * act_in[i];
                gin[i] += wrow[i] * g;
            }
            gb[o] += g;
        }
    } else if (const auto* c = std::get_if<Conv1dLayer>(&l)) {
        const S* w = params.data();
        S* gw = pgrad.data();
        S* gb = pgrad.data() + c->filters * c->in_channels * c->kernel;
        const std::size_t out_len = c->out_length();
        for (std::size_t f = 0; f < c->filters; ++f) {
            for (std::size_t p = 0; p < out_len; ++p) {
                const std::size_t oi = f * out_len + p;
                if (c->act == Nonlinearity::relu && value_of(act_out[oi]) <= 0.0) continue;
                const S g = gout[oi];
                gb[f] += g;
                for (std::size_t ch = 0; ch < c->in_channels; ++ch) {
                    const std::size_t base = (f * c->in_channels + ch) * c->kernel;
                    const std::size_t xbase = ch * c->in_length + p * c->stride;
                    for (std::size_t k = 0; k < c->kernel; ++k) {
                        gw[base + k] += g * act_in[xbase + k];
                        gin[xbase + k] += w[base + k] * g;
                    }
                }
            }
        }
    } else {
        const auto& c2 = std::get<Conv2dLayer>(l);
        const S* w = params.data();
        S* gw = pgrad.data();
        S* gb = pgrad.data() + c2.filters * c2.in_channels * c2.kernel * c2.kernel;
        const std::size_t oh = c2.out_h(), ow = c2.out_w();
        for (std::size_t f = 0; f < c2.filters; ++f) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t x = 0; x < ow; ++x) {
                    const std::size_t oi = (f * oh + y) * ow + x;
                    if (c2.act == Nonlinearity::relu && value_of(act_out[oi]) <= 0.0) continue;
                    const S g = gout[oi];
                    gb[f] += g;
                    for (std::size_t ch = 0; ch < c2.in_channels; ++ch) {
                        const std::size_t wbase = ((f * c2.in_channels + ch) * c2.kernel) * c2.kernel;
                        const std::size_t xch = ch * c2.in_h * c2.in_w;
                        for (std::size_t ky = 0; ky < c2.kernel; ++ky) {
                            const std::size_t xrow = xch + (y * c2.stride + ky) * c2.in_w + x * c2.stride;
                            for (std::size_t kx = 0; kx < c2.kernel; ++kx) {
                                gw[wbase + ky * c2.kernel + kx] += g * act_in[xrow + kx];
                                gin[xrow + kx] += w[wbase + ky * c2.kernel + kx] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename S>
struct Trace {
    // acts[0] is the input row, acts[l+1] the output of layer l
    std::vector<std::vector<S>> acts;
};

template <typename S>
void forward_row(const NetworkSpec& spec, std::span<const S> params, std::span<const S> x,
                 Trace<S>& trace) {
    trace.acts.resize(spec.layers.size() + 1);
    trace.acts[0].assign(x.begin(), x.end());
    std::size_t offset = 0;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const std::size_t pc = layer_param_count(spec.layers[l]);
        trace.acts[l + 1].assign(layer_out_dim(spec.layers[l]), S(0.0));
        layer_forward<S>(spec.layers[l], params.subspan(offset, pc), trace.acts[l],
                         trace.acts[l + 1]);
        offset += pc;
    }
}

// Reverse pass over one traced row; accumulates into pgrad.
template <typename S>
void backward_row(const NetworkSpec& spec, std::span<const S> params, const Trace<S>& trace,
                  std::vector<S> gout, std::span<S> pgrad) {
    std::size_t offset = spec.param_count();
    std::vector<S> gin;
    for (std::size_t l = spec.layers.size(); l-- > 0;) {
        const std::size_t pc = layer_param_count(spec.layers[l]);
        offset -= pc;
        gin.assign(trace.acts[l].size(), S(0.0));
        layer_backward<S>(spec.layers[l], params.subspan(offset, pc), trace.acts[l],
                          trace.acts[l + 1], gout, pgrad.subspan(offset, pc), gin);
        gout = std::move(gin);
    }
}

// Mean loss over the batch and d(loss)/d(outputs); outputs laid out row-major.
template <typename S>
S loss_forward_backward(const LossSpec& loss, std::span<const S> out, std::size_t out_dim,
                        const std::vector<int>& labels, std::vector<S>* out_grad) {
    const std::size_t rows = labels.size();
    const S inv_rows = S(1.0 / static_cast<double>(rows));
    S total(0.0);
    if (out_grad) out_grad->assign(rows * out_dim, S(0.0));
    for (std::size_t r = 0; r < rows; ++r) {
        std::span<const S> o = out.subspan(r * out_dim, out_dim);
        const int y = labels[r];
        if (loss.kind == LossKind::softmax_cross_entropy) {
            if (y < 0 || static_cast<std::size_t>(y) >= out_dim)
                throw config_error("label " + std::to_string(y) + " outside logit range");
            // log-sum-exp with max subtraction
            double m = value_of(o[0]);
            for (std::size_t j = 1; j < out_dim; ++j) m = std::max(m, value_of(o[j]));
            S sum(0.0);
            for (std::size_t j = 0; j < out_dim; ++j) sum += exp(o[j] - S(m));
            const S lse = S(m) + log(sum);
            total += (lse - o[static_cast<std::size_t>(y)]) * inv_rows;
            if (out_grad) {
                for (std::size_t j = 0; j < out_dim; ++j) {
                    S p = exp(o[j] - S(m)) / sum;
                    (*out_grad)[r * out_dim + j] = p * inv_rows;
                }
                (*out_grad)[r * out_dim + static_cast<std::size_t>(y)] -= inv_rows;
            }
        } else {
            // Squared error, 0.5*||pred - target||^2. Single-output nets
            // regress on the label value; wider nets use one-hot targets.
            if (out_dim == 1) {
                const S diff = o[0] - S(static_cast<double>(y));
                total += S(0.5) * diff * diff * inv_rows;
                if (out_grad) (*out_grad)[r] = diff * inv_rows;
            } else {
                if (y < 0 || static_cast<std::size_t>(y) >= out_dim)
                    throw config_error("label " + std::to_string(y) + " outside output range");
                for (std::size_t j = 0; j < out_dim; ++j) {
                    const S diff = o[j] - S(j == static_cast<std::size_t>(y) ? 1.0 : 0.0);
                    total += S(0.5) * diff * diff * inv_rows;
                    if (out_grad) (*out_grad)[r * out_dim + j] = diff * inv_rows;
                }
            }
        }
    }
    return total;
}

template <typename S>
std::pair<S, std::vector<S>> loss_and_grad_core(const NetworkSpec& spec, std::span<const S> params,
                                                const Batch& batch, const LossSpec& loss) {
    std::vector<S> pgrad(spec.param_count(), S(0.0));
    if (batch.empty()) return {S(0.0), std::move(pgrad)};  // empty support adapts to nothing
    if (!batch.has_labels()) throw config_error("loss_and_grad requires a labeled batch");

    const std::size_t out_dim = spec.out_dim();
    const std::size_t rows = batch.size();
    std::vector<S> outputs(rows * out_dim, S(0.0));
    std::vector<Trace<S>> traces(rows);
    std::vector<S> xrow(spec.in_dim());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < spec.in_dim(); ++c) xrow[c] = S(batch.features.at(r, c));
        forward_row<S>(spec, params, xrow, traces[r]);
        for (std::size_t j = 0; j < out_dim; ++j) outputs[r * out_dim + j] = traces[r].acts.back()[j];
    }
    std::vector<S> ograd;
    const S total = loss_forward_backward<S>(loss, outputs, out_dim, batch.labels, &ograd);
    std::vector<S> rowg(out_dim);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < out_dim; ++j) rowg[j] = ograd[r * out_dim + j];
        backward_row<S>(spec, params, traces[r], rowg, pgrad);
    }
    return {total, std::move(pgrad)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// public operations

// Glorot-uniform weights, zero biases, from a named seed.
inline ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    ParamVector p;
    p.layout = spec.layout();
    p.values.reserve(spec.param_count());
    Rng rng(mix64(seed, 0x1417u));
    for (const auto& l : spec.layers) {
        std::size_t fan_in = 0, fan_out = 0, wcount = 0, bcount = 0;
        if (const auto* d = std::get_if<DenseLayer>(&l)) {
            fan_in = d->in;
            fan_out = d->out;
            wcount = d->out * d->in;
            bcount = d->out;
        } else if (const auto* c = std::get_if<Conv1dLayer>(&l)) {
            fan_in = c->in_channels * c->kernel;
            fan_out = c->filters * c->kernel;
            wcount = c->filters * c->in_channels * c->kernel;
            bcount = c->filters;
        } else {
            const auto& c2 = std::get<Conv2dLayer>(l);
            fan_in = c2.in_channels * c2.kernel * c2.kernel;
            fan_out = c2.filters * c2.kernel * c2.kernel;
            wcount = c2.filters * c2.in_channels * c2.kernel * c2.kernel;
            bcount = c2.filters;
        }
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t i = 0; i < wcount; ++i) p.values.push_back(rng.uniform(-limit, limit));
        for (std::size_t i = 0; i < bcount; ++i) p.values.push_back(0.0);
    }
    return p;
}

// Batched forward pass. Deterministic; identical inputs give bit-identical
// outputs.
inline Matrix forward(const NetworkSpec& spec, const ParamVector& params, const Batch& batch) {
    check_params_match(spec, params.size());
    check_batch_matches(spec, batch);
    Matrix out(batch.size(), spec.out_dim());
    detail::Trace<double> trace;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        detail::forward_row<double>(spec, params.values, batch.features.row(r), trace);
        for (std::size_t j = 0; j < spec.out_dim(); ++j) out.at(r, j) = trace.acts.back()[j];
    }
    return out;
}

// Per-layer activations for every row; index 0 is the input itself, index
// layers.size() the network output. Activation l+1 of the last hidden layer
// (i.e. index layers.size()-1) is the penultimate representation.
inline std::vector<Matrix> forward_all(const NetworkSpec& spec, const ParamVector& params,
                                       const Batch& batch) {
    check_params_match(spec, params.size());
    check_batch_matches(spec, batch);
    std::vector<Matrix> acts(spec.layers.size() + 1);
    acts[0] = Matrix(batch.size(), spec.in_dim());
    for (std::size_t l = 0; l < spec.layers.size(); ++l)
        acts[l + 1] = Matrix(batch.size(), layer_out_dim(spec.layers[l]));
    detail::Trace<double> trace;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        detail::forward_row<double>(spec, params.values, batch.features.row(r), trace);
        for (std::size_t l = 0; l <= spec.layers.size(); ++l)
            for (std::size_t j = 0; j < trace.acts[l].size(); ++j) acts[l].at(r, j) = trace.acts[l][j];
    }
    return acts;
}

// Mean loss over the batch plus its exact reverse-mode gradient. An empty
// batch yields (0, zero gradient) so that adaptation on an empty support set
// is the identity.
inline std::pair<double, ParamVector> loss_and_grad(const NetworkSpec& spec,
                                                    const ParamVector& params, const Batch& batch,
                                                    const LossSpec& loss) {
    check_params_match(spec, params.size());
    check_batch_matches(spec, batch);
    auto [value, grad] = detail::loss_and_grad_core<double>(spec, params.values, batch, loss);
    ParamVector g;
    g.values = std::move(grad);
    g.layout = params.layout;
    return {value, std::move(g)};
}

// Gradient of the mean loss w.r.t. parameters given an externally supplied
// d(loss)/d(outputs) matrix (used by objectives that post-process network
// outputs, e.g. prototype softmax).
inline ParamVector backward_from_outputs(const NetworkSpec& spec, const ParamVector& params,
                                         const Batch& batch, const Matrix& out_grad) {
    check_params_match(spec, params.size());
    check_batch_matches(spec, batch);
    if (out_grad.rows != batch.size() || out_grad.cols != spec.out_dim())
        throw config_error("output gradient shape mismatch");
    ParamVector g = ParamVector{std::vector<double>(spec.param_count(), 0.0), params.layout};
    detail::Trace<double> trace;
    std::vector<double> rowg(spec.out_dim());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        detail::forward_row<double>(spec, params.values, batch.features.row(r), trace);
        for (std::size_t j = 0; j < spec.out_dim(); ++j) rowg[j] = out_grad.at(r, j);
        detail::backward_row<double>(spec, params.values, trace, rowg,
                                     std::span<double>(g.values));
    }
    return g;
}

// Exact Hessian-vector product of the batch loss at `params` with direction
// `v`, computed by running the reverse-mode pass over dual numbers
// (forward-over-reverse).
inline std::vector<double> hessian_vector_product(const NetworkSpec& spec,
                                                  const ParamVector& params, const Batch& batch,
                                                  const LossSpec& loss,
                                                  const std::vector<double>& v) {
    check_params_match(spec, params.size());
    if (v.size() != params.size()) throw config_error("hvp direction has wrong length");
    std::vector<Dual> dual(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) dual[i] = Dual(params.values[i], v[i]);
    auto [value, grad] = detail::loss_and_grad_core<Dual>(spec, dual, batch, loss);
    (void)value;
    std::vector<double> hv(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) hv[i] = grad[i].d;
    return hv;
}

// One gradient step: returned[i] = params[i] - step * grad[i].
inline ParamVector sgd_step(const ParamVector& params, const ParamVector& grad, double step) {
    if (params.size() != grad.size()) throw config_error("sgd_step: layout mismatch");
    ParamVector out = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!std::isfinite(grad.values[i]))
            throw numerical_error("non-finite gradient entry", i);
        out.values[i] = params.values[i] - step * grad.values[i];
    }
    return out;
}

// Central finite differences, per coordinate. Test oracle for the exact
// gradients; O(param_count) forward pairs.
inline ParamVector finite_diff_grad(const NetworkSpec& spec, const ParamVector& params,
                                    const Batch& batch, const LossSpec& loss, double step) {
    if (step <= 0.0) throw config_error("finite_diff_grad: step must be positive");
    check_params_match(spec, params.size());
    ParamVector g = params.zeros_like();
    ParamVector probe = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = probe.values[i];
        probe.values[i] = saved + step;
        const double up = detail::loss_and_grad_core<double>(spec, probe.values, batch, loss).first;
        probe.values[i] = saved - step;
        const double dn = detail::loss_and_grad_core<double>(spec, probe.values, batch, loss).first;
        probe.values[i] = saved;
        g.values[i] = (up - dn) / (2.0 * step);
    }
    return g;
}

}  // namespace metalab

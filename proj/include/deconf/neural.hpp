// Building blocks for the sequence models: GRU cells run in either time
// direction, small MLPs, diagonal-Gaussian output heads, and Adam. Parameters
// are plain tensors owned by the model structs; each training step binds them
// onto a fresh tape.
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deconf/rng.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

// Smallest admissible standard deviation for any Gaussian head. Applied on
// top of softplus so log-densities stay finite even for collapsed outputs.
inline constexpr double kSigmaFloor = 1e-4;

// Pre-activation value u with softplus(u) = y, for y > 0.
inline double softplus_inverse(double y) {
    if (!(y > 0.0)) throw std::invalid_argument("softplus_inverse: argument must be positive");
    return std::log(std::expm1(y));
}

// Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weight init.
inline Tensor init_weight(std::size_t rows, std::size_t cols, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    Tensor t = Tensor::zeros({rows, cols});
    for (double& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}

// ---- GRU ----

struct GruParams {
    std::size_t input_size = 0;
    std::size_t hidden_size = 0;
    Tensor Wr, Wz, Wh;  // hidden x input
    Tensor Ur, Uz, Uh;  // hidden x hidden
    Tensor br, bz, bh;  // hidden

    static GruParams init(std::size_t input_size, std::size_t hidden_size, Rng& rng) {
        GruParams p;
        p.input_size = input_size;
        p.hidden_size = hidden_size;
        p.Wr = init_weight(hidden_size, input_size, rng);
        p.Wz = init_weight(hidden_size, input_size, rng);
        p.Wh = init_weight(hidden_size, input_size, rng);
        p.Ur = init_weight(hidden_size, hidden_size, rng);
        p.Uz = init_weight(hidden_size, hidden_size, rng);
        p.Uh = init_weight(hidden_size, hidden_size, rng);
        p.br = Tensor::zeros({hidden_size});
        p.bz = Tensor::zeros({hidden_size});
        p.bh = Tensor::zeros({hidden_size});
        return p;
    }
};

template <class F>
void visit_params(GruParams& p, const std::string& prefix, F&& f) {
    f(prefix + "/Wr", p.Wr);
    f(prefix + "/Wz", p.Wz);
    f(prefix + "/Wh", p.Wh);
    f(prefix + "/Ur", p.Ur);
    f(prefix + "/Uz", p.Uz);
    f(prefix + "/Uh", p.Uh);
    f(prefix + "/br", p.br);
    f(prefix + "/bz", p.bz);
    f(prefix + "/bh", p.bh);
}

struct GruVars {
    std::size_t input_size = 0;
    std::size_t hidden_size = 0;
    Var Wr, Wz, Wh, Ur, Uz, Uh, br, bz, bh;
};

inline GruVars bind(Tape& tape, const GruParams& p, bool trainable) {
    const auto leaf = [&](const Tensor& t) {
        Tensor copy = t;
        copy.requires_grad = trainable;
        return tape.leaf(std::move(copy));
    };
    GruVars v;
    v.input_size = p.input_size;
    v.hidden_size = p.hidden_size;
    v.Wr = leaf(p.Wr);
    v.Wz = leaf(p.Wz);
    v.Wh = leaf(p.Wh);
    v.Ur = leaf(p.Ur);
    v.Uz = leaf(p.Uz);
    v.Uh = leaf(p.Uh);
    v.br = leaf(p.br);
    v.bz = leaf(p.bz);
    v.bh = leaf(p.bh);
    return v;
}

// One GRU transition: reset/update gates, candidate with the reset gate
// applied inside, convex combination with the previous state.
inline Var gru_step(const Var& x, const Var& h_prev, const GruVars& p) {
    if (x.shape() != Shape{p.input_size})
        throw std::invalid_argument("gru_step: input shape " + shape_str(x.shape()) +
                                    " does not match input_size " + std::to_string(p.input_size));
    if (h_prev.shape() != Shape{p.hidden_size})
        throw std::invalid_argument("gru_step: hidden shape " + shape_str(h_prev.shape()) +
                                    " does not match hidden_size " + std::to_string(p.hidden_size));
    Var r = sigmoid(add(add(matmul(p.Wr, x), matmul(p.Ur, h_prev)), p.br));
    Var u = sigmoid(add(add(matmul(p.Wz, x), matmul(p.Uz, h_prev)), p.bz));
    Var cand = tanh(add(add(matmul(p.Wh, x), matmul(p.Uh, mul(r, h_prev))), p.bh));
    return add(mul(add_const(neg(u), 1.0), h_prev), mul(u, cand));
}

enum class GruDirection { forward, reverse };

// Forward: h_t summarizes inputs[0..t]. Reverse: h_t summarizes
// inputs[t..T-1]; either way output index t aligns with input index t.
inline std::vector<Var> run_gru(const std::vector<Var>& inputs, const Var& h0, const GruVars& p,
                                GruDirection direction) {
    if (inputs.empty()) throw std::invalid_argument("run_gru: empty sequence");
    const std::size_t n = inputs.size();
    std::vector<Var> out(n);
    if (direction == GruDirection::forward) {
        Var h = h0;
        for (std::size_t t = 0; t < n; ++t) {
            h = gru_step(inputs[t], h, p);
            out[t] = h;
        }
    } else {
        Var g = h0;
        for (std::size_t t = n; t-- > 0;) {
            g = gru_step(inputs[t], g, p);
            out[t] = g;
        }
    }
    return out;
}

// ---- MLP ----

struct MlpParams {
    std::vector<std::size_t> sizes;  // input, hidden..., output
    std::vector<Tensor> weights;     // sizes[i+1] x sizes[i]
    std::vector<Tensor> biases;      // sizes[i+1]

    static MlpParams init(const std::vector<std::size_t>& sizes, Rng& rng) {
        if (sizes.size() < 2) throw std::invalid_argument("MlpParams: need at least input and output sizes");
        MlpParams p;
        p.sizes = sizes;
        for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
            p.weights.push_back(init_weight(sizes[i + 1], sizes[i], rng));
            p.biases.push_back(Tensor::zeros({sizes[i + 1]}));
        }
        return p;
    }

    std::size_t input_size() const { return sizes.front(); }
    std::size_t output_size() const { return sizes.back(); }
};

template <class F>
void visit_params(MlpParams& p, const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        f(prefix + "/layer" + std::to_string(i) + "/W", p.weights[i]);
        f(prefix + "/layer" + std::to_string(i) + "/b", p.biases[i]);
    }
}

struct MlpVars {
    std::vector<Var> weights, biases;
};

inline MlpVars bind(Tape& tape, const MlpParams& p, bool trainable) {
    MlpVars v;
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        Tensor w = p.weights[i];
        Tensor b = p.biases[i];
        w.requires_grad = trainable;
        b.requires_grad = trainable;
        v.weights.push_back(tape.leaf(std::move(w)));
        v.biases.push_back(tape.leaf(std::move(b)));
    }
    return v;
}

// tanh on hidden layers, linear output layer.
inline Var mlp_forward(const Var& x, const MlpVars& p) {
    Var h = x;
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        h = add(matmul(p.weights[i], h), p.biases[i]);
        if (i + 1 < p.weights.size()) h = tanh(h);
    }
    return h;
}

// ---- diagonal Gaussian head ----

struct GaussianHeadParams {
    MlpParams trunk;     // hidden layers only; empty weights means identity trunk
    Tensor mean_W, mean_b;
    Tensor sigma_W, sigma_b;

    // trunk_sizes: {input, hidden...}; the last entry feeds both output maps.
    static GaussianHeadParams init(const std::vector<std::size_t>& trunk_sizes, std::size_t out,
                                   Rng& rng) {
        if (trunk_sizes.empty()) throw std::invalid_argument("GaussianHeadParams: empty trunk sizes");
        GaussianHeadParams p;
        p.trunk.sizes = trunk_sizes;
        for (std::size_t i = 0; i + 1 < trunk_sizes.size(); ++i) {
            p.trunk.weights.push_back(init_weight(trunk_sizes[i + 1], trunk_sizes[i], rng));
            p.trunk.biases.push_back(Tensor::zeros({trunk_sizes[i + 1]}));
        }
        const std::size_t feat = trunk_sizes.back();
        p.mean_W = init_weight(out, feat, rng);
        p.mean_b = Tensor::zeros({out});
        p.sigma_W = init_weight(out, feat, rng);
        p.sigma_b = Tensor::zeros({out});
        return p;
    }

    std::size_t input_size() const { return trunk.sizes.front(); }
    std::size_t output_size() const { return mean_b.shape[0]; }
};

template <class F>
void visit_params(GaussianHeadParams& p, const std::string& prefix, F&& f) {
    visit_params(p.trunk, prefix + "/trunk", f);
    f(prefix + "/mean/W", p.mean_W);
    f(prefix + "/mean/b", p.mean_b);
    f(prefix + "/sigma/W", p.sigma_W);
    f(prefix + "/sigma/b", p.sigma_b);
}

struct GaussianHeadVars {
    MlpVars trunk;
    Var mean_W, mean_b, sigma_W, sigma_b;
};

inline GaussianHeadVars bind(Tape& tape, const GaussianHeadParams& p, bool trainable) {
    const auto leaf = [&](const Tensor& t) {
        Tensor copy = t;
        copy.requires_grad = trainable;
        return tape.leaf(std::move(copy));
    };
    GaussianHeadVars v;
    v.trunk = bind(tape, p.trunk, trainable);
    v.mean_W = leaf(p.mean_W);
    v.mean_b = leaf(p.mean_b);
    v.sigma_W = leaf(p.sigma_W);
    v.sigma_b = leaf(p.sigma_b);
    return v;
}

struct GaussianOutput {
    Var mean;
    Var sigma;  // strictly positive: softplus(pre-sigma) + kSigmaFloor
};

inline GaussianOutput gaussian_head_forward(const Var& input, const GaussianHeadVars& head) {
    Var feat = input;
    for (std::size_t i = 0; i < head.trunk.weights.size(); ++i)
        feat = tanh(add(matmul(head.trunk.weights[i], feat), head.trunk.biases[i]));
    GaussianOutput out;
    out.mean = add(matmul(head.mean_W, feat), head.mean_b);
    out.sigma = add_const(softplus(add(matmul(head.sigma_W, feat), head.sigma_b)), kSigmaFloor);
    return out;
}

// Sum over coordinates of log N(x_i; mu_i, sigma_i^2).
inline Var diag_gaussian_logpdf(const Var& x, const Var& mu, const Var& sigma) {
    constexpr double half_log_two_pi = 0.91893853320467274178;  // 0.5*log(2*pi)
    Var zscore = div(sub(x, mu), sigma);
    Var quad = scale(sum(mul(zscore, zscore)), -0.5);
    Var logdet = neg(sum(log(sigma)));
    const double n = static_cast<double>(numel(x.shape()));
    return add_const(add(quad, logdet), -half_log_two_pi * n);
}

// ---- Adam ----

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Named reference to a parameter tensor owned by some model struct.
struct ParamRef {
    std::string name;
    Tensor* tensor = nullptr;
};

// Collects ParamRefs through the visit_params overloads.
template <class Model>
std::vector<ParamRef> collect_params(Model& model, const std::string& prefix) {
    std::vector<ParamRef> refs;
    visit_params(model, prefix, [&](const std::string& name, Tensor& t) {
        refs.push_back({name, &t});
    });
    return refs;
}

struct AdamState {
    long step = 0;
    std::vector<Tensor> m, v;  // aligned with the ParamRef list

    static AdamState for_params(const std::vector<ParamRef>& params) {
        AdamState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const ParamRef& p : params) {
            s.m.push_back(Tensor::zeros(p.tensor->shape));
            s.v.push_back(Tensor::zeros(p.tensor->shape));
        }
        return s;
    }
};

// Standard bias-corrected Adam update, in place. `grads` is aligned with
// `params`; a missing gradient (empty tensor) is treated as zero.
inline void adam_step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
                      AdamState& state, const AdamConfig& cfg) {
    if (params.size() != grads.size())
        throw std::invalid_argument("adam_step: params/grads size mismatch");
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: state not sized for params");
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i].tensor;
        if (grads[i].data.empty()) continue;
        if (grads[i].shape != p.shape)
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + params[i].name);
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = grads[i].data[j];
            if (std::isnan(g))
                throw std::runtime_error("adam_step: NaN gradient for parameter " + params[i].name);
            double& m = state.m[i].data[j];
            double& v = state.v[i].data[j];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p.data[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

// Convenience for pulling a gradient list aligned with bound tape leaves.
inline std::vector<Tensor> gather_grads(const GradientMap& grads, const std::vector<Var>& leaves) {
    std::vector<Tensor> out;
    out.reserve(leaves.size());
    for (const Var& v : leaves) {
        auto it = grads.find(v.id());
        out.push_back(it == grads.end() ? Tensor() : it->second);
    }
    return out;
}

}  // namespace deconf

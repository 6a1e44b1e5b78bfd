// Temporal causal VAE over a (x, y, proxies) bundle: a linear Gaussian
// state-space prior on the latent confounder z, GRU-driven Gaussian emission
// heads for x, p, y, and a reverse-GRU inference network producing the
// smoothing posterior q(z_t | z_{t-1}, futures). Training maximizes the
// Monte-Carlo ELBO over stride-1 sliding windows with recurrent state and
// z-sample carryover between adjacent windows.
//
// Parameter-level operations (prior_logpdf, generate_logpdf, infer_posterior,
// posterior_logpdf) evaluate the data exactly as given. Model-level
// operations (train, elbo, estimate_confounder) standardize each observed
// series with statistics stored in the model, so checkpoints are
// self-contained.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "deconf/checkpoint.hpp"
#include "deconf/neural.hpp"
#include "deconf/rng.hpp"
#include "deconf/synthdata.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

struct TcvaeConfig {
    std::size_t d_z = 1;
    std::size_t d_p = 2;  // overwritten from the bundle when training
    std::size_t latent_hidden = 16;
    std::size_t reverse_hidden = 16;
    std::size_t combiner_hidden = 32;
    std::size_t head_hidden = 32;
    bool instantaneous = false;  // heads read h_t instead of h_{t-1}
    bool standard_normal_prior = false;
    bool freeze_emissions = false;

    std::size_t window = 0;  // 0 means whole-sequence windows
    std::size_t epochs = 100;
    std::size_t mc_samples = 1;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

// ---- parameter blocks ----

struct PriorParams {
    Tensor transition;   // d_z x d_z
    Tensor observation;  // d_z x d_z
    Tensor trans_noise_pre;  // d_z, std = softplus(pre) + floor
    Tensor obs_noise_pre;    // d_z

    static PriorParams init(std::size_t d_z) {
        PriorParams p;
        p.transition = Tensor::zeros({d_z, d_z});
        p.observation = Tensor::zeros({d_z, d_z});
        for (std::size_t i = 0; i < d_z; ++i) {
            p.transition.data[i * d_z + i] = 1.0;
            p.observation.data[i * d_z + i] = 1.0;
        }
        const double pre_unit = softplus_inverse(1.0 - kSigmaFloor);
        p.trans_noise_pre = Tensor::zeros({d_z});
        p.obs_noise_pre = Tensor::zeros({d_z});
        for (double& v : p.trans_noise_pre.data) v = pre_unit;
        for (double& v : p.obs_noise_pre.data) v = pre_unit;
        return p;
    }

    std::size_t dim() const { return transition.shape.empty() ? 0 : transition.shape[0]; }
};

template <class F>
void visit_params(PriorParams& p, const std::string& prefix, F&& f) {
    f(prefix + "/transition", p.transition);
    f(prefix + "/observation", p.observation);
    f(prefix + "/trans_noise", p.trans_noise_pre);
    f(prefix + "/obs_noise", p.obs_noise_pre);
}

struct GenerativeParams {
    PriorParams prior;
    GruParams latent_gru;  // consumes z_t, carries h^z
    GruParams cause_gru;   // consumes x_t, carries h^x
    GaussianHeadParams head_x;  // (x_{t-1}, h^z) -> x_t
    GaussianHeadParams head_p;  // (p_{t-1}, h^z) -> p_t
    GaussianHeadParams head_y;  // (y_{t-1}, h^z, h^x) -> y_t

    static GenerativeParams init(const TcvaeConfig& cfg, Rng& rng) {
        GenerativeParams g;
        g.prior = PriorParams::init(cfg.d_z);
        g.latent_gru = GruParams::init(cfg.d_z, cfg.latent_hidden, rng);
        g.cause_gru = GruParams::init(1, cfg.latent_hidden, rng);
        g.head_x = GaussianHeadParams::init({1 + cfg.latent_hidden, cfg.head_hidden}, 1, rng);
        g.head_p =
            GaussianHeadParams::init({cfg.d_p + cfg.latent_hidden, cfg.head_hidden}, cfg.d_p, rng);
        g.head_y =
            GaussianHeadParams::init({1 + 2 * cfg.latent_hidden, cfg.head_hidden}, 1, rng);
        return g;
    }
};

template <class F>
void visit_params(GenerativeParams& g, const std::string& prefix, F&& f) {
    visit_params(g.prior, prefix + "/prior", f);
    visit_params(g.latent_gru, prefix + "/latent_gru", f);
    visit_params(g.cause_gru, prefix + "/cause_gru", f);
    visit_params(g.head_x, prefix + "/head_x", f);
    visit_params(g.head_p, prefix + "/head_p", f);
    visit_params(g.head_y, prefix + "/head_y", f);
}

struct InferenceParams {
    GruParams rev_p, rev_x, rev_y;  // reverse direction, g_t covers [t, T)
    MlpParams combiner;             // merges (g^x, g^p, g^y)
    GaussianHeadParams head_z;      // (z_{t-1}, combiner out) -> q(z_t)

    static InferenceParams init(const TcvaeConfig& cfg, Rng& rng) {
        InferenceParams q;
        q.rev_p = GruParams::init(cfg.d_p, cfg.reverse_hidden, rng);
        q.rev_x = GruParams::init(1, cfg.reverse_hidden, rng);
        q.rev_y = GruParams::init(1, cfg.reverse_hidden, rng);
        q.combiner = MlpParams::init(
            {3 * cfg.reverse_hidden, cfg.combiner_hidden, cfg.combiner_hidden}, rng);
        q.head_z = GaussianHeadParams::init({cfg.d_z + cfg.combiner_hidden, cfg.head_hidden},
                                            cfg.d_z, rng);
        return q;
    }
};

template <class F>
void visit_params(InferenceParams& q, const std::string& prefix, F&& f) {
    visit_params(q.rev_p, prefix + "/rev_p", f);
    visit_params(q.rev_x, prefix + "/rev_x", f);
    visit_params(q.rev_y, prefix + "/rev_y", f);
    visit_params(q.combiner, prefix + "/combiner", f);
    visit_params(q.head_z, prefix + "/head_z", f);
}

// Per-series shift/scale applied before training; kept with the model so
// later evaluations see the same coordinates.
struct Standardization {
    Tensor x_stats{Tensor::zeros({2})};  // mean, sd
    Tensor y_stats{Tensor::zeros({2})};
    Tensor p_mean, p_sd;  // d_p each

    Standardization() {
        x_stats.data = {0.0, 1.0};
        y_stats.data = {0.0, 1.0};
    }
};

template <class F>
void visit_params(Standardization& s, const std::string& prefix, F&& f) {
    f(prefix + "/x", s.x_stats);
    f(prefix + "/y", s.y_stats);
    f(prefix + "/p_mean", s.p_mean);
    f(prefix + "/p_sd", s.p_sd);
}

struct TcvaeModel {
    TcvaeConfig config;
    GenerativeParams gen;
    InferenceParams inf;
    Standardization standardization;

    static TcvaeModel init(const TcvaeConfig& cfg, Rng& rng) {
        if (cfg.d_z < 1) throw std::invalid_argument("TcvaeModel: d_z must be at least 1");
        if (cfg.d_p < 1) throw std::invalid_argument("TcvaeModel: d_p must be at least 1");
        TcvaeModel m;
        m.config = cfg;
        m.gen = GenerativeParams::init(cfg, rng);
        m.inf = InferenceParams::init(cfg, rng);
        m.standardization.p_mean = Tensor::zeros({cfg.d_p});
        m.standardization.p_sd = Tensor::zeros({cfg.d_p});
        for (double& v : m.standardization.p_sd.data) v = 1.0;
        return m;
    }
};

template <class F>
void visit_params(TcvaeModel& m, F&& f) {
    visit_params(m.gen, "gen", f);
    visit_params(m.inf, "inf", f);
}

namespace detail {

inline Standardization compute_standardization(const TimeSeriesBundle& b) {
    const auto stats = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        double sd = std::sqrt(var / static_cast<double>(v.size()));
        if (sd == 0.0) sd = 1.0;
        return std::pair<double, double>{mean, sd};
    };
    Standardization s;
    auto [xm, xs] = stats(b.x);
    auto [ym, ys] = stats(b.y);
    s.x_stats.data = {xm, xs};
    s.y_stats.data = {ym, ys};
    const std::size_t d_p = b.proxy_dim();
    s.p_mean = Tensor::zeros({d_p});
    s.p_sd = Tensor::zeros({d_p});
    for (std::size_t j = 0; j < d_p; ++j) {
        std::vector<double> col(b.length);
        for (std::size_t t = 0; t < b.length; ++t) col[t] = b.p.data[t * d_p + j];
        auto [m, sd] = stats(col);
        s.p_mean.data[j] = m;
        s.p_sd.data[j] = sd;
    }
    return s;
}

struct SeriesData {
    std::vector<double> x, y;
    Tensor p;  // T x d_p
};

inline SeriesData apply_standardization(const TimeSeriesBundle& b, const Standardization& s) {
    SeriesData d;
    d.x.resize(b.length);
    d.y.resize(b.length);
    for (std::size_t t = 0; t < b.length; ++t) {
        d.x[t] = (b.x[t] - s.x_stats.data[0]) / s.x_stats.data[1];
        d.y[t] = (b.y[t] - s.y_stats.data[0]) / s.y_stats.data[1];
    }
    const std::size_t d_p = b.proxy_dim();
    d.p = Tensor::zeros({b.length, d_p});
    for (std::size_t t = 0; t < b.length; ++t)
        for (std::size_t j = 0; j < d_p; ++j)
            d.p.data[t * d_p + j] = (b.p.data[t * d_p + j] - s.p_mean.data[j]) / s.p_sd.data[j];
    return d;
}

inline SeriesData raw_series(const TimeSeriesBundle& b) {
    SeriesData d;
    d.x = b.x;
    d.y = b.y;
    d.p = b.p;
    return d;
}

// ---- bound parameter graph ----

struct PriorVars {
    Var transition, observation, trans_noise_pre, obs_noise_pre;
};

struct GenVars {
    PriorVars prior;
    GruVars latent_gru, cause_gru;
    GaussianHeadVars head_x, head_p, head_y;
};

struct InfVars {
    GruVars rev_p, rev_x, rev_y;
    MlpVars combiner;
    GaussianHeadVars head_z;
};

struct BoundModel {
    GenVars gen;
    InfVars inf;
    std::vector<ParamRef> refs;  // trainable tensors, bind order
    std::vector<Var> leaves;     // aligned with refs
};

class ModelBinder {
  public:
    ModelBinder(Tape& tape, BoundModel& out) : tape_(tape), out_(out) {}

    Var leaf(const std::string& name, Tensor& t, bool trainable) {
        Tensor copy = t;
        copy.requires_grad = trainable;
        Var v = tape_.leaf(std::move(copy));
        if (trainable) {
            out_.refs.push_back({name, &t});
            out_.leaves.push_back(v);
        }
        return v;
    }

    GruVars gru(const std::string& prefix, GruParams& p, bool trainable) {
        GruVars v;
        v.input_size = p.input_size;
        v.hidden_size = p.hidden_size;
        v.Wr = leaf(prefix + "/Wr", p.Wr, trainable);
        v.Wz = leaf(prefix + "/Wz", p.Wz, trainable);
        v.Wh = leaf(prefix + "/Wh", p.Wh, trainable);
        v.Ur = leaf(prefix + "/Ur", p.Ur, trainable);
        v.Uz = leaf(prefix + "/Uz", p.Uz, trainable);
        v.Uh = leaf(prefix + "/Uh", p.Uh, trainable);
        v.br = leaf(prefix + "/br", p.br, trainable);
        v.bz = leaf(prefix + "/bz", p.bz, trainable);
        v.bh = leaf(prefix + "/bh", p.bh, trainable);
        return v;
    }

    MlpVars mlp(const std::string& prefix, MlpParams& p, bool trainable) {
        MlpVars v;
        for (std::size_t i = 0; i < p.weights.size(); ++i) {
            v.weights.push_back(
                leaf(prefix + "/layer" + std::to_string(i) + "/W", p.weights[i], trainable));
            v.biases.push_back(
                leaf(prefix + "/layer" + std::to_string(i) + "/b", p.biases[i], trainable));
        }
        return v;
    }

    GaussianHeadVars head(const std::string& prefix, GaussianHeadParams& p, bool trainable) {
        GaussianHeadVars v;
        v.trunk = mlp(prefix + "/trunk", p.trunk, trainable);
        v.mean_W = leaf(prefix + "/mean/W", p.mean_W, trainable);
        v.mean_b = leaf(prefix + "/mean/b", p.mean_b, trainable);
        v.sigma_W = leaf(prefix + "/sigma/W", p.sigma_W, trainable);
        v.sigma_b = leaf(prefix + "/sigma/b", p.sigma_b, trainable);
        return v;
    }

  private:
    Tape& tape_;
    BoundModel& out_;
};

inline BoundModel bind_model(Tape& tape, TcvaeModel& m, bool train_mode) {
    BoundModel bm;
    ModelBinder b(tape, bm);
    const bool heads_trainable = train_mode && !m.config.freeze_emissions;
    bm.gen.prior.transition = b.leaf("gen/prior/transition", m.gen.prior.transition, train_mode);
    bm.gen.prior.observation = b.leaf("gen/prior/observation", m.gen.prior.observation, train_mode);
    bm.gen.prior.trans_noise_pre =
        b.leaf("gen/prior/trans_noise", m.gen.prior.trans_noise_pre, train_mode);
    bm.gen.prior.obs_noise_pre =
        b.leaf("gen/prior/obs_noise", m.gen.prior.obs_noise_pre, train_mode);
    bm.gen.latent_gru = b.gru("gen/latent_gru", m.gen.latent_gru, train_mode);
    bm.gen.cause_gru = b.gru("gen/cause_gru", m.gen.cause_gru, train_mode);
    bm.gen.head_x = b.head("gen/head_x", m.gen.head_x, heads_trainable);
    bm.gen.head_p = b.head("gen/head_p", m.gen.head_p, heads_trainable);
    bm.gen.head_y = b.head("gen/head_y", m.gen.head_y, heads_trainable);
    bm.inf.rev_p = b.gru("inf/rev_p", m.inf.rev_p, train_mode);
    bm.inf.rev_x = b.gru("inf/rev_x", m.inf.rev_x, train_mode);
    bm.inf.rev_y = b.gru("inf/rev_y", m.inf.rev_y, train_mode);
    bm.inf.combiner = b.mlp("inf/combiner", m.inf.combiner, train_mode);
    bm.inf.head_z = b.head("inf/head_z", m.inf.head_z, train_mode);
    return bm;
}

// ---- LGSSM prior on the tape ----
// Step covariance Sigma = O diag(sv^2) O^T + diag(se^2) is constant over
// time, so its Cholesky factor is built once per tape from scalar slices and
// reused by every transition term.

inline Var sqrt_positive(const Var& s) { return exp(scale(log(s), 0.5)); }

struct PriorStepVars {
    std::size_t d = 0;
    Var mean_matrix;             // O * T
    std::vector<Var> chol;       // d*d, lower triangle filled
    Var sum_log_diag;
};

inline PriorStepVars build_prior_step(const PriorVars& p, std::size_t d) {
    PriorStepVars out;
    out.d = d;
    out.mean_matrix = matmul(p.observation, p.transition);

    Var sv = add_const(softplus(p.trans_noise_pre), kSigmaFloor);
    Var se = add_const(softplus(p.obs_noise_pre), kSigmaFloor);
    Var v2 = mul(sv, sv);
    Var e2 = mul(se, se);

    std::vector<Var> rows(d);
    for (std::size_t i = 0; i < d; ++i) rows[i] = slice(p.observation, i, 1);

    std::vector<Var> sigma(d * d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            Var cell = sum(mul(mul(rows[i], rows[j]), v2));
            if (i == j) cell = add(cell, sum(slice(e2, i, 1)));
            sigma[i * d + j] = cell;
        }

    out.chol.resize(d * d);
    for (std::size_t j = 0; j < d; ++j) {
        Var diag = sigma[j * d + j];
        for (std::size_t m = 0; m < j; ++m)
            diag = sub(diag, mul(out.chol[j * d + m], out.chol[j * d + m]));
        out.chol[j * d + j] = sqrt_positive(diag);
        for (std::size_t i = j + 1; i < d; ++i) {
            Var v = sigma[i * d + j];
            for (std::size_t m = 0; m < j; ++m)
                v = sub(v, mul(out.chol[i * d + m], out.chol[j * d + m]));
            out.chol[i * d + j] = div(v, out.chol[j * d + j]);
        }
    }
    out.sum_log_diag = log(out.chol[0]);
    for (std::size_t i = 1; i < d; ++i)
        out.sum_log_diag = add(out.sum_log_diag, log(out.chol[i * d + i]));
    return out;
}

inline Var prior_step_logpdf(const PriorStepVars& s, const Var& z_prev, const Var& z_t) {
    constexpr double half_log_two_pi = 0.91893853320467274178;
    const std::size_t d = s.d;
    Var r = sub(z_t, matmul(s.mean_matrix, z_prev));
    std::vector<Var> w(d);
    Var quad = Var{};
    for (std::size_t i = 0; i < d; ++i) {
        Var v = sum(slice(r, i, 1));
        for (std::size_t m = 0; m < i; ++m) v = sub(v, mul(s.chol[i * d + m], w[m]));
        w[i] = div(v, s.chol[i * d + i]);
        Var sq = mul(w[i], w[i]);
        quad = i == 0 ? sq : add(quad, sq);
    }
    return add_const(sub(scale(quad, -0.5), s.sum_log_diag),
                     -half_log_two_pi * static_cast<double>(d));
}

// ---- inference graph pieces ----

inline std::vector<Var> combiner_path(Tape& tape, const InfVars& q, const SeriesData& data,
                                      std::size_t start, std::size_t len) {
    const std::size_t d_p = data.p.shape[1];
    const std::size_t hid = q.rev_p.hidden_size;
    std::vector<Var> in_p(len), in_x(len), in_y(len);
    for (std::size_t t = 0; t < len; ++t) {
        Tensor row = Tensor::zeros({d_p});
        for (std::size_t j = 0; j < d_p; ++j) row.data[j] = data.p.data[(start + t) * d_p + j];
        in_p[t] = tape.constant(std::move(row));
        Tensor xv = Tensor::zeros({1});
        xv.data[0] = data.x[start + t];
        in_x[t] = tape.constant(std::move(xv));
        Tensor yv = Tensor::zeros({1});
        yv.data[0] = data.y[start + t];
        in_y[t] = tape.constant(std::move(yv));
    }
    Var g0 = tape.constant(Tensor::zeros({hid}));
    std::vector<Var> g_p = run_gru(in_p, g0, q.rev_p, GruDirection::reverse);
    std::vector<Var> g_x = run_gru(in_x, g0, q.rev_x, GruDirection::reverse);
    std::vector<Var> g_y = run_gru(in_y, g0, q.rev_y, GruDirection::reverse);
    std::vector<Var> comb(len);
    for (std::size_t t = 0; t < len; ++t)
        comb[t] = mlp_forward(concat({g_x[t], g_p[t], g_y[t]}), q.combiner);
    return comb;
}

// ---- ELBO over one window ----

struct CarryState {
    Tensor z_prev;  // d_z
    Tensor h_z;     // latent_hidden
    Tensor h_x;     // latent_hidden
};

inline CarryState zero_carry(const TcvaeConfig& cfg) {
    CarryState c;
    c.z_prev = Tensor::zeros({cfg.d_z});
    c.h_z = Tensor::zeros({cfg.latent_hidden});
    c.h_x = Tensor::zeros({cfg.latent_hidden});
    return c;
}

struct ElboVars {
    Var elbo, recon_x, recon_p, recon_y, log_prior, log_q;
};

inline void check_term(const Var& v, const char* name) {
    if (!std::isfinite(v.value().item()))
        throw std::runtime_error(std::string("elbo: non-finite ") + name + " term");
}

inline ElboVars elbo_window(Tape& tape, const BoundModel& bm, const TcvaeConfig& cfg,
                            const SeriesData& data, std::size_t start, std::size_t len,
                            const CarryState& carry, std::size_t n_samples, Rng& rng,
                            CarryState* carry_out) {
    if (len == 0) throw std::invalid_argument("elbo_window: empty window");
    if (n_samples < 1) throw std::invalid_argument("elbo_window: need at least one sample");
    const std::size_t d_p = data.p.shape[1];
    const std::size_t d_z = cfg.d_z;

    std::vector<Var> comb = combiner_path(tape, bm.inf, data, start, len);

    PriorStepVars prior_step{};
    if (!cfg.standard_normal_prior) prior_step = build_prior_step(bm.gen.prior, d_z);
    Var std_zero = tape.constant(Tensor::zeros({d_z}));
    Tensor ones = Tensor::zeros({d_z});
    for (double& v : ones.data) v = 1.0;
    Var std_one = tape.constant(std::move(ones));

    const auto value_rows = [&](std::size_t t_abs) {
        Tensor xv = Tensor::zeros({1}), yv = Tensor::zeros({1}), pv = Tensor::zeros({d_p});
        if (t_abs > 0) {
            xv.data[0] = data.x[t_abs - 1];
            yv.data[0] = data.y[t_abs - 1];
            for (std::size_t j = 0; j < d_p; ++j) pv.data[j] = data.p.data[(t_abs - 1) * d_p + j];
        }
        return std::tuple<Tensor, Tensor, Tensor>{xv, yv, pv};
    };

    // the exact prefix state of the cause GRU comes in through the carry
    std::vector<Var> h_x_states(len);
    {
        Var h = tape.constant(carry.h_x);
        for (std::size_t t = 0; t < len; ++t) {
            Tensor xv = Tensor::zeros({1});
            xv.data[0] = data.x[start + t];
            h = gru_step(tape.constant(std::move(xv)), h, bm.gen.cause_gru);
            h_x_states[t] = h;
        }
    }

    Var recon_x{}, recon_p{}, recon_y{}, log_prior{}, log_q{};
    bool first = true;
    for (std::size_t l = 0; l < n_samples; ++l) {
        Var z_prev = tape.constant(carry.z_prev);
        Var h_z = tape.constant(carry.h_z);
        Var s_recon_x{}, s_recon_p{}, s_recon_y{}, s_prior{}, s_q{};
        for (std::size_t t = 0; t < len; ++t) {
            GaussianOutput qz =
                gaussian_head_forward(concat({z_prev, comb[t]}), bm.inf.head_z);
            Tensor xi = Tensor::zeros({d_z});
            for (double& v : xi.data) v = rng.normal();
            Var z_t = add(qz.mean, mul(qz.sigma, tape.constant(std::move(xi))));

            Var lq = diag_gaussian_logpdf(z_t, qz.mean, qz.sigma);
            Var lp = cfg.standard_normal_prior
                         ? diag_gaussian_logpdf(z_t, std_zero, std_one)
                         : prior_step_logpdf(prior_step, z_prev, z_t);

            Var h_z_next = gru_step(z_t, h_z, bm.gen.latent_gru);
            Var h_for_heads = cfg.instantaneous ? h_z_next : h_z;
            Var h_x_for_y = cfg.instantaneous
                                ? h_x_states[t]
                                : (t == 0 ? tape.constant(carry.h_x) : h_x_states[t - 1]);

            auto [xv, yv, pv] = value_rows(start + t);
            Var x_prev = tape.constant(std::move(xv));
            Var y_prev = tape.constant(std::move(yv));
            Var p_prev = tape.constant(std::move(pv));

            Tensor x_now = Tensor::zeros({1}), y_now = Tensor::zeros({1}),
                   p_now = Tensor::zeros({d_p});
            x_now.data[0] = data.x[start + t];
            y_now.data[0] = data.y[start + t];
            for (std::size_t j = 0; j < d_p; ++j) p_now.data[j] = data.p.data[(start + t) * d_p + j];

            GaussianOutput ox = gaussian_head_forward(concat({x_prev, h_for_heads}), bm.gen.head_x);
            GaussianOutput op = gaussian_head_forward(concat({p_prev, h_for_heads}), bm.gen.head_p);
            GaussianOutput oy = gaussian_head_forward(concat({y_prev, h_for_heads, h_x_for_y}),
                                                      bm.gen.head_y);
            Var lx = diag_gaussian_logpdf(tape.constant(std::move(x_now)), ox.mean, ox.sigma);
            Var lpp = diag_gaussian_logpdf(tape.constant(std::move(p_now)), op.mean, op.sigma);
            Var ly = diag_gaussian_logpdf(tape.constant(std::move(y_now)), oy.mean, oy.sigma);

            s_recon_x = t == 0 ? lx : add(s_recon_x, lx);
            s_recon_p = t == 0 ? lpp : add(s_recon_p, lpp);
            s_recon_y = t == 0 ? ly : add(s_recon_y, ly);
            s_prior = t == 0 ? lp : add(s_prior, lp);
            s_q = t == 0 ? lq : add(s_q, lq);

            if (l + 1 == n_samples && t == 0 && carry_out) {
                carry_out->z_prev = z_t.value();
                carry_out->h_z = h_z_next.value();
                carry_out->h_x = h_x_states[0].value();
            }
            z_prev = z_t;
            h_z = h_z_next;
        }
        recon_x = first ? s_recon_x : add(recon_x, s_recon_x);
        recon_p = first ? s_recon_p : add(recon_p, s_recon_p);
        recon_y = first ? s_recon_y : add(recon_y, s_recon_y);
        log_prior = first ? s_prior : add(log_prior, s_prior);
        log_q = first ? s_q : add(log_q, s_q);
        first = false;
    }
    const double inv = 1.0 / static_cast<double>(n_samples);
    ElboVars out;
    out.recon_x = scale(recon_x, inv);
    out.recon_p = scale(recon_p, inv);
    out.recon_y = scale(recon_y, inv);
    out.log_prior = scale(log_prior, inv);
    out.log_q = scale(log_q, inv);
    check_term(out.recon_x, "recon_x");
    check_term(out.recon_p, "recon_p");
    check_term(out.recon_y, "recon_y");
    check_term(out.log_prior, "prior");
    check_term(out.log_q, "entropy");
    out.elbo = add(add(add(out.recon_x, out.recon_p), out.recon_y),
                   sub(out.log_prior, out.log_q));
    return out;
}

}  // namespace detail

// ---- parameter-level operations ----

// Sum over t of log N(z_t; O T z_{t-1}, O diag(sv^2) O^T + diag(se^2)),
// starting from z_0 = 0.
inline double prior_logpdf(const Tensor& z_path, PriorParams& prior) {
    if (z_path.rank() != 2 || z_path.shape[1] != prior.dim())
        throw std::invalid_argument("prior_logpdf: path shape " + shape_str(z_path.shape) +
                                    " does not match prior dimension " +
                                    std::to_string(prior.dim()));
    if (z_path.shape[0] < 1) throw std::invalid_argument("prior_logpdf: empty path");
    const std::size_t T = z_path.shape[0], d = prior.dim();

    Tape tape;
    detail::BoundModel bm;
    detail::ModelBinder binder(tape, bm);
    detail::PriorVars pv;
    pv.transition = binder.leaf("transition", prior.transition, false);
    pv.observation = binder.leaf("observation", prior.observation, false);
    pv.trans_noise_pre = binder.leaf("trans_noise", prior.trans_noise_pre, false);
    pv.obs_noise_pre = binder.leaf("obs_noise", prior.obs_noise_pre, false);
    detail::PriorStepVars step = detail::build_prior_step(pv, d);

    Var z_prev = tape.constant(Tensor::zeros({d}));
    Var total{};
    for (std::size_t t = 0; t < T; ++t) {
        Tensor row = Tensor::zeros({d});
        for (std::size_t j = 0; j < d; ++j) row.data[j] = z_path.data[t * d + j];
        Var z_t = tape.constant(std::move(row));
        Var lp = detail::prior_step_logpdf(step, z_prev, z_t);
        total = t == 0 ? lp : add(total, lp);
        z_prev = z_t;
    }
    const double v = total.value().item();
    if (!std::isfinite(v)) throw std::runtime_error("prior_logpdf: non-finite result");
    return v;
}

struct GenerateLogpdf {
    double x = 0.0, p = 0.0, y = 0.0;
};

// Log-likelihood factors of the observed bundle given a latent path,
// evaluated on the data exactly as passed.
inline GenerateLogpdf generate_logpdf(const TimeSeriesBundle& bundle, const Tensor& z_path,
                                      TcvaeModel& model) {
    const TcvaeConfig& cfg = model.config;
    if (z_path.rank() != 2 || z_path.shape[0] != bundle.length || z_path.shape[1] != cfg.d_z)
        throw std::invalid_argument("generate_logpdf: z path shape " + shape_str(z_path.shape) +
                                    " does not match bundle length " +
                                    std::to_string(bundle.length) + " and d_z " +
                                    std::to_string(cfg.d_z));
    if (bundle.proxy_dim() != cfg.d_p)
        throw std::invalid_argument("generate_logpdf: bundle has " +
                                    std::to_string(bundle.proxy_dim()) + " proxies, model expects " +
                                    std::to_string(cfg.d_p));
    const std::size_t T = bundle.length, d_p = cfg.d_p, d_z = cfg.d_z;

    Tape tape;
    detail::BoundModel bm = detail::bind_model(tape, model, false);
    detail::SeriesData data = detail::raw_series(bundle);

    std::vector<Var> h_x_states(T);
    {
        Var h = tape.constant(Tensor::zeros({cfg.latent_hidden}));
        for (std::size_t t = 0; t < T; ++t) {
            Tensor xv = Tensor::zeros({1});
            xv.data[0] = data.x[t];
            h = gru_step(tape.constant(std::move(xv)), h, bm.gen.cause_gru);
            h_x_states[t] = h;
        }
    }

    Var h_z = tape.constant(Tensor::zeros({cfg.latent_hidden}));
    Var lx{}, lp{}, ly{};
    for (std::size_t t = 0; t < T; ++t) {
        Tensor zrow = Tensor::zeros({d_z});
        for (std::size_t j = 0; j < d_z; ++j) zrow.data[j] = z_path.data[t * d_z + j];
        Var z_t = tape.constant(std::move(zrow));
        Var h_z_next = gru_step(z_t, h_z, bm.gen.latent_gru);
        Var h_for_heads = cfg.instantaneous ? h_z_next : h_z;
        Var h_x_for_y = cfg.instantaneous
                            ? h_x_states[t]
                            : (t == 0 ? tape.constant(Tensor::zeros({cfg.latent_hidden}))
                                      : h_x_states[t - 1]);

        Tensor xprev = Tensor::zeros({1}), yprev = Tensor::zeros({1}), pprev = Tensor::zeros({d_p});
        if (t > 0) {
            xprev.data[0] = data.x[t - 1];
            yprev.data[0] = data.y[t - 1];
            for (std::size_t j = 0; j < d_p; ++j) pprev.data[j] = data.p.data[(t - 1) * d_p + j];
        }
        Tensor xnow = Tensor::zeros({1}), ynow = Tensor::zeros({1}), pnow = Tensor::zeros({d_p});
        xnow.data[0] = data.x[t];
        ynow.data[0] = data.y[t];
        for (std::size_t j = 0; j < d_p; ++j) pnow.data[j] = data.p.data[t * d_p + j];

        GaussianOutput ox = gaussian_head_forward(
            concat({tape.constant(std::move(xprev)), h_for_heads}), bm.gen.head_x);
        GaussianOutput op = gaussian_head_forward(
            concat({tape.constant(std::move(pprev)), h_for_heads}), bm.gen.head_p);
        GaussianOutput oy = gaussian_head_forward(
            concat({tape.constant(std::move(yprev)), h_for_heads, h_x_for_y}), bm.gen.head_y);

        Var tx = diag_gaussian_logpdf(tape.constant(std::move(xnow)), ox.mean, ox.sigma);
        Var tp = diag_gaussian_logpdf(tape.constant(std::move(pnow)), op.mean, op.sigma);
        Var ty = diag_gaussian_logpdf(tape.constant(std::move(ynow)), oy.mean, oy.sigma);
        lx = t == 0 ? tx : add(lx, tx);
        lp = t == 0 ? tp : add(lp, tp);
        ly = t == 0 ? ty : add(ly, ty);
        h_z = h_z_next;
    }
    GenerateLogpdf out;
    out.x = lx.value().item();
    out.p = lp.value().item();
    out.y = ly.value().item();
    if (!std::isfinite(out.x) || !std::isfinite(out.p) || !std::isfinite(out.y))
        throw std::runtime_error("generate_logpdf: non-finite result");
    return out;
}

struct PosteriorPath {
    Tensor mean;   // T x d_z, deterministic mean propagation
    Tensor sigma;  // T x d_z, stds along the mean path
    std::vector<Tensor> samples;  // n_samples ancestral draws, each T x d_z
};

// Smoothing posterior over the latent path. The mean path feeds each step's
// posterior mean back in as z_{t-1}; samples are ancestral reparameterized
// draws. z0 overrides the zero initial latent when a window is being
// continued from carried state.
inline PosteriorPath infer_posterior(const TimeSeriesBundle& bundle, InferenceParams& inf,
                                     std::size_t n_samples, Rng& rng,
                                     const Tensor* z0 = nullptr) {
    const std::size_t T = bundle.length;
    const std::size_t d_z = inf.head_z.output_size();
    if (bundle.proxy_dim() != inf.rev_p.input_size)
        throw std::invalid_argument("infer_posterior: bundle has " +
                                    std::to_string(bundle.proxy_dim()) +
                                    " proxies, inference network expects " +
                                    std::to_string(inf.rev_p.input_size));
    Tensor z_init = Tensor::zeros({d_z});
    if (z0) {
        if (z0->shape != Shape{d_z})
            throw std::invalid_argument("infer_posterior: z0 shape " + shape_str(z0->shape) +
                                        " does not match d_z " + std::to_string(d_z));
        z_init = *z0;
    }

    // Combiner features do not depend on z, so they are computed once and
    // replayed as constants for the mean path and every draw.
    std::vector<Tensor> comb_values(T);
    detail::SeriesData data = detail::raw_series(bundle);
    {
        Tape tape;
        detail::BoundModel bm;
        detail::ModelBinder binder(tape, bm);
        detail::InfVars iv;
        iv.rev_p = binder.gru("rev_p", inf.rev_p, false);
        iv.rev_x = binder.gru("rev_x", inf.rev_x, false);
        iv.rev_y = binder.gru("rev_y", inf.rev_y, false);
        iv.combiner = binder.mlp("combiner", inf.combiner, false);
        std::vector<Var> comb = detail::combiner_path(tape, iv, data, 0, T);
        for (std::size_t t = 0; t < T; ++t) comb_values[t] = comb[t].value();
    }

    const auto run_path = [&](bool sample, Rng* noise, Tensor* mean_out, Tensor* sigma_out) {
        Tape tape;
        detail::BoundModel bm;
        detail::ModelBinder binder(tape, bm);
        GaussianHeadVars head = binder.head("head_z", inf.head_z, false);
        Tensor path = Tensor::zeros({T, d_z});
        Var z_prev = tape.constant(z_init);
        for (std::size_t t = 0; t < T; ++t) {
            GaussianOutput q =
                gaussian_head_forward(concat({z_prev, tape.constant(comb_values[t])}), head);
            Var z_t = q.mean;
            if (sample) {
                Tensor xi = Tensor::zeros({d_z});
                for (double& v : xi.data) v = noise->normal();
                z_t = add(q.mean, mul(q.sigma, tape.constant(std::move(xi))));
            }
            const Tensor& zv = z_t.value();
            for (std::size_t j = 0; j < d_z; ++j) path.data[t * d_z + j] = zv.data[j];
            if (mean_out)
                for (std::size_t j = 0; j < d_z; ++j)
                    mean_out->data[t * d_z + j] = q.mean.value().data[j];
            if (sigma_out)
                for (std::size_t j = 0; j < d_z; ++j)
                    sigma_out->data[t * d_z + j] = q.sigma.value().data[j];
            z_prev = z_t;
        }
        return path;
    };

    PosteriorPath out;
    out.mean = Tensor::zeros({T, d_z});
    out.sigma = Tensor::zeros({T, d_z});
    run_path(false, nullptr, &out.mean, &out.sigma);
    for (std::size_t l = 0; l < n_samples; ++l)
        out.samples.push_back(run_path(true, &rng, nullptr, nullptr));
    return out;
}

// Log q of a given latent path under the inference network (teacher-forced
// z_{t-1} from the path itself).
inline double posterior_logpdf(const TimeSeriesBundle& bundle, InferenceParams& inf,
                               const Tensor& z_path, const Tensor* z0 = nullptr) {
    const std::size_t T = bundle.length;
    const std::size_t d_z = inf.head_z.output_size();
    if (z_path.rank() != 2 || z_path.shape[0] != T || z_path.shape[1] != d_z)
        throw std::invalid_argument("posterior_logpdf: path shape " + shape_str(z_path.shape) +
                                    " does not match (" + std::to_string(T) + "," +
                                    std::to_string(d_z) + ")");
    Tape tape;
    detail::BoundModel bm;
    detail::ModelBinder binder(tape, bm);
    detail::InfVars iv;
    iv.rev_p = binder.gru("rev_p", inf.rev_p, false);
    iv.rev_x = binder.gru("rev_x", inf.rev_x, false);
    iv.rev_y = binder.gru("rev_y", inf.rev_y, false);
    iv.combiner = binder.mlp("combiner", inf.combiner, false);
    iv.head_z = binder.head("head_z", inf.head_z, false);

    detail::SeriesData data = detail::raw_series(bundle);
    std::vector<Var> comb = detail::combiner_path(tape, iv, data, 0, T);
    Tensor z_init = Tensor::zeros({d_z});
    if (z0) z_init = *z0;
    Var z_prev = tape.constant(z_init);
    Var total{};
    for (std::size_t t = 0; t < T; ++t) {
        GaussianOutput q = gaussian_head_forward(concat({z_prev, comb[t]}), iv.head_z);
        Tensor row = Tensor::zeros({d_z});
        for (std::size_t j = 0; j < d_z; ++j) row.data[j] = z_path.data[t * d_z + j];
        Var z_t = tape.constant(std::move(row));
        Var lq = diag_gaussian_logpdf(z_t, q.mean, q.sigma);
        total = t == 0 ? lq : add(total, lq);
        z_prev = z_t;
    }
    return total.value().item();
}

// ---- model-level operations ----

// Monte-Carlo ELBO of the whole (standardized) sequence under the model.
inline double elbo(const TimeSeriesBundle& bundle, TcvaeModel& model, std::size_t n_samples,
                   Rng& rng) {
    detail::SeriesData data = detail::apply_standardization(bundle, model.standardization);
    Tape tape;
    detail::BoundModel bm = detail::bind_model(tape, model, false);
    detail::CarryState carry = detail::zero_carry(model.config);
    detail::ElboVars ev = detail::elbo_window(tape, bm, model.config, data, 0, bundle.length,
                                              carry, n_samples, rng, nullptr);
    return ev.elbo.value().item();
}

struct TraceRow {
    std::size_t epoch = 0;
    std::size_t window_index = 0;
    double elbo = 0.0, kl_term = 0.0, recon_x = 0.0, recon_p = 0.0, recon_y = 0.0;
};

inline std::string training_log_header() {
    return "epoch,window_index,elbo,kl_term,recon_x,recon_p,recon_y";
}

inline std::string training_log_row(const TraceRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g", r.epoch,
                  r.window_index, r.elbo, r.kl_term, r.recon_x, r.recon_p, r.recon_y);
    return buf;
}

struct TrainResult {
    TcvaeModel model;
    std::vector<TraceRow> trace;
    bool aborted = false;
    std::string abort_reason;
};

// Fresh training by default. Passing `resume_from` warm-starts from an
// existing model (its architecture and standardization win over cfg) and
// `completed_epochs` shifts the epoch counter so a continued run picks up
// where the checkpointed one stopped. Optimizer moments restart on resume.
inline TrainResult train(const TimeSeriesBundle& bundle, TcvaeConfig cfg,
                         const TcvaeModel* resume_from = nullptr,
                         std::size_t completed_epochs = 0) {
    validate(bundle);
    cfg.d_p = bundle.proxy_dim();
    const std::size_t T = bundle.length;
    const std::size_t L_w = cfg.window == 0 ? T : cfg.window;
    if (L_w > T)
        throw std::invalid_argument("train: window length " + std::to_string(L_w) +
                                    " exceeds series length " + std::to_string(T));
    if (cfg.mc_samples < 1) throw std::invalid_argument("train: mc_samples must be at least 1");
    if (completed_epochs > cfg.epochs)
        throw std::invalid_argument("train: " + std::to_string(completed_epochs) +
                                    " completed epochs exceed the target of " +
                                    std::to_string(cfg.epochs));

    TrainResult out;
    if (resume_from) {
        if (resume_from->config.d_p != bundle.proxy_dim())
            throw std::invalid_argument("train: resume model expects " +
                                        std::to_string(resume_from->config.d_p) +
                                        " proxies, bundle has " +
                                        std::to_string(bundle.proxy_dim()));
        out.model = *resume_from;
        const TcvaeConfig& mc = out.model.config;
        cfg.d_z = mc.d_z;
        cfg.latent_hidden = mc.latent_hidden;
        cfg.reverse_hidden = mc.reverse_hidden;
        cfg.combiner_hidden = mc.combiner_hidden;
        cfg.head_hidden = mc.head_hidden;
        cfg.instantaneous = mc.instantaneous;
        cfg.standard_normal_prior = mc.standard_normal_prior;
        out.model.config = cfg;
    } else {
        Rng param_rng(cfg.seed);
        out.model = TcvaeModel::init(cfg, param_rng);
        out.model.standardization = detail::compute_standardization(bundle);
    }
    detail::SeriesData data = detail::apply_standardization(bundle, out.model.standardization);
    WindowSchedule schedule = sliding_windows(T, L_w);

    std::vector<ParamRef> refs;
    {
        Tape scratch;
        refs = detail::bind_model(scratch, out.model, true).refs;
    }
    AdamState state = AdamState::for_params(refs);
    AdamConfig adam;
    adam.lr = cfg.lr;

    Rng noise_rng = Rng(cfg.seed).derive(0xe1b0);
    if (completed_epochs > 0) noise_rng = noise_rng.derive(completed_epochs);
    CheckpointMap last_good = snapshot_params(refs);

    for (std::size_t epoch = completed_epochs; epoch < cfg.epochs; ++epoch) {
        detail::CarryState carry = detail::zero_carry(cfg);
        for (std::size_t start : schedule.starts) {
            Tape tape;
            detail::BoundModel bm = detail::bind_model(tape, out.model, true);
            detail::CarryState next = carry;
            detail::ElboVars ev;
            try {
                ev = detail::elbo_window(tape, bm, cfg, data, start, L_w, carry, cfg.mc_samples,
                                         noise_rng, &next);
                Var loss = neg(ev.elbo);
                GradientMap grads = tape.backward(loss);
                adam_step(refs, gather_grads(grads, bm.leaves), state, adam);
            } catch (const std::runtime_error& e) {
                restore_params(refs, last_good);
                out.aborted = true;
                out.abort_reason = e.what();
                return out;
            }

            TraceRow row;
            row.epoch = epoch;
            row.window_index = start;
            row.elbo = ev.elbo.value().item();
            row.kl_term = ev.log_q.value().item() - ev.log_prior.value().item();
            row.recon_x = ev.recon_x.value().item();
            row.recon_p = ev.recon_p.value().item();
            row.recon_y = ev.recon_y.value().item();
            out.trace.push_back(row);
            carry = next;
        }
        last_good = snapshot_params(refs);
    }
    return out;
}

struct ConfounderEstimate {
    Tensor mean;   // T x d_z
    Tensor sigma;  // T x d_z
    std::vector<Tensor> draws;
};

// Posterior over the confounder path from a trained model. n_draws = 0
// returns the mean path only, which is the default Granger conditioning
// input; draws support sensitivity runs.
inline ConfounderEstimate estimate_confounder(const TimeSeriesBundle& bundle, TcvaeModel& model,
                                              std::size_t n_draws, Rng& rng) {
    if (bundle.proxy_dim() != model.config.d_p)
        throw std::invalid_argument("estimate_confounder: bundle has " +
                                    std::to_string(bundle.proxy_dim()) +
                                    " proxies, model expects " + std::to_string(model.config.d_p));
    detail::SeriesData data = detail::apply_standardization(bundle, model.standardization);
    TimeSeriesBundle std_bundle;
    std_bundle.length = bundle.length;
    std_bundle.x = data.x;
    std_bundle.y = data.y;
    std_bundle.p = data.p;
    std_bundle.provenance = bundle.provenance;
    PosteriorPath path = infer_posterior(std_bundle, model.inf, n_draws, rng);
    ConfounderEstimate out;
    out.mean = std::move(path.mean);
    out.sigma = std::move(path.sigma);
    out.draws = std::move(path.samples);
    return out;
}

// ---- model persistence ----

inline void save_model(const std::string& path, TcvaeModel& model,
                       CheckpointFormat format = CheckpointFormat::binary) {
    std::vector<ParamRef> refs;
    visit_params(model, [&](const std::string& name, Tensor& t) { refs.push_back({name, &t}); });
    visit_params(model.standardization, "standardize",
                 [&](const std::string& name, Tensor& t) { refs.push_back({name, &t}); });
    CheckpointMap map = snapshot_params(refs);

    const auto meta = [&](const std::string& name, double v) {
        Tensor t = Tensor::zeros({1});
        t.data[0] = v;
        map["meta/" + name] = t;
    };
    const TcvaeConfig& c = model.config;
    meta("d_z", static_cast<double>(c.d_z));
    meta("d_p", static_cast<double>(c.d_p));
    meta("latent_hidden", static_cast<double>(c.latent_hidden));
    meta("reverse_hidden", static_cast<double>(c.reverse_hidden));
    meta("combiner_hidden", static_cast<double>(c.combiner_hidden));
    meta("head_hidden", static_cast<double>(c.head_hidden));
    meta("instantaneous", c.instantaneous ? 1.0 : 0.0);
    meta("standard_normal_prior", c.standard_normal_prior ? 1.0 : 0.0);
    save_checkpoint(path, map, format);
}

inline TcvaeModel load_model(const std::string& path) {
    CheckpointMap map = load_checkpoint(path);
    const auto meta = [&](const std::string& name) {
        auto it = map.find("meta/" + name);
        if (it == map.end())
            throw std::runtime_error("load_model: checkpoint is missing meta/" + name);
        return it->second.data.at(0);
    };
    TcvaeConfig cfg;
    cfg.d_z = static_cast<std::size_t>(meta("d_z"));
    cfg.d_p = static_cast<std::size_t>(meta("d_p"));
    cfg.latent_hidden = static_cast<std::size_t>(meta("latent_hidden"));
    cfg.reverse_hidden = static_cast<std::size_t>(meta("reverse_hidden"));
    cfg.combiner_hidden = static_cast<std::size_t>(meta("combiner_hidden"));
    cfg.head_hidden = static_cast<std::size_t>(meta("head_hidden"));
    cfg.instantaneous = meta("instantaneous") != 0.0;
    cfg.standard_normal_prior = meta("standard_normal_prior") != 0.0;

    Rng rng(0);
    TcvaeModel model = TcvaeModel::init(cfg, rng);
    std::vector<ParamRef> refs;
    visit_params(model, [&](const std::string& name, Tensor& t) { refs.push_back({name, &t}); });
    visit_params(model.standardization, "standardize",
                 [&](const std::string& name, Tensor& t) { refs.push_back({name, &t}); });
    restore_params(refs, map);
    return model;
}

}  // namespace deconf

// Synthetic data generators, noisy-proxy construction for semi-synthetic
// runs, CSV persistence, and the sliding-window schedule.
//
// Both generative processes share a latent AR core. The null process has no
// x->y edge; the causal process adds a second latent w feeding x only and a
// tanh edge from lagged x into y. Proxies measure z coordinate (i mod d_z)
// with independent noise per coordinate and time step.
//
// Noise streams are split per variable (z columns, w, x, y, each proxy
// column) so that, at a fixed seed, changing ploss or d_p leaves the core
// series untouched.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deconf/rng.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

enum class Provenance { dgp_null, dgp_causal, csv };

inline std::string provenance_str(Provenance p) {
    switch (p) {
        case Provenance::dgp_null: return "dgp-null";
        case Provenance::dgp_causal: return "dgp-causal";
        case Provenance::csv: return "csv";
    }
    return "csv";
}

struct TimeSeriesBundle {
    std::size_t length = 0;
    std::vector<double> x, y;
    Tensor p;                              // length x d_p
    std::optional<Tensor> z_true;          // length x d_z
    std::optional<std::vector<double>> w;  // second latent of the causal process
    Provenance provenance = Provenance::csv;

    std::size_t proxy_dim() const { return p.shape.size() == 2 ? p.shape[1] : 0; }
    std::size_t confounder_dim() const {
        return z_true && z_true->shape.size() == 2 ? z_true->shape[1] : 0;
    }
};

inline void validate(const TimeSeriesBundle& b) {
    if (b.x.size() != b.length || b.y.size() != b.length)
        throw std::invalid_argument("bundle: x/y length mismatch");
    if (b.p.shape.size() != 2 || b.p.shape[0] != b.length || b.p.shape[1] < 1)
        throw std::invalid_argument("bundle: proxy matrix must be length x d_p, got " +
                                    shape_str(b.p.shape));
    if (b.z_true && (b.z_true->shape.size() != 2 || b.z_true->shape[0] != b.length))
        throw std::invalid_argument("bundle: confounder matrix must be length x d_z");
    const auto check_finite = [](const std::vector<double>& v, const char* name) {
        for (double d : v)
            if (!std::isfinite(d)) throw std::invalid_argument(std::string("bundle: non-finite ") + name);
    };
    check_finite(b.x, "x");
    check_finite(b.y, "y");
    check_finite(b.p.data, "p");
    if (b.z_true) check_finite(b.z_true->data, "z");
}

struct DgpConfig {
    std::size_t T = 1000;
    double ploss = 1.0;
    std::size_t d_p = 2;
    std::size_t d_z = 1;
    std::size_t burn_in = 100;
    std::uint64_t seed = 0;
    bool causal_edge = true;  // gen_causal only: drop the x->y term when false
};

namespace detail {

inline double sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

// Standard normal conditioned on exceeding `a`. Redrawing until the draw
// clears the bound has exactly this law, but stalls once `a` passes a few
// sigma, so the tail case uses an exponential proposal instead (Robert 1995);
// both branches are exact.
inline double normal_above(Rng& rng, double a) {
    if (a <= 0.0) {
        double e;
        do {
            e = rng.normal();
        } while (e <= a);
        return e;
    }
    const double alpha = 0.5 * (a + std::sqrt(a * a + 4.0));
    for (;;) {
        const double e = a - std::log1p(-rng.uniform()) / alpha;
        const double d = e - alpha;
        if (rng.uniform() <= std::exp(-0.5 * d * d) && e > a) return e;
    }
}

// Sub-stream ids for Rng::derive.
inline constexpr std::uint64_t kStreamW = 50;
inline constexpr std::uint64_t kStreamX = 51;
inline constexpr std::uint64_t kStreamY = 52;
inline constexpr std::uint64_t kStreamProxy = 100;  // + proxy column index
// z column j uses stream id j.

inline TimeSeriesBundle generate(const DgpConfig& cfg, bool causal) {
    if (cfg.T < 1) throw std::invalid_argument("dgp: T must be at least 1");
    if (cfg.d_p < 1) throw std::invalid_argument("dgp: d_p must be at least 1");
    if (cfg.d_z < 1) throw std::invalid_argument("dgp: d_z must be at least 1");
    if (cfg.ploss < 0.0) throw std::invalid_argument("dgp: ploss must be nonnegative");

    Rng root(cfg.seed);
    const std::size_t total = cfg.burn_in + cfg.T;
    const auto past = [](const std::vector<double>& v, std::size_t t, std::size_t lag) {
        return t >= lag ? v[t - lag] : 0.0;
    };

    std::vector<std::vector<double>> z(cfg.d_z, std::vector<double>(total));
    for (std::size_t j = 0; j < cfg.d_z; ++j) {
        Rng rng = root.derive(j);
        for (std::size_t t = 0; t < total; ++t)
            z[j][t] = std::tanh(past(z[j], t, 1)) + rng.normal();
    }

    std::vector<double> w;
    if (causal) {
        // The noise is redrawn whenever it would leave the next step's log
        // argument nonpositive, i.e. it follows a normal truncated below.
        w.resize(total);
        Rng rng = root.derive(kStreamW);
        for (std::size_t t = 0; t < total; ++t) {
            const double base = std::log(past(w, t, 1) + 1.0);
            w[t] = base + normal_above(rng, -1.0 - base);
        }
    }

    std::vector<double> x(total);
    {
        Rng rng = root.derive(kStreamX);
        for (std::size_t t = 0; t < total; ++t) {
            double v = 0.0;
            for (std::size_t j = 0; j < cfg.d_z; ++j) {
                const double a = (2.0 / 3.0) * past(z[j], t, 2) + (1.0 / 3.0) * past(z[j], t, 1);
                v += std::tanh(causal ? a - 1.0 : a);
            }
            if (causal)
                v += sigmoid(0.1 * past(w, t, 4) + 0.2 * past(w, t, 3) + 0.3 * past(w, t, 2) +
                             0.4 * past(w, t, 1));
            v += ((1.0 / 3.0) * past(x, t, 2) + (2.0 / 3.0) * past(x, t, 1)) / 4.0;
            x[t] = v + 0.05 * rng.normal();
        }
    }

    std::vector<double> y(total);
    {
        Rng rng = root.derive(kStreamY);
        for (std::size_t t = 0; t < total; ++t) {
            double v = 0.0;
            for (std::size_t j = 0; j < cfg.d_z; ++j)
                v += sigmoid((1.0 / 3.0) * past(z[j], t, 4) + (2.0 / 3.0) * past(z[j], t, 3));
            if (causal && cfg.causal_edge)
                v += std::tanh((1.0 / 3.0) * past(x, t, 2) + (2.0 / 3.0) * past(x, t, 1) - 1.0);
            v += ((1.0 / 3.0) * past(y, t, 2) + (2.0 / 3.0) * past(y, t, 1)) / 4.0;
            y[t] = v + 0.05 * rng.normal();
        }
    }

    TimeSeriesBundle b;
    b.length = cfg.T;
    b.provenance = causal ? Provenance::dgp_causal : Provenance::dgp_null;
    b.x.assign(x.begin() + cfg.burn_in, x.end());
    b.y.assign(y.begin() + cfg.burn_in, y.end());
    b.z_true = Tensor::zeros({cfg.T, cfg.d_z});
    for (std::size_t t = 0; t < cfg.T; ++t)
        for (std::size_t j = 0; j < cfg.d_z; ++j)
            b.z_true->data[t * cfg.d_z + j] = z[j][cfg.burn_in + t];
    if (causal) b.w = std::vector<double>(w.begin() + cfg.burn_in, w.end());

    std::vector<double> z_mean(cfg.d_z, 0.0);
    for (std::size_t j = 0; j < cfg.d_z; ++j) {
        for (std::size_t t = 0; t < cfg.T; ++t) z_mean[j] += z[j][cfg.burn_in + t];
        z_mean[j] /= static_cast<double>(cfg.T);
    }

    b.p = Tensor::zeros({cfg.T, cfg.d_p});
    for (std::size_t i = 0; i < cfg.d_p; ++i) {
        Rng rng = root.derive(kStreamProxy + i);
        const std::size_t j = i % cfg.d_z;
        for (std::size_t t = 0; t < cfg.T; ++t)
            b.p.data[t * cfg.d_p + i] =
                b.z_true->data[t * cfg.d_z + j] + cfg.ploss * z_mean[j] * (0.5 + rng.normal());
    }

    validate(b);
    return b;
}

}  // namespace detail

inline TimeSeriesBundle gen_null(const DgpConfig& cfg) { return detail::generate(cfg, false); }
inline TimeSeriesBundle gen_causal(const DgpConfig& cfg) { return detail::generate(cfg, true); }

struct NoisyProxyResult {
    Tensor p;  // T x (d_z * copies)
    bool mean_zero_fallback = false;
};

// Independent Gaussian noise per coordinate and time; per-coordinate scale
// sigma = noise_level * mean over time of that coordinate. A coordinate whose
// mean is exactly zero falls back to noise_level * stddev, flagged in the
// result since the scale formula degenerates there.
inline NoisyProxyResult make_noisy_proxy(const Tensor& z, double noise_level, Rng& rng,
                                         std::size_t copies = 1) {
    if (z.shape.size() != 2)
        throw std::invalid_argument("make_noisy_proxy: z must be T x d, got " + shape_str(z.shape));
    if (noise_level < 0.0) throw std::invalid_argument("make_noisy_proxy: negative noise level");
    if (copies < 1) throw std::invalid_argument("make_noisy_proxy: need at least one copy");
    const std::size_t T = z.shape[0], d = z.shape[1];

    NoisyProxyResult out;
    std::vector<double> scale(d);
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t t = 0; t < T; ++t) mean += z.data[t * d + j];
        mean /= static_cast<double>(T);
        if (mean == 0.0) {
            double ss = 0.0;
            for (std::size_t t = 0; t < T; ++t) ss += z.data[t * d + j] * z.data[t * d + j];
            scale[j] = noise_level * std::sqrt(ss / static_cast<double>(T));
            out.mean_zero_fallback = true;
        } else {
            scale[j] = noise_level * mean;
        }
    }

    // Zero noise copies z exactly and consumes no randomness; otherwise every
    // cell takes one draw from the caller's stream, row by row.
    out.p = Tensor::zeros({T, d * copies});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < copies; ++c)
            for (std::size_t j = 0; j < d; ++j)
                out.p.data[t * d * copies + c * d + j] =
                    noise_level == 0.0 ? z.data[t * d + j]
                                       : z.data[t * d + j] + scale[j] * rng.normal();
    return out;
}

// ---- CSV persistence ----
// Header: x,y,p_1..p_k[,z_1..z_d], any column order on load, canonical order
// on save. Values are written with 17 significant digits so doubles survive
// the round trip.

inline std::string sidecar_path(const std::string& csv_path) { return csv_path + ".meta.json"; }

inline void save_csv(const std::string& path, const TimeSeriesBundle& b,
                     const nlohmann::json& extra_meta = nlohmann::json::object()) {
    validate(b);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_csv: cannot open " + path);
    os << "x,y";
    for (std::size_t i = 1; i <= b.proxy_dim(); ++i) os << ",p_" << i;
    for (std::size_t i = 1; i <= b.confounder_dim(); ++i) os << ",z_" << i;
    os << "\n";
    char buf[32];
    const auto cell = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << buf;
    };
    for (std::size_t t = 0; t < b.length; ++t) {
        cell(b.x[t]);
        os << ",";
        cell(b.y[t]);
        for (std::size_t i = 0; i < b.proxy_dim(); ++i) {
            os << ",";
            cell(b.p.data[t * b.proxy_dim() + i]);
        }
        for (std::size_t i = 0; i < b.confounder_dim(); ++i) {
            os << ",";
            cell(b.z_true->data[t * b.confounder_dim() + i]);
        }
        os << "\n";
    }
    if (!os) throw std::runtime_error("save_csv: write failed for " + path);

    nlohmann::json meta = extra_meta;
    meta["provenance"] = provenance_str(b.provenance);
    meta["length"] = b.length;
    meta["d_p"] = b.proxy_dim();
    meta["d_z"] = b.confounder_dim();
    std::ofstream ms(sidecar_path(path), std::ios::trunc);
    if (!ms) throw std::runtime_error("save_csv: cannot open " + sidecar_path(path));
    ms << meta.dump(2) << "\n";
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline TimeSeriesBundle load_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_csv: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("load_csv: " + path + " is empty");

    const std::vector<std::string> header = detail::split_csv_line(line);
    long x_col = -1, y_col = -1;
    std::vector<long> p_cols, z_cols;  // indexed by p_i / z_i number - 1
    for (std::size_t c = 0; c < header.size(); ++c) {
        const std::string name = detail::trim(header[c]);
        if (name == "x") {
            x_col = static_cast<long>(c);
        } else if (name == "y") {
            y_col = static_cast<long>(c);
        } else if (name.rfind("p_", 0) == 0 || name.rfind("z_", 0) == 0) {
            std::size_t idx = 0;
            try {
                idx = std::stoul(name.substr(2));
            } catch (...) {
                throw std::runtime_error("load_csv: unrecognized column \"" + name + "\"");
            }
            if (idx < 1) throw std::runtime_error("load_csv: unrecognized column \"" + name + "\"");
            auto& cols = name[0] == 'p' ? p_cols : z_cols;
            if (cols.size() < idx) cols.resize(idx, -1);
            cols[idx - 1] = static_cast<long>(c);
        } else {
            throw std::runtime_error("load_csv: unrecognized column \"" + name + "\"");
        }
    }
    if (x_col < 0) throw std::runtime_error("load_csv: missing column \"x\" in " + path);
    if (y_col < 0) throw std::runtime_error("load_csv: missing column \"y\" in " + path);
    if (p_cols.empty()) throw std::runtime_error("load_csv: missing column \"p_1\" in " + path);
    for (std::size_t i = 0; i < p_cols.size(); ++i)
        if (p_cols[i] < 0)
            throw std::runtime_error("load_csv: missing column \"p_" + std::to_string(i + 1) +
                                     "\" in " + path);
    for (std::size_t i = 0; i < z_cols.size(); ++i)
        if (z_cols[i] < 0)
            throw std::runtime_error("load_csv: missing column \"z_" + std::to_string(i + 1) +
                                     "\" in " + path);

    const std::size_t width = header.size();
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() && is.eof()) break;
        const std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != width)
            throw std::runtime_error("load_csv: line " + std::to_string(line_no) + " has " +
                                     std::to_string(cells.size()) + " cells, expected " +
                                     std::to_string(width));
        std::vector<double> row(width);
        for (std::size_t c = 0; c < width; ++c) {
            const std::string cell = detail::trim(cells[c]);
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end != cell.c_str() + cell.size() || !std::isfinite(v))
                throw std::runtime_error("load_csv: bad value \"" + cell + "\" at line " +
                                         std::to_string(line_no) + ", column \"" +
                                         detail::trim(header[c]) + "\"");
            row[c] = v;
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("load_csv: " + path + " has no data rows");

    TimeSeriesBundle b;
    b.length = rows.size();
    b.provenance = Provenance::csv;
    b.x.resize(b.length);
    b.y.resize(b.length);
    b.p = Tensor::zeros({b.length, p_cols.size()});
    if (!z_cols.empty()) b.z_true = Tensor::zeros({b.length, z_cols.size()});
    for (std::size_t t = 0; t < b.length; ++t) {
        b.x[t] = rows[t][static_cast<std::size_t>(x_col)];
        b.y[t] = rows[t][static_cast<std::size_t>(y_col)];
        for (std::size_t i = 0; i < p_cols.size(); ++i)
            b.p.data[t * p_cols.size() + i] = rows[t][static_cast<std::size_t>(p_cols[i])];
        for (std::size_t i = 0; i < z_cols.size(); ++i)
            b.z_true->data[t * z_cols.size() + i] = rows[t][static_cast<std::size_t>(z_cols[i])];
    }
    validate(b);
    return b;
}

// ---- windowing ----

struct WindowSchedule {
    std::size_t window_length = 0;
    std::vector<std::size_t> starts;  // stride 1: 0, 1, ..., T-L
};

inline WindowSchedule sliding_windows(std::size_t T, std::size_t L) {
    if (L < 1) throw std::invalid_argument("sliding_windows: window length must be at least 1");
    if (L > T)
        throw std::invalid_argument("sliding_windows: window length " + std::to_string(L) +
                                    " exceeds series length " + std::to_string(T));
    WindowSchedule s;
    s.window_length = L;
    s.starts.resize(T - L + 1);
    for (std::size_t i = 0; i < s.starts.size(); ++i) s.starts[i] = i;
    return s;
}

}  // namespace deconf

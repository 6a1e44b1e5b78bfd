// F-distribution CDF via the regularized incomplete beta function, and the
// F-test used by every Granger variant.
#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace deconf {

namespace detail {

// Continued-fraction evaluation of the incomplete beta function (modified
// Lentz). Converges quickly for x < (a+1)/(a+b+2).
inline double betacf(double a, double b, double x) {
    constexpr int max_iter = 300;
    constexpr double eps = 1e-12;
    constexpr double tiny = 1e-300;

    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) return h;
    }
    throw std::runtime_error("betacf: no convergence after 300 iterations");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    if (x < 0.0 || x > 1.0) throw std::invalid_argument("incomplete_beta: x outside [0,1]");
    if (a <= 0.0 || b <= 0.0) throw std::invalid_argument("incomplete_beta: a,b must be positive");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::betacf(a, b, x) / a;
    return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

// CDF of the F distribution with d1, d2 degrees of freedom.
inline double f_cdf(double x, double d1, double d2) {
    if (d1 < 1.0 || d2 < 1.0) throw std::invalid_argument("f_cdf: degrees of freedom must be >= 1");
    if (x < 0.0) throw std::invalid_argument("f_cdf: x must be nonnegative");
    if (x == 0.0) return 0.0;
    if (std::isinf(x)) return 1.0;
    const double u = d1 * x / (d1 * x + d2);
    return incomplete_beta(d1 / 2.0, d2 / 2.0, u);
}

struct FTestInput {
    double rss_restricted = 0.0;
    double rss_full = 0.0;
    int params_restricted = 0;  // k_r
    int params_full = 0;        // k_f, > k_r
    int sample_count = 0;       // n, > k_f
};

struct FTestResult {
    double f_statistic = 0.0;
    double p_value = 1.0;
    bool degenerate_fit = false;  // rss_full == 0
};

inline FTestResult f_test(const FTestInput& in) {
    if (in.rss_restricted < 0.0 || in.rss_full < 0.0)
        throw std::invalid_argument("f_test: negative residual sum of squares");
    if (in.params_restricted <= 0 || in.params_full <= in.params_restricted)
        throw std::invalid_argument("f_test: need 0 < k_r < k_f");
    if (in.sample_count <= in.params_full)
        throw std::invalid_argument("f_test: need sample count n > k_f (n=" +
                                    std::to_string(in.sample_count) +
                                    ", k_f=" + std::to_string(in.params_full) + ")");

    FTestResult out;
    const double q = in.params_full - in.params_restricted;
    const double dof2 = in.sample_count - in.params_full;
    if (in.rss_full == 0.0) {
        out.f_statistic = std::numeric_limits<double>::infinity();
        out.p_value = 0.0;
        out.degenerate_fit = true;
        return out;
    }
    const double num = (in.rss_restricted - in.rss_full) / q;
    const double den = in.rss_full / dof2;
    out.f_statistic = std::max(0.0, num / den);
    out.p_value = 1.0 - f_cdf(out.f_statistic, q, dof2);
    return out;
}

}  // namespace deconf

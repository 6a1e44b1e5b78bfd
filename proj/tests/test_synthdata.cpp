#include "deconf/synthdata.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>

#include "deconf/rng.hpp"

using namespace deconf;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/deconf_test_" + name) {}
    ~TempFile() {
        std::remove(path.c_str());
        std::remove(sidecar_path(path).c_str());
    }
};

double corr(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(Dgp, SameConfigSameBundle) {
    DgpConfig cfg;
    cfg.T = 200;
    cfg.seed = 12;
    TimeSeriesBundle a = gen_null(cfg), b = gen_null(cfg);
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.y, b.y);
    EXPECT_EQ(a.p.data, b.p.data);
    EXPECT_EQ(a.z_true->data, b.z_true->data);
    cfg.seed = 13;
    TimeSeriesBundle c = gen_null(cfg);
    EXPECT_NE(a.x, c.x);
}

TEST(Dgp, ZeroPlossMakesProxiesExactCopies) {
    DgpConfig cfg;
    cfg.T = 150;
    cfg.ploss = 0.0;
    cfg.d_p = 3;
    cfg.seed = 4;
    TimeSeriesBundle b = gen_null(cfg);
    for (std::size_t t = 0; t < b.length; ++t)
        for (std::size_t i = 0; i < 3; ++i)
            EXPECT_EQ(b.p.data[t * 3 + i], b.z_true->data[t]);
}

TEST(Dgp, PlossOnlyAffectsProxies) {
    DgpConfig cfg;
    cfg.T = 100;
    cfg.seed = 21;
    cfg.ploss = 1.0;
    TimeSeriesBundle a = gen_null(cfg);
    cfg.ploss = 3.0;
    TimeSeriesBundle b = gen_null(cfg);
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.y, b.y);
    EXPECT_EQ(a.z_true->data, b.z_true->data);
    EXPECT_NE(a.p.data, b.p.data);
}

TEST(Dgp, NullSeriesObeyStructuralBound) {
    // The non-autoregressive part of x is one tanh plus 0.05 * standard
    // normal; six sigmas of slack keeps the check deterministic at this seed.
    DgpConfig cfg;
    cfg.T = 2000;
    cfg.seed = 31;
    TimeSeriesBundle b = gen_null(cfg);
    for (std::size_t t = 2; t < b.length; ++t) {
        const double ar = ((1.0 / 3.0) * b.x[t - 2] + (2.0 / 3.0) * b.x[t - 1]) / 4.0;
        EXPECT_LE(std::abs(b.x[t] - ar), 1.0 + 0.05 * 6.0);
    }
}

TEST(Dgp, CausalSharesCoreSeriesWithAblatedRun) {
    DgpConfig cfg;
    cfg.T = 400;
    cfg.seed = 9;
    TimeSeriesBundle with_edge = gen_causal(cfg);
    cfg.causal_edge = false;
    TimeSeriesBundle without_edge = gen_causal(cfg);
    EXPECT_EQ(with_edge.x, without_edge.x);
    EXPECT_EQ(with_edge.z_true->data, without_edge.z_true->data);
    ASSERT_TRUE(with_edge.w && without_edge.w);
    EXPECT_EQ(*with_edge.w, *without_edge.w);
    EXPECT_NE(with_edge.y, without_edge.y);
}

TEST(Dgp, CausalEdgeShowsUpInLaggedCorrelation) {
    DgpConfig cfg;
    cfg.T = 3000;
    cfg.seed = 14;
    TimeSeriesBundle with_edge = gen_causal(cfg);
    cfg.causal_edge = false;
    TimeSeriesBundle without_edge = gen_causal(cfg);

    const auto lagged_corr = [](const TimeSeriesBundle& b) {
        std::vector<double> x_lag(b.x.begin(), b.x.end() - 1);
        std::vector<double> y_now(b.y.begin() + 1, b.y.end());
        return corr(x_lag, y_now);
    };
    EXPECT_GT(lagged_corr(with_edge), lagged_corr(without_edge) + 0.1);
}

TEST(Dgp, SecondLatentStaysInLogDomain) {
    DgpConfig cfg;
    cfg.T = 20000;
    cfg.seed = 77;
    TimeSeriesBundle b = gen_causal(cfg);
    ASSERT_TRUE(b.w);
    for (double v : *b.w) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GT(v + 1.0, 0.0);
    }
}

TEST(Dgp, TwoConfounderColumnsAreIndependentProcesses) {
    DgpConfig cfg;
    cfg.T = 5000;
    cfg.d_z = 2;
    cfg.d_p = 2;
    cfg.seed = 3;
    TimeSeriesBundle b = gen_null(cfg);
    std::vector<double> z0(b.length), z1(b.length);
    for (std::size_t t = 0; t < b.length; ++t) {
        z0[t] = b.z_true->data[t * 2];
        z1[t] = b.z_true->data[t * 2 + 1];
    }
    EXPECT_LT(std::abs(corr(z0, z1)), 0.1);
    // Proxy column i tracks z column i here (i mod d_z with d_p = d_z).
    std::vector<double> p0(b.length), p1(b.length);
    for (std::size_t t = 0; t < b.length; ++t) {
        p0[t] = b.p.data[t * 2];
        p1[t] = b.p.data[t * 2 + 1];
    }
    EXPECT_GT(corr(p0, z0), corr(p0, z1));
    EXPECT_GT(corr(p1, z1), corr(p1, z0));
}

TEST(NoisyProxy, ZeroNoiseIsIdentity) {
    Rng data_rng(5);
    Tensor z = Tensor::zeros({50, 2});
    for (double& v : z.data) v = data_rng.uniform(0.5, 2.0);
    Rng rng(1);
    NoisyProxyResult r = make_noisy_proxy(z, 0.0, rng);
    EXPECT_EQ(r.p.data, z.data);
    EXPECT_FALSE(r.mean_zero_fallback);
}

TEST(NoisyProxy, EmpiricalScaleMatchesFormula) {
    const std::size_t T = 100000;
    Tensor z = Tensor::zeros({T, 1});
    Rng data_rng(8);
    for (double& v : z.data) v = 2.0 + 0.3 * data_rng.normal();
    double mean = 0.0;
    for (double v : z.data) mean += v;
    mean /= static_cast<double>(T);

    Rng rng(2);
    const double noise_level = 0.7;
    NoisyProxyResult r = make_noisy_proxy(z, noise_level, rng);
    double ss = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        const double d = r.p.data[t] - z.data[t];
        ss += d * d;
    }
    const double got = std::sqrt(ss / static_cast<double>(T));
    const double want = noise_level * mean;
    EXPECT_NEAR(got, want, 0.02 * want);
}

TEST(NoisyProxy, ZeroMeanFallsBackToStddev) {
    Tensor z = Tensor::zeros({4, 1});
    z.data = {-1.0, 1.0, -1.0, 1.0};  // mean exactly zero, stddev 1
    Rng rng(3);
    NoisyProxyResult r = make_noisy_proxy(z, 0.5, rng);
    EXPECT_TRUE(r.mean_zero_fallback);
    for (std::size_t t = 0; t < 4; ++t) EXPECT_NE(r.p.data[t], z.data[t]);
}

TEST(NoisyProxy, CopiesCarryIndependentNoise) {
    const std::size_t T = 100000;
    Tensor z = Tensor::zeros({T, 1});
    Rng data_rng(11);
    for (double& v : z.data) v = 1.0 + 0.2 * data_rng.normal();

    Rng rng(4);
    NoisyProxyResult r = make_noisy_proxy(z, 0.5, rng, 2);
    ASSERT_EQ(r.p.shape, Shape({T, 2}));
    std::vector<double> e0(T), e1(T);
    for (std::size_t t = 0; t < T; ++t) {
        e0[t] = r.p.data[t * 2] - z.data[t];
        e1[t] = r.p.data[t * 2 + 1] - z.data[t];
    }
    EXPECT_LT(std::abs(corr(e0, e1)), 0.05);
}

TEST(NoisyProxy, RejectsBadArguments) {
    Rng rng(1);
    EXPECT_THROW(make_noisy_proxy(Tensor::vector({1.0}), 0.5, rng), std::invalid_argument);
    Tensor z = Tensor::zeros({5, 1});
    EXPECT_THROW(make_noisy_proxy(z, -0.1, rng), std::invalid_argument);
    EXPECT_THROW(make_noisy_proxy(z, 0.5, rng, 0), std::invalid_argument);
}

TEST(Csv, RoundTripIsBitExact) {
    DgpConfig cfg;
    cfg.T = 3;
    cfg.d_p = 2;
    cfg.seed = 19;
    TimeSeriesBundle b = gen_null(cfg);
    TempFile f("roundtrip.csv");
    save_csv(f.path, b);
    TimeSeriesBundle r = load_csv(f.path);
    EXPECT_EQ(r.length, 3u);
    EXPECT_EQ(r.x, b.x);
    EXPECT_EQ(r.y, b.y);
    EXPECT_EQ(r.p.data, b.p.data);
    ASSERT_TRUE(r.z_true);
    EXPECT_EQ(r.z_true->data, b.z_true->data);
    EXPECT_EQ(r.provenance, Provenance::csv);
}

TEST(Csv, SidecarRecordsProvenanceAndShape) {
    DgpConfig cfg;
    cfg.T = 5;
    cfg.seed = 2;
    TimeSeriesBundle b = gen_causal(cfg);
    TempFile f("sidecar.csv");
    nlohmann::json extra;
    extra["seed"] = 2;
    save_csv(f.path, b, extra);
    std::ifstream is(sidecar_path(f.path));
    ASSERT_TRUE(is.good());
    nlohmann::json meta;
    is >> meta;
    EXPECT_EQ(meta["provenance"], "dgp-causal");
    EXPECT_EQ(meta["length"], 5);
    EXPECT_EQ(meta["seed"], 2);
}

TEST(Csv, MissingColumnIsNamed) {
    TempFile f("missing_y.csv");
    std::ofstream(f.path) << "x,p_1\n1.0,2.0\n";
    try {
        load_csv(f.path);
        FAIL() << "expected missing-column error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("\"y\""), std::string::npos);
    }
}

TEST(Csv, BadCellReportsRowAndColumn) {
    TempFile f("bad_cell.csv");
    std::ofstream(f.path) << "x,y,p_1\n1.0,2.0,3.0\n1.0,oops,3.0\n";
    try {
        load_csv(f.path);
        FAIL() << "expected parse error";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("line 3"), std::string::npos);
        EXPECT_NE(msg.find("\"y\""), std::string::npos);
        EXPECT_NE(msg.find("oops"), std::string::npos);
    }
}

TEST(Csv, RaggedRowReportsCounts) {
    TempFile f("ragged.csv");
    std::ofstream(f.path) << "x,y,p_1\n1.0,2.0,3.0\n1.0,2.0\n";
    try {
        load_csv(f.path);
        FAIL() << "expected ragged-row error";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("line 3"), std::string::npos);
        EXPECT_NE(msg.find("2 cells"), std::string::npos);
        EXPECT_NE(msg.find("expected 3"), std::string::npos);
    }
}

TEST(Csv, UnknownColumnAndNonContiguousProxiesRejected) {
    TempFile f("unknown.csv");
    std::ofstream(f.path) << "x,y,p_1,mystery\n1,2,3,4\n";
    EXPECT_THROW(load_csv(f.path), std::runtime_error);
    TempFile g("gap.csv");
    std::ofstream(g.path) << "x,y,p_1,p_3\n1,2,3,4\n";
    try {
        load_csv(g.path);
        FAIL() << "expected missing p_2 error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("\"p_2\""), std::string::npos);
    }
}

TEST(Csv, ShuffledColumnOrderLoadsCorrectly) {
    TempFile f("shuffled.csv");
    std::ofstream(f.path) << "p_1,z_1,y,x\n10,20,2,1\n11,21,4,3\n";
    TimeSeriesBundle b = load_csv(f.path);
    EXPECT_EQ(b.x, (std::vector<double>{1.0, 3.0}));
    EXPECT_EQ(b.y, (std::vector<double>{2.0, 4.0}));
    EXPECT_EQ(b.p.data, (std::vector<double>{10.0, 11.0}));
    EXPECT_EQ(b.z_true->data, (std::vector<double>{20.0, 21.0}));
}

TEST(Csv, NonFiniteValueRejected) {
    TempFile f("inf.csv");
    std::ofstream(f.path) << "x,y,p_1\n1.0,inf,3.0\n";
    EXPECT_THROW(load_csv(f.path), std::runtime_error);
}

TEST(Windows, StrideOneSchedule) {
    WindowSchedule s = sliding_windows(5, 4);
    EXPECT_EQ(s.window_length, 4u);
    EXPECT_EQ(s.starts, (std::vector<std::size_t>{0, 1}));
}

TEST(Windows, FullLengthWindowIsSingle) {
    WindowSchedule s = sliding_windows(7, 7);
    EXPECT_EQ(s.starts, (std::vector<std::size_t>{0}));
}

TEST(Windows, EveryIndexCovered) {
    const std::size_t T = 40, L = 11;
    WindowSchedule s = sliding_windows(T, L);
    EXPECT_EQ(s.starts.size(), T - L + 1);
    std::vector<int> hits(T, 0);
    for (std::size_t start : s.starts)
        for (std::size_t i = start; i < start + L; ++i) hits[i] += 1;
    for (std::size_t i = 0; i < T; ++i) EXPECT_GE(hits[i], 1) << "index " << i;
}

TEST(Windows, OversizedWindowRejected) {
    EXPECT_THROW(sliding_windows(5, 6), std::invalid_argument);
    EXPECT_THROW(sliding_windows(5, 0), std::invalid_argument);
}

#include "deconf/checkpoint.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "deconf/neural.hpp"
#include "deconf/rng.hpp"

using namespace deconf;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/deconf_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

CheckpointMap awkward_entries() {
    CheckpointMap m;
    Tensor a = Tensor::matrix(2, 3, {1.0, -2.5, 3e-17, 1e300, -0.0, M_PI});
    Tensor b = Tensor::scalar(0.1);  // not exactly representable
    Tensor c = Tensor::vector({std::nextafter(1.0, 2.0), -1.0 / 3.0});
    m.emplace("model/layer0/W", a);
    m.emplace("model/layer0/b", b);
    m.emplace("adam/m/model/layer0/W", c);
    return m;
}

}  // namespace

TEST(Checkpoint, BinaryRoundTripIsBitExact) {
    TempFile f("ckpt.bin");
    CheckpointMap saved = awkward_entries();
    save_checkpoint(f.path, saved, CheckpointFormat::binary);
    CheckpointMap loaded = load_checkpoint(f.path);
    ASSERT_EQ(loaded.size(), saved.size());
    for (const auto& [name, t] : saved) {
        ASSERT_TRUE(loaded.count(name)) << name;
        EXPECT_EQ(loaded[name].shape, t.shape);
        ASSERT_EQ(loaded[name].data.size(), t.data.size());
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            std::uint64_t a, b;
            std::memcpy(&a, &loaded[name].data[i], 8);
            std::memcpy(&b, &t.data[i], 8);
            EXPECT_EQ(a, b) << name << "[" << i << "]";
        }
    }
}

TEST(Checkpoint, JsonRoundTripPreservesValues) {
    TempFile f("ckpt.json");
    CheckpointMap saved = awkward_entries();
    saved.erase("model/layer0/W");  // 1e300 prints fine but keep the file small
    saved.emplace("model/layer0/W", Tensor::matrix(2, 3, {1.0, -2.5, 3e-17, 42.0, -0.0, M_PI}));
    save_checkpoint(f.path, saved, CheckpointFormat::json);
    CheckpointMap loaded = load_checkpoint(f.path);
    ASSERT_EQ(loaded.size(), saved.size());
    for (const auto& [name, t] : saved) {
        ASSERT_TRUE(loaded.count(name)) << name;
        EXPECT_EQ(loaded[name].shape, t.shape);
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double got = loaded[name].data[i], want = t.data[i];
            EXPECT_LE(std::abs(got - want), 1e-15 * std::max(1.0, std::abs(want)))
                << name << "[" << i << "]";
        }
    }
}

TEST(Checkpoint, JsonFileIsHumanReadable) {
    TempFile f("ckpt_readable.json");
    CheckpointMap m;
    m.emplace("w", Tensor::vector({1.5, 2.5}));
    save_checkpoint(f.path, m, CheckpointFormat::json);
    std::ifstream is(f.path);
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    EXPECT_NE(content.find("\"shape\""), std::string::npos);
    EXPECT_NE(content.find("\"w\""), std::string::npos);
    EXPECT_NE(content.find("1.5"), std::string::npos);
}

TEST(Checkpoint, LoaderDetectsFormatFromContent) {
    TempFile fb("detect.bin"), fj("detect.json");
    CheckpointMap m;
    m.emplace("x", Tensor::scalar(7.0));
    save_checkpoint(fb.path, m, CheckpointFormat::binary);
    save_checkpoint(fj.path, m, CheckpointFormat::json);
    EXPECT_EQ(load_checkpoint(fb.path)["x"].item(), 7.0);
    EXPECT_EQ(load_checkpoint(fj.path)["x"].item(), 7.0);
}

TEST(Checkpoint, MissingFileAndGarbageAreRejected) {
    EXPECT_THROW(load_checkpoint("/tmp/deconf_no_such_checkpoint"), std::runtime_error);
    TempFile f("garbage");
    std::ofstream(f.path) << "not a checkpoint at all";
    EXPECT_THROW(load_checkpoint(f.path), std::runtime_error);
}

TEST(Checkpoint, TruncatedBinaryIsRejected) {
    TempFile f("trunc.bin");
    CheckpointMap m;
    m.emplace("w", Tensor::vector({1.0, 2.0, 3.0, 4.0}));
    save_checkpoint(f.path, m, CheckpointFormat::binary);
    std::ifstream is(f.path, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();
    std::ofstream os(f.path, std::ios::binary | std::ios::trunc);
    os.write(content.data(), static_cast<std::streamsize>(content.size() - 10));
    os.close();
    EXPECT_THROW(load_checkpoint(f.path), std::runtime_error);
}

TEST(Checkpoint, RestoreRoundTripsAGruThroughDisk) {
    TempFile f("gru.bin");
    Rng rng(5);
    GruParams p = GruParams::init(2, 3, rng);
    std::vector<ParamRef> refs = collect_params(p, "gru");
    save_checkpoint(f.path, snapshot_params(refs), CheckpointFormat::binary);

    GruParams q = GruParams::init(2, 3, rng);  // different draw
    std::vector<ParamRef> qrefs = collect_params(q, "gru");
    EXPECT_NE(q.Wr.data, p.Wr.data);
    restore_params(qrefs, load_checkpoint(f.path));
    EXPECT_EQ(q.Wr.data, p.Wr.data);
    EXPECT_EQ(q.Uh.data, p.Uh.data);
    EXPECT_EQ(q.bz.data, p.bz.data);
}

TEST(Checkpoint, RestoreErrorsNameTheParameter) {
    Rng rng(9);
    GruParams p = GruParams::init(2, 3, rng);
    std::vector<ParamRef> refs = collect_params(p, "gru");
    CheckpointMap partial = snapshot_params(refs);
    partial.erase("gru/Uh");
    try {
        restore_params(refs, partial);
        FAIL() << "expected missing-parameter error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("gru/Uh"), std::string::npos);
    }

    CheckpointMap wrong = snapshot_params(refs);
    wrong["gru/br"] = Tensor::zeros({4});
    try {
        restore_params(refs, wrong);
        FAIL() << "expected shape-mismatch error";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("gru/br"), std::string::npos);
        EXPECT_NE(msg.find("(4)"), std::string::npos);
    }
}

TEST(Checkpoint, ExtraEntriesAreIgnoredOnRestore) {
    Rng rng(15);
    GruParams p = GruParams::init(2, 2, rng);
    std::vector<ParamRef> refs = collect_params(p, "gru");
    CheckpointMap m = snapshot_params(refs);
    m.emplace("train/epoch", Tensor::scalar(12.0));
    m.emplace("adam/step", Tensor::scalar(340.0));
    EXPECT_NO_THROW(restore_params(refs, m));
}

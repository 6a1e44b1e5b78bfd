#include "deconf/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "deconf/rng.hpp"

using namespace deconf;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, double lo = -2.0, double hi = 2.0) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST(Tensor, ShapeMismatchOnConstruction) {
    EXPECT_THROW(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
}

TEST(Tensor, MatmulIdentity) {
    Tape tape;
    Var id2 = tape.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    Var a = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    Var out = matmul(id2, a);
    EXPECT_EQ(out.shape(), Shape({2, 3}));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(out.value().data[i], a.value().data[i]);
}

TEST(Tensor, TanhOfZeroIsZero) {
    Tape tape;
    Var z = tape.leaf(Tensor::zeros({4}));
    Var out = tanh(z);
    for (double v : out.value().data) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, ConcatKeepsOrder) {
    Tape tape;
    Var a = tape.leaf(Tensor::vector({1, 2, 3}));
    Var b = tape.leaf(Tensor::vector({4, 5}));
    Var out = concat({a, b});
    EXPECT_EQ(out.shape(), Shape({5}));
    const std::vector<double> want{1, 2, 3, 4, 5};
    EXPECT_EQ(out.value().data, want);
}

TEST(Tensor, ShapeErrorNamesOpAndShapes) {
    Tape tape;
    Var a = tape.leaf(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
    Var b = tape.leaf(Tensor::matrix(4, 5, std::vector<double>(20, 1.0)));
    try {
        matmul(a, b);
        FAIL() << "expected shape error";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("(2,3)"), std::string::npos);
        EXPECT_NE(msg.find("(4,5)"), std::string::npos);
    }
}

TEST(Backward, SquareAtThree) {
    Tape tape;
    Tensor w = Tensor::scalar(3.0);
    w.requires_grad = true;
    Var v = tape.leaf(w);
    Var loss = mul(v, v);
    GradientMap grads = tape.backward(loss);
    EXPECT_DOUBLE_EQ(grads.at(v.id()).item(), 6.0);
}

TEST(Backward, SumTanhAtZeroIsOnes) {
    Tape tape;
    Tensor w = Tensor::zeros({5});
    w.requires_grad = true;
    Var v = tape.leaf(w);
    GradientMap grads = tape.backward(sum(tanh(v)));
    for (double g : grads.at(v.id()).data) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, NonScalarOutputRejected) {
    Tape tape;
    Tensor w = Tensor::zeros({3});
    w.requires_grad = true;
    Var v = tape.leaf(w);
    EXPECT_THROW(tape.backward(v), std::invalid_argument);
}

TEST(Backward, LeavesWithoutGradGetNoEntry) {
    Tape tape;
    Tensor w = Tensor::scalar(2.0);
    w.requires_grad = true;
    Var v = tape.leaf(w);
    Var c = tape.leaf(Tensor::scalar(5.0));
    GradientMap grads = tape.backward(mul(v, c));
    EXPECT_EQ(grads.count(v.id()), 1u);
    EXPECT_EQ(grads.count(c.id()), 0u);
}

TEST(Backward, DeterministicAcrossPasses) {
    Rng rng(41);
    Tape tape;
    std::vector<Var> leaves;
    for (int i = 0; i < 3; ++i) {
        Tensor t = random_tensor(rng, {4});
        t.requires_grad = true;
        leaves.push_back(tape.leaf(t));
    }
    Var loss = sum(tanh(add(mul(leaves[0], leaves[1]), leaves[2])));
    GradientMap g1 = tape.backward(loss);
    GradientMap g2 = tape.backward(loss);
    for (const Var& v : leaves) {
        const Tensor& a = g1.at(v.id());
        const Tensor& b = g2.at(v.id());
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_EQ(a.data[i], b.data[i]);  // bit-identical
        }
    }
}

TEST(Backward, GradOfSumOverConcatIsConcatOfGrads) {
    Rng rng(7);
    Tensor ta = random_tensor(rng, {3});
    Tensor tb = random_tensor(rng, {4});
    ta.requires_grad = tb.requires_grad = true;

    Tape joint;
    Var a = joint.leaf(ta);
    Var b = joint.leaf(tb);
    Var loss = sum(mul(concat({a, b}), concat({a, b})));
    GradientMap gj = joint.backward(loss);

    Tape split;
    Var a2 = split.leaf(ta);
    Var b2 = split.leaf(tb);
    Var loss2 = add(sum(mul(a2, a2)), sum(mul(b2, b2)));
    GradientMap gs = split.backward(loss2);

    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_DOUBLE_EQ(gj.at(a.id()).data[i], gs.at(a2.id()).data[i]);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_DOUBLE_EQ(gj.at(b.id()).data[i], gs.at(b2.id()).data[i]);
}

TEST(CheckGradient, QuadraticIsExact) {
    Tensor w = Tensor::vector({1.5, -0.5, 2.0});
    w.requires_grad = true;
    const double err = check_gradient(
        [](Tape&, const std::vector<Var>& params) { return sum(mul(params[0], params[0])); }, {w},
        1e-5);
    EXPECT_LT(err, 1e-9);
}

TEST(CheckGradient, NonFiniteLossThrows) {
    Tensor w = Tensor::scalar(-1.0);
    w.requires_grad = true;
    EXPECT_THROW(check_gradient([](Tape&, const std::vector<Var>& params) { return log(params[0]); },
                                {w}, 1e-5),
                 std::runtime_error);
}

TEST(CheckGradient, TwoLayerMlpLoss) {
    // 2-layer perceptron, 16 parameters: W1 (3x2), b1 (3), W2 (2x3), scalar b2, input fixed.
    Rng rng(123);
    Tensor w1 = random_tensor(rng, {3, 2}, -1.0, 1.0);
    Tensor b1 = random_tensor(rng, {3}, -1.0, 1.0);
    Tensor w2 = random_tensor(rng, {2, 3}, -1.0, 1.0);
    Tensor b2 = random_tensor(rng, {}, -1.0, 1.0);
    for (Tensor* t : {&w1, &b1, &w2, &b2}) t->requires_grad = true;
    ASSERT_EQ(w1.size() + b1.size() + w2.size() + b2.size(), 16u);

    const double err = check_gradient(
        [](Tape& tape, const std::vector<Var>& p) {
            Var x = tape.leaf(Tensor::vector({0.3, -1.2}));
            Var h = tanh(add(matmul(p[0], x), p[1]));
            Var out = add(matmul(p[2], h), p[3]);
            return sum(mul(out, out));
        },
        {w1, b1, w2, b2}, 1e-5);
    EXPECT_LT(err, 1e-5);
}

// Every primitive op against central finite differences, random inputs, 100 trials.
TEST(Primitives, FiniteDifferenceSweep) {
    struct Case {
        const char* name;
        std::function<Var(Tape&, const std::vector<Var>&)> fn;
        std::vector<Shape> shapes;
        double lo, hi;
    };
    std::vector<Case> cases = {
        {"add", [&](Tape&, const std::vector<Var>& p) { return sum(add(p[0], p[1])); },
         {{2, 3}, {2, 3}}, -2, 2},
        {"add_rowbcast", [&](Tape&, const std::vector<Var>& p) { return sum(mul(add(p[0], p[1]), add(p[0], p[1]))); },
         {{2, 3}, {3}}, -2, 2},
        {"add_scalar_bcast", [&](Tape&, const std::vector<Var>& p) { return sum(mul(add(p[0], p[1]), add(p[0], p[1]))); },
         {{2, 3}, {}}, -2, 2},
        {"sub", [&](Tape&, const std::vector<Var>& p) { return sum(mul(sub(p[0], p[1]), sub(p[0], p[1]))); },
         {{4}, {4}}, -2, 2},
        {"mul", [&](Tape&, const std::vector<Var>& p) { return sum(mul(p[0], p[1])); }, {{3, 2}, {3, 2}}, -2, 2},
        {"mul_rowbcast", [&](Tape&, const std::vector<Var>& p) { return sum(mul(p[0], p[1])); }, {{3, 2}, {2}}, -2, 2},
        {"div", [&](Tape&, const std::vector<Var>& p) { return sum(div(p[0], p[1])); }, {{4}, {4}}, 0.5, 2},
        {"neg", [&](Tape&, const std::vector<Var>& p) { return sum(mul(neg(p[0]), neg(p[0]))); }, {{4}}, -2, 2},
        {"scale", [&](Tape&, const std::vector<Var>& p) { return sum(scale(p[0], -1.7)); }, {{4}}, -2, 2},
        {"add_const", [&](Tape&, const std::vector<Var>& p) { return sum(mul(add_const(p[0], 0.3), add_const(p[0], 0.3))); }, {{4}}, -2, 2},
        {"tanh", [&](Tape&, const std::vector<Var>& p) { return sum(tanh(p[0])); }, {{5}}, -2, 2},
        {"sigmoid", [&](Tape&, const std::vector<Var>& p) { return sum(sigmoid(p[0])); }, {{5}}, -2, 2},
        {"softplus", [&](Tape&, const std::vector<Var>& p) { return sum(softplus(p[0])); }, {{5}}, -2, 2},
        {"exp", [&](Tape&, const std::vector<Var>& p) { return sum(exp(p[0])); }, {{5}}, -2, 2},
        {"log", [&](Tape&, const std::vector<Var>& p) { return sum(log(p[0])); }, {{5}}, 0.5, 2},
        {"sum", [&](Tape&, const std::vector<Var>& p) { return mul(sum(p[0]), sum(p[0])); }, {{2, 3}}, -2, 2},
        {"mean", [&](Tape&, const std::vector<Var>& p) { return mul(mean(p[0]), mean(p[0])); }, {{2, 3}}, -2, 2},
        {"slice", [&](Tape&, const std::vector<Var>& p) { return sum(mul(slice(p[0], 1, 2), slice(p[0], 1, 2))); }, {{4}}, -2, 2},
        {"concat", [&](Tape&, const std::vector<Var>& p) { return sum(mul(concat({p[0], p[1]}), concat({p[0], p[1]}))); },
         {{3}, {2}}, -2, 2},
        {"matmul_mm", [&](Tape&, const std::vector<Var>& p) { return sum(matmul(p[0], p[1])); }, {{2, 3}, {3, 2}}, -2, 2},
        {"matmul_mv", [&](Tape&, const std::vector<Var>& p) { return sum(matmul(p[0], p[1])); }, {{2, 3}, {3}}, -2, 2},
        {"matmul_vm", [&](Tape&, const std::vector<Var>& p) { return sum(matmul(p[0], p[1])); }, {{3}, {3, 2}}, -2, 2},
    };
    Rng rng(2024);
    const int trials_per_case = 100;
    for (const Case& c : cases) {
        for (int trial = 0; trial < trials_per_case; ++trial) {
            std::vector<Tensor> params;
            for (const Shape& s : c.shapes) {
                Tensor t = random_tensor(rng, s, c.lo, c.hi);
                t.requires_grad = true;
                params.push_back(std::move(t));
            }
            const double err = check_gradient(c.fn, params, 1e-6);
            EXPECT_LT(err, 1e-6) << "op " << c.name << " trial " << trial;
        }
    }
}

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "xvl/autodiff.hpp"
#include "xvl/meta.hpp"
#include "xvl/params.hpp"

using namespace xvl;
using ad::Var;

namespace {

// Two-layer perceptron with a squared-error head.
Var mlp_loss(const VarSet& p, ad::Graph& g, const Tensor& x, const Tensor& y) {
    Var h = ad::tanh(ad::linear(g.constant(x), p["w1"], p["b1"]));
    Var out = ad::linear(h, p["w2"], p["b2"]);
    Var d = out - g.constant(y);
    return ad::scale(ad::sum(d * d), 0.5);
}

ParamSet mlp_params(std::mt19937_64& rng) {
    ParamSet p;
    p.add("w1", testutil::random_tensor(rng, 5, 4));
    p.add("b1", testutil::random_tensor(rng, 1, 5));
    p.add("w2", testutil::random_tensor(rng, 2, 5));
    p.add("b2", testutil::random_tensor(rng, 1, 2));
    return p;
}

} // namespace

TEST(Grad, HalfSquareAtThree) {
    ad::Graph g;
    Var t = g.leaf(Tensor::scalar(3.0));
    Var loss = ad::scale(t * t, 0.5);
    EXPECT_DOUBLE_EQ(ad::grad(loss, {t})[0].value().item(), 3.0);
}

TEST(Grad, DisconnectedParameterGetsZero) {
    ad::Graph g;
    Var t = g.leaf(Tensor::scalar(3.0));
    Var u = g.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    Var loss = ad::scale(t, 0.0) + g.scalar(5.0);
    const auto gr = ad::grad(loss, {t, u});
    EXPECT_EQ(gr[0].value().item(), 0.0);
    EXPECT_EQ(gr[1].value(), Tensor(2, 2, 0.0));
}

TEST(Grad, ConstantLossGivesZero) {
    ad::Graph g;
    Var t = g.leaf(Tensor::scalar(3.0));
    Var loss = g.scalar(2.0);
    EXPECT_EQ(ad::grad(loss, {t})[0].value().item(), 0.0);
}

TEST(Grad, NonScalarLossRejected) {
    ad::Graph g;
    Var t = g.leaf(Tensor::matrix(1, 2, {1, 2}));
    EXPECT_THROW(ad::grad(t * t, {t}), ShapeError);
}

TEST(Grad, UnattachedLossRejected) {
    ad::Graph g;
    Var t = g.leaf(Tensor::scalar(1.0));
    EXPECT_THROW(ad::grad(Var{}, {t}), GraphError);
}

TEST(Grad, ForeignVariableRejected) {
    ad::Graph g1, g2;
    Var a = g1.leaf(Tensor::scalar(1.0));
    Var b = g2.leaf(Tensor::scalar(1.0));
    EXPECT_THROW(ad::grad(a * a, {b}), GraphError);
    EXPECT_THROW(a + b, GraphError);
}

TEST(Grad, TwoLayerPerceptronMatchesFiniteDifferences) {
    std::mt19937_64 rng(11);
    const ParamSet theta = mlp_params(rng);
    const Tensor x = testutil::random_tensor(rng, 3, 4);
    const Tensor y = testutil::random_tensor(rng, 3, 2);
    ad::Graph g;
    const VarSet p = bind(g, theta);
    const ParamSet analytic = to_params(p, ad::grad(mlp_loss(p, g, x, y), p.vars()));
    const ParamSet numeric = testutil::central_difference(
        [&](const ParamSet& q) {
            ad::Graph h;
            return mlp_loss(bind_constant(h, q), h, x, y).value().item();
        },
        theta);
    EXPECT_LE(testutil::max_rel(analytic, numeric), 1e-4);
}

TEST(Grad, SecondDerivativeOfCubic) {
    ad::Graph g;
    Var t = g.leaf(Tensor::scalar(1.5));
    Var f = t * t * t;
    Var df = ad::grad(f, {t}, true)[0];
    EXPECT_NEAR(df.value().item(), 3 * 1.5 * 1.5, 1e-12);
    Var d2f = ad::grad(df, {t})[0];
    EXPECT_NEAR(d2f.value().item(), 6 * 1.5, 1e-12);
}

TEST(Grad, WithoutCreateGraphResultIsConstant) {
    ad::Graph g;
    Var t = g.leaf(Tensor::scalar(2.0));
    Var df = ad::grad(t * t, {t})[0];
    EXPECT_FALSE(df.requires_grad());
    Var d2 = ad::grad(ad::sum(df * t), {t})[0];
    EXPECT_DOUBLE_EQ(d2.value().item(), 4.0);
}

TEST(Grad, DeterministicAcrossGraphs) {
    std::mt19937_64 rng(5);
    const ParamSet theta = mlp_params(rng);
    const Tensor x = testutil::random_tensor(rng, 4, 4);
    const Tensor y = testutil::random_tensor(rng, 4, 2);
    auto run = [&] {
        ad::Graph g;
        const VarSet p = bind(g, theta);
        return to_params(p, ad::grad(mlp_loss(p, g, x, y), p.vars()));
    };
    EXPECT_EQ(run(), run());
}

TEST(Grad, Linearity) {
    std::mt19937_64 rng(9);
    const ParamSet theta = mlp_params(rng);
    const Tensor x = testutil::random_tensor(rng, 3, 4);
    const Tensor y1 = testutil::random_tensor(rng, 3, 2);
    const Tensor y2 = testutil::random_tensor(rng, 3, 2);
    const double a = 0.7, b = -2.3;
    ad::Graph g;
    const VarSet p = bind(g, theta);
    Var l1 = mlp_loss(p, g, x, y1), l2 = mlp_loss(p, g, x, y2);
    const ParamSet g1 = to_params(p, ad::grad(l1, p.vars()));
    const ParamSet g2 = to_params(p, ad::grad(l2, p.vars()));
    const ParamSet gc = to_params(p, ad::grad(ad::scale(l1, a) + ad::scale(l2, b), p.vars()));
    for (std::size_t i = 0; i < gc.size(); ++i)
        for (std::size_t j = 0; j < gc.entry(i).value.size(); ++j) {
            const double want = a * g1.entry(i).value[j] + b * g2.entry(i).value[j];
            EXPECT_LE(std::abs(gc.entry(i).value[j] - want), 1e-12 * std::max(1.0, std::abs(want)));
        }
}

TEST(Grad, CheckedModeNamesOp) {
    ad::Graph g;
    g.set_checked(true);
    Var t = g.leaf(Tensor::scalar(-1.0));
    try {
        ad::log(t);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
    }
}

TEST(Grad, UncheckedModeLetsNanThrough) {
    ad::Graph g;
    Var t = g.leaf(Tensor::scalar(-1.0));
    EXPECT_TRUE(std::isnan(ad::log(t).value().item()));
}

TEST(Ops, MatmulMatchesDenseOracle) {
    std::mt19937_64 rng(3);
    const Tensor a = testutil::random_tensor(rng, 3, 5), b = testutil::random_tensor(rng, 5, 2);
    ad::Graph g;
    const Tensor c = ad::matmul(g.constant(a), g.constant(b)).value();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 5; ++k) s += a(i, k) * b(k, j);
            EXPECT_NEAR(c(i, j), s, 1e-14);
        }
}

TEST(Ops, ShapeMismatchRaises) {
    ad::Graph g;
    Var a = g.constant(Tensor(2, 3, 1.0)), b = g.constant(Tensor(2, 2, 1.0));
    EXPECT_THROW(ad::matmul(a, b), ShapeError);
    EXPECT_THROW(a + b, ShapeError);
}

TEST(Ops, LogSoftmaxRowsSumToOne) {
    ad::Graph g;
    Var x = g.constant(Tensor::matrix(2, 3, {1000, 1001, 999, -5, 0, 5}));
    const Tensor p = ad::softmax_rows(x).value();
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(p(r, 0) + p(r, 1) + p(r, 2), 1.0, 1e-12);
    EXPECT_TRUE(p.all_finite());
}

TEST(Ops, PickAndScatterAreAdjoint) {
    ad::Graph g;
    Var x = g.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    const Tensor picked = ad::pick(x, {2, 0}).value();
    EXPECT_EQ(picked, Tensor::matrix(2, 1, {3, 4}));
    const Tensor back = ad::scatter(g.constant(picked), {2, 0}, 3).value();
    EXPECT_EQ(back, Tensor::matrix(2, 3, {0, 0, 3, 4, 0, 0}));
    EXPECT_THROW(ad::pick(x, {3, 0}), ShapeError);
}

TEST(GradThroughStep, ClosedFormQuadratic) {
    ParamSet t;
    t.add("t", Tensor::scalar(1.0));
    const Objective q = [](const VarSet& p) { return ad::scale(p["t"] * p["t"], 0.5 * 2.0); };
    EXPECT_NEAR(grad_through_step(t, q, q, 0.1).grad.entry(0).value.item(), 1.28, 1e-10);
    EXPECT_NEAR(grad_through_step(t, q, q, 0.1, GradOrder::FirstOrder).grad.entry(0).value.item(), 1.6, 1e-10);
}

TEST(GradThroughStep, AlphaZeroIsPlainGradient) {
    std::mt19937_64 rng(2);
    const ParamSet theta = mlp_params(rng);
    const Tensor x = testutil::random_tensor(rng, 3, 4);
    const Tensor y = testutil::random_tensor(rng, 3, 2);
    const Tensor y2 = testutil::random_tensor(rng, 3, 2);
    const Objective outer = [&](const VarSet& p) { return mlp_loss(p, *p.at(0).graph(), x, y); };
    const Objective inner = [&](const VarSet& p) { return mlp_loss(p, *p.at(0).graph(), x, y2); };
    ad::Graph g;
    const VarSet p = bind(g, theta);
    const ParamSet plain = to_params(p, ad::grad(outer(p), p.vars()));
    EXPECT_EQ(grad_through_step(theta, outer, inner, 0.0).grad, plain);
}

TEST(GradThroughStep, NegativeAlphaRejected) {
    ParamSet t;
    t.add("t", Tensor::scalar(1.0));
    const Objective q = [](const VarSet& p) { return p["t"] * p["t"]; };
    EXPECT_THROW(grad_through_step(t, q, q, -0.1), ConfigError);
}

TEST(GradThroughStep, NonFiniteIntermediateRaises) {
    ParamSet t;
    t.add("t", Tensor::scalar(1.0));
    const Objective q = [](const VarSet& p) { return ad::scale(ad::exp(p["t"]), 1e308); };
    EXPECT_THROW(grad_through_step(t, q, q, 0.1, GradOrder::Exact, 1, true), NumericError);
}

TEST(GradThroughStep, MatchesFiniteDifferencesOfComposition) {
    std::mt19937_64 rng(21);
    const ParamSet theta = mlp_params(rng);
    const Tensor xs = testutil::random_tensor(rng, 4, 4), ys = testutil::random_tensor(rng, 4, 2);
    const Tensor xq = testutil::random_tensor(rng, 4, 4), yq = testutil::random_tensor(rng, 4, 2);
    const double alpha = 0.05;
    const Objective inner = [&](const VarSet& p) { return mlp_loss(p, *p.at(0).graph(), xs, ys); };
    const Objective outer = [&](const VarSet& p) { return mlp_loss(p, *p.at(0).graph(), xq, yq); };
    const ParamSet analytic = grad_through_step(theta, outer, inner, alpha).grad;
    // Oracle: adapt with an explicitly formed numeric inner gradient, then evaluate.
    auto composed = [&](const ParamSet& q) {
        ad::Graph g;
        const VarSet p = bind(g, q);
        const auto gr = ad::grad(inner(p), p.vars());
        ParamSet adapted = q;
        for (std::size_t i = 0; i < q.size(); ++i) {
            Tensor v = q.entry(i).value;
            for (std::size_t j = 0; j < v.size(); ++j) v[j] -= alpha * gr[i].value()[j];
            adapted.set(i, v);
        }
        ad::Graph h;
        return outer(bind_constant(h, adapted)).value().item();
    };
    EXPECT_LE(testutil::max_rel(analytic, testutil::central_difference(composed, theta)), 1e-3);
}

TEST(GradThroughStep, FirstOrderDiffersFromExactOnModel) {
    std::mt19937_64 rng(4);
    const ParamSet theta = mlp_params(rng);
    const Tensor x = testutil::random_tensor(rng, 4, 4), y = testutil::random_tensor(rng, 4, 2);
    const Objective f = [&](const VarSet& p) { return mlp_loss(p, *p.at(0).graph(), x, y); };
    const ParamSet exact = grad_through_step(theta, f, f, 0.1).grad;
    const ParamSet first = grad_through_step(theta, f, f, 0.1, GradOrder::FirstOrder).grad;
    EXPECT_FALSE(exact == first);
}

TEST(FaultInjection, ScopedFaultCorruptsOnlyItsOp) {
    ad::Graph g;
    Var t = g.leaf(Tensor::scalar(0.5));
    const double clean = ad::grad(ad::tanh(t), {t})[0].value().item();
    {
        ad::ScopedFault f(ad::Op::Tanh);
        EXPECT_NEAR(ad::grad(ad::tanh(t), {t})[0].value().item(), 1.01 * clean, 1e-15);
        EXPECT_DOUBLE_EQ(ad::grad(ad::exp(t), {t})[0].value().item(), std::exp(0.5));
    }
    EXPECT_DOUBLE_EQ(ad::grad(ad::tanh(t), {t})[0].value().item(), clean);
    EXPECT_EQ(ad::parse_op("tanh"), ad::Op::Tanh);
    EXPECT_FALSE(ad::parse_op("nope").has_value());
}

#include <algorithm>

#include <gtest/gtest.h>

#include "xvl/gradcheck.hpp"

using namespace xvl;

namespace {

constexpr ad::Op kDifferentiable[] = {
    ad::Op::MatMul, ad::Op::Transpose, ad::Op::Add, ad::Op::Sub, ad::Op::Mul, ad::Op::Div,
    ad::Op::Scale, ad::Op::Exp, ad::Op::Log, ad::Op::Tanh, ad::Op::Relu, ad::Op::Sqrt,
    ad::Op::SumAll, ad::Op::SumRows, ad::Op::SumCols, ad::Op::BroadcastScalar, ad::Op::BroadcastRows,
    ad::Op::BroadcastCols, ad::Op::Pick, ad::Op::Scatter};

bool contains(const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
}

} // namespace

TEST(GradCheck, AllChecksPass) {
    const auto report = gradcheck::run({});
    for (const auto& c : report.checks) {
        EXPECT_TRUE(c.passed) << c.name << " err " << c.max_error << " tol " << c.tolerance;
        EXPECT_GT(c.coordinates, 0u) << c.name;
    }
    EXPECT_TRUE(report.passed());
    EXPECT_TRUE(report.failures().empty());
    EXPECT_LT(report.seconds, 60.0);
}

TEST(GradCheck, CoversEveryPrimitiveAndObjective) {
    const auto report = gradcheck::run({});
    for (auto op : kDifferentiable) EXPECT_NO_THROW(report.at(std::string("op:") + ad::op_name(op))) << ad::op_name(op);
    for (const char* name : {"contrastive", "model:contrastive", "model:task", "inner-step", "meta:unsupervised",
                             "meta:supervised", "meta:first-vs-second-order", "meta:alpha-zero"})
        EXPECT_NO_THROW(report.at(name)) << name;
    EXPECT_THROW(report.at("op:nothing"), Error);
    EXPECT_EQ(report.at("meta:unsupervised").tolerance, gradcheck::kMetaTolerance);
    EXPECT_EQ(report.at("op:matmul").tolerance, gradcheck::kFirstOrderTolerance);
    EXPECT_LE(report.at("meta:alpha-zero").max_error, 1e-12);
}

TEST(GradCheck, OtherSeedsPass) {
    for (std::uint64_t seed : {2u, 3u, 17u}) {
        gradcheck::Options o;
        o.seed = seed;
        const auto r = gradcheck::run(o);
        EXPECT_TRUE(r.passed()) << "seed " << seed << ": " << (r.failures().empty() ? "" : r.failures().front());
    }
}

TEST(GradCheck, DeterministicForASeed) {
    const auto a = gradcheck::run({}), b = gradcheck::run({});
    ASSERT_EQ(a.checks.size(), b.checks.size());
    for (std::size_t i = 0; i < a.checks.size(); ++i) {
        EXPECT_EQ(a.checks[i].name, b.checks[i].name);
        EXPECT_EQ(a.checks[i].max_error, b.checks[i].max_error);
    }
}

TEST(GradCheck, InjectedFaultIsReportedByName) {
    for (auto op : kDifferentiable) {
        gradcheck::Options o;
        o.fault = op;
        const auto r = gradcheck::run(o);
        const std::string name = std::string("op:") + ad::op_name(op);
        EXPECT_FALSE(r.passed()) << name;
        EXPECT_TRUE(contains(r.failures(), name)) << name;
    }
}

TEST(GradCheck, TanhFaultPropagatesToModelAndMetaChecks) {
    gradcheck::Options o;
    o.fault = ad::Op::Tanh;
    const auto f = gradcheck::run(o).failures();
    for (const char* name : {"op:tanh", "model:task", "model:contrastive", "inner-step", "meta:unsupervised",
                             "meta:supervised"})
        EXPECT_TRUE(contains(f, name)) << name;
    EXPECT_FALSE(contains(f, "op:exp"));
    EXPECT_FALSE(contains(f, "contrastive"));
}

TEST(GradCheck, FaultIsScopedToTheRun) {
    gradcheck::Options o;
    o.fault = ad::Op::Mul;
    EXPECT_FALSE(gradcheck::run(o).passed());
    EXPECT_TRUE(gradcheck::run({}).passed());
}

TEST(GradCheck, HelpersAgreeOnAQuadratic) {
    ParamSet p;
    p.add("w", Tensor::matrix(1, 3, {1.0, -2.0, 0.5}));
    const Objective f = [](const VarSet& v) { return ad::sum(v["w"] * v["w"] * v["w"]); };
    const auto analytic = gradcheck::analytic_gradient(f, p);
    const auto numeric =
        gradcheck::numeric_gradient([&](const ParamSet& q) { return gradcheck::value_of(f, q); }, p, 1e-5);
    EXPECT_NEAR(analytic.at("w")[1], 12.0, 1e-12);
    EXPECT_LE(gradcheck::max_relative_error(analytic, numeric), 1e-8);
    EXPECT_EQ(gradcheck::max_abs_difference(analytic, analytic), 0.0);
}

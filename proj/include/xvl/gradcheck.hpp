#pragma once

// Finite-difference verification of every gradient the library relies on:
// each primitive op, the contrastive loss, the model losses, the inner step,
// and the unsupervised and supervised meta-gradients.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xvl/autodiff.hpp"
#include "xvl/batch.hpp"
#include "xvl/contrastive.hpp"
#include "xvl/meta.hpp"
#include "xvl/model.hpp"
#include "xvl/params.hpp"
#include "xvl/rng.hpp"

namespace xvl::gradcheck {

inline constexpr double kFirstOrderTolerance = 1e-4;
inline constexpr double kMetaTolerance = 1e-3;
/// Coordinates whose analytic and numeric values are both below this are skipped.
inline constexpr double kNegligible = 1e-8;

struct Check {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    std::size_t coordinates = 0;
    bool passed = false;
    std::string note;
};

struct Report {
    std::vector<Check> checks;
    double seconds = 0.0;

    bool passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
    }
    std::vector<std::string> failures() const {
        std::vector<std::string> out;
        for (const auto& c : checks)
            if (!c.passed) out.push_back(c.name);
        return out;
    }
    const Check& at(const std::string& name) const {
        for (const auto& c : checks)
            if (c.name == name) return c;
        throw Error("no gradient check named '" + name + "'");
    }
};

struct Options {
    /// Corrupt the backward rule of this op while the suite runs.
    std::optional<ad::Op> fault;
    std::uint64_t seed = 1;
    double step = 1e-5;
};

/// Scalar function of a parameter set.
using ScalarFn = std::function<double(const ParamSet&)>;

/// Central differences of f at theta, one coordinate at a time.
inline ParamSet numeric_gradient(const ScalarFn& f, const ParamSet& theta, double h) {
    ParamSet out = theta.zeros_like();
    ParamSet probe = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        Tensor g = out.entry(i).value;
        const Tensor base = theta.entry(i).value;
        for (std::size_t j = 0; j < base.size(); ++j) {
            Tensor t = base;
            t[j] = base[j] + h;
            probe.set(i, t);
            const double fp = f(probe);
            t[j] = base[j] - h;
            probe.set(i, t);
            const double fm = f(probe);
            g[j] = (fp - fm) / (2.0 * h);
        }
        probe.set(i, base);
        out.set(i, std::move(g));
    }
    return out;
}

/// Largest |a - b| / max(|a|, |b|) over coordinates that are not negligible.
inline double max_relative_error(const ParamSet& a, const ParamSet& b, std::size_t* counted = nullptr) {
    if (!a.same_layout(b)) throw ShapeError("gradient layouts differ");
    double worst = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Tensor& x = a.entry(i).value;
        const Tensor& y = b.entry(i).value;
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double scale = std::max(std::abs(x[j]), std::abs(y[j]));
            if (scale <= kNegligible) continue;
            worst = std::max(worst, std::abs(x[j] - y[j]) / scale);
            ++n;
        }
    }
    if (counted) *counted = n;
    return worst;
}

inline double max_abs_difference(const ParamSet& a, const ParamSet& b) {
    if (!a.same_layout(b)) throw ShapeError("gradient layouts differ");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a.entry(i).value.size(); ++j)
            worst = std::max(worst, std::abs(a.entry(i).value[j] - b.entry(i).value[j]));
    return worst;
}

/// Value of an objective at theta (no gradients recorded).
inline double value_of(const Objective& f, const ParamSet& theta) {
    ad::Graph g;
    g.set_checked(true);
    return f(bind_constant(g, theta)).value().item();
}

/// Analytic gradient of an objective at theta.
inline ParamSet analytic_gradient(const Objective& f, const ParamSet& theta) {
    ad::Graph g;
    g.set_checked(true);
    const VarSet p = bind(g, theta);
    return to_params(p, ad::grad(f(p), p.vars()));
}

/// theta -> outer(theta - alpha * grad inner(theta)), evaluated numerically.
inline double composed_value(const Objective& outer, const Objective& inner, const ParamSet& theta, double alpha) {
    ad::Graph g;
    g.set_checked(true);
    const VarSet p = bind(g, theta);
    const VarSet adapted = inner_step(p, inner, alpha, GradOrder::FirstOrder);
    return outer(adapted).value().item();
}

namespace detail {

inline Check verdict(std::string name, double err, double tol, std::size_t coords, std::string note = {}) {
    return {std::move(name), err, tol, coords, err <= tol, std::move(note)};
}

inline Check compare(std::string name, const ParamSet& analytic, const ParamSet& numeric, double tol) {
    std::size_t n = 0;
    const double err = max_relative_error(analytic, numeric, &n);
    return verdict(std::move(name), err, tol, n);
}

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double lo, double hi) {
    Tensor t(r, c, 0.0);
    for (double& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

/// Signed values bounded away from zero (keeps relu off its kink).
inline Tensor away_from_zero(Rng& rng, std::size_t r, std::size_t c) {
    Tensor t(r, c, 0.0);
    for (double& v : t.values()) v = (rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.5);
    return t;
}

struct OpCase {
    ad::Op op;
    ParamSet inputs;
    /// Builds the op output from the bound inputs.
    std::function<ad::Var(const VarSet&)> build;
};

inline std::vector<OpCase> op_cases(Rng& rng) {
    using namespace ad;
    std::vector<OpCase> cases;
    auto one = [&](Op op, Tensor x, std::function<Var(const Var&)> f) {
        ParamSet p;
        p.add("x", std::move(x));
        cases.push_back({op, std::move(p), [f](const VarSet& v) { return f(v["x"]); }});
    };
    auto two = [&](Op op, Tensor a, Tensor b, std::function<Var(const Var&, const Var&)> f) {
        ParamSet p;
        p.add("a", std::move(a));
        p.add("b", std::move(b));
        cases.push_back({op, std::move(p), [f](const VarSet& v) { return f(v["a"], v["b"]); }});
    };
    two(Op::MatMul, random_tensor(rng, 3, 4, -1, 1), random_tensor(rng, 4, 2, -1, 1),
        [](const Var& a, const Var& b) { return matmul(a, b); });
    one(Op::Transpose, random_tensor(rng, 3, 2, -1, 1), [](const Var& x) { return transpose(x); });
    two(Op::Add, random_tensor(rng, 2, 3, -1, 1), random_tensor(rng, 2, 3, -1, 1),
        [](const Var& a, const Var& b) { return a + b; });
    two(Op::Sub, random_tensor(rng, 2, 3, -1, 1), random_tensor(rng, 2, 3, -1, 1),
        [](const Var& a, const Var& b) { return a - b; });
    two(Op::Mul, random_tensor(rng, 2, 3, -1, 1), random_tensor(rng, 2, 3, -1, 1),
        [](const Var& a, const Var& b) { return a * b; });
    two(Op::Div, random_tensor(rng, 2, 3, -1, 1), random_tensor(rng, 2, 3, 0.5, 2.0),
        [](const Var& a, const Var& b) { return a / b; });
    one(Op::Scale, random_tensor(rng, 2, 3, -1, 1), [](const Var& x) { return scale(x, -1.7); });
    one(Op::Exp, random_tensor(rng, 2, 3, -1, 1), [](const Var& x) { return exp(x); });
    one(Op::Log, random_tensor(rng, 2, 3, 0.5, 2.0), [](const Var& x) { return log(x); });
    one(Op::Tanh, random_tensor(rng, 2, 3, -1.5, 1.5), [](const Var& x) { return tanh(x); });
    one(Op::Relu, away_from_zero(rng, 2, 3), [](const Var& x) { return relu(x); });
    one(Op::Sqrt, random_tensor(rng, 2, 3, 0.5, 2.0), [](const Var& x) { return sqrt(x); });
    one(Op::SumAll, random_tensor(rng, 2, 3, -1, 1), [](const Var& x) { return broadcast_scalar(sum(x), 2, 2); });
    one(Op::SumRows, random_tensor(rng, 3, 2, -1, 1), [](const Var& x) { return sum_rows(x); });
    one(Op::SumCols, random_tensor(rng, 3, 2, -1, 1), [](const Var& x) { return sum_cols(x); });
    one(Op::BroadcastScalar, random_tensor(rng, 1, 1, -1, 1),
        [](const Var& x) { return broadcast_scalar(x, 2, 3); });
    one(Op::BroadcastRows, random_tensor(rng, 1, 3, -1, 1), [](const Var& x) { return broadcast_rows(x, 4); });
    one(Op::BroadcastCols, random_tensor(rng, 3, 1, -1, 1), [](const Var& x) { return broadcast_cols(x, 2); });
    one(Op::Pick, random_tensor(rng, 3, 4, -1, 1), [](const Var& x) { return pick(x, {2, 0, 3}); });
    one(Op::Scatter, random_tensor(rng, 3, 1, -1, 1), [](const Var& x) { return scatter(x, {1, 3, 0}, 4); });
    return cases;
}

/// A small model and a labelled episode to differentiate through.
struct Fixture {
    Model model;
    ParamSet theta;
    Episode episode;
};

inline PairedBatch random_batch(Rng& rng, std::size_t n, const ModelConfig& mc, const std::string& lang) {
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.below(mc.classes);
    return PairedBatch(random_tensor(rng, n, mc.image_dim, -1, 1), random_tensor(rng, n, mc.text_dim, -1, 1),
                       labels, lang);
}

inline Fixture fixture(std::uint64_t seed) {
    ModelConfig mc;
    mc.image_dim = 5;
    mc.text_dim = 4;
    mc.hidden_dim = 6;
    mc.embed_dim = 3;
    mc.classes = 3;
    Model model(mc);
    Rng rng(derive_seed(seed, "gradcheck-batches"));
    Episode ep{random_batch(rng, 6, mc, "aux"), random_batch(rng, 6, mc, "aux"), "aux"};
    ParamSet theta = model.init(derive_seed(seed, "gradcheck-init"));
    // Non-zero biases so their gradients are exercised away from symmetric points.
    for (std::size_t i = 0; i < theta.size(); ++i) {
        if (theta.entry(i).name.find(".b") == std::string::npos) continue;
        const auto& v = theta.entry(i).value;
        theta.set(i, random_tensor(rng, v.rows(), v.cols(), -0.3, 0.3));
    }
    return {std::move(model), std::move(theta), std::move(ep)};
}

} // namespace detail

inline Report run(const Options& options = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<ad::ScopedFault> fault;
    if (options.fault) fault.emplace(*options.fault);
    const double h = options.step;
    Report report;
    Rng rng(derive_seed(options.seed, "gradcheck-ops"));

    // Primitive ops: loss = sum(weights * op(inputs)) with fixed random weights.
    for (auto& c : detail::op_cases(rng)) {
        ad::Graph probe;
        const Tensor shape = c.build(bind_constant(probe, c.inputs)).value();
        const Tensor weights = detail::random_tensor(rng, shape.rows(), shape.cols(), 0.5, 1.5);
        const Objective f = [&c, weights](const VarSet& p) {
            return ad::sum(c.build(p) * p.at(0).graph()->constant(weights));
        };
        report.checks.push_back(detail::compare(std::string("op:") + ad::op_name(c.op),
                                                analytic_gradient(f, c.inputs),
                                                numeric_gradient([&](const ParamSet& q) { return value_of(f, q); },
                                                                 c.inputs, h),
                                                kFirstOrderTolerance));
    }

    // Contrastive loss with respect to the projections themselves.
    {
        ParamSet uv;
        uv.add("u", detail::random_tensor(rng, 5, 4, -1, 1));
        uv.add("v", detail::random_tensor(rng, 5, 4, -1, 1));
        const Objective f = [](const VarSet& p) { return contrastive_loss(p["u"], p["v"]); };
        report.checks.push_back(detail::compare(
            "contrastive", analytic_gradient(f, uv),
            numeric_gradient([&](const ParamSet& q) { return value_of(f, q); }, uv, h), kFirstOrderTolerance));
    }

    const detail::Fixture fx = detail::fixture(options.seed);
    const Model& model = fx.model;
    const PairedBatch& support = fx.episode.support;
    const PairedBatch& query = fx.episode.query;
    const Objective cl_support = [&](const VarSet& p) { return model_contrastive_loss(model, p, support); };
    const Objective cl_query = [&](const VarSet& p) { return model_contrastive_loss(model, p, query); };
    const Objective task_support = [&](const VarSet& p) { return model.task_loss(p, support); };
    const Objective task_query = [&](const VarSet& p) { return model.task_loss(p, query); };
    auto numeric = [&](const Objective& f, const ParamSet& at) {
        return numeric_gradient([&](const ParamSet& q) { return value_of(f, q); }, at, h);
    };

    report.checks.push_back(detail::compare("model:contrastive", analytic_gradient(cl_support, fx.theta),
                                            numeric(cl_support, fx.theta), kFirstOrderTolerance));
    report.checks.push_back(detail::compare("model:task", analytic_gradient(task_support, fx.theta),
                                            numeric(task_support, fx.theta), kFirstOrderTolerance));

    // Inner step: (theta - theta') / alpha against the numeric gradient.
    const double alpha = 0.1;
    {
        ad::Graph g;
        g.set_checked(true);
        const VarSet p = bind(g, fx.theta);
        const ParamSet adapted = inner_step(p, cl_support, alpha).values();
        ParamSet step = fx.theta.zeros_like();
        for (std::size_t i = 0; i < step.size(); ++i) {
            Tensor d = fx.theta.entry(i).value;
            for (std::size_t j = 0; j < d.size(); ++j) d[j] = (d[j] - adapted.entry(i).value[j]) / alpha;
            step.set(i, std::move(d));
        }
        report.checks.push_back(
            detail::compare("inner-step", step, numeric(cl_support, fx.theta), kFirstOrderTolerance));
    }

    MetaConfig mc;
    mc.alpha = alpha;
    mc.lambda = 0.5;
    mc.support_size = support.size();
    mc.query_size = query.size();

    // Unsupervised meta-gradient against differences of the composed objective.
    {
        MetaConfig c = mc;
        c.mode = MetaMode::Unsupervised;
        const ParamSet analytic = meta_gradient(model, fx.theta, fx.episode, c).grad;
        const ParamSet fd = numeric_gradient(
            [&](const ParamSet& q) { return composed_value(cl_query, cl_support, q, alpha); }, fx.theta, h);
        report.checks.push_back(detail::compare("meta:unsupervised", analytic, fd, kMetaTolerance));
    }

    // Supervised: task branch plus lambda times contrastive branch.
    {
        MetaConfig c = mc;
        c.mode = MetaMode::Supervised;
        const ParamSet analytic = meta_gradient(model, fx.theta, fx.episode, c).grad;
        const ParamSet fd = numeric_gradient(
            [&](const ParamSet& q) {
                return composed_value(task_query, task_support, q, alpha) +
                       c.lambda * composed_value(cl_query, cl_support, q, alpha);
            },
            fx.theta, h);
        report.checks.push_back(detail::compare("meta:supervised", analytic, fd, kMetaTolerance));
    }

    // Scalar quadratic 0.5 c t^2 for both losses: exact 1.28, first order 1.6.
    {
        ParamSet t;
        t.add("t", Tensor::scalar(1.0));
        const Objective q = [](const VarSet& p) { return ad::scale(p["t"] * p["t"], 0.5 * 2.0); };
        const double exact = grad_through_step(t, q, q, 0.1, GradOrder::Exact, 1, true).grad.entry(0).value.item();
        const double first =
            grad_through_step(t, q, q, 0.1, GradOrder::FirstOrder, 1, true).grad.entry(0).value.item();
        const double err = std::max(std::abs(exact - 1.28), std::abs(first - 1.6));
        Check ck = detail::verdict("meta:first-vs-second-order", err, 1e-10, 2,
                                   "exact " + std::to_string(exact) + ", first-order " + std::to_string(first));
        ck.passed = ck.passed && exact != first;
        report.checks.push_back(ck);
    }

    // alpha = 0: the meta-gradient is the plain gradient of the outer loss.
    {
        const ParamSet through = grad_through_step(fx.theta, cl_query, cl_support, 0.0, GradOrder::Exact, 1, true).grad;
        const double err = max_abs_difference(through, analytic_gradient(cl_query, fx.theta));
        report.checks.push_back(detail::verdict("meta:alpha-zero", err, 1e-12, fx.theta.parameter_count()));
    }

    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

} // namespace xvl::gradcheck

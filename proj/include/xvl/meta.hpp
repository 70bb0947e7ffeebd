#pragma once

// Cross-lingual vision-language MAML.
//
// Unsupervised:  theta <- theta - beta * d/dtheta L_CL(theta - alpha * grad L_CL(theta; B_s); B_q)
// Supervised:    theta <- theta - beta * ( d/dtheta L(theta''; B_q) + lambda * d/dtheta L_CL(theta'; B_q) )
//                with theta'' = theta - alpha * grad L(theta; B_s) and theta' as above.
//
// Meta-gradients differentiate through the inner step exactly (second order)
// unless first-order mode is requested, in which case the adaptation
// Jacobian is treated as the identity.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xvl/autodiff.hpp"
#include "xvl/batch.hpp"
#include "xvl/contrastive.hpp"
#include "xvl/data.hpp"
#include "xvl/error.hpp"
#include "xvl/model.hpp"
#include "xvl/optim.hpp"
#include "xvl/params.hpp"
#include "xvl/rng.hpp"

namespace xvl {

enum class MetaMode { Unsupervised, Supervised, TaskOnly, FirstOrder };

inline std::string to_string(MetaMode m) {
    switch (m) {
    case MetaMode::Unsupervised: return "unsupervised";
    case MetaMode::Supervised: return "supervised";
    case MetaMode::TaskOnly: return "task-only";
    case MetaMode::FirstOrder: return "first-order";
    }
    return "?";
}

inline MetaMode parse_meta_mode(const std::string& s) {
    if (s == "unsupervised") return MetaMode::Unsupervised;
    if (s == "supervised") return MetaMode::Supervised;
    if (s == "task-only") return MetaMode::TaskOnly;
    if (s == "first-order") return MetaMode::FirstOrder;
    throw ConfigError("unknown mode '" + s + "' (expected unsupervised, supervised, task-only or first-order)");
}

enum class GradOrder { Exact, FirstOrder };

struct MetaConfig {
    double alpha = 5e-4;
    double beta = 5e-6;
    double lambda = 1e-3;
    std::size_t support_size = 64;
    std::size_t query_size = 64;
    std::size_t iterations = 400;
    std::size_t eval_interval = 25;
    /// first-order runs the supervised objective with first-order meta-gradients.
    MetaMode mode = MetaMode::Supervised;
    /// Number of unrolled inner steps; 1 is the standard single-step update.
    std::size_t inner_steps = 1;
    OptimizerKind outer_optimizer = OptimizerKind::PlainDescent;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;

    GradOrder order() const { return mode == MetaMode::FirstOrder ? GradOrder::FirstOrder : GradOrder::Exact; }

    void validate() const {
        if (!(alpha > 0.0)) throw ConfigError("meta: alpha must be > 0");
        if (!(beta > 0.0)) throw ConfigError("meta: beta must be > 0");
        if (!(lambda >= 0.0)) throw ConfigError("meta: lambda must be >= 0");
        if (support_size < 1 || query_size < 1) throw ConfigError("meta: batch sizes must be >= 1");
        if (iterations < 1) throw ConfigError("meta: iterations must be >= 1");
        if (eval_interval < 1) throw ConfigError("meta: eval_interval must be >= 1");
        if (inner_steps < 1) throw ConfigError("meta: inner_steps must be >= 1");
    }
};

/// A scalar loss as a function of bound parameters.
using Objective = std::function<ad::Var(const VarSet&)>;

/// theta - alpha * grad loss(theta), kept differentiable w.r.t. theta.
///
/// With GradOrder::FirstOrder the inner gradient is a constant, so the
/// returned parameters depend on theta through the identity only.
inline VarSet inner_step(const VarSet& theta, const Objective& loss, double alpha,
                         GradOrder order = GradOrder::Exact, double* loss_value = nullptr) {
    if (!(alpha >= 0.0)) throw ConfigError("inner step size must be >= 0");
    if (alpha == 0.0) {
        if (loss_value) *loss_value = loss(theta).value().item();
        return theta;
    }
    const ad::Var l = loss(theta);
    if (loss_value) *loss_value = l.value().item();
    const auto grads = ad::grad(l, theta.vars(), order == GradOrder::Exact);
    VarSet out;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        if (!grads[i].value().all_finite()) {
            throw NumericError("non-finite inner gradient for '" + theta.name(i) + "'");
        }
        out.add(theta.name(i), theta.at(i) - ad::scale(grads[i], alpha));
    }
    return out;
}

struct MetaGradient {
    ParamSet grad;
    /// Inner (support) loss at theta.
    double inner_loss = 0.0;
    /// Outer (query) loss at the adapted parameters.
    double outer_loss = 0.0;
};

/// d/dtheta outer(theta - alpha * grad inner(theta)), repeated `steps` times
/// for an unrolled inner loop.
inline MetaGradient grad_through_step(const ParamSet& theta, const Objective& outer, const Objective& inner,
                                      double alpha, GradOrder order = GradOrder::Exact,
                                      std::size_t steps = 1, bool checked = false) {
    if (!(alpha >= 0.0)) throw ConfigError("inner step size must be >= 0");
    ad::Graph g;
    g.set_checked(checked);
    const VarSet bound = bind(g, theta);
    MetaGradient out;
    VarSet adapted = bound;
    for (std::size_t s = 0; s < steps; ++s) {
        adapted = inner_step(adapted, inner, alpha, order, s == 0 ? &out.inner_loss : nullptr);
    }
    const ad::Var outer_loss = outer(adapted);
    out.outer_loss = outer_loss.value().item();
    const auto grads = ad::grad(outer_loss, bound.vars());
    out.grad = to_params(bound, grads);
    if (!out.grad.all_finite()) throw NumericError("non-finite meta-gradient");
    return out;
}

/// Support/query pair drawn from one language.
struct Episode {
    PairedBatch support;
    PairedBatch query;
    std::string language;
};

/// Disjoint support and query sets drawn uniformly without replacement from
/// the language's train split.
inline Episode sample_episode(const Dataset& dataset, const std::string& language, const MetaConfig& config,
                              Rng& rng) {
    const auto& pool = dataset.split(language, "train");
    const std::size_t need = config.support_size + config.query_size;
    if (pool.size() < need) {
        throw DataError("language '" + language + "' has " + std::to_string(pool.size()) +
                        " train examples, an episode needs " + std::to_string(need));
    }
    // Partial Fisher-Yates over indices.
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < need; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    std::vector<const Example*> support, query;
    for (std::size_t i = 0; i < config.support_size; ++i) support.push_back(&pool[idx[i]]);
    for (std::size_t i = config.support_size; i < need; ++i) query.push_back(&pool[idx[i]]);
    const auto& h = dataset.header();
    return {make_batch(support, h.image_dim, h.text_dim, language),
            make_batch(query, h.image_dim, h.text_dim, language), language};
}

// ---------------------------------------------------------------------------
// Meta-gradients of the three objectives

inline MetaGradient meta_gradient_unsupervised(const Model& model, const ParamSet& theta, const Episode& episode,
                                               const MetaConfig& config) {
    // Label-free copies: any label access below raises MissingLabelsError.
    const PairedBatch support = episode.support.without_labels();
    const PairedBatch query = episode.query.without_labels();
    return grad_through_step(
        theta, [&](const VarSet& p) { return model_contrastive_loss(model, p, query); },
        [&](const VarSet& p) { return model_contrastive_loss(model, p, support); }, config.alpha, config.order(),
        config.inner_steps);
}

inline MetaGradient meta_gradient_task(const Model& model, const ParamSet& theta, const Episode& episode,
                                       const MetaConfig& config) {
    return grad_through_step(
        theta, [&](const VarSet& p) { return model.task_loss(p, episode.query); },
        [&](const VarSet& p) { return model.task_loss(p, episode.support); }, config.alpha, config.order(),
        config.inner_steps);
}

/// Task branch plus lambda times the contrastive branch. Both branches adapt
/// from the same theta. With lambda == 0 the contrastive branch is skipped,
/// which makes the result identical to the task-only meta-gradient.
inline MetaGradient meta_gradient_supervised(const Model& model, const ParamSet& theta, const Episode& episode,
                                             const MetaConfig& config) {
    if (!episode.support.has_labels() || !episode.query.has_labels()) {
        throw MissingLabelsError("supervised meta-step needs labelled support and query batches");
    }
    MetaGradient task = meta_gradient_task(model, theta, episode, config);
    if (config.lambda == 0.0) return task;
    const MetaGradient cl = meta_gradient_unsupervised(model, theta, episode, config);
    ParamSet combined = task.grad;
    for (std::size_t i = 0; i < combined.size(); ++i) {
        Tensor t = combined.entry(i).value;
        const Tensor& c = cl.grad.entry(i).value;
        for (std::size_t j = 0; j < t.size(); ++j) t[j] += config.lambda * c[j];
        combined.set(i, std::move(t));
    }
    return {std::move(combined), task.inner_loss + config.lambda * cl.inner_loss,
            task.outer_loss + config.lambda * cl.outer_loss};
}

inline MetaGradient meta_gradient(const Model& model, const ParamSet& theta, const Episode& episode,
                                  const MetaConfig& config) {
    switch (config.mode) {
    case MetaMode::Unsupervised: return meta_gradient_unsupervised(model, theta, episode, config);
    case MetaMode::TaskOnly: return meta_gradient_task(model, theta, episode, config);
    case MetaMode::Supervised:
    case MetaMode::FirstOrder: return meta_gradient_supervised(model, theta, episode, config);
    }
    throw ConfigError("unknown meta mode");
}

struct StepResult {
    double inner_loss = 0.0;
    double query_loss = 0.0;
};

/// One meta-update of `theta` in place with the given outer optimizer.
inline StepResult meta_step(const Model& model, ParamSet& theta, const Episode& episode, const MetaConfig& config,
                            Optimizer& outer) {
    const MetaGradient mg = meta_gradient(model, theta, episode, config);
    outer.step(theta, mg.grad);
    return {mg.inner_loss, mg.outer_loss};
}

/// Plain-descent variants with step size beta.
inline StepResult meta_step_unsupervised(const Model& model, ParamSet& theta, const Episode& episode,
                                         const MetaConfig& config) {
    MetaConfig c = config;
    c.mode = MetaMode::Unsupervised;
    Optimizer sgd({OptimizerKind::PlainDescent, config.beta});
    return meta_step(model, theta, episode, c, sgd);
}

inline StepResult meta_step_supervised(const Model& model, ParamSet& theta, const Episode& episode,
                                       const MetaConfig& config) {
    MetaConfig c = config;
    if (c.mode != MetaMode::FirstOrder) c.mode = MetaMode::Supervised;
    Optimizer sgd({OptimizerKind::PlainDescent, config.beta});
    return meta_step(model, theta, episode, c, sgd);
}

// ---------------------------------------------------------------------------
// Training loop

struct MetaLogRecord {
    std::size_t iteration = 0;
    double inner_loss = 0.0;
    double query_loss = 0.0;
    std::optional<double> score;
};

struct EvalPoint {
    std::size_t iteration = 0;
    double score = 0.0;
};

struct MetaTrainResult {
    /// Checkpoint with the best hook score (final parameters if there is no hook).
    ParamSet best;
    ParamSet last;
    std::size_t best_iteration = 0;
    std::optional<double> best_score;
    std::vector<EvalPoint> evaluations;
    std::vector<MetaLogRecord> log;
};

/// Scores a parameter snapshot; higher is better.
using EvalHook = std::function<double(const ParamSet&)>;

inline MetaTrainResult meta_train(const Model& model, const ParamSet& theta, const Dataset& dataset,
                                  const std::string& auxiliary, const MetaConfig& config,
                                  const EvalHook& hook = {}) {
    config.validate();
    OptimizerConfig oc;
    oc.kind = config.outer_optimizer;
    oc.lr = config.beta;
    oc.weight_decay = config.outer_optimizer == OptimizerKind::AdamW ? config.weight_decay : 0.0;
    Optimizer outer(oc);
    Rng rng(derive_seed(config.seed, "episodes"));

    MetaTrainResult result;
    ParamSet current = theta;
    for (std::size_t it = 1; it <= config.iterations; ++it) {
        const Episode episode = sample_episode(dataset, auxiliary, config, rng);
        const StepResult step = meta_step(model, current, episode, config, outer);
        MetaLogRecord rec{it, step.inner_loss, step.query_loss, std::nullopt};
        const bool eval_now = it % config.eval_interval == 0 || it == config.iterations;
        if (eval_now && hook) {
            const double score = hook(current);
            rec.score = score;
            result.evaluations.push_back({it, score});
            if (!result.best_score || score > *result.best_score) {
                result.best_score = score;
                result.best = current;
                result.best_iteration = it;
            }
        }
        result.log.push_back(rec);
    }
    result.last = current;
    if (!hook) {
        result.best = current;
        result.best_iteration = config.iterations;
    }
    return result;
}

} // namespace xvl

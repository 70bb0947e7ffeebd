#pragma once

// English fine-tuning, zero-/few-shot evaluation and retrieval metrics.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xvl/autodiff.hpp"
#include "xvl/contrastive.hpp"
#include "xvl/data.hpp"
#include "xvl/error.hpp"
#include "xvl/model.hpp"
#include "xvl/optim.hpp"
#include "xvl/params.hpp"
#include "xvl/rng.hpp"
#include "xvl/stats.hpp"

namespace xvl {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    OptimizerKind optimizer = OptimizerKind::AdamW;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr >= 0.0)) throw ConfigError("train: lr must be >= 0");
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    }

    OptimizerConfig optimizer_config() const {
        OptimizerConfig oc;
        oc.kind = optimizer;
        oc.lr = lr;
        oc.weight_decay = optimizer == OptimizerKind::AdamW ? weight_decay : 0.0;
        return oc;
    }
};

enum class TrainObjective { Task, Contrastive };

struct TrainResult {
    ParamSet params;
    /// 1-based epoch of the returned checkpoint.
    std::size_t best_epoch = 0;
    std::vector<double> dev_scores;
    std::vector<double> epoch_losses;
};

inline double accuracy(const Model& model, const ParamSet& params, const std::vector<Example>& examples) {
    if (examples.empty()) throw DataError("accuracy on an empty split");
    const auto& mc = model.config();
    std::size_t correct = 0;
    constexpr std::size_t chunk = 512;
    for (std::size_t start = 0; start < examples.size(); start += chunk) {
        std::vector<const Example*> part;
        for (std::size_t i = start; i < std::min(examples.size(), start + chunk); ++i) part.push_back(&examples[i]);
        const PairedBatch batch = make_batch(part, mc.image_dim, mc.text_dim, examples[start].language);
        const auto& labels = batch.labels();
        const auto pred = model.predict(params, batch);
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

/// Mini-batch training on `train`. With a dev set, returns the epoch
/// checkpoint with the best dev accuracy (earliest on ties); otherwise the
/// parameters after the last epoch.
///
/// The examples are sorted by pair id before shuffling, so the result does not
/// depend on the order in which they were passed.
inline TrainResult finetune(const Model& model, const ParamSet& theta, const std::vector<Example>& train,
                            const TrainConfig& config, const std::vector<Example>* dev = nullptr,
                            TrainObjective objective = TrainObjective::Task) {
    config.validate();
    if (train.empty()) throw DataError("fine-tuning on an empty training set");
    const auto& mc = model.config();
    std::vector<const Example*> order;
    order.reserve(train.size());
    for (const auto& e : train) {
        if (objective == TrainObjective::Task && !e.label)
            throw MissingLabelsError("example '" + e.pair_id + "' has no label");
        order.push_back(&e);
    }
    std::sort(order.begin(), order.end(),
              [](const Example* a, const Example* b) { return a->pair_id < b->pair_id; });

    Optimizer opt(config.optimizer_config());
    TrainResult result;
    ParamSet current = theta;
    std::optional<double> best;
    const std::size_t bs = std::min(config.batch_size, order.size());
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        Rng rng(derive_seed(config.seed, epoch));
        std::vector<const Example*> perm = order;
        rng.shuffle(perm);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < perm.size(); start += bs) {
            const std::size_t end = std::min(perm.size(), start + bs);
            // Contrastive batches need at least two pairs to have negatives.
            if (objective == TrainObjective::Contrastive && end - start < 2) continue;
            std::vector<const Example*> part(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                             perm.begin() + static_cast<std::ptrdiff_t>(end));
            const PairedBatch batch = make_batch(part, mc.image_dim, mc.text_dim, part.front()->language);
            ad::Graph g;
            const VarSet p = bind(g, current);
            const ad::Var loss = objective == TrainObjective::Task ? model.task_loss(p, batch)
                                                                   : model_contrastive_loss(model, p, batch);
            const double lv = loss.value().item();
            if (!std::isfinite(lv)) throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
            const auto grads = ad::grad(loss, p.vars());
            opt.step(current, to_params(p, grads));
            loss_sum += lv;
            ++batches;
        }
        result.epoch_losses.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
        if (dev) {
            const double score = accuracy(model, current, *dev);
            result.dev_scores.push_back(score);
            if (!best || score > *best) {
                best = score;
                result.params = current;
                result.best_epoch = epoch;
            }
        }
    }
    if (!dev) {
        result.params = std::move(current);
        result.best_epoch = config.epochs;
    }
    return result;
}

/// Stage 1: supervised fine-tuning on English train, selected on English dev.
inline TrainResult finetune_english(const Model& model, const ParamSet& theta, const Dataset& dataset,
                                    const TrainConfig& config) {
    const auto& train = dataset.split("en", "train");
    const auto& dev = dataset.split("en", "dev");
    return finetune(model, theta, train, config, dev.empty() ? nullptr : &dev);
}

/// Contrastive alignment on paired data (stands in for vision-language pre-training).
inline TrainResult pretrain_contrastive(const Model& model, const ParamSet& theta,
                                        const std::vector<Example>& pairs, const TrainConfig& config) {
    return finetune(model, theta, pairs, config, nullptr, TrainObjective::Contrastive);
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
    std::string stage;
    std::string metric = "accuracy";
    std::vector<std::pair<std::string, double>> per_language;
    double aggregate = 0.0;
    std::size_t shot = 0;
    std::uint64_t seed = 0;
    std::string checkpoint;

    double value(const std::string& language) const {
        for (const auto& [l, v] : per_language)
            if (l == language) return v;
        throw DataError("report has no value for language '" + language + "'");
    }
};

inline void finalize_report(EvalReport& r) {
    std::vector<double> vals;
    for (const auto& [_, v] : r.per_language) vals.push_back(v);
    r.aggregate = stats::mean(vals);
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["metric"] = r.metric;
    j["shot"] = r.shot;
    j["seed"] = r.seed;
    j["checkpoint"] = r.checkpoint;
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto& [l, v] : r.per_language) per[l] = v;
    j["per_language"] = per;
    j["aggregate"] = r.aggregate;
    return j;
}

inline std::string csv_header() { return "stage,language,shot,metric,value,seed"; }

/// One CSV row per language plus a "mean" row.
inline std::vector<std::string> to_csv_rows(const EvalReport& r) {
    std::vector<std::string> rows;
    auto fmt = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const auto& [l, v] : r.per_language)
        rows.push_back(r.stage + "," + l + "," + std::to_string(r.shot) + "," + r.metric + "," + fmt(v) + "," +
                       std::to_string(r.seed));
    rows.push_back(r.stage + ",mean," + std::to_string(r.shot) + "," + r.metric + "," + fmt(r.aggregate) + "," +
                   std::to_string(r.seed));
    return rows;
}

/// Accuracy per target language with the parameters used as-is.
inline EvalReport eval_zero_shot(const Model& model, const ParamSet& theta, const Dataset& dataset,
                                 const std::vector<std::string>& targets, std::uint64_t seed = 0,
                                 const std::string& stage = "zero-shot") {
    EvalReport r;
    r.stage = stage;
    r.seed = seed;
    r.checkpoint = hex64(params_hash(theta));
    for (const auto& lang : targets) {
        if (!dataset.has_language(lang)) throw DataError("unknown language '" + lang + "'");
        r.per_language.emplace_back(lang, accuracy(model, theta, dataset.split(lang, "test")));
    }
    finalize_report(r);
    return r;
}

/// For each shot count k: fine-tune a private copy on the k-shot subset of the
/// language's train split, then evaluate on its test split. k = 0 is zero-shot.
inline std::vector<EvalReport> eval_few_shot(const Model& model, const ParamSet& theta, const Dataset& dataset,
                                             const std::string& language, const std::vector<std::size_t>& shots,
                                             const TrainConfig& config, const std::string& stage = "few-shot") {
    std::vector<EvalReport> out;
    for (std::size_t k : shots) {
        if (k == 0) {
            EvalReport r = eval_zero_shot(model, theta, dataset, {language}, config.seed, stage);
            out.push_back(std::move(r));
            continue;
        }
        const auto subset = fewshot_subset(dataset, language, k, config.seed);
        TrainConfig tc = config;
        tc.seed = derive_seed(config.seed, "fewshot-train/" + language + "/" + std::to_string(k));
        const ParamSet tuned = finetune(model, theta, subset, tc).params;
        EvalReport r = eval_zero_shot(model, tuned, dataset, {language}, config.seed, stage);
        r.shot = k;
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Retrieval

struct RecallAt1 {
    /// Image retrieval: text queries over images.
    double image_retrieval = 0.0;
    /// Text retrieval: image queries over texts.
    double text_retrieval = 0.0;
};

/// Recall@1 from a similarity matrix with rows = images, columns = texts.
/// Ties go to the lowest index.
inline RecallAt1 recall_at_1(const Tensor& sim) {
    const std::size_t n = sim.rows();
    if (n < 2 || sim.cols() != n) throw ShapeError("recall@1 needs a square similarity matrix with N >= 2");
    std::size_t ir = 0, tr = 0;
    for (std::size_t t = 0; t < n; ++t) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (sim(i, t) > sim(best, t)) best = i;
        ir += best == t;
    }
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t t = 1; t < n; ++t)
            if (sim(i, t) > sim(i, best)) best = t;
        tr += best == i;
    }
    const double dn = static_cast<double>(n);
    return {static_cast<double>(ir) / dn, static_cast<double>(tr) / dn};
}

inline RecallAt1 recall_at_1(const Model& model, const ParamSet& theta, const PairedBatch& batch) {
    if (batch.size() < 2) throw ShapeError("recall@1 needs at least two pairs");
    const auto [u, v] = model.projections(theta, batch);
    return recall_at_1(cosine_matrix(u, v));
}

/// Mean Recall@1 over seeded, shuffled pools of `pool` pairs. Only full pools
/// are scored unless the split is smaller than one pool.
inline RecallAt1 retrieval_eval(const Model& model, const ParamSet& theta, const std::vector<Example>& examples,
                                std::size_t pool, std::uint64_t seed) {
    if (pool < 2) throw ConfigError("retrieval pool must hold at least two pairs");
    if (examples.size() < 2) throw DataError("retrieval needs at least two pairs");
    std::vector<const Example*> order;
    for (const auto& e : examples) order.push_back(&e);
    std::sort(order.begin(), order.end(), [](const Example* a, const Example* b) { return a->pair_id < b->pair_id; });
    Rng rng(derive_seed(seed, "retrieval-pools"));
    rng.shuffle(order);
    const auto& mc = model.config();
    const std::size_t pools = std::max<std::size_t>(1, order.size() / pool);
    double ir = 0.0, tr = 0.0;
    for (std::size_t p = 0; p < pools; ++p) {
        const std::size_t start = p * pool;
        const std::size_t end = std::min(order.size(), start + pool);
        std::vector<const Example*> part(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
        const auto r = recall_at_1(model, theta, make_batch(part, mc.image_dim, mc.text_dim, part.front()->language));
        ir += r.image_retrieval;
        tr += r.text_retrieval;
    }
    return {ir / static_cast<double>(pools), tr / static_cast<double>(pools)};
}

} // namespace xvl

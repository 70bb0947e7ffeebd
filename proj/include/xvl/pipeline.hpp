#pragma once

// Experiment pipeline: contrastive pre-training (stage 0), English
// fine-tuning (stage 1), meta fine-tuning on an auxiliary language (stage 2)
// and target-language evaluation (stage 3), plus the baseline path that skips
// stage 2. Sweeps and few-shot curves are built from the same stage functions.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "xvl/contrastive.hpp"
#include "xvl/data.hpp"
#include "xvl/error.hpp"
#include "xvl/meta.hpp"
#include "xvl/model.hpp"
#include "xvl/params.hpp"
#include "xvl/rng.hpp"
#include "xvl/stats.hpp"
#include "xvl/train.hpp"

namespace xvl {

inline constexpr const char* kToolVersion = "0.3.0";

// ---------------------------------------------------------------------------
// Configuration

struct FewShotSettings {
    std::vector<std::size_t> shots{0, 1, 5, 10, 20};
    /// Also run the few-shot evaluation inside `pipeline`.
    bool in_pipeline = false;
    TrainConfig train{1e-3, 20, 32, OptimizerKind::AdamW, 0.01, 0};
};

struct PipelineConfig {
    std::string run_id = "run";
    fs::path out_dir = "runs";
    fs::path dataset_dir = "data";
    std::string task = "xvnli";
    std::uint64_t seed = 0;
    /// Replicates for sweeps and curves: seeds seed, seed+1, ...
    std::size_t num_seeds = 5;

    /// Input dims and class count are taken from the dataset.
    ModelConfig model;
    bool pretrain_enabled = true;
    TrainConfig pretrain{2e-3, 10, 64, OptimizerKind::AdamW, 0.01, 0};
    TrainConfig stage1;
    MetaConfig meta;
    /// Per-mode replacements for meta fields, keyed by mode name.
    nlohmann::ordered_json mode_overrides = nlohmann::ordered_json::object();
    /// auto, aux-dev-accuracy or aux-dev-contrastive.
    std::string selection = "auto";

    std::string auxiliary = "aux1";
    std::vector<std::string> auxiliaries{"aux1", "aux2"};
    std::vector<std::string> targets{"tgt1", "tgt2", "tgt3", "tgt4"};
    FewShotSettings fewshot;
    std::size_t retrieval_pool = 100;

    /// Meta settings after the overrides for the configured mode.
    MetaConfig effective_meta() const;
    /// Selection metric after resolving "auto" against the mode.
    std::string effective_selection() const {
        if (selection != "auto") return selection;
        return meta.mode == MetaMode::Unsupervised ? "aux-dev-contrastive" : "aux-dev-accuracy";
    }

    void validate() const {
        if (run_id.empty() || run_id.find('/') != std::string::npos || run_id == "." || run_id == "..")
            throw ConfigError("run_id must be a plain, non-empty name");
        if (task.empty()) throw ConfigError("task must be set");
        if (num_seeds < 1) throw ConfigError("num_seeds must be >= 1");
        if (pretrain_enabled) pretrain.validate();
        stage1.validate();
        fewshot.train.validate();
        effective_meta().validate();
        if (selection != "auto" && selection != "aux-dev-accuracy" && selection != "aux-dev-contrastive")
            throw ConfigError("unknown selection metric '" + selection + "'");
        if (meta.mode == MetaMode::Unsupervised && effective_selection() == "aux-dev-accuracy")
            throw ConfigError("unsupervised mode cannot select checkpoints with auxiliary labels");
        if (auxiliary.empty()) throw ConfigError("auxiliary language must be set");
        if (targets.empty()) throw ConfigError("at least one target language is required");
        if (retrieval_pool < 2) throw ConfigError("retrieval pool must be >= 2");
        for (auto it = mode_overrides.begin(); it != mode_overrides.end(); ++it) parse_meta_mode(it.key());
    }
};

namespace detail {

template <class J>
void reject_unknown(const J& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

template <class J, class T>
void read_key(const J& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).template get<T>();
}

} // namespace detail

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
    return {{"hidden_dim", c.hidden_dim},
            {"embed_dim", c.embed_dim},
            {"projection_dim", c.projection_dim},
            {"activation", to_string(c.activation)}};
}

inline void apply_json(ModelConfig& c, const nlohmann::json& j) {
    detail::reject_unknown(j, {"hidden_dim", "embed_dim", "projection_dim", "activation"}, "model");
    detail::read_key(j, "hidden_dim", c.hidden_dim);
    detail::read_key(j, "embed_dim", c.embed_dim);
    detail::read_key(j, "projection_dim", c.projection_dim);
    if (j.contains("activation")) c.activation = parse_activation(j.at("activation").get<std::string>());
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"optimizer", to_string(c.optimizer)},
            {"weight_decay", c.weight_decay}};
}

inline void apply_json(TrainConfig& c, const nlohmann::json& j, const std::string& where) {
    detail::reject_unknown(j, {"enabled", "lr", "epochs", "batch_size", "optimizer", "weight_decay"}, where);
    detail::read_key(j, "lr", c.lr);
    detail::read_key(j, "epochs", c.epochs);
    detail::read_key(j, "batch_size", c.batch_size);
    detail::read_key(j, "weight_decay", c.weight_decay);
    if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
}

inline nlohmann::ordered_json to_json(const MetaConfig& c) {
    return {{"mode", to_string(c.mode)},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"lambda", c.lambda},
            {"support_size", c.support_size},
            {"query_size", c.query_size},
            {"iterations", c.iterations},
            {"eval_interval", c.eval_interval},
            {"inner_steps", c.inner_steps},
            {"outer_optimizer", to_string(c.outer_optimizer)},
            {"weight_decay", c.weight_decay}};
}

inline void apply_json(MetaConfig& c, const nlohmann::json& j, const std::string& where) {
    detail::reject_unknown(j,
                           {"mode", "alpha", "beta", "lambda", "support_size", "query_size", "iterations",
                            "eval_interval", "inner_steps", "outer_optimizer", "weight_decay", "selection",
                            "mode_overrides"},
                           where);
    if (j.contains("mode")) c.mode = parse_meta_mode(j.at("mode").get<std::string>());
    detail::read_key(j, "alpha", c.alpha);
    detail::read_key(j, "beta", c.beta);
    detail::read_key(j, "lambda", c.lambda);
    detail::read_key(j, "support_size", c.support_size);
    detail::read_key(j, "query_size", c.query_size);
    detail::read_key(j, "iterations", c.iterations);
    detail::read_key(j, "eval_interval", c.eval_interval);
    detail::read_key(j, "inner_steps", c.inner_steps);
    detail::read_key(j, "weight_decay", c.weight_decay);
    if (j.contains("outer_optimizer"))
        c.outer_optimizer = parse_optimizer(j.at("outer_optimizer").get<std::string>());
}

inline MetaConfig PipelineConfig::effective_meta() const {
    MetaConfig m = meta;
    const std::string key = to_string(meta.mode);
    if (mode_overrides.contains(key)) {
        const auto& o = mode_overrides.at(key);
        if (o.contains("mode") || o.contains("mode_overrides") || o.contains("selection"))
            throw ConfigError("mode_overrides." + key + " may only set numeric meta fields");
        apply_json(m, nlohmann::json::parse(o.dump()), "meta.mode_overrides." + key);
    }
    return m;
}

inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
    nlohmann::ordered_json j;
    j["run_id"] = c.run_id;
    j["out_dir"] = c.out_dir.generic_string();
    j["dataset_dir"] = c.dataset_dir.generic_string();
    j["task"] = c.task;
    j["seed"] = c.seed;
    j["num_seeds"] = c.num_seeds;
    j["model"] = to_json(c.model);
    j["pretrain"] = to_json(c.pretrain);
    j["pretrain"]["enabled"] = c.pretrain_enabled;
    j["stage1"] = to_json(c.stage1);
    j["meta"] = to_json(c.meta);
    j["meta"]["selection"] = c.selection;
    j["meta"]["mode_overrides"] = c.mode_overrides;
    j["auxiliary"] = c.auxiliary;
    j["auxiliaries"] = c.auxiliaries;
    j["targets"] = c.targets;
    j["fewshot"] = {{"shots", c.fewshot.shots}, {"in_pipeline", c.fewshot.in_pipeline},
                    {"train", to_json(c.fewshot.train)}};
    j["eval"] = {{"retrieval_pool", c.retrieval_pool}};
    return j;
}

/// Parses a pipeline config; absent keys keep their defaults, unknown keys are errors.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
        detail::reject_unknown(j,
                               {"run_id", "out_dir", "dataset_dir", "task", "seed", "num_seeds", "model",
                                "pretrain", "stage1", "meta", "auxiliary", "auxiliaries", "targets", "fewshot",
                                "eval"},
                               "pipeline config");
        detail::read_key(j, "run_id", c.run_id);
        if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
        if (j.contains("dataset_dir")) c.dataset_dir = j.at("dataset_dir").get<std::string>();
        detail::read_key(j, "task", c.task);
        detail::read_key(j, "seed", c.seed);
        detail::read_key(j, "num_seeds", c.num_seeds);
        if (j.contains("model")) apply_json(c.model, j.at("model"));
        if (j.contains("pretrain")) {
            apply_json(c.pretrain, j.at("pretrain"), "pretrain");
            detail::read_key(j.at("pretrain"), "enabled", c.pretrain_enabled);
        }
        if (j.contains("stage1")) apply_json(c.stage1, j.at("stage1"), "stage1");
        if (j.contains("meta")) {
            const auto& m = j.at("meta");
            apply_json(c.meta, m, "meta");
            detail::read_key(m, "selection", c.selection);
            if (m.contains("mode_overrides")) {
                const auto& o = m.at("mode_overrides");
                if (!o.is_object()) throw ConfigError("meta.mode_overrides must be an object");
                c.mode_overrides = nlohmann::ordered_json::parse(o.dump());
            }
        }
        detail::read_key(j, "auxiliary", c.auxiliary);
        detail::read_key(j, "auxiliaries", c.auxiliaries);
        detail::read_key(j, "targets", c.targets);
        if (j.contains("fewshot")) {
            const auto& f = j.at("fewshot");
            detail::reject_unknown(f, {"shots", "in_pipeline", "train"}, "fewshot");
            detail::read_key(f, "shots", c.fewshot.shots);
            detail::read_key(f, "in_pipeline", c.fewshot.in_pipeline);
            if (f.contains("train")) apply_json(c.fewshot.train, f.at("train"), "fewshot.train");
        }
        if (j.contains("eval")) {
            detail::reject_unknown(j.at("eval"), {"retrieval_pool"}, "eval");
            detail::read_key(j.at("eval"), "retrieval_pool", c.retrieval_pool);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("pipeline config: ") + e.what());
    }
    c.validate();
    return c;
}

inline nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path.string() + "'");
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
    try {
        return pipeline_config_from_json(read_json_file(path));
    } catch (const ConfigError& e) {
        const std::string what = e.what();
        if (what.rfind(path.string(), 0) == 0) throw;
        throw ConfigError(path.string() + ": " + what);
    }
}

inline std::string config_hash_hex(const PipelineConfig& c) { return hex64(config_hash(to_json(c))); }

// ---------------------------------------------------------------------------
// Seeds

/// Every stage draws from its own stream derived from the root seed.
struct StageSeeds {
    std::uint64_t root = 0;
    std::uint64_t init = 0;
    std::uint64_t pretrain = 0;
    std::uint64_t stage1 = 0;
    std::uint64_t meta = 0;
    std::uint64_t fewshot = 0;
    std::uint64_t retrieval = 0;
};

inline StageSeeds stage_seeds(std::uint64_t root) {
    return {root,
            derive_seed(root, "init"),
            derive_seed(root, "pretrain"),
            derive_seed(root, "stage1"),
            derive_seed(root, "meta"),
            derive_seed(root, "fewshot"),
            derive_seed(root, "retrieval")};
}

inline nlohmann::ordered_json to_json(const StageSeeds& s) {
    return {{"root", s.root},     {"init", s.init},       {"pretrain", s.pretrain}, {"stage1", s.stage1},
            {"meta", s.meta},     {"fewshot", s.fewshot}, {"retrieval", s.retrieval}};
}

// ---------------------------------------------------------------------------
// Run output

/// Stage-failure wrapper; the message starts with the stage name.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

/// Writes the files of one run directory and remembers what it wrote.
class RunWriter {
public:
    explicit RunWriter(fs::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        fs::create_directories(dir_ / "checkpoints", ec);
        if (ec) throw IoError("cannot create '" + dir_.string() + "': " + ec.message());
    }

    const fs::path& dir() const { return dir_; }

    std::string checkpoint(const std::string& stage, const ParamSet& params) {
        const std::string rel = "checkpoints/" + stage + ".mxvl";
        save_params((dir_ / rel).string(), params);
        remember(rel);
        const std::string hash = hex64(params_hash(params));
        checkpoints_[stage] = {{"path", rel}, {"hash", hash}};
        return hash;
    }

    void log(const nlohmann::ordered_json& record) { append("train_log.jsonl", record.dump() + "\n"); }

    void report(const EvalReport& r) {
        append("reports.jsonl", to_json(r).dump() + "\n");
        if (!has("results.csv")) append("results.csv", csv_header() + "\n");
        for (const auto& row : to_csv_rows(r)) append("results.csv", row + "\n");
    }

    void write(const std::string& rel, const std::string& content) {
        std::ofstream os(dir_ / rel, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write '" + (dir_ / rel).string() + "'");
        os << content;
        remember(rel);
    }

    void append(const std::string& rel, const std::string& content) {
        std::ofstream os(dir_ / rel, std::ios::binary | std::ios::app);
        if (!os) throw IoError("cannot write '" + (dir_ / rel).string() + "'");
        os << content;
        remember(rel);
    }

    const std::vector<std::string>& artifacts() const { return artifacts_; }
    const nlohmann::ordered_json& checkpoints() const { return checkpoints_; }

private:
    bool has(const std::string& rel) const {
        return std::find(artifacts_.begin(), artifacts_.end(), rel) != artifacts_.end();
    }
    void remember(const std::string& rel) {
        if (!has(rel)) artifacts_.push_back(rel);
    }

    fs::path dir_;
    std::vector<std::string> artifacts_;
    nlohmann::ordered_json checkpoints_ = nlohmann::ordered_json::object();
};

using ProgressFn = std::function<void(const std::string&)>;

struct RunContext {
    RunWriter* writer = nullptr;
    ProgressFn progress;

    void say(const std::string& msg) const {
        if (progress) progress(msg);
    }
};

// ---------------------------------------------------------------------------
// Stages

inline ModelConfig model_config_for(const PipelineConfig& cfg, const Dataset& ds) {
    ModelConfig m = cfg.model;
    const auto& h = ds.header();
    if (h.image_dim == 0 || h.text_dim == 0 || h.classes == 0)
        throw DataError("dataset header lacks dims or class count");
    m.image_dim = h.image_dim;
    m.text_dim = h.text_dim;
    m.classes = h.classes;
    m.validate();
    return m;
}

/// Results of stages 0 and 1; shared by the baseline and every meta run.
struct BaseStages {
    StageSeeds seeds;
    ParamSet init;
    ParamSet pretrained;
    ParamSet stage1;
    TrainResult pretrain_result;
    TrainResult stage1_result;
    double pretrain_seconds = 0.0;
    double stage1_seconds = 0.0;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

inline void check_language(const Dataset& ds, const std::string& lang, const std::string& role) {
    if (!ds.has_language(lang)) throw ConfigError(role + " language '" + lang + "' is not in the dataset");
}

} // namespace detail

inline BaseStages run_base_stages(const PipelineConfig& cfg, const Model& model, const Dataset& ds,
                                  std::uint64_t root_seed, const RunContext& ctx = {}) {
    BaseStages b;
    b.seeds = stage_seeds(root_seed);
    b.init = model.init(b.seeds.init);
    b.pretrained = b.init;
    if (cfg.pretrain_enabled) {
        const auto t0 = std::chrono::steady_clock::now();
        b.pretrain_result = detail::in_stage("pretrain", [&] {
            TrainConfig pc = cfg.pretrain;
            pc.seed = b.seeds.pretrain;
            return pretrain_contrastive(model, b.init, ds.split("en", "train"), pc);
        });
        b.pretrained = b.pretrain_result.params;
        b.pretrain_seconds = detail::seconds_since(t0);
        ctx.say("pretrain done in " + std::to_string(b.pretrain_seconds) + " s");
    }
    const auto t1 = std::chrono::steady_clock::now();
    b.stage1_result = detail::in_stage("stage1", [&] {
        TrainConfig tc = cfg.stage1;
        tc.seed = b.seeds.stage1;
        return finetune_english(model, b.pretrained, ds, tc);
    });
    b.stage1 = b.stage1_result.params;
    b.stage1_seconds = detail::seconds_since(t1);
    ctx.say("stage1 done in " + std::to_string(b.stage1_seconds) + " s (best epoch " +
            std::to_string(b.stage1_result.best_epoch) + ")");
    return b;
}

/// Checkpoint-selection score on the auxiliary dev split; higher is better.
inline EvalHook selection_hook(const PipelineConfig& cfg, const Model& model, const Dataset& ds,
                               const std::string& auxiliary) {
    const auto& dev = ds.split(auxiliary, "dev");
    if (dev.empty()) return {};
    if (cfg.effective_selection() == "aux-dev-accuracy") {
        return [&model, &dev](const ParamSet& p) { return accuracy(model, p, dev); };
    }
    const auto& mc = model.config();
    auto batch = std::make_shared<PairedBatch>(make_batch(dev, mc.image_dim, mc.text_dim, auxiliary).without_labels());
    return [&model, batch](const ParamSet& p) {
        const auto [u, v] = model.projections(p, *batch);
        return -contrastive_loss(u, v);
    };
}

inline MetaTrainResult run_meta_stage(const PipelineConfig& cfg, const Model& model, const Dataset& ds,
                                      const ParamSet& stage1, const std::string& auxiliary,
                                      const StageSeeds& seeds) {
    return detail::in_stage("meta", [&] {
        MetaConfig mc = cfg.effective_meta();
        mc.seed = seeds.meta;
        return meta_train(model, stage1, ds, auxiliary, mc, selection_hook(cfg, model, ds, auxiliary));
    });
}

/// Stage 3: zero-shot accuracy on every target. Used unchanged for the baseline.
inline EvalReport run_stage3(const PipelineConfig& cfg, const Model& model, const Dataset& ds,
                             const ParamSet& params, const StageSeeds& seeds, const std::string& stage) {
    return detail::in_stage("eval", [&] { return eval_zero_shot(model, params, ds, cfg.targets, seeds.root, stage); });
}

inline TrainConfig fewshot_train_config(const PipelineConfig& cfg, const StageSeeds& seeds) {
    TrainConfig fc = cfg.fewshot.train;
    fc.seed = seeds.fewshot;
    return fc;
}

/// English-test Recall@1 as a pair of single-language reports.
inline std::vector<EvalReport> retrieval_reports(const PipelineConfig& cfg, const Model& model, const Dataset& ds,
                                                 const ParamSet& params, const StageSeeds& seeds,
                                                 const std::string& stage) {
    const auto r = retrieval_eval(model, params, ds.split("en", "test"), cfg.retrieval_pool, seeds.retrieval);
    std::vector<EvalReport> out(2);
    out[0].metric = "recall@1-ir";
    out[0].per_language = {{"en", r.image_retrieval}};
    out[1].metric = "recall@1-tr";
    out[1].per_language = {{"en", r.text_retrieval}};
    for (auto& e : out) {
        e.stage = stage;
        e.seed = seeds.root;
        e.checkpoint = hex64(params_hash(params));
        finalize_report(e);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct LanguageDelta {
    std::string language;
    std::size_t shot = 0;
    double baseline = 0.0;
    double ours = 0.0;
    double delta = 0.0;
};

struct PipelineResult {
    BaseStages base;
    MetaTrainResult meta;
    EvalReport baseline;
    EvalReport ours;
    std::vector<EvalReport> fewshot_baseline;
    std::vector<EvalReport> fewshot_ours;
    std::vector<LanguageDelta> deltas;
    double mean_delta = 0.0;
    double meta_seconds = 0.0;
    double eval_seconds = 0.0;
};

inline std::vector<LanguageDelta> compare_reports(const EvalReport& baseline, const EvalReport& ours) {
    std::vector<LanguageDelta> out;
    for (const auto& [lang, b] : baseline.per_language) {
        const double o = ours.value(lang);
        out.push_back({lang, baseline.shot, b, o, o - b});
    }
    out.push_back({"mean", baseline.shot, baseline.aggregate, ours.aggregate, ours.aggregate - baseline.aggregate});
    return out;
}

inline std::string deltas_csv(const std::vector<LanguageDelta>& rows, std::uint64_t seed) {
    std::ostringstream os;
    os << "language,shot,baseline,ours,delta,seed\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g,%llu\n", r.language.c_str(), r.shot, r.baseline,
                      r.ours, r.delta, static_cast<unsigned long long>(seed));
        os << buf;
    }
    return os.str();
}

namespace detail {

inline void log_base_stages(RunWriter& w, const BaseStages& b) {
    for (std::size_t e = 0; e < b.pretrain_result.epoch_losses.size(); ++e)
        w.log({{"stage", "pretrain"}, {"epoch", e + 1}, {"loss", b.pretrain_result.epoch_losses[e]}});
    for (std::size_t e = 0; e < b.stage1_result.epoch_losses.size(); ++e) {
        nlohmann::ordered_json r{{"stage", "stage1"}, {"epoch", e + 1}, {"loss", b.stage1_result.epoch_losses[e]}};
        if (e < b.stage1_result.dev_scores.size()) r["dev_accuracy"] = b.stage1_result.dev_scores[e];
        w.log(r);
    }
}

inline void log_meta(RunWriter& w, const MetaTrainResult& m) {
    for (const auto& rec : m.log) {
        nlohmann::ordered_json r{{"stage", "meta"},
                                 {"iteration", rec.iteration},
                                 {"inner_loss", rec.inner_loss},
                                 {"query_loss", rec.query_loss}};
        if (rec.score) r["score"] = *rec.score;
        w.log(r);
    }
}

} // namespace detail

/// Runs all stages for one root seed. With a writer in `ctx`, checkpoints,
/// logs and reports are written as each stage finishes.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const Dataset& ds, std::uint64_t root_seed,
                                   const RunContext& ctx = {}) {
    cfg.validate();
    detail::check_language(ds, "en", "english");
    detail::check_language(ds, cfg.auxiliary, "auxiliary");
    for (const auto& t : cfg.targets) detail::check_language(ds, t, "target");
    const Model model(model_config_for(cfg, ds));
    RunWriter* w = ctx.writer;

    PipelineResult r;
    r.base = run_base_stages(cfg, model, ds, root_seed, ctx);
    const StageSeeds& seeds = r.base.seeds;
    if (w) {
        w->checkpoint("init", r.base.init);
        if (cfg.pretrain_enabled) w->checkpoint("pretrain", r.base.pretrained);
        w->checkpoint("stage1", r.base.stage1);
        detail::log_base_stages(*w, r.base);
        if (cfg.pretrain_enabled)
            for (const auto& rep : retrieval_reports(cfg, model, ds, r.base.pretrained, seeds, "pretrain"))
                w->report(rep);
    }

    const auto t0 = std::chrono::steady_clock::now();
    r.meta = run_meta_stage(cfg, model, ds, r.base.stage1, cfg.auxiliary, seeds);
    r.meta_seconds = detail::seconds_since(t0);
    ctx.say("meta done in " + std::to_string(r.meta_seconds) + " s (best iteration " +
            std::to_string(r.meta.best_iteration) + ")");
    if (w) {
        w->checkpoint("meta", r.meta.best);
        detail::log_meta(*w, r.meta);
    }

    const auto t1 = std::chrono::steady_clock::now();
    r.baseline = run_stage3(cfg, model, ds, r.base.stage1, seeds, "baseline");
    r.ours = run_stage3(cfg, model, ds, r.meta.best, seeds, "meta");
    r.deltas = compare_reports(r.baseline, r.ours);
    r.mean_delta = r.ours.aggregate - r.baseline.aggregate;
    if (w) {
        w->report(r.baseline);
        w->report(r.ours);
    }
    if (cfg.fewshot.in_pipeline) {
        detail::in_stage("fewshot", [&] {
            const TrainConfig fc = fewshot_train_config(cfg, seeds);
            for (const auto& t : cfg.targets) {
                for (auto& rep : eval_few_shot(model, r.base.stage1, ds, t, cfg.fewshot.shots, fc, "baseline-fewshot"))
                    r.fewshot_baseline.push_back(std::move(rep));
                for (auto& rep : eval_few_shot(model, r.meta.best, ds, t, cfg.fewshot.shots, fc, "meta-fewshot"))
                    r.fewshot_ours.push_back(std::move(rep));
            }
            return 0;
        });
        for (std::size_t i = 0; i < r.fewshot_baseline.size(); ++i) {
            for (auto& d : compare_reports(r.fewshot_baseline[i], r.fewshot_ours[i]))
                if (d.language != "mean") r.deltas.push_back(d);
            if (w) {
                w->report(r.fewshot_baseline[i]);
                w->report(r.fewshot_ours[i]);
            }
        }
    }
    r.eval_seconds = detail::seconds_since(t1);
    ctx.say("zero-shot mean: baseline " + std::to_string(r.baseline.aggregate) + ", meta " +
            std::to_string(r.ours.aggregate));
    if (w) w->write("deltas.csv", deltas_csv(r.deltas, root_seed));
    return r;
}

// ---------------------------------------------------------------------------
// Run directories

/// Directory of a run; refuses to reuse a run id that already has a manifest.
inline fs::path claim_run_dir(const PipelineConfig& cfg) {
    const fs::path dir = cfg.out_dir / cfg.run_id;
    if (fs::exists(dir / "manifest.json"))
        throw ConfigError("run id '" + cfg.run_id + "' already exists in '" + cfg.out_dir.string() + "'");
    if (fs::exists(dir) && !fs::is_empty(dir))
        throw ConfigError("run directory '" + dir.string() + "' is not empty");
    return dir;
}

inline nlohmann::ordered_json run_manifest(const PipelineConfig& cfg, const std::string& command,
                                           const RunWriter& w, const std::vector<std::uint64_t>& seeds,
                                           const nlohmann::ordered_json& wall_clock, const std::string& status) {
    nlohmann::ordered_json m;
    m["format"] = "xvl-run";
    m["command"] = command;
    m["run_id"] = cfg.run_id;
    m["tool_version"] = kToolVersion;
    m["config_hash"] = config_hash_hex(cfg);
    m["status"] = status;
    m["seeds"] = nlohmann::ordered_json::array();
    for (auto s : seeds) m["seeds"].push_back(to_json(stage_seeds(s)));
    m["checkpoints"] = w.checkpoints();
    m["artifacts"] = w.artifacts();
    m["wall_clock_s"] = wall_clock;
    return m;
}

namespace detail {

/// Runs `body` with a writer on a fresh run directory; writes config.json
/// first and manifest.json last, also when `body` throws.
template <class F>
fs::path with_run_dir(const PipelineConfig& cfg, const std::string& command, const std::vector<std::uint64_t>& seeds,
                      F&& body) {
    const fs::path dir = claim_run_dir(cfg);
    RunWriter w(dir);
    w.write("config.json", to_json(cfg).dump(2) + "\n");
    nlohmann::ordered_json wall = nlohmann::ordered_json::object();
    try {
        body(w, wall);
    } catch (const std::exception& e) {
        const std::string status = std::string("failed: ") + e.what();
        std::ofstream(dir / "manifest.json") << run_manifest(cfg, command, w, seeds, wall, status).dump(2) << '\n';
        throw;
    }
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    os << run_manifest(cfg, command, w, seeds, wall, "ok").dump(2) << '\n';
    if (!os) throw IoError("cannot write manifest in '" + dir.string() + "'");
    return dir;
}

inline Dataset load_configured_dataset(const PipelineConfig& cfg) {
    if (!fs::exists(cfg.dataset_dir / "manifest.json"))
        throw ConfigError("dataset directory '" + cfg.dataset_dir.string() +
                          "' has no manifest.json (run generate first)");
    return load_task(cfg.dataset_dir, cfg.task);
}

} // namespace detail

/// Full pipeline for the configured root seed, written under out_dir/run_id.
inline fs::path cmd_pipeline(const PipelineConfig& cfg, const ProgressFn& progress = {}) {
    cfg.validate();
    const Dataset ds = detail::load_configured_dataset(cfg);
    return detail::with_run_dir(cfg, "pipeline", {cfg.seed}, [&](RunWriter& w, nlohmann::ordered_json& wall) {
        const PipelineResult r = run_pipeline(cfg, ds, cfg.seed, RunContext{&w, progress});
        wall["pretrain"] = r.base.pretrain_seconds;
        wall["stage1"] = r.base.stage1_seconds;
        wall["meta"] = r.meta_seconds;
        wall["eval"] = r.eval_seconds;
    });
}

// ---------------------------------------------------------------------------
// Parallel helpers

/// Runs task(i) for i in [0, n) on up to `jobs` threads. Results must be
/// written to per-index slots; the first failure (by index) is rethrown.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& task) {
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                task(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::vector<std::uint64_t> replicate_seeds(const PipelineConfig& cfg) {
    std::vector<std::uint64_t> s;
    for (std::size_t i = 0; i < cfg.num_seeds; ++i) s.push_back(cfg.seed + i);
    return s;
}

// ---------------------------------------------------------------------------
// Auxiliary x target sweep

struct HeatmapCell {
    std::string auxiliary;
    std::string target;
    std::uint64_t seed = 0;
    double baseline = 0.0;
    double ours = 0.0;
};

struct Heatmap {
    std::vector<std::string> auxiliaries;
    std::vector<std::string> targets;
    std::vector<std::uint64_t> seeds;
    /// delta[a][t], mean over seeds.
    std::vector<std::vector<double>> delta;
    std::vector<HeatmapCell> cells;

    double row_mean(std::size_t a) const { return stats::mean(delta.at(a)); }
};

inline Heatmap sweep_heatmap(const PipelineConfig& cfg, const Dataset& ds, std::size_t jobs,
                             const ProgressFn& progress = {}) {
    cfg.validate();
    if (cfg.auxiliaries.empty()) throw ConfigError("sweep needs at least one auxiliary language");
    for (const auto& a : cfg.auxiliaries) detail::check_language(ds, a, "auxiliary");
    for (const auto& t : cfg.targets) detail::check_language(ds, t, "target");
    const Model model(model_config_for(cfg, ds));
    Heatmap h;
    h.auxiliaries = cfg.auxiliaries;
    h.targets = cfg.targets;
    h.seeds = replicate_seeds(cfg);
    const std::size_t ns = h.seeds.size(), na = h.auxiliaries.size(), nt = h.targets.size();

    std::vector<BaseStages> bases(ns);
    std::vector<EvalReport> baselines(ns);
    parallel_for(ns, jobs, [&](std::size_t s) {
        bases[s] = run_base_stages(cfg, model, ds, h.seeds[s]);
        baselines[s] = run_stage3(cfg, model, ds, bases[s].stage1, bases[s].seeds, "baseline");
    });
    std::vector<EvalReport> ours(na * ns);
    parallel_for(na * ns, jobs, [&](std::size_t k) {
        const std::size_t a = k / ns, s = k % ns;
        const auto m = run_meta_stage(cfg, model, ds, bases[s].stage1, h.auxiliaries[a], bases[s].seeds);
        ours[k] = run_stage3(cfg, model, ds, m.best, bases[s].seeds, "meta");
        if (progress) progress("sweep cell " + h.auxiliaries[a] + " seed " + std::to_string(h.seeds[s]) + " done");
    });
    h.delta.assign(na, std::vector<double>(nt, 0.0));
    for (std::size_t a = 0; a < na; ++a)
        for (std::size_t t = 0; t < nt; ++t) {
            std::vector<double> d;
            for (std::size_t s = 0; s < ns; ++s) {
                const double b = baselines[s].value(h.targets[t]);
                const double o = ours[a * ns + s].value(h.targets[t]);
                h.cells.push_back({h.auxiliaries[a], h.targets[t], h.seeds[s], b, o});
                d.push_back(o - b);
            }
            h.delta[a][t] = stats::mean(d);
        }
    return h;
}

inline std::string heatmap_csv(const Heatmap& h) {
    std::ostringstream os;
    os << "auxiliary";
    for (const auto& t : h.targets) os << ',' << t;
    os << ",mean\n";
    char buf[64];
    for (std::size_t a = 0; a < h.auxiliaries.size(); ++a) {
        os << h.auxiliaries[a];
        for (double v : h.delta[a]) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            os << buf;
        }
        std::snprintf(buf, sizeof buf, ",%.17g\n", h.row_mean(a));
        os << buf;
    }
    return os.str();
}

inline std::string heatmap_cells_csv(const Heatmap& h) {
    std::ostringstream os;
    os << "auxiliary,target,seed,baseline,ours,delta\n";
    char buf[256];
    for (const auto& c : h.cells) {
        std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.17g,%.17g,%.17g\n", c.auxiliary.c_str(), c.target.c_str(),
                      static_cast<unsigned long long>(c.seed), c.baseline, c.ours, c.ours - c.baseline);
        os << buf;
    }
    return os.str();
}

inline fs::path cmd_sweep_heatmap(const PipelineConfig& cfg, std::size_t jobs, const ProgressFn& progress = {}) {
    cfg.validate();
    const Dataset ds = detail::load_configured_dataset(cfg);
    return detail::with_run_dir(
        cfg, "sweep-heatmap", replicate_seeds(cfg), [&](RunWriter& w, nlohmann::ordered_json& wall) {
            const auto t0 = std::chrono::steady_clock::now();
            const Heatmap h = sweep_heatmap(cfg, ds, jobs, progress);
            wall["sweep"] = detail::seconds_since(t0);
            w.write("heatmap.csv", heatmap_csv(h));
            w.write("heatmap_cells.csv", heatmap_cells_csv(h));
        });
}

// ---------------------------------------------------------------------------
// Few-shot curves

struct CurvePoint {
    std::string language;
    std::size_t shot = 0;
    /// One value per seed, in seed order.
    std::vector<double> baseline;
    std::vector<double> ours;
};

struct FewShotCurve {
    std::vector<std::uint64_t> seeds;
    /// Per (language, shot), languages in target order followed by "mean".
    std::vector<CurvePoint> points;

    const CurvePoint& at(const std::string& language, std::size_t shot) const {
        for (const auto& p : points)
            if (p.language == language && p.shot == shot) return p;
        throw DataError("curve has no point for " + language + " at " + std::to_string(shot) + " shots");
    }
};

inline FewShotCurve fewshot_curve(const PipelineConfig& cfg, const Dataset& ds, std::size_t jobs,
                                  const ProgressFn& progress = {}) {
    cfg.validate();
    detail::check_language(ds, cfg.auxiliary, "auxiliary");
    for (const auto& t : cfg.targets) detail::check_language(ds, t, "target");
    if (cfg.fewshot.shots.empty()) throw ConfigError("few-shot curve needs at least one shot count");
    const Model model(model_config_for(cfg, ds));
    FewShotCurve c;
    c.seeds = replicate_seeds(cfg);
    const std::size_t ns = c.seeds.size(), nt = cfg.targets.size(), nk = cfg.fewshot.shots.size();

    // per seed: [target][shot] -> (baseline, ours)
    std::vector<std::vector<std::pair<double, double>>> per_seed(ns);
    parallel_for(ns, jobs, [&](std::size_t s) {
        const BaseStages b = run_base_stages(cfg, model, ds, c.seeds[s]);
        const auto m = run_meta_stage(cfg, model, ds, b.stage1, cfg.auxiliary, b.seeds);
        const TrainConfig fc = fewshot_train_config(cfg, b.seeds);
        auto& out = per_seed[s];
        for (const auto& t : cfg.targets) {
            const auto rb = detail::in_stage("fewshot", [&] {
                return eval_few_shot(model, b.stage1, ds, t, cfg.fewshot.shots, fc, "baseline-fewshot");
            });
            const auto ro = detail::in_stage("fewshot", [&] {
                return eval_few_shot(model, m.best, ds, t, cfg.fewshot.shots, fc, "meta-fewshot");
            });
            for (std::size_t k = 0; k < nk; ++k) out.emplace_back(rb[k].aggregate, ro[k].aggregate);
        }
        if (progress) progress("few-shot seed " + std::to_string(c.seeds[s]) + " done");
    });

    for (std::size_t t = 0; t <= nt; ++t)
        for (std::size_t k = 0; k < nk; ++k) {
            CurvePoint p{t < nt ? cfg.targets[t] : "mean", cfg.fewshot.shots[k], {}, {}};
            for (std::size_t s = 0; s < ns; ++s) {
                if (t < nt) {
                    p.baseline.push_back(per_seed[s][t * nk + k].first);
                    p.ours.push_back(per_seed[s][t * nk + k].second);
                } else {
                    double b = 0.0, o = 0.0;
                    for (std::size_t u = 0; u < nt; ++u) {
                        b += per_seed[s][u * nk + k].first;
                        o += per_seed[s][u * nk + k].second;
                    }
                    p.baseline.push_back(b / static_cast<double>(nt));
                    p.ours.push_back(o / static_cast<double>(nt));
                }
            }
            c.points.push_back(std::move(p));
        }
    return c;
}

/// language, shot, mean and standard error of both curves, one-sided paired p-value.
inline std::string curve_csv(const FewShotCurve& c) {
    std::ostringstream os;
    os << "language,shot,baseline_mean,baseline_stderr,ours_mean,ours_stderr,delta_mean,p_value,seeds\n";
    char buf[512];
    for (const auto& p : c.points) {
        double pv = std::numeric_limits<double>::quiet_NaN();
        if (p.ours.size() >= 2) pv = stats::paired_t_greater(p.ours, p.baseline).p_value;
        const double bm = stats::mean(p.baseline), om = stats::mean(p.ours);
        std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", p.language.c_str(), p.shot,
                      bm, stats::stderr_of_mean(p.baseline), om, stats::stderr_of_mean(p.ours), om - bm, pv,
                      p.ours.size());
        os << buf;
    }
    return os.str();
}

inline fs::path cmd_fewshot_curve(const PipelineConfig& cfg, std::size_t jobs, const ProgressFn& progress = {}) {
    cfg.validate();
    const Dataset ds = detail::load_configured_dataset(cfg);
    return detail::with_run_dir(
        cfg, "fewshot-curve", replicate_seeds(cfg), [&](RunWriter& w, nlohmann::ordered_json& wall) {
            const auto t0 = std::chrono::steady_clock::now();
            const FewShotCurve c = fewshot_curve(cfg, ds, jobs, progress);
            wall["curve"] = detail::seconds_since(t0);
            w.write("fewshot_curve.csv", curve_csv(c));
        });
}

} // namespace xvl

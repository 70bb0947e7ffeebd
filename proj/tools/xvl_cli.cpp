// xvl: command-line front end for the benchmark generator, the training
// pipeline, sweeps and the gradient checker.
//
// Exit codes: 0 success, 2 configuration or usage error, 1 anything else.
// XVL_LOG_LEVEL selects verbosity (trace, debug, info, warn, error, off).

#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "xvl/data.hpp"
#include "xvl/gradcheck.hpp"
#include "xvl/pipeline.hpp"

namespace {

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("xvl");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
    const char* env = std::getenv("XVL_LOG_LEVEL");
    spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string mode;
    std::string run_id;
    std::size_t jobs = 1;
    std::string fault;
};

xvl::PipelineConfig pipeline_config(const Flags& f) {
    if (f.config.empty()) throw xvl::ConfigError("--config is required");
    xvl::PipelineConfig cfg = xvl::load_pipeline_config(f.config);
    if (f.seed) cfg.seed = *f.seed;
    if (!f.out.empty()) cfg.out_dir = f.out;
    if (!f.mode.empty()) cfg.meta.mode = xvl::parse_meta_mode(f.mode);
    if (!f.run_id.empty()) cfg.run_id = f.run_id;
    cfg.validate();
    return cfg;
}

void progress(const std::string& msg) { spdlog::info("{}", msg); }

int cmd_generate(const Flags& f) {
    xvl::BenchmarkConfig bc;
    if (!f.config.empty()) bc = xvl::benchmark_config_from_json(xvl::read_json_file(f.config));
    if (f.seed) bc.seed = *f.seed;
    bc.validate();
    const std::string out = f.out.empty() ? "data" : f.out;
    const auto files = xvl::generate(bc, out);
    spdlog::info("wrote {} files under {}", files.size(), out);
    std::printf("%s\n", (std::filesystem::path(out) / "manifest.json").string().c_str());
    return 0;
}

int cmd_pipeline(const Flags& f) {
    const auto cfg = pipeline_config(f);
    spdlog::info("pipeline run '{}' (mode {}, seed {})", cfg.run_id, xvl::to_string(cfg.meta.mode), cfg.seed);
    const auto dir = xvl::cmd_pipeline(cfg, progress);
    std::printf("%s\n", dir.string().c_str());
    return 0;
}

int cmd_sweep(const Flags& f) {
    const auto cfg = pipeline_config(f);
    spdlog::info("sweep {} auxiliary x {} target languages, {} seeds, {} jobs", cfg.auxiliaries.size(),
                 cfg.targets.size(), cfg.num_seeds, f.jobs);
    const auto dir = xvl::cmd_sweep_heatmap(cfg, f.jobs, progress);
    std::printf("%s\n", dir.string().c_str());
    return 0;
}

int cmd_curve(const Flags& f) {
    const auto cfg = pipeline_config(f);
    spdlog::info("few-shot curve over {} shot counts, {} seeds, {} jobs", cfg.fewshot.shots.size(), cfg.num_seeds,
                 f.jobs);
    const auto dir = xvl::cmd_fewshot_curve(cfg, f.jobs, progress);
    std::printf("%s\n", dir.string().c_str());
    return 0;
}

int cmd_gradcheck(const Flags& f) {
    xvl::gradcheck::Options opt;
    if (f.seed) opt.seed = *f.seed;
    if (!f.fault.empty()) {
        opt.fault = xvl::ad::parse_op(f.fault);
        if (!opt.fault) throw xvl::ConfigError("unknown op '" + f.fault + "'");
        spdlog::warn("corrupting the backward rule of '{}'", f.fault);
    }
    const auto report = xvl::gradcheck::run(opt);
    for (const auto& c : report.checks)
        std::printf("%-28s max_err=%.3e tol=%.0e coords=%zu %s\n", c.name.c_str(), c.max_error, c.tolerance,
                    c.coordinates, c.passed ? "PASS" : "FAIL");
    std::printf("%zu checks, %zu failed, %.2f s\n", report.checks.size(), report.failures().size(), report.seconds);
    for (const auto& name : report.failures()) std::printf("failed: %s\n", name.c_str());
    return report.passed() ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Cross-lingual vision-language meta-learning on a synthetic benchmark"};
    app.require_subcommand(1);
    Flags f;

    auto* gen = app.add_subcommand("generate", "Write the synthetic benchmark to a directory");
    gen->add_option("--config", f.config, "Benchmark config (JSON); defaults when omitted");
    gen->add_option("--seed", f.seed, "Override the benchmark seed");
    gen->add_option("--out", f.out, "Output directory (default: data)");

    auto add_run_flags = [&](CLI::App* c, bool jobs) {
        c->add_option("--config", f.config, "Pipeline config (JSON)")->required();
        c->add_option("--seed", f.seed, "Root seed");
        c->add_option("--out", f.out, "Output directory for runs");
        c->add_option("--mode", f.mode, "Meta mode")
            ->check(CLI::IsMember({"unsupervised", "supervised", "task-only", "first-order"}));
        c->add_option("--run-id", f.run_id, "Run id (directory name under the output directory)");
        if (jobs) c->add_option("--jobs", f.jobs, "Parallel workers")->check(CLI::PositiveNumber);
    };
    auto* pipe = app.add_subcommand("pipeline", "Stages 0-3 plus the baseline path for one seed");
    add_run_flags(pipe, false);
    auto* sweep = app.add_subcommand("sweep-heatmap", "Auxiliary x target delta matrix");
    add_run_flags(sweep, true);
    auto* curve = app.add_subcommand("fewshot-curve", "Baseline and meta curves over shot counts");
    add_run_flags(curve, true);
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of every gradient");
    gc->add_option("--seed", f.seed, "Seed for the random test inputs");
    gc->add_option("--inject-fault", f.fault, "Corrupt one op's backward rule")->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_generate(f);
        if (*pipe) return cmd_pipeline(f);
        if (*sweep) return cmd_sweep(f);
        if (*curve) return cmd_curve(f);
        if (*gc) return cmd_gradcheck(f);
    } catch (const xvl::ConfigError& e) {
        spdlog::error("config error: {}", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 1;
}

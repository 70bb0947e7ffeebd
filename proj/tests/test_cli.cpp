#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "xvl/pipeline.hpp"

using namespace xvl;

namespace {

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

Result run(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    const auto tmp = fs::temp_directory_path() / ("xvl-cli-" + std::to_string(::getpid()) + "-" +
                                                  std::to_string(counter++));
    const std::string cmd = env + " " + XVL_CLI_PATH + " " + args + " >" + tmp.string() + ".out 2>" +
                            tmp.string() + ".err";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = testutil::slurp(tmp.string() + ".out");
    r.err = testutil::slurp(tmp.string() + ".err");
    fs::remove(tmp.string() + ".out");
    fs::remove(tmp.string() + ".err");
    return r;
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) { std::ofstream(p) << j.dump(2); }

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = testutil::temp_dir(std::string("cli-") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        nlohmann::ordered_json bench = testutil::small_benchmark();
        write_json(dir_ / "bench.json", bench);
    }

    nlohmann::ordered_json tiny_pipeline() const {
        return nlohmann::ordered_json::parse(R"({
            "run_id": "cli", "num_seeds": 1,
            "model": {"hidden_dim": 8, "embed_dim": 4},
            "pretrain": {"epochs": 1}, "stage1": {"epochs": 1},
            "meta": {"iterations": 2, "eval_interval": 1, "support_size": 8, "query_size": 8},
            "auxiliaries": ["aux1"], "targets": ["tgt1"],
            "fewshot": {"shots": [0, 1], "train": {"epochs": 1}},
            "eval": {"retrieval_pool": 20}})");
    }

    fs::path dir_;
};

} // namespace

TEST_F(CliTest, UsageErrorsExitTwo) {
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("--help").code, 0);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("pipeline").code, 2);
    EXPECT_EQ(run("pipeline --config x.json --mode maml").code, 2);
    EXPECT_EQ(run("sweep-heatmap --config x.json --jobs 0").code, 2);
}

TEST_F(CliTest, MissingConfigNamesThePath) {
    const auto r = run("pipeline --config /nonexistent/run.json");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("/nonexistent/run.json"), std::string::npos) << r.err;
    const auto g = run("generate --config /nonexistent/bench.json --out " + (dir_ / "d").string());
    EXPECT_EQ(g.code, 2);
    EXPECT_NE(g.err.find("/nonexistent/bench.json"), std::string::npos) << g.err;
}

TEST_F(CliTest, GenerateIsIdempotent) {
    const auto a = run("generate --config " + (dir_ / "bench.json").string() + " --out " + (dir_ / "a").string());
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, (dir_ / "a" / "manifest.json").string() + "\n");
    const auto m1 = testutil::slurp(dir_ / "a" / "manifest.json");
    const auto f1 = testutil::slurp(dir_ / "a" / "xvnli" / "tgt3.test.jsonl");
    ASSERT_EQ(run("generate --config " + (dir_ / "bench.json").string() + " --out " + (dir_ / "a").string()).code, 0);
    EXPECT_EQ(testutil::slurp(dir_ / "a" / "manifest.json"), m1);
    EXPECT_EQ(testutil::slurp(dir_ / "a" / "xvnli" / "tgt3.test.jsonl"), f1);

    const auto manifest = nlohmann::json::parse(m1);
    EXPECT_EQ(manifest.at("languages").size(), 7u);
    EXPECT_EQ(manifest.at("seed"), 7);
    ASSERT_EQ(run("generate --config " + (dir_ / "bench.json").string() + " --seed 8 --out " +
                  (dir_ / "b").string())
                  .code,
              0);
    EXPECT_EQ(nlohmann::json::parse(testutil::slurp(dir_ / "b" / "manifest.json")).at("seed"), 8);
}

TEST_F(CliTest, PipelineRunsAndRefusesToOverwrite) {
    ASSERT_EQ(run("generate --config " + (dir_ / "bench.json").string() + " --out " + (dir_ / "data").string()).code,
              0);
    auto cfg = tiny_pipeline();
    cfg["dataset_dir"] = (dir_ / "data").string();
    write_json(dir_ / "run.json", cfg);
    const std::string base = "pipeline --config " + (dir_ / "run.json").string() + " --out " + (dir_ / "runs").string();
    const auto r = run(base, "XVL_LOG_LEVEL=off");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, (dir_ / "runs" / "cli").string() + "\n");
    EXPECT_TRUE(r.err.empty()) << r.err;
    const auto m = nlohmann::json::parse(testutil::slurp(dir_ / "runs" / "cli" / "manifest.json"));
    EXPECT_EQ(m.at("status"), "ok");
    EXPECT_TRUE(fs::exists(dir_ / "runs" / "cli" / "deltas.csv"));

    const auto again = run(base);
    EXPECT_EQ(again.code, 2);
    EXPECT_NE(again.err.find("already exists"), std::string::npos) << again.err;

    const auto other = run(base + " --run-id cli2 --mode unsupervised --seed 3");
    ASSERT_EQ(other.code, 0) << other.err;
    const auto cfg2 = nlohmann::json::parse(testutil::slurp(dir_ / "runs" / "cli2" / "config.json"));
    EXPECT_EQ(cfg2.at("meta").at("mode"), "unsupervised");
    EXPECT_EQ(cfg2.at("seed"), 3);
}

TEST_F(CliTest, RuntimeFailureExitsOne) {
    ASSERT_EQ(run("generate --config " + (dir_ / "bench.json").string() + " --out " + (dir_ / "data").string()).code,
              0);
    auto cfg = tiny_pipeline();
    cfg["dataset_dir"] = (dir_ / "data").string();
    cfg["meta"]["support_size"] = 500;
    write_json(dir_ / "run.json", cfg);
    const auto r = run("pipeline --config " + (dir_ / "run.json").string() + " --out " + (dir_ / "runs").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("stage 'meta' failed"), std::string::npos) << r.err;
}

TEST_F(CliTest, GradcheckPassesAndReportsInjectedFaults) {
    const auto ok = run("gradcheck");
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_NE(ok.out.find("op:matmul"), std::string::npos);
    EXPECT_NE(ok.out.find(", 0 failed,"), std::string::npos);
    EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);

    const auto bad = run("gradcheck --inject-fault tanh");
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.out.find("failed: op:tanh"), std::string::npos) << bad.out;

    EXPECT_EQ(run("gradcheck --inject-fault nonsense").code, 2);
}

#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "xvl/model.hpp"
#include "xvl/params.hpp"

using namespace xvl;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.image_dim = 6;
    c.text_dim = 5;
    c.hidden_dim = 7;
    c.embed_dim = 4;
    c.classes = 3;
    return c;
}

ParamSet zeroed(const ParamSet& p) { return p.zeros_like(); }

PairedBatch random_batch(std::mt19937_64& rng, const ModelConfig& c, std::size_t n) {
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % c.classes;
    return PairedBatch(testutil::random_tensor(rng, n, c.image_dim), testutil::random_tensor(rng, n, c.text_dim),
                       labels, "en");
}

} // namespace

TEST(Model, EmptyBatchGivesEmptyEmbeddings) {
    const Model m(small_config());
    const ParamSet p = m.init(1);
    ad::Graph g;
    const VarSet v = bind_constant(g, p);
    const Tensor e = m.encode_image(v, g.constant(Tensor(0, 6))).value();
    EXPECT_EQ(e.rows(), 0u);
    EXPECT_EQ(e.cols(), 4u);
    EXPECT_EQ(m.encode_text(v, g.constant(Tensor(0, 5))).value().cols(), 4u);
}

TEST(Model, ZeroWeightsGiveZeroEmbeddings) {
    const Model m(small_config());
    const ParamSet p = zeroed(m.init(1));
    std::mt19937_64 rng(3);
    ad::Graph g;
    const VarSet v = bind_constant(g, p);
    EXPECT_EQ(m.encode_image(v, g.constant(testutil::random_tensor(rng, 3, 6))).value(), Tensor(3, 4, 0.0));
    EXPECT_EQ(m.encode_text(v, g.constant(testutil::random_tensor(rng, 3, 5))).value(), Tensor(3, 4, 0.0));
}

TEST(Model, EncoderGoldenSnapshot) {
    const Model m(small_config());
    const ParamSet p = m.init(42);
    ad::Graph g;
    const VarSet v = bind_constant(g, p);
    Tensor x(2, 6), t(2, 5);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.3 * static_cast<double>(i) + 0.1);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::cos(0.7 * static_cast<double>(i));
    const Tensor ei = m.encode_image(v, g.constant(x)).value();
    const Tensor et = m.encode_text(v, g.constant(t)).value();
    // Recorded from the first verified build.
    const double want_img[] = {
        -0x1.53cf64af78879p-1, -0x1.36910f4ce89f2p-4, -0x1.3802cee8d3e84p-1,
        -0x1.c130e707f926fp-3, -0x1.d005f56929966p-2, -0x1.50435a9341523p-2,
        0x1.4f5e9c3f3e168p-6, -0x1.9b5550891fc8p-4};
    const double want_txt[] = {
        -0x1.dc4274065b616p-5, -0x1.69a543df0a113p-4, -0x1.41be98383d56p-1,
        0x1.4b04533ff5418p-1, -0x1.87d854aefd5dap-6, 0x1.51433934831fap-2,
        0x1.e4960406f787cp-2, -0x1.9448a225b3228p-1};
    for (std::size_t i = 0; i < ei.size(); ++i) EXPECT_EQ(ei[i], want_img[i]) << "image " << i;
    for (std::size_t i = 0; i < et.size(); ++i) EXPECT_EQ(et[i], want_txt[i]) << "text " << i;
}

TEST(Model, WidthMismatchRaises) {
    const Model m(small_config());
    ad::Graph g;
    const VarSet v = bind_constant(g, m.init(1));
    EXPECT_THROW(m.encode_image(v, g.constant(Tensor(2, 5))), ShapeError);
    EXPECT_THROW(m.encode_text(v, g.constant(Tensor(2, 6))), ShapeError);
    EXPECT_THROW(m.classify(v, g.constant(Tensor(2, 6)), g.constant(Tensor(3, 5))), ShapeError);
    EXPECT_THROW(m.project(v, g.constant(Tensor(2, 3)), g.constant(Tensor(2, 4))), ShapeError);
}

TEST(Model, IdentityProjectionIsPassThrough) {
    const ModelConfig c = small_config();
    const Model m(c);
    ParamSet p = m.init(1);
    p.set("proj.w1", Tensor::identity(4));
    p.set("proj.w2", Tensor::identity(4));
    std::mt19937_64 rng(8);
    const Tensor i = testutil::random_tensor(rng, 3, 4), t = testutil::random_tensor(rng, 3, 4);
    ad::Graph g;
    const VarSet v = bind_constant(g, p);
    auto [u, w] = m.project(v, g.constant(i), g.constant(t));
    EXPECT_EQ(u.value(), i);
    EXPECT_EQ(w.value(), t);
}

TEST(Model, ZeroW1GivesZeroU) {
    const Model m(small_config());
    ParamSet p = m.init(1);
    p.set("proj.w1", Tensor(4, 4, 0.0));
    std::mt19937_64 rng(8);
    ad::Graph g;
    const VarSet v = bind_constant(g, p);
    auto [u, w] = m.project(v, g.constant(testutil::random_tensor(rng, 3, 4)), g.constant(Tensor(3, 4, 1.0)));
    EXPECT_EQ(u.value(), Tensor(3, 4, 0.0));
}

TEST(Model, ProjectionMatchesDenseOracle) {
    ModelConfig c = small_config();
    c.projection_dim = 3;
    const Model m(c);
    const ParamSet p = m.init(5);
    std::mt19937_64 rng(6);
    const Tensor i = testutil::random_tensor(rng, 4, 4), t = testutil::random_tensor(rng, 4, 4);
    ad::Graph g;
    const VarSet v = bind_constant(g, p);
    auto [u, w] = m.project(v, g.constant(i), g.constant(t));
    const Tensor& w1 = p.at("proj.w1");
    const Tensor& w2 = p.at("proj.w2");
    ASSERT_EQ(u.value().cols(), 3u);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t k = 0; k < 3; ++k) {
            double su = 0.0, sv = 0.0;
            for (std::size_t d = 0; d < 4; ++d) {
                su += i(r, d) * w1(k, d);
                sv += t(r, d) * w2(k, d);
            }
            EXPECT_NEAR(u.value()(r, k), su, 1e-14);
            EXPECT_NEAR(w.value()(r, k), sv, 1e-14);
        }
}

TEST(Model, ZeroHeadGivesUniformProbabilities) {
    const Model m(small_config());
    ParamSet p = m.init(2);
    p.set("head.w_img", Tensor(3, 4, 0.0));
    p.set("head.w_txt", Tensor(3, 4, 0.0));
    std::mt19937_64 rng(1);
    ad::Graph g;
    const VarSet v = bind_constant(g, p);
    const Tensor probs = ad::softmax_rows(m.classify(v, g.constant(testutil::random_tensor(rng, 4, 6)),
                                                     g.constant(testutil::random_tensor(rng, 4, 5))))
                             .value();
    for (double x : probs.values()) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
}

TEST(Model, SingleExampleBinaryLogits) {
    ModelConfig c = small_config();
    c.classes = 2;
    const Model m(c);
    ad::Graph g;
    const VarSet v = bind_constant(g, m.init(1));
    const Tensor logits = m.classify(v, g.constant(Tensor(1, 6, 0.5)), g.constant(Tensor(1, 5, 0.5))).value();
    EXPECT_EQ(logits.rows(), 1u);
    EXPECT_EQ(logits.cols(), 2u);
}

TEST(Model, CrossEntropyGradientMatchesFiniteDifferences) {
    const Model m(small_config());
    std::mt19937_64 rng(12);
    ParamSet theta = m.init(12);
    for (std::size_t i = 0; i < theta.size(); ++i)
        if (theta.entry(i).name.find(".b") != std::string::npos) {
            Tensor b = theta.entry(i).value;
            for (double& x : b.values()) x = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
            theta.set(i, b);
        }
    const PairedBatch batch = random_batch(rng, m.config(), 5);
    ad::Graph g;
    const VarSet p = bind(g, theta);
    const ParamSet analytic = to_params(p, ad::grad(m.task_loss(p, batch), p.vars()));
    const ParamSet numeric = testutil::central_difference(
        [&](const ParamSet& q) {
            ad::Graph h;
            return m.task_loss(bind_constant(h, q), batch).value().item();
        },
        theta);
    EXPECT_LE(testutil::max_rel(analytic, numeric), 1e-4);
}

TEST(Model, ShapeClosure) {
    for (auto act : {Activation::Tanh, Activation::Relu}) {
        for (std::size_t proj : {0u, 2u, 9u}) {
            ModelConfig c = small_config();
            c.activation = act;
            c.projection_dim = proj;
            const Model m(c);
            const ParamSet p = m.init(3);
            std::mt19937_64 rng(proj);
            for (std::size_t n = 0; n <= 64; n += 8) {
                ad::Graph g;
                const VarSet v = bind_constant(g, p);
                const ad::Var x = g.constant(testutil::random_tensor(rng, n, 6));
                const ad::Var t = g.constant(testutil::random_tensor(rng, n, 5));
                const ad::Var ei = m.encode_image(v, x), et = m.encode_text(v, t);
                EXPECT_EQ(ei.value().rows(), n);
                EXPECT_EQ(ei.value().cols(), c.embed_dim);
                auto [u, w] = m.project(v, ei, et);
                EXPECT_EQ(u.value().cols(), c.proj_dim());
                EXPECT_EQ(w.value().rows(), n);
                EXPECT_EQ(m.classify(v, x, t).value().cols(), c.classes);
            }
        }
    }
}

TEST(Model, ParameterIsolation) {
    const Model m(small_config());
    const ParamSet theta = m.init(4);
    std::mt19937_64 rng(4);
    ad::Graph g;
    const VarSet p = bind(g, theta);
    const ad::Var ei = m.encode_image(p, g.constant(testutil::random_tensor(rng, 3, 6)));
    const ParamSet gi = to_params(p, ad::grad(ad::sum(ei * ei), p.vars()));
    const ad::Var et = m.encode_text(p, g.constant(testutil::random_tensor(rng, 3, 5)));
    const ParamSet gt = to_params(p, ad::grad(ad::sum(et * et), p.vars()));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const std::string& name = theta.entry(i).name;
        const bool image_side = name.rfind("img.", 0) == 0;
        const bool text_side = name.rfind("txt.", 0) == 0;
        auto all_zero = [](const Tensor& t) {
            for (double x : t.values())
                if (x != 0.0) return false;
            return true;
        };
        if (!image_side) EXPECT_TRUE(all_zero(gi.entry(i).value)) << name;
        if (!text_side) EXPECT_TRUE(all_zero(gt.entry(i).value)) << name;
    }
}

TEST(Model, InitIsSeedDeterministic) {
    const Model m(small_config());
    EXPECT_EQ(m.init(9), m.init(9));
    EXPECT_FALSE(m.init(9) == m.init(10));
    EXPECT_EQ(m.init(9).parameter_count(), 7u * 6 + 7 + 4 * 7 + 4 + 7 * 5 + 7 + 4 * 7 + 4 + 16 + 16 + 12 + 12 + 3);
}

TEST(ModelConfig, Validation) {
    ModelConfig c = small_config();
    c.classes = 1;
    EXPECT_THROW(Model{c}, ConfigError);
    c = small_config();
    c.hidden_dim = 0;
    EXPECT_THROW(Model{c}, ConfigError);
    EXPECT_EQ(parse_activation("relu"), Activation::Relu);
    EXPECT_THROW(parse_activation("gelu"), ConfigError);
}

TEST(ParamSet, NamesShapesAndVersion) {
    ParamSet p;
    p.add("a", Tensor(2, 2, 1.0));
    EXPECT_THROW(p.add("a", Tensor(1, 1)), ConfigError);
    EXPECT_THROW(p.at("b"), ConfigError);
    EXPECT_THROW(p.set("a", Tensor(3, 2)), ShapeError);
    const auto v0 = p.version();
    p.set("a", Tensor(2, 2, 2.0));
    EXPECT_GT(p.version(), v0);
    EXPECT_EQ(p.at("a")(1, 1), 2.0);
}

TEST(ParamSet, SaveLoadRoundTripIsBitExact) {
    const Model m(small_config());
    ParamSet p = m.init(77);
    p.add("scalar", Tensor::scalar(-0.0));
    p.add("tiny", Tensor::scalar(4.9406564584124654e-324));
    const auto dir = testutil::temp_dir("params");
    const std::string path = (dir / "p.mxvl").string();
    save_params(path, p);
    const ParamSet q = load_params(path);
    EXPECT_EQ(p, q);
    EXPECT_EQ(serialize_params(p), serialize_params(q));
    EXPECT_EQ(params_hash(p), params_hash(q));
    EXPECT_TRUE(std::signbit(q.at("scalar").item()));
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p.entry(i).value.shape(), q.entry(i).value.shape());
}

TEST(ParamSet, FormatHeader) {
    ParamSet p;
    p.add("w", Tensor::matrix(1, 2, {1.0, 2.0}));
    const std::string bytes = serialize_params(p);
    ASSERT_GE(bytes.size(), 12u);
    EXPECT_EQ(bytes.substr(0, 4), "MXVL");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);
    // 4 magic + 4 version + 4 count + 4 name len + 1 name + 4 rank + 2*8 dims + 2*8 data
    EXPECT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 1 + 4 + 16 + 16);
}

TEST(ParamSet, CorruptFilesRejected) {
    std::istringstream bad_magic(std::string("XXXX\1\0\0\0\0\0\0\0", 12));
    EXPECT_THROW(read_params(bad_magic), IoError);
    ParamSet p;
    p.add("w", Tensor::matrix(1, 2, {1.0, 2.0}));
    std::string bytes = serialize_params(p);
    std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_params(truncated), IoError);
    EXPECT_THROW(load_params("/nonexistent/dir/p.mxvl"), IoError);
}

TEST(ParamSet, HashChangesWithValues) {
    const Model m(small_config());
    ParamSet p = m.init(1);
    const auto h = params_hash(p);
    Tensor t = p.at("head.b");
    t[0] = 1e-300;
    p.set("head.b", t);
    EXPECT_NE(params_hash(p), h);
}

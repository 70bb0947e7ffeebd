#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xvl/autodiff.hpp"
#include "xvl/batch.hpp"
#include "xvl/error.hpp"
#include "xvl/params.hpp"
#include "xvl/rng.hpp"

namespace xvl {

enum class Activation { Tanh, Relu };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

inline Activation parse_activation(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    throw ConfigError("unknown activation '" + s + "' (expected tanh or relu)");
}

struct ModelConfig {
    std::size_t image_dim = 32;
    std::size_t text_dim = 32;
    std::size_t hidden_dim = 64;
    std::size_t embed_dim = 32;
    /// 0 means "same as embed_dim".
    std::size_t projection_dim = 0;
    std::size_t classes = 3;
    Activation activation = Activation::Tanh;

    std::size_t proj_dim() const { return projection_dim == 0 ? embed_dim : projection_dim; }

    void validate() const {
        if (image_dim < 1 || text_dim < 1 || hidden_dim < 1 || embed_dim < 1)
            throw ConfigError("model dimensions must be >= 1");
        if (classes < 2) throw ConfigError("model needs at least 2 classes");
    }
};

/// Dual-encoder vision-language model over precomputed features.
///
/// Each encoder is a 2-layer perceptron. W1/W2 project image and text
/// embeddings into the contrastive space; the classification head reads the
/// concatenated (unprojected) embeddings. The head weight over the
/// concatenation is stored as two blocks, `head.w_img` and `head.w_txt`.
class Model {
public:
    explicit Model(ModelConfig config) : config_(config) { config_.validate(); }

    const ModelConfig& config() const { return config_; }

    /// Fresh parameters, uniform Glorot initialisation, zero biases.
    ParamSet init(std::uint64_t seed) const {
        Rng rng(seed);
        ParamSet p;
        auto dense = [&](const std::string& name, std::size_t out, std::size_t in) {
            const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
            Tensor w(out, in);
            for (double& v : w.values()) v = rng.uniform(-bound, bound);
            p.add(name, std::move(w));
        };
        auto bias = [&](const std::string& name, std::size_t n) {
            p.add(name, Tensor::vector(std::vector<double>(n, 0.0)));
        };
        const auto& c = config_;
        dense("img.w1", c.hidden_dim, c.image_dim);
        bias("img.b1", c.hidden_dim);
        dense("img.w2", c.embed_dim, c.hidden_dim);
        bias("img.b2", c.embed_dim);
        dense("txt.w1", c.hidden_dim, c.text_dim);
        bias("txt.b1", c.hidden_dim);
        dense("txt.w2", c.embed_dim, c.hidden_dim);
        bias("txt.b2", c.embed_dim);
        dense("proj.w1", c.proj_dim(), c.embed_dim);
        dense("proj.w2", c.proj_dim(), c.embed_dim);
        dense("head.w_img", c.classes, c.embed_dim);
        dense("head.w_txt", c.classes, c.embed_dim);
        bias("head.b", c.classes);
        return p;
    }

    ad::Var encode_image(const VarSet& p, const ad::Var& features) const {
        check_width(features, config_.image_dim, "image");
        return encode(p, "img", features);
    }

    ad::Var encode_text(const VarSet& p, const ad::Var& features) const {
        check_width(features, config_.text_dim, "text");
        return encode(p, "txt", features);
    }

    /// U = I W1^T, V = T W2^T.
    std::pair<ad::Var, ad::Var> project(const VarSet& p, const ad::Var& image_emb,
                                        const ad::Var& text_emb) const {
        check_width(image_emb, config_.embed_dim, "image embedding");
        check_width(text_emb, config_.embed_dim, "text embedding");
        return {ad::matmul(image_emb, ad::transpose(p["proj.w1"])),
                ad::matmul(text_emb, ad::transpose(p["proj.w2"]))};
    }

    /// N x C logits from the concatenated image and text embeddings.
    ad::Var classify(const VarSet& p, const ad::Var& image, const ad::Var& text) const {
        if (image.rows() != text.rows()) {
            throw ShapeError("classify: " + std::to_string(image.rows()) + " images vs " +
                             std::to_string(text.rows()) + " texts");
        }
        const ad::Var ei = encode_image(p, image);
        const ad::Var et = encode_text(p, text);
        return ad::matmul(ei, ad::transpose(p["head.w_img"])) +
               ad::matmul(et, ad::transpose(p["head.w_txt"])) +
               ad::broadcast_rows(p["head.b"], image.rows());
    }

    /// Mean cross-entropy of the downstream task on a labelled batch.
    ad::Var task_loss(const VarSet& p, const PairedBatch& batch) const {
        const auto& labels = batch.labels();
        if (batch.size() == 0) throw ShapeError("task loss on an empty batch");
        for (auto y : labels)
            if (y >= config_.classes) throw ShapeError("label out of range");
        ad::Graph& g = graph_of(p);
        const ad::Var logits = classify(p, g.constant(batch.image()), g.constant(batch.text()));
        return -ad::mean(ad::pick(ad::log_softmax_rows(logits), labels));
    }

    /// Predicted class per row.
    std::vector<std::size_t> predict(const ParamSet& params, const PairedBatch& batch) const {
        ad::Graph g;
        ad::NoGradGuard guard(g);
        const VarSet p = bind_constant(g, params);
        const Tensor& logits =
            classify(p, g.constant(batch.image()), g.constant(batch.text())).value();
        std::vector<std::size_t> out(logits.rows());
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < logits.cols(); ++j)
                if (logits(i, j) > logits(i, best)) best = j;
            out[i] = best;
        }
        return out;
    }

    /// Projected (U, V) values for a batch, no gradient tracking.
    std::pair<Tensor, Tensor> projections(const ParamSet& params, const PairedBatch& batch) const {
        ad::Graph g;
        ad::NoGradGuard guard(g);
        const VarSet p = bind_constant(g, params);
        auto [u, v] = project(p, encode_image(p, g.constant(batch.image())),
                              encode_text(p, g.constant(batch.text())));
        return {u.value(), v.value()};
    }

private:
    static ad::Graph& graph_of(const VarSet& p) {
        if (p.size() == 0 || !p.at(0).valid()) throw GraphError("parameters are not bound to a graph");
        return *p.at(0).graph();
    }

    static void check_width(const ad::Var& x, std::size_t want, const char* what) {
        if (x.cols() != want) {
            throw ShapeError(std::string(what) + " batch has width " + std::to_string(x.cols()) +
                             ", model expects " + std::to_string(want));
        }
    }

    ad::Var activate(const ad::Var& x) const {
        return config_.activation == Activation::Tanh ? ad::tanh(x) : ad::relu(x);
    }

    ad::Var encode(const VarSet& p, const std::string& side, const ad::Var& x) const {
        const ad::Var h = activate(ad::linear(x, p[side + ".w1"], p[side + ".b1"]));
        return ad::linear(h, p[side + ".w2"], p[side + ".b2"]);
    }

    ModelConfig config_;
};

} // namespace xvl

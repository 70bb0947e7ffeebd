#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "xvl/autodiff.hpp"
#include "xvl/batch.hpp"
#include "xvl/error.hpp"
#include "xvl/model.hpp"

namespace xvl {

namespace detail {

inline void require_nonzero_rows(const Tensor& x, const char* which) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (double v : x.row(i)) s += v * v;
        if (s == 0.0) {
            throw DegenerateInputError(std::string("zero-norm row ") + std::to_string(i) + " in " +
                                       which + "; cosine similarity is undefined");
        }
    }
}

} // namespace detail

/// N x N matrix of cosine similarities, entry (i, j) = <U_i, V_j>.
inline ad::Var cosine_matrix(const ad::Var& u, const ad::Var& v) {
    const Tensor& uv = u.value();
    const Tensor& vv = v.value();
    if (uv.rows() == 0) throw ShapeError("cosine_matrix: empty batch");
    if (uv.rows() != vv.rows() || uv.cols() != vv.cols()) {
        throw ShapeError("cosine_matrix: U is " + uv.shape_string() + " but V is " + vv.shape_string());
    }
    detail::require_nonzero_rows(uv, "U");
    detail::require_nonzero_rows(vv, "V");
    const std::size_t d = uv.cols();
    const ad::Var un = u / ad::broadcast_cols(ad::l2_norm_rows(u), d);
    const ad::Var vn = v / ad::broadcast_cols(ad::l2_norm_rows(v), d);
    return ad::matmul(un, ad::transpose(vn));
}

/// Symmetric image-text contrastive loss, summed over the batch:
///
///   L = sum_i [ -log softmax_k <U_i, V_k> at k=i  -log softmax_k <V_i, U_k> at k=i ]
///
/// Positives are the diagonal pairs; every off-diagonal pair is a negative.
/// No temperature and no batch averaging.
inline ad::Var contrastive_loss(const ad::Var& u, const ad::Var& v) {
    const ad::Var sim = cosine_matrix(u, v);
    const std::size_t n = sim.rows();
    std::vector<std::size_t> diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = i;
    const ad::Var image_to_text = ad::sum(ad::pick(ad::log_softmax_rows(sim), diag));
    const ad::Var text_to_image = ad::sum(ad::pick(ad::log_softmax_rows(ad::transpose(sim)), diag));
    return -(image_to_text + text_to_image);
}

/// Contrastive loss of the model on a batch. Never touches labels.
inline ad::Var model_contrastive_loss(const Model& model, const VarSet& p, const PairedBatch& batch) {
    if (p.size() == 0) throw GraphError("parameters are not bound to a graph");
    ad::Graph& g = *p.at(0).graph();
    auto [u, v] = model.project(p, model.encode_image(p, g.constant(batch.image())),
                                model.encode_text(p, g.constant(batch.text())));
    return contrastive_loss(u, v);
}

/// Value-only helpers.
inline Tensor cosine_matrix(const Tensor& u, const Tensor& v) {
    ad::Graph g;
    ad::NoGradGuard guard(g);
    return cosine_matrix(g.constant(u), g.constant(v)).value();
}

inline double contrastive_loss(const Tensor& u, const Tensor& v) {
    ad::Graph g;
    ad::NoGradGuard guard(g);
    return contrastive_loss(g.constant(u), g.constant(v)).value().item();
}

} // namespace xvl

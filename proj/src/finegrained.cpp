#include "hitt/finegrained.hpp"

#include <string>

#include "hitt/errors.hpp"

namespace hitt {

Tensor build_orthogonal_embeddings(int prediction_channels) {
    if (prediction_channels < 1) {
        throw ShapeError("build_orthogonal_embeddings: need at least one "
                         "prediction channel");
    }
    Tensor oe = Tensor::zeros({prediction_channels, prediction_channels});
    for (int i = 0; i < prediction_channels; ++i) {
        oe.data()[i * prediction_channels + i] = 1.0f;
    }
    return oe;
}

Tensor project_finegrained(const Tensor& theta, const Tensor& oe,
                           const FineGrainedTaskParams& params) {
    if (theta.rank() != 2 || theta.dim(0) != 1) {
        throw ShapeError("project_finegrained: token must be [1, C], got " +
                         shape_str(theta.shape()));
    }
    if (oe.rank() != 2 || oe.dim(0) != oe.dim(1) ||
        oe.dim(0) != params.oe_proj.dim(0)) {
        throw ShapeError("project_finegrained: basis " + shape_str(oe.shape()) +
                         " does not match lift " +
                         shape_str(params.oe_proj.shape()));
    }
    Tensor lifted = matmul(oe, params.oe_proj);       // [C_p, C]
    Tensor shifted = add(lifted, theta);              // broadcast over rows
    Tensor hidden = relu(add(matmul(shifted, params.mlp_w1), params.mlp_b1));
    return add(matmul(hidden, params.mlp_w2), params.mlp_b2);
}

Tensor refine_logits(const Tensor& logits, const Tensor& phi,
                     const FineGrainedTaskParams& params) {
    if (logits.rank() != 3 || phi.rank() != 2 ||
        logits.dim(0) != phi.dim(0)) {
        throw ShapeError("refine_logits: logits " + shape_str(logits.shape()) +
                         " do not pair with tokens " + shape_str(phi.shape()));
    }
    const int cp = logits.dim(0);
    const int h = logits.dim(1);
    const int w = logits.dim(2);
    if (params.proj.dim(1) != cp) {
        throw ShapeError("refine_logits: projection " +
                         shape_str(params.proj.shape()) + " must end in " +
                         std::to_string(cp));
    }
    Tensor phi_hat = matmul(phi, params.proj); // [C_p, C_p]
    Tensor scores =
        reshape(matmul(phi_hat, reshape(logits, {cp, h * w})), {cp, h, w});
    Tensor gated = mul(logits, softplus(scores));
    return conv2d(gated, params.refine_w, params.refine_b);
}

} // namespace hitt

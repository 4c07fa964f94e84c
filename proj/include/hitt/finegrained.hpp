#pragma once
// Fine-grained task tokens. Each task derives one token per prediction
// channel by pushing its global token, shifted by a lifted orthogonal basis
// vector, through a small per-task MLP. The resulting token matrix gates a
// refinement of the task logits.

#include <vector>

#include "hitt/tensor.hpp"

namespace hitt {

// Per-task parameters for deriving fine-grained tokens and refining logits.
// C is the shared channel width, C_p the task's prediction channel count.
struct FineGrainedTaskParams {
    Tensor oe_proj; // [C_p, C], lifts each basis row into token space
    Tensor mlp_w1, mlp_b1; // [C, C], [C]
    Tensor mlp_w2, mlp_b2; // [C, C], [C]
    Tensor proj;     // [C, C_p], maps fine tokens onto prediction channels
    Tensor refine_w; // [C_p, C_p, 3, 3]
    Tensor refine_b; // [C_p]
};

// The fixed orthonormal basis conditioning the fine-grained tokens: the
// C_p x C_p identity. Non-trainable by construction.
Tensor build_orthogonal_embeddings(int prediction_channels);

// phi_i: one row per prediction channel, row k = MLP_i(theta_i + lift(o_k))
// where o_k is the k-th basis row and lift is the trainable oe_proj map.
// The basis keeps rows from collapsing onto a single direction.
Tensor project_finegrained(const Tensor& theta, const Tensor& oe,
                           const FineGrainedTaskParams& params);

// G' = Conv3x3(G * softplus(phi_hat x G)) with phi_hat = phi x proj: the
// fine-grained tokens score every pixel's logit column, and the softplus of
// those scores gates the logits before a 3x3 mixing conv.
Tensor refine_logits(const Tensor& logits, const Tensor& phi,
                     const FineGrainedTaskParams& params);

} // namespace hitt

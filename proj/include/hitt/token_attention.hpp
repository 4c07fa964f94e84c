#pragma once
// Global task-token learning. Each task owns a trainable token that queries
// the shared backbone feature for a task-specific map; an inter-task
// attention mixes tokens and features across tasks through a learned
// affinity, and an intra-task self-attention lets each token exchange
// information with its own pixels. A two-scale variant runs the extraction
// and inter-task steps per scale and fuses before the intra-task step.

#include <array>
#include <vector>

#include "hitt/tensor.hpp"

namespace hitt {

// Trainable per-task global tokens. Tokens are [1, C] row vectors so they
// stack into the [T, C] matrix the affinity operates on. The per-scale
// projections are only populated for the two-scale variant, indexed
// [task][scale] with scale 0 = fine, 1 = coarse.
struct TaskTokenSet {
    int task_count = 0;
    int channels = 0;
    std::vector<Tensor> theta;                     // T x [1, C]
    std::vector<std::array<Tensor, 2>> to_scale;   // W in, [C, C] each
    std::vector<std::array<Tensor, 2>> from_scale; // W out, [C, C] each
};

// Per-task attention parameters: the 1x1 feature-extraction conv and the
// projections of the intra-task self-attention. fuse_w/fuse_b (a 1x1 conv
// from 2C concatenated channels back to C) exist only in the two-scale
// variant.
struct TaskAttentionParams {
    Tensor extract_w; // [C, C, 1, 1]
    Tensor extract_b; // [C]
    Tensor wq, wk, wv, wo; // [C, C]
    Tensor fuse_w; // [C, 2C, 1, 1], two-scale only
    Tensor fuse_b; // [C], two-scale only
};

// Parameters shared by every attention pass: the affinity projections are
// common to all tasks, the rest is per task.
struct AttentionParams {
    Tensor affinity_wq, affinity_wk; // [C, C]
    std::vector<TaskAttentionParams> task;
};

// F_i = Conv_i(F_s) * sigmoid(theta_i . f_p): each task reads the shared
// feature through its own 1x1 conv, gated per pixel by the similarity
// between its token and the shared feature column at that pixel.
std::vector<Tensor> extract_task_features(const Tensor& shared,
                                          const TaskTokenSet& tokens,
                                          const AttentionParams& params);

struct InterTaskResult {
    std::vector<Tensor> theta;    // updated tokens, [1, C] each
    std::vector<Tensor> features; // updated maps, [C, h, w] each
    Tensor affinity;              // [T, T], each row sums to 1
};

// Cross-task mixing. Tokens stack into Theta [T, C]; the affinity is
// softmax(Theta Wq (Theta Wk)^T / sqrt(C)) row-wise, and both the token
// matrix and the flattened feature matrix are replaced by their
// affinity-weighted combinations. No residual on the tokens.
InterTaskResult inter_task_attention(const std::vector<Tensor>& theta,
                                     const std::vector<Tensor>& features,
                                     const AttentionParams& params);

struct IntraTaskResult {
    Tensor theta;   // [1, C]
    Tensor feature; // [C, h, w]
    Tensor weights; // [hw+1, hw+1] attention weights, rows sum to 1
};

// Single-head scaled dot-product self-attention with a residual connection
// over the length-(hw+1) sequence [token; pixels]. Position 0 becomes the
// updated token; the remaining positions reshape back to the feature map.
IntraTaskResult intra_task_attention(const Tensor& theta,
                                     const Tensor& feature,
                                     const TaskAttentionParams& params);

struct GlobalLearnResult {
    std::vector<Tensor> theta;    // final tokens, [1, C] each
    std::vector<Tensor> features; // final maps, [C, h, w] each
    Tensor affinity;              // [T, T]
};

// Full single-scale pass: extraction, inter-task attention, then one
// intra-task pass per task.
GlobalLearnResult global_token_learning(const Tensor& shared,
                                        const TaskTokenSet& tokens,
                                        const AttentionParams& params);

// Two-scale pass. Per-scale tokens come from the to_scale projections;
// extraction and inter-task attention run independently at each scale with
// the same weights. Features fuse through the per-task 1x1 conv over
// [fine; nearest-upsampled coarse] channels, tokens through the summed
// from_scale projections, and a single intra-task pass runs at the fine
// resolution. The reported affinity is the fine-scale one.
GlobalLearnResult multiscale_global_learning(const Tensor& fine,
                                             const Tensor& coarse,
                                             const TaskTokenSet& tokens,
                                             const AttentionParams& params);

} // namespace hitt

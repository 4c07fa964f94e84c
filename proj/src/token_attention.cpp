#include "hitt/token_attention.hpp"

#include <cmath>
#include <string>

#include "hitt/errors.hpp"

namespace hitt {
namespace {

void check_token_shapes(const TaskTokenSet& tokens,
                        const AttentionParams& params, const char* where) {
    const int t = tokens.task_count;
    if (t < 1) {
        throw ShapeError(std::string(where) + ": need at least one task");
    }
    if (static_cast<int>(tokens.theta.size()) != t ||
        static_cast<int>(params.task.size()) != t) {
        throw ShapeError(std::string(where) + ": token/parameter count " +
                         "does not match task count " + std::to_string(t));
    }
}

// Extraction with explicit token rows, so the two-scale path can feed
// per-scale tokens through the same weights.
std::vector<Tensor> extract_with_rows(const Tensor& shared,
                                      const std::vector<Tensor>& rows,
                                      const AttentionParams& params) {
    if (shared.rank() != 3) {
        throw ShapeError("extract_task_features: shared feature must be "
                         "[C, h, w], got " + shape_str(shared.shape()));
    }
    const int c = shared.dim(0);
    const int h = shared.dim(1);
    const int w = shared.dim(2);
    Tensor columns = reshape(shared, {c, h * w});
    std::vector<Tensor> out;
    out.reserve(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].rank() != 2 || rows[i].dim(0) != 1 || rows[i].dim(1) != c) {
            throw ShapeError("extract_task_features: token " +
                             std::to_string(i) + " is " + shape_str(rows[i].shape()) +
                             ", expected [1," + std::to_string(c) + "]");
        }
        Tensor gate = reshape(sigmoid(matmul(rows[i], columns)), {1, h, w});
        Tensor mapped = conv2d(shared, params.task[i].extract_w,
                               params.task[i].extract_b);
        out.push_back(mul(mapped, gate));
    }
    return out;
}

InterTaskResult inter_with_rows(const std::vector<Tensor>& theta,
                                const std::vector<Tensor>& features,
                                const AttentionParams& params) {
    const int t = static_cast<int>(theta.size());
    if (t < 1 || features.size() != theta.size()) {
        throw ShapeError("inter_task_attention: need matching nonempty token "
                         "and feature lists");
    }
    const int c = theta[0].dim(1);
    const int h = features[0].dim(1);
    const int w = features[0].dim(2);

    Tensor stacked = concat(theta, 0); // [T, C]
    Tensor q = matmul(stacked, params.affinity_wq);
    Tensor k = matmul(stacked, params.affinity_wk);
    Tensor affinity = softmax(
        scale(matmul(q, transpose2d(k)), 1.0f / std::sqrt(float(c))), 1);

    Tensor mixed_tokens = matmul(affinity, stacked); // [T, C]

    std::vector<Tensor> flat;
    flat.reserve(features.size());
    for (const Tensor& f : features) {
        flat.push_back(reshape(f, {1, c * h * w}));
    }
    Tensor mixed_features = matmul(affinity, concat(flat, 0)); // [T, chw]

    InterTaskResult out;
    out.affinity = affinity;
    for (int i = 0; i < t; ++i) {
        out.theta.push_back(slice_axis0(mixed_tokens, i, i + 1));
        out.features.push_back(
            reshape(slice_axis0(mixed_features, i, i + 1), {c, h, w}));
    }
    return out;
}

} // namespace

std::vector<Tensor> extract_task_features(const Tensor& shared,
                                          const TaskTokenSet& tokens,
                                          const AttentionParams& params) {
    check_token_shapes(tokens, params, "extract_task_features");
    return extract_with_rows(shared, tokens.theta, params);
}

InterTaskResult inter_task_attention(const std::vector<Tensor>& theta,
                                     const std::vector<Tensor>& features,
                                     const AttentionParams& params) {
    return inter_with_rows(theta, features, params);
}

IntraTaskResult intra_task_attention(const Tensor& theta,
                                     const Tensor& feature,
                                     const TaskAttentionParams& params) {
    if (feature.rank() != 3 || theta.rank() != 2 || theta.dim(0) != 1 ||
        theta.dim(1) != feature.dim(0)) {
        throw ShapeError("intra_task_attention: token " + shape_str(theta.shape()) +
                         " does not pair with feature " + shape_str(feature.shape()));
    }
    const int c = feature.dim(0);
    const int h = feature.dim(1);
    const int w = feature.dim(2);
    const int hw = h * w;

    Tensor pixels = transpose2d(reshape(feature, {c, hw})); // [hw, C]
    Tensor seq = concat({theta, pixels}, 0);                // [hw+1, C]

    Tensor q = matmul(seq, params.wq);
    Tensor k = matmul(seq, params.wk);
    Tensor v = matmul(seq, params.wv);
    Tensor weights = softmax(
        scale(matmul(q, transpose2d(k)), 1.0f / std::sqrt(float(c))), 1);
    Tensor updated = add(seq, matmul(matmul(weights, v), params.wo));

    IntraTaskResult out;
    out.theta = slice_axis0(updated, 0, 1);
    out.feature =
        reshape(transpose2d(slice_axis0(updated, 1, hw + 1)), {c, h, w});
    out.weights = weights;
    return out;
}

GlobalLearnResult global_token_learning(const Tensor& shared,
                                        const TaskTokenSet& tokens,
                                        const AttentionParams& params) {
    check_token_shapes(tokens, params, "global_token_learning");
    std::vector<Tensor> extracted =
        extract_with_rows(shared, tokens.theta, params);
    InterTaskResult mixed = inter_with_rows(tokens.theta, extracted, params);

    GlobalLearnResult out;
    out.affinity = mixed.affinity;
    for (int i = 0; i < tokens.task_count; ++i) {
        IntraTaskResult refined =
            intra_task_attention(mixed.theta[i], mixed.features[i],
                                 params.task[i]);
        out.theta.push_back(refined.theta);
        out.features.push_back(refined.feature);
    }
    return out;
}

GlobalLearnResult multiscale_global_learning(const Tensor& fine,
                                             const Tensor& coarse,
                                             const TaskTokenSet& tokens,
                                             const AttentionParams& params) {
    check_token_shapes(tokens, params, "multiscale_global_learning");
    const int t = tokens.task_count;
    if (static_cast<int>(tokens.to_scale.size()) != t ||
        static_cast<int>(tokens.from_scale.size()) != t) {
        throw ShapeError("multiscale_global_learning: per-scale projections "
                         "missing for some task");
    }
    if (fine.rank() != 3 || coarse.rank() != 3 ||
        fine.dim(0) != coarse.dim(0)) {
        throw ShapeError("multiscale_global_learning: scales must share the "
                         "channel count");
    }
    if (coarse.dim(1) < 1 || fine.dim(1) % coarse.dim(1) != 0 ||
        fine.dim(2) % coarse.dim(2) != 0 ||
        fine.dim(1) / coarse.dim(1) != fine.dim(2) / coarse.dim(2)) {
        throw ShapeError("multiscale_global_learning: coarse grid " +
                         shape_str(coarse.shape()) + " must divide fine grid " +
                         shape_str(fine.shape()) + " by one integer factor");
    }
    const int factor = fine.dim(1) / coarse.dim(1);

    // Per-scale inter-task passes with shared extraction/affinity weights.
    std::array<const Tensor*, 2> grids = {&fine, &coarse};
    std::array<InterTaskResult, 2> mixed;
    for (int s = 0; s < 2; ++s) {
        std::vector<Tensor> rows;
        rows.reserve(t);
        for (int i = 0; i < t; ++i) {
            rows.push_back(matmul(tokens.theta[i], tokens.to_scale[i][s]));
        }
        std::vector<Tensor> extracted =
            extract_with_rows(*grids[s], rows, params);
        mixed[s] = inter_with_rows(rows, extracted, params);
    }

    GlobalLearnResult out;
    out.affinity = mixed[0].affinity;
    for (int i = 0; i < t; ++i) {
        Tensor stacked = concat(
            {mixed[0].features[i],
             upsample_nearest(mixed[1].features[i], factor)}, 0);
        Tensor fused_feature =
            conv2d(stacked, params.task[i].fuse_w, params.task[i].fuse_b);
        Tensor fused_token =
            add(matmul(mixed[0].theta[i], tokens.from_scale[i][0]),
                matmul(mixed[1].theta[i], tokens.from_scale[i][1]));
        IntraTaskResult refined =
            intra_task_attention(fused_token, fused_feature, params.task[i]);
        out.theta.push_back(refined.theta);
        out.features.push_back(refined.feature);
    }
    return out;
}

} // namespace hitt

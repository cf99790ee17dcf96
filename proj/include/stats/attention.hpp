#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stats/autodiff.hpp"
#include "stats/rng.hpp"
#include "stats/tensor.hpp"

namespace stats {

using ad::Value;

enum class RegionLayout : std::uint8_t { grid = 0, detection_boxes = 1 };

/// Raw per-video features: T frames, n regions per frame, d dims per region.
struct VideoFeatures {
    std::size_t frames = 0;
    std::size_t regions = 0;
    std::size_t dim = 0;
    RegionLayout layout = RegionLayout::grid;
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
    Tensor values;  // (T, n, d)

    void validate() const;
};

/// Attention weights on a probability simplex, for non-graph consumers
/// (dumps, tests).
struct AttentionWeights {
    enum class Over : std::uint8_t { frames, regions };
    std::vector<double> weights;
    Over over = Over::frames;

    void validate(double tol = 1e-9) const;
};

/// Graph-side view of one video: embedded region features plus layout and a
/// frame-validity mask (all-valid when empty). Padding is a suffix.
struct FeatureSeq {
    std::vector<std::vector<Value>> x;  // [T][n], each Value a d-vector
    RegionLayout layout = RegionLayout::grid;
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
    std::vector<std::uint8_t> frame_mask;  // empty, or size T with 1 = valid

    std::size_t frames() const { return x.size(); }
    std::size_t regions() const { return x.empty() ? 0 : x[0].size(); }
    bool frame_valid(std::size_t t) const { return frame_mask.empty() || frame_mask[t] != 0; }
    std::size_t valid_frames() const;
};

struct AttentionParams {
    Value W_h;  // (attention_dim, hidden_dim)
    Value W_x;  // (attention_dim, feature_dim)
    Value b;    // (attention_dim)
    Value w;    // (attention_dim)

    static AttentionParams init(std::size_t attention_dim, std::size_t hidden_dim,
                                std::size_t feature_dim, RngStream& rng);
    std::vector<Value> parameters() const { return {W_h, W_x, b, w}; }
    std::size_t attention_dim() const { return w.size(); }
};

struct FusionParams {
    Value W_ST;      // (fusion_dim, feature_dim)
    Value W_TS;      // (fusion_dim, feature_dim)
    Value W_h_fuse;  // (fusion_dim, hidden_dim)
    Value w_ST;      // (fusion_dim)
    Value w_TS;      // (fusion_dim)

    static FusionParams init(std::size_t fusion_dim, std::size_t hidden_dim,
                             std::size_t feature_dim, RngStream& rng);
    std::vector<Value> parameters() const { return {W_ST, W_TS, W_h_fuse, w_ST, w_TS}; }
};

/// Additive attention score: w^T tanh(W_h h + W_x x + b).
Value attention_score(const AttentionParams& p, const Value& h, const Value& x);

/// Instrumentation: number of attention_score evaluations on this thread.
std::uint64_t score_eval_count();
void reset_score_eval_count();

struct TemporalAttentionResult {
    Value weights;   // (T), on the simplex; masked frames weigh exactly 0
    Value attended;  // (d)
};

TemporalAttentionResult temporal_attention(const AttentionParams& p, const Value& h,
                                           std::span<const Value> frames,
                                           std::span<const std::uint8_t> frame_mask = {});

struct StSpatialResult {
    Value spatial_weights;             // (n), shared by every frame
    std::vector<Value> pooled_frames;  // T vectors of dim d
};

/// Grid-layout spatial attention: temporal-mean the grid cells, score the n
/// means once, replicate the weights to every frame. Exactly n score
/// evaluations regardless of T.
StSpatialResult st_spatial_attention(const AttentionParams& p, const Value& h,
                                     const FeatureSeq& features);

/// Detection-box layouts have no temporally consistent cells; score each
/// frame's boxes independently.
struct PerFrameSpatialResult {
    std::vector<Value> spatial_weights;  // T vectors of dim n
    std::vector<Value> pooled_frames;    // T vectors of dim d
};
PerFrameSpatialResult per_frame_spatial_attention(const AttentionParams& p, const Value& h,
                                                  const FeatureSeq& features);

enum class FrameSummary : std::uint8_t { mean = 0, max = 1 };

struct TsAttentionResult {
    Value frame_weights;    // (T), low-temperature soft frame selection
    Value spatial_weights;  // (n), within the softly selected frame
    Value attended;         // (d)
};

TsAttentionResult ts_attention(const AttentionParams& temporal, const AttentionParams& spatial,
                               const Value& h, const FeatureSeq& features,
                               FrameSummary summary, double temperature);

struct FusionResult {
    Value fused;           // (d)
    Value branch_weights;  // (2): (ST share, TS share)
};

/// Language-conditioned 2-way softmax over the ST and TS branch features:
/// fused = tanh((e^b1 x_ST + e^b2 x_TS) / (e^b1 + e^b2)).
FusionResult stats_fusion(const FusionParams& fp, const Value& h, const Value& x_st,
                          const Value& x_ts);

}  // namespace stats

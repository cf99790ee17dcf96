#include "stats/attention.hpp"

#include <cmath>
#include <string>

#include "stats/errors.hpp"

namespace stats {

namespace {

constexpr double kMaskPenalty = -1e9;

thread_local std::uint64_t g_score_evals = 0;

Value masked_softmax(std::span<const Value> scores, std::span<const std::uint8_t> mask,
                     double temperature) {
    Value z = ad::concat(scores);
    if (!mask.empty()) {
        Tensor shift({scores.size()});
        for (std::size_t i = 0; i < scores.size(); ++i) {
            shift[i] = mask[i] ? 0.0 : kMaskPenalty;
        }
        z = ad::add(z, Value::constant(std::move(shift)));
    }
    return ad::softmax(z, 0, temperature);
}

Value uniform_param(std::vector<std::size_t> shape, double bound, RngStream& rng) {
    Tensor t(std::move(shape));
    rng.fill_uniform(t, -bound, bound);
    return Value::param(std::move(t));
}

}  // namespace

void VideoFeatures::validate() const {
    if (frames == 0 || regions == 0 || dim == 0) {
        throw ShapeError("VideoFeatures requires frames, regions and dim all nonzero");
    }
    if (values.shape() != std::vector<std::size_t>{frames, regions, dim}) {
        throw ShapeError("VideoFeatures tensor shape " + values.shape_str() +
                         " does not match (T,n,d)=(" + std::to_string(frames) + "," +
                         std::to_string(regions) + "," + std::to_string(dim) + ")");
    }
    if (layout == RegionLayout::grid && grid_rows * grid_cols != regions) {
        throw ShapeError("grid layout " + std::to_string(grid_rows) + "x" +
                         std::to_string(grid_cols) + " does not cover " +
                         std::to_string(regions) + " regions");
    }
    require_finite(values, "VideoFeatures");
}

void AttentionWeights::validate(double tol) const {
    double sum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw NumericError("attention weight below zero");
        sum += w;
    }
    if (std::abs(sum - 1.0) >= tol) {
        throw NumericError("attention weights sum " + std::to_string(sum) + " off the simplex");
    }
}

std::size_t FeatureSeq::valid_frames() const {
    if (frame_mask.empty()) return x.size();
    std::size_t n = 0;
    for (std::uint8_t m : frame_mask) n += (m != 0);
    return n;
}

AttentionParams AttentionParams::init(std::size_t attention_dim, std::size_t hidden_dim,
                                      std::size_t feature_dim, RngStream& rng) {
    AttentionParams p;
    p.W_h = uniform_param({attention_dim, hidden_dim}, 1.0 / std::sqrt(double(hidden_dim)), rng);
    p.W_x = uniform_param({attention_dim, feature_dim}, 1.0 / std::sqrt(double(feature_dim)), rng);
    p.b = Value::param(Tensor({attention_dim}));
    p.w = uniform_param({attention_dim}, 1.0 / std::sqrt(double(attention_dim)), rng);
    return p;
}

FusionParams FusionParams::init(std::size_t fusion_dim, std::size_t hidden_dim,
                                std::size_t feature_dim, RngStream& rng) {
    FusionParams p;
    p.W_ST = uniform_param({fusion_dim, feature_dim}, 1.0 / std::sqrt(double(feature_dim)), rng);
    p.W_TS = uniform_param({fusion_dim, feature_dim}, 1.0 / std::sqrt(double(feature_dim)), rng);
    p.W_h_fuse =
        uniform_param({fusion_dim, hidden_dim}, 1.0 / std::sqrt(double(hidden_dim)), rng);
    p.w_ST = uniform_param({fusion_dim}, 1.0 / std::sqrt(double(fusion_dim)), rng);
    p.w_TS = uniform_param({fusion_dim}, 1.0 / std::sqrt(double(fusion_dim)), rng);
    return p;
}

std::uint64_t score_eval_count() { return g_score_evals; }
void reset_score_eval_count() { g_score_evals = 0; }

Value attention_score(const AttentionParams& p, const Value& h, const Value& x) {
    ++g_score_evals;
    Value pre = ad::add(ad::add(ad::matmul(p.W_h, h), ad::matmul(p.W_x, x)), p.b);
    return ad::dot(p.w, ad::tanh(pre));
}

TemporalAttentionResult temporal_attention(const AttentionParams& p, const Value& h,
                                           std::span<const Value> frames,
                                           std::span<const std::uint8_t> frame_mask) {
    if (frames.empty()) throw ShapeError("temporal_attention over an empty frame sequence");
    if (!frame_mask.empty() && frame_mask.size() != frames.size()) {
        throw ShapeError("frame mask length does not match frame count");
    }
    std::vector<Value> scores;
    scores.reserve(frames.size());
    for (const Value& f : frames) scores.push_back(attention_score(p, h, f));
    TemporalAttentionResult r;
    r.weights = masked_softmax(scores, frame_mask, 1.0);
    r.attended = ad::weighted_sum(r.weights, frames);
    return r;
}

StSpatialResult st_spatial_attention(const AttentionParams& p, const Value& h,
                                     const FeatureSeq& features) {
    if (features.layout != RegionLayout::grid) {
        throw ParamError(
            "st_spatial_attention requires grid layout; detection boxes use "
            "per_frame_spatial_attention");
    }
    std::size_t T = features.frames();
    std::size_t n = features.regions();
    if (T == 0 || n == 0) throw ShapeError("st_spatial_attention over empty features");
    std::size_t tv = features.valid_frames();
    if (tv == 0) throw ShapeError("st_spatial_attention with all frames masked");

    // Step 1: temporal mean per grid cell, over valid frames.
    Tensor mean_w({T});
    for (std::size_t t = 0; t < T; ++t) {
        mean_w[t] = features.frame_valid(t) ? 1.0 / double(tv) : 0.0;
    }
    Value mean_weights = Value::constant(std::move(mean_w));
    std::vector<Value> cell_means;
    cell_means.reserve(n);
    std::vector<Value> column(T);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t t = 0; t < T; ++t) column[t] = features.x[t][j];
        cell_means.push_back(ad::weighted_sum(mean_weights, column));
    }

    // Step 2: one score per cell, independent of T.
    std::vector<Value> scores;
    scores.reserve(n);
    for (const Value& cm : cell_means) scores.push_back(attention_score(p, h, cm));
    StSpatialResult r;
    r.spatial_weights = masked_softmax(scores, {}, 1.0);

    // Step 3: replicate the weights to every frame and pool.
    r.pooled_frames.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        r.pooled_frames.push_back(ad::weighted_sum(r.spatial_weights, features.x[t]));
    }
    return r;
}

PerFrameSpatialResult per_frame_spatial_attention(const AttentionParams& p, const Value& h,
                                                  const FeatureSeq& features) {
    std::size_t T = features.frames();
    std::size_t n = features.regions();
    if (T == 0 || n == 0) throw ShapeError("per_frame_spatial_attention over empty features");
    PerFrameSpatialResult r;
    r.spatial_weights.reserve(T);
    r.pooled_frames.reserve(T);
    std::vector<Value> scores(n);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < n; ++j) scores[j] = attention_score(p, h, features.x[t][j]);
        Value weights = masked_softmax(scores, {}, 1.0);
        r.pooled_frames.push_back(ad::weighted_sum(weights, features.x[t]));
        r.spatial_weights.push_back(std::move(weights));
    }
    return r;
}

TsAttentionResult ts_attention(const AttentionParams& temporal, const AttentionParams& spatial,
                               const Value& h, const FeatureSeq& features,
                               FrameSummary summary, double temperature) {
    if (!(temperature > 0.0)) {
        throw ParamError("ts_attention temperature must be positive, got " +
                         std::to_string(temperature));
    }
    std::size_t T = features.frames();
    std::size_t n = features.regions();
    if (T == 0 || n == 0) throw ShapeError("ts_attention over empty features");

    // Per-frame spatial summary.
    std::vector<Value> frame_summaries;
    frame_summaries.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        if (summary == FrameSummary::mean) {
            Value acc = features.x[t][0];
            for (std::size_t j = 1; j < n; ++j) acc = ad::add(acc, features.x[t][j]);
            frame_summaries.push_back(ad::scale(acc, 1.0 / double(n)));
        } else {
            frame_summaries.push_back(ad::vmax(features.x[t]));
        }
    }

    // Greedy frame choice relaxed to a low-temperature softmax.
    std::vector<Value> frame_scores;
    frame_scores.reserve(T);
    for (const Value& fs : frame_summaries) {
        frame_scores.push_back(attention_score(temporal, h, fs));
    }
    TsAttentionResult r;
    r.frame_weights = masked_softmax(frame_scores, features.frame_mask, temperature);

    // Softly selected frame: per-region blend across frames.
    std::vector<Value> selected(n);
    std::vector<Value> column(T);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t t = 0; t < T; ++t) column[t] = features.x[t][j];
        selected[j] = ad::weighted_sum(r.frame_weights, column);
    }

    std::vector<Value> spatial_scores;
    spatial_scores.reserve(n);
    for (const Value& s : selected) spatial_scores.push_back(attention_score(spatial, h, s));
    r.spatial_weights = masked_softmax(spatial_scores, {}, 1.0);
    r.attended = ad::weighted_sum(r.spatial_weights, selected);
    return r;
}

FusionResult stats_fusion(const FusionParams& fp, const Value& h, const Value& x_st,
                          const Value& x_ts) {
    if (x_st.shape() != x_ts.shape()) {
        throw ShapeError("stats_fusion branch features differ in shape: " +
                         x_st.val().shape_str() + " vs " + x_ts.val().shape_str());
    }
    Value b1 = ad::dot(fp.w_ST, ad::tanh(ad::add(ad::matmul(fp.W_ST, x_st),
                                                 ad::matmul(fp.W_h_fuse, h))));
    Value b2 = ad::dot(fp.w_TS, ad::tanh(ad::add(ad::matmul(fp.W_TS, x_ts),
                                                 ad::matmul(fp.W_h_fuse, h))));
    FusionResult r;
    std::vector<Value> betas{b1, b2};
    r.branch_weights = ad::softmax(ad::concat(betas), 0, 1.0);
    std::vector<Value> branches{x_st, x_ts};
    r.fused = ad::tanh(ad::weighted_sum(r.branch_weights, branches));
    return r;
}

}  // namespace stats

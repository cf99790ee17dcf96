#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stats/attention.hpp"
#include "stats/decoder.hpp"
#include "stats/ranked_pooling.hpp"
#include "stats/rng.hpp"

namespace stats {

/// Temporal aggregation used by the ST branch after spatial attention.
enum class Scheme : std::uint8_t {
    mean_pool = 0,
    lstm,
    mean_plus_lstm,
    temporal_att,
    mean_plus_temporal,
    ranked_att,
    mean_plus_ranked,
};

enum class Branch : std::uint8_t { st_only = 0, ts_only, stats };

const char* scheme_name(Scheme s);
const char* branch_name(Branch b);
Scheme scheme_from_name(const std::string& name);
Branch branch_from_name(const std::string& name);
std::vector<Scheme> all_schemes();
std::vector<Branch> all_branches();

struct ModelConfig {
    std::size_t raw_feature_dim = 16;  // d of the ingested feature files
    std::size_t feature_dim = 512;     // learned feature embedding
    std::size_t attention_dim = 128;
    std::size_t fusion_dim = 128;
    std::size_t embed_dim = 256;  // word embeddings
    std::size_t hidden_dim = 512;
    std::size_t self_attn_dim = 128;
    std::size_t head_proj_dim = 256;
    Scheme scheme = Scheme::mean_plus_ranked;
    Branch branch = Branch::stats;
    FrameSummary ts_frame_summary = FrameSummary::mean;
    double ts_temperature = 0.1;
    /// Visual attention conditions on the self-attention-augmented state;
    /// turn off to ablate with the raw LSTM state.
    bool augmented_attention_query = true;
    double ranked_margin = 1.0;
    std::size_t max_caption_len = 16;

    bool scheme_uses_encoder() const;
    bool scheme_uses_temporal_attention() const;
    bool scheme_combines_mean() const;
    bool scheme_uses_ranked_loss() const;
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

/// Per-word attention snapshot for the dump-attention surface.
struct AttentionDump {
    std::size_t word_index = 0;
    std::string word;
    std::vector<double> temporal_weights;     // [T]; zeros when the scheme has none
    std::vector<double> spatial_weights;      // [n]
    std::vector<double> ts_frame_weights;     // [T]
    std::vector<double> ts_spatial_weights;   // [n]
    std::vector<double> branch_weights;       // [2]
};

struct GeneratedCaption {
    std::vector<std::size_t> tokens;  // EOS excluded
    double log_prob = 0.0;
    std::vector<AttentionDump> dumps;
};

enum class GenerateMode : std::uint8_t { greedy, sample };

struct StepTrace {
    std::vector<double> temporal_weights;
    std::vector<double> spatial_weights;
    std::vector<double> ts_frame_weights;
    std::vector<double> ts_spatial_weights;
    std::vector<double> branch_weights;
};

struct WordStep {
    Value dist;
    DecoderState state;
    StepTrace trace;  // filled only when requested
};

class StatsModel {
public:
    ModelConfig cfg;
    Vocabulary vocab;

    // Learned embedding of raw region features into the feature space.
    Value feat_embed_W;  // (feature_dim, raw_feature_dim)
    Value feat_embed_b;  // (feature_dim)
    AttentionParams att_temporal;     // ST temporal attention schemes
    AttentionParams att_st_spatial;   // ST spatial heuristic
    AttentionParams att_ts_temporal;  // TS frame selection
    AttentionParams att_ts_spatial;   // TS within-frame attention
    FusionParams fusion;
    LstmParams encoder;    // ST temporal encoder (lstm/ranked schemes)
    Value st_concat_proj;  // (feature_dim, 2*feature_dim) for mean_plus_* schemes
    DecoderParams decoder;

    static StatsModel init(const ModelConfig& cfg, Vocabulary vocab, RngStream& rng);

    /// Stable, named parameter listing; checkpoint and optimizer order.
    std::vector<std::pair<std::string, Value>> named_parameters() const;
    std::vector<Value> parameters() const;

    /// Embed raw features into the feature space, carrying layout and mask.
    FeatureSeq embed_features(const VideoFeatures& vf,
                              std::vector<std::uint8_t> frame_mask = {}) const;

    /// ST-branch video code (feature_dim) for the current query state.
    Value st_branch_code(const Value& query, const FeatureSeq& fs, StepTrace* trace) const;

    /// Full attention stack for one word; respects the branch selector.
    Value attend(const Value& query, const FeatureSeq& fs, StepTrace* trace) const;

    /// One decoding step: advance the language state on prev_word, attend,
    /// and produce the word distribution.
    WordStep word_step(const FeatureSeq& fs, const DecoderState& state, std::size_t prev_word,
                       bool want_trace = false) const;

    /// Pairwise ordering loss of the ST encoder, evaluated once per video at
    /// the initial (zero) language state. Zero for schemes without it.
    Value ranked_loss_value(const FeatureSeq& fs) const;

    GeneratedCaption generate(const VideoFeatures& vf, GenerateMode mode,
                              double sample_temperature = 1.0, RngStream* rng = nullptr,
                              std::size_t max_len = 0, bool want_dumps = false) const;

    /// Differentiable sum of log-probabilities of a fixed token sequence
    /// (EOS appended); used by the policy-gradient path.
    Value sequence_log_prob(const FeatureSeq& fs, const std::vector<std::size_t>& tokens) const;
};

}  // namespace stats

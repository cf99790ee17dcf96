#include "stats/model.hpp"

#include <cmath>

#include <json.hpp>

#include "stats/errors.hpp"

namespace stats {

namespace {

Value uniform_param(std::vector<std::size_t> shape, double bound, RngStream& rng) {
    Tensor t(std::move(shape));
    rng.fill_uniform(t, -bound, bound);
    return Value::param(std::move(t));
}

std::vector<double> snapshot(const Value& v) {
    return v.val().raw();
}

// Valid-frame prefix of a pooled sequence; padding is always a suffix.
std::vector<Value> valid_prefix(const std::vector<Value>& frames, const FeatureSeq& fs) {
    std::size_t tv = fs.valid_frames();
    return {frames.begin(), frames.begin() + tv};
}

}  // namespace

const char* scheme_name(Scheme s) {
    switch (s) {
        case Scheme::mean_pool: return "mean_pool";
        case Scheme::lstm: return "lstm";
        case Scheme::mean_plus_lstm: return "mean_plus_lstm";
        case Scheme::temporal_att: return "temporal_att";
        case Scheme::mean_plus_temporal: return "mean_plus_temporal";
        case Scheme::ranked_att: return "ranked_att";
        case Scheme::mean_plus_ranked: return "mean_plus_ranked";
    }
    return "?";
}

const char* branch_name(Branch b) {
    switch (b) {
        case Branch::st_only: return "ST";
        case Branch::ts_only: return "TS";
        case Branch::stats: return "STaTS";
    }
    return "?";
}

std::vector<Scheme> all_schemes() {
    return {Scheme::mean_pool,     Scheme::lstm,          Scheme::mean_plus_lstm,
            Scheme::temporal_att,  Scheme::mean_plus_temporal,
            Scheme::ranked_att,    Scheme::mean_plus_ranked};
}

std::vector<Branch> all_branches() { return {Branch::st_only, Branch::ts_only, Branch::stats}; }

Scheme scheme_from_name(const std::string& name) {
    for (Scheme s : all_schemes()) {
        if (name == scheme_name(s)) return s;
    }
    throw ConfigError("unknown scheme: " + name);
}

Branch branch_from_name(const std::string& name) {
    for (Branch b : all_branches()) {
        if (name == branch_name(b)) return b;
    }
    throw ConfigError("unknown branch: " + name);
}

bool ModelConfig::scheme_uses_encoder() const {
    return scheme == Scheme::lstm || scheme == Scheme::mean_plus_lstm ||
           scheme == Scheme::ranked_att || scheme == Scheme::mean_plus_ranked;
}

bool ModelConfig::scheme_uses_temporal_attention() const {
    return scheme == Scheme::temporal_att || scheme == Scheme::mean_plus_temporal;
}

bool ModelConfig::scheme_combines_mean() const {
    return scheme == Scheme::mean_plus_lstm || scheme == Scheme::mean_plus_temporal ||
           scheme == Scheme::mean_plus_ranked;
}

bool ModelConfig::scheme_uses_ranked_loss() const {
    return scheme == Scheme::ranked_att || scheme == Scheme::mean_plus_ranked;
}

void ModelConfig::validate() const {
    if (raw_feature_dim == 0 || feature_dim == 0 || attention_dim == 0 || fusion_dim == 0 ||
        embed_dim == 0 || hidden_dim == 0 || self_attn_dim == 0 || head_proj_dim == 0) {
        throw ConfigError("model dimensions must all be positive");
    }
    if (!(ts_temperature > 0.0)) throw ConfigError("ts_temperature must be positive");
    if (!(ranked_margin > 0.0)) throw ConfigError("ranked_margin must be positive");
    if (max_caption_len == 0) throw ConfigError("max_caption_len must be positive");
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["raw_feature_dim"] = raw_feature_dim;
    j["feature_dim"] = feature_dim;
    j["attention_dim"] = attention_dim;
    j["fusion_dim"] = fusion_dim;
    j["embed_dim"] = embed_dim;
    j["hidden_dim"] = hidden_dim;
    j["self_attn_dim"] = self_attn_dim;
    j["head_proj_dim"] = head_proj_dim;
    j["scheme"] = scheme_name(scheme);
    j["branch"] = branch_name(branch);
    j["ts_frame_summary"] = ts_frame_summary == FrameSummary::mean ? "mean" : "max";
    j["ts_temperature"] = ts_temperature;
    j["augmented_attention_query"] = augmented_attention_query;
    j["ranked_margin"] = ranked_margin;
    j["max_caption_len"] = max_caption_len;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig cfg;
    cfg.raw_feature_dim = j.at("raw_feature_dim").get<std::size_t>();
    cfg.feature_dim = j.at("feature_dim").get<std::size_t>();
    cfg.attention_dim = j.at("attention_dim").get<std::size_t>();
    cfg.fusion_dim = j.at("fusion_dim").get<std::size_t>();
    cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    cfg.self_attn_dim = j.at("self_attn_dim").get<std::size_t>();
    cfg.head_proj_dim = j.at("head_proj_dim").get<std::size_t>();
    cfg.scheme = scheme_from_name(j.at("scheme").get<std::string>());
    cfg.branch = branch_from_name(j.at("branch").get<std::string>());
    cfg.ts_frame_summary = j.at("ts_frame_summary").get<std::string>() == "max"
                               ? FrameSummary::max
                               : FrameSummary::mean;
    cfg.ts_temperature = j.at("ts_temperature").get<double>();
    cfg.augmented_attention_query = j.at("augmented_attention_query").get<bool>();
    cfg.ranked_margin = j.at("ranked_margin").get<double>();
    cfg.max_caption_len = j.at("max_caption_len").get<std::size_t>();
    cfg.validate();
    return cfg;
}

StatsModel StatsModel::init(const ModelConfig& cfg, Vocabulary vocab, RngStream& rng) {
    cfg.validate();
    vocab.validate();
    StatsModel m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);

    double fb = 1.0 / std::sqrt(double(cfg.raw_feature_dim));
    m.feat_embed_W = uniform_param({cfg.feature_dim, cfg.raw_feature_dim}, fb, rng);
    m.feat_embed_b = Value::param(Tensor({cfg.feature_dim}));

    m.att_temporal = AttentionParams::init(cfg.attention_dim, cfg.hidden_dim, cfg.feature_dim, rng);
    m.att_st_spatial =
        AttentionParams::init(cfg.attention_dim, cfg.hidden_dim, cfg.feature_dim, rng);
    m.att_ts_temporal =
        AttentionParams::init(cfg.attention_dim, cfg.hidden_dim, cfg.feature_dim, rng);
    m.att_ts_spatial =
        AttentionParams::init(cfg.attention_dim, cfg.hidden_dim, cfg.feature_dim, rng);
    m.fusion = FusionParams::init(cfg.fusion_dim, cfg.hidden_dim, cfg.feature_dim, rng);
    m.encoder = LstmParams::init(cfg.feature_dim, cfg.feature_dim, rng);
    m.st_concat_proj = uniform_param({cfg.feature_dim, 2 * cfg.feature_dim},
                                     1.0 / std::sqrt(double(2 * cfg.feature_dim)), rng);
    m.decoder = DecoderParams::init(m.vocab.size(), cfg.embed_dim, cfg.hidden_dim,
                                    cfg.self_attn_dim, cfg.head_proj_dim, cfg.feature_dim, rng);
    return m;
}

std::vector<std::pair<std::string, Value>> StatsModel::named_parameters() const {
    std::vector<std::pair<std::string, Value>> out;
    out.emplace_back("feat_embed.W", feat_embed_W);
    out.emplace_back("feat_embed.b", feat_embed_b);
    auto add_attention = [&out](const char* prefix, const AttentionParams& p) {
        out.emplace_back(std::string(prefix) + ".W_h", p.W_h);
        out.emplace_back(std::string(prefix) + ".W_x", p.W_x);
        out.emplace_back(std::string(prefix) + ".b", p.b);
        out.emplace_back(std::string(prefix) + ".w", p.w);
    };
    add_attention("att_temporal", att_temporal);
    add_attention("att_st_spatial", att_st_spatial);
    add_attention("att_ts_temporal", att_ts_temporal);
    add_attention("att_ts_spatial", att_ts_spatial);
    out.emplace_back("fusion.W_ST", fusion.W_ST);
    out.emplace_back("fusion.W_TS", fusion.W_TS);
    out.emplace_back("fusion.W_h", fusion.W_h_fuse);
    out.emplace_back("fusion.w_ST", fusion.w_ST);
    out.emplace_back("fusion.w_TS", fusion.w_TS);
    auto add_lstm = [&out](const char* prefix, const LstmParams& p) {
        const char* names[12] = {"W_i", "U_i", "b_i", "W_f", "U_f", "b_f",
                                 "W_o", "U_o", "b_o", "W_g", "U_g", "b_g"};
        auto params = p.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            out.emplace_back(std::string(prefix) + "." + names[i], params[i]);
        }
    };
    add_lstm("encoder", encoder);
    out.emplace_back("st_concat_proj", st_concat_proj);
    out.emplace_back("decoder.embedding", decoder.embedding);
    add_lstm("decoder.lstm", decoder.lstm);
    out.emplace_back("decoder.self_attn.W_q", decoder.self_attn.W_q);
    out.emplace_back("decoder.self_attn.W_k", decoder.self_attn.W_k);
    out.emplace_back("decoder.self_attn.b", decoder.self_attn.b);
    out.emplace_back("decoder.self_attn.w", decoder.self_attn.w);
    out.emplace_back("decoder.self_attn.W_v", decoder.self_attn.W_v);
    out.emplace_back("decoder.head.W1", decoder.head.W1);
    out.emplace_back("decoder.head.b1", decoder.head.b1);
    out.emplace_back("decoder.head.W2", decoder.head.W2);
    out.emplace_back("decoder.head.b2", decoder.head.b2);
    return out;
}

std::vector<Value> StatsModel::parameters() const {
    std::vector<Value> out;
    for (auto& [name, v] : named_parameters()) out.push_back(v);
    return out;
}

FeatureSeq StatsModel::embed_features(const VideoFeatures& vf,
                                      std::vector<std::uint8_t> frame_mask) const {
    vf.validate();
    if (vf.dim != cfg.raw_feature_dim) {
        throw ShapeError("feature dim " + std::to_string(vf.dim) +
                         " does not match the model's raw_feature_dim " +
                         std::to_string(cfg.raw_feature_dim));
    }
    if (!frame_mask.empty() && frame_mask.size() != vf.frames) {
        throw ShapeError("frame mask length does not match frame count");
    }
    FeatureSeq fs;
    fs.layout = vf.layout;
    fs.grid_rows = vf.grid_rows;
    fs.grid_cols = vf.grid_cols;
    fs.frame_mask = std::move(frame_mask);
    fs.x.resize(vf.frames);
    for (std::size_t t = 0; t < vf.frames; ++t) {
        fs.x[t].reserve(vf.regions);
        for (std::size_t j = 0; j < vf.regions; ++j) {
            Tensor raw({vf.dim});
            for (std::size_t k = 0; k < vf.dim; ++k) raw[k] = vf.values.at(t, j, k);
            Value x = Value::constant(std::move(raw));
            fs.x[t].push_back(ad::add(ad::matmul(feat_embed_W, x), feat_embed_b));
        }
    }
    return fs;
}

Value StatsModel::st_branch_code(const Value& query, const FeatureSeq& fs,
                                 StepTrace* trace) const {
    std::vector<Value> pooled;
    if (fs.layout == RegionLayout::grid) {
        StSpatialResult sp = st_spatial_attention(att_st_spatial, query, fs);
        pooled = std::move(sp.pooled_frames);
        if (trace) trace->spatial_weights = snapshot(sp.spatial_weights);
    } else {
        PerFrameSpatialResult sp = per_frame_spatial_attention(att_st_spatial, query, fs);
        pooled = std::move(sp.pooled_frames);
        if (trace) {
            // Box layouts have per-frame weights; dump the first valid frame's.
            trace->spatial_weights = snapshot(sp.spatial_weights[0]);
        }
    }

    std::vector<Value> valid = valid_prefix(pooled, fs);
    Value code;
    if (cfg.scheme == Scheme::mean_pool) {
        code = mean_frames(valid);
    } else if (cfg.scheme_uses_encoder()) {
        code = ranked_encode(encoder, valid);
    } else {
        TemporalAttentionResult ta =
            temporal_attention(att_temporal, query, pooled, fs.frame_mask);
        code = ta.attended;
        if (trace) trace->temporal_weights = snapshot(ta.weights);
    }
    if (cfg.scheme_combines_mean()) {
        std::vector<Value> parts{code, mean_frames(valid)};
        code = ad::matmul(st_concat_proj, ad::concat(parts));
    }
    return code;
}

Value StatsModel::attend(const Value& query, const FeatureSeq& fs, StepTrace* trace) const {
    std::size_t T = fs.frames();
    std::size_t n = fs.regions();
    if (trace) {
        trace->temporal_weights.assign(T, 0.0);
        trace->spatial_weights.assign(n, 0.0);
        trace->ts_frame_weights.assign(T, 0.0);
        trace->ts_spatial_weights.assign(n, 0.0);
    }

    Value x_hat;
    if (cfg.branch == Branch::st_only) {
        x_hat = st_branch_code(query, fs, trace);
        if (trace) trace->branch_weights = {1.0, 0.0};
    } else if (cfg.branch == Branch::ts_only) {
        TsAttentionResult ts = ts_attention(att_ts_temporal, att_ts_spatial, query, fs,
                                            cfg.ts_frame_summary, cfg.ts_temperature);
        x_hat = ts.attended;
        if (trace) {
            trace->ts_frame_weights = snapshot(ts.frame_weights);
            trace->ts_spatial_weights = snapshot(ts.spatial_weights);
            trace->branch_weights = {0.0, 1.0};
        }
    } else {
        Value st_code = st_branch_code(query, fs, trace);
        TsAttentionResult ts = ts_attention(att_ts_temporal, att_ts_spatial, query, fs,
                                            cfg.ts_frame_summary, cfg.ts_temperature);
        FusionResult fu = stats_fusion(fusion, query, st_code, ts.attended);
        x_hat = fu.fused;
        if (trace) {
            trace->ts_frame_weights = snapshot(ts.frame_weights);
            trace->ts_spatial_weights = snapshot(ts.spatial_weights);
            trace->branch_weights = snapshot(fu.branch_weights);
        }
    }
    return x_hat;
}

WordStep StatsModel::word_step(const FeatureSeq& fs, const DecoderState& state,
                               std::size_t prev_word, bool want_trace) const {
    AdvanceResult adv =
        advance_state(vocab, decoder, state, prev_word, cfg.augmented_attention_query);
    WordStep step;
    Value x_hat = attend(adv.query, fs, want_trace ? &step.trace : nullptr);
    step.dist = output_distribution(decoder, adv.query, x_hat);
    step.state = std::move(adv.state);
    return step;
}

Value StatsModel::ranked_loss_value(const FeatureSeq& fs) const {
    // No ST branch, no ordering loss to shape it.
    if (!cfg.scheme_uses_ranked_loss() || cfg.branch == Branch::ts_only) {
        return Value::scalar_constant(0.0);
    }
    Value zero_query = Value::constant(Tensor({cfg.hidden_dim}));
    std::vector<Value> pooled;
    if (fs.layout == RegionLayout::grid) {
        pooled = st_spatial_attention(att_st_spatial, zero_query, fs).pooled_frames;
    } else {
        pooled = per_frame_spatial_attention(att_st_spatial, zero_query, fs).pooled_frames;
    }
    std::vector<Value> valid = valid_prefix(pooled, fs);
    if (valid.size() < 2) return Value::scalar_constant(0.0);
    Value code = ranked_encode(encoder, valid);
    return ranked_loss(code, valid, cfg.ranked_margin);
}

GeneratedCaption StatsModel::generate(const VideoFeatures& vf, GenerateMode mode,
                                      double sample_temperature, RngStream* rng,
                                      std::size_t max_len, bool want_dumps) const {
    if (mode == GenerateMode::sample) {
        if (rng == nullptr) throw ParamError("sample mode requires an RngStream");
        if (!(sample_temperature > 0.0)) {
            throw ParamError("sample temperature must be positive");
        }
    }
    if (max_len == 0) max_len = cfg.max_caption_len;

    FeatureSeq fs = embed_features(vf);
    DecoderState state = initial_decoder_state(cfg.hidden_dim);
    GeneratedCaption out;
    std::size_t prev = Vocabulary::BOS;
    for (std::size_t i = 0; i < max_len; ++i) {
        WordStep step = word_step(fs, state, prev, want_dumps);
        const Tensor& dist = step.dist.val();
        std::size_t chosen;
        if (mode == GenerateMode::greedy) {
            chosen = argmax_index(dist);
        } else {
            if (sample_temperature == 1.0) {
                chosen = rng->multinomial(dist.raw());
            } else {
                std::vector<double> tempered(dist.size());
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t k = 0; k < dist.size(); ++k) {
                    tempered[k] = dist[k] > 0.0
                                      ? std::log(dist[k]) / sample_temperature
                                      : -std::numeric_limits<double>::infinity();
                    mx = std::max(mx, tempered[k]);
                }
                double denom = 0.0;
                for (auto& v : tempered) {
                    v = std::isfinite(v) ? std::exp(v - mx) : 0.0;
                    denom += v;
                }
                for (auto& v : tempered) v /= denom;
                chosen = rng->multinomial(tempered);
            }
        }
        out.log_prob += std::log(std::max(dist[chosen], 1e-300));
        if (chosen == Vocabulary::EOS) break;
        out.tokens.push_back(chosen);
        if (want_dumps) {
            AttentionDump dump;
            dump.word_index = out.tokens.size() - 1;
            dump.word = vocab.token(chosen);
            dump.temporal_weights = std::move(step.trace.temporal_weights);
            dump.spatial_weights = std::move(step.trace.spatial_weights);
            dump.ts_frame_weights = std::move(step.trace.ts_frame_weights);
            dump.ts_spatial_weights = std::move(step.trace.ts_spatial_weights);
            dump.branch_weights = std::move(step.trace.branch_weights);
            out.dumps.push_back(std::move(dump));
        }
        state = std::move(step.state);
        prev = chosen;
    }
    return out;
}

Value StatsModel::sequence_log_prob(const FeatureSeq& fs,
                                    const std::vector<std::size_t>& tokens) const {
    DecoderState state = initial_decoder_state(cfg.hidden_dim);
    std::size_t prev = Vocabulary::BOS;
    Value total = Value::scalar_constant(0.0);
    std::vector<std::size_t> targets = tokens;
    targets.push_back(Vocabulary::EOS);
    for (std::size_t target : targets) {
        WordStep step = word_step(fs, state, prev);
        total = ad::add(total, ad::log_clamped(ad::pick(step.dist, target), 1e-12));
        state = std::move(step.state);
        prev = target;
    }
    return total;
}

}  // namespace stats

#include "stats/decoder.hpp"

#include <cmath>
#include <unordered_set>

#include "stats/errors.hpp"

namespace stats {

namespace {

constexpr double kPadPenalty = -1e9;

Value uniform_param(std::vector<std::size_t> shape, double bound, RngStream& rng) {
    Tensor t(std::move(shape));
    rng.fill_uniform(t, -bound, bound);
    return Value::param(std::move(t));
}

}  // namespace

Vocabulary Vocabulary::with_words(const std::vector<std::string>& words) {
    Vocabulary v;
    v.tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
    v.tokens.insert(v.tokens.end(), words.begin(), words.end());
    v.validate();
    return v;
}

void Vocabulary::validate() const {
    if (tokens.size() < 4) throw VocabError("vocabulary must hold at least the 4 reserved tokens");
    std::unordered_set<std::string> seen;
    for (const auto& t : tokens) {
        if (!seen.insert(t).second) throw VocabError("duplicate vocabulary token: " + t);
    }
}

const std::string& Vocabulary::token(std::size_t index) const {
    if (index >= tokens.size()) {
        throw VocabError("token index " + std::to_string(index) + " out of range for D=" +
                         std::to_string(tokens.size()));
    }
    return tokens[index];
}

std::size_t Vocabulary::index_of(const std::string& token) const {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == token) return i;
    }
    return UNK;
}

std::vector<std::size_t> Vocabulary::encode(const std::vector<std::string>& words) const {
    std::vector<std::size_t> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(index_of(w));
    return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<std::size_t>& indices) const {
    std::vector<std::string> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(token(i));
    return out;
}

std::uint64_t Vocabulary::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens) {
        h = fnv1a64(t, h);
        h = fnv1a64(std::string_view("\x1f", 1), h);
    }
    return h;
}

SelfAttentionParams SelfAttentionParams::init(std::size_t self_attn_dim, std::size_t hidden_dim,
                                              std::size_t embed_dim, RngStream& rng) {
    SelfAttentionParams p;
    p.W_q = uniform_param({self_attn_dim, hidden_dim}, 1.0 / std::sqrt(double(hidden_dim)), rng);
    p.W_k = uniform_param({self_attn_dim, embed_dim}, 1.0 / std::sqrt(double(embed_dim)), rng);
    p.b = Value::param(Tensor({self_attn_dim}));
    p.w = uniform_param({self_attn_dim}, 1.0 / std::sqrt(double(self_attn_dim)), rng);
    p.W_v = uniform_param({hidden_dim, embed_dim}, 1.0 / std::sqrt(double(embed_dim)), rng);
    return p;
}

OutputHeadParams OutputHeadParams::init(std::size_t proj_dim, std::size_t hidden_dim,
                                        std::size_t visual_dim, std::size_t vocab_size,
                                        RngStream& rng) {
    OutputHeadParams p;
    std::size_t in = hidden_dim + visual_dim;
    p.W1 = uniform_param({proj_dim, in}, 1.0 / std::sqrt(double(in)), rng);
    p.b1 = Value::param(Tensor({proj_dim}));
    p.W2 = uniform_param({vocab_size, proj_dim}, 1.0 / std::sqrt(double(proj_dim)), rng);
    p.b2 = Value::param(Tensor({vocab_size}));
    return p;
}

DecoderParams DecoderParams::init(std::size_t vocab_size, std::size_t embed_dim,
                                  std::size_t hidden_dim, std::size_t self_attn_dim,
                                  std::size_t proj_dim, std::size_t visual_dim,
                                  RngStream& rng) {
    DecoderParams p;
    Tensor emb({vocab_size, embed_dim});
    rng.fill_uniform(emb, -1.0 / std::sqrt(double(embed_dim)), 1.0 / std::sqrt(double(embed_dim)));
    for (std::size_t c = 0; c < embed_dim; ++c) emb.at(Vocabulary::PAD, c) = 0.0;
    p.embedding = Value::param(std::move(emb));
    p.lstm = LstmParams::init(embed_dim, hidden_dim, rng);
    p.self_attn = SelfAttentionParams::init(self_attn_dim, hidden_dim, embed_dim, rng);
    p.head = OutputHeadParams::init(proj_dim, hidden_dim, visual_dim, vocab_size, rng);
    return p;
}

std::vector<Value> DecoderParams::parameters() const {
    std::vector<Value> out{embedding};
    for (auto& v : lstm.parameters()) out.push_back(v);
    for (auto& v : self_attn.parameters()) out.push_back(v);
    for (auto& v : head.parameters()) out.push_back(v);
    return out;
}

DecoderState initial_decoder_state(std::size_t hidden_dim) {
    return {zero_lstm_state(hidden_dim), {}};
}

Value embed(const Vocabulary& v, const DecoderParams& p, std::size_t token_index) {
    if (token_index >= v.size()) {
        throw VocabError("embed: token index " + std::to_string(token_index) +
                         " out of range for D=" + std::to_string(v.size()));
    }
    if (token_index == Vocabulary::PAD) {
        // Zero vector, detached: PAD never receives gradient.
        return Value::constant(Tensor({p.embedding.shape()[1]}));
    }
    return ad::pick_row(p.embedding, token_index);
}

Value self_attend_history(const SelfAttentionParams& p, const Value& h,
                          std::span<const Value> history) {
    std::size_t hidden = p.W_v.shape()[0];
    if (history.empty()) return Value::constant(Tensor({hidden}));

    Value qh = ad::matmul(p.W_q, h);
    std::vector<Value> scores;
    scores.reserve(history.size());
    for (const Value& e : history) {
        Value pre = ad::add(ad::add(qh, ad::matmul(p.W_k, e)), p.b);
        scores.push_back(ad::dot(p.w, ad::tanh(pre)));
    }
    Value weights = ad::softmax(ad::concat(scores), 0, 1.0);
    std::vector<Value> values;
    values.reserve(history.size());
    for (const Value& e : history) values.push_back(ad::matmul(p.W_v, e));
    return ad::weighted_sum(weights, values);
}

AdvanceResult advance_state(const Vocabulary& v, const DecoderParams& p,
                            const DecoderState& state, std::size_t prev_word,
                            bool augmented_query) {
    AdvanceResult r;
    Value prev_embed = embed(v, p, prev_word);
    r.state.lstm = lstm_step(p.lstm, state.lstm, prev_embed);
    r.state.history = state.history;
    if (prev_word != Vocabulary::BOS && prev_word != Vocabulary::PAD) {
        r.state.history.push_back(prev_embed);
    }
    if (augmented_query) {
        Value ctx = self_attend_history(p.self_attn, r.state.lstm.h, r.state.history);
        r.query = ad::add(r.state.lstm.h, ctx);
    } else {
        r.query = r.state.lstm.h;
    }
    return r;
}

Value output_distribution(const DecoderParams& p, const Value& query, const Value& x_hat) {
    std::vector<Value> parts{query, x_hat};
    Value in = ad::concat(parts);
    Value hidden = ad::tanh(ad::add(ad::matmul(p.head.W1, in), p.head.b1));
    Value scores = ad::add(ad::matmul(p.head.W2, hidden), p.head.b2);
    Tensor mask({scores.size()});
    mask[Vocabulary::PAD] = kPadPenalty;
    scores = ad::add(scores, Value::constant(std::move(mask)));
    return ad::softmax(scores, 0, 1.0);
}

DecodeStepResult decode_step(const Vocabulary& v, const DecoderParams& p,
                             const DecoderState& state, std::size_t prev_word,
                             const Value& x_hat, bool augmented_query) {
    AdvanceResult adv = advance_state(v, p, state, prev_word, augmented_query);
    DecodeStepResult r;
    r.dist = output_distribution(p, adv.query, x_hat);
    r.state = std::move(adv.state);
    r.query = adv.query;
    return r;
}

std::size_t argmax_index(const Tensor& dist) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < dist.size(); ++i) {
        if (dist[i] > dist[best]) best = i;
    }
    return best;
}

}  // namespace stats

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stats/autodiff.hpp"
#include "stats/ranked_pooling.hpp"
#include "stats/rng.hpp"

namespace stats {

struct Vocabulary {
    static constexpr std::size_t PAD = 0;
    static constexpr std::size_t BOS = 1;
    static constexpr std::size_t EOS = 2;
    static constexpr std::size_t UNK = 3;

    /// Full token list; indices 0..3 are the reserved tokens.
    std::vector<std::string> tokens;

    static Vocabulary with_words(const std::vector<std::string>& words);

    std::size_t size() const { return tokens.size(); }
    const std::string& token(std::size_t index) const;
    /// Index of a token string, UNK when absent.
    std::size_t index_of(const std::string& token) const;
    std::vector<std::size_t> encode(const std::vector<std::string>& words) const;
    std::vector<std::string> decode(const std::vector<std::size_t>& indices) const;
    std::uint64_t hash() const;
    void validate() const;
};

/// Single-head additive self-attention over previously generated words:
/// score_j = w^T tanh(W_q h + W_k e_j + b); context = sum_j a_j (W_v e_j).
struct SelfAttentionParams {
    Value W_q;  // (self_attn_dim, hidden_dim)
    Value W_k;  // (self_attn_dim, embed_dim)
    Value b;    // (self_attn_dim)
    Value w;    // (self_attn_dim)
    Value W_v;  // (hidden_dim, embed_dim)

    static SelfAttentionParams init(std::size_t self_attn_dim, std::size_t hidden_dim,
                                    std::size_t embed_dim, RngStream& rng);
    std::vector<Value> parameters() const { return {W_q, W_k, b, w, W_v}; }
};

/// Two-layer word scorer g: concat(query, visual) -> linear -> tanh ->
/// linear -> scores over the dictionary.
struct OutputHeadParams {
    Value W1;  // (proj_dim, hidden_dim + visual_dim)
    Value b1;  // (proj_dim)
    Value W2;  // (D, proj_dim)
    Value b2;  // (D)

    static OutputHeadParams init(std::size_t proj_dim, std::size_t hidden_dim,
                                 std::size_t visual_dim, std::size_t vocab_size,
                                 RngStream& rng);
    std::vector<Value> parameters() const { return {W1, b1, W2, b2}; }
};

struct DecoderParams {
    Value embedding;  // (D, embed_dim); PAD row pinned to zero
    LstmParams lstm;  // input = embed_dim, hidden = hidden_dim
    SelfAttentionParams self_attn;
    OutputHeadParams head;

    static DecoderParams init(std::size_t vocab_size, std::size_t embed_dim,
                              std::size_t hidden_dim, std::size_t self_attn_dim,
                              std::size_t proj_dim, std::size_t visual_dim, RngStream& rng);
    std::vector<Value> parameters() const;
};

struct DecoderState {
    LstmState lstm;
    std::vector<Value> history;  // embeddings of the words generated so far
};

DecoderState initial_decoder_state(std::size_t hidden_dim);

/// Embedding row lookup. The PAD embedding is the zero vector and never
/// receives gradient.
Value embed(const Vocabulary& v, const DecoderParams& p, std::size_t token_index);

/// Additive attention over the embedded history with the current hidden
/// state as query. Empty history yields a zero context vector.
Value self_attend_history(const SelfAttentionParams& p, const Value& h,
                          std::span<const Value> history);

struct AdvanceResult {
    DecoderState state;
    Value query;  // h + history context (or raw h when augmentation is off)
};

/// Consume the previous word: LSTM advance, history update (BOS is fed but
/// never recorded as generated), self-attention, query formation.
AdvanceResult advance_state(const Vocabulary& v, const DecoderParams& p,
                            const DecoderState& state, std::size_t prev_word,
                            bool augmented_query = true);

/// Word distribution over the dictionary given the query state and the
/// fused visual feature. PAD is masked out and the rest renormalized.
Value output_distribution(const DecoderParams& p, const Value& query, const Value& x_hat);

struct DecodeStepResult {
    Value dist;
    DecoderState state;
    Value query;
};

/// advance_state followed by output_distribution against a caller-supplied
/// visual feature.
DecodeStepResult decode_step(const Vocabulary& v, const DecoderParams& p,
                             const DecoderState& state, std::size_t prev_word,
                             const Value& x_hat, bool augmented_query = true);

/// Deterministic argmax with ties resolved toward the lowest index.
std::size_t argmax_index(const Tensor& dist);

}  // namespace stats

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stats/autodiff.hpp"
#include "stats/rng.hpp"

namespace stats {

using ad::Value;

struct LstmParams {
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;
    // One (hidden, input) matrix, one (hidden, hidden) matrix and one bias
    // per gate: input, forget, output, candidate.
    Value W_i, U_i, b_i;
    Value W_f, U_f, b_f;
    Value W_o, U_o, b_o;
    Value W_g, U_g, b_g;

    /// Uniform +-1/sqrt(hidden_dim) weights, zero biases except the forget
    /// gate bias at 1.0.
    static LstmParams init(std::size_t input_dim, std::size_t hidden_dim, RngStream& rng);
    std::vector<Value> parameters() const;
};

struct LstmState {
    Value h;
    Value c;
};

LstmState zero_lstm_state(std::size_t hidden_dim);

/// Standard LSTM cell: sigmoid gates, tanh candidate and output.
LstmState lstm_step(const LstmParams& p, const LstmState& prev, const Value& x);

struct RankedPoolingConfig {
    double margin = 1.0;       // beta > 0
    double loss_weight = 0.1;  // alpha >= 0; 0 ablates to a plain LSTM encoder
    bool combine_mean = true;  // export [final hidden ; frame mean]

    void validate() const;
};

/// Runs the encoder over the frames in temporal order from a zero state and
/// returns the final hidden state.
Value ranked_encode(const LstmParams& p, std::span<const Value> frames);

/// Elementwise mean of a frame sequence.
Value mean_frames(std::span<const Value> frames);

/// Full exported video code for a config: final hidden state, concatenated
/// with the frame mean when combine_mean is set.
Value ranked_video_code(const LstmParams& p, const RankedPoolingConfig& cfg,
                        std::span<const Value> frames);

/// sum_{t=2..T} softplus(<x, f_{t-1}> + beta - <x, f_t>). Zero when T < 2.
Value ranked_loss(const Value& x_st, std::span<const Value> frames, double beta);

struct OracleConfig {
    double lambda = 1.0;  // > 0
    double beta = 1.0;    // margin
    std::size_t max_iters = 20000;
    double step_size = 1.0;  // initial line-search step
    double tolerance = 1e-6;

    void validate() const;
};

struct OracleResult {
    std::vector<double> w;
    double objective = 0.0;
    double grad_norm = 0.0;
    std::size_t iters = 0;
};

/// Convex rank-SVM: minimize 1/2 |w|^2 + lambda * sum softplus(<w,x_t> +
/// beta - <w,x_{t+1}>) by gradient descent with backtracking line search.
/// Throws ConvergenceError if the gradient norm does not reach the
/// tolerance within max_iters.
OracleResult rank_svm_oracle(const std::vector<std::vector<double>>& frames,
                             const OracleConfig& cfg);

double rank_svm_objective(const std::vector<double>& w,
                          const std::vector<std::vector<double>>& frames, double lambda,
                          double beta);

/// Fraction of consecutive pairs with strictly increasing projections; ties
/// count as violations.
double order_preservation_rate(const std::vector<double>& w,
                               const std::vector<std::vector<double>>& frames);

}  // namespace stats

#include "stats/ranked_pooling.hpp"

#include <cmath>
#include <string>

#include "stats/errors.hpp"

namespace stats {

namespace {

Value uniform_param(std::vector<std::size_t> shape, double bound, RngStream& rng) {
    Tensor t(std::move(shape));
    rng.fill_uniform(t, -bound, bound);
    return Value::param(std::move(t));
}

double softplus_scalar(double z) {
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid_scalar(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

LstmParams LstmParams::init(std::size_t input_dim, std::size_t hidden_dim, RngStream& rng) {
    LstmParams p;
    p.input_dim = input_dim;
    p.hidden_dim = hidden_dim;
    double bound = 1.0 / std::sqrt(double(hidden_dim));
    auto mat_in = [&] { return uniform_param({hidden_dim, input_dim}, bound, rng); };
    auto mat_rec = [&] { return uniform_param({hidden_dim, hidden_dim}, bound, rng); };
    p.W_i = mat_in();
    p.U_i = mat_rec();
    p.b_i = Value::param(Tensor({hidden_dim}));
    p.W_f = mat_in();
    p.U_f = mat_rec();
    p.b_f = Value::param(Tensor::full({hidden_dim}, 1.0));
    p.W_o = mat_in();
    p.U_o = mat_rec();
    p.b_o = Value::param(Tensor({hidden_dim}));
    p.W_g = mat_in();
    p.U_g = mat_rec();
    p.b_g = Value::param(Tensor({hidden_dim}));
    return p;
}

std::vector<Value> LstmParams::parameters() const {
    return {W_i, U_i, b_i, W_f, U_f, b_f, W_o, U_o, b_o, W_g, U_g, b_g};
}

LstmState zero_lstm_state(std::size_t hidden_dim) {
    return {Value::constant(Tensor({hidden_dim})), Value::constant(Tensor({hidden_dim}))};
}

LstmState lstm_step(const LstmParams& p, const LstmState& prev, const Value& x) {
    auto gate = [&](const Value& W, const Value& U, const Value& b) {
        return ad::add(ad::add(ad::matmul(W, x), ad::matmul(U, prev.h)), b);
    };
    Value i = ad::sigmoid(gate(p.W_i, p.U_i, p.b_i));
    Value f = ad::sigmoid(gate(p.W_f, p.U_f, p.b_f));
    Value o = ad::sigmoid(gate(p.W_o, p.U_o, p.b_o));
    Value g = ad::tanh(gate(p.W_g, p.U_g, p.b_g));
    LstmState next;
    next.c = ad::add(ad::mul(f, prev.c), ad::mul(i, g));
    next.h = ad::mul(o, ad::tanh(next.c));
    return next;
}

void RankedPoolingConfig::validate() const {
    if (!(margin > 0.0)) throw ParamError("ranked pooling margin must be positive");
    if (loss_weight < 0.0) throw ParamError("ranked loss weight must be nonnegative");
}

Value ranked_encode(const LstmParams& p, std::span<const Value> frames) {
    if (frames.empty()) throw ShapeError("ranked_encode over an empty frame sequence");
    LstmState state = zero_lstm_state(p.hidden_dim);
    for (const Value& f : frames) state = lstm_step(p, state, f);
    return state.h;
}

Value mean_frames(std::span<const Value> frames) {
    if (frames.empty()) throw ShapeError("mean of an empty frame sequence");
    Value acc = frames[0];
    for (std::size_t t = 1; t < frames.size(); ++t) acc = ad::add(acc, frames[t]);
    return ad::scale(acc, 1.0 / double(frames.size()));
}

Value ranked_video_code(const LstmParams& p, const RankedPoolingConfig& cfg,
                        std::span<const Value> frames) {
    cfg.validate();
    Value code = ranked_encode(p, frames);
    if (cfg.combine_mean) {
        std::vector<Value> parts{code, mean_frames(frames)};
        code = ad::concat(parts);
    }
    return code;
}

Value ranked_loss(const Value& x_st, std::span<const Value> frames, double beta) {
    if (!(beta > 0.0)) throw ParamError("ranked_loss margin must be positive");
    if (frames.size() < 2) return Value::scalar_constant(0.0);
    Value beta_v = Value::scalar_constant(beta);
    Value loss = Value::scalar_constant(0.0);
    Value prev = ad::dot(x_st, frames[0]);
    for (std::size_t t = 1; t < frames.size(); ++t) {
        Value cur = ad::dot(x_st, frames[t]);
        Value zeta = ad::sub(ad::add(prev, beta_v), cur);
        loss = ad::add(loss, ad::softplus(zeta));
        prev = cur;
    }
    return loss;
}

void OracleConfig::validate() const {
    if (!(lambda > 0.0)) throw ParamError("oracle regularizer lambda must be positive");
    if (!(beta > 0.0)) throw ParamError("oracle margin must be positive");
    if (!(step_size > 0.0)) throw ParamError("oracle step size must be positive");
    if (!(tolerance > 0.0)) throw ParamError("oracle tolerance must be positive");
}

double rank_svm_objective(const std::vector<double>& w,
                          const std::vector<std::vector<double>>& frames, double lambda,
                          double beta) {
    double obj = 0.0;
    for (double wi : w) obj += 0.5 * wi * wi;
    for (std::size_t t = 0; t + 1 < frames.size(); ++t) {
        double proj_cur = 0.0, proj_next = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            proj_cur += w[i] * frames[t][i];
            proj_next += w[i] * frames[t + 1][i];
        }
        obj += lambda * softplus_scalar(proj_cur + beta - proj_next);
    }
    return obj;
}

namespace {

std::vector<double> rank_svm_gradient(const std::vector<double>& w,
                                      const std::vector<std::vector<double>>& frames,
                                      double lambda, double beta) {
    std::vector<double> grad(w);
    for (std::size_t t = 0; t + 1 < frames.size(); ++t) {
        double zeta = beta;
        for (std::size_t i = 0; i < w.size(); ++i) {
            zeta += w[i] * (frames[t][i] - frames[t + 1][i]);
        }
        double s = lambda * sigmoid_scalar(zeta);
        for (std::size_t i = 0; i < w.size(); ++i) {
            grad[i] += s * (frames[t][i] - frames[t + 1][i]);
        }
    }
    return grad;
}

}  // namespace

OracleResult rank_svm_oracle(const std::vector<std::vector<double>>& frames,
                             const OracleConfig& cfg) {
    cfg.validate();
    if (frames.size() < 2) throw ShapeError("rank_svm_oracle requires at least two frames");
    std::size_t d = frames[0].size();
    for (const auto& f : frames) {
        if (f.size() != d) throw ShapeError("rank_svm_oracle frames differ in dimension");
    }

    OracleResult r;
    r.w.assign(d, 0.0);
    double obj = rank_svm_objective(r.w, frames, cfg.lambda, cfg.beta);
    double step = cfg.step_size;
    for (std::size_t it = 0; it < cfg.max_iters; ++it) {
        std::vector<double> grad = rank_svm_gradient(r.w, frames, cfg.lambda, cfg.beta);
        double gnorm2 = 0.0;
        for (double g : grad) gnorm2 += g * g;
        r.grad_norm = std::sqrt(gnorm2);
        r.iters = it;
        if (r.grad_norm < cfg.tolerance) {
            r.objective = obj;
            return r;
        }

        // Armijo backtracking with a mild warm start.
        step = std::min(step * 2.0, cfg.step_size);
        std::vector<double> trial(d);
        for (;;) {
            for (std::size_t i = 0; i < d; ++i) trial[i] = r.w[i] - step * grad[i];
            double trial_obj = rank_svm_objective(trial, frames, cfg.lambda, cfg.beta);
            if (trial_obj <= obj - 1e-4 * step * gnorm2) {
                r.w = trial;
                obj = trial_obj;
                break;
            }
            step *= 0.5;
            if (step < 1e-18) {
                // Stuck at numerical precision; report where we stand.
                throw ConvergenceError(
                    "rank_svm_oracle: line search stalled with gradient norm " +
                        std::to_string(r.grad_norm),
                    r.grad_norm);
            }
        }
    }
    std::vector<double> grad = rank_svm_gradient(r.w, frames, cfg.lambda, cfg.beta);
    double gnorm2 = 0.0;
    for (double g : grad) gnorm2 += g * g;
    r.grad_norm = std::sqrt(gnorm2);
    if (r.grad_norm < cfg.tolerance) {
        r.objective = rank_svm_objective(r.w, frames, cfg.lambda, cfg.beta);
        return r;
    }
    throw ConvergenceError("rank_svm_oracle: no convergence in " +
                               std::to_string(cfg.max_iters) + " iterations, gradient norm " +
                               std::to_string(r.grad_norm),
                           r.grad_norm);
}

double order_preservation_rate(const std::vector<double>& w,
                               const std::vector<std::vector<double>>& frames) {
    if (frames.size() < 2) throw ShapeError("order_preservation_rate requires T >= 2");
    std::size_t increasing = 0;
    for (std::size_t t = 0; t + 1 < frames.size(); ++t) {
        double cur = 0.0, next = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            cur += w[i] * frames[t][i];
            next += w[i] * frames[t + 1][i];
        }
        if (next > cur) ++increasing;
    }
    return double(increasing) / double(frames.size() - 1);
}

}  // namespace stats

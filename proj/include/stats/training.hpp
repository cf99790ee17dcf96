#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stats/data_io.hpp"
#include "stats/model.hpp"

namespace stats {

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    std::size_t epochs = 20;
    std::size_t ce_epochs_before_rl = 10;
    double schedule_eta = 24.0;       // teacher forcing eta
    double ranked_loss_weight = 0.1;  // alpha
    double rl_loss_mix = 0.5;         // gamma in [0,1]; 1 reduces to pure CE
    std::uint64_t rng_seed = 0;
    double grad_clip_norm = 5.0;
    double rmsprop_decay = 0.9;
    double rmsprop_epsilon = 1e-8;
    std::string reward = "mean_bleu_cider";  // | bleu | cider

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

/// Scheduled-sampling teacher forcing ratio eta/(eta + exp(p/eta)).
double teacher_forcing_ratio(double eta, double epoch);

/// Masked mean negative log-likelihood. Probabilities are clamped at 1e-12
/// before the log. Positions with mask 0 contribute nothing; an all-masked
/// call is a degenerate batch.
Value cross_entropy_loss(std::span<const Value> dists, std::span<const std::size_t> targets,
                         std::span<const std::uint8_t> mask);

/// Per-parameter running squared-gradient averages for RMSprop.
struct OptimizerState {
    double rho = 0.9;
    double epsilon = 1e-8;
    std::vector<Tensor> v;

    static OptimizerState init(std::span<const std::pair<std::string, Value>> params,
                               double rho = 0.9, double epsilon = 1e-8);
};

/// v <- rho v + (1-rho) g^2; theta <- theta - lr g / sqrt(v + eps).
/// Throws NumericError naming the parameter group on non-finite gradients.
void rmsprop_step(OptimizerState& opt, std::span<const std::pair<std::string, Value>> params,
                  double lr);

/// Scales gradients so their global norm is at most max_norm; returns the
/// pre-clip norm.
double clip_global_norm(std::span<const std::pair<std::string, Value>> params, double max_norm);

using RewardFn = std::function<double(const std::vector<std::string>& caption,
                                      const std::vector<std::vector<std::string>>& references)>;

struct StepStats {
    double ce_loss = 0.0;
    double ranked_loss = 0.0;
    double rl_loss = 0.0;
    double mean_sample_reward = 0.0;
    std::size_t rl_skipped = 0;
};

/// One optimizer step on a batch. With gamma = 1 or a null reward function
/// the policy-gradient path is skipped entirely and the update equals pure
/// cross-entropy training bit for bit. Otherwise each video contributes
/// gamma*CE + (1-gamma) * (-(r_sample - r_greedy) * log p(sample)), with the
/// greedy decode as the self-critical baseline.
StepStats train_step(StatsModel& model, const Batch& batch, double gamma,
                     const RewardFn* reward_fn, const TrainConfig& cfg, double tf_ratio,
                     OptimizerState& opt, RngStream& ss_rng, RngStream& rl_rng);

/// Exposed for tests: teacher-forced distributions for one padded item using
/// scheduled sampling (one uniform draw per decoding step).
struct TeacherForcedOutput {
    std::vector<Value> dists;
    std::vector<std::size_t> targets;
    std::size_t steps = 0;
};
TeacherForcedOutput teacher_forced_forward(const StatsModel& model, const BatchItem& item,
                                           double tf_ratio, RngStream& ss_rng);

struct EpochLog {
    std::size_t epoch = 0;  // 0-based, as fed to the forcing-ratio schedule
    double ce_loss = 0.0;
    double ranked_loss = 0.0;
    double reward = 0.0;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    double cider = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::size_t rl_skipped = 0;
};

/// Full training run: CE epochs with scheduled sampling, then self-critical
/// epochs, ranked loss mixed in throughout when the scheme has one.
/// Writes a checkpoint per epoch when checkpoint_dir is nonempty.
TrainResult train(StatsModel& model, const LoadedCorpus& train_corpus,
                  const LoadedCorpus& val_corpus, const TrainConfig& cfg,
                  const std::filesystem::path& checkpoint_dir = {});

void write_train_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

/// Builds the configured reward: smoothed sentence BLEU4, CIDEr over the
/// given reference corpus, or their mean.
RewardFn make_reward(const std::string& kind,
                     const std::vector<std::vector<std::vector<std::string>>>& train_refs);

// ---- checkpoints ----------------------------------------------------------
// Layout: magic "STCK" | u32 header_len | JSON header {config, epoch,
// vocab_hash, vocab} | u32 tensor count | per tensor: u32 name_len, name,
// tensor blob in the shared serialization format.

void save_checkpoint(const std::filesystem::path& path, const StatsModel& model,
                     const TrainConfig& cfg, std::size_t epoch);

struct LoadedCheckpoint {
    StatsModel model;
    TrainConfig train_cfg;
    std::size_t epoch = 0;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stats

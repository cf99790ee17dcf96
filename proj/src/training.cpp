#include "stats/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "stats/errors.hpp"
#include "stats/metrics.hpp"

namespace stats {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (rl_loss_mix < 0.0 || rl_loss_mix > 1.0) throw ConfigError("rl_loss_mix must be in [0,1]");
    if (!(schedule_eta > 0.0)) throw ConfigError("schedule_eta must be positive");
    if (ranked_loss_weight < 0.0) throw ConfigError("ranked_loss_weight must be nonnegative");
    if (!(grad_clip_norm > 0.0)) throw ConfigError("grad_clip_norm must be positive");
    if (rmsprop_decay < 0.0 || rmsprop_decay >= 1.0) {
        throw ConfigError("rmsprop_decay must be in [0,1)");
    }
    if (!(rmsprop_epsilon > 0.0)) throw ConfigError("rmsprop_epsilon must be positive");
    if (reward != "mean_bleu_cider" && reward != "bleu" && reward != "cider") {
        throw ConfigError("unknown reward kind: " + reward);
    }
}

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["learning_rate"] = learning_rate;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["ce_epochs_before_rl"] = ce_epochs_before_rl;
    j["schedule_eta"] = schedule_eta;
    j["ranked_loss_weight"] = ranked_loss_weight;
    j["rl_loss_mix"] = rl_loss_mix;
    j["rng_seed"] = rng_seed;
    j["grad_clip_norm"] = grad_clip_norm;
    j["rmsprop_decay"] = rmsprop_decay;
    j["rmsprop_epsilon"] = rmsprop_epsilon;
    j["reward"] = reward;
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    TrainConfig c;
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.ce_epochs_before_rl = j.at("ce_epochs_before_rl").get<std::size_t>();
    c.schedule_eta = j.at("schedule_eta").get<double>();
    c.ranked_loss_weight = j.at("ranked_loss_weight").get<double>();
    c.rl_loss_mix = j.at("rl_loss_mix").get<double>();
    c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    c.rmsprop_decay = j.at("rmsprop_decay").get<double>();
    c.rmsprop_epsilon = j.at("rmsprop_epsilon").get<double>();
    c.reward = j.at("reward").get<std::string>();
    c.validate();
    return c;
}

double teacher_forcing_ratio(double eta, double epoch) {
    if (!(eta > 0.0)) throw ParamError("teacher_forcing_ratio requires eta > 0");
    if (epoch < 0.0) throw ParamError("teacher_forcing_ratio requires epoch >= 0");
    return eta / (eta + std::exp(epoch / eta));
}

Value cross_entropy_loss(std::span<const Value> dists, std::span<const std::size_t> targets,
                         std::span<const std::uint8_t> mask) {
    if (dists.size() != targets.size() || dists.size() != mask.size()) {
        throw ShapeError("cross_entropy_loss: dists, targets and mask lengths differ");
    }
    std::size_t count = 0;
    Value sum_nll = Value::scalar_constant(0.0);
    for (std::size_t i = 0; i < dists.size(); ++i) {
        if (!mask[i]) continue;
        ++count;
        sum_nll = ad::add(sum_nll, ad::log_clamped(ad::pick(dists[i], targets[i]), 1e-12));
    }
    if (count == 0) throw ContractError("cross_entropy_loss: degenerate batch, all masked");
    return ad::scale(sum_nll, -1.0 / double(count));
}

OptimizerState OptimizerState::init(std::span<const std::pair<std::string, Value>> params,
                                    double rho, double epsilon) {
    OptimizerState s;
    s.rho = rho;
    s.epsilon = epsilon;
    s.v.reserve(params.size());
    for (const auto& [name, p] : params) s.v.emplace_back(Tensor::zeros(p.shape()));
    return s;
}

void rmsprop_step(OptimizerState& opt, std::span<const std::pair<std::string, Value>> params,
                  double lr) {
    if (opt.v.size() != params.size()) {
        throw ContractError("optimizer state does not match the parameter list");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& [name, p] = params[k];
        const Tensor& g = p.grad();
        if (!g.all_finite()) {
            throw NumericError("non-finite gradient in parameter group " + name);
        }
        Tensor& v = opt.v[k];
        Tensor& theta = const_cast<Value&>(p).val_mut();
        for (std::size_t i = 0; i < g.size(); ++i) {
            v[i] = opt.rho * v[i] + (1.0 - opt.rho) * g[i] * g[i];
            theta[i] -= lr * g[i] / std::sqrt(v[i] + opt.epsilon);
        }
    }
}

double clip_global_norm(std::span<const std::pair<std::string, Value>> params,
                        double max_norm) {
    double norm2 = 0.0;
    for (const auto& [name, p] : params) {
        const Tensor& g = p.grad();
        for (std::size_t i = 0; i < g.size(); ++i) norm2 += g[i] * g[i];
    }
    double norm = std::sqrt(norm2);
    if (norm > max_norm && norm > 0.0) {
        double scale = max_norm / norm;
        for (const auto& [name, p] : params) {
            Tensor& g = const_cast<Value&>(p).grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= scale;
        }
    }
    return norm;
}

TeacherForcedOutput teacher_forced_forward(const StatsModel& model, const BatchItem& item,
                                           double tf_ratio, RngStream& ss_rng) {
    TeacherForcedOutput out;
    FeatureSeq fs = model.embed_features(item.features, item.frame_mask);
    DecoderState state = initial_decoder_state(model.cfg.hidden_dim);
    std::size_t prev = Vocabulary::BOS;
    for (std::size_t i = 0; i < item.target.size(); ++i) {
        if (!item.token_mask[i]) break;  // padding is a suffix
        WordStep step = model.word_step(fs, state, prev);
        // One uniform draw per decoding step, consumed unconditionally so
        // the stream position depends only on the step count.
        double u = ss_rng.uniform();
        std::size_t model_choice = argmax_index(step.dist.val());
        prev = (u < tf_ratio) ? item.target[i] : model_choice;
        out.targets.push_back(item.target[i]);
        out.dists.push_back(step.dist);
        state = std::move(step.state);
        ++out.steps;
    }
    return out;
}

namespace {

std::vector<std::string> decode_tokens(const StatsModel& model,
                                       const std::vector<std::size_t>& idx) {
    return model.vocab.decode(idx);
}

}  // namespace

StepStats train_step(StatsModel& model, const Batch& batch, double gamma,
                     const RewardFn* reward_fn, const TrainConfig& cfg, double tf_ratio,
                     OptimizerState& opt, RngStream& ss_rng, RngStream& rl_rng) {
    auto params = model.named_parameters();
    std::vector<Value> plain;
    plain.reserve(params.size());
    for (auto& [name, v] : params) plain.push_back(v);
    ad::zero_grads(std::span<Value>(plain));

    bool rl_active = gamma < 1.0 && reward_fn != nullptr;
    double item_weight = 1.0 / double(batch.items.size());
    StepStats stats;
    std::size_t rewarded = 0;

    for (const BatchItem& item : batch.items) {
        TeacherForcedOutput tf = teacher_forced_forward(model, item, tf_ratio, ss_rng);
        std::vector<std::uint8_t> ones(tf.steps, 1);
        Value ce = cross_entropy_loss(tf.dists, tf.targets, ones);

        FeatureSeq fs = model.embed_features(item.features, item.frame_mask);
        Value ranked = model.ranked_loss_value(fs);

        Value total = ad::add(ce, ad::scale(ranked, cfg.ranked_loss_weight));
        if (rl_active) {
            total = ad::scale(ce, gamma);
            GeneratedCaption sample =
                model.generate(item.item->features, GenerateMode::sample, 1.0, &rl_rng);
            GeneratedCaption greedy = model.generate(item.item->features, GenerateMode::greedy);
            if (sample.tokens.empty()) {
                ++stats.rl_skipped;
            } else {
                double r_sample =
                    (*reward_fn)(decode_tokens(model, sample.tokens), item.item->caption_tokens);
                double r_greedy =
                    (*reward_fn)(decode_tokens(model, greedy.tokens), item.item->caption_tokens);
                double advantage = r_sample - r_greedy;
                stats.mean_sample_reward += r_sample;
                ++rewarded;
                if (advantage != 0.0) {
                    Value log_prob = model.sequence_log_prob(fs, sample.tokens);
                    Value rl = ad::scale(log_prob, -advantage);
                    stats.rl_loss += rl.item();
                    total = ad::add(total, ad::scale(rl, 1.0 - gamma));
                }
            }
            total = ad::add(total, ad::scale(ranked, cfg.ranked_loss_weight));
        }

        stats.ce_loss += ce.item();
        stats.ranked_loss += ranked.item();
        ad::backward(ad::scale(total, item_weight));
    }

    stats.ce_loss /= double(batch.items.size());
    stats.ranked_loss /= double(batch.items.size());
    if (rewarded > 0) stats.mean_sample_reward /= double(rewarded);

    clip_global_norm(params, cfg.grad_clip_norm);
    rmsprop_step(opt, params, cfg.learning_rate);
    return stats;
}

RewardFn make_reward(const std::string& kind,
                     const std::vector<std::vector<std::vector<std::string>>>& train_refs) {
    auto corpus = std::make_shared<CiderCorpus>(CiderCorpus::build(train_refs));
    if (kind == "bleu") {
        return [](const std::vector<std::string>& cap,
                  const std::vector<std::vector<std::string>>& refs) {
            return bleu4_smoothed(cap, refs);
        };
    }
    if (kind == "cider") {
        return [corpus](const std::vector<std::string>& cap,
                        const std::vector<std::vector<std::string>>& refs) {
            return corpus->score(cap, refs);
        };
    }
    return [corpus](const std::vector<std::string>& cap,
                    const std::vector<std::vector<std::string>>& refs) {
        return 0.5 * (bleu4_smoothed(cap, refs) + corpus->score(cap, refs));
    };
}

namespace {

CorpusScores validate_greedy(const StatsModel& model, const LoadedCorpus& val_corpus) {
    std::map<std::string, TokenSeq> captions;
    std::map<std::string, std::vector<TokenSeq>> references;
    for (const auto& item : val_corpus.items) {
        GeneratedCaption g = model.generate(item.features, GenerateMode::greedy);
        captions[item.video_id] = model.vocab.decode(g.tokens);
        references[item.video_id] = item.caption_tokens;
    }
    return evaluate_corpus(captions, references);
}

}  // namespace

TrainResult train(StatsModel& model, const LoadedCorpus& train_corpus,
                  const LoadedCorpus& val_corpus, const TrainConfig& cfg,
                  const fs::path& checkpoint_dir) {
    cfg.validate();
    if (train_corpus.items.empty()) throw ConfigError("training corpus is empty");
    TrainResult result;
    if (cfg.epochs == 0) return result;

    if (!checkpoint_dir.empty()) fs::create_directories(checkpoint_dir);

    auto params = model.named_parameters();
    OptimizerState opt = OptimizerState::init(params, cfg.rmsprop_decay, cfg.rmsprop_epsilon);

    std::vector<std::vector<std::vector<std::string>>> train_refs;
    train_refs.reserve(train_corpus.items.size());
    for (const auto& item : train_corpus.items) train_refs.push_back(item.caption_tokens);
    RewardFn reward_fn = make_reward(cfg.reward, train_refs);

    RngStream base(cfg.rng_seed);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::string tag = std::to_string(epoch);
        RngStream shuffle_rng = base.substream("shuffle").substream(tag);
        RngStream ss_rng = base.substream("scheduled_sampling").substream(tag);
        RngStream rl_rng = base.substream("rl_sampling").substream(tag);

        double ratio = teacher_forcing_ratio(cfg.schedule_eta, double(epoch));
        bool rl_phase = epoch >= cfg.ce_epochs_before_rl;
        double gamma = rl_phase ? cfg.rl_loss_mix : 1.0;

        auto batches = make_batches(train_corpus, model.vocab, cfg.batch_size, shuffle_rng);
        EpochLog log;
        log.epoch = epoch;
        std::size_t steps = 0;
        for (const Batch& batch : batches) {
            StepStats s = train_step(model, batch, gamma, rl_phase ? &reward_fn : nullptr, cfg,
                                     ratio, opt, ss_rng, rl_rng);
            if (!std::isfinite(s.ce_loss) || !std::isfinite(s.ranked_loss)) {
                throw DivergenceError("training diverged (non-finite loss) at epoch " +
                                      std::to_string(epoch) + ", step " + std::to_string(steps));
            }
            log.ce_loss += s.ce_loss;
            log.ranked_loss += s.ranked_loss;
            log.reward += s.mean_sample_reward;
            result.rl_skipped += s.rl_skipped;
            ++steps;
        }
        log.ce_loss /= double(steps);
        log.ranked_loss /= double(steps);
        log.reward /= double(steps);

        if (!val_corpus.items.empty()) {
            CorpusScores scores = validate_greedy(model, val_corpus);
            log.bleu4 = scores.bleu4;
            log.rouge_l = scores.rouge_l;
            log.cider = scores.cider;
        }
        result.log.push_back(log);

        if (!checkpoint_dir.empty()) {
            std::ostringstream name;
            name << "epoch_" << epoch << ".ckpt";
            save_checkpoint(checkpoint_dir / name.str(), model, cfg, epoch);
        }
    }
    return result;
}

void write_train_log_csv(const fs::path& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write training log: " + path.string());
    out << "epoch,ce_loss,ranked_loss,reward,bleu4,rouge_l,cider\n";
    out.setf(std::ios::fixed);
    out.precision(6);
    for (const auto& e : log) {
        out << e.epoch << "," << e.ce_loss << "," << e.ranked_loss << "," << e.reward << ","
            << e.bleu4 << "," << e.rouge_l << "," << e.cider << "\n";
    }
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const fs::path& path, const StatsModel& model, const TrainConfig& cfg,
                     std::size_t epoch) {
    nlohmann::json header;
    header["config"] = {{"model", nlohmann::json::parse(model.cfg.to_json())},
                        {"train", nlohmann::json::parse(cfg.to_json())}};
    header["epoch"] = epoch;
    header["vocab_hash"] = model.vocab.hash();
    header["vocab"] = model.vocab.tokens;
    std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint: " + path.string());
    out.write("STCK", 4);
    write_u32(out, static_cast<std::uint32_t>(header_text.size()));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

    auto params = model.named_parameters();
    write_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, p] : params) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(out, p.val());
    }
    if (!out) throw FormatError("checkpoint write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "STCK", 4) != 0) {
        throw FormatError("bad checkpoint magic in " + path.string());
    }
    std::uint32_t header_len = read_u32(in, "header length");
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), header_len);
    if (!in) throw FormatError("checkpoint header truncated in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed checkpoint header: " + std::string(e.what()));
    }
    ModelConfig mc = ModelConfig::from_json(header.at("config").at("model").dump());
    TrainConfig tc = TrainConfig::from_json(header.at("config").at("train").dump());
    Vocabulary vocab;
    vocab.tokens = header.at("vocab").get<std::vector<std::string>>();
    vocab.validate();
    if (header.at("vocab_hash").get<std::uint64_t>() != vocab.hash()) {
        throw FormatError("checkpoint vocab hash mismatch in " + path.string());
    }

    RngStream throwaway(0);
    LoadedCheckpoint ck{StatsModel::init(mc, vocab, throwaway), tc,
                        header.at("epoch").get<std::size_t>()};

    std::uint32_t count = read_u32(in, "tensor count");
    std::map<std::string, Tensor> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = read_u32(in, "tensor name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw FormatError("checkpoint tensor name truncated");
        tensors.emplace(name, read_tensor(in));
    }
    for (auto& [name, p] : ck.model.named_parameters()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw FormatError("checkpoint missing parameter " + name);
        }
        if (it->second.shape() != p.shape()) {
            throw FormatError("checkpoint shape mismatch for " + name);
        }
        const_cast<Value&>(p).val_mut() = it->second;
    }
    return ck;
}

}  // namespace stats

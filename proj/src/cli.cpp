#include "stats/cli.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "stats/data_io.hpp"
#include "stats/errors.hpp"
#include "stats/metrics.hpp"
#include "stats/model.hpp"
#include "stats/ranked_pooling.hpp"
#include "stats/training.hpp"

namespace stats::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunSettings {
    ModelConfig model;
    TrainConfig train;
};

// Partial overlays: only keys present in the JSON take effect, so a config
// file may specify any subset. Flag values are applied afterwards by CLI11
// and therefore win.
void overlay_model(ModelConfig& cfg, const json& j) {
    if (j.contains("raw_feature_dim")) cfg.raw_feature_dim = j["raw_feature_dim"].get<std::size_t>();
    if (j.contains("feature_dim")) cfg.feature_dim = j["feature_dim"].get<std::size_t>();
    if (j.contains("attention_dim")) cfg.attention_dim = j["attention_dim"].get<std::size_t>();
    if (j.contains("fusion_dim")) cfg.fusion_dim = j["fusion_dim"].get<std::size_t>();
    if (j.contains("embed_dim")) cfg.embed_dim = j["embed_dim"].get<std::size_t>();
    if (j.contains("hidden_dim")) cfg.hidden_dim = j["hidden_dim"].get<std::size_t>();
    if (j.contains("self_attn_dim")) cfg.self_attn_dim = j["self_attn_dim"].get<std::size_t>();
    if (j.contains("head_proj_dim")) cfg.head_proj_dim = j["head_proj_dim"].get<std::size_t>();
    if (j.contains("scheme")) cfg.scheme = scheme_from_name(j["scheme"].get<std::string>());
    if (j.contains("branch")) cfg.branch = branch_from_name(j["branch"].get<std::string>());
    if (j.contains("ts_frame_summary")) {
        cfg.ts_frame_summary = j["ts_frame_summary"].get<std::string>() == "max"
                                   ? FrameSummary::max
                                   : FrameSummary::mean;
    }
    if (j.contains("ts_temperature")) cfg.ts_temperature = j["ts_temperature"].get<double>();
    if (j.contains("augmented_attention_query")) {
        cfg.augmented_attention_query = j["augmented_attention_query"].get<bool>();
    }
    if (j.contains("ranked_margin")) cfg.ranked_margin = j["ranked_margin"].get<double>();
    if (j.contains("max_caption_len")) cfg.max_caption_len = j["max_caption_len"].get<std::size_t>();
}

void overlay_train(TrainConfig& cfg, const json& j) {
    if (j.contains("learning_rate")) cfg.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("epochs")) cfg.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("ce_epochs_before_rl")) {
        cfg.ce_epochs_before_rl = j["ce_epochs_before_rl"].get<std::size_t>();
    }
    if (j.contains("schedule_eta")) cfg.schedule_eta = j["schedule_eta"].get<double>();
    if (j.contains("ranked_loss_weight")) {
        cfg.ranked_loss_weight = j["ranked_loss_weight"].get<double>();
    }
    if (j.contains("rl_loss_mix")) cfg.rl_loss_mix = j["rl_loss_mix"].get<double>();
    if (j.contains("rng_seed")) cfg.rng_seed = j["rng_seed"].get<std::uint64_t>();
    if (j.contains("grad_clip_norm")) cfg.grad_clip_norm = j["grad_clip_norm"].get<double>();
    if (j.contains("rmsprop_decay")) cfg.rmsprop_decay = j["rmsprop_decay"].get<double>();
    if (j.contains("rmsprop_epsilon")) cfg.rmsprop_epsilon = j["rmsprop_epsilon"].get<double>();
    if (j.contains("reward")) cfg.reward = j["reward"].get<std::string>();
}

void load_config_file(const std::string& path, RunSettings& settings) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed config file " + path + ": " + e.what());
    }
    if (j.contains("model")) overlay_model(settings.model, j["model"]);
    if (j.contains("train")) overlay_train(settings.train, j["train"]);
}

std::string settings_json(const RunSettings& s) {
    json j;
    j["model"] = json::parse(s.model.to_json());
    j["train"] = json::parse(s.train.to_json());
    return j.dump(2);
}

void add_model_flags(CLI::App* cmd, ModelConfig& m, std::string& scheme, std::string& branch,
                     std::string& summary) {
    cmd->add_option("--feature-dim", m.feature_dim, "learned feature embedding size");
    cmd->add_option("--attention-dim", m.attention_dim, "additive attention space size");
    cmd->add_option("--fusion-dim", m.fusion_dim, "fusion attention space size");
    cmd->add_option("--embed-dim", m.embed_dim, "word embedding size");
    cmd->add_option("--hidden-dim", m.hidden_dim, "decoder LSTM width");
    cmd->add_option("--self-attn-dim", m.self_attn_dim, "history self-attention space size");
    cmd->add_option("--proj-dim", m.head_proj_dim, "word scorer hidden width");
    cmd->add_option("--scheme", scheme,
                    "ST temporal aggregation: mean_pool|lstm|mean_plus_lstm|temporal_att|"
                    "mean_plus_temporal|ranked_att|mean_plus_ranked");
    cmd->add_option("--branch", branch, "attention branch: ST|TS|STaTS");
    cmd->add_option("--ts-temperature", m.ts_temperature, "TS frame-selection softmax temperature");
    cmd->add_option("--frame-summary", summary, "TS per-frame summary: mean|max");
    cmd->add_option("--ranked-margin", m.ranked_margin, "ranked loss margin beta");
    cmd->add_option("--max-caption-len", m.max_caption_len, "generation length cap");
    cmd->add_flag("--raw-query,!--augmented-query", m.augmented_attention_query,
                  "condition attention on the raw LSTM state instead of the "
                  "self-attention-augmented state")
        ->default_val(true);
}

void add_train_flags(CLI::App* cmd, TrainConfig& t) {
    cmd->add_option("--lr", t.learning_rate, "RMSprop learning rate");
    cmd->add_option("--batch-size", t.batch_size, "videos per optimizer step");
    cmd->add_option("--epochs", t.epochs, "total training epochs");
    cmd->add_option("--ce-epochs", t.ce_epochs_before_rl,
                    "cross-entropy epochs before the policy-gradient phase");
    cmd->add_option("--eta", t.schedule_eta, "scheduled sampling eta");
    cmd->add_option("--alpha", t.ranked_loss_weight, "ranked loss weight");
    cmd->add_option("--gamma", t.rl_loss_mix, "CE share of the RL-phase loss, in [0,1]");
    cmd->add_option("--seed", t.rng_seed, "master seed for all randomness");
    cmd->add_option("--clip", t.grad_clip_norm, "global gradient norm clip");
    cmd->add_option("--reward", t.reward, "RL reward: mean_bleu_cider|bleu|cider");
}

struct CorpusBundle {
    CorpusManifest manifest;
    Vocabulary vocab;
    LoadedCorpus train;
    LoadedCorpus val;
};

CorpusBundle load_bundle(const fs::path& root) {
    CorpusBundle b;
    b.manifest = read_manifest(root / "manifest.json");
    b.vocab = build_vocab(b.manifest);
    b.train = load_corpus(root, b.manifest, "train");
    b.val = load_corpus(root, b.manifest, "val");
    if (b.train.items.empty()) throw ConfigError("corpus has no train split");
    return b;
}

std::size_t corpus_feature_dim(const LoadedCorpus& c) {
    return c.items.empty() ? 0 : c.items[0].features.dim;
}

int cmd_synth(const std::string& out_dir, SynthSpec spec, std::size_t videos) {
    if (videos > 0) {
        spec.val_videos = videos / 10;
        spec.test_videos = videos / 10;
        spec.train_videos = videos - spec.val_videos - spec.test_videos;
    }
    CorpusManifest manifest = generate_synthetic_corpus(spec, out_dir);
    std::cout << "wrote " << manifest.entries.size() << " videos under " << out_dir << "\n";
    return 0;
}

int cmd_train(const fs::path& corpus_dir, const fs::path& out_dir, RunSettings settings) {
    CorpusBundle bundle = load_bundle(corpus_dir);
    settings.model.raw_feature_dim = corpus_feature_dim(bundle.train);
    settings.model.validate();
    settings.train.validate();
    std::cout << "run configuration:\n" << settings_json(settings) << "\n";

    RngStream init = RngStream(settings.train.rng_seed).substream("init");
    StatsModel model = StatsModel::init(settings.model, bundle.vocab, init);
    fs::create_directories(out_dir);
    TrainResult result = train(model, bundle.train, bundle.val, settings.train, out_dir);
    write_train_log_csv(out_dir / "train_log.csv", result.log);
    if (result.rl_skipped > 0) {
        std::cerr << "warning: " << result.rl_skipped
                  << " empty sampled captions skipped during RL\n";
    }
    if (!result.log.empty()) {
        const EpochLog& last = result.log.back();
        std::cout << "final epoch " << last.epoch << ": ce=" << last.ce_loss
                  << " bleu4=" << last.bleu4 << " rouge_l=" << last.rouge_l
                  << " cider=" << last.cider << "\n";
    }
    return 0;
}

int cmd_evaluate(const fs::path& captions_path, const fs::path& refs_path) {
    auto caps = read_captions_jsonl(captions_path);
    auto refs = read_refs_jsonl(refs_path);
    std::map<std::string, TokenSeq> candidate_map;
    for (const auto& c : caps) candidate_map[c.video_id] = c.caption;
    std::map<std::string, std::vector<TokenSeq>> reference_map;
    for (const auto& r : refs) {
        std::vector<TokenSeq> toks;
        for (const auto& s : r.captions) toks.push_back(tokenize(s));
        reference_map[r.video_id] = std::move(toks);
    }
    CorpusScores s = evaluate_corpus(candidate_map, reference_map);
    json j{{"bleu4", s.bleu4}, {"rouge_l", s.rouge_l}, {"cider", s.cider}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_caption(const fs::path& checkpoint, const std::string& features_file,
                const std::string& corpus_dir, const std::string& split,
                const std::string& out_file, bool sample, double temperature,
                std::uint64_t seed, std::size_t max_len) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    std::vector<std::pair<std::string, VideoFeatures>> videos;
    if (!features_file.empty()) {
        videos.emplace_back(fs::path(features_file).stem().string(),
                            read_feature_file(features_file));
    } else if (!corpus_dir.empty()) {
        CorpusManifest manifest = read_manifest(fs::path(corpus_dir) / "manifest.json");
        for (const auto& e : manifest.entries) {
            if (!split.empty() && e.split != split) continue;
            videos.emplace_back(e.video_id, read_feature_file(fs::path(corpus_dir) / e.feature_path));
        }
    } else {
        throw ConfigError("caption needs --features or --corpus");
    }

    RngStream rng = RngStream(seed).substream("sampling");
    std::vector<CaptionRecord> records;
    for (const auto& [id, vf] : videos) {
        GeneratedCaption g =
            ck.model.generate(vf, sample ? GenerateMode::sample : GenerateMode::greedy,
                              temperature, sample ? &rng : nullptr, max_len);
        records.push_back({id, ck.model.vocab.decode(g.tokens), g.log_prob});
    }
    if (out_file.empty()) {
        for (const auto& r : records) {
            json j{{"video_id", r.video_id}, {"caption", r.caption}, {"log_prob", r.log_prob}};
            std::cout << j.dump() << "\n";
        }
    } else {
        write_captions_jsonl(out_file, records);
        std::cout << "wrote " << records.size() << " captions to " << out_file << "\n";
    }
    return 0;
}

int cmd_dump_attention(const fs::path& checkpoint, const fs::path& features_file,
                       const std::string& out_file, std::size_t max_len) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    VideoFeatures vf = read_feature_file(features_file);
    GeneratedCaption g =
        ck.model.generate(vf, GenerateMode::greedy, 1.0, nullptr, max_len, true);
    std::ostringstream lines;
    for (const auto& d : g.dumps) {
        json j{{"word_index", d.word_index},
               {"word", d.word},
               {"temporal_weights", d.temporal_weights},
               {"spatial_weights", d.spatial_weights},
               {"ts_frame_weights", d.ts_frame_weights},
               {"ts_spatial_weights", d.ts_spatial_weights},
               {"branch_weights", d.branch_weights}};
        lines << j.dump() << "\n";
    }
    if (out_file.empty()) {
        std::cout << lines.str();
    } else {
        std::ofstream out(out_file);
        out << lines.str();
        std::cout << "wrote " << g.dumps.size() << " word dumps to " << out_file << "\n";
    }
    return 0;
}

int cmd_oracle(const fs::path& features_file, OracleConfig cfg) {
    VideoFeatures vf = read_feature_file(features_file);
    std::vector<std::vector<double>> frames(vf.frames, std::vector<double>(vf.dim, 0.0));
    for (std::size_t t = 0; t < vf.frames; ++t) {
        for (std::size_t j = 0; j < vf.regions; ++j) {
            for (std::size_t k = 0; k < vf.dim; ++k) {
                frames[t][k] += vf.values.at(t, j, k) / double(vf.regions);
            }
        }
    }
    OracleResult r = rank_svm_oracle(frames, cfg);
    json j{{"w", r.w},
           {"objective", r.objective},
           {"grad_norm", r.grad_norm},
           {"iterations", r.iters},
           {"order_preservation_rate", order_preservation_rate(r.w, frames)}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_ablate(const fs::path& corpus_dir, const fs::path& out_dir, RunSettings base,
               const std::vector<std::string>& branch_names, std::size_t jobs) {
    CorpusBundle bundle = load_bundle(corpus_dir);
    base.model.raw_feature_dim = corpus_feature_dim(bundle.train);
    base.train.validate();
    std::cout << "ablation base configuration:\n" << settings_json(base) << "\n";

    std::vector<Branch> branches;
    for (const auto& name : branch_names) branches.push_back(branch_from_name(name));
    std::vector<Scheme> schemes = all_schemes();

    struct Job {
        Scheme scheme;
        Branch branch;
        CorpusScores scores;
    };
    std::vector<Job> grid;
    for (Scheme s : schemes) {
        for (Branch b : branches) grid.push_back({s, b, {}});
    }

    std::atomic<std::size_t> next{0};
    std::mutex io_mutex;
    auto worker = [&] {
        for (;;) {
            std::size_t k = next.fetch_add(1);
            if (k >= grid.size()) return;
            Job& job = grid[k];
            RunSettings settings = base;
            settings.model.scheme = job.scheme;
            settings.model.branch = job.branch;
            settings.model.validate();
            RngStream init = RngStream(settings.train.rng_seed).substream("init");
            StatsModel model = StatsModel::init(settings.model, bundle.vocab, init);
            train(model, bundle.train, {}, settings.train, "");

            std::map<std::string, TokenSeq> captions;
            std::map<std::string, std::vector<TokenSeq>> references;
            for (const auto& item : bundle.val.items) {
                GeneratedCaption g = model.generate(item.features, GenerateMode::greedy);
                captions[item.video_id] = model.vocab.decode(g.tokens);
                references[item.video_id] = item.caption_tokens;
            }
            job.scores = evaluate_corpus(captions, references);
            std::lock_guard<std::mutex> lock(io_mutex);
            std::cout << scheme_name(job.scheme) << " / " << branch_name(job.branch)
                      << ": cider=" << job.scores.cider << " bleu4=" << job.scores.bleu4
                      << " rouge=" << job.scores.rouge_l << "\n";
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < jobs; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    fs::create_directories(out_dir);
    std::ofstream csv(out_dir / "ablation.csv");
    csv << "scheme";
    for (Branch b : branches) {
        csv << "," << branch_name(b) << "_cider," << branch_name(b) << "_bleu4,"
            << branch_name(b) << "_rouge," << branch_name(b) << "_meteor";
    }
    csv << "\n";
    csv.setf(std::ios::fixed);
    csv.precision(6);
    for (Scheme s : schemes) {
        csv << scheme_name(s);
        for (Branch b : branches) {
            for (const Job& job : grid) {
                if (job.scheme == s && job.branch == b) {
                    // METEOR needs external linguistic resources; column left blank.
                    csv << "," << job.scores.cider << "," << job.scores.bleu4 << ","
                        << job.scores.rouge_l << ",";
                }
            }
        }
        csv << "\n";
    }
    std::cout << "wrote " << (out_dir / "ablation.csv").string() << "\n";
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"STaTS video captioning: synthesis, training, evaluation, attention dumps"};
    app.require_subcommand(1);

    // Pre-scan for --config so file values land before flag values.
    RunSettings settings;
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            try {
                load_config_file(argv[i + 1], settings);
            } catch (const Error& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 1;
            }
        }
    }
    std::string config_file;
    std::string scheme_name_opt = scheme_name(settings.model.scheme);
    std::string branch_name_opt = branch_name(settings.model.branch);
    std::string summary_opt =
        settings.model.ts_frame_summary == FrameSummary::max ? "max" : "mean";

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic shape-motion corpus");
    std::string synth_out = "corpus";
    SynthSpec spec;
    std::size_t synth_videos = 0;
    synth->add_option("--out", synth_out, "output corpus directory");
    synth->add_option("--seed", spec.rng_seed, "generator seed");
    synth->add_option("--videos", synth_videos,
                      "total videos, split 80/10/10 (overrides --train/--val/--test)");
    synth->add_option("--train", spec.train_videos, "train split size");
    synth->add_option("--val", spec.val_videos, "validation split size");
    synth->add_option("--test", spec.test_videos, "test split size");
    synth->add_option("--rows", spec.grid_rows, "grid rows");
    synth->add_option("--cols", spec.grid_cols, "grid columns");
    synth->add_option("--dim", spec.dim, "feature dimension");
    synth->add_option("--frames", spec.frames, "frames per video");
    synth->add_option("--noise", spec.noise_sigma, "additive noise sigma");

    // train
    auto* trn = app.add_subcommand("train", "train a captioning model");
    std::string train_corpus, train_out = "run";
    trn->add_option("--corpus", train_corpus, "corpus root directory")->required();
    trn->add_option("--out", train_out, "output directory for checkpoints and logs");
    trn->add_option("--config", config_file, "JSON config file (defaults < file < flags)");
    add_model_flags(trn, settings.model, scheme_name_opt, branch_name_opt, summary_opt);
    add_train_flags(trn, settings.train);

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "score a captions file against references");
    std::string eval_caps, eval_refs;
    eval->add_option("--captions", eval_caps, "captions JSONL")->required();
    eval->add_option("--refs", eval_refs, "references JSONL")->required();

    // caption
    auto* cap = app.add_subcommand("caption", "generate captions from a checkpoint");
    std::string cap_ckpt, cap_features, cap_corpus, cap_split = "test", cap_out;
    bool cap_sample = false;
    double cap_temp = 1.0;
    std::uint64_t cap_seed = 0;
    std::size_t cap_max_len = 0;
    cap->add_option("--checkpoint", cap_ckpt, "model checkpoint")->required();
    cap->add_option("--features", cap_features, "single feature file");
    cap->add_option("--corpus", cap_corpus, "corpus root (captions a whole split)");
    cap->add_option("--split", cap_split, "corpus split to caption");
    cap->add_option("--out", cap_out, "output JSONL (stdout when omitted)");
    cap->add_flag("--sample", cap_sample, "sample instead of greedy decoding");
    cap->add_option("--temperature", cap_temp, "sampling temperature");
    cap->add_option("--seed", cap_seed, "sampling seed");
    cap->add_option("--max-len", cap_max_len, "override the generation length cap");

    // dump-attention
    auto* dump = app.add_subcommand("dump-attention",
                                    "emit per-word attention weights for one video");
    std::string dump_ckpt, dump_features, dump_out;
    std::size_t dump_max_len = 0;
    dump->add_option("--checkpoint", dump_ckpt, "model checkpoint")->required();
    dump->add_option("--features", dump_features, "feature file")->required();
    dump->add_option("--out", dump_out, "output JSONL (stdout when omitted)");
    dump->add_option("--max-len", dump_max_len, "override the generation length cap");

    // oracle
    auto* orc = app.add_subcommand("oracle", "convex rank-SVM on a feature file");
    std::string orc_input;
    OracleConfig orc_cfg;
    orc->add_option("--input", orc_input, "feature file")->required();
    orc->add_option("--lambda", orc_cfg.lambda, "hinge weight");
    orc->add_option("--beta", orc_cfg.beta, "ranking margin");
    orc->add_option("--max-iters", orc_cfg.max_iters, "iteration cap");
    orc->add_option("--tolerance", orc_cfg.tolerance, "gradient-norm stopping tolerance");

    // ablate
    auto* abl = app.add_subcommand("ablate", "train every scheme and tabulate scores");
    std::string abl_corpus, abl_out = "ablation";
    std::vector<std::string> abl_branches{"ST", "TS", "STaTS"};
    std::size_t abl_jobs = 1;
    abl->add_option("--corpus", abl_corpus, "corpus root directory")->required();
    abl->add_option("--out", abl_out, "output directory for the CSV");
    abl->add_option("--config", config_file, "JSON config file (defaults < file < flags)");
    abl->add_option("--branches", abl_branches, "branch columns to run")->delimiter(',');
    abl->add_option("--jobs", abl_jobs, "parallel training workers");
    add_model_flags(abl, settings.model, scheme_name_opt, branch_name_opt, summary_opt);
    add_train_flags(abl, settings.train);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        settings.model.scheme = scheme_from_name(scheme_name_opt);
        settings.model.branch = branch_from_name(branch_name_opt);
        if (summary_opt != "mean" && summary_opt != "max") {
            throw ConfigError("--frame-summary must be mean or max");
        }
        settings.model.ts_frame_summary =
            summary_opt == "max" ? FrameSummary::max : FrameSummary::mean;

        if (synth->parsed()) return cmd_synth(synth_out, spec, synth_videos);
        if (trn->parsed()) return cmd_train(train_corpus, train_out, settings);
        if (eval->parsed()) return cmd_evaluate(eval_caps, eval_refs);
        if (cap->parsed()) {
            return cmd_caption(cap_ckpt, cap_features, cap_corpus, cap_split, cap_out,
                               cap_sample, cap_temp, cap_seed, cap_max_len);
        }
        if (dump->parsed()) return cmd_dump_attention(dump_ckpt, dump_features, dump_out,
                                                      dump_max_len);
        if (orc->parsed()) return cmd_oracle(orc_input, orc_cfg);
        if (abl->parsed()) return cmd_ablate(abl_corpus, abl_out, settings, abl_branches,
                                             abl_jobs);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace stats::cli

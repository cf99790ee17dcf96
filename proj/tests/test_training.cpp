#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "stats/data_io.hpp"
#include "stats/errors.hpp"
#include "stats/training.hpp"

using namespace stats;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("stats_train_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

ModelConfig small_config(std::size_t raw_d = 16) {
    ModelConfig cfg;
    cfg.raw_feature_dim = raw_d;
    cfg.feature_dim = 8;
    cfg.attention_dim = 6;
    cfg.fusion_dim = 6;
    cfg.embed_dim = 8;
    cfg.hidden_dim = 12;
    cfg.self_attn_dim = 6;
    cfg.head_proj_dim = 10;
    cfg.max_caption_len = 6;
    cfg.scheme = Scheme::mean_plus_ranked;
    cfg.branch = Branch::stats;
    return cfg;
}

struct SmallCorpus {
    fs::path dir;
    CorpusManifest manifest;
    Vocabulary vocab;
    LoadedCorpus train;
    LoadedCorpus val;
};

SmallCorpus make_small_corpus(const std::string& tag, std::size_t train_n, std::size_t val_n,
                              std::uint64_t seed) {
    SmallCorpus c;
    c.dir = temp_dir(tag);
    SynthSpec spec;
    spec.train_videos = train_n;
    spec.val_videos = val_n;
    spec.rng_seed = seed;
    c.manifest = generate_synthetic_corpus(spec, c.dir);
    c.vocab = build_vocab(c.manifest);
    c.train = load_corpus(c.dir, c.manifest, "train");
    c.val = load_corpus(c.dir, c.manifest, "val");
    return c;
}

}  // namespace

TEST_CASE("teacher forcing ratio formula") {
    CHECK(teacher_forcing_ratio(24.0, 0.0) == 24.0 / 25.0);
    CHECK(teacher_forcing_ratio(24.0, 24.0) == 24.0 / (24.0 + std::exp(1.0)));
    CHECK(teacher_forcing_ratio(24.0, 24.0) == doctest::Approx(0.89826).epsilon(1e-5));
    double prev = 2.0;
    for (double p = 0.0; p <= 200.0; p += 0.5) {
        double r = teacher_forcing_ratio(24.0, p);
        REQUIRE(r < prev);
        prev = r;
    }
    CHECK_THROWS_AS(teacher_forcing_ratio(0.0, 1.0), ParamError);
    CHECK_THROWS_AS(teacher_forcing_ratio(24.0, -1.0), ParamError);
}

TEST_CASE("cross entropy fixtures") {
    SUBCASE("uniform over four effective tokens costs ln 4") {
        Tensor d({5});
        for (int i = 1; i < 5; ++i) d[i] = 0.25;  // PAD carries zero mass
        std::vector<Value> dists{Value::constant(d), Value::constant(d)};
        std::vector<std::size_t> targets{2, 4};
        std::vector<std::uint8_t> mask{1, 1};
        CHECK(cross_entropy_loss(dists, targets, mask).item() ==
              doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("one-hot on the target costs at most the clamp") {
        Tensor d({4});
        d[2] = 1.0;
        std::vector<Value> dists{Value::constant(d)};
        std::vector<std::size_t> targets{2};
        std::vector<std::uint8_t> mask{1};
        CHECK(cross_entropy_loss(dists, targets, mask).item() ==
              doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("PAD positions do not change the loss") {
        Tensor d({4});
        d[1] = 0.5;
        d[2] = 0.5;
        Tensor dummy({4});
        dummy[0] = 1.0;
        std::vector<Value> dists{Value::constant(d), Value::constant(dummy),
                                 Value::constant(dummy)};
        std::vector<std::size_t> targets{1, 0, 0};
        std::vector<std::uint8_t> mask{1, 0, 0};
        std::vector<Value> dists1{Value::constant(d)};
        std::vector<std::size_t> targets1{1};
        std::vector<std::uint8_t> mask1{1};
        CHECK(cross_entropy_loss(dists, targets, mask).item() ==
              cross_entropy_loss(dists1, targets1, mask1).item());
    }
    SUBCASE("all-masked input is a degenerate batch") {
        Tensor d({4});
        d[1] = 1.0;
        std::vector<Value> dists{Value::constant(d)};
        std::vector<std::size_t> targets{1};
        std::vector<std::uint8_t> mask{0};
        CHECK_THROWS_AS(cross_entropy_loss(dists, targets, mask), ContractError);
    }
    SUBCASE("gradient flows through the clamp correctly") {
        Value logits = Value::param(Tensor({4}, {0.1, -0.3, 0.7, 0.0}));
        std::vector<Value> params{logits};
        auto f = [&] {
            Value dist = ad::softmax(logits, 0, 1.0);
            std::vector<Value> dists{dist};
            std::vector<std::size_t> targets{2};
            std::vector<std::uint8_t> mask{1};
            return cross_entropy_loss(dists, targets, mask);
        };
        CHECK(ad::grad_check(f, params, 1e-5, 1e-4).pass);
    }
}

TEST_CASE("rmsprop fixtures") {
    SUBCASE("hand-computed first step") {
        std::vector<std::pair<std::string, Value>> params{
            {"w", Value::param(Tensor::scalar(2.0))}};
        params[0].second.grad_mut()[0] = 1.0;
        OptimizerState opt = OptimizerState::init(params, 0.9, 1e-8);
        rmsprop_step(opt, params, 1e-4);
        CHECK(opt.v[0][0] == doctest::Approx(0.1).epsilon(1e-15));
        double expect_delta = -1e-4 / std::sqrt(0.1 + 1e-8);
        CHECK(params[0].second.val()[0] == doctest::Approx(2.0 + expect_delta).epsilon(1e-12));
        CHECK(expect_delta == doctest::Approx(-3.1623e-4).epsilon(1e-4));
    }
    SUBCASE("zero gradient leaves parameters and decays v") {
        std::vector<std::pair<std::string, Value>> params{
            {"w", Value::param(Tensor::scalar(1.5))}};
        OptimizerState opt = OptimizerState::init(params, 0.9, 1e-8);
        opt.v[0][0] = 0.4;
        rmsprop_step(opt, params, 1e-2);
        CHECK(params[0].second.val()[0] == 1.5);
        CHECK(opt.v[0][0] == doctest::Approx(0.36).epsilon(1e-15));
    }
    SUBCASE("groups update independently") {
        std::vector<std::pair<std::string, Value>> params{
            {"a", Value::param(Tensor::scalar(1.0))},
            {"b", Value::param(Tensor::scalar(1.0))}};
        params[0].second.grad_mut()[0] = 1.0;
        OptimizerState opt = OptimizerState::init(params, 0.9, 1e-8);
        rmsprop_step(opt, params, 1e-3);
        CHECK(params[0].second.val()[0] != 1.0);
        CHECK(params[1].second.val()[0] == 1.0);
        CHECK(opt.v[1][0] == 0.0);
    }
    SUBCASE("non-finite gradients name the parameter group") {
        std::vector<std::pair<std::string, Value>> params{
            {"decoder.head.W1", Value::param(Tensor::scalar(1.0))}};
        params[0].second.grad_mut()[0] = std::numeric_limits<double>::quiet_NaN();
        OptimizerState opt = OptimizerState::init(params, 0.9, 1e-8);
        CHECK_THROWS_WITH_AS(rmsprop_step(opt, params, 1e-3),
                             doctest::Contains("decoder.head.W1"), NumericError);
    }
}

TEST_CASE("a vanishing learning rate bounds every parameter move by lr*|g|/sqrt(eps)") {
    RngStream rng(77);
    std::vector<std::pair<std::string, Value>> params{
        {"a", Value::param(Tensor({6}))}, {"b", Value::param(Tensor({3, 2}))}};
    for (auto& [n, p] : params) {
        rng.fill_uniform(p.val_mut(), -1.0, 1.0);
        rng.fill_uniform(p.grad_mut(), -2.0, 2.0);
    }
    std::vector<Tensor> before;
    for (auto& [n, p] : params) before.push_back(p.val());
    OptimizerState opt = OptimizerState::init(params, 0.9, 1e-8);
    double lr = 1e-9;
    double grad_norm = 0.0;
    for (auto& [n, p] : params) {
        for (std::size_t i = 0; i < p.grad().size(); ++i) {
            grad_norm += p.grad()[i] * p.grad()[i];
        }
    }
    grad_norm = std::sqrt(grad_norm);
    rmsprop_step(opt, params, lr);
    double bound = lr * grad_norm / std::sqrt(1e-8);
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (std::size_t i = 0; i < before[k].size(); ++i) {
            REQUIRE(std::abs(params[k].second.val()[i] - before[k][i]) <= bound);
        }
    }
}

TEST_CASE("gradient clipping bounds the step") {
    std::vector<std::pair<std::string, Value>> params{
        {"a", Value::param(Tensor({3}, {0, 0, 0}))}};
    params[0].second.grad_mut().raw() = {30.0, 40.0, 0.0};
    double pre = clip_global_norm(params, 5.0);
    CHECK(pre == doctest::Approx(50.0));
    double post = 0.0;
    for (double g : params[0].second.grad().raw()) post += g * g;
    CHECK(std::sqrt(post) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("scheduled sampling consumes exactly one draw per decoding step") {
    RngStream init(3);
    ModelConfig cfg = small_config();
    SmallCorpus c = make_small_corpus("ss_audit", 4, 0, 3);
    StatsModel model = StatsModel::init(cfg, c.vocab, init);
    RngStream shuffle(1);
    auto batches = make_batches(c.train, c.vocab, 2, shuffle);
    for (const auto& batch : batches) {
        for (const auto& item : batch.items) {
            RngStream ss(9);
            auto out = teacher_forced_forward(model, item, 0.5, ss);
            CHECK(ss.draw_count() == out.steps);
        }
    }
}

TEST_CASE("total loss gradient equals the sum of component gradients") {
    RngStream init(5);
    ModelConfig cfg = small_config();
    SmallCorpus c = make_small_corpus("linearity", 2, 0, 5);
    StatsModel model = StatsModel::init(cfg, c.vocab, init);
    RngStream shuffle(1);
    auto batches = make_batches(c.train, c.vocab, 2, shuffle);
    const BatchItem& item = batches[0].items[0];

    auto params = model.parameters();
    double alpha = 0.37;

    // Combined backward.
    ad::zero_grads(std::span<Value>(params));
    {
        RngStream ss(2);
        auto tf = teacher_forced_forward(model, item, 1.0, ss);
        std::vector<std::uint8_t> ones(tf.steps, 1);
        Value ce = cross_entropy_loss(tf.dists, tf.targets, ones);
        FeatureSeq fs = model.embed_features(item.features, item.frame_mask);
        Value total = ad::add(ce, ad::scale(model.ranked_loss_value(fs), alpha));
        ad::backward(total);
    }
    std::vector<Tensor> combined;
    for (auto& p : params) combined.push_back(p.grad());

    // Separate backwards.
    ad::zero_grads(std::span<Value>(params));
    {
        RngStream ss(2);
        auto tf = teacher_forced_forward(model, item, 1.0, ss);
        std::vector<std::uint8_t> ones(tf.steps, 1);
        ad::backward(cross_entropy_loss(tf.dists, tf.targets, ones));
        FeatureSeq fs = model.embed_features(item.features, item.frame_mask);
        ad::backward(ad::scale(model.ranked_loss_value(fs), alpha));
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Tensor& g = params[k].grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            REQUIRE(std::abs(g[i] - combined[k][i]) < 1e-10);
        }
    }
}

TEST_CASE("train: empty epochs, determinism, checkpoint bytes") {
    ModelConfig cfg = small_config();
    SmallCorpus c = make_small_corpus("train_det", 6, 2, 11);
    TrainConfig tc;
    tc.epochs = 2;
    tc.ce_epochs_before_rl = 10;
    tc.batch_size = 3;
    tc.learning_rate = 5e-3;
    tc.rng_seed = 42;

    SUBCASE("epochs=0 yields an empty log and no checkpoints") {
        RngStream init(1);
        StatsModel model = StatsModel::init(cfg, c.vocab, init);
        TrainConfig zero = tc;
        zero.epochs = 0;
        fs::path ckpt = temp_dir("ckpt_zero");
        auto result = train(model, c.train, c.val, zero, ckpt);
        CHECK(result.log.empty());
        CHECK(fs::is_empty(ckpt));
    }

    SUBCASE("same seed twice gives identical losses and checkpoint bytes") {
        fs::path d1 = temp_dir("ckpt_a");
        fs::path d2 = temp_dir("ckpt_b");
        RngStream i1(1);
        StatsModel m1 = StatsModel::init(cfg, c.vocab, i1);
        auto r1 = train(m1, c.train, c.val, tc, d1);
        RngStream i2(1);
        StatsModel m2 = StatsModel::init(cfg, c.vocab, i2);
        auto r2 = train(m2, c.train, c.val, tc, d2);
        REQUIRE(r1.log.size() == r2.log.size());
        for (std::size_t e = 0; e < r1.log.size(); ++e) {
            CHECK(r1.log[e].ce_loss == r2.log[e].ce_loss);
            CHECK(r1.log[e].ranked_loss == r2.log[e].ranked_loss);
            CHECK(r1.log[e].bleu4 == r2.log[e].bleu4);
        }
        CHECK(slurp(d1 / "epoch_0.ckpt") == slurp(d2 / "epoch_0.ckpt"));
        CHECK(slurp(d1 / "epoch_1.ckpt") == slurp(d2 / "epoch_1.ckpt"));
    }
}

TEST_CASE("gamma = 1 policy phase is byte-identical to pure CE training") {
    ModelConfig cfg = small_config();
    SmallCorpus c = make_small_corpus("gamma_one", 6, 0, 13);

    TrainConfig ce;
    ce.epochs = 2;
    ce.ce_epochs_before_rl = 10;  // never enters the RL phase
    ce.batch_size = 3;
    ce.learning_rate = 5e-3;
    ce.rng_seed = 7;

    TrainConfig rl = ce;
    rl.ce_epochs_before_rl = 0;  // always the RL phase
    rl.rl_loss_mix = 1.0;        // but fully CE-weighted

    fs::path d1 = temp_dir("gamma_ce");
    fs::path d2 = temp_dir("gamma_rl");
    RngStream i1(3);
    StatsModel m1 = StatsModel::init(cfg, c.vocab, i1);
    train(m1, c.train, {}, ce, d1);
    RngStream i2(3);
    StatsModel m2 = StatsModel::init(cfg, c.vocab, i2);
    train(m2, c.train, {}, rl, d2);

    // Headers differ (configs differ) but every parameter tensor must agree
    // bitwise; compare through the loaded models.
    auto l1 = load_checkpoint(d1 / "epoch_1.ckpt");
    auto l2 = load_checkpoint(d2 / "epoch_1.ckpt");
    auto p1 = l1.model.named_parameters();
    auto p2 = l2.model.named_parameters();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t k = 0; k < p1.size(); ++k) {
        REQUIRE(p1[k].second.val().raw() == p2[k].second.val().raw());
    }
}

TEST_CASE("self-critical step sanity on a frozen toy model") {
    ModelConfig cfg = small_config();
    SmallCorpus c = make_small_corpus("sc_sanity", 3, 0, 17);
    RngStream init(9);

    SUBCASE("zero advantage leaves the RL gradient at exactly zero") {
        StatsModel model = StatsModel::init(cfg, c.vocab, init);
        RngStream shuffle(1);
        auto batches = make_batches(c.train, c.vocab, 3, shuffle);
        TrainConfig tc;
        tc.learning_rate = 1e-3;
        tc.ranked_loss_weight = 0.0;

        RewardFn constant_reward = [](const std::vector<std::string>&,
                                      const std::vector<std::vector<std::string>>&) {
            return 0.5;
        };

        // Gradients with gamma = 0.4 and constant reward (advantage 0).
        auto params = model.named_parameters();
        OptimizerState o1 = OptimizerState::init(params);
        RngStream ss1(4), rl1(5);
        std::vector<Tensor> before;
        for (auto& [n, p] : params) before.push_back(p.val());

        StepStats s = train_step(model, batches[0], 0.4, &constant_reward, tc, 1.0, o1, ss1,
                                 rl1);
        CHECK(s.rl_loss == 0.0);
        std::vector<Tensor> after_mixed;
        for (auto& [n, p] : params) after_mixed.push_back(p.val());

        // Restore and run the pure-CE path scaled by gamma: must match the
        // parameter update exactly (RL contributed nothing).
        for (std::size_t k = 0; k < params.size(); ++k) {
            const_cast<Value&>(params[k].second).val_mut() = before[k];
        }
        OptimizerState o2 = OptimizerState::init(params);
        RngStream ss2(4), rl2(5);
        // gamma-scaled CE: emulate by scaling grads — instead run the same
        // call with a null reward function and gamma-scaled CE... the exact
        // equivalence we assert is with the same gamma but advantage 0.
        RewardFn also_constant = [](const std::vector<std::string>&,
                                    const std::vector<std::vector<std::string>>&) {
            return -2.0;
        };
        train_step(model, batches[0], 0.4, &also_constant, tc, 1.0, o2, ss2, rl2);
        for (std::size_t k = 0; k < params.size(); ++k) {
            REQUIRE(params[k].second.val().raw() == after_mixed[k].raw());
        }
    }

    SUBCASE("positive advantage raises the sampled caption's log-probability") {
        StatsModel model = StatsModel::init(cfg, c.vocab, init);
        const CorpusItem& item = c.train.items[0];

        // Sample a caption, then reward exactly that caption.
        RngStream sampler(31);
        GeneratedCaption sample =
            model.generate(item.features, GenerateMode::sample, 1.0, &sampler);
        if (sample.tokens.empty()) {
            // Degenerate sample; nothing to assert against.
            return;
        }
        std::vector<std::string> sampled_words = model.vocab.decode(sample.tokens);
        RewardFn reward = [&sampled_words](const std::vector<std::string>& cap,
                                           const std::vector<std::vector<std::string>>&) {
            return cap == sampled_words ? 1.0 : 0.0;
        };

        FeatureSeq fs = model.embed_features(item.features);
        double before = model.sequence_log_prob(fs, sample.tokens).item();

        Batch batch;
        BatchItem bi;
        bi.item = &item;
        bi.features = item.features;
        bi.frame_mask.assign(item.features.frames, 1);
        bi.target = model.vocab.encode(item.caption_tokens[0]);
        bi.target.push_back(Vocabulary::EOS);
        bi.token_mask.assign(bi.target.size(), 1);
        batch.items.push_back(std::move(bi));

        TrainConfig tc;
        tc.learning_rate = 1e-3;
        tc.ranked_loss_weight = 0.0;
        auto params = model.named_parameters();
        OptimizerState opt = OptimizerState::init(params);
        RngStream ss(4);
        RngStream rl(31);  // same stream seed: samples the same caption
        StepStats s = train_step(model, batch, 0.0, &reward, tc, 1.0, opt, ss, rl);
        CHECK(s.rl_loss != 0.0);

        FeatureSeq fs2 = model.embed_features(item.features);
        double after = model.sequence_log_prob(fs2, sample.tokens).item();
        CHECK(after > before);
    }
}

TEST_CASE("empty sampled captions are skipped with a count") {
    ModelConfig cfg = small_config();
    SmallCorpus c = make_small_corpus("sc_skip", 2, 0, 19);
    RngStream init(9);
    StatsModel model = StatsModel::init(cfg, c.vocab, init);
    // Rig the head so EOS dominates: every sample is empty.
    Tensor b2({model.vocab.size()});
    b2[Vocabulary::EOS] = 50.0;
    model.decoder.head.W2 =
        Value::param(Tensor({model.vocab.size(), cfg.head_proj_dim}));
    model.decoder.head.b2 = Value::param(std::move(b2));

    RngStream shuffle(1);
    auto batches = make_batches(c.train, c.vocab, 2, shuffle);
    TrainConfig tc;
    tc.ranked_loss_weight = 0.0;
    RewardFn reward = [](const std::vector<std::string>&,
                         const std::vector<std::vector<std::string>>&) { return 1.0; };
    auto params = model.named_parameters();
    OptimizerState opt = OptimizerState::init(params);
    RngStream ss(4), rl(5);
    StepStats s = train_step(model, batches[0], 0.5, &reward, tc, 1.0, opt, ss, rl);
    CHECK(s.rl_skipped == 2);
    CHECK(s.rl_loss == 0.0);
}

TEST_CASE("checkpoint save/load roundtrip") {
    ModelConfig cfg = small_config();
    SmallCorpus c = make_small_corpus("ckpt_rt", 2, 0, 23);
    RngStream init(13);
    StatsModel model = StatsModel::init(cfg, c.vocab, init);
    TrainConfig tc;
    tc.rng_seed = 99;
    fs::path dir = temp_dir("ckpt_roundtrip");
    save_checkpoint(dir / "m.ckpt", model, tc, 5);

    auto loaded = load_checkpoint(dir / "m.ckpt");
    CHECK(loaded.epoch == 5);
    CHECK(loaded.train_cfg.rng_seed == 99);
    CHECK(loaded.model.vocab.tokens == model.vocab.tokens);
    auto pa = model.named_parameters();
    auto pb = loaded.model.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k) {
        CHECK(pa[k].first == pb[k].first);
        REQUIRE(pa[k].second.val().raw() == pb[k].second.val().raw());
    }

    // Generation through the loaded model matches the original exactly.
    auto g1 = model.generate(c.train.items[0].features, GenerateMode::greedy);
    auto g2 = loaded.model.generate(c.train.items[0].features, GenerateMode::greedy);
    CHECK(g1.tokens == g2.tokens);

    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "NOPE";
    bad.close();
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), FormatError);
}

TEST_CASE("CE loss decreases over the first epochs on the synthetic corpus") {
    ModelConfig cfg = small_config();
    SmallCorpus c = make_small_corpus("ce_down", 24, 0, 29);
    TrainConfig tc;
    tc.epochs = 5;
    tc.ce_epochs_before_rl = 100;
    tc.batch_size = 8;
    tc.learning_rate = 0.01;
    tc.rng_seed = 1;
    RngStream init(2);
    StatsModel model = StatsModel::init(cfg, c.vocab, init);
    auto result = train(model, c.train, {}, tc, "");
    REQUIRE(result.log.size() == 5);
    for (std::size_t e = 1; e < result.log.size(); ++e) {
        CHECK(result.log[e].ce_loss < result.log[e - 1].ce_loss);
    }
}

TEST_CASE("train config json roundtrip and validation") {
    TrainConfig tc;
    tc.learning_rate = 0.02;
    tc.reward = "cider";
    TrainConfig back = TrainConfig::from_json(tc.to_json());
    CHECK(back.learning_rate == 0.02);
    CHECK(back.reward == "cider");

    TrainConfig bad;
    bad.rl_loss_mix = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.reward = "meteor";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

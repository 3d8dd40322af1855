#include <cmath>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "mlcl/errors.hpp"
#include "mlcl/pretrain.hpp"
#include "mlcl/synthetic.hpp"

#include "test_util.hpp"

using namespace mlcl;
using testutil::random_tensor;
using testutil::TempDir;

namespace {

EncoderConfig toy_encoder() {
    EncoderConfig cfg;
    cfg.name = "toy";
    cfg.input_size = 16;
    cfg.stem_channels = 4;
    cfg.stem_kernel = 3;
    cfg.stem_pool = false;
    cfg.sections = {{1, 6, 2}};
    return cfg;
}

PretrainConfig toy_pretrain() {
    PretrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.initial_lr = 0.05;
    cfg.seed = 71;
    cfg.contrastive.temperature = 0.5;
    cfg.contrastive.levels.taps = {1, 2};
    cfg.augment.enabled_ops = {true, true, false};
    return cfg;
}

SyntheticConfig toy_corpus() {
    SyntheticConfig cfg;
    cfg.image_size = 16;
    cfg.train_classes = 3;
    cfg.val_classes = 0;
    cfg.test_classes = 2;
    cfg.images_per_class_train = 8;
    cfg.images_per_class_eval = 4;
    cfg.seed = 72;
    return cfg;
}

std::uint64_t state_param_fingerprint(TrainState& state) {
    auto params = state.parameters();
    return nn::param_fingerprint(params);
}

} // namespace

TEST_SUITE("pretrain") {

TEST_CASE("config validation bounds the optimizer settings") {
    const std::size_t taps = 8;
    PretrainConfig cfg;
    CHECK_NOTHROW(cfg.validate(taps));
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(taps), ConfigError);
    cfg = PretrainConfig{};
    cfg.initial_lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(taps), ConfigError);
    cfg = PretrainConfig{};
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(taps), ConfigError);
    cfg = PretrainConfig{};
    cfg.weight_decay = -1e-6;
    CHECK_THROWS_AS(cfg.validate(taps), ConfigError);
    cfg = PretrainConfig{};
    cfg.contrastive.levels.taps = {9};
    CHECK_THROWS_AS(cfg.validate(taps), ConfigError);
    cfg = PretrainConfig{};
    cfg.epochs = 0;
    CHECK_NOTHROW(cfg.validate(taps));
}

TEST_CASE("the cosine schedule decays from the initial rate toward zero") {
    PretrainConfig cfg;
    cfg.initial_lr = 0.05;
    cfg.total_steps = 0;
    CHECK(schedule_lr(cfg, 0) == 0.05);
    CHECK(schedule_lr(cfg, 12345) == 0.05);

    cfg.total_steps = 100;
    CHECK(schedule_lr(cfg, 0) == 0.05);
    CHECK(schedule_lr(cfg, 50) == doctest::Approx(0.025).epsilon(1e-12));
    CHECK(schedule_lr(cfg, 100) <= 0.05 * 1e-15);
    CHECK(schedule_lr(cfg, 100) >= 0.0);
    CHECK(schedule_lr(cfg, 500) == schedule_lr(cfg, 100));
    double prev = schedule_lr(cfg, 0);
    for (std::size_t s = 1; s <= 100; ++s) {
        const double lr = schedule_lr(cfg, s);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("the total loss is the weighted sum of its terms") {
    Tensor logits({3, 4});
    logits.fill(0.1);
    logits.at2(0, 1) = 2.0;
    logits.at2(2, 3) = -1.0;
    std::vector<int> labels{1, 0, 3};
    PretrainConfig cfg;
    cfg.ce_weight = 0.7;
    cfg.mlcl_weight = 2.5;
    const double ce = nn::softmax_cross_entropy_value(logits, labels);
    CHECK(total_loss(logits, labels, 1.3, cfg) ==
          doctest::Approx(0.7 * ce + 2.5 * 1.3).epsilon(1e-12));
    cfg.mlcl_weight = 0.0;
    CHECK(total_loss(logits, labels, 1.3, cfg) == doctest::Approx(0.7 * ce).epsilon(1e-12));
}

TEST_CASE("train state construction is seed-deterministic and validated") {
    PretrainConfig cfg = toy_pretrain();
    TrainState a = make_train_state(toy_encoder(), cfg, 3);
    TrainState b = make_train_state(toy_encoder(), cfg, 3);
    CHECK(state_param_fingerprint(a) == state_param_fingerprint(b));
    CHECK(a.heads.size() == 2);
    CHECK(a.heads[0].level() == 1);
    CHECK(a.heads[1].level() == 2);
    CHECK(a.classifier.out_dim() == 3);

    cfg.seed = 99;
    TrainState c = make_train_state(toy_encoder(), cfg, 3);
    CHECK(state_param_fingerprint(a) != state_param_fingerprint(c));

    CHECK_THROWS_AS(make_train_state(toy_encoder(), cfg, 1), ConfigError);
}

TEST_CASE("one step decomposes the loss and moves the parameters") {
    PretrainConfig cfg = toy_pretrain();
    TrainState state = make_train_state(toy_encoder(), cfg, 3);
    const std::uint64_t before = state_param_fingerprint(state);

    Rng data_rng(73);
    Tensor images = random_tensor({4, 3, 16, 16}, data_rng, 0.0, 1.0);
    std::vector<int> labels{0, 1, 2, 0};
    Rng step_rng(74);
    StepLoss loss = pretrain_step(state, images, labels, cfg, step_rng);

    CHECK(loss.step == 0);
    CHECK(state.step == 1);
    CHECK(loss.lr == cfg.initial_lr);
    CHECK(loss.ce > 0.0);
    CHECK(loss.mlcl >= 0.0);
    REQUIRE(loss.levels.size() == 2);
    CHECK(loss.levels.count(1) == 1);
    CHECK(loss.levels.count(2) == 1);
    CHECK(loss.total == doctest::Approx(cfg.ce_weight * loss.ce + cfg.mlcl_weight * loss.mlcl)
                            .epsilon(1e-12));
    CHECK(loss.mlcl ==
          doctest::Approx(loss.levels.at(1) + loss.levels.at(2)).epsilon(1e-12));
    CHECK(state_param_fingerprint(state) != before);
    REQUIRE(state.history.size() == 1);
    CHECK(state.history[0].total == loss.total);

    Tensor wrong({2, 3, 16, 16});
    Rng rng2(75);
    CHECK_THROWS_AS(pretrain_step(state, wrong, labels, cfg, rng2), ShapeError);
    CHECK_THROWS_AS(pretrain_step(state, images, {0, 1}, cfg, rng2), ShapeError);
}

TEST_CASE("steps are reproducible across freshly built states") {
    PretrainConfig cfg = toy_pretrain();
    Rng data_rng(76);
    Tensor images = random_tensor({4, 3, 16, 16}, data_rng, 0.0, 1.0);
    std::vector<int> labels{1, 2, 0, 1};

    auto run = [&](std::size_t steps) {
        TrainState st = make_train_state(toy_encoder(), cfg, 3);
        for (std::size_t s = 0; s < steps; ++s) {
            Rng step_rng(derive_seed(4242, s));
            pretrain_step(st, images, labels, cfg, step_rng);
        }
        return st;
    };
    TrainState a = run(10);
    TrainState b = run(10);
    CHECK(state_param_fingerprint(a) == state_param_fingerprint(b));
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].total == b.history[i].total);
        CHECK(a.history[i].ce == b.history[i].ce);
        CHECK(a.history[i].mlcl == b.history[i].mlcl);
    }
}

TEST_CASE("non-finite losses are reported with their breakdown") {
    PretrainConfig cfg = toy_pretrain();
    TrainState state = make_train_state(toy_encoder(), cfg, 3);
    Tensor images({4, 3, 16, 16});
    images.fill(std::numeric_limits<double>::quiet_NaN());
    std::vector<int> labels{0, 1, 2, 0};
    Rng rng(77);
    try {
        pretrain_step(state, images, labels, cfg, rng);
        FAIL("expected a NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("ce=") != std::string::npos);
        CHECK(msg.find("mlcl=") != std::string::npos);
    } catch (const Error& e) {
        // A NaN can also surface earlier as a degenerate normalization.
        CHECK(std::string(e.what()).find("error") != std::string::npos);
    }
}

TEST_CASE("checkpoints restore parameters, optimizer state and history bitwise") {
    TempDir dir("pretrain-ckpt");
    PretrainConfig cfg = toy_pretrain();
    TrainState state = make_train_state(toy_encoder(), cfg, 3);
    Rng data_rng(78);
    Tensor images = random_tensor({4, 3, 16, 16}, data_rng, 0.0, 1.0);
    std::vector<int> labels{0, 1, 2, 1};
    for (std::size_t s = 0; s < 3; ++s) {
        Rng step_rng(derive_seed(999, s));
        pretrain_step(state, images, labels, cfg, step_rng);
    }

    const auto path = dir / "state.bin";
    save_train_checkpoint(path, state, "fingerprint-under-test");
    std::string stored_fp;
    TrainState back = load_train_checkpoint(path, &stored_fp);
    CHECK(stored_fp == "fingerprint-under-test");
    CHECK(back.step == 3);
    CHECK(back.num_classes == 3);
    CHECK(state_param_fingerprint(back) == state_param_fingerprint(state));
    REQUIRE(back.history.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.history[i].total == state.history[i].total);
        CHECK(back.history[i].levels == state.history[i].levels);
    }
    REQUIRE(back.opt.state().size() == state.opt.state().size());
    for (const auto& [name, t] : state.opt.state()) {
        REQUIRE(back.opt.state().count(name) == 1);
        CHECK(back.opt.state().at(name).bitwise_equal(t));
    }
    for (auto& [name, t] : state.encoder.state_tensors()) {
        bool matched = false;
        for (auto& [bname, bt] : back.encoder.state_tensors()) {
            if (bname == name) {
                CHECK(bt->bitwise_equal(*t));
                matched = true;
            }
        }
        CHECK(matched);
    }

    // The two states must continue identically.
    Rng ra(555), rb(555);
    StepLoss la = pretrain_step(state, images, labels, cfg, ra);
    StepLoss lb = pretrain_step(back, images, labels, cfg, rb);
    CHECK(la.total == lb.total);
    CHECK(state_param_fingerprint(state) == state_param_fingerprint(back));

    CHECK_THROWS_AS(load_train_checkpoint(dir / "missing.bin"), IoError);
}

TEST_CASE("zero training epochs leave the initialization untouched") {
    PretrainConfig cfg = toy_pretrain();
    cfg.epochs = 0;
    SplitDataset ds = make_synthetic_dataset(toy_corpus());
    TrainState trained = pretrain(cfg, toy_encoder(), ds);
    TrainState fresh = make_train_state(toy_encoder(), cfg, 3);
    CHECK(trained.step == 0);
    CHECK(trained.history.empty());
    CHECK(state_param_fingerprint(trained) == state_param_fingerprint(fresh));
}

TEST_CASE("the full loop is deterministic and resumes to identical bits") {
    TempDir dir("pretrain-loop");
    PretrainConfig cfg = toy_pretrain();
    cfg.epochs = 2;
    SplitDataset ds = make_synthetic_dataset(toy_corpus());

    TrainState a = pretrain(cfg, toy_encoder(), ds);
    TrainState b = pretrain(cfg, toy_encoder(), ds);
    CHECK(a.step == 2 * (24 / 4));
    CHECK(state_param_fingerprint(a) == state_param_fingerprint(b));

    PretrainHooks hooks;
    hooks.checkpoint_path = dir / "ckpt.bin";
    hooks.checkpoint_every = 2;
    std::size_t observed_steps = 0;
    hooks.on_step = [&](const StepLoss&) { ++observed_steps; };
    TrainState c = pretrain(cfg, toy_encoder(), ds, hooks);
    CHECK(observed_steps == c.step);
    CHECK(state_param_fingerprint(c) == state_param_fingerprint(a));

    // A second invocation with the same config resumes from the finished
    // checkpoint and trains no further steps.
    observed_steps = 0;
    TrainState d = pretrain(cfg, toy_encoder(), ds, hooks);
    CHECK(observed_steps == 0);
    CHECK(state_param_fingerprint(d) == state_param_fingerprint(a));

    // A changed config ignores the stale checkpoint.
    PretrainConfig other = cfg;
    other.initial_lr = 0.01;
    TrainState e = pretrain(other, toy_encoder(), ds, hooks);
    CHECK(e.step == a.step);
    CHECK(state_param_fingerprint(e) != state_param_fingerprint(a));
}

TEST_CASE("supervised training reduces the classification loss on a toy corpus") {
    PretrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 6;
    cfg.initial_lr = 0.05;
    cfg.seed = 80;
    cfg.mlcl_weight = 0.0;
    cfg.augment.enabled_ops = {false, false, false};
    SplitDataset ds = make_synthetic_dataset(toy_corpus());

    TrainState state = pretrain(cfg, toy_encoder(), ds);
    REQUIRE(state.history.size() == 10 * (24 / 6));
    const std::size_t n = state.history.size();
    auto mean_ce = [&](std::size_t lo, std::size_t hi) {
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += state.history[i].ce;
        return s / static_cast<double>(hi - lo);
    };
    CHECK(mean_ce(n - n / 4, n) < mean_ce(0, n / 4));
    CHECK(state.history.back().ce < state.history.front().ce);
}

TEST_CASE("infeasible batch sizes are rejected against the dataset") {
    PretrainConfig cfg = toy_pretrain();
    cfg.batch_size = 64;
    SplitDataset ds = make_synthetic_dataset(toy_corpus());
    CHECK_THROWS_AS(pretrain(cfg, toy_encoder(), ds), ConfigError);
    SplitDataset empty;
    empty.image_size = 16;
    CHECK_THROWS_AS(pretrain(toy_pretrain(), toy_encoder(), empty), ConfigError);
}

} // TEST_SUITE

#include <cmath>
#include <vector>

#include <doctest.h>

#include "mlcl/errors.hpp"
#include "mlcl/fewshot.hpp"
#include "mlcl/synthetic.hpp"

#include "test_util.hpp"

using namespace mlcl;
using testutil::random_tensor;
using testutil::TempDir;

namespace {

RelationNetConfig tiny_relnet() {
    RelationNetConfig cfg;
    cfg.in_channels = 3;
    cfg.input_hw = 4;
    cfg.conv_channels = 8;
    cfg.hidden_dim = 8;
    return cfg;
}

RelationNet make_net(const RelationNetConfig& cfg, std::uint64_t seed) {
    RelationNet net(cfg);
    Rng rng(seed);
    net.init(rng);
    return net;
}

ScoreMatrix fill_scores(std::size_t members, std::size_t way, std::size_t queries, Rng& rng) {
    ScoreMatrix m(members, way, queries);
    for (auto& s : m.scores) s = rng.uniform();
    return m;
}

/// Direct mean-then-argmax reference for the ensemble rule.
std::vector<int> reference_argmax(const ScoreMatrix& m) {
    std::vector<int> out;
    for (std::size_t q = 0; q < m.queries; ++q) {
        int best_k = 0;
        double best = -1e300;
        for (std::size_t k = 0; k < m.way; ++k) {
            double mean = 0.0;
            for (std::size_t t = 0; t < m.members; ++t) mean += m.at(t, k, q);
            mean /= static_cast<double>(m.members);
            if (mean > best) {
                best = mean;
                best_k = static_cast<int>(k);
            }
        }
        out.push_back(best_k);
    }
    return out;
}

SyntheticConfig relation_corpus() {
    SyntheticConfig cfg;
    cfg.image_size = 16;
    cfg.train_classes = 5;
    cfg.val_classes = 0;
    cfg.test_classes = 4;
    cfg.images_per_class_train = 6;
    cfg.images_per_class_eval = 6;
    cfg.seed = 81;
    return cfg;
}

EncoderConfig tiny_encoder16() {
    EncoderConfig cfg;
    cfg.name = "tiny16";
    cfg.input_size = 16;
    cfg.stem_channels = 4;
    cfg.stem_kernel = 3;
    cfg.stem_pool = false;
    cfg.sections = {{1, 6, 2}};
    return cfg;
}

} // namespace

TEST_SUITE("fewshot") {

TEST_CASE("relation net config validation") {
    RelationNetConfig cfg = tiny_relnet();
    CHECK_NOTHROW(cfg.validate());
    cfg.in_channels = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_relnet();
    cfg.input_hw = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_relnet();
    cfg.conv_channels = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_relnet();
    cfg.hidden_dim = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("relation scores land strictly inside the unit interval") {
    RelationNet net = make_net(tiny_relnet(), 401);
    net.set_training(false);
    Rng rng(402);
    Tensor pairs = random_tensor({6, 6, 4, 4}, rng);
    Tensor scores = net.forward(pairs, false);
    REQUIRE(scores.shape() == std::vector<std::size_t>{6, 1});
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(scores.at2(i, 0) > 0.0);
        CHECK(scores.at2(i, 0) < 1.0);
    }
    Tensor wrong({2, 5, 4, 4});
    CHECK_THROWS_AS(net.forward(wrong, false), ShapeError);
}

TEST_CASE("relation net gradients pass a finite-difference check") {
    RelationNetConfig cfg = tiny_relnet();
    cfg.conv_channels = 4;
    RelationNet net = make_net(cfg, 403);
    Rng rng(404);
    Tensor x = random_tensor({3, 6, 4, 4}, rng);
    Tensor target({3, 1});
    target[0] = 1.0;
    target[1] = 0.0;
    target[2] = 1.0;

    auto loss = [&] {
        RelationNet probe = net;
        Tensor y = probe.forward(x, false);
        return nn::mse_loss(y, target).value;
    };

    RelationNet live = net;
    Tensor y = live.forward(x, true);
    auto lg = nn::mse_loss(y, target);
    live.backward(lg.grad);

    nn::ParamList value_params = net.parameters();
    nn::ParamList grad_params = live.parameters();
    REQUIRE(value_params.size() == grad_params.size());
    std::vector<double*> slots;
    std::vector<double> analytic;
    for (std::size_t p = 0; p < value_params.size(); ++p) {
        testutil::gather_tensor_slots(*value_params[p].value, *grad_params[p].grad, 4, slots,
                                      analytic);
    }
    CHECK(testutil::max_fd_error(slots, analytic, loss, 1e-5) < 1e-5);
}

TEST_CASE("a zero-weight relation net scores exactly one half") {
    RelationNetConfig cfg = tiny_relnet();
    RelationNet net(cfg);
    nn::ParamList params = net.parameters();
    for (auto& p : params) p.value->fill(0.0);
    net.set_training(false);
    Rng rng(405);
    Tensor pairs = random_tensor({4, 6, 4, 4}, rng);
    Tensor scores = net.forward(pairs, false);
    for (std::size_t i = 0; i < 4; ++i) CHECK(scores.at2(i, 0) == 0.5);
}

TEST_CASE("prototypes are the element-wise mean of their features") {
    Rng rng(406);
    Tensor f1 = random_tensor({2, 3, 3}, rng);
    CHECK(prototype({f1}).bitwise_equal(f1));

    std::vector<Tensor> feats;
    for (double v : {1.0, 2.0, 3.0, 4.0, 5.0}) {
        Tensor t({2, 2, 2});
        t.fill(v);
        feats.push_back(t);
    }
    Tensor proto = prototype(feats);
    for (std::size_t i = 0; i < proto.numel(); ++i) CHECK(proto[i] == doctest::Approx(3.0));

    std::vector<Tensor> perm{feats[3], feats[0], feats[4], feats[2], feats[1]};
    CHECK(prototype(perm).bitwise_equal(proto));

    Tensor other({2, 2, 3});
    CHECK_THROWS_AS(prototype({feats[0], other}), ShapeError);
    CHECK_THROWS_AS(prototype({}), ShapeError);
}

TEST_CASE("relation_score concatenates query-first") {
    RelationNet net = make_net(tiny_relnet(), 407);
    net.set_training(false);
    Rng rng(408);
    Tensor q = random_tensor({3, 4, 4}, rng);
    Tensor p = random_tensor({3, 4, 4}, rng);

    const double qp = relation_score(net, q, p);
    const double pq = relation_score(net, p, q);
    CHECK(qp > 0.0);
    CHECK(qp < 1.0);
    CHECK(qp != pq);

    Tensor pair({1, 6, 4, 4});
    for (std::size_t i = 0; i < q.numel(); ++i) pair[i] = q[i];
    for (std::size_t i = 0; i < p.numel(); ++i) pair[q.numel() + i] = p[i];
    Tensor direct = net.forward(pair, false);
    CHECK(qp == direct.at2(0, 0));
}

TEST_CASE("score matrix indexing is member-class-query") {
    ScoreMatrix m(2, 3, 4);
    m.at(1, 2, 3) = 0.7;
    CHECK(m.scores[(1 * 3 + 2) * 4 + 3] == 0.7);
    CHECK(m.at(1, 2, 3) == 0.7);
    CHECK(m.scores.size() == 24);
}

TEST_CASE("ensemble argmax matches a direct reference on random scores") {
    Rng rng(409);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t t = 1 + rng.uniform_index(4);
        const std::size_t c = 2 + rng.uniform_index(5);
        const std::size_t q = 1 + rng.uniform_index(6);
        ScoreMatrix m = fill_scores(t, c, q, rng);
        CHECK(argmax_mean_scores(m) == reference_argmax(m));
    }
}

TEST_CASE("single-member ensembles reduce to that member's argmax") {
    Rng rng(410);
    ScoreMatrix m = fill_scores(1, 5, 8, rng);
    std::vector<int> got = argmax_mean_scores(m);
    for (std::size_t q = 0; q < 8; ++q) {
        int best = 0;
        for (std::size_t k = 1; k < 5; ++k) {
            if (m.at(0, k, q) > m.at(0, best, q)) best = static_cast<int>(k);
        }
        CHECK(got[q] == best);
    }
}

TEST_CASE("mean-score ties resolve to the lowest class index") {
    ScoreMatrix m(2, 3, 2);
    for (auto& s : m.scores) s = 0.5;
    std::vector<int> got = argmax_mean_scores(m);
    CHECK(got == std::vector<int>{0, 0});

    m.at(0, 1, 0) = 0.9;
    m.at(1, 1, 0) = 0.1;
    m.at(0, 2, 0) = 0.1;
    m.at(1, 2, 0) = 0.9;
    got = argmax_mean_scores(m);
    CHECK(got[0] == 0);
}

TEST_CASE("a hand-scored two-class episode picks the stronger class") {
    ScoreMatrix m(1, 2, 1);
    m.at(0, 0, 0) = 0.2;
    m.at(0, 1, 0) = 0.9;
    CHECK(argmax_mean_scores(m) == std::vector<int>{1});
    m.at(0, 0, 0) = 0.6;
    m.at(0, 1, 0) = 0.1;
    CHECK(argmax_mean_scores(m) == std::vector<int>{0});
}

TEST_CASE("member disagreement is settled by the mean score") {
    ScoreMatrix m(3, 2, 1);
    m.at(0, 0, 0) = 0.9;
    m.at(1, 0, 0) = 0.2;
    m.at(2, 0, 0) = 0.2;
    m.at(0, 1, 0) = 0.4;
    m.at(1, 1, 0) = 0.5;
    m.at(2, 1, 0) = 0.6;
    CHECK(argmax_mean_scores(m) == std::vector<int>{1});
}

TEST_CASE("argmax is invariant to shifting or positively scaling all scores") {
    Rng rng(411);
    ScoreMatrix m = fill_scores(2, 4, 6, rng);
    std::vector<int> base = argmax_mean_scores(m);
    ScoreMatrix shifted = m;
    for (auto& s : shifted.scores) s = 0.25 * s - 3.0;
    CHECK(argmax_mean_scores(shifted) == base);
}

TEST_CASE("relation nets round-trip through checkpoints") {
    TempDir dir("relnet");
    RelationNet net = make_net(tiny_relnet(), 412);
    net.set_training(false);
    Rng rng(413);
    Tensor pairs = random_tensor({2, 6, 4, 4}, rng);
    Tensor scores = net.forward(pairs, false);

    const auto path = dir / "net.bin";
    nlohmann::json extra{{"encoder_id", "demo"}, {"tap", 2}};
    net.save(path, extra);
    nlohmann::json meta;
    RelationNet back = RelationNet::load(path, &meta);
    back.set_training(false);
    CHECK(back.forward(pairs, false).bitwise_equal(scores));
    CHECK(back.config().in_channels == 3);
    CHECK(back.config().input_hw == 4);
    CHECK(meta.at("encoder_id") == "demo");
    CHECK(meta.at("tap") == 2);
    CHECK_THROWS_AS(RelationNet::load(dir / "missing.bin"), IoError);
}

TEST_CASE("training a relation net fits a toy split and freezes the encoder") {
    SplitDataset ds = make_synthetic_dataset(relation_corpus());
    Encoder enc(tiny_encoder16());
    Rng enc_rng(414);
    enc.init(enc_rng);
    enc.set_training(false);
    const std::uint64_t enc_fp = enc.fingerprint();

    RelationTrainConfig tcfg;
    tcfg.episodes = 12;
    tcfg.way = 3;
    tcfg.shot = 1;
    tcfg.queries = 2;
    tcfg.seed = 415;

    RelationNetConfig ncfg;
    ncfg.in_channels = 6;
    ncfg.input_hw = 8;
    ncfg.conv_channels = 8;
    ncfg.hidden_dim = 8;

    std::vector<double> losses;
    RelationNet net = train_relation_net(enc, 2, ds, Split::train, tcfg, ncfg, {},
                                         [&](std::size_t, double l) { losses.push_back(l); });
    CHECK(losses.size() == 12);
    for (double l : losses) {
        CHECK(l >= 0.0);
        CHECK(l <= 1.0);
    }
    CHECK(enc.fingerprint() == enc_fp);

    // Retraining with the same seed reproduces the same network.
    RelationNet again = train_relation_net(enc, 2, ds, Split::train, tcfg, ncfg);
    nn::ParamList p1 = net.parameters();
    nn::ParamList p2 = again.parameters();
    CHECK(nn::param_fingerprint(p1) == nn::param_fingerprint(p2));

    RelationNetConfig wrong = ncfg;
    wrong.input_hw = 4;
    CHECK_THROWS_AS(train_relation_net(enc, 2, ds, Split::train, tcfg, wrong), ShapeError);
    CHECK_THROWS_AS(train_relation_net(enc, 99, ds, Split::train, tcfg, ncfg), ConfigError);
}

TEST_CASE("feature tables match direct episode encodings") {
    SplitDataset ds = make_synthetic_dataset(relation_corpus());
    Encoder enc(tiny_encoder16());
    Rng enc_rng(416);
    enc.init(enc_rng);
    enc.set_training(false);

    TapSpec taps{{1, 2}};
    FeatureTable table(enc, taps, ds, Split::test);

    Rng ep_rng(417);
    Episode ep = sample_episode(ds, Split::test, 3, 1, 2, ep_rng);
    TapMap from_batch = enc.forward_with_taps(ep.support, taps, false);
    for (std::size_t i = 0; i < ep.support_refs.size(); ++i) {
        const auto& [cls, img] = ep.support_refs[i];
        CHECK(batch_slice(from_batch.at(2), i).bitwise_equal(table.get(2, cls, img)));
        CHECK(batch_slice(from_batch.at(1), i).bitwise_equal(table.get(1, cls, img)));
    }
    CHECK_THROWS_AS(table.get(3, 0, 0), Error);
}

TEST_CASE("the cached-feature classifier agrees with direct ensemble scoring") {
    SplitDataset ds = make_synthetic_dataset(relation_corpus());
    Encoder enc(tiny_encoder16());
    Rng enc_rng(418);
    enc.init(enc_rng);
    enc.set_training(false);

    RelationNetConfig ncfg1;
    ncfg1.in_channels = 6;
    ncfg1.input_hw = 8;
    ncfg1.conv_channels = 4;
    RelationNetConfig ncfg2 = ncfg1;
    RelationNet net1 = make_net(ncfg1, 419);
    RelationNet net2 = make_net(ncfg2, 420);
    net1.set_training(false);
    net2.set_training(false);

    Rng ep_rng(421);
    Episode ep = sample_episode(ds, Split::test, 3, 2, 2, ep_rng);

    std::vector<EnsembleMember> members{{&enc, 2, &net1}, {&enc, 2, &net2}};
    EnsemblePrediction direct = ensemble_classify(members, ep);
    REQUIRE(direct.labels.size() == 6);
    CHECK(direct.scores.members == 2);
    CHECK(direct.scores.way == 3);
    CHECK(direct.scores.queries == 6);

    FeatureTable table(enc, TapSpec{{2}}, ds, Split::test);
    RelationEnsembleClassifier cached(table, {{2, &net1}, {2, &net2}});
    std::vector<int> labels = cached.classify(ep);
    CHECK(labels == direct.labels);
    const ScoreMatrix& cs = cached.last_scores();
    REQUIRE(cs.scores.size() == direct.scores.scores.size());
    for (std::size_t i = 0; i < cs.scores.size(); ++i) {
        CHECK(cs.scores[i] == direct.scores.scores[i]);
    }
    CHECK(direct.labels == argmax_mean_scores(direct.scores));
}

TEST_CASE("ensembles of one member behave like that member alone") {
    SplitDataset ds = make_synthetic_dataset(relation_corpus());
    Encoder enc(tiny_encoder16());
    Rng enc_rng(422);
    enc.init(enc_rng);
    enc.set_training(false);

    RelationNetConfig ncfg;
    ncfg.in_channels = 6;
    ncfg.input_hw = 8;
    ncfg.conv_channels = 4;
    RelationNet net = make_net(ncfg, 423);
    net.set_training(false);

    Rng ep_rng(424);
    Episode ep = sample_episode(ds, Split::test, 2, 1, 3, ep_rng);
    EnsemblePrediction one = ensemble_classify({{&enc, 2, &net}}, ep);

    for (std::size_t q = 0; q < 6; ++q) {
        Tensor qf = batch_slice(enc.forward_with_taps(ep.query, TapSpec{{2}}, false).at(2), q);
        std::vector<double> class_scores;
        for (std::size_t k = 0; k < 2; ++k) {
            std::vector<Tensor> feats;
            for (std::size_t n = 0; n < 1; ++n) {
                Tensor sf = batch_slice(
                    enc.forward_with_taps(ep.support, TapSpec{{2}}, false).at(2), k * 1 + n);
                feats.push_back(sf);
            }
            class_scores.push_back(relation_score(net, qf, prototype(feats)));
        }
        CHECK(one.scores.at(0, 0, q) == doctest::Approx(class_scores[0]).epsilon(1e-12));
        CHECK(one.scores.at(0, 1, q) == doctest::Approx(class_scores[1]).epsilon(1e-12));
        const int want = class_scores[1] > class_scores[0] ? 1 : 0;
        CHECK(one.labels[q] == want);
    }
}

} // TEST_SUITE

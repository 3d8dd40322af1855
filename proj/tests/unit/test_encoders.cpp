#include <cmath>
#include <vector>

#include <doctest.h>

#include "mlcl/encoders.hpp"
#include "mlcl/errors.hpp"
#include "mlcl/nn.hpp"
#include "mlcl/rng.hpp"

#include "test_util.hpp"

using namespace mlcl;
using testutil::gather_param_slots;
using testutil::gather_tensor_slots;
using testutil::max_fd_error;
using testutil::random_tensor;
using testutil::TempDir;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.name = "tiny";
    cfg.input_size = 8;
    cfg.stem_channels = 4;
    cfg.stem_kernel = 3;
    cfg.stem_pool = false;
    cfg.sections = {{1, 6, 2}};
    return cfg;
}

Encoder make_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
    Encoder enc(cfg);
    Rng rng(seed);
    enc.init(rng);
    return enc;
}

double dot_all(const TapMap& taps, const std::map<std::size_t, Tensor>& r) {
    double s = 0.0;
    for (const auto& [tap, y] : taps) {
        const Tensor& w = r.at(tap);
        REQUIRE(y.numel() == w.numel());
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    }
    return s;
}

} // namespace

TEST_SUITE("encoders") {

TEST_CASE("preset tap counts and input sizes") {
    CHECK(encoder_preset("resnet18").tap_count() == 16);
    CHECK(encoder_preset("resnet18-v1").tap_count() == 18);
    CHECK(encoder_preset("resnet18-v2").tap_count() == 16);
    CHECK(encoder_preset("small").tap_count() == 8);
    CHECK(encoder_preset("resnet18").conv_layer_count() == 17);
    CHECK(encoder_preset("small").input_size == 32);
    CHECK(encoder_preset("resnet18").input_size == 80);
    CHECK_THROWS_AS(encoder_preset("resnet50"), ConfigError);
    auto names = encoder_preset_names();
    for (const char* n : {"resnet18", "resnet18-v1", "resnet18-v2", "small"}) {
        CHECK(std::find(names.begin(), names.end(), n) != names.end());
    }
}

TEST_CASE("config validation rejects degenerate architectures") {
    EncoderConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.sections.clear();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.stem_kernel = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.input_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.sections[0].stride = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("tap table matches the small preset layout") {
    auto shapes = list_taps(encoder_preset("small"));
    REQUIRE(shapes.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(shapes[i].index == i + 1);
        if (i < 4) {
            CHECK(shapes[i].channels == 16);
            CHECK(shapes[i].height == 16);
            CHECK(shapes[i].width == 16);
        } else {
            CHECK(shapes[i].channels == 32);
            CHECK(shapes[i].height == 8);
            CHECK(shapes[i].width == 8);
        }
    }
}

TEST_CASE("tap table matches the resnet18 preset layout") {
    auto shapes = list_taps(encoder_preset("resnet18"));
    REQUIRE(shapes.size() == 16);
    auto at = [&](std::size_t tap) { return shapes[tap - 1]; };
    CHECK(at(1).channels == 64);
    CHECK(at(1).height == 20);
    CHECK(at(4).channels == 64);
    CHECK(at(4).height == 20);
    CHECK(at(5).channels == 128);
    CHECK(at(5).height == 10);
    CHECK(at(12).channels == 256);
    CHECK(at(12).height == 5);
    CHECK(at(14).channels == 512);
    CHECK(at(14).height == 3);
    CHECK(at(16).channels == 512);
    CHECK(at(16).height == 3);
    for (std::size_t i = 1; i < shapes.size(); ++i) {
        CHECK(shapes[i].height <= shapes[i - 1].height);
        CHECK(shapes[i].width <= shapes[i - 1].width);
    }
}

TEST_CASE("tap table agrees with actual forward shapes") {
    EncoderConfig cfg = tiny_config();
    Encoder enc = make_encoder(cfg, 31);
    enc.set_training(false);
    auto shapes = list_taps(cfg);
    TapSpec all;
    for (const auto& s : shapes) all.taps.push_back(s.index);
    Rng rng(32);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
    TapMap taps = enc.forward_with_taps(x, all, false);
    REQUIRE(taps.size() == shapes.size());
    for (const auto& s : shapes) {
        const Tensor& t = taps.at(s.index);
        CHECK(t.shape() == std::vector<std::size_t>{2, s.channels, s.height, s.width});
    }
}

TEST_CASE("tap spec validation enforces order and range") {
    TapSpec spec;
    CHECK_THROWS_AS(spec.validate(8), ConfigError);
    spec.taps = {2, 2};
    CHECK_THROWS_AS(spec.validate(8), ConfigError);
    spec.taps = {4, 2};
    CHECK_THROWS_AS(spec.validate(8), ConfigError);
    spec.taps = {1, 99};
    CHECK_THROWS_AS(spec.validate(8), ConfigError);
    spec.taps = {0};
    CHECK_THROWS_AS(spec.validate(8), ConfigError);
    spec.taps = {1, 4, 8};
    CHECK_NOTHROW(spec.validate(8));
    CHECK(spec.contains(4));
    CHECK_FALSE(spec.contains(5));
}

TEST_CASE("requesting a subset of taps does not change their values") {
    Encoder enc = make_encoder(encoder_preset("small"), 33);
    enc.set_training(false);
    Rng rng(34);
    Tensor x = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
    TapMap wide = enc.forward_with_taps(x, TapSpec{{2, 4, 6, 8}}, false);
    TapMap narrow = enc.forward_with_taps(x, TapSpec{{4, 8}}, false);
    CHECK(narrow.at(4).bitwise_equal(wide.at(4)));
    CHECK(narrow.at(8).bitwise_equal(wide.at(8)));
    Tensor last = enc.forward(x, false);
    CHECK(last.bitwise_equal(wide.at(8)));
}

TEST_CASE("encoder initialization is seed-deterministic") {
    EncoderConfig cfg = tiny_config();
    Encoder a = make_encoder(cfg, 55);
    Encoder b = make_encoder(cfg, 55);
    Encoder c = make_encoder(cfg, 56);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != c.fingerprint());
}

TEST_CASE("eval mode forwards are repeatable, training mode moves statistics") {
    Encoder enc = make_encoder(tiny_config(), 57);
    Rng rng(58);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);

    enc.set_training(false);
    Tensor y1 = enc.forward(x, false);
    Tensor y2 = enc.forward(x, false);
    CHECK(y1.bitwise_equal(y2));

    auto state_fp = [&] {
        std::uint64_t h = 0;
        for (auto& [name, t] : enc.state_tensors()) {
            h ^= fnv1a64(t->data(), t->numel() * sizeof(double), fnv1a64(name));
        }
        return h;
    };
    const std::uint64_t before = state_fp();
    enc.set_training(true);
    enc.forward(x, false);
    CHECK(state_fp() != before);
}

TEST_CASE("input batches must match the configured resolution") {
    Encoder enc = make_encoder(encoder_preset("small"), 59);
    Tensor wrong({1, 3, 16, 16});
    CHECK_THROWS_AS(enc.forward(wrong, false), ShapeError);
    Tensor chans({1, 1, 32, 32});
    CHECK_THROWS_AS(enc.forward(chans, false), ShapeError);
}

TEST_CASE("encoder gradients pass a finite-difference check at two taps") {
    EncoderConfig cfg = tiny_config();
    Encoder enc = make_encoder(cfg, 60);
    Rng rng(61);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
    TapSpec spec{{1, 2}};

    std::map<std::size_t, Tensor> r;
    r.emplace(1, random_tensor({2, 6, 4, 4}, rng));
    r.emplace(2, random_tensor({2, 6, 4, 4}, rng));

    auto loss = [&] {
        Encoder probe = enc;
        return dot_all(probe.forward_with_taps(x, spec, false), r);
    };

    nn::ParamList params = enc.parameters();
    nn::zero_grads(params);
    Encoder live = enc;
    live.forward_with_taps(x, spec, true);
    TapGradMap grads;
    grads.emplace(1, r.at(1));
    grads.emplace(2, r.at(2));
    Tensor dx = live.backward(grads);
    REQUIRE(dx.same_shape(x));

    nn::ParamList live_params = live.parameters();
    std::vector<double*> slots;
    std::vector<double> analytic;
    REQUIRE(params.size() == live_params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        mlcl::Tensor& value = *params[p].value;
        const mlcl::Tensor& grad = *live_params[p].grad;
        gather_tensor_slots(value, grad, 4, slots, analytic);
    }
    gather_tensor_slots(x, dx, 12, slots, analytic);
    CHECK(max_fd_error(slots, analytic, loss, 1e-5) < 1e-5);
}

TEST_CASE("backward without a retained forward or gradients is rejected") {
    Encoder enc = make_encoder(tiny_config(), 62);
    TapGradMap empty;
    CHECK_THROWS_AS(enc.backward(empty), ShapeError);
    TapGradMap some;
    some.emplace(1, Tensor({2, 6, 4, 4}));
    CHECK_THROWS_AS(enc.backward(some), ShapeError);
}

TEST_CASE("checkpoints round-trip parameters, statistics and config") {
    TempDir dir("encoder-ckpt");
    Encoder enc = make_encoder(tiny_config(), 63);
    Rng rng(64);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
    enc.set_training(true);
    enc.forward(x, false);
    enc.set_training(false);
    Tensor y = enc.forward(x, false);

    const auto path = dir / "enc.bin";
    enc.save(path);
    Encoder back = Encoder::load(path);
    back.set_training(false);
    CHECK(back.fingerprint() == enc.fingerprint());
    CHECK(back.config().input_size == 8);
    CHECK(back.config().sections.size() == 1);
    CHECK(back.forward(x, false).bitwise_equal(y));

    CHECK_THROWS_AS(Encoder::load(dir / "missing.bin"), IoError);
}

TEST_CASE("last_block_taps picks final conv layers of trailing blocks") {
    auto r18 = encoder_preset("resnet18");
    CHECK(last_block_taps(r18, 2) == std::vector<std::size_t>{14, 16});
    CHECK(last_block_taps(r18, 1) == std::vector<std::size_t>{16});
    auto small = encoder_preset("small");
    CHECK(last_block_taps(small, 3) == std::vector<std::size_t>{4, 6, 8});
    CHECK_THROWS_AS(last_block_taps(small, 0), ConfigError);
    CHECK_THROWS_AS(last_block_taps(small, 5), ConfigError);
}

TEST_CASE("encoder config serializes through json") {
    EncoderConfig cfg = encoder_preset("resnet18-v2");
    nlohmann::json j = cfg;
    EncoderConfig back = j.get<EncoderConfig>();
    CHECK(back.name == cfg.name);
    CHECK(back.input_size == cfg.input_size);
    CHECK(back.stem_pool == cfg.stem_pool);
    CHECK(back.sections.size() == cfg.sections.size());
    for (std::size_t i = 0; i < cfg.sections.size(); ++i) {
        CHECK(back.sections[i].blocks == cfg.sections[i].blocks);
        CHECK(back.sections[i].channels == cfg.sections[i].channels);
        CHECK(back.sections[i].stride == cfg.sections[i].stride);
    }
    CHECK(back.tap_count() == cfg.tap_count());
}

} // TEST_SUITE

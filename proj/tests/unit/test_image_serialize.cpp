#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "mlcl/errors.hpp"
#include "mlcl/image.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/serialize.hpp"

#include "test_util.hpp"

using namespace mlcl;
using testutil::random_tensor;
using testutil::TempDir;

namespace {

ImageU8 random_image(std::size_t h, std::size_t w, std::size_t ch, Rng& rng) {
    ImageU8 img;
    img.height = h;
    img.width = w;
    img.channels = ch;
    img.data.resize(h * w * ch);
    for (auto& b : img.data) b = static_cast<std::uint8_t>(rng.uniform_index(256));
    return img;
}

} // namespace

TEST_SUITE("image-serialize") {

TEST_CASE("image/tensor conversions quantize with rounding and clamp") {
    ImageU8 img;
    img.height = 1;
    img.width = 2;
    img.channels = 3;
    img.data = {0, 128, 255, 51, 102, 204};
    Tensor t = image_to_tensor(img);
    REQUIRE(t.shape() == std::vector<std::size_t>{3, 1, 2});
    CHECK(t.at3(0, 0, 0) == doctest::Approx(0.0));
    CHECK(t.at3(1, 0, 0) == doctest::Approx(128.0 / 255.0));
    CHECK(t.at3(2, 0, 1) == doctest::Approx(204.0 / 255.0));

    ImageU8 back = tensor_to_image_u8(t);
    CHECK(back.data == img.data);

    Tensor wild({3, 1, 1});
    wild.at3(0, 0, 0) = -0.4;
    wild.at3(1, 0, 0) = 1.7;
    wild.at3(2, 0, 0) = 0.5;
    ImageU8 clamped = tensor_to_image_u8(wild);
    CHECK(clamped.data[0] == 0);
    CHECK(clamped.data[1] == 255);
    CHECK(clamped.data[2] == 128);
}

TEST_CASE("grayscale images are replicated to three channels") {
    ImageU8 img;
    img.height = 1;
    img.width = 1;
    img.channels = 1;
    img.data = {100};
    Tensor t = image_to_tensor(img);
    REQUIRE(t.shape() == std::vector<std::size_t>{3, 1, 1});
    CHECK(t.at3(0, 0, 0) == t.at3(1, 0, 0));
    CHECK(t.at3(1, 0, 0) == t.at3(2, 0, 0));
}

TEST_CASE("png round-trips rgb and grayscale pixels exactly") {
    TempDir dir("png");
    Rng rng(101);
    for (std::size_t ch : {std::size_t{3}, std::size_t{1}}) {
        ImageU8 img = random_image(6, 9, ch, rng);
        const auto path = dir / ("img" + std::to_string(ch) + ".png");
        write_png(path, img);
        ImageU8 back = read_image(path);
        CHECK(back.height == img.height);
        CHECK(back.width == img.width);
        CHECK(back.channels == img.channels);
        CHECK(back.data == img.data);
    }
}

TEST_CASE("pnm round-trips and rejects malformed input") {
    TempDir dir("pnm");
    Rng rng(102);
    ImageU8 rgb = random_image(4, 5, 3, rng);
    const auto p6 = dir / "img.ppm";
    write_ppm(p6, rgb);
    ImageU8 back = read_image(p6);
    CHECK(back.channels == 3);
    CHECK(back.data == rgb.data);

    ImageU8 gray = random_image(4, 5, 1, rng);
    const auto p5 = dir / "img.pgm";
    write_ppm(p5, gray);
    ImageU8 gback = read_image(p5);
    CHECK(gback.channels == 1);
    CHECK(gback.data == gray.data);

    const auto junk = dir / "junk.ppm";
    std::ofstream(junk) << "P9 nonsense";
    CHECK_THROWS_AS(read_image(junk), IoError);
    CHECK_THROWS_AS(read_image(dir / "missing.png"), IoError);
}

TEST_CASE("same-size bilinear resize is the identity") {
    Rng rng(103);
    Tensor img = random_tensor({3, 7, 5}, rng, 0.0, 1.0);
    Tensor out = resize_bilinear(img, 7, 5);
    CHECK(out.bitwise_equal(img));
}

TEST_CASE("bilinear downsample averages with half-pixel centers") {
    Tensor img({1, 2, 2});
    img.at3(0, 0, 0) = 0.0;
    img.at3(0, 0, 1) = 1.0;
    img.at3(0, 1, 0) = 0.5;
    img.at3(0, 1, 1) = 0.25;
    Tensor out = resize_bilinear(img, 1, 1);
    REQUIRE(out.shape() == std::vector<std::size_t>{1, 1, 1});
    CHECK(out.at3(0, 0, 0) == doctest::Approx((0.0 + 1.0 + 0.5 + 0.25) / 4.0).epsilon(1e-12));

    Tensor row({1, 1, 4});
    row.at3(0, 0, 0) = 0.0;
    row.at3(0, 0, 1) = 1.0;
    row.at3(0, 0, 2) = 2.0;
    row.at3(0, 0, 3) = 3.0;
    Tensor half = resize_bilinear(row, 1, 2);
    CHECK(half.at3(0, 0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(half.at3(0, 0, 1) == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("bilinear upsample interpolates between neighbors") {
    Tensor img({1, 1, 2});
    img.at3(0, 0, 0) = 0.0;
    img.at3(0, 0, 1) = 1.0;
    Tensor out = resize_bilinear(img, 1, 4);
    CHECK(out.at3(0, 0, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(out.at3(0, 0, 1) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(out.at3(0, 0, 2) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(out.at3(0, 0, 3) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(resize_bilinear(img, 0, 3), ShapeError);
}

TEST_CASE("gaussian blur keeps constant images constant and total mass") {
    Tensor img({3, 8, 8});
    img.fill(0.73);
    Tensor out = gaussian_blur(img, 1.2, 5);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        CHECK(out[i] == doctest::Approx(0.73).epsilon(1e-12));
    }

    CHECK_THROWS_AS(gaussian_blur(img, 1.0, 4), ShapeError);
    CHECK_THROWS_AS(gaussian_blur(img, 0.0, 5), NumericError);
}

TEST_CASE("gaussian blur smooths an impulse symmetrically") {
    Tensor img({1, 9, 9});
    img.fill(0.0);
    img.at3(0, 4, 4) = 1.0;
    Tensor out = gaussian_blur(img, 1.0, 5);
    CHECK(out.at3(0, 4, 4) > out.at3(0, 4, 3));
    CHECK(out.at3(0, 4, 3) == doctest::Approx(out.at3(0, 4, 5)).epsilon(1e-12));
    CHECK(out.at3(0, 3, 4) == doctest::Approx(out.at3(0, 5, 4)).epsilon(1e-12));
    CHECK(out.at3(0, 4, 3) > out.at3(0, 4, 2));
    CHECK(out.sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("channel normalization applies per-channel statistics") {
    Tensor img({3, 2, 2});
    img.fill(0.5);
    Tensor out = normalize_channels(img, {0.5, 0.25, 0.0}, {0.5, 0.25, 1.0});
    CHECK(out.at3(0, 0, 0) == doctest::Approx(0.0));
    CHECK(out.at3(1, 0, 0) == doctest::Approx(1.0));
    CHECK(out.at3(2, 0, 0) == doctest::Approx(0.5));

    Tensor batch({2, 3, 2, 2});
    batch.fill(1.0);
    Tensor bout = normalize_channels(batch, {0.0, 0.0, 0.0}, {2.0, 2.0, 2.0});
    CHECK(bout.at4(1, 2, 1, 1) == doctest::Approx(0.5));

    CHECK_THROWS_AS(normalize_channels(img, {0.0, 0.0, 0.0}, {1.0, 0.0, 1.0}), NumericError);
    Tensor bad({2, 2, 2});
    CHECK_THROWS_AS(normalize_channels(bad, {0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}), ShapeError);
}

TEST_CASE("tensor file round-trips tensors, order and metadata") {
    TempDir dir("tfile");
    Rng rng(104);
    TensorFile f;
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor c = random_tensor({1, 2, 2}, rng);
    f.put("model.w", a);
    f.put("model.b", b);
    f.put("stats.running", c);
    f.meta()["kind"] = "unit-test";
    f.meta()["step"] = 17;

    const auto path = dir / "bundle.bin";
    f.save(path);
    TensorFile g = TensorFile::load(path);
    CHECK(g.names() == std::vector<std::string>{"model.w", "model.b", "stats.running"});
    CHECK(g.get("model.w").bitwise_equal(a));
    CHECK(g.get("model.b").bitwise_equal(b));
    CHECK(g.get("stats.running").bitwise_equal(c));
    CHECK(g.get("stats.running").shape() == std::vector<std::size_t>{1, 2, 2});
    CHECK(g.meta()["kind"] == "unit-test");
    CHECK(g.meta()["step"] == 17);
    CHECK(g.has("model.w"));
    CHECK_FALSE(g.has("model.missing"));
}

TEST_CASE("tensor file rejects duplicates, missing names and corrupt files") {
    TempDir dir("tfile-bad");
    TensorFile f;
    f.put("x", Tensor({2}));
    CHECK_THROWS_AS(f.put("x", Tensor({3})), IoError);
    CHECK_THROWS_AS(f.get("y"), IoError);

    const auto path = dir / "bundle.bin";
    f.save(path);
    std::fstream corrupt(path, std::ios::in | std::ios::out | std::ios::binary);
    corrupt.seekp(0);
    corrupt.write("XXXXXXXX", 8);
    corrupt.close();
    CHECK_THROWS_AS(TensorFile::load(path), IoError);
    CHECK_THROWS_AS(TensorFile::load(dir / "missing.bin"), IoError);
}

TEST_CASE("saving twice produces identical bytes") {
    TempDir dir("tfile-det");
    Rng rng(105);
    TensorFile f;
    f.put("a", random_tensor({3, 3}, rng));
    f.meta()["note"] = "stable";
    const auto p1 = dir / "one.bin";
    const auto p2 = dir / "two.bin";
    f.save(p1);
    f.save(p2);
    std::ifstream in1(p1, std::ios::binary), in2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(in1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(s1.substr(0, 8) == "MLCLTNSR");
}

TEST_CASE("atomic text writes replace the destination completely") {
    TempDir dir("atomic");
    const auto path = dir / "note.txt";
    atomic_write_text(path, "first version with some length to it\n");
    atomic_write_text(path, "second\n");
    std::ifstream in(path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(content == "second\n");
    for (const auto& entry : std::filesystem::directory_iterator(dir.path)) {
        CHECK(entry.path().filename() == "note.txt");
    }
}

} // TEST_SUITE

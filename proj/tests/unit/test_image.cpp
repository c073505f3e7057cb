// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "ldae/image.hpp"
#include "ldae/patches.hpp"
#include "support.hpp"

namespace ldae {
namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

// 2 wide, 1 tall, known levels.
ImageD tiny() {
    ImageD img(1, 2);
    const std::uint8_t levels[6] = {0, 127, 128, 255, 1, 254};
    for (int i = 0; i < 6; ++i) {
        img.data()[i] = from_byte(levels[i]);
    }
    return img;
}

TEST(Pixels, ByteMappingRoundTripsEveryLevel) {
    for (int v = 0; v < 256; ++v) {
        EXPECT_EQ(to_byte(from_byte(static_cast<std::uint8_t>(v))), v);
    }
    EXPECT_EQ(to_byte(-3.0), 0);
    EXPECT_EQ(to_byte(7.0), 255);
    EXPECT_EQ(from_byte(0), -1.0);
    EXPECT_EQ(from_byte(255), 1.0);
}

TEST(Ppm, EncodesKnownBytes) {
    std::vector<std::uint8_t> expected = bytes_of("P6\n2 1\n255\n");
    for (std::uint8_t b : {0, 127, 128, 255, 1, 254}) {
        expected.push_back(b);
    }
    EXPECT_EQ(encode_ppm(tiny()), expected);
}

TEST(Ppm, GoldenFileIsBitExact) {
    const std::filesystem::path golden = std::filesystem::path(LDAE_GOLDEN_DIR) / "gradient_4x3.ppm";
    // the golden image: r = 60 c + 10, g = 80 r, b = 255 - 20 (r + c)
    ImageD img(3, 4);
    for (Index r = 0; r < 3; ++r) {
        for (Index c = 0; c < 4; ++c) {
            img(r, c, 0) = from_byte(static_cast<std::uint8_t>(60 * c + 10));
            img(r, c, 1) = from_byte(static_cast<std::uint8_t>(80 * r));
            img(r, c, 2) = from_byte(static_cast<std::uint8_t>(255 - 20 * (r + c)));
        }
    }
    const auto file = read_file_bytes(golden);
    EXPECT_EQ(encode_ppm(img), file);
    EXPECT_EQ(read_ppm(golden), img);
}

TEST(Ppm, WriteReadIsBitExact) {
    testing::TempDir dir("ppm");
    Rng rng(3);
    ImageD img(7, 5);
    for (Index i = 0; i < img.data().size(); ++i) {
        img.data()[i] = from_byte(static_cast<std::uint8_t>(rng.uniform_int(0, 255)));
    }
    write_ppm(img, dir.path() / "a.ppm");
    const ImageD back = read_ppm(dir.path() / "a.ppm");
    EXPECT_EQ(back, img);
    write_ppm(back, dir.path() / "b.ppm");
    EXPECT_EQ(read_file_bytes(dir.path() / "a.ppm"), read_file_bytes(dir.path() / "b.ppm"));
    // no temporary left behind
    int files = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) {
        ++files;
    }
    EXPECT_EQ(files, 2);
}

TEST(Ppm, ParsesCommentsAndWhitespace) {
    auto bytes = bytes_of("P6 # comment\n2\t1 # another\n255\n");
    for (std::uint8_t b : {0, 127, 128, 255, 1, 254}) {
        bytes.push_back(b);
    }
    EXPECT_EQ(decode_ppm(bytes), tiny());
}

TEST(Ppm, RejectsMalformedInput) {
    auto good = encode_ppm(tiny());
    auto truncated = good;
    truncated.pop_back();
    try {
        decode_ppm(truncated, "short.ppm");
        FAIL() << "truncated file accepted";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("short.ppm"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    }
    EXPECT_THROW(decode_ppm(bytes_of("P3\n1 1\n255\n1 2 3")), std::runtime_error);
    EXPECT_THROW(decode_ppm(bytes_of("P6\n1 1\n65535\n123456")), std::runtime_error);
    EXPECT_THROW(decode_ppm(bytes_of("P6\n1\n")), std::runtime_error);
    EXPECT_THROW(decode_ppm(bytes_of("")), std::runtime_error);
    EXPECT_THROW(read_ppm("/nonexistent/x.ppm"), std::runtime_error);
}

TEST(Ppm, ClampsOutOfRangeValues) {
    ImageD img(1, 1);
    img(0, 0, 0) = -5.0;
    img(0, 0, 1) = 5.0;
    img(0, 0, 2) = 0.0;
    const auto b = encode_ppm(img);
    EXPECT_EQ(b[b.size() - 3], 0);
    EXPECT_EQ(b[b.size() - 2], 255);
    EXPECT_EQ(b[b.size() - 1], 128); // lround(127.5)
}

TEST(Patches, RoundTripAndLayout) {
    const auto imgs = testing::random_images(1, 8, 2);
    const ImageD& img = imgs[0];
    const MatrixX<double> p = extract_patches(img, 4);
    ASSERT_EQ(p.rows(), 4);
    ASSERT_EQ(p.cols(), 48);
    // token 1 is the top-right patch; entry (r, c, ch) at (r * 4 + c) * 3 + ch
    EXPECT_EQ(p(1, (2 * 4 + 3) * 3 + 1), img(2, 7, 1));
    EXPECT_EQ(p(2, 0), img(4, 0, 0));
    EXPECT_EQ(assemble_patches(p, 8, 8, 4), img);
    EXPECT_THROW(extract_patches(img, 3), std::invalid_argument);
    EXPECT_THROW(assemble_patches(p, 8, 4, 4), std::invalid_argument);
}

TEST(Images, FlipAndPsnr) {
    const auto imgs = testing::random_images(1, 6, 4);
    const ImageD f = flip_horizontal(imgs[0]);
    EXPECT_EQ(f(2, 0, 1), imgs[0](2, 5, 1));
    EXPECT_EQ(flip_horizontal(f), imgs[0]);
    ImageD shifted = imgs[0];
    shifted.data().array() += 0.1; // mse 0.01 -> 10 log10(4 / 0.01)
    EXPECT_NEAR(psnr(imgs[0], shifted), 10.0 * std::log10(400.0), 1e-9);
    EXPECT_TRUE(std::isinf(psnr(imgs[0], imgs[0])));
    EXPECT_THROW(psnr(imgs[0], ImageD(3, 3)), std::invalid_argument);
}

} // namespace
} // namespace ldae

#include "doctest.h"

#include <fstream>

#include "adf/binary_io.hpp"
#include "adf/datapipe.hpp"
#include "adf/errors.hpp"
#include "test_support.hpp"

using namespace adf;
using namespace adf::testing;
namespace fs = std::filesystem;

namespace {

void write_bytes(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string message_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("PPM and PGM decoding") {
    const auto dir = temp_dir("ppm");
    std::string p6 = "P6\n# a comment\n2 2\n255\n";
    const unsigned char px[] = {255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30};
    p6.append(reinterpret_cast<const char*>(px), sizeof px);
    write_bytes(dir / "a.ppm", p6);
    const Sample s = decode_image(dir / "a.ppm");
    CHECK(s.id == "a");
    CHECK(s.image.shape() == Shape{3, 2, 2});
    CHECK(s.image.at(0, 0, 0) == 1.0f);
    CHECK(s.image.at(1, 0, 0) == 0.0f);
    CHECK(s.image.at(1, 0, 1) == 1.0f);
    CHECK(s.image.at(2, 1, 0) == 1.0f);
    CHECK(s.image.at(0, 1, 1) == 10.0f / 255.0f);
    CHECK(s.image.at(2, 1, 1) == 30.0f / 255.0f);

    std::string p5 = "P5 3 1 255\n";
    p5 += std::string("\x00\x80\xff", 3);
    write_bytes(dir / "g.pgm", p5);
    const Sample g = decode_image(dir / "g.pgm");
    CHECK(g.image.shape() == Shape{3, 1, 3});
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(g.image.at(c, 0, 0) == 0.0f);
        CHECK(g.image.at(c, 0, 1) == 128.0f / 255.0f);
        CHECK(g.image.at(c, 0, 2) == 1.0f);
    }

    SUBCASE("errors") {
        write_bytes(dir / "bad.ppm", "P3\n2 2\n255\n");
        CHECK_THROWS_AS(decode_image(dir / "bad.ppm"), FormatError);
        write_bytes(dir / "max.ppm", "P6\n1 1\n65535\n" + std::string(6, '\0'));
        CHECK(message_of([&] { decode_image(dir / "max.ppm"); }).find("maxval") != std::string::npos);
        write_bytes(dir / "short.ppm", p6.substr(0, p6.size() - 1));
        CHECK_THROWS_AS(decode_image(dir / "short.ppm"), FormatError);
        write_bytes(dir / "head.ppm", "P6\n2");
        CHECK_THROWS_AS(decode_image(dir / "head.ppm"), FormatError);
        CHECK_THROWS_AS(decode_image(dir / "missing.ppm"), IoError);
        write_bytes(dir / "x.png", "whatever");
        CHECK_THROWS_AS(decode_image(dir / "x.png"), FormatError);
    }
}

TEST_CASE("PPM encode/decode round trip is byte exact") {
    Rng rng(41);
    const auto dir = temp_dir("ppm_rt");
    for (int trial = 0; trial < 5; ++trial) {
        Tensor img({3, 7, 9});
        for (auto& v : img.values()) v = static_cast<float>(rng.below(256)) / 255.0f;
        write_ppm(img, dir / "r.ppm");
        const Tensor back = decode_image(dir / "r.ppm").image;
        CHECK(bitwise_equal(back, img));
        CHECK(encode_ppm(back) == read_file_bytes(dir / "r.ppm"));
    }
    // out-of-range values are clamped on encode
    const Tensor wild({3, 1, 1}, std::vector<float>{-2.0f, 0.5f, 7.0f});
    const auto bytes = encode_ppm(wild);
    CHECK(bytes[bytes.size() - 3] == 0);
    CHECK(bytes[bytes.size() - 2] == 128);
    CHECK(bytes[bytes.size() - 1] == 255);
}

TEST_CASE("ADTN tensor files") {
    Rng rng(42);
    const auto dir = temp_dir("adtn");
    const Tensor t = random_tensor({3, 4, 5}, rng, -100, 100);
    write_tensor(t, dir / "t.adtn");
    CHECK(bitwise_equal(read_tensor(dir / "t.adtn"), t));

    // hand-built header: magic, version, dtype, ndim=1, dim=2, two floats
    const std::string raw = read_all(dir / "t.adtn");
    CHECK(raw.substr(0, 4) == "ADTN");
    CHECK(raw.size() == 4 + 1 + 1 + 4 + 3 * 4 + 60 * 4);

    write_bytes(dir / "magic.adtn", "ADTX" + raw.substr(4));
    CHECK_THROWS_AS(read_tensor(dir / "magic.adtn"), FormatError);

    write_bytes(dir / "short.adtn", raw.substr(0, raw.size() - 4));
    const std::string msg = message_of([&] { read_tensor(dir / "short.adtn"); });
    CHECK(msg.find("60") != std::string::npos);
    CHECK(msg.find("236") != std::string::npos);

    SUBCASE("image tensors") {
        Tensor gray = random_tensor({6, 5}, rng, 0, 1);
        write_tensor(gray, dir / "g.adtn");
        const Sample s = decode_image(dir / "g.adtn");
        CHECK(s.image.shape() == Shape{3, 6, 5});
        CHECK(s.image.at(2, 3, 4) == gray.at(3, 4));
        write_tensor(random_tensor({3, 4, 4}, rng, 0.5, 2.0), dir / "hot.adtn");
        CHECK_THROWS_AS(decode_image(dir / "hot.adtn"), FormatError);
        write_tensor(random_tensor({2, 4, 4}, rng, 0, 1), dir / "two.adtn");
        CHECK_THROWS_AS(decode_image(dir / "two.adtn"), FormatError);
    }
}

TEST_CASE("dataset layout") {
    const auto root = temp_dir("layout");
    const fs::path cat = root / "widget";
    Rng rng(43);
    Tensor img = random_tensor({3, 4, 4}, rng, 0, 1);
    CHECK_THROWS_AS(load_dataset(root, "widget"), LayoutError);
    CHECK(message_of([&] { load_dataset(root, "widget"); }).find((cat / "train" / "good").string()) != std::string::npos);

    fs::create_directories(cat / "train" / "good");
    fs::create_directories(cat / "test" / "good");
    fs::create_directories(cat / "test" / "crack");
    for (const char* n : {"b.ppm", "a.ppm", "c.ppm"}) write_ppm(img, cat / "train" / "good" / n);
    write_bytes(cat / "train" / "good" / "notes.txt", "ignored");
    CHECK_THROWS_AS(load_dataset(root, "widget"), LayoutError);  // empty test

    for (const char* n : {"10.ppm", "02.ppm"}) write_ppm(img, cat / "test" / "good" / n);
    write_ppm(img, cat / "test" / "crack" / "x.ppm");
    write_tensor(img, cat / "test" / "crack" / "y.adtn");
    const DatasetLayout d = load_dataset(root, "widget");
    CHECK(d.train_flawless.size() == 3);
    CHECK(d.test_flawless.size() == 2);
    CHECK(d.test_anomalous.size() == 2);
    CHECK(d.train_flawless[0].filename() == "a.ppm");
    CHECK(d.train_flawless[2].filename() == "c.ppm");
    CHECK(d.test_flawless[0].filename() == "02.ppm");
    CHECK(d.test_anomalous[0].anomaly_type == "crack");

    const auto test = d.load_test();
    REQUIRE(test.size() == 4);
    CHECK(test[0].id == "crack/x");
    CHECK(test[0].label == Label::anomalous);
    CHECK(test[0].anomaly_type == std::optional<std::string>("crack"));
    CHECK(test[2].id == "good/02");
    CHECK(test[2].label == Label::flawless);
    CHECK_FALSE(test[2].anomaly_type.has_value());
}

TEST_CASE("synthetic dataset") {
    const auto a = temp_dir("synth_a"), b = temp_dir("synth_b");
    const DatasetLayout da = synth_dataset(a, 6, 3, 5, 7);
    synth_dataset(b, 6, 3, 5, 7);
    CHECK(da.train_flawless.size() == 6);
    CHECK(da.test_flawless.size() == 3);
    CHECK(da.test_anomalous.size() == 5);

    SUBCASE("same seed gives byte-identical trees") {
        std::vector<std::string> files;
        for (const auto& e : fs::recursive_directory_iterator(a))
            if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a).string());
        std::sort(files.begin(), files.end());
        CHECK(files.size() == 14);
        for (const auto& f : files) CHECK_MESSAGE(read_all(a / f) == read_all(b / f), f);
        const auto c = temp_dir("synth_c");
        synth_dataset(c, 6, 3, 5, 8);
        CHECK(read_all(a / "synthetic/train/good/000.ppm") != read_all(c / "synthetic/train/good/000.ppm"));
    }

    SUBCASE("labels follow the folders") {
        std::size_t scratch = 0, blob = 0;
        for (const auto& s : da.load_test()) {
            if (s.label == Label::flawless) {
                CHECK(s.id.rfind("good/", 0) == 0);
            } else {
                scratch += *s.anomaly_type == "scratch";
                blob += *s.anomaly_type == "blob";
            }
        }
        CHECK(scratch == 3);
        CHECK(blob == 2);
    }

    SUBCASE("defects are visible and confined to the mask") {
        for (std::size_t i = 0; i < 20; ++i) {
            const SynthImage s = synth_image(7, SynthSplit::test_defect, i);
            const std::size_t hw = synth_size * synth_size;
            std::size_t changed = 0;
            for (std::size_t p = 0; p < hw; ++p) {
                float d = 0.0f;
                for (std::size_t c = 0; c < 3; ++c) d = std::max(d, std::abs(s.image[c * hw + p] - s.base[c * hw + p]));
                if (d >= 0.1f) ++changed;
                if (!s.mask[p]) {
                    for (std::size_t c = 0; c < 3; ++c) CHECK(s.image[c * hw + p] == s.base[c * hw + p]);
                }
            }
            CHECK(changed >= 10);
            CHECK(s.defect_type == (i % 2 == 0 ? "scratch" : "blob"));
        }
        // the regenerated image is what was written
        const Tensor written = decode_image(a / "synthetic/test/blob/001.ppm").image;
        CHECK(bitwise_equal(written, synth_image(7, SynthSplit::test_defect, 1).image));
    }

    SUBCASE("pixel values and statistics") {
        for (const auto& s : da.load_train()) {
            CHECK(s.image.shape() == Shape{3, 64, 64});
            double mean = 0.0;
            for (float v : s.image.values()) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
                mean += v;
            }
            mean /= static_cast<double>(s.image.size());
            CHECK(mean > 0.3);
            CHECK(mean < 0.6);
        }
    }

    CHECK_THROWS_AS(synth_dataset(a, 0, 1, 1, 1), ConfigError);
    write_bytes(a / "file", "x");
    CHECK_THROWS_AS(synth_dataset(a / "file", 1, 1, 1, 1), IoError);
}

TEST_CASE("synthetic file names") {
    CHECK(synth_file_name(7, 200) == "007.ppm");
    CHECK(synth_file_name(12, 5000) == "0012.ppm");
}

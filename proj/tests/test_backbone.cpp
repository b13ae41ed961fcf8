#include "doctest.h"

#include <fstream>

#include "adf/backbone.hpp"
#include "adf/errors.hpp"
#include "test_support.hpp"

using namespace adf;
using namespace adf::testing;

namespace {

BackboneSpec small_spec(AttentionKind kind, std::vector<std::size_t> scales = {12, 8}) {
    BackboneSpec spec;
    spec.scales = std::move(scales);
    spec.top_channels = 4;
    spec.reduction_ratio = 2;
    spec.spatial_kernel = 3;
    spec.stages.push_back(StageSpec{ConvSpec{4, 3, 3, 3, 1, 1}, true, kind});
    spec.stages.push_back(StageSpec{ConvSpec{4, 4, 3, 3, 1, 1}, false, kind});
    return spec;
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

TEST_CASE("standard spec") {
    const BackboneSpec spec = BackboneSpec::standard(AttentionKind::se);
    CHECK_NOTHROW(spec.validate());
    CHECK(spec.feature_dim() == 384);
    CHECK(spec.stages.size() == 5);
    CHECK(spec.reduction_for(32) == 16);
    CHECK(spec.reduction_for(8) == 8);

    const BackboneSpec small = BackboneSpec::standard(AttentionKind::none, {64, 32, 16});
    CHECK_NOTHROW(small.validate());
    CHECK(small.feature_dim() == 384);

    BackboneSpec bad = spec;
    bad.scales = {64, 128};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.stages[2].conv.in_channels = 50;
    CHECK(message_of([&] { bad.validate(); }).find("stage3") != std::string::npos);
    bad = spec;
    bad.scales = {256, 4};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("plain parameter count") {
    const Backbone bb = Backbone::build(BackboneSpec::standard(AttentionKind::none, {64, 32, 16}), 1);
    const std::size_t ch[] = {3, 32, 48, 64, 96, 128}, k[] = {5, 3, 3, 3, 3};
    std::size_t expected = 0;
    for (int i = 0; i < 5; ++i) expected += ch[i + 1] * ch[i] * k[i] * k[i] + ch[i + 1];
    CHECK(bb.parameter_count() == expected);

    const Backbone se = Backbone::build(BackboneSpec::standard(AttentionKind::se, {64, 32, 16}), 1);
    std::size_t extra = 0;
    for (int i = 1; i < 6; ++i) {
        const std::size_t hidden = ch[i] / (ch[i] < 16 ? ch[i] : 16);
        extra += 2 * hidden * ch[i] + hidden + ch[i];
    }
    CHECK(se.parameter_count() == expected + extra);
}

TEST_CASE("feature extraction is deterministic and seeded") {
    Rng rng(31);
    const BackboneSpec spec = BackboneSpec::standard(AttentionKind::cbam, {32, 16});
    const Tensor img = random_tensor({3, 40, 40}, rng, 0, 1);
    const Backbone a = Backbone::build(spec, 5), b = Backbone::build(spec, 5), c = Backbone::build(spec, 6);
    const FeatureVector fa = a.extract_features(img);
    CHECK(fa.size() == 256);
    CHECK(bitwise_equal(fa.values, b.extract_features(img).values));
    CHECK_FALSE(bitwise_equal(fa.values, c.extract_features(img).values));
    CHECK(fa.values.all_finite());
}

TEST_CASE("input validation") {
    const Backbone bb = Backbone::build(small_spec(AttentionKind::none), 1);
    Rng rng(32);
    CHECK_THROWS_AS(bb.extract_features(random_tensor({1, 12, 12}, rng)), InputError);
    CHECK_THROWS_AS(bb.extract_features(random_tensor({3, 10, 12}, rng)), InputError);
    CHECK_NOTHROW(bb.extract_features(random_tensor({3, 12, 12}, rng)));
}

TEST_CASE("matches the straight-loop reference") {
    Rng rng(33);
    for (AttentionKind kind : {AttentionKind::none, AttentionKind::se, AttentionKind::cbam}) {
        CAPTURE(to_string(kind));
        Backbone bb = Backbone::build(small_spec(kind, {16, 10, 7}), 2);
        randomize_backbone(bb, rng);
        for (int trial = 0; trial < 5; ++trial) {
            const Tensor img = random_tensor({3, 20, 18}, rng, 0, 1);
            const FeatureVector f = bb.extract_features(img);
            const auto ref = reference_features(bb, img);
            REQUIRE(f.size() == ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(f.values[i] - ref[i]) <= 1e-5 * std::max(1.0, std::abs(ref[i])));
        }
    }
}

TEST_CASE("saturated gates reduce to the plain backbone") {
    Rng rng(34);
    const std::vector<std::size_t> scales{32, 16};
    const Backbone plain = Backbone::build(BackboneSpec::standard(AttentionKind::none, scales), 9);
    for (AttentionKind kind : {AttentionKind::se, AttentionKind::cbam}) {
        CAPTURE(to_string(kind));
        Backbone gated = Backbone::build(BackboneSpec::standard(kind, scales), 9);
        for (std::size_t s = 0; s < gated.stage_count(); ++s) {
            auto& st = gated.stages()[s];
            st.kernel = plain.stages()[s].kernel;
            st.bias = plain.stages()[s].bias;
            if (st.se) {
                st.se->w2.fill(0.0f);
                st.se->b2.fill(40.0f);
            }
            if (st.cbam) {
                st.cbam->w2.fill(0.0f);
                st.cbam->b2.fill(40.0f);
                st.cbam->spatial_kernel.fill(0.0f);
                st.cbam->spatial_bias.fill(40.0f);
            }
        }
        for (int trial = 0; trial < 3; ++trial) {
            const Tensor img = random_tensor({3, 32, 32}, rng, 0, 1);
            CHECK(max_abs_diff(gated.extract_features(img).values, plain.extract_features(img).values) <= 1e-5f);
        }
    }
}

TEST_CASE("backward matches central differences") {
    Rng rng(35);
    for (AttentionKind kind : {AttentionKind::none, AttentionKind::se, AttentionKind::cbam}) {
        CAPTURE(to_string(kind));
        Backbone bb = Backbone::build(small_spec(kind), 3);
        randomize_backbone(bb, rng);
        const Tensor img = random_tensor({3, 12, 12}, rng, 0, 1);
        const Tensor w = random_tensor({8}, rng);

        Backbone::Cache cache;
        bb.forward(img, &cache);
        Backbone grads = bb.zeros_like();
        bb.backward(cache, w, grads);
        std::vector<const Tensor*> analytic;
        grads.for_each_param([&](const std::string&, const Tensor& t) { analytic.push_back(&t); });

        auto loss = [&] {
            const auto f = reference_features(bb, img);
            double acc = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) acc += f[i] * w[i];
            return acc;
        };
        std::size_t idx = 0;
        bb.for_each_param([&](const std::string& name, Tensor& t) {
            const GradCheck r = compare_gradients(*analytic[idx++], numeric_gradient(t, loss, 1e-4), 1e-3);
            CHECK_MESSAGE(r.ok(1e-2), name, " worst ", r.worst, " a=", r.analytic, " n=", r.numeric);
        });

        SUBCASE("skip_convs leaves conv gradients at zero") {
            Backbone g2 = bb.zeros_like();
            bb.backward(cache, w, g2, true);
            for (const auto& st : g2.stages()) {
                for (float v : st.kernel.values()) CHECK(v == 0.0f);
                for (float v : st.bias.values()) CHECK(v == 0.0f);
            }
            if (kind != AttentionKind::none) {
                const bool same = g2.stages()[1].se.has_value()
                                      ? bitwise_equal(g2.stages()[1].se->w1, grads.stages()[1].se->w1)
                                      : bitwise_equal(g2.stages()[1].cbam->w1, grads.stages()[1].cbam->w1);
                CHECK(same);
            }
        }
    }
}

TEST_CASE("stage output gradient") {
    Rng rng(36);
    Backbone bb = Backbone::build(small_spec(AttentionKind::se), 3);
    randomize_backbone(bb, rng);
    const Tensor img = random_tensor({3, 12, 12}, rng, 0, 1);
    const Tensor w = random_tensor({8}, rng);
    Backbone::Cache cache;
    bb.forward(img, &cache);

    // Top stage: the global average spreads each feature gradient evenly.
    const Tensor& top = Backbone::stage_output(cache, 0, 1);
    const Tensor g = bb.stage_output_gradient(cache, w, 0, 1);
    CHECK(g.shape() == top.shape());
    const double hw = static_cast<double>(top.dim(1) * top.dim(2));
    for (std::size_t c = 0; c < 4; ++c) CHECK(g.at(c, 0, 0) == doctest::Approx(w[c] / hw));

    // Lower stage: chain through stage 2 via finite differences on its input.
    const Tensor& mid = Backbone::stage_output(cache, 1, 0);
    const Tensor gm = bb.stage_output_gradient(cache, w, 1, 0);
    CHECK(gm.shape() == mid.shape());
    CHECK(gm.all_finite());
    CHECK_THROWS_AS(bb.stage_output_gradient(cache, w, 2, 0), ConfigError);
}

TEST_CASE("weights round trip") {
    Rng rng(37);
    const auto dir = temp_dir("backbone_weights");
    const BackboneSpec spec = BackboneSpec::standard(AttentionKind::cbam, {32, 16});
    Backbone a = Backbone::build(spec, 11);
    randomize_backbone(a, rng, 0.2);
    a.export_weights(dir / "a.adwt");

    Backbone b = Backbone::build(spec, 12);
    b.import_weights(dir / "a.adwt");
    const Tensor img = random_tensor({3, 32, 32}, rng, 0, 1);
    CHECK(bitwise_equal(a.extract_features(img).values, b.extract_features(img).values));

    SUBCASE("truncated file leaves the model unchanged") {
        std::ifstream in(dir / "a.adwt", std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream(dir / "cut.adwt", std::ios::binary).write(bytes.data(), static_cast<long>(bytes.size() / 2));
        Backbone c = Backbone::build(spec, 13);
        const Tensor before = c.extract_features(img).values;
        CHECK_THROWS_AS(c.import_weights(dir / "cut.adwt"), FormatError);
        CHECK(bitwise_equal(before, c.extract_features(img).values));
    }
    SUBCASE("shape mismatch names the stage") {
        Backbone plain = Backbone::build(BackboneSpec::standard(AttentionKind::cbam, {32, 16}, 64), 1);
        const std::string msg = message_of([&] { plain.import_weights(dir / "a.adwt"); });
        CHECK(msg.find("stage5") != std::string::npos);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(b.import_weights(dir / "nope.adwt"), IoError); }
}

TEST_CASE("stage names") {
    const Backbone bb = Backbone::build(BackboneSpec::standard(AttentionKind::se, {64, 32, 16}), 1);
    CHECK(bb.stage_names() == std::vector<std::string>{"stage1", "stage2", "stage3", "stage4", "stage5"});
    CHECK(bb.stage_index("stage4") == 3);
    const std::string msg = message_of([&] { bb.stage_index("stage9"); });
    CHECK(msg.find("stage9") != std::string::npos);
    CHECK(msg.find("stage1") != std::string::npos);
    CHECK_THROWS_AS(bb.stage_index("conv"), ConfigError);
}

#include "doctest.h"

#include <algorithm>
#include <string>

#include "adf/attribution.hpp"
#include "adf/errors.hpp"
#include "test_support.hpp"

using namespace adf;
using namespace adf::testing;

namespace {

// Stage 1 pools an 8x8 input to a 4x4 activation; one pyramid level so the
// features are exactly the pooled stage-2 output.
Model toy_model(AttentionKind kind, std::uint64_t seed) {
    BackboneSpec spec;
    spec.scales = {8};
    spec.top_channels = 4;
    spec.reduction_ratio = 2;
    spec.spatial_kernel = 3;
    spec.stages.push_back(StageSpec{ConvSpec{4, 3, 3, 3, 1, 1}, true, kind});
    spec.stages.push_back(StageSpec{ConvSpec{4, 4, 3, 3, 1, 1}, false, kind});
    Model m{Backbone::build(spec, seed), FlowModel::build(FlowConfig{4, 2, 8, 3.0f, seed + 1}), FeatureNorm::identity(4)};
    Rng rng(seed + 2);
    randomize_backbone(m.backbone, rng, 0.5);
    randomize_flow(m.flow, rng);
    return m;
}

Model small_model(AttentionKind kind) {
    BackboneSpec spec = BackboneSpec::standard(kind, {32, 16}, 8);
    Model m{Backbone::build(spec, 11), FlowModel::build(FlowConfig{16, 2, 16, 3.0f, 12}), FeatureNorm::identity(16)};
    Rng rng(13);
    randomize_flow(m.flow, rng);
    return m;
}

Tensor test_image(std::size_t size, std::uint64_t seed) {
    Rng rng(seed);
    return random_tensor({3, size, size}, rng, 0.0, 1.0);
}

// Flow part in double so the difference quotient is not float noise.
double score_of(const Model& m, const Tensor& act) {
    const Tensor f = m.norm.apply(m.backbone.pooled_from_stage(0, act));
    double log_det = 0.0;
    const std::vector<double> z = reference_flow(m.flow, std::vector<double>(f.values().begin(), f.values().end()), &log_det);
    double sq = 0.0;
    for (double v : z) sq += v * v;
    return 0.5 * sq - log_det;
}

}  // namespace

TEST_CASE("activation gradient matches finite differences on a 4x4 activation") {
    for (AttentionKind kind : {AttentionKind::none, AttentionKind::se, AttentionKind::cbam}) {
        CAPTURE(to_string(kind));
        const Model m = toy_model(kind, 31);
        const Tensor image = test_image(8, 32);
        ScoringConfig cfg;
        cfg.n_eval_transforms = 1;
        const auto terms = score_stage_gradients(m, image, 0, cfg);
        REQUIRE(terms.size() == 1);
        Tensor act = terms[0].activation;
        REQUIRE(act.shape() == Shape{4, 4, 4});
        const Tensor numeric = numeric_gradient(act, [&] { return score_of(m, act); }, 1e-3);
        const GradCheck r = compare_gradients(terms[0].gradient, numeric, 1e-2);
        CAPTURE(r.index);
        CAPTURE(r.analytic);
        CAPTURE(r.numeric);
        CHECK(r.ok(1e-2));
    }
}

TEST_CASE("per-transform gradients are scaled by 1/n") {
    const Model m = toy_model(AttentionKind::se, 41);
    const Tensor image = test_image(8, 42);
    ScoringConfig one, four;
    one.n_eval_transforms = 1;
    four.n_eval_transforms = 4;
    const auto a = score_stage_gradients(m, image, 0, one);
    const auto b = score_stage_gradients(m, image, 0, four);
    REQUIRE(b.size() == 4);
    CHECK(b[0].degrees == 0.0);
    CHECK(b[1].degrees == 90.0);
    for (std::size_t i = 0; i < a[0].gradient.size(); ++i) {
        CHECK(b[0].gradient[i] == doctest::Approx(a[0].gradient[i] / 4.0f).epsilon(1e-6));
    }
}

TEST_CASE("heatmap shape, range and normalization for every stage") {
    for (AttentionKind kind : {AttentionKind::none, AttentionKind::se, AttentionKind::cbam}) {
        const Model m = small_model(kind);
        const Tensor image = test_image(40, 51);
        ScoringConfig cfg;
        cfg.n_eval_transforms = 2;
        for (const std::string& stage : m.backbone.stage_names()) {
            CAPTURE(stage);
            const Heatmap hm = grad_cam(m, image, stage, cfg, {}, "img");
            CHECK(hm.values.shape() == Shape{40, 40});
            CHECK(hm.source_layer == stage);
            CHECK(hm.input_id == "img");
            const auto [lo, hi] = std::minmax_element(hm.values.values().begin(), hm.values.values().end());
            CHECK(*lo >= 0.0f);
            CHECK((*hi == 1.0f || *hi == 0.0f));
            if (*hi == 0.0f) CHECK(*lo == 0.0f);
        }
    }
}

TEST_CASE("zeroed gradients give an all-zero map") {
    const Model m = small_model(AttentionKind::cbam);
    const Tensor image = test_image(32, 61);
    const Heatmap hm = grad_cam(m, image, "stage3", ScoringConfig{}, [](Tensor& g) { g.fill(0.0f); });
    CHECK(hm.values.shape() == Shape{32, 32});
    for (float v : hm.values.values()) CHECK(v == 0.0f);
}

TEST_CASE("positive gradient rescaling leaves the map unchanged") {
    const Model m = small_model(AttentionKind::se);
    const Tensor image = test_image(32, 71);
    ScoringConfig cfg;
    cfg.n_eval_transforms = 2;
    const Heatmap a = grad_cam(m, image, "stage4", cfg);
    const Heatmap b = grad_cam(m, image, "stage4", cfg, [](Tensor& g) {
        for (auto& v : g.values()) v *= 4.0f;
    });
    CHECK(max_abs_diff(a.values, b.values) <= 1e-5);
}

TEST_CASE("grad_cam rejects unknown stages") {
    const Model m = small_model(AttentionKind::none);
    CHECK_THROWS_AS(grad_cam(m, test_image(32, 1), "stage9", ScoringConfig{}), ConfigError);
    CHECK_THROWS_AS(grad_cam(m, test_image(32, 1), "conv1", ScoringConfig{}), ConfigError);
}

TEST_CASE("colormap endpoints") {
    std::uint8_t rgb[3];
    heat_color(0.0f, rgb);
    CHECK((rgb[0] == 0 && rgb[1] == 0 && rgb[2] == 255));
    heat_color(1.0f, rgb);
    CHECK((rgb[0] == 255 && rgb[1] == 0 && rgb[2] == 0));
    heat_color(2.0f, rgb);
    CHECK(rgb[0] == 255);
}

TEST_CASE("overlay bytes") {
    Tensor image({3, 2, 3});
    Heatmap hm;
    hm.values = Tensor({2, 3});
    hm.values[5] = 1.0f;
    const auto bytes = render_heatmap_overlay(image, hm);
    const std::string header = "P6\n3 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 18);
    CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
    // black image: half of blue, then half of red at the last pixel
    CHECK(bytes[header.size() + 0] == 0);
    CHECK(bytes[header.size() + 2] == 128);
    CHECK(bytes[header.size() + 15] == 128);
    CHECK(bytes[header.size() + 17] == 0);

    image.fill(1.0f);
    const auto white = render_heatmap_overlay(image, hm);
    CHECK(white[header.size() + 0] == 128);
    CHECK(white[header.size() + 2] == 255);

    CHECK(render_heatmap_overlay(image, hm) == white);
    hm.values = Tensor({3, 2});
    CHECK_THROWS_AS(render_heatmap_overlay(image, hm), DimensionError);
}

TEST_CASE("overlay file round trips through the ppm decoder") {
    const auto dir = temp_dir("overlay");
    const Model m = small_model(AttentionKind::se);
    const Tensor image = test_image(32, 81);
    const Heatmap hm = grad_cam(m, image, "stage5", ScoringConfig{});
    write_heatmap_overlay(image, hm, dir / "o.ppm");
    CHECK(std::filesystem::file_size(dir / "o.ppm") == render_heatmap_overlay(image, hm).size());
}

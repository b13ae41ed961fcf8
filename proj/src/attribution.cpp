#include "adf/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "adf/binary_io.hpp"
#include "adf/errors.hpp"
#include "adf/resample.hpp"

namespace adf {

namespace {

std::uint8_t byte_of(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

}  // namespace

std::vector<StageGradient> score_stage_gradients(const Model& model, const Tensor& image, std::size_t stage,
                                                 const ScoringConfig& cfg) {
    cfg.validate();
    const std::vector<double> rot = cfg.rotations();
    const float inv_n = 1.0f / static_cast<float>(rot.size());
    std::vector<StageGradient> out;
    out.reserve(rot.size());
    for (double deg : rot) {
        Backbone::Cache cache;
        const FeatureVector f = model.backbone.forward(deg == 0.0 ? image : rotate(image, deg), &cache);
        const NllGradient ng = model.nll_gradient(f.values);
        StageGradient sg;
        sg.degrees = deg;
        sg.activation = Backbone::stage_output(cache, 0, stage);
        sg.gradient = model.backbone.stage_output_gradient(cache, ng.features, 0, stage);
        for (auto& v : sg.gradient.values()) v *= inv_n;
        out.push_back(std::move(sg));
    }
    return out;
}

Heatmap grad_cam(const Model& model, const Tensor& image, const std::string& stage, const ScoringConfig& cfg,
                 const GradientHook& hook, std::string input_id) {
    const std::size_t index = model.backbone.stage_index(stage);
    std::vector<StageGradient> terms = score_stage_gradients(model, image, index, cfg);

    const Tensor& act = terms.front().activation;
    const std::size_t c = act.dim(0), h = act.dim(1), w = act.dim(2), hw = h * w;
    std::vector<double> weight(c, 0.0);
    for (auto& t : terms) {
        if (hook) hook(t.gradient);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += t.gradient[ch * hw + i];
            weight[ch] += acc / static_cast<double>(hw);
        }
    }

    Tensor cam({1, h, w});
    for (std::size_t i = 0; i < hw; ++i) {
        double acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) acc += weight[ch] * act[ch * hw + i];
        cam[i] = static_cast<float>(std::max(acc, 0.0));
    }
    Tensor up = resize_bilinear(cam, image.dim(1), image.dim(2));

    Heatmap hm;
    hm.source_layer = stage;
    hm.input_id = std::move(input_id);
    hm.values = Tensor({image.dim(1), image.dim(2)});
    const auto [lo_it, hi_it] = std::minmax_element(up.values().begin(), up.values().end());
    const float lo = *lo_it, hi = *hi_it;
    if (hi > 0.0f) {
        for (std::size_t i = 0; i < up.size(); ++i) {
            hm.values[i] = hi > lo ? (up[i] - lo) / (hi - lo) : 1.0f;
        }
    }
    return hm;
}

void heat_color(float v, std::uint8_t rgb[3]) {
    const double t = std::clamp(static_cast<double>(v), 0.0, 1.0);
    rgb[0] = byte_of(255.0 * t);
    rgb[1] = 0;
    rgb[2] = byte_of(255.0 * (1.0 - t));
}

std::vector<std::uint8_t> render_heatmap_overlay(const Tensor& image, const Heatmap& heatmap) {
    require_rank(image, 3, "render_heatmap_overlay");
    const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
    if (image.dim(0) != 3 || heatmap.values.shape() != Shape{h, w}) {
        throw DimensionError("render_heatmap_overlay: image " + to_string(image.shape()) + " vs heatmap " +
                             to_string(heatmap.values.shape()));
    }
    const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + 3 * hw);
    for (std::size_t i = 0; i < hw; ++i) {
        const double gray = byte_of(255.0 * (0.299 * image[i] + 0.587 * image[hw + i] + 0.114 * image[2 * hw + i]));
        std::uint8_t rgb[3];
        heat_color(heatmap.values[i], rgb);
        for (int k = 0; k < 3; ++k) out.push_back(byte_of(0.5 * gray + 0.5 * rgb[k]));
    }
    return out;
}

void write_heatmap_overlay(const Tensor& image, const Heatmap& heatmap, const std::filesystem::path& path) {
    write_file_atomic(path, render_heatmap_overlay(image, heatmap));
}

}  // namespace adf

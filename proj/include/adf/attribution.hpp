#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "adf/tensor.hpp"
#include "adf/trainer.hpp"

namespace adf {

struct Heatmap {
    Tensor values;  // [H,W] in [0,1]
    std::string source_layer;
    std::string input_id;
};

/// Activation of the target stage (largest pyramid level) for one eval
/// transform, and d anomaly_score / d activation for that transform.
struct StageGradient {
    double degrees = 0.0;
    Tensor activation;
    Tensor gradient;
};

std::vector<StageGradient> score_stage_gradients(const Model& model, const Tensor& image, std::size_t stage,
                                                 const ScoringConfig& cfg);

/// Called on every per-transform activation gradient before it is used.
using GradientHook = std::function<void(Tensor&)>;

/// Grad-CAM of the anomaly score. Channel weights are the spatial means of
/// the score gradient summed over the eval transforms; they weight the
/// identity-transform activation, the result is relu-gated, upsampled to the
/// image size and min-max normalized. Throws ConfigError for unknown stages.
Heatmap grad_cam(const Model& model, const Tensor& image, const std::string& stage, const ScoringConfig& cfg,
                 const GradientHook& hook = {}, std::string input_id = "");

/// Colormap for a heat value in [0,1]: 0 is blue, 1 is red.
void heat_color(float v, std::uint8_t rgb[3]);

/// Luma of the image blended 50/50 with the heat colors, as P6 bytes.
std::vector<std::uint8_t> render_heatmap_overlay(const Tensor& image, const Heatmap& heatmap);
void write_heatmap_overlay(const Tensor& image, const Heatmap& heatmap, const std::filesystem::path& path);

}  // namespace adf

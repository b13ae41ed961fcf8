#pragma once

#include <cstddef>

#include "adf/tensor.hpp"

namespace adf {

/// Bilinear resize of a [C,H,W] tensor using half-pixel centers and edge
/// clamping. A constant input stays exactly constant.
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);

/// Rotates a [C,H,W] tensor by `degrees` about its center. Bilinear
/// resampling; samples falling outside the image replicate the edge.
Tensor rotate(const Tensor& image, double degrees);

/// Multiplies every value by `factor` and clamps to [0,1].
Tensor scale_brightness(const Tensor& image, float factor);

}  // namespace adf

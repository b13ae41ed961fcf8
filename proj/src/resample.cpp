#include "adf/resample.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "adf/errors.hpp"

namespace adf {

namespace {

// Bilinear sample with coordinates clamped to the plane; lerp form keeps
// constant neighborhoods exact.
float sample(const float* plane, std::size_t h, std::size_t w, double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
    const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const auto fy = static_cast<float>(y - static_cast<double>(y0));
    const auto fx = static_cast<float>(x - static_cast<double>(x0));
    const float a = plane[y0 * w + x0], b = plane[y0 * w + x1];
    const float c = plane[y1 * w + x0], d = plane[y1 * w + x1];
    const float top = a + fx * (b - a);
    const float bottom = c + fx * (d - c);
    return top + fy * (bottom - top);
}

}  // namespace

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    require_rank(image, 3, "resize_bilinear");
    if (out_h == 0 || out_w == 0) throw DimensionError("resize_bilinear: empty target size");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h == out_h && w == out_w) return image;
    Tensor out({c, out_h, out_w});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const float* plane = image.data() + ch * h * w;
        for (std::size_t y = 0; y < out_h; ++y) {
            const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
            for (std::size_t x = 0; x < out_w; ++x) {
                const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
                out.at(ch, y, x) = sample(plane, h, w, src_y, src_x);
            }
        }
    }
    return out;
}

Tensor rotate(const Tensor& image, double degrees) {
    require_rank(image, 3, "rotate");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const double rad = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
    Tensor out(image.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        const float* plane = image.data() + ch * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            const double dy = static_cast<double>(y) - cy;
            for (std::size_t x = 0; x < w; ++x) {
                const double dx = static_cast<double>(x) - cx;
                const double src_x = cx + cs * dx + sn * dy;
                const double src_y = cy - sn * dx + cs * dy;
                out.at(ch, y, x) = sample(plane, h, w, src_y, src_x);
            }
        }
    }
    return out;
}

Tensor scale_brightness(const Tensor& image, float factor) {
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) out[i] = std::clamp(image[i] * factor, 0.0f, 1.0f);
    return out;
}

}  // namespace adf

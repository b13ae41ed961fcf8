#include "adf/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "adf/errors.hpp"

namespace adf {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* axis) {
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    if (in + 2 * pad < k) {
        throw DimensionError(std::string("conv2d: kernel larger than padded input along ") + axis + " (" +
                             std::to_string(k) + " > " + std::to_string(in + 2 * pad) + ")");
    }
    return (in + 2 * pad - k) / stride + 1;
}

void check_conv(const Tensor& input, const Tensor& kernel, const ConvSpec& spec) {
    require_rank(input, 3, "conv2d input");
    if (kernel.shape() != spec.kernel_shape()) {
        throw DimensionError("conv2d: kernel shape " + to_string(kernel.shape()) + " does not match spec " +
                             to_string(spec.kernel_shape()));
    }
    if (input.dim(0) != spec.in_channels) {
        throw DimensionError("conv2d: input shape " + to_string(input.shape()) + " vs kernel shape " +
                             to_string(kernel.shape()) + " (channel mismatch)");
    }
}

// Column matrix [C_in*kH*kW, oh*ow].
RowMat im2col(const Tensor& input, const ConvSpec& s, std::size_t oh, std::size_t ow) {
    const std::size_t h = input.dim(1), w = input.dim(2);
    const std::size_t rows = s.in_channels * s.kernel_h * s.kernel_w;
    RowMat col(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(oh * ow));
    const long pad = static_cast<long>(s.padding);
    for (std::size_t c = 0; c < s.in_channels; ++c) {
        const float* plane = input.data() + c * h * w;
        for (std::size_t ki = 0; ki < s.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
                float* dst = col.data() + ((c * s.kernel_h + ki) * s.kernel_w + kj) * oh * ow;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const long iy = static_cast<long>(oy * s.stride + ki) - pad;
                    float* row = dst + oy * ow;
                    if (iy < 0 || iy >= static_cast<long>(h)) {
                        std::fill(row, row + ow, 0.0f);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(iy) * w;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const long ix = static_cast<long>(ox * s.stride + kj) - pad;
                        row[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? 0.0f : src[ix];
                    }
                }
            }
        }
    }
    return col;
}

void col2im(const RowMat& col, const ConvSpec& s, std::size_t oh, std::size_t ow, Tensor& out) {
    const std::size_t h = out.dim(1), w = out.dim(2);
    const long pad = static_cast<long>(s.padding);
    for (std::size_t c = 0; c < s.in_channels; ++c) {
        float* plane = out.data() + c * h * w;
        for (std::size_t ki = 0; ki < s.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
                const float* src = col.data() + ((c * s.kernel_h + ki) * s.kernel_w + kj) * oh * ow;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const long iy = static_cast<long>(oy * s.stride + ki) - pad;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    float* dst = plane + static_cast<std::size_t>(iy) * w;
                    const float* row = src + oy * ow;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const long ix = static_cast<long>(ox * s.stride + kj) - pad;
                        if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += row[ox];
                    }
                }
            }
        }
    }
}

void check_binary(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() == b.shape()) return;
    if (a.rank() == 3 && b.rank() == 1 && b.dim(0) == a.dim(0)) return;
    if (a.rank() == 3 && b.rank() == 2 && b.dim(0) == a.dim(1) && b.dim(1) == a.dim(2)) return;
    throw DimensionError(std::string(what) + ": cannot broadcast " + to_string(b.shape()) + " onto " +
                         to_string(a.shape()));
}

template <typename Fn>
Tensor binary(const Tensor& a, const Tensor& b, Fn fn, const char* what) {
    check_binary(a, b, what);
    Tensor out(a.shape());
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i], b[i]);
        return out;
    }
    const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
    if (b.rank() == 1) {
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = fn(a[ch * hw + i], b[ch]);
    } else {
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = fn(a[ch * hw + i], b[i]);
    }
    return out;
}

// Sum `full` (shaped like a) down to the shape of b.
Tensor reduce_to(const Tensor& full, const Tensor& b) {
    if (full.shape() == b.shape()) return full;
    Tensor out(b.shape());
    const std::size_t c = full.dim(0), hw = full.dim(1) * full.dim(2);
    if (b.rank() == 1) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            float acc = 0.0f;
            for (std::size_t i = 0; i < hw; ++i) acc += full[ch * hw + i];
            out[ch] = acc;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) out[i] += full[ch * hw + i];
    }
    return out;
}

}  // namespace

std::size_t ConvSpec::out_h(std::size_t in_h) const { return conv_out(in_h, kernel_h, stride, padding, "height"); }
std::size_t ConvSpec::out_w(std::size_t in_w) const { return conv_out(in_w, kernel_w, stride, padding, "width"); }

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvSpec& spec) {
    check_conv(input, kernel, spec);
    if (bias.shape() != Shape{spec.out_channels}) {
        throw DimensionError("conv2d: bias shape " + to_string(bias.shape()) + " vs kernel shape " +
                             to_string(kernel.shape()));
    }
    const std::size_t oh = spec.out_h(input.dim(1)), ow = spec.out_w(input.dim(2));
    const RowMat col = im2col(input, spec, oh, ow);
    Tensor out({spec.out_channels, oh, ow});
    ConstMapMat k(kernel.data(), static_cast<Eigen::Index>(spec.out_channels), col.rows());
    MapMat o(out.data(), static_cast<Eigen::Index>(spec.out_channels), col.cols());
    o.noalias() = k * col;
    for (std::size_t c = 0; c < spec.out_channels; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias[c];
    return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const ConvSpec& spec, const Tensor& grad_out,
                          bool need_input_grad) {
    check_conv(input, kernel, spec);
    const std::size_t oh = spec.out_h(input.dim(1)), ow = spec.out_w(input.dim(2));
    if (grad_out.shape() != Shape{spec.out_channels, oh, ow}) {
        throw DimensionError("conv2d_backward: gradient shape " + to_string(grad_out.shape()) + " vs output shape " +
                             to_string(Shape{spec.out_channels, oh, ow}));
    }
    const RowMat col = im2col(input, spec, oh, ow);
    ConstMapMat g(grad_out.data(), static_cast<Eigen::Index>(spec.out_channels), col.cols());
    ConstMapMat k(kernel.data(), static_cast<Eigen::Index>(spec.out_channels), col.rows());

    ConvGrads grads;
    grads.kernel = Tensor(kernel.shape());
    MapMat gk(grads.kernel.data(), k.rows(), k.cols());
    gk.noalias() = g * col.transpose();
    grads.bias = Tensor({spec.out_channels});
    for (std::size_t c = 0; c < spec.out_channels; ++c) grads.bias[c] = g.row(static_cast<Eigen::Index>(c)).sum();
    if (need_input_grad) {
        RowMat gcol = k.transpose() * g;
        grads.input = Tensor(input.shape());
        col2im(gcol, spec, oh, ow, grads.input);
    }
    return grads;
}

Tensor global_avg_pool(const Tensor& input) {
    require_rank(input, 3, "global_avg_pool");
    const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
    Tensor out({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += input[ch * hw + i];
        out[ch] = static_cast<float>(acc / static_cast<double>(hw));
    }
    return out;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
    Tensor grad(input_shape);
    const std::size_t c = input_shape[0], hw = input_shape[1] * input_shape[2];
    if (grad_out.shape() != Shape{c}) throw DimensionError("global_avg_pool_backward: bad gradient shape");
    const float inv = 1.0f / static_cast<float>(hw);
    for (std::size_t ch = 0; ch < c; ++ch) std::fill_n(grad.data() + ch * hw, hw, grad_out[ch] * inv);
    return grad;
}

Tensor global_max_pool(const Tensor& input) {
    require_rank(input, 3, "global_max_pool");
    const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
    Tensor out({c});
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] = *std::max_element(input.data() + ch * hw, input.data() + (ch + 1) * hw);
    return out;
}

Tensor global_max_pool_backward(const Tensor& input, const Tensor& grad_out) {
    require_rank(input, 3, "global_max_pool_backward");
    const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
    Tensor grad(input.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        const float* p = input.data() + ch * hw;
        grad[ch * hw + static_cast<std::size_t>(std::max_element(p, p + hw) - p)] = grad_out[ch];
    }
    return grad;
}

Tensor channel_mean(const Tensor& input) {
    require_rank(input, 3, "channel_mean");
    const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
    Tensor out({input.dim(1), input.dim(2)});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) out[i] += input[ch * hw + i];
    const float inv = 1.0f / static_cast<float>(c);
    for (auto& v : out.values()) v *= inv;
    return out;
}

Tensor channel_mean_backward(const Shape& input_shape, const Tensor& grad_out) {
    Tensor grad(input_shape);
    const std::size_t c = input_shape[0], hw = input_shape[1] * input_shape[2];
    const float inv = 1.0f / static_cast<float>(c);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) grad[ch * hw + i] = grad_out[i] * inv;
    return grad;
}

Tensor channel_max(const Tensor& input) {
    require_rank(input, 3, "channel_max");
    const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
    Tensor out({input.dim(1), input.dim(2)});
    std::copy_n(input.data(), hw, out.data());
    for (std::size_t ch = 1; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) out[i] = std::max(out[i], input[ch * hw + i]);
    return out;
}

Tensor channel_max_backward(const Tensor& input, const Tensor& grad_out) {
    const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
    Tensor grad(input.shape());
    for (std::size_t i = 0; i < hw; ++i) {
        std::size_t best = 0;
        for (std::size_t ch = 1; ch < c; ++ch)
            if (input[ch * hw + i] > input[best * hw + i]) best = ch;
        grad[best * hw + i] = grad_out[i];
    }
    return grad;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(x, 1, "dense input");
    require_rank(w, 2, "dense weight");
    if (w.dim(1) != x.dim(0) || b.shape() != Shape{w.dim(0)}) {
        throw DimensionError("dense: weight " + to_string(w.shape()) + ", input " + to_string(x.shape()) +
                             ", bias " + to_string(b.shape()));
    }
    const std::size_t m = w.dim(0), n = w.dim(1);
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        float acc = b[i];
        const float* row = w.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) acc += row[j] * x[j];
        out[i] = acc;
    }
    return out;
}

DenseGrads dense_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out) {
    const std::size_t m = w.dim(0), n = w.dim(1);
    if (x.shape() != Shape{n} || grad_out.shape() != Shape{m}) {
        throw DimensionError("dense_backward: weight " + to_string(w.shape()) + ", input " + to_string(x.shape()) +
                             ", gradient " + to_string(grad_out.shape()));
    }
    DenseGrads g{Tensor({n}), Tensor(w.shape()), grad_out};
    for (std::size_t i = 0; i < m; ++i) {
        const float go = grad_out[i];
        const float* row = w.data() + i * n;
        float* grow = g.w.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            grow[j] = go * x[j];
            g.x[j] += go * row[j];
        }
    }
    return g;
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] < 0.0f ? 0.0f : x[i];
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
    return out;
}

Tensor tanh(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
    return out;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
    require_same_shape(x, grad_out, "relu_backward");
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0f ? grad_out[i] : 0.0f;
    return g;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out) {
    require_same_shape(y, grad_out, "sigmoid_backward");
    Tensor g(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) g[i] = grad_out[i] * y[i] * (1.0f - y[i]);
    return g;
}

Tensor tanh_backward(const Tensor& y, const Tensor& grad_out) {
    require_same_shape(y, grad_out, "tanh_backward");
    Tensor g(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) g[i] = grad_out[i] * (1.0f - y[i] * y[i]);
    return g;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(a, b, [](float x, float y) { return x * y; }, "mul");
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(a, b, [](float x, float y) { return x + y; }, "add");
}

BinaryGrads mul_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out) {
    check_binary(a, b, "mul_backward");
    require_same_shape(a, grad_out, "mul_backward");
    BinaryGrads g;
    g.a = mul(grad_out, b);
    Tensor full(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) full[i] = grad_out[i] * a[i];
    g.b = reduce_to(full, b);
    return g;
}

BinaryGrads add_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out) {
    check_binary(a, b, "add_backward");
    require_same_shape(a, grad_out, "add_backward");
    return {grad_out, reduce_to(grad_out, b)};
}

Tensor max_pool(const Tensor& input, std::size_t window, std::size_t stride) {
    require_rank(input, 3, "max_pool");
    if (window == 0 || stride == 0) throw DimensionError("max_pool: window and stride must be positive");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h < window || w < window) {
        throw DimensionError("max_pool: window " + std::to_string(window) + " exceeds input " + to_string(input.shape()));
    }
    const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
    Tensor out({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                float m = input.at(ch, oy * stride, ox * stride);
                for (std::size_t i = 0; i < window; ++i)
                    for (std::size_t j = 0; j < window; ++j) m = std::max(m, input.at(ch, oy * stride + i, ox * stride + j));
                out.at(ch, oy, ox) = m;
            }
    return out;
}

Tensor max_pool_backward(const Tensor& input, std::size_t window, std::size_t stride, const Tensor& grad_out) {
    require_rank(input, 3, "max_pool_backward");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
    if (grad_out.shape() != Shape{c, oh, ow}) {
        throw DimensionError("max_pool_backward: gradient shape " + to_string(grad_out.shape()));
    }
    Tensor grad(input.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t by = oy * stride, bx = ox * stride;
                float m = input.at(ch, by, bx);
                for (std::size_t i = 0; i < window; ++i)
                    for (std::size_t j = 0; j < window; ++j) {
                        const float v = input.at(ch, oy * stride + i, ox * stride + j);
                        if (v > m) {
                            m = v;
                            by = oy * stride + i;
                            bx = ox * stride + j;
                        }
                    }
                grad.at(ch, by, bx) += grad_out.at(ch, oy, ox);
            }
    return grad;
}

Tensor stack_maps(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "stack_maps");
    require_same_shape(a, b, "stack_maps");
    Tensor out({2, a.dim(0), a.dim(1)});
    std::copy_n(a.data(), a.size(), out.data());
    std::copy_n(b.data(), b.size(), out.data() + a.size());
    return out;
}

}  // namespace adf

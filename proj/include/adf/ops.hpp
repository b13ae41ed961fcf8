#pragma once

#include <cstddef>

#include "adf/tensor.hpp"

// Forward and backward kernels. Every function is pure; backward functions
// take the forward inputs (and, where cheaper, the forward output) and the
// gradient of the output, and return gradients of the inputs.

namespace adf {

struct ConvSpec {
    std::size_t out_channels = 1;
    std::size_t in_channels = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    /// Throws DimensionError when the output would be empty.
    std::size_t out_h(std::size_t in_h) const;
    std::size_t out_w(std::size_t in_w) const;
    Shape kernel_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
};

// conv2d: input [C_in,H,W], kernel [C_out,C_in,kH,kW], bias [C_out].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvSpec& spec);

struct ConvGrads {
    Tensor input;  // empty when not requested
    Tensor kernel;
    Tensor bias;
};
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const ConvSpec& spec, const Tensor& grad_out,
                          bool need_input_grad = true);

// Per-channel reductions over the spatial axes: [C,H,W] -> [C].
Tensor global_avg_pool(const Tensor& input);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out);
Tensor global_max_pool(const Tensor& input);
Tensor global_max_pool_backward(const Tensor& input, const Tensor& grad_out);

// Reductions over the channel axis: [C,H,W] -> [H,W].
Tensor channel_mean(const Tensor& input);
Tensor channel_mean_backward(const Shape& input_shape, const Tensor& grad_out);
Tensor channel_max(const Tensor& input);
Tensor channel_max_backward(const Tensor& input, const Tensor& grad_out);

// dense: x [N], w [M,N], b [M] -> w x + b.
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

struct DenseGrads {
    Tensor x;
    Tensor w;
    Tensor b;
};
DenseGrads dense_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
float sigmoid(float x);

Tensor relu_backward(const Tensor& x, const Tensor& grad_out);
/// Uses the forward output y = sigmoid(x).
Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out);
/// Uses the forward output y = tanh(x).
Tensor tanh_backward(const Tensor& y, const Tensor& grad_out);

// Binary elementwise ops. `b` may equal `a` in shape, or be a channel
// vector [C] or spatial map [H,W] broadcast over a [C,H,W] tensor `a`.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);

struct BinaryGrads {
    Tensor a;
    Tensor b;  // reduced to b's shape
};
BinaryGrads mul_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out);
BinaryGrads add_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out);

// Windowed max over [C,H,W]; the backward pass routes each output gradient
// to the first maximal input in row-major window order.
Tensor max_pool(const Tensor& input, std::size_t window, std::size_t stride);
Tensor max_pool_backward(const Tensor& input, std::size_t window, std::size_t stride, const Tensor& grad_out);

// Stack [H,W] maps into [N,H,W].
Tensor stack_maps(const Tensor& a, const Tensor& b);

}  // namespace adf

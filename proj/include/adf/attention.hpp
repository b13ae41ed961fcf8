#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>

#include "adf/tensor.hpp"

namespace adf {

enum class AttentionKind { none, se, cbam };

std::string_view to_string(AttentionKind kind);
AttentionKind parse_attention_kind(std::string_view name);

/// Hidden width of the gate MLP: C / r, with r = 16 by default and r = C
/// when C < 16.
std::size_t default_reduction(std::size_t channels);

/// Squeeze-and-excitation unit: one sigmoid gate per channel computed from
/// the globally averaged descriptor.
struct SEParams {
    std::size_t reduction = 1;
    Tensor w1;  // [C/r, C]
    Tensor b1;  // [C/r]
    Tensor w2;  // [C, C/r]
    Tensor b2;  // [C]

    static SEParams zeros(std::size_t channels, std::size_t reduction);
    std::size_t channels() const { return w1.dim(1); }
};

/// Convolutional block attention unit: channel gate from a shared MLP over
/// average- and max-pooled descriptors, then a spatial gate from a k x k
/// convolution over the channel-mean and channel-max maps.
struct CBAMParams {
    std::size_t reduction = 1;
    Tensor w1;              // [C/r, C]
    Tensor b1;              // [C/r]
    Tensor w2;              // [C, C/r]
    Tensor b2;              // [C]
    Tensor spatial_kernel;  // [1, 2, k, k], k odd
    Tensor spatial_bias;    // [1]

    static CBAMParams zeros(std::size_t channels, std::size_t reduction, std::size_t kernel_size);
    std::size_t channels() const { return w1.dim(1); }
    std::size_t kernel_size() const { return spatial_kernel.dim(2); }
};

void validate(const SEParams& p);
void validate(const CBAMParams& p);

/// Calls fn(suffix, tensor) for each parameter; suffix is e.g. "W1".
void for_each_param(SEParams& p, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(CBAMParams& p, const std::function<void(const std::string&, Tensor&)>& fn);

// --- SE -------------------------------------------------------------------

struct SECache {
    Tensor pooled, hidden_pre, hidden, gate;
};

Tensor se_gate(const Tensor& x, const SEParams& p, SECache* cache = nullptr);
Tensor se_forward(const Tensor& x, const SEParams& p, SECache* cache = nullptr);
/// Accumulates parameter gradients into `grads`; returns d loss / d x.
Tensor se_backward(const Tensor& x, const SEParams& p, const SECache& cache, const Tensor& grad_out, SEParams& grads);

// --- CBAM -----------------------------------------------------------------

struct CBAMChannelCache {
    Tensor avg, max, avg_hidden_pre, max_hidden_pre, gate;
};
struct CBAMSpatialCache {
    Tensor stacked, gate;
};
struct CBAMCache {
    CBAMChannelCache channel;
    Tensor channel_gated;
    CBAMSpatialCache spatial;
};

Tensor cbam_channel_gate(const Tensor& x, const CBAMParams& p, CBAMChannelCache* cache = nullptr);
Tensor cbam_spatial_gate(const Tensor& x, const CBAMParams& p, CBAMSpatialCache* cache = nullptr);
Tensor cbam_forward(const Tensor& x, const CBAMParams& p, CBAMCache* cache = nullptr);
Tensor cbam_backward(const Tensor& x, const CBAMParams& p, const CBAMCache& cache, const Tensor& grad_out,
                     CBAMParams& grads);

}  // namespace adf

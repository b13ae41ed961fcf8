#include "adf/attention.hpp"

#include <algorithm>

#include "adf/errors.hpp"
#include "adf/ops.hpp"

namespace adf {

std::string_view to_string(AttentionKind kind) {
    switch (kind) {
        case AttentionKind::none: return "none";
        case AttentionKind::se: return "se";
        case AttentionKind::cbam: return "cbam";
    }
    return "none";
}

AttentionKind parse_attention_kind(std::string_view name) {
    if (name == "none") return AttentionKind::none;
    if (name == "se") return AttentionKind::se;
    if (name == "cbam") return AttentionKind::cbam;
    throw ConfigError("unknown attention kind '" + std::string(name) + "' (expected none, se or cbam)");
}

std::size_t default_reduction(std::size_t channels) { return channels < 16 ? channels : 16; }

namespace {

void check_reduction(std::size_t channels, std::size_t reduction) {
    if (channels == 0 || reduction == 0 || channels % reduction != 0) {
        throw ConfigError("attention: channel count " + std::to_string(channels) +
                          " is not divisible by reduction ratio " + std::to_string(reduction));
    }
}

void check_mlp(const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2, std::size_t reduction,
               const char* what) {
    require_rank(w1, 2, what);
    const std::size_t c = w1.dim(1);
    check_reduction(c, reduction);
    const std::size_t hidden = c / reduction;
    if (w1.shape() != Shape{hidden, c} || b1.shape() != Shape{hidden} || w2.shape() != Shape{c, hidden} ||
        b2.shape() != Shape{c}) {
        throw DimensionError(std::string(what) + ": gate MLP shapes W1 " + to_string(w1.shape()) + ", b1 " +
                             to_string(b1.shape()) + ", W2 " + to_string(w2.shape()) + ", b2 " +
                             to_string(b2.shape()) + " are inconsistent with C=" + std::to_string(c) +
                             ", r=" + std::to_string(reduction));
    }
}

void check_input(const Tensor& x, std::size_t channels, const char* what) {
    require_rank(x, 3, what);
    if (x.dim(0) != channels) {
        throw DimensionError(std::string(what) + ": input shape " + to_string(x.shape()) + " has " +
                             std::to_string(x.dim(0)) + " channels, unit expects " + std::to_string(channels));
    }
}

void accumulate(Tensor& into, const Tensor& g) {
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

// Shared gate MLP: W2 relu(W1 v + b1) + b2.
Tensor mlp(const Tensor& v, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2,
           Tensor* hidden_pre) {
    Tensor pre = dense(v, w1, b1);
    Tensor out = dense(relu(pre), w2, b2);
    if (hidden_pre) *hidden_pre = std::move(pre);
    return out;
}

// Backprop d/d logit through the MLP, accumulating into the four weights.
Tensor mlp_backward(const Tensor& v, const Tensor& hidden_pre, const Tensor& w1, const Tensor& w2,
                    const Tensor& grad_logit, Tensor& gw1, Tensor& gb1, Tensor& gw2, Tensor& gb2) {
    const Tensor hidden = relu(hidden_pre);
    DenseGrads out = dense_backward(hidden, w2, grad_logit);
    accumulate(gw2, out.w);
    accumulate(gb2, out.b);
    const Tensor g_pre = relu_backward(hidden_pre, out.x);
    DenseGrads in = dense_backward(v, w1, g_pre);
    accumulate(gw1, in.w);
    accumulate(gb1, in.b);
    return in.x;
}

ConvSpec spatial_conv_spec(const CBAMParams& p) {
    const std::size_t k = p.kernel_size();
    return ConvSpec{1, 2, k, k, 1, (k - 1) / 2};
}

}  // namespace

SEParams SEParams::zeros(std::size_t channels, std::size_t reduction) {
    check_reduction(channels, reduction);
    const std::size_t hidden = channels / reduction;
    return SEParams{reduction, Tensor({hidden, channels}), Tensor({hidden}), Tensor({channels, hidden}),
                    Tensor({channels})};
}

CBAMParams CBAMParams::zeros(std::size_t channels, std::size_t reduction, std::size_t kernel_size) {
    check_reduction(channels, reduction);
    if (kernel_size == 0 || kernel_size % 2 == 0) {
        throw ConfigError("cbam: spatial kernel side must be odd, got " + std::to_string(kernel_size));
    }
    const std::size_t hidden = channels / reduction;
    return CBAMParams{reduction,          Tensor({hidden, channels}),
                      Tensor({hidden}),   Tensor({channels, hidden}),
                      Tensor({channels}), Tensor({1, 2, kernel_size, kernel_size}),
                      Tensor({1})};
}

void validate(const SEParams& p) { check_mlp(p.w1, p.b1, p.w2, p.b2, p.reduction, "se"); }

void validate(const CBAMParams& p) {
    check_mlp(p.w1, p.b1, p.w2, p.b2, p.reduction, "cbam");
    const auto& k = p.spatial_kernel.shape();
    if (k.size() != 4 || k[0] != 1 || k[1] != 2 || k[2] != k[3] || k[2] % 2 == 0) {
        throw DimensionError("cbam: spatial kernel must be [1,2,k,k] with odd k, got " + to_string(k));
    }
    if (p.spatial_bias.shape() != Shape{1}) {
        throw DimensionError("cbam: spatial bias must be [1], got " + to_string(p.spatial_bias.shape()));
    }
}

void for_each_param(SEParams& p, const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("W1", p.w1);
    fn("b1", p.b1);
    fn("W2", p.w2);
    fn("b2", p.b2);
}

void for_each_param(CBAMParams& p, const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("W1", p.w1);
    fn("b1", p.b1);
    fn("W2", p.w2);
    fn("b2", p.b2);
    fn("spatial_kernel", p.spatial_kernel);
    fn("spatial_bias", p.spatial_bias);
}

// --- SE -------------------------------------------------------------------

Tensor se_gate(const Tensor& x, const SEParams& p, SECache* cache) {
    check_input(x, p.channels(), "se");
    Tensor pooled = global_avg_pool(x);
    Tensor pre = dense(pooled, p.w1, p.b1);
    Tensor hidden = relu(pre);
    Tensor gate = sigmoid(dense(hidden, p.w2, p.b2));
    if (cache) {
        cache->pooled = std::move(pooled);
        cache->hidden_pre = std::move(pre);
        cache->hidden = std::move(hidden);
        cache->gate = gate;
    }
    return gate;
}

Tensor se_forward(const Tensor& x, const SEParams& p, SECache* cache) { return mul(x, se_gate(x, p, cache)); }

Tensor se_backward(const Tensor& x, const SEParams& p, const SECache& cache, const Tensor& grad_out, SEParams& grads) {
    check_input(grad_out, p.channels(), "se_backward");
    BinaryGrads g = mul_backward(x, cache.gate, grad_out);
    const Tensor g_logit = sigmoid_backward(cache.gate, g.b);
    const Tensor g_pooled =
        mlp_backward(cache.pooled, cache.hidden_pre, p.w1, p.w2, g_logit, grads.w1, grads.b1, grads.w2, grads.b2);
    accumulate(g.a, global_avg_pool_backward(x.shape(), g_pooled));
    return std::move(g.a);
}

// --- CBAM -----------------------------------------------------------------

Tensor cbam_channel_gate(const Tensor& x, const CBAMParams& p, CBAMChannelCache* cache) {
    check_input(x, p.channels(), "cbam channel gate");
    Tensor avg = global_avg_pool(x);
    Tensor mx = global_max_pool(x);
    Tensor avg_pre, max_pre;
    Tensor logit = add(mlp(avg, p.w1, p.b1, p.w2, p.b2, &avg_pre), mlp(mx, p.w1, p.b1, p.w2, p.b2, &max_pre));
    Tensor gate = sigmoid(logit);
    if (cache) {
        cache->avg = std::move(avg);
        cache->max = std::move(mx);
        cache->avg_hidden_pre = std::move(avg_pre);
        cache->max_hidden_pre = std::move(max_pre);
        cache->gate = gate;
    }
    return gate;
}

Tensor cbam_spatial_gate(const Tensor& x, const CBAMParams& p, CBAMSpatialCache* cache) {
    require_rank(x, 3, "cbam spatial gate");
    Tensor stacked = stack_maps(channel_mean(x), channel_max(x));
    Tensor logit = conv2d(stacked, p.spatial_kernel, p.spatial_bias, spatial_conv_spec(p));
    Tensor gate = sigmoid(logit).reshaped({x.dim(1), x.dim(2)});
    if (cache) {
        cache->stacked = std::move(stacked);
        cache->gate = gate;
    }
    return gate;
}

Tensor cbam_forward(const Tensor& x, const CBAMParams& p, CBAMCache* cache) {
    CBAMChannelCache ccache;
    Tensor channel_gated = mul(x, cbam_channel_gate(x, p, cache ? &ccache : nullptr));
    CBAMSpatialCache scache;
    Tensor spatial = cbam_spatial_gate(channel_gated, p, cache ? &scache : nullptr);
    Tensor out = mul(channel_gated, spatial);
    if (cache) {
        cache->channel = std::move(ccache);
        cache->channel_gated = std::move(channel_gated);
        cache->spatial = std::move(scache);
    }
    return out;
}

Tensor cbam_backward(const Tensor& x, const CBAMParams& p, const CBAMCache& cache, const Tensor& grad_out,
                     CBAMParams& grads) {
    check_input(grad_out, p.channels(), "cbam_backward");
    const Tensor& x1 = cache.channel_gated;

    // out = x1 * Ms(x1)
    BinaryGrads outer = mul_backward(x1, cache.spatial.gate, grad_out);
    const std::size_t h = x.dim(1), w = x.dim(2);
    const Tensor g_slogit = sigmoid_backward(cache.spatial.gate, outer.b).reshaped({1, h, w});
    ConvGrads cg = conv2d_backward(cache.spatial.stacked, p.spatial_kernel, spatial_conv_spec(p), g_slogit);
    accumulate(grads.spatial_kernel, cg.kernel);
    accumulate(grads.spatial_bias, cg.bias);
    const std::size_t hw = h * w;
    Tensor g_mean({h, w}), g_max({h, w});
    std::copy_n(cg.input.data(), hw, g_mean.data());
    std::copy_n(cg.input.data() + hw, hw, g_max.data());
    Tensor g_x1 = std::move(outer.a);
    accumulate(g_x1, channel_mean_backward(x1.shape(), g_mean));
    accumulate(g_x1, channel_max_backward(x1, g_max));

    // x1 = x * Mc(x)
    BinaryGrads inner = mul_backward(x, cache.channel.gate, g_x1);
    const Tensor g_clogit = sigmoid_backward(cache.channel.gate, inner.b);
    const Tensor g_avg = mlp_backward(cache.channel.avg, cache.channel.avg_hidden_pre, p.w1, p.w2, g_clogit, grads.w1,
                                      grads.b1, grads.w2, grads.b2);
    const Tensor g_mx = mlp_backward(cache.channel.max, cache.channel.max_hidden_pre, p.w1, p.w2, g_clogit, grads.w1,
                                     grads.b1, grads.w2, grads.b2);
    Tensor g_x = std::move(inner.a);
    accumulate(g_x, global_avg_pool_backward(x.shape(), g_avg));
    accumulate(g_x, global_max_pool_backward(x, g_mx));
    return g_x;
}

}  // namespace adf

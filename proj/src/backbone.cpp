#include "adf/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "adf/errors.hpp"
#include "adf/random.hpp"
#include "adf/resample.hpp"

namespace adf {

namespace {

std::string stage_prefix(std::size_t i) { return "stage" + std::to_string(i + 1); }

void fill_he(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<float>(rng.normal() * std_dev);
}

void accumulate(Tensor& into, const Tensor& g) {
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

}  // namespace

BackboneSpec BackboneSpec::standard(AttentionKind kind, std::vector<std::size_t> scales, std::size_t top_channels) {
    BackboneSpec spec;
    spec.scales = std::move(scales);
    spec.top_channels = top_channels;
    const std::size_t channels[] = {32, 48, 64, 96, top_channels};
    const std::size_t kernels[] = {5, 3, 3, 3, 3};
    const bool pools[] = {true, true, false, false, true};
    std::size_t in = 3;
    for (int i = 0; i < 5; ++i) {
        StageSpec s;
        s.conv = ConvSpec{channels[i], in, kernels[i], kernels[i], 1, kernels[i] / 2};
        s.pool = pools[i];
        s.attention = kind;
        spec.stages.push_back(s);
        in = channels[i];
    }
    return spec;
}

std::size_t BackboneSpec::reduction_for(std::size_t channels) const {
    return reduction_ratio == 0 ? default_reduction(channels) : reduction_ratio;
}

void BackboneSpec::validate() const {
    if (stages.empty()) throw ConfigError("backbone: at least one stage is required");
    if (scales.empty()) throw ConfigError("backbone: at least one scale is required");
    for (std::size_t i = 1; i < scales.size(); ++i) {
        if (scales[i] >= scales[i - 1]) throw ConfigError("backbone: scales must be strictly decreasing");
    }
    if (scales.back() == 0) throw ConfigError("backbone: scales must be positive");
    if (spatial_kernel == 0 || spatial_kernel % 2 == 0) {
        throw ConfigError("backbone: spatial_kernel must be odd, got " + std::to_string(spatial_kernel));
    }
    if (pool_window == 0) throw ConfigError("backbone: pool_window must be positive");
    std::size_t in = 3;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const ConvSpec& c = stages[i].conv;
        const std::string where = "backbone " + stage_prefix(i) + ": ";
        if (c.in_channels != in) {
            throw ConfigError(where + "expects " + std::to_string(c.in_channels) + " input channels, previous stage yields " +
                              std::to_string(in));
        }
        if (c.out_channels == 0 || c.kernel_h == 0 || c.kernel_w == 0 || c.stride == 0) {
            throw ConfigError(where + "conv extents and stride must be positive");
        }
        if (stages[i].attention != AttentionKind::none) {
            const std::size_t r = reduction_for(c.out_channels);
            if (c.out_channels % r != 0) {
                throw ConfigError(where + std::to_string(c.out_channels) + " channels not divisible by reduction " +
                                  std::to_string(r));
            }
        }
        in = c.out_channels;
    }
    if (in != top_channels) {
        throw ConfigError("backbone: final stage has " + std::to_string(in) + " channels but top_channels is " +
                          std::to_string(top_channels));
    }
    // Every pyramid level must survive all stages.
    for (auto s : scales) {
        std::size_t h = s;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const ConvSpec& c = stages[i].conv;
            if (h + 2 * c.padding < c.kernel_h) {
                throw ConfigError("backbone: scale " + std::to_string(s) + " is too small for " + stage_prefix(i));
            }
            h = (h + 2 * c.padding - c.kernel_h) / c.stride + 1;
            if (stages[i].pool) {
                if (h < pool_window) {
                    throw ConfigError("backbone: scale " + std::to_string(s) + " is too small to pool after " +
                                      stage_prefix(i));
                }
                h = (h - pool_window) / pool_window + 1;
            }
        }
    }
}

Backbone Backbone::build(const BackboneSpec& spec, std::uint64_t seed) {
    spec.validate();
    Backbone b;
    b.spec_ = spec;
    Rng rng(derive_seed(seed, 0xBAC0));
    for (const auto& s : spec.stages) {
        const ConvSpec& c = s.conv;
        StageParams p;
        p.kernel = Tensor(c.kernel_shape());
        fill_he(p.kernel, c.in_channels * c.kernel_h * c.kernel_w, rng);
        p.bias = Tensor({c.out_channels});
        const std::size_t r = spec.reduction_for(c.out_channels);
        if (s.attention == AttentionKind::se) {
            p.se = SEParams::zeros(c.out_channels, r);
            fill_he(p.se->w1, c.out_channels, rng);
        } else if (s.attention == AttentionKind::cbam) {
            p.cbam = CBAMParams::zeros(c.out_channels, r, spec.spatial_kernel);
            fill_he(p.cbam->w1, c.out_channels, rng);
        }
        b.stages_.push_back(std::move(p));
    }
    return b;
}

Backbone Backbone::zeros_like() const {
    Backbone z = *this;
    z.for_each_param([](const std::string&, Tensor& t) { t.fill(0.0f); });
    return z;
}

std::vector<std::string> Backbone::stage_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < stages_.size(); ++i) names.push_back(stage_prefix(i));
    return names;
}

std::size_t Backbone::stage_index(const std::string& name) const {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        if (stage_prefix(i) == name) return i;
    }
    std::string valid;
    for (const auto& n : stage_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown stage '" + name + "' (valid stages: " + valid + ")");
}

Tensor Backbone::stage_forward(std::size_t i, const Tensor& x, StageCache* cache) const {
    const StageParams& p = stages_[i];
    const StageSpec& s = spec_.stages[i];
    Tensor conv_out = conv2d(x, p.kernel, p.bias, s.conv);
    Tensor activated = relu(conv_out);
    Tensor pooled = s.pool ? max_pool(activated, spec_.pool_window, spec_.pool_window) : activated;
    Tensor out;
    if (p.se) {
        out = se_forward(pooled, *p.se, cache ? &cache->se : nullptr);
    } else if (p.cbam) {
        out = cbam_forward(pooled, *p.cbam, cache ? &cache->cbam : nullptr);
    } else {
        out = pooled;
    }
    if (cache) {
        cache->input = x;
        cache->conv_out = std::move(conv_out);
        cache->activated = std::move(activated);
        cache->gated_input = std::move(pooled);
    }
    return out;
}

Tensor Backbone::stage_backward(std::size_t i, const StageCache& c, const Tensor& grad_out, Backbone* grads,
                                bool skip_convs, bool need_input_grad) const {
    const StageParams& p = stages_[i];
    const StageSpec& s = spec_.stages[i];
    Tensor g = grad_out;
    if (p.se) {
        SEParams scratch;
        SEParams& target = grads ? *grads->stages_[i].se : (scratch = SEParams::zeros(p.se->channels(), p.se->reduction));
        g = se_backward(c.gated_input, *p.se, c.se, g, target);
    } else if (p.cbam) {
        CBAMParams scratch;
        CBAMParams& target =
            grads ? *grads->stages_[i].cbam
                  : (scratch = CBAMParams::zeros(p.cbam->channels(), p.cbam->reduction, p.cbam->kernel_size()));
        g = cbam_backward(c.gated_input, *p.cbam, c.cbam, g, target);
    }
    if (s.pool) g = max_pool_backward(c.activated, spec_.pool_window, spec_.pool_window, g);
    g = relu_backward(c.conv_out, g);
    const bool want_params = grads && !skip_convs;
    if (!want_params && !need_input_grad) return {};
    ConvGrads cg = conv2d_backward(c.input, p.kernel, s.conv, g, need_input_grad);
    if (want_params) {
        accumulate(grads->stages_[i].kernel, cg.kernel);
        accumulate(grads->stages_[i].bias, cg.bias);
    }
    return std::move(cg.input);
}

FeatureVector Backbone::forward(const Tensor& image, Cache* cache) const {
    require_rank(image, 3, "extract_features");
    if (image.dim(0) != 3) {
        throw InputError("extract_features: expected a 3-channel image, got " + to_string(image.shape()));
    }
    const std::size_t largest = spec_.scales.front();
    if (image.dim(1) < largest || image.dim(2) < largest) {
        throw InputError("extract_features: image " + to_string(image.shape()) + " is smaller than the largest scale " +
                         std::to_string(largest));
    }
    const std::size_t top = spec_.top_channels;
    Tensor features({spec_.scales.size() * top});
    if (cache) cache->scales.assign(spec_.scales.size(), ScaleCache{});
    for (std::size_t si = 0; si < spec_.scales.size(); ++si) {
        const std::size_t side = spec_.scales[si];
        Tensor x = resize_bilinear(image, side, side);
        ScaleCache* sc = cache ? &cache->scales[si] : nullptr;
        if (sc) sc->stages.resize(stages_.size());
        for (std::size_t i = 0; i < stages_.size(); ++i) x = stage_forward(i, x, sc ? &sc->stages[i] : nullptr);
        const Tensor pooled = global_avg_pool(x);
        std::copy_n(pooled.data(), top, features.data() + si * top);
        if (sc) sc->top = std::move(x);
    }
    return FeatureVector{std::move(features)};
}

void Backbone::backward(const Cache& cache, const Tensor& grad_features, Backbone& grads, bool skip_convs) const {
    const std::size_t top = spec_.top_channels;
    if (grad_features.shape() != Shape{spec_.feature_dim()}) {
        throw DimensionError("backbone backward: gradient shape " + to_string(grad_features.shape()) +
                             " vs feature dim " + std::to_string(spec_.feature_dim()));
    }
    for (std::size_t si = 0; si < cache.scales.size(); ++si) {
        const ScaleCache& sc = cache.scales[si];
        Tensor g_top({top});
        std::copy_n(grad_features.data() + si * top, top, g_top.data());
        Tensor g = global_avg_pool_backward(sc.top.shape(), g_top);
        for (std::size_t i = stages_.size(); i-- > 0;) {
            g = stage_backward(i, sc.stages[i], g, &grads, skip_convs, i > 0);
        }
    }
}

Tensor Backbone::stage_output_gradient(const Cache& cache, const Tensor& grad_features, std::size_t scale,
                                       std::size_t stage) const {
    const std::size_t top = spec_.top_channels;
    if (scale >= cache.scales.size() || stage >= stages_.size()) {
        throw ConfigError("stage_output_gradient: scale " + std::to_string(scale) + " / stage index " +
                          std::to_string(stage) + " out of range (" + std::to_string(cache.scales.size()) + " scales, " +
                          std::to_string(stages_.size()) + " stages)");
    }
    if (grad_features.size() != cache.scales.size() * top) {
        throw DimensionError("stage_output_gradient: feature gradient " + to_string(grad_features.shape()) +
                             " does not match " + std::to_string(cache.scales.size() * top) + " features");
    }
    const ScaleCache& sc = cache.scales[scale];
    Tensor g_top({top});
    std::copy_n(grad_features.data() + scale * top, top, g_top.data());
    Tensor g = global_avg_pool_backward(sc.top.shape(), g_top);
    for (std::size_t i = stages_.size() - 1; i > stage; --i) {
        g = stage_backward(i, sc.stages[i], g, nullptr, true, true);
    }
    return g;
}

Tensor Backbone::pooled_from_stage(std::size_t stage, const Tensor& activation) const {
    if (stage >= stages_.size()) throw ConfigError("pooled_from_stage: stage index " + std::to_string(stage) + " out of range");
    Tensor x = activation;
    for (std::size_t i = stage + 1; i < stages_.size(); ++i) x = stage_forward(i, x, nullptr);
    return global_avg_pool(x);
}

const Tensor& Backbone::stage_output(const Cache& cache, std::size_t scale, std::size_t stage) {
    const ScaleCache& sc = cache.scales.at(scale);
    return stage + 1 < sc.stages.size() ? sc.stages[stage + 1].input : sc.top;
}

void Backbone::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const std::string prefix = stage_prefix(i);
        StageParams& p = stages_[i];
        fn(prefix + ".conv.kernel", p.kernel);
        fn(prefix + ".conv.bias", p.bias);
        if (p.se) adf::for_each_param(*p.se, [&](const std::string& n, Tensor& t) { fn(prefix + ".se." + n, t); });
        if (p.cbam) {
            adf::for_each_param(*p.cbam, [&](const std::string& n, Tensor& t) { fn(prefix + ".cbam." + n, t); });
        }
    }
}

void Backbone::for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<Backbone*>(this)->for_each_param([&](const std::string& n, Tensor& t) { fn(n, t); });
}

std::size_t Backbone::parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

std::vector<WeightRecord> Backbone::export_records() const {
    std::vector<WeightRecord> records;
    for_each_param([&](const std::string& name, const Tensor& t) { records.push_back(WeightRecord::from_tensor(name, t)); });
    return records;
}

void Backbone::import_records(const std::vector<WeightRecord>& records) {
    Backbone staged = *this;
    std::vector<std::string> expected;
    staged.for_each_param([&](const std::string& name, Tensor& t) {
        expected.push_back(name);
        const WeightRecord* r = find_record(records, name);
        const std::string stage = name.substr(0, name.find('.'));
        if (!r) throw FormatError(stage + ": weight file is missing record '" + name + "'");
        if (r->dtype != WeightDtype::f32) throw FormatError(stage + ": record '" + name + "' is not f32");
        if (r->dims != t.shape()) {
            throw FormatError(stage + " (stage index " + stage.substr(5) + "): record '" + name + "' has shape " +
                              to_string(r->dims) + ", model expects " + to_string(t.shape()));
        }
        std::copy(r->f32.begin(), r->f32.end(), t.values().begin());
    });
    for (const auto& r : records) {
        if (r.name.rfind("stage", 0) != 0) continue;
        if (std::find(expected.begin(), expected.end(), r.name) == expected.end()) {
            throw FormatError("weight file record '" + r.name + "' does not belong to this backbone");
        }
    }
    *this = std::move(staged);
}

void Backbone::export_weights(const std::filesystem::path& path) const { write_weight_file(path, export_records()); }

void Backbone::import_weights(const std::filesystem::path& path) { import_records(read_weight_file(path)); }

}  // namespace adf

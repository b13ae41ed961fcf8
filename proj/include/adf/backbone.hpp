#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "adf/attention.hpp"
#include "adf/ops.hpp"
#include "adf/tensor.hpp"
#include "adf/weights.hpp"

namespace adf {

/// conv -> relu -> optional max pool -> optional attention.
struct StageSpec {
    ConvSpec conv;
    bool pool = false;
    AttentionKind attention = AttentionKind::none;
};

struct BackboneSpec {
    std::vector<StageSpec> stages;
    /// Input side lengths of the image pyramid, strictly decreasing.
    std::vector<std::size_t> scales{256, 128, 64};
    std::size_t top_channels = 128;
    /// 0 selects default_reduction(C) per stage.
    std::size_t reduction_ratio = 0;
    std::size_t spatial_kernel = 7;
    std::size_t pool_window = 2;

    /// Five stages, 32-48-64-96-top channels, kernels 5/3/3/3/3 with "same"
    /// padding, pooling after stages 1, 2 and 5, `kind` attention everywhere.
    static BackboneSpec standard(AttentionKind kind, std::vector<std::size_t> scales = {256, 128, 64},
                                 std::size_t top_channels = 128);

    /// Throws ConfigError describing the first inconsistency.
    void validate() const;
    std::size_t feature_dim() const { return scales.size() * top_channels; }
    std::size_t reduction_for(std::size_t channels) const;
};

/// Concatenated per-scale globally pooled top-stage activations.
struct FeatureVector {
    Tensor values;
    std::size_t size() const { return values.size(); }
};

struct StageParams {
    Tensor kernel;
    Tensor bias;
    std::optional<SEParams> se;
    std::optional<CBAMParams> cbam;
};

class Backbone {
public:
    struct StageCache {
        Tensor input;
        Tensor conv_out;   // pre-activation
        Tensor activated;  // relu output, pool input
        Tensor gated_input;
        SECache se;
        CBAMCache cbam;
    };
    struct ScaleCache {
        std::vector<StageCache> stages;
        Tensor top;  // output of the final stage
    };
    struct Cache {
        std::vector<ScaleCache> scales;
    };

    Backbone() = default;

    /// He-style fan-in initialization for conv and gate-MLP input weights,
    /// zero biases, zero gate output layers (all gates start at 0.5).
    static Backbone build(const BackboneSpec& spec, std::uint64_t seed);

    /// Same structure with every parameter zero; used as a gradient buffer.
    Backbone zeros_like() const;

    const BackboneSpec& spec() const { return spec_; }
    std::vector<StageParams>& stages() { return stages_; }
    const std::vector<StageParams>& stages() const { return stages_; }
    std::size_t stage_count() const { return stages_.size(); }
    std::vector<std::string> stage_names() const;
    /// Index for "stage{i}" names (1-based); throws ConfigError listing valid names.
    std::size_t stage_index(const std::string& name) const;

    FeatureVector extract_features(const Tensor& image) const { return forward(image, nullptr); }
    FeatureVector forward(const Tensor& image, Cache* cache) const;

    /// Accumulates d loss / d parameters into `grads` (a zeros_like buffer).
    /// `skip_convs` leaves conv kernels and biases untouched.
    void backward(const Cache& cache, const Tensor& grad_features, Backbone& grads, bool skip_convs = false) const;

    /// d loss / d (output of `stage` at pyramid level `scale`), for a loss
    /// whose gradient with respect to the features is `grad_features`.
    Tensor stage_output_gradient(const Cache& cache, const Tensor& grad_features, std::size_t scale,
                                 std::size_t stage) const;
    static const Tensor& stage_output(const Cache& cache, std::size_t scale, std::size_t stage);
    /// Runs the stages after `stage` on `activation` and returns the globally
    /// pooled top activations ([top_channels]) for that pyramid level.
    Tensor pooled_from_stage(std::size_t stage, const Tensor& activation) const;

    /// Visits parameters under canonical names ("stage3.conv.kernel", "stage3.se.W1", ...).
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    std::size_t parameter_count() const;

    std::vector<WeightRecord> export_records() const;
    /// Replaces all parameters from `records` (records outside the backbone
    /// namespace, e.g. "flow.*", are ignored). Validates everything before
    /// mutating; on error the backbone is unchanged.
    void import_records(const std::vector<WeightRecord>& records);
    void export_weights(const std::filesystem::path& path) const;
    void import_weights(const std::filesystem::path& path);

private:
    ConvSpec conv_spec(std::size_t stage) const { return spec_.stages[stage].conv; }
    Tensor stage_forward(std::size_t stage, const Tensor& x, StageCache* cache) const;
    Tensor stage_backward(std::size_t stage, const StageCache& cache, const Tensor& grad_out, Backbone* grads,
                          bool skip_convs, bool need_input_grad) const;

    BackboneSpec spec_;
    std::vector<StageParams> stages_;
};

}  // namespace adf

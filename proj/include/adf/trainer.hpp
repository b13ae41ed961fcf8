#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "adf/backbone.hpp"
#include "adf/flow.hpp"
#include "adf/random.hpp"
#include "adf/tensor.hpp"

namespace adf {

struct TrainConfig {
    std::size_t epochs = 24;
    std::size_t batch_size = 16;  // images per step; each contributes n_train_transforms views
    float learning_rate = 2e-4f;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    std::size_t n_train_transforms = 4;
    std::uint64_t seed = 0;
    bool freeze_backbone = false;
    float backbone_lr_scale = 0.1f;  // multiplies learning_rate for every backbone parameter
    float feature_noise = 0.03f;     // std of Gaussian noise added to normalized training features
    float norm_floor = 0.1f;         // FeatureNorm::fit floor_fraction

    void validate() const;
};

struct ScoringConfig {
    std::size_t n_eval_transforms = 8;

    void validate() const;
    /// Identity followed by n-1 rotations evenly spaced over [0, 360).
    std::vector<double> rotations() const;
};

/// Fixed per-dimension standardization between backbone and flow, fitted
/// once from the training features before the first step. Its log-det is a
/// constant and is left out of the nll like D/2 log 2 pi.
struct FeatureNorm {
    Tensor mean;   // [D]
    Tensor scale;  // [D], strictly positive

    /// Standard deviations are floored at floor_fraction * rms(std) so
    /// constant dimensions do not blow up.
    static FeatureNorm fit(const Tensor& features, float floor_fraction = 0.1f);
    static FeatureNorm identity(std::size_t dim);

    std::size_t dim() const { return mean.size(); }
    /// Rows of a [B,D] tensor, or a single [D] vector.
    Tensor apply(const Tensor& f) const;
    /// d loss / d f from d loss / d apply(f).
    Tensor backward(const Tensor& grad) const;

    std::vector<WeightRecord> export_records() const;
    void import_records(const std::vector<WeightRecord>& records);
};

struct Model {
    Backbone backbone;
    FlowModel flow;
    FeatureNorm norm;

    /// nll of one feature vector through norm and flow.
    NllGradient nll_gradient(const Tensor& f) const;
};

/// Rotation and brightness factor of one augmented view.
struct AugmentParams {
    double degrees = 0.0;
    float brightness = 1.0f;
};

AugmentParams draw_augment(Rng& rng);
Tensor apply_augment(const Tensor& image, const AugmentParams& p);
/// Random rotation in [0, 360) about the center (bilinear, edge replication)
/// followed by brightness x U(0.9, 1.1).
Tensor augment(const Tensor& image, Rng& rng);

/// Adaptive-moment optimizer over a fixed list of parameter tensors.
class Adam {
public:
    Adam(std::vector<Tensor*> params, float lr, float beta1, float beta2, float eps);
    /// grads[i] has the shape of params[i]; null entries are skipped.
    void step(const std::vector<const Tensor*>& grads);
    /// Multiplies the learning rate of params[k] by s.
    void scale_lr(std::size_t k, float s);
    std::size_t steps() const { return t_; }

private:
    std::vector<Tensor*> params_;
    std::vector<Tensor> m_, v_;
    std::vector<float> scale_;
    float lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
};

struct EpochStats {
    std::size_t epoch = 0;  // 1-based
    double mean_nll = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> epochs;
};

/// Minimizes the mean nll of augmented training features. Throws
/// NumericError (naming epoch and batch) on a non-finite loss or when an
/// epoch mean exceeds the divergence limit, InputError on an empty set.
TrainResult train(Model& model, const std::vector<Tensor>& images, const TrainConfig& cfg,
                  const std::function<void(const EpochStats&)>& on_epoch = {});

/// Divergence limit derived from the first batch mean: 10x for positive
/// values, initial + 9|initial| in general, at least initial + 9.
double divergence_limit(double initial_nll);

/// nll of each eval transform of `image`, in rotations() order.
std::vector<float> transform_nlls(const Model& model, const Tensor& image, const ScoringConfig& cfg);
/// Mean of transform_nlls; higher means more anomalous.
float anomaly_score(const Model& model, const Tensor& image, const ScoringConfig& cfg);
std::vector<float> anomaly_scores(const Model& model, const std::vector<Tensor>& images, const ScoringConfig& cfg);

}  // namespace adf

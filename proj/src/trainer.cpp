#include "adf/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "adf/errors.hpp"
#include "adf/parallel.hpp"
#include "adf/resample.hpp"

namespace adf {

namespace {

std::vector<Tensor*> param_list(Backbone& b) {
    std::vector<Tensor*> out;
    b.for_each_param([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

std::vector<Tensor*> param_list(FlowModel& f) {
    std::vector<Tensor*> out;
    f.for_each_param([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

void zero(std::vector<Tensor*>& ts) {
    for (Tensor* t : ts) t->fill(0.0f);
}

Tensor stack_features(const std::vector<FeatureVector>& fs) {
    const std::size_t d = fs.front().size();
    Tensor out({fs.size(), d});
    for (std::size_t i = 0; i < fs.size(); ++i) std::copy_n(fs[i].values.data(), d, out.data() + i * d);
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (n_train_transforms == 0) throw ConfigError("n_train_transforms must be positive");
    if (!(learning_rate >= 0.0f) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (!(adam_beta1 >= 0.0f && adam_beta1 < 1.0f)) throw ConfigError("adam_beta1 must lie in [0,1)");
    if (!(adam_beta2 >= 0.0f && adam_beta2 < 1.0f)) throw ConfigError("adam_beta2 must lie in [0,1)");
    if (!(adam_eps > 0.0f)) throw ConfigError("adam_eps must be positive");
    if (!(backbone_lr_scale >= 0.0f) || !std::isfinite(backbone_lr_scale)) {
        throw ConfigError("backbone_lr_scale must be >= 0");
    }
    if (!(feature_noise >= 0.0f) || !std::isfinite(feature_noise)) throw ConfigError("feature_noise must be >= 0");
    if (!(norm_floor >= 0.0f) || !std::isfinite(norm_floor)) throw ConfigError("norm_floor must be >= 0");
}

void ScoringConfig::validate() const {
    if (n_eval_transforms == 0) throw ConfigError("n_eval_transforms must be at least 1");
}

std::vector<double> ScoringConfig::rotations() const {
    std::vector<double> out(n_eval_transforms);
    for (std::size_t i = 0; i < n_eval_transforms; ++i) {
        out[i] = 360.0 * static_cast<double>(i) / static_cast<double>(n_eval_transforms);
    }
    return out;
}

AugmentParams draw_augment(Rng& rng) {
    AugmentParams p;
    p.degrees = rng.uniform(0.0, 360.0);
    p.brightness = static_cast<float>(rng.uniform(0.9, 1.1));
    return p;
}

Tensor apply_augment(const Tensor& image, const AugmentParams& p) {
    Tensor out = p.degrees == 0.0 ? image : rotate(image, p.degrees);
    return p.brightness == 1.0f ? out : scale_brightness(out, p.brightness);
}

Tensor augment(const Tensor& image, Rng& rng) { return apply_augment(image, draw_augment(rng)); }

Adam::Adam(std::vector<Tensor*> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (Tensor* p : params_) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
    }
    scale_.assign(params_.size(), 1.0f);
}

void Adam::scale_lr(std::size_t k, float s) {
    if (k >= params_.size()) throw DimensionError("Adam::scale_lr: index out of range");
    scale_[k] = s;
}

void Adam::step(const std::vector<const Tensor*>& grads) {
    if (grads.size() != params_.size()) throw DimensionError("Adam::step: gradient count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(static_cast<double>(b1_), static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(static_cast<double>(b2_), static_cast<double>(t_));
    const float step = static_cast<float>(lr_ / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        if (!grads[k]) continue;
        Tensor& p = *params_[k];
        const Tensor& g = *grads[k];
        if (g.shape() != p.shape()) throw DimensionError("Adam::step: gradient shape mismatch");
        const float step_k = step * scale_[k];
        float* m = m_[k].data();
        float* v = v_[k].data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = b1_ * m[i] + (1.0f - b1_) * g[i];
            v[i] = b2_ * v[i] + (1.0f - b2_) * g[i] * g[i];
            p[i] -= step_k * m[i] / (std::sqrt(v[i] * inv_c2) + eps_);
        }
    }
}

FeatureNorm FeatureNorm::fit(const Tensor& features, float floor_fraction) {
    require_rank(features, 2, "FeatureNorm::fit");
    const std::size_t n = features.dim(0), d = features.dim(1);
    if (n == 0) throw InputError("FeatureNorm::fit: no samples");
    // Non-finite samples are skipped here; training reports them per batch.
    std::vector<double> mean(d, 0.0), var(d, 0.0), count(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::isfinite(features[i * d + j])) continue;
            mean[j] += features[i * d + j];
            count[j] += 1.0;
        }
    }
    for (std::size_t j = 0; j < d; ++j) mean[j] = count[j] > 0.0 ? mean[j] / count[j] : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::isfinite(features[i * d + j])) continue;
            const double x = features[i * d + j] - mean[j];
            var[j] += x * x;
        }
    }
    double mean_var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean_var += (var[j] = count[j] > 0.0 ? var[j] / count[j] : 0.0);
    mean_var /= static_cast<double>(d);
    const double floor = mean_var > 0.0 ? static_cast<double>(floor_fraction) * floor_fraction * mean_var : 1.0;

    FeatureNorm out;
    out.mean = Tensor({d});
    out.scale = Tensor({d});
    for (std::size_t j = 0; j < d; ++j) {
        out.mean[j] = static_cast<float>(mean[j]);
        out.scale[j] = static_cast<float>(std::sqrt(var[j] + floor));
    }
    return out;
}

FeatureNorm FeatureNorm::identity(std::size_t dim) {
    FeatureNorm out;
    out.mean = Tensor({dim});
    out.scale = Tensor({dim}, 1.0f);
    return out;
}

Tensor FeatureNorm::apply(const Tensor& f) const {
    const std::size_t d = dim();
    if (f.size() % d != 0 || f.shape().back() != d) {
        throw DimensionError("FeatureNorm: features " + to_string(f.shape()) + " vs dim " + std::to_string(d));
    }
    Tensor out = f;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % d]) / scale[i % d];
    return out;
}

Tensor FeatureNorm::backward(const Tensor& grad) const {
    const std::size_t d = dim();
    if (grad.size() % d != 0 || grad.shape().back() != d) {
        throw DimensionError("FeatureNorm: gradient " + to_string(grad.shape()) + " vs dim " + std::to_string(d));
    }
    Tensor out = grad;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= scale[i % d];
    return out;
}

std::vector<WeightRecord> FeatureNorm::export_records() const {
    return {WeightRecord::from_tensor("norm.mean", mean), WeightRecord::from_tensor("norm.scale", scale)};
}

void FeatureNorm::import_records(const std::vector<WeightRecord>& records) {
    FeatureNorm staged = *this;
    for (auto [name, t] : {std::pair{"norm.mean", &staged.mean}, std::pair{"norm.scale", &staged.scale}}) {
        const WeightRecord* r = find_record(records, name);
        if (!r) throw FormatError(std::string("weight file is missing record '") + name + "'");
        if (r->dtype != WeightDtype::f32 || r->dims != t->shape()) {
            throw FormatError(std::string("record '") + name + "' has shape " + to_string(r->dims) +
                              ", model expects " + to_string(t->shape()));
        }
        std::copy(r->f32.begin(), r->f32.end(), t->values().begin());
    }
    for (float v : staged.scale.values()) {
        if (!(v > 0.0f) || !std::isfinite(v)) throw FormatError("record 'norm.scale' must be positive and finite");
    }
    *this = std::move(staged);
}

NllGradient Model::nll_gradient(const Tensor& f) const {
    NllGradient g = adf::nll_gradient(flow, norm.apply(f));
    g.features = norm.backward(g.features);
    return g;
}

double divergence_limit(double initial_nll) { return initial_nll + 9.0 * std::max(std::abs(initial_nll), 1.0); }

TrainResult train(Model& model, const std::vector<Tensor>& images, const TrainConfig& cfg,
                  const std::function<void(const EpochStats&)>& on_epoch) {
    cfg.validate();
    if (images.empty()) throw InputError("train: no training images");
    if (model.backbone.spec().feature_dim() != model.flow.dim()) {
        throw DimensionError("train: backbone yields " + std::to_string(model.backbone.spec().feature_dim()) +
                             " features but the flow expects " + std::to_string(model.flow.dim()));
    }

    {
        Rng fit_rng(derive_seed(cfg.seed, 0x40F));
        const std::size_t n = images.size() * cfg.n_train_transforms;
        std::vector<AugmentParams> aug(n);
        for (auto& a : aug) a = draw_augment(fit_rng);
        std::vector<FeatureVector> feats(n);
        parallel_for(n, [&](std::size_t i) {
            feats[i] = model.backbone.extract_features(apply_augment(images[i / cfg.n_train_transforms], aug[i]));
        });
        model.norm = FeatureNorm::fit(stack_features(feats), cfg.norm_floor);
    }
    std::vector<Tensor*> params = param_list(model.backbone);
    const std::size_t n_backbone = params.size();
    for (Tensor* t : param_list(model.flow)) params.push_back(t);

    // Conv kernels and biases are skipped entirely when frozen.
    std::vector<bool> trainable(params.size(), true);
    if (cfg.freeze_backbone) {
        std::size_t k = 0;
        model.backbone.for_each_param([&](const std::string& name, Tensor&) {
            trainable[k++] = name.find(".conv.") == std::string::npos;
        });
    }
    Adam adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    for (std::size_t k = 0; k < n_backbone; ++k) adam.scale_lr(k, cfg.backbone_lr_scale);

    Backbone bb_grad = model.backbone.zeros_like();
    FlowModel flow_grad = model.flow.zeros_like();
    std::vector<Tensor*> bb_grad_list = param_list(bb_grad);
    std::vector<Tensor*> flow_grad_list = param_list(flow_grad);
    std::vector<const Tensor*> grads;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor* g = k < n_backbone ? bb_grad_list[k] : flow_grad_list[k - n_backbone];
        grads.push_back(trainable[k] ? g : nullptr);
    }

    const std::size_t per_step = cfg.batch_size * cfg.n_train_transforms;
    std::vector<Backbone> slots(per_step, model.backbone.zeros_like());
    std::vector<std::vector<Tensor*>> slot_lists;
    for (auto& s : slots) slot_lists.push_back(param_list(s));
    std::vector<Backbone::Cache> caches(per_step);

    Rng rng(derive_seed(cfg.seed, 0x7A1));
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    double initial = 0.0;
    bool have_initial = false;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        double epoch_sum = 0.0;
        std::size_t epoch_count = 0;
        for (std::size_t start = 0, batch = 1; start < order.size(); start += cfg.batch_size, ++batch) {
            const std::size_t n_img = std::min(cfg.batch_size, order.size() - start);
            const std::size_t n = n_img * cfg.n_train_transforms;
            std::vector<std::size_t> src(n);
            std::vector<AugmentParams> aug(n);
            for (std::size_t i = 0; i < n; ++i) {
                src[i] = order[start + i / cfg.n_train_transforms];
                aug[i] = draw_augment(rng);
            }

            std::vector<FeatureVector> feats(n);
            parallel_for(n, [&](std::size_t i) {
                feats[i] = model.backbone.forward(apply_augment(images[src[i]], aug[i]), &caches[i]);
            });
            const Tensor stacked = stack_features(feats);
            FlowModel::Cache fcache;
            Tensor normed = model.norm.apply(stacked);
            if (cfg.feature_noise > 0.0f) {
                for (auto& v : normed.values()) v += cfg.feature_noise * static_cast<float>(rng.normal());
            }
            FlowBatchOutput out;
            try {
                out = model.flow.forward_batch(normed, &fcache);
            } catch (const NumericError& e) {
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch) + ": " + e.what());
            }
            const std::vector<float> losses = nll_batch(out);
            double batch_sum = 0.0;
            for (float l : losses) batch_sum += l;
            const double batch_mean = batch_sum / static_cast<double>(n);
            if (!std::isfinite(batch_mean)) {
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch));
            }
            if (!have_initial) {
                initial = batch_mean;
                have_initial = true;
            }
            epoch_sum += batch_sum;
            epoch_count += n;

            // d mean / d z = z / n, d mean / d log_det = -1 / n
            const float inv_n = 1.0f / static_cast<float>(n);
            Tensor grad_z = out.z;
            for (auto& v : grad_z.values()) v *= inv_n;
            zero(flow_grad_list);
            const Tensor grad_f = model.norm.backward(
                model.flow.backward_batch(fcache, grad_z, std::vector<float>(n, -inv_n), &flow_grad));

            const std::size_t d = model.flow.dim();
            parallel_for(n, [&](std::size_t i) {
                zero(slot_lists[i]);
                Tensor g({d});
                std::copy_n(grad_f.data() + i * d, d, g.data());
                model.backbone.backward(caches[i], g, slots[i], cfg.freeze_backbone);
            });
            zero(bb_grad_list);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < bb_grad_list.size(); ++k) {
                    Tensor& acc = *bb_grad_list[k];
                    const Tensor& s = *slot_lists[i][k];
                    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += s[j];
                }
            }
            adam.step(grads);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.mean_nll = epoch_sum / static_cast<double>(epoch_count);
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.epochs.push_back(stats);
        if (on_epoch) on_epoch(stats);
        if (stats.mean_nll > divergence_limit(initial)) {
            throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": mean nll " +
                               std::to_string(stats.mean_nll) + " exceeds limit " +
                               std::to_string(divergence_limit(initial)));
        }
    }
    return result;
}

std::vector<float> transform_nlls(const Model& model, const Tensor& image, const ScoringConfig& cfg) {
    cfg.validate();
    const std::vector<double> rot = cfg.rotations();
    std::vector<FeatureVector> feats(rot.size());
    for (std::size_t i = 0; i < rot.size(); ++i) {
        feats[i] = model.backbone.extract_features(rot[i] == 0.0 ? image : rotate(image, rot[i]));
    }
    return nll_batch(model.flow.forward_batch(model.norm.apply(stack_features(feats))));
}

float anomaly_score(const Model& model, const Tensor& image, const ScoringConfig& cfg) {
    const std::vector<float> v = transform_nlls(model, image, cfg);
    double acc = 0.0;
    for (float x : v) acc += x;
    return static_cast<float>(acc / static_cast<double>(v.size()));
}

std::vector<float> anomaly_scores(const Model& model, const std::vector<Tensor>& images, const ScoringConfig& cfg) {
    std::vector<float> out(images.size());
    parallel_for(images.size(), [&](std::size_t i) { out[i] = anomaly_score(model, images[i], cfg); });
    return out;
}

}  // namespace adf

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "adf/tensor.hpp"
#include "adf/weights.hpp"

namespace adf {

struct FlowConfig {
    std::size_t dim = 0;
    std::size_t n_blocks = 8;
    /// 0 selects min(2 * dim, 512).
    std::size_t subnet_hidden = 0;
    float clamp = 3.0f;
    std::uint64_t seed = 0;

    std::size_t hidden() const { return subnet_hidden ? subnet_hidden : std::min<std::size_t>(2 * dim, 512); }
    void validate() const;
};

/// Two dense layers with a relu in between: half -> hidden -> half.
struct Subnet {
    Tensor w1;  // [hidden, half]
    Tensor b1;  // [hidden]
    Tensor w2;  // [half, hidden]
    Tensor b2;  // [half]
};

/// Fixed permutation followed by a two-sided affine coupling:
///   v1 = u1 * exp(c(s2(u2))) + t2(u2)
///   v2 = u2 * exp(c(s1(v1))) + t1(v1)
/// with the soft clamp c(x) = clamp * tanh(x / clamp).
struct CouplingBlock {
    std::vector<std::uint32_t> permutation;  // output[i] = input[permutation[i]]
    Subnet s1, t1, s2, t2;
};

struct FlowOutput {
    Tensor z;
    float log_det = 0.0f;
};

/// Batched output: z is [B, D], log_det is [B].
struct FlowBatchOutput {
    Tensor z;
    std::vector<float> log_det;
};

class FlowModel {
public:
    struct Cache;

    FlowModel() = default;

    /// Random permutations and fan-in scaled first layers; the last layer of
    /// every subnet is zero, so a fresh model is a pure permutation.
    static FlowModel build(const FlowConfig& cfg);
    FlowModel zeros_like() const;

    const FlowConfig& config() const { return cfg_; }
    std::size_t dim() const { return cfg_.dim; }
    std::vector<CouplingBlock>& blocks() { return blocks_; }
    const std::vector<CouplingBlock>& blocks() const { return blocks_; }

    FlowOutput forward(const Tensor& f) const;
    Tensor inverse(const Tensor& z) const;

    /// Rows of `f` ([B, D]) are independent samples.
    FlowBatchOutput forward_batch(const Tensor& f, Cache* cache = nullptr) const;
    Tensor inverse_batch(const Tensor& z) const;

    /// Given d loss / d z ([B, D]) and d loss / d log_det ([B]), accumulates
    /// parameter gradients into `grads` (a zeros_like buffer, may be null)
    /// and returns d loss / d f ([B, D]).
    Tensor backward_batch(const Cache& cache, const Tensor& grad_z, const std::vector<float>& grad_log_det,
                          FlowModel* grads) const;

    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    std::size_t parameter_count() const;

    std::vector<WeightRecord> export_records() const;
    /// Reads "flow.*" records; all-or-nothing.
    void import_records(const std::vector<WeightRecord>& records);

private:
    FlowConfig cfg_;
    std::vector<CouplingBlock> blocks_;
};

struct FlowModel::Cache {
    struct Block {
        Tensor u;  // permuted input [B, D]
        Tensor v1;
        Tensor s2_pre, s1_pre;
        Tensor h_s2, h_t2, h_s1, h_t1;  // subnet hidden pre-activations [B, hidden]
    };
    std::vector<Block> blocks;
    Tensor z;
};

/// ||z||^2 / 2 - log_det (the constant D/2 log 2 pi is omitted).
float nll(const FlowOutput& out);
std::vector<float> nll_batch(const FlowBatchOutput& out);

struct NllGradient {
    float nll = 0.0f;
    FlowModel params;  // gradient buffer shaped like the model
    Tensor features;   // d nll / d f
};

NllGradient nll_gradient(const FlowModel& model, const Tensor& f);

/// Soft clamp c(x) = alpha * tanh(x / alpha).
inline float soft_clamp(float x, float alpha) { return alpha * std::tanh(x / alpha); }

}  // namespace adf

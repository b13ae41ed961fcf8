#include "adf/flow.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "adf/errors.hpp"
#include "adf/random.hpp"

namespace adf {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using Idx = Eigen::Index;

ConstMapMat view(const Tensor& t) { return {t.data(), static_cast<Idx>(t.dim(0)), static_cast<Idx>(t.dim(1))}; }
MapMat view(Tensor& t) { return {t.data(), static_cast<Idx>(t.dim(0)), static_cast<Idx>(t.dim(1))}; }
Eigen::Map<const Eigen::RowVectorXf> row_view(const Tensor& t) { return {t.data(), static_cast<Idx>(t.size())}; }
Eigen::Map<Eigen::RowVectorXf> row_view(Tensor& t) { return {t.data(), static_cast<Idx>(t.size())}; }

Tensor from_mat(const RowMat& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    view(t) = m;
    return t;
}

// Output of a subnet for a batch `x` ([B, half]); stores the hidden
// pre-activation when requested.
RowMat subnet_forward(const RowMat& x, const Subnet& s, Tensor* hidden_pre) {
    RowMat pre = x * view(s.w1).transpose();
    pre.rowwise() += row_view(s.b1);
    RowMat out = pre.cwiseMax(0.0f) * view(s.w2).transpose();
    out.rowwise() += row_view(s.b2);
    if (hidden_pre) *hidden_pre = from_mat(pre);
    return out;
}

RowMat subnet_backward(const RowMat& x, const Subnet& s, const Tensor& hidden_pre, const RowMat& grad_out,
                       Subnet* grads) {
    const ConstMapMat pre = view(hidden_pre);
    const RowMat hidden = pre.cwiseMax(0.0f);
    RowMat g_hidden = grad_out * view(s.w2);
    g_hidden = g_hidden.cwiseProduct((pre.array() > 0.0f).cast<float>().matrix());
    if (grads) {
        view(grads->w2).noalias() += grad_out.transpose() * hidden;
        row_view(grads->b2) += grad_out.colwise().sum();
        view(grads->w1).noalias() += g_hidden.transpose() * x;
        row_view(grads->b1) += g_hidden.colwise().sum();
    }
    return g_hidden * view(s.w1);
}

RowMat clamp_of(const RowMat& pre, float alpha) {
    return pre.unaryExpr([alpha](float v) { return soft_clamp(v, alpha); });
}

RowMat clamp_grad(const RowMat& pre, float alpha) {
    return pre.unaryExpr([alpha](float v) {
        const float t = std::tanh(v / alpha);
        return 1.0f - t * t;
    });
}

void check_batch(const Tensor& x, std::size_t dim, const char* what) {
    if (x.rank() != 2 || x.dim(1) != dim) {
        throw DimensionError(std::string(what) + ": expected [B, " + std::to_string(dim) + "], got " +
                             to_string(x.shape()));
    }
}

Subnet make_subnet(std::size_t half, std::size_t hidden, Rng& rng) {
    Subnet s{Tensor({hidden, half}), Tensor({hidden}), Tensor({half, hidden}), Tensor({half})};
    const double std_dev = std::sqrt(2.0 / static_cast<double>(half));
    for (auto& v : s.w1.values()) v = static_cast<float>(rng.normal() * std_dev);
    return s;
}

void visit_subnet(Subnet& s, const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".W1", s.w1);
    fn(prefix + ".b1", s.b1);
    fn(prefix + ".W2", s.w2);
    fn(prefix + ".b2", s.b2);
}

}  // namespace

void FlowConfig::validate() const {
    if (dim == 0 || dim % 2 != 0) throw ConfigError("flow: dim must be positive and even, got " + std::to_string(dim));
    if (n_blocks == 0) throw ConfigError("flow: n_blocks must be positive");
    if (!(clamp > 0.0f)) throw ConfigError("flow: clamp must be positive");
}

FlowModel FlowModel::build(const FlowConfig& cfg) {
    cfg.validate();
    FlowModel m;
    m.cfg_ = cfg;
    const std::size_t half = cfg.dim / 2, hidden = cfg.hidden();
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        Rng rng(derive_seed(cfg.seed, 0xF10A, b));
        CouplingBlock block;
        block.permutation.resize(cfg.dim);
        std::iota(block.permutation.begin(), block.permutation.end(), 0u);
        for (std::size_t i = cfg.dim - 1; i > 0; --i) {
            std::swap(block.permutation[i], block.permutation[rng.below(i + 1)]);
        }
        block.s1 = make_subnet(half, hidden, rng);
        block.t1 = make_subnet(half, hidden, rng);
        block.s2 = make_subnet(half, hidden, rng);
        block.t2 = make_subnet(half, hidden, rng);
        m.blocks_.push_back(std::move(block));
    }
    return m;
}

FlowModel FlowModel::zeros_like() const {
    FlowModel z = *this;
    z.for_each_param([](const std::string&, Tensor& t) { t.fill(0.0f); });
    return z;
}

FlowBatchOutput FlowModel::forward_batch(const Tensor& f, Cache* cache) const {
    check_batch(f, cfg_.dim, "flow forward");
    const auto batch = static_cast<Idx>(f.dim(0));
    const auto half = static_cast<Idx>(cfg_.dim / 2);
    const float alpha = cfg_.clamp;
    RowMat x = view(f);
    Eigen::VectorXd log_det = Eigen::VectorXd::Zero(batch);
    if (cache) cache->blocks.assign(blocks_.size(), {});

    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
        const CouplingBlock& blk = blocks_[bi];
        RowMat u(batch, 2 * half);
        for (Idx i = 0; i < 2 * half; ++i) u.col(i) = x.col(blk.permutation[static_cast<std::size_t>(i)]);
        const RowMat u1 = u.leftCols(half), u2 = u.rightCols(half);
        Cache::Block* cb = cache ? &cache->blocks[bi] : nullptr;

        const RowMat s2_pre = subnet_forward(u2, blk.s2, cb ? &cb->h_s2 : nullptr);
        const RowMat t2 = subnet_forward(u2, blk.t2, cb ? &cb->h_t2 : nullptr);
        const RowMat sc2 = clamp_of(s2_pre, alpha);
        const RowMat v1 = u1.cwiseProduct(sc2.array().exp().matrix()) + t2;

        const RowMat s1_pre = subnet_forward(v1, blk.s1, cb ? &cb->h_s1 : nullptr);
        const RowMat t1 = subnet_forward(v1, blk.t1, cb ? &cb->h_t1 : nullptr);
        const RowMat sc1 = clamp_of(s1_pre, alpha);
        const RowMat v2 = u2.cwiseProduct(sc1.array().exp().matrix()) + t1;

        log_det += sc2.rowwise().sum().cast<double>() + sc1.rowwise().sum().cast<double>();
        if (cb) {
            cb->u = from_mat(u);
            cb->v1 = from_mat(v1);
            cb->s2_pre = from_mat(s2_pre);
            cb->s1_pre = from_mat(s1_pre);
        }
        x.leftCols(half) = v1;
        x.rightCols(half) = v2;
    }

    FlowBatchOutput out{from_mat(x), std::vector<float>(static_cast<std::size_t>(batch))};
    for (Idx b = 0; b < batch; ++b) out.log_det[static_cast<std::size_t>(b)] = static_cast<float>(log_det(b));
    if (!out.z.all_finite() ||
        !std::all_of(out.log_det.begin(), out.log_det.end(), [](float v) { return std::isfinite(v); })) {
        throw NumericError("flow forward produced non-finite values");
    }
    if (cache) cache->z = out.z;
    return out;
}

Tensor FlowModel::backward_batch(const Cache& cache, const Tensor& grad_z, const std::vector<float>& grad_log_det,
                                 FlowModel* grads) const {
    check_batch(grad_z, cfg_.dim, "flow backward");
    const auto batch = static_cast<Idx>(grad_z.dim(0));
    if (grad_log_det.size() != static_cast<std::size_t>(batch) || cache.blocks.size() != blocks_.size()) {
        throw DimensionError("flow backward: cache does not match the gradient batch");
    }
    const auto half = static_cast<Idx>(cfg_.dim / 2);
    const float alpha = cfg_.clamp;
    const Eigen::Map<const Eigen::VectorXf> gld(grad_log_det.data(), batch);
    RowMat g = view(grad_z);

    for (std::size_t bi = blocks_.size(); bi-- > 0;) {
        const CouplingBlock& blk = blocks_[bi];
        const Cache::Block& cb = cache.blocks[bi];
        CouplingBlock* gb = grads ? &grads->blocks_[bi] : nullptr;
        const ConstMapMat u = view(cb.u);
        const RowMat u1 = u.leftCols(half), u2 = u.rightCols(half);
        const RowMat v1 = view(cb.v1);
        const RowMat s1_pre = view(cb.s1_pre), s2_pre = view(cb.s2_pre);
        const RowMat e1 = clamp_of(s1_pre, alpha).array().exp().matrix();
        const RowMat e2 = clamp_of(s2_pre, alpha).array().exp().matrix();

        RowMat gv1 = g.leftCols(half);
        const RowMat gv2 = g.rightCols(half);

        // v2 = u2 * e1 + t1(v1)
        RowMat gu2 = gv2.cwiseProduct(e1);
        RowMat gsc1 = gv2.cwiseProduct(u2).cwiseProduct(e1);
        gsc1.colwise() += gld;
        const RowMat gs1 = gsc1.cwiseProduct(clamp_grad(s1_pre, alpha));
        gv1 += subnet_backward(v1, blk.s1, cb.h_s1, gs1, gb ? &gb->s1 : nullptr);
        gv1 += subnet_backward(v1, blk.t1, cb.h_t1, gv2, gb ? &gb->t1 : nullptr);

        // v1 = u1 * e2 + t2(u2)
        const RowMat gu1 = gv1.cwiseProduct(e2);
        RowMat gsc2 = gv1.cwiseProduct(u1).cwiseProduct(e2);
        gsc2.colwise() += gld;
        const RowMat gs2 = gsc2.cwiseProduct(clamp_grad(s2_pre, alpha));
        gu2 += subnet_backward(u2, blk.s2, cb.h_s2, gs2, gb ? &gb->s2 : nullptr);
        gu2 += subnet_backward(u2, blk.t2, cb.h_t2, gv1, gb ? &gb->t2 : nullptr);

        RowMat gx(batch, 2 * half);
        for (Idx i = 0; i < half; ++i) {
            gx.col(blk.permutation[static_cast<std::size_t>(i)]) = gu1.col(i);
            gx.col(blk.permutation[static_cast<std::size_t>(i + half)]) = gu2.col(i);
        }
        g = std::move(gx);
    }
    return from_mat(g);
}

Tensor FlowModel::inverse_batch(const Tensor& z) const {
    check_batch(z, cfg_.dim, "flow inverse");
    const auto batch = static_cast<Idx>(z.dim(0));
    const auto half = static_cast<Idx>(cfg_.dim / 2);
    const float alpha = cfg_.clamp;
    RowMat x = view(z);
    for (std::size_t bi = blocks_.size(); bi-- > 0;) {
        const CouplingBlock& blk = blocks_[bi];
        const RowMat v1 = x.leftCols(half), v2 = x.rightCols(half);
        const RowMat sc1 = clamp_of(subnet_forward(v1, blk.s1, nullptr), alpha);
        const RowMat u2 = (v2 - subnet_forward(v1, blk.t1, nullptr)).cwiseProduct((-sc1).array().exp().matrix());
        const RowMat sc2 = clamp_of(subnet_forward(u2, blk.s2, nullptr), alpha);
        const RowMat u1 = (v1 - subnet_forward(u2, blk.t2, nullptr)).cwiseProduct((-sc2).array().exp().matrix());
        RowMat prev(batch, 2 * half);
        for (Idx i = 0; i < half; ++i) {
            prev.col(blk.permutation[static_cast<std::size_t>(i)]) = u1.col(i);
            prev.col(blk.permutation[static_cast<std::size_t>(i + half)]) = u2.col(i);
        }
        x = std::move(prev);
    }
    return from_mat(x);
}

FlowOutput FlowModel::forward(const Tensor& f) const {
    if (f.rank() != 1 || f.size() != cfg_.dim) {
        throw DimensionError("flow forward: feature shape " + to_string(f.shape()) + " vs flow dim " +
                             std::to_string(cfg_.dim));
    }
    FlowBatchOutput out = forward_batch(f.reshaped({1, cfg_.dim}));
    return FlowOutput{out.z.reshaped({cfg_.dim}), out.log_det[0]};
}

Tensor FlowModel::inverse(const Tensor& z) const {
    if (z.rank() != 1 || z.size() != cfg_.dim) {
        throw DimensionError("flow inverse: latent shape " + to_string(z.shape()) + " vs flow dim " +
                             std::to_string(cfg_.dim));
    }
    return inverse_batch(z.reshaped({1, cfg_.dim})).reshaped({cfg_.dim});
}

void FlowModel::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::string prefix = "flow.block" + std::to_string(b);
        visit_subnet(blocks_[b].s1, prefix + ".s1", fn);
        visit_subnet(blocks_[b].t1, prefix + ".t1", fn);
        visit_subnet(blocks_[b].s2, prefix + ".s2", fn);
        visit_subnet(blocks_[b].t2, prefix + ".t2", fn);
    }
}

void FlowModel::for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<FlowModel*>(this)->for_each_param([&](const std::string& n, Tensor& t) { fn(n, t); });
}

std::size_t FlowModel::parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

std::vector<WeightRecord> FlowModel::export_records() const {
    std::vector<WeightRecord> records;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        records.push_back(WeightRecord::from_indices("flow.block" + std::to_string(b) + ".perm", blocks_[b].permutation));
    }
    for_each_param([&](const std::string& name, const Tensor& t) { records.push_back(WeightRecord::from_tensor(name, t)); });
    return records;
}

void FlowModel::import_records(const std::vector<WeightRecord>& records) {
    FlowModel staged = *this;
    for (std::size_t b = 0; b < staged.blocks_.size(); ++b) {
        const std::string name = "flow.block" + std::to_string(b) + ".perm";
        const WeightRecord* r = find_record(records, name);
        if (!r) throw FormatError("weight file is missing record '" + name + "'");
        if (r->dtype != WeightDtype::u32 || r->dims != Shape{cfg_.dim}) {
            throw FormatError("record '" + name + "' must be a u32 array of length " + std::to_string(cfg_.dim));
        }
        std::vector<bool> seen(cfg_.dim, false);
        for (auto idx : r->u32) {
            if (idx >= cfg_.dim || seen[idx]) throw FormatError("record '" + name + "' is not a permutation");
            seen[idx] = true;
        }
        staged.blocks_[b].permutation = r->u32;
    }
    staged.for_each_param([&](const std::string& name, Tensor& t) {
        const WeightRecord* r = find_record(records, name);
        if (!r) throw FormatError("weight file is missing record '" + name + "'");
        if (r->dtype != WeightDtype::f32 || r->dims != t.shape()) {
            throw FormatError("record '" + name + "' has shape " + to_string(r->dims) + ", model expects " +
                              to_string(t.shape()));
        }
        std::copy(r->f32.begin(), r->f32.end(), t.values().begin());
    });
    *this = std::move(staged);
}

float nll(const FlowOutput& out) {
    double sq = 0.0;
    for (float v : out.z.values()) sq += static_cast<double>(v) * v;
    return static_cast<float>(0.5 * sq - out.log_det);
}

std::vector<float> nll_batch(const FlowBatchOutput& out) {
    const std::size_t batch = out.z.dim(0), dim = out.z.dim(1);
    std::vector<float> result(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        double sq = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            const double v = out.z[b * dim + i];
            sq += v * v;
        }
        result[b] = static_cast<float>(0.5 * sq - out.log_det[b]);
    }
    return result;
}

NllGradient nll_gradient(const FlowModel& model, const Tensor& f) {
    if (f.rank() != 1 || f.size() != model.dim()) {
        throw DimensionError("nll_gradient: feature shape " + to_string(f.shape()) + " vs flow dim " +
                             std::to_string(model.dim()));
    }
    FlowModel::Cache cache;
    const FlowBatchOutput out = model.forward_batch(f.reshaped({1, model.dim()}), &cache);
    NllGradient g;
    g.nll = nll_batch(out)[0];
    g.params = model.zeros_like();
    g.features = model.backward_batch(cache, out.z, {-1.0f}, &g.params).reshaped({model.dim()});
    return g;
}

}  // namespace adf

#pragma once

// Helpers shared by the unit and acceptance suites: random tensors,
// straight-loop reference kernels and central finite differences. None of
// the reference code calls into the library kernels it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "adf/random.hpp"
#include "adf/tensor.hpp"

namespace adf::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

/// Cross-correlation with zero padding, four nested loops per output.
inline Tensor naive_conv2d(const Tensor& in, const Tensor& k, const Tensor& b, std::size_t stride, std::size_t pad) {
    const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2);
    const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
    Tensor out({cout, oh, ow});
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = b[o];
                for (std::size_t c = 0; c < cin; ++c)
                    for (std::size_t i = 0; i < kh; ++i)
                        for (std::size_t j = 0; j < kw; ++j) {
                            const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                            const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                            acc += static_cast<double>(in[(c * h + iy) * w + ix]) * k[((o * cin + c) * kh + i) * kw + j];
                        }
                out[(o * oh + y) * ow + x] = static_cast<float>(acc);
            }
    return out;
}

inline Tensor naive_max_pool(const Tensor& in, std::size_t window, std::size_t stride) {
    const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
    const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
    Tensor out({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                float m = -INFINITY;
                for (std::size_t i = 0; i < window; ++i)
                    for (std::size_t j = 0; j < window; ++j) m = std::max(m, in[(ch * h + y * stride + i) * w + x * stride + j]);
                out[(ch * oh + y) * ow + x] = m;
            }
    return out;
}

inline std::vector<double> naive_dense(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
    std::vector<double> out(w.dim(0));
    for (std::size_t i = 0; i < w.dim(0); ++i) {
        double acc = b[i];
        for (std::size_t j = 0; j < w.dim(1); ++j) acc += static_cast<double>(w[i * w.dim(1) + j]) * x[j];
        out[i] = acc;
    }
    return out;
}

inline double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Weighted sum sum_i w_i * t_i in double; the scalar probe loss used by
/// finite-difference checks.
inline double probe(const Tensor& t, const Tensor& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) acc += static_cast<double>(t[i]) * w[i];
    return acc;
}

/// Central differences of `loss` with respect to every entry of `x`.
inline Tensor numeric_gradient(Tensor& x, const std::function<double()>& loss, double eps = 1e-3) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float saved = x[i];
        const float hi = static_cast<float>(saved + eps), lo = static_cast<float>(saved - eps);
        x[i] = hi;
        const double up = loss();
        x[i] = lo;
        const double down = loss();
        x[i] = saved;
        g[i] = static_cast<float>((up - down) / (static_cast<double>(hi) - lo));
    }
    return g;
}

struct GradCheck {
    double worst = 0.0;  // largest relative error seen
    std::size_t index = 0;
    float analytic = 0.0f, numeric = 0.0f;
    bool ok(double tol) const { return worst <= tol; }
};

/// Relative error |a - n| / max(|a|, |n|, floor) per element.
inline GradCheck compare_gradients(const Tensor& analytic, const Tensor& numeric, double floor) {
    GradCheck r;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
        if (err > r.worst) r = GradCheck{err, i, analytic[i], numeric[i]};
    }
    return r;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("adf_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace adf::testing

#include "adf/flow.hpp"

namespace adf::testing {

/// Fills every flow weight with values uniform in +-min(0.5, gain/sqrt(fan_in));
/// biases in +-0.1.
inline void randomize_flow(FlowModel& model, Rng& rng, double gain = 1.0) {
    model.for_each_param([&](const std::string& name, Tensor& t) {
        if (t.rank() == 2) {
            const double b = std::min(0.5, gain / std::sqrt(static_cast<double>(t.dim(1))));
            for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-b, b));
        } else {
            for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
        }
        (void)name;
    });
}

/// Double-precision re-derivation of the coupling flow, written directly
/// from the block equations. Returns z and accumulates log|det J|.
inline std::vector<double> reference_flow(const FlowModel& model, const std::vector<double>& f, double* log_det) {
    const std::size_t d = model.dim(), half = d / 2;
    const double alpha = model.config().clamp;
    auto subnet = [](const Subnet& s, const std::vector<double>& x) {
        std::vector<double> h = naive_dense(x, s.w1, s.b1);
        for (auto& v : h) v = std::max(v, 0.0);
        return naive_dense(h, s.w2, s.b2);
    };
    auto clamp = [alpha](double v) { return alpha * std::tanh(v / alpha); };
    std::vector<double> x = f;
    double ld = 0.0;
    for (const auto& blk : model.blocks()) {
        std::vector<double> u(d);
        for (std::size_t i = 0; i < d; ++i) u[i] = x[blk.permutation[i]];
        const std::vector<double> u1(u.begin(), u.begin() + static_cast<long>(half));
        const std::vector<double> u2(u.begin() + static_cast<long>(half), u.end());
        const auto s2 = subnet(blk.s2, u2), t2 = subnet(blk.t2, u2);
        std::vector<double> v1(half), v2(half);
        for (std::size_t i = 0; i < half; ++i) {
            v1[i] = u1[i] * std::exp(clamp(s2[i])) + t2[i];
            ld += clamp(s2[i]);
        }
        const auto s1 = subnet(blk.s1, v1), t1 = subnet(blk.t1, v1);
        for (std::size_t i = 0; i < half; ++i) {
            v2[i] = u2[i] * std::exp(clamp(s1[i])) + t1[i];
            ld += clamp(s1[i]);
        }
        for (std::size_t i = 0; i < half; ++i) {
            x[i] = v1[i];
            x[half + i] = v2[i];
        }
    }
    if (log_det) *log_det = ld;
    return x;
}

/// Determinant by Gaussian elimination with partial pivoting.
inline double determinant(std::vector<std::vector<double>> a) {
    const std::size_t n = a.size();
    double det = 1.0;
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
        if (a[piv][c] == 0.0) return 0.0;
        if (piv != c) {
            std::swap(a[piv], a[c]);
            det = -det;
        }
        det *= a[c][c];
        for (std::size_t r = c + 1; r < n; ++r) {
            const double m = a[r][c] / a[c][c];
            for (std::size_t k = c; k < n; ++k) a[r][k] -= m * a[c][k];
        }
    }
    return det;
}

/// |det dz/df| from central differences of the reference flow.
inline double numeric_jacobian_det(const FlowModel& model, const std::vector<double>& f, double eps = 1e-5) {
    const std::size_t d = f.size();
    std::vector<std::vector<double>> jac(d, std::vector<double>(d));
    for (std::size_t j = 0; j < d; ++j) {
        auto up = f, down = f;
        up[j] += eps;
        down[j] -= eps;
        const auto zu = reference_flow(model, up, nullptr), zd = reference_flow(model, down, nullptr);
        for (std::size_t i = 0; i < d; ++i) jac[i][j] = (zu[i] - zd[i]) / (2.0 * eps);
    }
    return std::abs(determinant(jac));
}

}  // namespace adf::testing

#include "adf/backbone.hpp"
#include "adf/resample.hpp"

namespace adf::testing {

/// Plain double-precision feature map: channels x height x width.
struct MapD {
    std::size_t c = 0, h = 0, w = 0;
    std::vector<double> v;
    double& at(std::size_t ch, std::size_t y, std::size_t x) { return v[(ch * h + y) * w + x]; }
    double at(std::size_t ch, std::size_t y, std::size_t x) const { return v[(ch * h + y) * w + x]; }
};

inline MapD ref_conv(const MapD& in, const Tensor& k, const Tensor& b, std::size_t pad) {
    const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    MapD out{cout, in.h + 2 * pad - kh + 1, in.w + 2 * pad - kw + 1, {}};
    out.v.assign(out.c * out.h * out.w, 0.0);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t y = 0; y < out.h; ++y)
            for (std::size_t x = 0; x < out.w; ++x) {
                double acc = b[o];
                for (std::size_t c = 0; c < in.c; ++c)
                    for (std::size_t i = 0; i < kh; ++i)
                        for (std::size_t j = 0; j < kw; ++j) {
                            const long iy = static_cast<long>(y + i) - static_cast<long>(pad);
                            const long ix = static_cast<long>(x + j) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.h) || ix >= static_cast<long>(in.w)) continue;
                            acc += in.at(c, iy, ix) * k[((o * in.c + c) * kh + i) * kw + j];
                        }
                out.at(o, y, x) = acc;
            }
    return out;
}

inline std::vector<double> ref_mlp(const std::vector<double>& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                                   const Tensor& b2) {
    auto h = naive_dense(x, w1, b1);
    for (auto& v : h) v = std::max(v, 0.0);
    return naive_dense(h, w2, b2);
}

inline void ref_attention(MapD& m, const StageParams& p) {
    const std::size_t hw = m.h * m.w;
    std::vector<double> avg(m.c, 0.0), mx(m.c, -INFINITY);
    for (std::size_t c = 0; c < m.c; ++c)
        for (std::size_t i = 0; i < hw; ++i) {
            avg[c] += m.v[c * hw + i] / static_cast<double>(hw);
            mx[c] = std::max(mx[c], m.v[c * hw + i]);
        }
    if (p.se) {
        const auto logit = ref_mlp(avg, p.se->w1, p.se->b1, p.se->w2, p.se->b2);
        for (std::size_t c = 0; c < m.c; ++c)
            for (std::size_t i = 0; i < hw; ++i) m.v[c * hw + i] *= sigmoid_d(logit[c]);
    }
    if (p.cbam) {
        const auto& q = *p.cbam;
        const auto la = ref_mlp(avg, q.w1, q.b1, q.w2, q.b2), lm = ref_mlp(mx, q.w1, q.b1, q.w2, q.b2);
        for (std::size_t c = 0; c < m.c; ++c)
            for (std::size_t i = 0; i < hw; ++i) m.v[c * hw + i] *= sigmoid_d(la[c] + lm[c]);
        MapD stacked{2, m.h, m.w, std::vector<double>(2 * hw, 0.0)};
        for (std::size_t i = 0; i < hw; ++i) {
            double s = 0.0, best = -INFINITY;
            for (std::size_t c = 0; c < m.c; ++c) {
                s += m.v[c * hw + i];
                best = std::max(best, m.v[c * hw + i]);
            }
            stacked.v[i] = s / static_cast<double>(m.c);
            stacked.v[hw + i] = best;
        }
        const MapD gate = ref_conv(stacked, q.spatial_kernel, q.spatial_bias, q.kernel_size() / 2);
        for (std::size_t c = 0; c < m.c; ++c)
            for (std::size_t i = 0; i < hw; ++i) m.v[c * hw + i] *= sigmoid_d(gate.v[i]);
    }
}

/// Straight-loop double-precision backbone: resize (library, parameter
/// free) -> per stage conv, relu, 2x2 max pool, attention -> global average.
inline std::vector<double> reference_features(const Backbone& bb, const Tensor& image) {
    std::vector<double> feats;
    for (std::size_t size : bb.spec().scales) {
        const Tensor img = resize_bilinear(image, size, size);
        MapD m{3, size, size, {img.values().begin(), img.values().end()}};
        for (std::size_t s = 0; s < bb.stage_count(); ++s) {
            const StageSpec& spec = bb.spec().stages[s];
            const StageParams& p = bb.stages()[s];
            m = ref_conv(m, p.kernel, p.bias, spec.conv.padding);
            for (auto& v : m.v) v = std::max(v, 0.0);
            if (spec.pool) {
                const std::size_t win = bb.spec().pool_window;
                MapD pooled{m.c, (m.h - win) / win + 1, (m.w - win) / win + 1, {}};
                pooled.v.assign(pooled.c * pooled.h * pooled.w, -INFINITY);
                for (std::size_t c = 0; c < m.c; ++c)
                    for (std::size_t y = 0; y < pooled.h; ++y)
                        for (std::size_t x = 0; x < pooled.w; ++x)
                            for (std::size_t i = 0; i < win; ++i)
                                for (std::size_t j = 0; j < win; ++j)
                                    pooled.at(c, y, x) = std::max(pooled.at(c, y, x), m.at(c, y * win + i, x * win + j));
                m = pooled;
            }
            ref_attention(m, p);
        }
        for (std::size_t c = 0; c < m.c; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m.h * m.w; ++i) acc += m.v[c * m.h * m.w + i];
            feats.push_back(acc / static_cast<double>(m.h * m.w));
        }
    }
    return feats;
}

/// Every backbone parameter (gate output layers included) uniform in +-bound.
inline void randomize_backbone(Backbone& bb, Rng& rng, double bound = 0.5) {
    bb.for_each_param([&](const std::string&, Tensor& t) {
        for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-bound, bound));
    });
}

}  // namespace adf::testing

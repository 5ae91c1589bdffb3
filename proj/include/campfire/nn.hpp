#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "campfire/rng.hpp"

namespace campfire::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Col = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
void xavier_uniform(Mat<S>& w, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
}

template <class S>
struct Linear {
    Mat<S> w;  // in x out
    Mat<S> b;  // 1 x out

    static Linear init(int in, int out, Rng& rng) {
        Linear l{Mat<S>(in, out), Mat<S>::Zero(1, out)};
        xavier_uniform(l.w, rng);
        return l;
    }

    Mat<S> forward(const Mat<S>& x) const {
        Mat<S> y = x * w;
        y.rowwise() += b.row(0);
        return y;
    }

    /// Accumulates parameter gradients into `g` and returns dL/dx.
    Mat<S> backward(const Mat<S>& x, const Mat<S>& dy, Linear& g) const {
        g.w.noalias() += x.transpose() * dy;
        g.b += dy.colwise().sum();
        return dy * w.transpose();
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w", w, true);
        f(prefix + ".b", b, false);
    }
};

template <class S>
struct LayerNorm {
    Mat<S> gamma;  // 1 x d
    Mat<S> beta;   // 1 x d
    static constexpr double kEps = 1e-6;

    static LayerNorm init(int d) { return {Mat<S>::Ones(1, d), Mat<S>::Zero(1, d)}; }

    struct Cache {
        Mat<S> xhat;
        Col<S> inv_std;
    };

    Mat<S> forward(const Mat<S>& x, Cache* cache = nullptr) const {
        const Eigen::Index n = x.rows(), d = x.cols();
        Mat<S> xhat(n, d);
        Col<S> inv(n);
        for (Eigen::Index r = 0; r < n; ++r) {
            const S mean = x.row(r).mean();
            const S var = (x.row(r).array() - mean).square().mean();
            inv(r) = S(1) / std::sqrt(var + static_cast<S>(kEps));
            xhat.row(r) = (x.row(r).array() - mean) * inv(r);
        }
        Mat<S> y = xhat.array().rowwise() * gamma.row(0).array();
        y.rowwise() += beta.row(0);
        if (cache) *cache = {std::move(xhat), std::move(inv)};
        return y;
    }

    Mat<S> backward(const Cache& c, const Mat<S>& dy, LayerNorm& g) const {
        g.gamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
        g.beta += dy.colwise().sum();
        const Mat<S> dxhat = dy.array().rowwise() * gamma.row(0).array();
        const S d = static_cast<S>(dy.cols());
        Mat<S> dx(dy.rows(), dy.cols());
        for (Eigen::Index r = 0; r < dy.rows(); ++r) {
            const S s1 = dxhat.row(r).sum();
            const S s2 = dxhat.row(r).dot(c.xhat.row(r));
            dx.row(r) = (c.inv_std(r) / d) * (d * dxhat.row(r).array() - s1 - c.xhat.row(r).array() * s2);
        }
        return dx;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gamma", gamma, false);
        f(prefix + ".beta", beta, false);
    }
};

template <class S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * static_cast<S>(std::numbers::sqrt2 / 2)));
}

template <class S>
S gelu_grad(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x * static_cast<S>(std::numbers::sqrt2 / 2)));
    const S pdf = std::exp(S(-0.5) * x * x) * static_cast<S>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

/// Row-wise softmax, stable against large logits.
template <class S>
void softmax_rows(Mat<S>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const S mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp();
        m.row(r) /= m.row(r).sum();
    }
}

}  // namespace campfire::nn

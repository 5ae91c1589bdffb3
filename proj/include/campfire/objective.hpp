#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "campfire/error.hpp"

namespace campfire::objective {

template <class S>
using Plane = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using CPlane = Eigen::Matrix<std::complex<S>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Weights of the composite reconstruction loss. `h` is the fraction removed
/// by the outer-ring filter paired with lambda_h; `l` is the fraction removed
/// by the inner-ring filter paired with lambda_l.
struct LossWeights {
    double lambda_s = 0.75;
    double lambda_h = 0.0;
    double lambda_l = 0.25;
    double lambda_f = 0.0;
    double h = 0.3;
    double l = 0.3;

    void validate() const {
        for (double v : {lambda_s, lambda_h, lambda_l, lambda_f})
            if (!(v >= 0.0)) fail(ErrorCode::InvalidConfig, "loss weights must be non-negative");
        for (double v : {h, l})
            if (!(v >= 0.0 && v <= 1.0)) fail(ErrorCode::InvalidConfig, "filter fractions must lie in [0,1]");
    }
};

enum class FilterMode { ZeroOuter, ZeroInner };

namespace detail {

template <class S>
Eigen::FFT<S>& engine() {
    thread_local Eigen::FFT<S> fft = [] {
        Eigen::FFT<S> f;
        f.SetFlag(Eigen::FFT<S>::Unscaled);
        return f;
    }();
    return fft;
}

}  // namespace detail

/// Unitary 2-D DFT (1/sqrt(HW) in both directions), DC at index (0, 0).
template <class S>
CPlane<S> fft2(const CPlane<S>& in, bool inverse = false) {
    const Eigen::Index h = in.rows(), w = in.cols();
    auto& fft = detail::engine<S>();
    CPlane<S> out(h, w);
    std::vector<std::complex<S>> src(std::max(h, w)), dst(std::max(h, w));
    for (Eigen::Index r = 0; r < h; ++r) {
        for (Eigen::Index c = 0; c < w; ++c) src[c] = in(r, c);
        if (inverse) fft.inv(dst.data(), src.data(), w);
        else fft.fwd(dst.data(), src.data(), w);
        for (Eigen::Index c = 0; c < w; ++c) out(r, c) = dst[c];
    }
    for (Eigen::Index c = 0; c < w; ++c) {
        for (Eigen::Index r = 0; r < h; ++r) src[r] = out(r, c);
        if (inverse) fft.inv(dst.data(), src.data(), h);
        else fft.fwd(dst.data(), src.data(), h);
        for (Eigen::Index r = 0; r < h; ++r) out(r, c) = dst[r];
    }
    out *= S(1) / std::sqrt(static_cast<S>(h * w));
    return out;
}

template <class S>
CPlane<S> fft2_real(const Plane<S>& x) {
    return fft2<S>(x.template cast<std::complex<S>>());
}

/// Moves index (0,0) to (H/2, W/2).
template <class S>
CPlane<S> fftshift(const CPlane<S>& in) {
    const Eigen::Index h = in.rows(), w = in.cols();
    CPlane<S> out(h, w);
    for (Eigen::Index i = 0; i < h; ++i)
        for (Eigen::Index j = 0; j < w; ++j) out((i + h / 2) % h, (j + w / 2) % w) = in(i, j);
    return out;
}

template <class S>
CPlane<S> ifftshift(const CPlane<S>& in) {
    const Eigen::Index h = in.rows(), w = in.cols();
    CPlane<S> out(h, w);
    for (Eigen::Index i = 0; i < h; ++i)
        for (Eigen::Index j = 0; j < w; ++j) out(i, j) = in((i + h / 2) % h, (j + w / 2) % w);
    return out;
}

/// Centered spectrum: unitary DFT with DC at (H/2, W/2).
template <class S>
CPlane<S> fft2_centered(const Plane<S>& x) {
    return fftshift<S>(fft2_real<S>(x));
}

template <class S>
Plane<S> ifft2_centered_real(const CPlane<S>& centered, S* imag_residue = nullptr) {
    const CPlane<S> spatial = fft2<S>(ifftshift<S>(centered), true);
    if (imag_residue) *imag_residue = spatial.imag().norm();
    return spatial.real();
}

/// Normalised Chebyshev distance of centred index (i, j) from DC; 1 at the
/// far edge of each axis.
inline double ring_radius(Eigen::Index i, Eigen::Index j, Eigen::Index h, Eigen::Index w) {
    const double hh = static_cast<double>(h / 2), hw = static_cast<double>(w / 2);
    const double di = hh > 0 ? std::abs(static_cast<double>(i - h / 2)) / hh : 0.0;
    const double dj = hw > 0 ? std::abs(static_cast<double>(j - w / 2)) / hw : 0.0;
    return std::max(di, dj);
}

/// True where the filter zeroes the centred coefficient (i, j).
inline bool zeroed(FilterMode mode, double fraction, Eigen::Index i, Eigen::Index j, Eigen::Index h, Eigen::Index w) {
    const double rho = ring_radius(i, j, h, w);
    return mode == FilterMode::ZeroOuter ? rho > 1.0 - fraction : rho < fraction;
}

template <class S>
CPlane<S> apply_filter(const CPlane<S>& centered, FilterMode mode, double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) fail(ErrorCode::InvalidConfig, "filter fraction must lie in [0,1]");
    CPlane<S> out = centered;
    for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index j = 0; j < out.cols(); ++j)
            if (zeroed(mode, fraction, i, j, out.rows(), out.cols())) out(i, j) = 0;
    return out;
}

/// Zeroes coefficients beyond normalised Chebyshev radius 1 - fraction.
template <class S>
CPlane<S> zero_outer(const CPlane<S>& centered, double fraction) {
    return apply_filter<S>(centered, FilterMode::ZeroOuter, fraction);
}

/// Zeroes coefficients strictly inside normalised Chebyshev radius fraction.
template <class S>
CPlane<S> zero_inner(const CPlane<S>& centered, double fraction) {
    return apply_filter<S>(centered, FilterMode::ZeroInner, fraction);
}

template <class S>
Plane<S> filtered_image(const Plane<S>& x, FilterMode mode, double fraction, S* imag_residue = nullptr) {
    return ifft2_centered_real<S>(apply_filter<S>(fft2_centered<S>(x), mode, fraction), imag_residue);
}

/// Filter applied in unshifted coordinates; identical to filtered_image but
/// without the two shift copies.
template <class S>
Plane<S> filter_fast(const Plane<S>& x, FilterMode mode, double fraction) {
    CPlane<S> f = fft2_real<S>(x);
    const Eigen::Index h = f.rows(), w = f.cols();
    for (Eigen::Index i = 0; i < h; ++i)
        for (Eigen::Index j = 0; j < w; ++j)
            if (zeroed(mode, fraction, (i + h / 2) % h, (j + w / 2) % w, h, w)) f(i, j) = 0;
    return fft2<S>(f, true).real();
}

template <class S>
struct LossResult {
    S loss = 0;
    S spatial = 0, filter_h = 0, filter_l = 0, frequency = 0;  // weighted terms
    std::vector<Plane<S>> grad;                                // d loss / d prediction
};

/// Composite loss of one sample given per-channel planes. Every term is
/// normalised by the sample's element count M = C*H*W (2M for the L1 term,
/// which runs over real and imaginary parts).
template <class S>
LossResult<S> total_loss(const std::vector<Plane<S>>& target, const std::vector<Plane<S>>& pred,
                         const LossWeights& wts, bool want_grad = true) {
    if (target.size() != pred.size() || target.empty()) fail(ErrorCode::ShapeMismatch, "channel count mismatch");
    std::size_t m = 0;
    for (std::size_t c = 0; c < target.size(); ++c) {
        if (target[c].rows() != pred[c].rows() || target[c].cols() != pred[c].cols())
            fail(ErrorCode::ShapeMismatch, "plane shape mismatch");
        m += static_cast<std::size_t>(target[c].size());
    }
    const S inv_m = S(1) / static_cast<S>(m);
    LossResult<S> out;
    if (want_grad)
        for (const auto& p : pred) out.grad.push_back(Plane<S>::Zero(p.rows(), p.cols()));

    for (std::size_t c = 0; c < target.size(); ++c) {
        const Plane<S> r = pred[c] - target[c];
        if (wts.lambda_s > 0) {
            out.spatial += static_cast<S>(wts.lambda_s) * r.squaredNorm() * inv_m;
            if (want_grad) out.grad[c] += (static_cast<S>(2 * wts.lambda_s) * inv_m) * r;
        }
        auto filter_term = [&](double lambda, FilterMode mode, double fraction, S& acc) {
            if (lambda <= 0) return;
            const Plane<S> g = filter_fast<S>(r, mode, fraction);
            acc += static_cast<S>(lambda) * g.squaredNorm() * inv_m;
            // The filter is self-adjoint, so the chain rule applies it again.
            if (want_grad) out.grad[c] += (static_cast<S>(2 * lambda) * inv_m) * filter_fast<S>(g, mode, fraction);
        };
        filter_term(wts.lambda_h, FilterMode::ZeroOuter, wts.h, out.filter_h);
        filter_term(wts.lambda_l, FilterMode::ZeroInner, wts.l, out.filter_l);
        if (wts.lambda_f > 0) {
            const CPlane<S> z = fft2_real<S>(r);
            const S scale = static_cast<S>(wts.lambda_f) * inv_m / S(2);
            auto sgn = [](S v) { return static_cast<S>((v > 0) - (v < 0)); };
            S l1 = 0;
            CPlane<S> dir(z.rows(), z.cols());
            for (Eigen::Index i = 0; i < z.size(); ++i) {
                l1 += std::abs(z(i).real()) + std::abs(z(i).imag());
                dir(i) = {sgn(z(i).real()), sgn(z(i).imag())};
            }
            out.frequency += scale * l1;
            if (want_grad) out.grad[c] += scale * fft2<S>(dir, true).real();
        }
    }
    out.loss = out.spatial + out.filter_h + out.filter_l + out.frequency;
    return out;
}

}  // namespace campfire::objective

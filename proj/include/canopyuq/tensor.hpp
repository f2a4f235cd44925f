#pragma once

// Minimal NHWC tensor plus the layer primitives the network needs: 1x1 and
// 3x3 convolutions (im2col + GEMM through Eigen), batch normalization, ReLU,
// nearest-neighbor upsampling, channel concat, and the softplus head. Every
// primitive has an explicit backward; the scalar type is a template parameter
// so gradient checks can run the whole stack in double.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"

namespace canopyuq {

template <typename T>
struct Tensor4 {
    int n = 0, h = 0, w = 0, c = 0;
    std::vector<T> v;  // NHWC

    Tensor4() = default;
    Tensor4(int n_, int h_, int w_, int c_)
        : n(n_), h(h_), w(w_), c(c_),
          v(static_cast<size_t>(n_) * h_ * w_ * c_, T(0)) {}

    size_t size() const { return v.size(); }
    size_t pixels() const { return static_cast<size_t>(n) * h * w; }

    T& at(int ni, int hi, int wi, int ci) {
        return v[((static_cast<size_t>(ni) * h + hi) * w + wi) * c + ci];
    }
    T at(int ni, int hi, int wi, int ci) const {
        return v[((static_cast<size_t>(ni) * h + hi) * w + wi) * c + ci];
    }

    bool same_shape(const Tensor4& o) const {
        return n == o.n && h == o.h && w == o.w && c == o.c;
    }

    bool all_finite() const {
        for (const T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }
};

namespace nn {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatX<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatX<T>>;

// im2col for a 3x3 same-padded convolution: one row per output pixel, columns
// ordered tap-major then channel, matching the [9*c_in, c_out] weight layout.
template <typename T>
void im2col3(const Tensor4<T>& x, MatX<T>& col) {
    const int h = x.h, w = x.w, c = x.c;
    col.setZero(static_cast<Eigen::Index>(x.pixels()), 9 * c);
    for (int ni = 0; ni < x.n; ++ni) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(ni) * h + y) * w + xx;
                T* dst = col.data() + row * 9 * c;
                for (int tap = 0; tap < 9; ++tap) {
                    const int sy = y + tap / 3 - 1;
                    const int sx = xx + tap % 3 - 1;
                    if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                    const T* src = &x.v[((static_cast<size_t>(ni) * h + sy) * w + sx) * c];
                    std::copy_n(src, c, dst + static_cast<size_t>(tap) * c);
                }
            }
        }
    }
}

template <typename T>
void col2im3_add(const MatX<T>& dcol, Tensor4<T>& dx) {
    const int h = dx.h, w = dx.w, c = dx.c;
    for (int ni = 0; ni < dx.n; ++ni) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(ni) * h + y) * w + xx;
                const T* src = dcol.data() + row * 9 * c;
                for (int tap = 0; tap < 9; ++tap) {
                    const int sy = y + tap / 3 - 1;
                    const int sx = xx + tap % 3 - 1;
                    if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                    T* dst = &dx.v[((static_cast<size_t>(ni) * h + sy) * w + sx) * c];
                    const T* s = src + static_cast<size_t>(tap) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += s[ch];
                }
            }
        }
    }
}

// weight: [k*k*in_c, out_c] row-major; bias optional (head only).
template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const std::vector<T>& weight,
                          const std::vector<T>* bias, int k, int stride, int out_c) {
    const int in_c = x.c;
    Tensor4<T> y;
    if (k == 1 && stride == 1) {
        y = Tensor4<T>(x.n, x.h, x.w, out_c);
        CMapM<T> xm(x.v.data(), static_cast<Eigen::Index>(x.pixels()), in_c);
        CMapM<T> wm(weight.data(), in_c, out_c);
        MapM<T> ym(y.v.data(), static_cast<Eigen::Index>(y.pixels()), out_c);
        ym.noalias() = xm * wm;
    } else if (k == 1 && stride == 2) {
        if (x.h % 2 || x.w % 2)
            throw ArgError("conv2d: stride-2 needs even spatial dims");
        y = Tensor4<T>(x.n, x.h / 2, x.w / 2, out_c);
        MatX<T> xs(static_cast<Eigen::Index>(y.pixels()), in_c);
        for (int ni = 0; ni < x.n; ++ni)
            for (int yy = 0; yy < y.h; ++yy)
                for (int xx = 0; xx < y.w; ++xx) {
                    const Eigen::Index row =
                        (static_cast<Eigen::Index>(ni) * y.h + yy) * y.w + xx;
                    const T* src =
                        &x.v[((static_cast<size_t>(ni) * x.h + 2 * yy) * x.w + 2 * xx) * in_c];
                    std::copy_n(src, in_c, xs.data() + row * in_c);
                }
        CMapM<T> wm(weight.data(), in_c, out_c);
        MapM<T> ym(y.v.data(), static_cast<Eigen::Index>(y.pixels()), out_c);
        ym.noalias() = xs * wm;
    } else if (k == 3 && stride == 1) {
        y = Tensor4<T>(x.n, x.h, x.w, out_c);
        MatX<T> col;
        im2col3(x, col);
        CMapM<T> wm(weight.data(), 9 * in_c, out_c);
        MapM<T> ym(y.v.data(), static_cast<Eigen::Index>(y.pixels()), out_c);
        ym.noalias() = col * wm;
    } else {
        throw ArgError("conv2d: unsupported kernel/stride combination");
    }
    if (bias) {
        for (size_t p = 0; p < y.pixels(); ++p)
            for (int ch = 0; ch < out_c; ++ch) y.v[p * out_c + ch] += (*bias)[ch];
    }
    return y;
}

// Returns dx; accumulates dweight/dbias.
template <typename T>
Tensor4<T> conv2d_backward(const Tensor4<T>& x, const std::vector<T>& weight,
                           const Tensor4<T>& dy, int k, int stride, int out_c,
                           std::vector<T>& dweight, std::vector<T>* dbias) {
    const int in_c = x.c;
    Tensor4<T> dx(x.n, x.h, x.w, in_c);
    if (dbias) {
        for (size_t p = 0; p < dy.pixels(); ++p)
            for (int ch = 0; ch < out_c; ++ch) (*dbias)[ch] += dy.v[p * out_c + ch];
    }
    CMapM<T> dym(dy.v.data(), static_cast<Eigen::Index>(dy.pixels()), out_c);
    if (k == 1 && stride == 1) {
        CMapM<T> xm(x.v.data(), static_cast<Eigen::Index>(x.pixels()), in_c);
        CMapM<T> wm(weight.data(), in_c, out_c);
        MapM<T> dwm(dweight.data(), in_c, out_c);
        dwm.noalias() += xm.transpose() * dym;
        MapM<T> dxm(dx.v.data(), static_cast<Eigen::Index>(dx.pixels()), in_c);
        dxm.noalias() = dym * wm.transpose();
    } else if (k == 1 && stride == 2) {
        MatX<T> xs(static_cast<Eigen::Index>(dy.pixels()), in_c);
        for (int ni = 0; ni < x.n; ++ni)
            for (int yy = 0; yy < dy.h; ++yy)
                for (int xx = 0; xx < dy.w; ++xx) {
                    const Eigen::Index row =
                        (static_cast<Eigen::Index>(ni) * dy.h + yy) * dy.w + xx;
                    const T* src =
                        &x.v[((static_cast<size_t>(ni) * x.h + 2 * yy) * x.w + 2 * xx) * in_c];
                    std::copy_n(src, in_c, xs.data() + row * in_c);
                }
        CMapM<T> wm(weight.data(), in_c, out_c);
        MapM<T> dwm(dweight.data(), in_c, out_c);
        dwm.noalias() += xs.transpose() * dym;
        MatX<T> dxs = dym * wm.transpose();
        for (int ni = 0; ni < x.n; ++ni)
            for (int yy = 0; yy < dy.h; ++yy)
                for (int xx = 0; xx < dy.w; ++xx) {
                    const Eigen::Index row =
                        (static_cast<Eigen::Index>(ni) * dy.h + yy) * dy.w + xx;
                    T* dst =
                        &dx.v[((static_cast<size_t>(ni) * x.h + 2 * yy) * x.w + 2 * xx) * in_c];
                    const T* src = dxs.data() + row * in_c;
                    for (int ch = 0; ch < in_c; ++ch) dst[ch] += src[ch];
                }
    } else if (k == 3 && stride == 1) {
        MatX<T> col;
        im2col3(x, col);
        CMapM<T> wm(weight.data(), 9 * in_c, out_c);
        MapM<T> dwm(dweight.data(), 9 * in_c, out_c);
        dwm.noalias() += col.transpose() * dym;
        MatX<T> dcol = dym * wm.transpose();
        col2im3_add(dcol, dx);
    } else {
        throw ArgError("conv2d: unsupported kernel/stride combination");
    }
    return dx;
}

template <typename T>
struct BnCache {
    Tensor4<T> xhat;
    std::vector<double> inv_std;  // per channel
};

// Batch statistics when training (and running stats updated with momentum);
// running statistics at inference. Accumulation in double either way.
template <typename T>
Tensor4<T> batchnorm_forward(const Tensor4<T>& x, const std::vector<T>& gamma,
                             const std::vector<T>& beta, std::vector<T>& running_mean,
                             std::vector<T>& running_var, bool training, double momentum,
                             double eps, BnCache<T>* cache) {
    const int c = x.c;
    const size_t m = x.pixels();
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    if (training) {
        for (size_t p = 0; p < m; ++p)
            for (int ch = 0; ch < c; ++ch) mean[ch] += x.v[p * c + ch];
        for (int ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(m);
        for (size_t p = 0; p < m; ++p)
            for (int ch = 0; ch < c; ++ch) {
                const double d = x.v[p * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        for (int ch = 0; ch < c; ++ch) var[ch] /= static_cast<double>(m);
        for (int ch = 0; ch < c; ++ch) {
            running_mean[ch] = static_cast<T>(momentum * running_mean[ch] +
                                              (1.0 - momentum) * mean[ch]);
            running_var[ch] = static_cast<T>(momentum * running_var[ch] +
                                             (1.0 - momentum) * var[ch]);
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mean[ch] = running_mean[ch];
            var[ch] = running_var[ch];
        }
    }

    Tensor4<T> y(x.n, x.h, x.w, c);
    std::vector<double> inv_std(c);
    for (int ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
    Tensor4<T>* xhat = nullptr;
    if (cache) {
        cache->xhat = Tensor4<T>(x.n, x.h, x.w, c);
        cache->inv_std = inv_std;
        xhat = &cache->xhat;
    }
    for (size_t p = 0; p < m; ++p) {
        for (int ch = 0; ch < c; ++ch) {
            const double xh = (x.v[p * c + ch] - mean[ch]) * inv_std[ch];
            if (xhat) xhat->v[p * c + ch] = static_cast<T>(xh);
            y.v[p * c + ch] = static_cast<T>(gamma[ch] * xh + beta[ch]);
        }
    }
    return y;
}

template <typename T>
Tensor4<T> batchnorm_backward(const Tensor4<T>& dy, const BnCache<T>& cache,
                              const std::vector<T>& gamma, std::vector<T>& dgamma,
                              std::vector<T>& dbeta) {
    const int c = dy.c;
    const size_t m = dy.pixels();
    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (size_t p = 0; p < m; ++p) {
        for (int ch = 0; ch < c; ++ch) {
            const double g = dy.v[p * c + ch];
            sum_dy[ch] += g;
            sum_dy_xhat[ch] += g * cache.xhat.v[p * c + ch];
        }
    }
    for (int ch = 0; ch < c; ++ch) {
        dgamma[ch] += static_cast<T>(sum_dy_xhat[ch]);
        dbeta[ch] += static_cast<T>(sum_dy[ch]);
    }
    Tensor4<T> dx(dy.n, dy.h, dy.w, c);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (size_t p = 0; p < m; ++p) {
        for (int ch = 0; ch < c; ++ch) {
            const double g = dy.v[p * c + ch];
            const double xh = cache.xhat.v[p * c + ch];
            dx.v[p * c + ch] = static_cast<T>(
                gamma[ch] * cache.inv_std[ch] *
                (g - inv_m * sum_dy[ch] - xh * inv_m * sum_dy_xhat[ch]));
        }
    }
    return dx;
}

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x) {
    Tensor4<T> y = x;
    for (T& v : y.v) v = v > T(0) ? v : T(0);
    return y;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& dy, const Tensor4<T>& x_saved) {
    Tensor4<T> dx = dy;
    for (size_t i = 0; i < dx.v.size(); ++i)
        if (!(x_saved.v[i] > T(0))) dx.v[i] = T(0);
    return dx;
}

template <typename T>
Tensor4<T> upsample2_forward(const Tensor4<T>& x) {
    Tensor4<T> y(x.n, x.h * 2, x.w * 2, x.c);
    for (int ni = 0; ni < x.n; ++ni)
        for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx)
                std::copy_n(&x.v[((static_cast<size_t>(ni) * x.h + yy / 2) * x.w + xx / 2) * x.c],
                            x.c,
                            &y.v[((static_cast<size_t>(ni) * y.h + yy) * y.w + xx) * x.c]);
    return y;
}

template <typename T>
Tensor4<T> upsample2_backward(const Tensor4<T>& dy) {
    Tensor4<T> dx(dy.n, dy.h / 2, dy.w / 2, dy.c);
    for (int ni = 0; ni < dy.n; ++ni)
        for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx) {
                const T* src = &dy.v[((static_cast<size_t>(ni) * dy.h + yy) * dy.w + xx) * dy.c];
                T* dst =
                    &dx.v[((static_cast<size_t>(ni) * dx.h + yy / 2) * dx.w + xx / 2) * dy.c];
                for (int ch = 0; ch < dy.c; ++ch) dst[ch] += src[ch];
            }
    return dx;
}

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw ArgError("concat_channels: spatial shape mismatch");
    Tensor4<T> y(a.n, a.h, a.w, a.c + b.c);
    for (size_t p = 0; p < a.pixels(); ++p) {
        std::copy_n(&a.v[p * a.c], a.c, &y.v[p * y.c]);
        std::copy_n(&b.v[p * b.c], b.c, &y.v[p * y.c + a.c]);
    }
    return y;
}

// Split the channel-concat gradient back into its two parts.
template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> split_channels(const Tensor4<T>& dy, int c_first) {
    Tensor4<T> da(dy.n, dy.h, dy.w, c_first);
    Tensor4<T> db(dy.n, dy.h, dy.w, dy.c - c_first);
    for (size_t p = 0; p < dy.pixels(); ++p) {
        std::copy_n(&dy.v[p * dy.c], c_first, &da.v[p * c_first]);
        std::copy_n(&dy.v[p * dy.c + c_first], dy.c - c_first, &db.v[p * db.c]);
    }
    return {std::move(da), std::move(db)};
}

template <typename T>
T softplus(T x) {
    if (x > T(20)) return x;
    if (x < T(-20)) return std::exp(x);
    return std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace nn
}  // namespace canopyuq

#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace gbgn::kernels {

namespace {
inline int64_t imax(int64_t a, int64_t b) { return a > b ? a : b; }
inline int64_t imin(int64_t a, int64_t b) { return a < b ? a : b; }
} // namespace

void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const ConvDims& d) {
    const int64_t p = d.k / 2;
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t co = 0; co < d.co; ++co) {
            double* yp = y + ((n * d.co + co) * d.oh) * d.ow;
            const double b = bias ? bias[co] : 0.0;
            std::fill(yp, yp + d.oh * d.ow, b);
        }
    }
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t co = 0; co < d.co; ++co) {
            double* yplane = y + ((n * d.co + co) * d.oh) * d.ow;
            for (int64_t ci = 0; ci < d.ci; ++ci) {
                const double* xplane = x + ((n * d.ci + ci) * d.h) * d.w;
                const double* wk = w + ((co * d.ci + ci) * d.k) * d.k;
                for (int64_t ky = 0; ky < d.k; ++ky) {
                    for (int64_t kx = 0; kx < d.k; ++kx) {
                        const double wv = wk[ky * d.k + kx];
                        if (wv == 0.0) continue;
                        for (int64_t oy = 0; oy < d.oh; ++oy) {
                            const int64_t iy = oy * d.stride + ky - p;
                            if (iy < 0 || iy >= d.h) continue;
                            const double* xr = xplane + iy * d.w;
                            double* yr = yplane + oy * d.ow;
                            if (d.stride == 1) {
                                const int64_t shift = kx - p;
                                const int64_t ox0 = imax(0, -shift);
                                const int64_t ox1 = imin(d.ow, d.w - shift);
                                const double* xs = xr + shift;
                                for (int64_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xs[ox];
                            } else {
                                for (int64_t ox = 0; ox < d.ow; ++ox) {
                                    const int64_t ix = ox * d.stride + kx - p;
                                    if (ix < 0 || ix >= d.w) continue;
                                    yr[ox] += wv * xr[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvDims& d) {
    const int64_t p = d.k / 2;
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t ci = 0; ci < d.ci; ++ci) {
            double* dxp = dx + ((n * d.ci + ci) * d.h) * d.w;
            for (int64_t co = 0; co < d.co; ++co) {
                const double* dyp = dy + ((n * d.co + co) * d.oh) * d.ow;
                const double* wk = w + ((co * d.ci + ci) * d.k) * d.k;
                for (int64_t ky = 0; ky < d.k; ++ky) {
                    for (int64_t kx = 0; kx < d.k; ++kx) {
                        const double wv = wk[ky * d.k + kx];
                        if (wv == 0.0) continue;
                        for (int64_t oy = 0; oy < d.oh; ++oy) {
                            const int64_t iy = oy * d.stride + ky - p;
                            if (iy < 0 || iy >= d.h) continue;
                            double* dxr = dxp + iy * d.w;
                            const double* dyr = dyp + oy * d.ow;
                            if (d.stride == 1) {
                                const int64_t shift = kx - p;
                                const int64_t ox0 = imax(0, -shift);
                                const int64_t ox1 = imin(d.ow, d.w - shift);
                                double* dxs = dxr + shift;
                                for (int64_t ox = ox0; ox < ox1; ++ox) dxs[ox] += wv * dyr[ox];
                            } else {
                                for (int64_t ox = 0; ox < d.ow; ++ox) {
                                    const int64_t ix = ox * d.stride + kx - p;
                                    if (ix < 0 || ix >= d.w) continue;
                                    dxr[ix] += wv * dyr[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_weight(const double* dy, const double* x, double* dw, const ConvDims& d) {
    const int64_t p = d.k / 2;
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t co = 0; co < d.co; ++co) {
            const double* dyp = dy + ((n * d.co + co) * d.oh) * d.ow;
            for (int64_t ci = 0; ci < d.ci; ++ci) {
                const double* xplane = x + ((n * d.ci + ci) * d.h) * d.w;
                double* wk = dw + ((co * d.ci + ci) * d.k) * d.k;
                for (int64_t ky = 0; ky < d.k; ++ky) {
                    for (int64_t kx = 0; kx < d.k; ++kx) {
                        double acc = 0.0;
                        for (int64_t oy = 0; oy < d.oh; ++oy) {
                            const int64_t iy = oy * d.stride + ky - p;
                            if (iy < 0 || iy >= d.h) continue;
                            const double* xr = xplane + iy * d.w;
                            const double* dyr = dyp + oy * d.ow;
                            if (d.stride == 1) {
                                const int64_t shift = kx - p;
                                const int64_t ox0 = imax(0, -shift);
                                const int64_t ox1 = imin(d.ow, d.w - shift);
                                const double* xs = xr + shift;
                                for (int64_t ox = ox0; ox < ox1; ++ox) acc += xs[ox] * dyr[ox];
                            } else {
                                for (int64_t ox = 0; ox < d.ow; ++ox) {
                                    const int64_t ix = ox * d.stride + kx - p;
                                    if (ix < 0 || ix >= d.w) continue;
                                    acc += xr[ix] * dyr[ox];
                                }
                            }
                        }
                        wk[ky * d.k + kx] += acc;
                    }
                }
            }
        }
    }
}

void conv2d_backward_bias(const double* dy, double* db, const ConvDims& d) {
    for (int64_t n = 0; n < d.n; ++n) {
        for (int64_t co = 0; co < d.co; ++co) {
            const double* dyp = dy + ((n * d.co + co) * d.oh) * d.ow;
            double acc = 0.0;
            for (int64_t i = 0; i < d.oh * d.ow; ++i) acc += dyp[i];
            db[co] += acc;
        }
    }
}

void matmul_forward(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    std::fill(c, c + m * n, 0.0);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t l = 0; l < k; ++l) {
            const double av = a[i * k + l];
            if (av == 0.0) continue;
            const double* br = b + l * n;
            double* cr = c + i * n;
            for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

void avgpool_forward(const double* x, double* y, int64_t n, int64_t c, int64_t h, int64_t w,
                     int64_t out_h, int64_t out_w) {
    const int64_t bh = h / out_h, bw = w / out_w;
    const double inv = 1.0 / static_cast<double>(bh * bw);
    for (int64_t p = 0; p < n * c; ++p) {
        const double* xp = x + p * h * w;
        double* yp = y + p * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            for (int64_t ox = 0; ox < out_w; ++ox) {
                double acc = 0.0;
                for (int64_t by = 0; by < bh; ++by) {
                    const double* xr = xp + (oy * bh + by) * w + ox * bw;
                    for (int64_t bx = 0; bx < bw; ++bx) acc += xr[bx];
                }
                yp[oy * out_w + ox] = acc * inv;
            }
        }
    }
}

void avgpool_backward(const double* dy, double* dx, int64_t n, int64_t c, int64_t h, int64_t w,
                      int64_t out_h, int64_t out_w) {
    const int64_t bh = h / out_h, bw = w / out_w;
    const double inv = 1.0 / static_cast<double>(bh * bw);
    for (int64_t p = 0; p < n * c; ++p) {
        const double* dyp = dy + p * out_h * out_w;
        double* dxp = dx + p * h * w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const double g = dyp[oy * out_w + ox] * inv;
                for (int64_t by = 0; by < bh; ++by) {
                    double* dxr = dxp + (oy * bh + by) * w + ox * bw;
                    for (int64_t bx = 0; bx < bw; ++bx) dxr[bx] += g;
                }
            }
        }
    }
}

void upsample_nearest_forward(const double* x, double* y, int64_t n, int64_t c, int64_t h, int64_t w,
                              int64_t fy, int64_t fx) {
    const int64_t oh = h * fy, ow = w * fx;
    for (int64_t p = 0; p < n * c; ++p) {
        const double* xp = x + p * h * w;
        double* yp = y + p * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
            const double* xr = xp + (oy / fy) * w;
            double* yr = yp + oy * ow;
            for (int64_t ox = 0; ox < ow; ++ox) yr[ox] = xr[ox / fx];
        }
    }
}

void upsample_nearest_backward(const double* dy, double* dx, int64_t n, int64_t c, int64_t h, int64_t w,
                               int64_t fy, int64_t fx) {
    const int64_t oh = h * fy, ow = w * fx;
    for (int64_t p = 0; p < n * c; ++p) {
        const double* dyp = dy + p * oh * ow;
        double* dxp = dx + p * h * w;
        for (int64_t oy = 0; oy < oh; ++oy) {
            const double* dyr = dyp + oy * ow;
            double* dxr = dxp + (oy / fy) * w;
            for (int64_t ox = 0; ox < ow; ++ox) dxr[ox / fx] += dyr[ox];
        }
    }
}

WarpCell warp_cell(double u, int64_t w) {
    if (u <= 0.0) return {0, 0.0, true};
    if (u >= static_cast<double>(w - 1)) return {w - 1, 0.0, true};
    const double fl = std::floor(u);
    int64_t x0 = static_cast<int64_t>(fl);
    double f = u - fl;
    if (f == 0.0) {
        x0 -= 1;
        f = 1.0;
    }
    return {x0, f, false};
}

void warp1d_forward(const double* right, const double* disp, double* y, int64_t n, int64_t c,
                    int64_t h, int64_t w) {
    for (int64_t nn = 0; nn < n; ++nn) {
        const double* dplane = disp + (nn * h) * w;
        for (int64_t cc = 0; cc < c; ++cc) {
            const double* rp = right + ((nn * c + cc) * h) * w;
            double* yp = y + ((nn * c + cc) * h) * w;
            for (int64_t yy = 0; yy < h; ++yy) {
                const double* rr = rp + yy * w;
                const double* dr = dplane + yy * w;
                double* yr = yp + yy * w;
                for (int64_t xx = 0; xx < w; ++xx) {
                    const WarpCell cell = warp_cell(static_cast<double>(xx) - dr[xx], w);
                    if (cell.clamped)
                        yr[xx] = rr[cell.x0];
                    else
                        yr[xx] = (1.0 - cell.f) * rr[cell.x0] + cell.f * rr[cell.x0 + 1];
                }
            }
        }
    }
}

void warp1d_backward(const double* right, const double* disp, const double* dy, double* dright,
                     double* ddisp, int64_t n, int64_t c, int64_t h, int64_t w) {
    for (int64_t nn = 0; nn < n; ++nn) {
        const double* dplane = disp + (nn * h) * w;
        double* ddplane = ddisp ? ddisp + (nn * h) * w : nullptr;
        for (int64_t cc = 0; cc < c; ++cc) {
            const double* rp = right + ((nn * c + cc) * h) * w;
            const double* dyp = dy + ((nn * c + cc) * h) * w;
            double* drp = dright ? dright + ((nn * c + cc) * h) * w : nullptr;
            for (int64_t yy = 0; yy < h; ++yy) {
                const double* rr = rp + yy * w;
                const double* dr = dplane + yy * w;
                const double* dyr = dyp + yy * w;
                double* drr = drp ? drp + yy * w : nullptr;
                double* ddr = ddplane ? ddplane + yy * w : nullptr;
                for (int64_t xx = 0; xx < w; ++xx) {
                    const WarpCell cell = warp_cell(static_cast<double>(xx) - dr[xx], w);
                    const double g = dyr[xx];
                    if (cell.clamped) {
                        if (drr) drr[cell.x0] += g;
                        continue;
                    }
                    if (drr) {
                        drr[cell.x0] += (1.0 - cell.f) * g;
                        drr[cell.x0 + 1] += cell.f * g;
                    }
                    if (ddr) {
                        const double slope = rr[cell.x0 + 1] - rr[cell.x0];
                        ddr[xx] += -slope * g; // d(out)/d(d) = -d(out)/du
                    }
                }
            }
        }
    }
}

void channelnorm_forward(const double* x, const double* gamma, const double* beta, double* y,
                         double* saved_mean, double* saved_inv_std, int64_t n, int64_t c, int64_t h,
                         int64_t w, double eps) {
    const int64_t hw = h * w;
    const double m = static_cast<double>(n * hw);
    for (int64_t cc = 0; cc < c; ++cc) {
        double sum = 0.0, sq = 0.0;
        for (int64_t nn = 0; nn < n; ++nn) {
            const double* xp = x + ((nn * c + cc) * hw);
            for (int64_t i = 0; i < hw; ++i) {
                sum += xp[i];
                sq += xp[i] * xp[i];
            }
        }
        const double mu = sum / m;
        const double var = std::max(0.0, sq / m - mu * mu);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        saved_mean[cc] = mu;
        saved_inv_std[cc] = inv_std;
        const double a = gamma[cc] * inv_std;
        const double b = beta[cc] - a * mu;
        for (int64_t nn = 0; nn < n; ++nn) {
            const double* xp = x + ((nn * c + cc) * hw);
            double* yp = y + ((nn * c + cc) * hw);
            for (int64_t i = 0; i < hw; ++i) yp[i] = a * xp[i] + b;
        }
    }
}

void channelnorm_backward(const double* x, const double* gamma, const double* dy,
                          const double* saved_mean, const double* saved_inv_std, double* dx,
                          double* dgamma, double* dbeta, int64_t n, int64_t c, int64_t h, int64_t w) {
    const int64_t hw = h * w;
    const double m = static_cast<double>(n * hw);
    for (int64_t cc = 0; cc < c; ++cc) {
        const double mu = saved_mean[cc];
        const double inv_std = saved_inv_std[cc];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int64_t nn = 0; nn < n; ++nn) {
            const double* xp = x + ((nn * c + cc) * hw);
            const double* dyp = dy + ((nn * c + cc) * hw);
            for (int64_t i = 0; i < hw; ++i) {
                const double xhat = (xp[i] - mu) * inv_std;
                sum_dy += dyp[i];
                sum_dy_xhat += dyp[i] * xhat;
            }
        }
        if (dgamma) dgamma[cc] += sum_dy_xhat;
        if (dbeta) dbeta[cc] += sum_dy;
        if (dx) {
            const double a = gamma[cc] * inv_std;
            const double mean_dy = sum_dy / m;
            const double mean_dy_xhat = sum_dy_xhat / m;
            for (int64_t nn = 0; nn < n; ++nn) {
                const double* xp = x + ((nn * c + cc) * hw);
                const double* dyp = dy + ((nn * c + cc) * hw);
                double* dxp = dx + ((nn * c + cc) * hw);
                for (int64_t i = 0; i < hw; ++i) {
                    const double xhat = (xp[i] - mu) * inv_std;
                    dxp[i] += a * (dyp[i] - mean_dy - xhat * mean_dy_xhat);
                }
            }
        }
    }
}

void log_softmax_forward(const double* x, double* y, int64_t n, int64_t c, int64_t h, int64_t w) {
    const int64_t hw = h * w;
    for (int64_t nn = 0; nn < n; ++nn) {
        const double* xb = x + nn * c * hw;
        double* yb = y + nn * c * hw;
        for (int64_t i = 0; i < hw; ++i) {
            double mx = xb[i];
            for (int64_t cc = 1; cc < c; ++cc) mx = std::max(mx, xb[cc * hw + i]);
            double lse = 0.0;
            for (int64_t cc = 0; cc < c; ++cc) lse += std::exp(xb[cc * hw + i] - mx);
            lse = mx + std::log(lse);
            for (int64_t cc = 0; cc < c; ++cc) yb[cc * hw + i] = xb[cc * hw + i] - lse;
        }
    }
}

void log_softmax_backward(const double* y, const double* dy, double* dx, int64_t n, int64_t c,
                          int64_t h, int64_t w) {
    const int64_t hw = h * w;
    for (int64_t nn = 0; nn < n; ++nn) {
        const double* yb = y + nn * c * hw;
        const double* dyb = dy + nn * c * hw;
        double* dxb = dx + nn * c * hw;
        for (int64_t i = 0; i < hw; ++i) {
            double s = 0.0;
            for (int64_t cc = 0; cc < c; ++cc) s += dyb[cc * hw + i];
            for (int64_t cc = 0; cc < c; ++cc)
                dxb[cc * hw + i] += dyb[cc * hw + i] - std::exp(yb[cc * hw + i]) * s;
        }
    }
}

} // namespace gbgn::kernels

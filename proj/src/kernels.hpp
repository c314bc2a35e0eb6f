#pragma once

// Internal dense kernels. All image-domain buffers are row-major
// [N, C, H, W]; backward kernels accumulate into pre-zeroed outputs.

#include <cstdint>

namespace gbgn::kernels {

struct ConvDims {
    int64_t n, ci, h, w; // input
    int64_t co, k;       // kernel (square), pad = k / 2
    int64_t stride;
    int64_t oh, ow;      // output
};

void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const ConvDims& d);
void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvDims& d);
void conv2d_backward_weight(const double* dy, const double* x, double* dw, const ConvDims& d);
void conv2d_backward_bias(const double* dy, double* db, const ConvDims& d);

void matmul_forward(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// y[n,c,oy,ox] = mean of the (h/out_h)x(w/out_w) block.
void avgpool_forward(const double* x, double* y, int64_t n, int64_t c, int64_t h, int64_t w,
                     int64_t out_h, int64_t out_w);
void avgpool_backward(const double* dy, double* dx, int64_t n, int64_t c, int64_t h, int64_t w,
                      int64_t out_h, int64_t out_w);

void upsample_nearest_forward(const double* x, double* y, int64_t n, int64_t c, int64_t h, int64_t w,
                              int64_t fy, int64_t fx);
void upsample_nearest_backward(const double* dy, double* dx, int64_t n, int64_t c, int64_t h, int64_t w,
                               int64_t fy, int64_t fx);

// Sampling rule for the 1-d warp. For u inside the row the cell is
// [x0, x0+1] with fractional weight f on the right end; at exact integer u the
// left cell is used (f = 1), so the offset derivative is the left cell's
// slope. Clamped samples have zero offset derivative.
struct WarpCell {
    int64_t x0;
    double f;
    bool clamped;
};
WarpCell warp_cell(double u, int64_t w);

// Horizontal bilinear resampling of `right` at x - d. Out-of-frame samples
// clamp to the row edge; at exact integer offsets the offset-derivative takes
// the left cell's slope.
void warp1d_forward(const double* right, const double* disp, double* y, int64_t n, int64_t c,
                    int64_t h, int64_t w);
void warp1d_backward(const double* right, const double* disp, const double* dy, double* dright,
                     double* ddisp, int64_t n, int64_t c, int64_t h, int64_t w);

// Per-channel statistics over (N, H, W); saves mean and 1/sqrt(var+eps) per
// channel for the backward pass.
void channelnorm_forward(const double* x, const double* gamma, const double* beta, double* y,
                         double* saved_mean, double* saved_inv_std, int64_t n, int64_t c, int64_t h,
                         int64_t w, double eps);
void channelnorm_backward(const double* x, const double* gamma, const double* dy,
                          const double* saved_mean, const double* saved_inv_std, double* dx,
                          double* dgamma, double* dbeta, int64_t n, int64_t c, int64_t h, int64_t w);

// Log-softmax over the channel axis of [N, C, H, W].
void log_softmax_forward(const double* x, double* y, int64_t n, int64_t c, int64_t h, int64_t w);
void log_softmax_backward(const double* y, const double* dy, double* dx, int64_t n, int64_t c,
                          int64_t h, int64_t w);

} // namespace gbgn::kernels

// SPDX-License-Identifier: MIT
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "voxelage/common.hpp"
#include "voxelage/tensor.hpp"

namespace voxelage::nn {

template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

// Non-trainable layer state that still belongs in checkpoints (batch-norm
// running statistics).
template <class T>
struct StateTensor {
    std::string name;
    Tensor<T> value;
};

namespace detail {

// 5D tensor helpers; layout is {N, C, D, H, W}, W contiguous.
inline int64_t spatial_numel(const std::vector<int64_t>& s) { return s[2] * s[3] * s[4]; }

template <class T>
T dot_rows(const T* __restrict a, const T* __restrict b, int64_t n) {
    T acc[8] = {};
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
    T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
void axpy(T* __restrict y, T alpha, const T* __restrict x, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Zero-pads one sample (C,D,H,W) by one voxel per side.
template <class T>
void pad_by_one(const T* x, int64_t C, int64_t D, int64_t H, int64_t W, std::vector<T>& out) {
    const int64_t Dp = D + 2, Hp = H + 2, Wp = W + 2;
    out.assign(static_cast<size_t>(C * Dp * Hp * Wp), T(0));
    for (int64_t c = 0; c < C; ++c)
        for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y)
                std::memcpy(out.data() + ((c * Dp + z + 1) * Hp + y + 1) * Wp + 1,
                            x + ((c * D + z) * H + y) * W, static_cast<size_t>(W) * sizeof(T));
}

// Direct 3x3x3 same-convolution on a padded sample. One output row is
// accumulated in registers across all taps and input channels before the
// store, which is what lets the compiler vectorize the x loop.
template <class T>
void conv3_sample(const T* __restrict xp, int64_t Ci, int64_t D, int64_t H, int64_t W,
                  const T* __restrict w, const T* __restrict bias, T* __restrict y, int64_t Co,
                  bool accumulate) {
    const int64_t Dp = D + 2, Hp = H + 2, Wp = W + 2;
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < Co; ++co) {
        std::vector<T> acc(static_cast<size_t>(W));
        for (int64_t z = 0; z < D; ++z)
            for (int64_t yy = 0; yy < H; ++yy) {
                T* out_row = y + ((co * D + z) * H + yy) * W;
                const T init = bias ? bias[co] : T(0);
                if (accumulate)
                    for (int64_t x = 0; x < W; ++x) acc[x] = out_row[x] + init;
                else
                    for (int64_t x = 0; x < W; ++x) acc[x] = init;
                const T* wc = w + co * Ci * 27;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const T* wk = wc + ci * 27;
                    const T* plane = xp + ci * Dp * Hp * Wp;
                    for (int dz = 0; dz < 3; ++dz) {
                        const T* __restrict r0 = plane + ((z + dz) * Hp + yy + 0) * Wp;
                        const T* __restrict r1 = r0 + Wp;
                        const T* __restrict r2 = r1 + Wp;
                        const T* __restrict wt = wk + dz * 9;
                        T* __restrict a = acc.data();
                        for (int64_t x = 0; x < W; ++x)
                            a[x] += wt[0] * r0[x] + wt[1] * r0[x + 1] + wt[2] * r0[x + 2] +
                                    wt[3] * r1[x] + wt[4] * r1[x + 1] + wt[5] * r1[x + 2] +
                                    wt[6] * r2[x] + wt[7] * r2[x + 1] + wt[8] * r2[x + 2];
                    }
                }
                std::memcpy(out_row, acc.data(), static_cast<size_t>(W) * sizeof(T));
            }
    }
}

// dW accumulation for one sample: dw[co,ci,tap] += sum over voxels of
// dy[co] * x_padded[ci] shifted by the tap. One pass per (dz,dy) row pair,
// with the three x-offset reductions carried in parallel vector accumulators.
template <class T>
void conv3_weight_grad_sample(const T* __restrict xp, const T* __restrict dy, int64_t Ci, int64_t D,
                              int64_t H, int64_t W, int64_t Co, T* __restrict dw) {
    const int64_t Dp = D + 2, Hp = H + 2, Wp = W + 2;
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < Co; ++co) {
        for (int64_t ci = 0; ci < Ci; ++ci) {
            T* wslot = dw + (co * Ci + ci) * 27;
            const T* plane = xp + ci * Dp * Hp * Wp;
            for (int dz = 0; dz < 3; ++dz)
                for (int dyy = 0; dyy < 3; ++dyy) {
                    T p0[8] = {}, p1[8] = {}, p2[8] = {};
                    T s0 = 0, s1 = 0, s2 = 0;
                    for (int64_t z = 0; z < D; ++z)
                        for (int64_t yy = 0; yy < H; ++yy) {
                            const T* __restrict dyr = dy + ((co * D + z) * H + yy) * W;
                            const T* __restrict xr = plane + ((z + dz) * Hp + yy + dyy) * Wp;
                            int64_t x = 0;
                            for (; x + 8 <= W; x += 8)
                                for (int k = 0; k < 8; ++k) {
                                    const T d = dyr[x + k];
                                    p0[k] += d * xr[x + k];
                                    p1[k] += d * xr[x + k + 1];
                                    p2[k] += d * xr[x + k + 2];
                                }
                            for (; x < W; ++x) {
                                const T d = dyr[x];
                                s0 += d * xr[x];
                                s1 += d * xr[x + 1];
                                s2 += d * xr[x + 2];
                            }
                        }
                    for (int k = 0; k < 8; ++k) {
                        s0 += p0[k];
                        s1 += p1[k];
                        s2 += p2[k];
                    }
                    wslot[dz * 9 + dyy * 3 + 0] += s0;
                    wslot[dz * 9 + dyy * 3 + 1] += s1;
                    wslot[dz * 9 + dyy * 3 + 2] += s2;
                }
        }
    }
}

// --- tiled micro-GEMMs for the small-spatial convolution path -------------
// All matrices are dense row-major. The N (rightmost) dimension is the
// vectorized one; M is tiled by 4 and threaded.

// C (MxN) += or = A (MxK) * B (KxN)
template <class T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* __restrict A, const T* __restrict B,
             T* __restrict C, bool accumulate) {
    constexpr int64_t MB = 4, NB = 64;
#pragma omp parallel for schedule(static)
    for (int64_t m0 = 0; m0 < M; m0 += MB) {
        const int64_t mb = std::min(MB, M - m0);
        T acc[MB][NB];
        for (int64_t n0 = 0; n0 < N; n0 += NB) {
            const int64_t nb = std::min(NB, N - n0);
            for (int64_t mi = 0; mi < mb; ++mi)
                for (int64_t ni = 0; ni < nb; ++ni)
                    acc[mi][ni] = accumulate ? C[(m0 + mi) * N + n0 + ni] : T(0);
            for (int64_t k = 0; k < K; ++k) {
                const T* __restrict brow = B + k * N + n0;
                for (int64_t mi = 0; mi < mb; ++mi) {
                    const T a = A[(m0 + mi) * K + k];
                    for (int64_t ni = 0; ni < nb; ++ni) acc[mi][ni] += a * brow[ni];
                }
            }
            for (int64_t mi = 0; mi < mb; ++mi)
                for (int64_t ni = 0; ni < nb; ++ni) C[(m0 + mi) * N + n0 + ni] = acc[mi][ni];
        }
    }
}

// C (MxN) += A (MxK) * B^T, with B stored (NxK): C[m][n] += dot(A_m, B_n)
template <class T>
void gemm_nt_acc(int64_t M, int64_t N, int64_t K, const T* __restrict A, const T* __restrict B,
                 T* __restrict C) {
    constexpr int64_t MB = 2, NB = 4, KB = 8;
#pragma omp parallel for schedule(static)
    for (int64_t m0 = 0; m0 < M; m0 += MB) {
        const int64_t mb = std::min(MB, M - m0);
        for (int64_t n0 = 0; n0 < N; n0 += NB) {
            const int64_t nb = std::min(NB, N - n0);
            T part[MB][NB][KB] = {};
            int64_t k = 0;
            for (; k + KB <= K; k += KB)
                for (int64_t mi = 0; mi < mb; ++mi) {
                    const T* __restrict arow = A + (m0 + mi) * K + k;
                    for (int64_t ni = 0; ni < nb; ++ni) {
                        const T* __restrict brow = B + (n0 + ni) * K + k;
                        for (int64_t kk = 0; kk < KB; ++kk)
                            part[mi][ni][kk] += arow[kk] * brow[kk];
                    }
                }
            for (int64_t mi = 0; mi < mb; ++mi)
                for (int64_t ni = 0; ni < nb; ++ni) {
                    T s = 0;
                    for (int64_t kk = 0; kk < KB; ++kk) s += part[mi][ni][kk];
                    for (int64_t kt = k; kt < K; ++kt)
                        s += A[(m0 + mi) * K + kt] * B[(n0 + ni) * K + kt];
                    C[(m0 + mi) * N + n0 + ni] += s;
                }
        }
    }
}

// C (MxN) += A^T * B, with A stored (KxM), B (KxN)
template <class T>
void gemm_tn_acc(int64_t M, int64_t N, int64_t K, const T* __restrict A, const T* __restrict B,
                 T* __restrict C, bool accumulate) {
    constexpr int64_t MB = 4, NB = 64;
#pragma omp parallel for schedule(static)
    for (int64_t m0 = 0; m0 < M; m0 += MB) {
        const int64_t mb = std::min(MB, M - m0);
        T acc[MB][NB];
        for (int64_t n0 = 0; n0 < N; n0 += NB) {
            const int64_t nb = std::min(NB, N - n0);
            for (int64_t mi = 0; mi < mb; ++mi)
                for (int64_t ni = 0; ni < nb; ++ni)
                    acc[mi][ni] = accumulate ? C[(m0 + mi) * N + n0 + ni] : T(0);
            for (int64_t k = 0; k < K; ++k) {
                const T* __restrict brow = B + k * N + n0;
                const T* __restrict acol = A + k * M + m0;
                for (int64_t mi = 0; mi < mb; ++mi) {
                    const T a = acol[mi];
                    for (int64_t ni = 0; ni < nb; ++ni) acc[mi][ni] += a * brow[ni];
                }
            }
            for (int64_t mi = 0; mi < mb; ++mi)
                for (int64_t ni = 0; ni < nb; ++ni) C[(m0 + mi) * N + n0 + ni] = acc[mi][ni];
        }
    }
}

// column matrix in (K x S) layout, K = Ci*27, built row-wise from the padded
// sample with contiguous memcpy runs
template <class T>
void im2col_ks(const T* xp, int64_t Ci, int64_t D, int64_t H, int64_t W, std::vector<T>& col) {
    const int64_t Dp = D + 2, Hp = H + 2, Wp = W + 2;
    const int64_t S = D * H * W;
    col.resize(static_cast<size_t>(Ci * 27 * S));
    int64_t k = 0;
    for (int64_t ci = 0; ci < Ci; ++ci)
        for (int dz = 0; dz < 3; ++dz)
            for (int dyy = 0; dyy < 3; ++dyy)
                for (int dx = 0; dx < 3; ++dx, ++k) {
                    T* dst = col.data() + k * S;
                    const T* plane = xp + ci * Dp * Hp * Wp;
                    for (int64_t z = 0; z < D; ++z)
                        for (int64_t yy = 0; yy < H; ++yy)
                            std::memcpy(dst + (z * H + yy) * W,
                                        plane + ((z + dz) * Hp + yy + dyy) * Wp + dx,
                                        static_cast<size_t>(W) * sizeof(T));
                }
}

// scatter-add of a (K x S) column gradient back onto the (unpadded) input
template <class T>
void col2im_add_ks(const std::vector<T>& col, int64_t Ci, int64_t D, int64_t H, int64_t W,
                   std::vector<T>& pad_scratch, T* gin) {
    const int64_t Dp = D + 2, Hp = H + 2, Wp = W + 2;
    const int64_t S = D * H * W;
    pad_scratch.assign(static_cast<size_t>(Ci * Dp * Hp * Wp), T(0));
    int64_t k = 0;
    for (int64_t ci = 0; ci < Ci; ++ci)
        for (int dz = 0; dz < 3; ++dz)
            for (int dyy = 0; dyy < 3; ++dyy)
                for (int dx = 0; dx < 3; ++dx, ++k) {
                    const T* src = col.data() + k * S;
                    T* plane = pad_scratch.data() + ci * Dp * Hp * Wp;
                    for (int64_t z = 0; z < D; ++z)
                        for (int64_t yy = 0; yy < H; ++yy)
                            axpy(plane + ((z + dz) * Hp + yy + dyy) * Wp + dx,
                                 T(1), src + (z * H + yy) * W, W);
                }
    for (int64_t ci = 0; ci < Ci; ++ci)
        for (int64_t z = 0; z < D; ++z)
            for (int64_t yy = 0; yy < H; ++yy)
                axpy(gin + ((ci * D + z) * H + yy) * W, T(1),
                     pad_scratch.data() + ((ci * Dp + z + 1) * Hp + yy + 1) * Wp + 1, W);
}

// row kernels win on long contiguous rows; the GEMM path wins when the
// spatial extent is small and channel counts are large
inline bool conv3_use_gemm(int64_t W) { return W < 16; }

}  // namespace detail

template <class T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string type() const = 0;
    virtual std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const = 0;
    virtual void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool training) = 0;
    // accumulates into gin (one per input)
    virtual void backward(const std::vector<const Tensor<T>*>& in, const Tensor<T>& out,
                          const Tensor<T>& gout, std::vector<Tensor<T>*>& gin, bool training) = 0;
    virtual std::vector<Param<T>*> params() { return {}; }
    virtual std::vector<StateTensor<T>*> state() { return {}; }
};

// 3x3x3 convolution, stride 1, same padding.
template <class T>
class Conv3d : public Layer<T> {
public:
    Conv3d(int64_t in_ch, int64_t out_ch, const std::string& name) : ci_(in_ch), co_(out_ch) {
        w_.name = name + ".weight";
        w_.value.resize({co_, ci_, 3, 3, 3});
        w_.grad.resize({co_, ci_, 3, 3, 3});
        b_.name = name + ".bias";
        b_.value.resize({co_});
        b_.grad.resize({co_});
    }

    std::string type() const override { return "conv3d"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        const auto& s = in[0]->shape;
        require(s.size() == 5 && s[1] == ci_, "conv3d: bad input shape");
        return {s[0], co_, s[2], s[3], s[4]};
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        const auto& x = *in[0];
        const int64_t N = x.shape[0], D = x.shape[2], H = x.shape[3], W = x.shape[4];
        const int64_t S = D * H * W;
        const bool gemm = detail::conv3_use_gemm(W);
        for (int64_t n = 0; n < N; ++n) {
            T* y = out.data() + n * co_ * S;
            detail::pad_by_one(x.data() + n * ci_ * S, ci_, D, H, W, pad_scratch_);
            if (gemm) {
                detail::im2col_ks(pad_scratch_.data(), ci_, D, H, W, col_scratch_);
                detail::gemm_nn(co_, S, ci_ * 27, w_.value.data(), col_scratch_.data(), y, false);
                for (int64_t co = 0; co < co_; ++co) {
                    const T b = b_.value.v[co];
                    for (int64_t i = 0; i < S; ++i) y[co * S + i] += b;
                }
            } else {
                detail::conv3_sample(pad_scratch_.data(), ci_, D, H, W, w_.value.data(),
                                     b_.value.data(), y, co_, false);
            }
        }
    }

    void backward(const std::vector<const Tensor<T>*>& in, const Tensor<T>&, const Tensor<T>& gout,
                  std::vector<Tensor<T>*>& gin, bool) override {
        const auto& x = *in[0];
        const int64_t N = x.shape[0], D = x.shape[2], H = x.shape[3], W = x.shape[4];
        const int64_t S = D * H * W;
        const bool gemm = detail::conv3_use_gemm(W);

        // weights flipped in space and transposed in channels, for the
        // full-correlation that computes the input gradient on the row path
        std::vector<T> wt;
        if (!gemm) {
            wt.resize(static_cast<size_t>(ci_ * co_ * 27));
            for (int64_t co = 0; co < co_; ++co)
                for (int64_t ci = 0; ci < ci_; ++ci)
                    for (int t = 0; t < 27; ++t)
                        wt[(ci * co_ + co) * 27 + (26 - t)] = w_.value.v[(co * ci_ + ci) * 27 + t];
        }

        for (int64_t n = 0; n < N; ++n) {
            const T* dy = gout.data() + n * co_ * S;
            for (int64_t co = 0; co < co_; ++co) {
                T s = 0;
                const T* row = dy + co * S;
                for (int64_t i = 0; i < S; ++i) s += row[i];
                b_.grad.v[co] += s;
            }
            if (gemm) {
                detail::pad_by_one(x.data() + n * ci_ * S, ci_, D, H, W, pad_scratch_);
                detail::im2col_ks(pad_scratch_.data(), ci_, D, H, W, col_scratch_);
                detail::gemm_nt_acc(co_, ci_ * 27, S, dy, col_scratch_.data(), w_.grad.data());
                if (gin[0]) {
                    dcol_scratch_.assign(static_cast<size_t>(ci_ * 27 * S), T(0));
                    detail::gemm_tn_acc(ci_ * 27, S, co_, w_.value.data(), dy,
                                        dcol_scratch_.data(), false);
                    detail::col2im_add_ks(dcol_scratch_, ci_, D, H, W, pad_scratch_,
                                          gin[0]->data() + n * ci_ * S);
                }
            } else {
                detail::pad_by_one(x.data() + n * ci_ * S, ci_, D, H, W, pad_scratch_);
                detail::conv3_weight_grad_sample(pad_scratch_.data(), dy, ci_, D, H, W, co_,
                                                 w_.grad.data());
                if (gin[0]) {
                    detail::pad_by_one(dy, co_, D, H, W, pad_scratch_);
                    detail::conv3_sample(pad_scratch_.data(), co_, D, H, W, wt.data(),
                                         static_cast<const T*>(nullptr),
                                         gin[0]->data() + n * ci_ * S, ci_, true);
                }
            }
        }
    }

    std::vector<Param<T>*> params() override { return {&w_, &b_}; }

private:
    int64_t ci_, co_;
    Param<T> w_, b_;
    std::vector<T> pad_scratch_, col_scratch_, dcol_scratch_;
};

// 1x1x1 convolution; doubles as the linear head when the spatial size is 1.
template <class T>
class Conv1x1 : public Layer<T> {
public:
    Conv1x1(int64_t in_ch, int64_t out_ch, const std::string& name) : ci_(in_ch), co_(out_ch) {
        w_.name = name + ".weight";
        w_.value.resize({co_, ci_});
        w_.grad.resize({co_, ci_});
        b_.name = name + ".bias";
        b_.value.resize({co_});
        b_.grad.resize({co_});
    }

    std::string type() const override { return "conv1x1"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        const auto& s = in[0]->shape;
        require(s.size() == 5 && s[1] == ci_, "conv1x1: bad input shape");
        return {s[0], co_, s[2], s[3], s[4]};
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        const auto& x = *in[0];
        const int64_t N = x.shape[0], S = detail::spatial_numel(x.shape);
        for (int64_t n = 0; n < N; ++n) {
            const T* xs = x.data() + n * ci_ * S;
            T* ys = out.data() + n * co_ * S;
#pragma omp parallel for schedule(static)
            for (int64_t co = 0; co < co_; ++co) {
                T* row = ys + co * S;
                std::fill(row, row + S, b_.value.v[co]);
                for (int64_t ci = 0; ci < ci_; ++ci)
                    detail::axpy(row, w_.value.v[co * ci_ + ci], xs + ci * S, S);
            }
        }
    }

    void backward(const std::vector<const Tensor<T>*>& in, const Tensor<T>&, const Tensor<T>& gout,
                  std::vector<Tensor<T>*>& gin, bool) override {
        const auto& x = *in[0];
        const int64_t N = x.shape[0], S = detail::spatial_numel(x.shape);
        for (int64_t n = 0; n < N; ++n) {
            const T* xs = x.data() + n * ci_ * S;
            const T* dys = gout.data() + n * co_ * S;
#pragma omp parallel for schedule(static)
            for (int64_t co = 0; co < co_; ++co) {
                const T* dyr = dys + co * S;
                T s = 0;
                for (int64_t i = 0; i < S; ++i) s += dyr[i];
                b_.grad.v[co] += s;
                for (int64_t ci = 0; ci < ci_; ++ci)
                    w_.grad.v[co * ci_ + ci] += detail::dot_rows(dyr, xs + ci * S, S);
            }
            if (gin[0]) {
                T* dxs = gin[0]->data() + n * ci_ * S;
#pragma omp parallel for schedule(static)
                for (int64_t ci = 0; ci < ci_; ++ci)
                    for (int64_t co = 0; co < co_; ++co)
                        detail::axpy(dxs + ci * S, w_.value.v[co * ci_ + ci], dys + co * S, S);
            }
        }
    }

    std::vector<Param<T>*> params() override { return {&w_, &b_}; }

private:
    int64_t ci_, co_;
    Param<T> w_, b_;
};

template <class T>
class BatchNorm3d : public Layer<T> {
public:
    BatchNorm3d(int64_t channels, const std::string& name, T momentum = T(0.1), T eps = T(1e-5))
        : c_(channels), momentum_(momentum), eps_(eps) {
        gamma_.name = name + ".gamma";
        gamma_.value.resize({c_});
        std::fill(gamma_.value.v.begin(), gamma_.value.v.end(), T(1));
        gamma_.grad.resize({c_});
        beta_.name = name + ".beta";
        beta_.value.resize({c_});
        beta_.grad.resize({c_});
        running_mean_.name = name + ".running_mean";
        running_mean_.value.resize({c_});
        running_var_.name = name + ".running_var";
        running_var_.value.resize({c_});
        std::fill(running_var_.value.v.begin(), running_var_.value.v.end(), T(1));
    }

    std::string type() const override { return "batchnorm3d"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        const auto& s = in[0]->shape;
        require(s.size() == 5 && s[1] == c_, "batchnorm: bad input shape");
        return s;
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool training) override {
        const auto& x = *in[0];
        const int64_t N = x.shape[0], S = detail::spatial_numel(x.shape);
        const int64_t m = N * S;
        saved_mean_.assign(static_cast<size_t>(c_), T(0));
        saved_invstd_.assign(static_cast<size_t>(c_), T(0));
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < c_; ++c) {
            T mean, invstd;
            if (training) {
                T sum = 0, sq = 0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* row = x.data() + (n * c_ + c) * S;
                    for (int64_t i = 0; i < S; ++i) {
                        sum += row[i];
                        sq += row[i] * row[i];
                    }
                }
                mean = sum / static_cast<T>(m);
                T var = sq / static_cast<T>(m) - mean * mean;
                if (var < 0) var = 0;
                invstd = T(1) / std::sqrt(var + eps_);
                const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
                running_mean_.value.v[c] =
                    (T(1) - momentum_) * running_mean_.value.v[c] + momentum_ * mean;
                running_var_.value.v[c] =
                    (T(1) - momentum_) * running_var_.value.v[c] + momentum_ * unbiased;
            } else {
                mean = running_mean_.value.v[c];
                invstd = T(1) / std::sqrt(running_var_.value.v[c] + eps_);
            }
            saved_mean_[c] = mean;
            saved_invstd_[c] = invstd;
            const T g = gamma_.value.v[c], b = beta_.value.v[c];
            for (int64_t n = 0; n < N; ++n) {
                const T* row = x.data() + (n * c_ + c) * S;
                T* orow = out.data() + (n * c_ + c) * S;
                for (int64_t i = 0; i < S; ++i) orow[i] = (row[i] - mean) * invstd * g + b;
            }
        }
    }

    void backward(const std::vector<const Tensor<T>*>& in, const Tensor<T>&, const Tensor<T>& gout,
                  std::vector<Tensor<T>*>& gin, bool training) override {
        require(static_cast<int64_t>(saved_mean_.size()) == c_,
                "batchnorm: backward before forward");
        const auto& x = *in[0];
        const int64_t N = x.shape[0], S = detail::spatial_numel(x.shape);
        const T m = static_cast<T>(N * S);
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < c_; ++c) {
            const T mean = saved_mean_[c], invstd = saved_invstd_[c];
            const T g = gamma_.value.v[c];
            T sum_dy = 0, sum_dy_xhat = 0;
            for (int64_t n = 0; n < N; ++n) {
                const T* xr = x.data() + (n * c_ + c) * S;
                const T* dyr = gout.data() + (n * c_ + c) * S;
                for (int64_t i = 0; i < S; ++i) {
                    sum_dy += dyr[i];
                    sum_dy_xhat += dyr[i] * (xr[i] - mean) * invstd;
                }
            }
            gamma_.grad.v[c] += sum_dy_xhat;
            beta_.grad.v[c] += sum_dy;
            if (!gin[0]) continue;
            for (int64_t n = 0; n < N; ++n) {
                const T* xr = x.data() + (n * c_ + c) * S;
                const T* dyr = gout.data() + (n * c_ + c) * S;
                T* dxr = gin[0]->data() + (n * c_ + c) * S;
                if (training) {
                    // full batch-statistics gradient
                    for (int64_t i = 0; i < S; ++i) {
                        const T xhat = (xr[i] - mean) * invstd;
                        dxr[i] += g * invstd * (dyr[i] - sum_dy / m - xhat * sum_dy_xhat / m);
                    }
                } else {
                    for (int64_t i = 0; i < S; ++i) dxr[i] += g * invstd * dyr[i];
                }
            }
        }
    }

    std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
    std::vector<StateTensor<T>*> state() override { return {&running_mean_, &running_var_}; }

private:
    int64_t c_;
    T momentum_, eps_;
    Param<T> gamma_, beta_;
    StateTensor<T> running_mean_, running_var_;
    std::vector<T> saved_mean_, saved_invstd_;
};

template <class T>
class ReLU : public Layer<T> {
public:
    std::string type() const override { return "relu"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        return in[0]->shape;
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        const auto& x = in[0]->v;
        for (size_t i = 0; i < x.size(); ++i) out.v[i] = x[i] > T(0) ? x[i] : T(0);
    }

    void backward(const std::vector<const Tensor<T>*>&, const Tensor<T>& out, const Tensor<T>& gout,
                  std::vector<Tensor<T>*>& gin, bool) override {
        if (!gin[0]) return;
        for (size_t i = 0; i < out.v.size(); ++i)
            if (out.v[i] > T(0)) gin[0]->v[i] += gout.v[i];
    }
};

// Multiplies by a fixed scalar. Used to express age heads in years while the
// trainable parameters stay O(1).
template <class T>
class FixedScale : public Layer<T> {
public:
    explicit FixedScale(T scale) : scale_(scale) {}

    std::string type() const override { return "fixed_scale"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        return in[0]->shape;
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        for (size_t i = 0; i < in[0]->v.size(); ++i) out.v[i] = scale_ * in[0]->v[i];
    }

    void backward(const std::vector<const Tensor<T>*>&, const Tensor<T>&, const Tensor<T>& gout,
                  std::vector<Tensor<T>*>& gin, bool) override {
        if (!gin[0]) return;
        for (size_t i = 0; i < gout.v.size(); ++i) gin[0]->v[i] += scale_ * gout.v[i];
    }

private:
    T scale_;
};

// Factor-2 max pooling; requires even spatial extents.
template <class T>
class MaxPool2 : public Layer<T> {
public:
    std::string type() const override { return "maxpool2"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        const auto& s = in[0]->shape;
        require(s.size() == 5, "maxpool: expected 5D input");
        require(s[2] % 2 == 0 && s[3] % 2 == 0 && s[4] % 2 == 0,
                "maxpool: spatial extents must be even (input size incompatible with levels)");
        return {s[0], s[1], s[2] / 2, s[3] / 2, s[4] / 2};
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        const auto& x = *in[0];
        const int64_t NC = x.shape[0] * x.shape[1];
        const int64_t D = x.shape[2], H = x.shape[3], W = x.shape[4];
        const int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
        argmax_.resize(out.v.size());
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < NC; ++nc) {
            const T* xs = x.data() + nc * D * H * W;
            T* ys = out.data() + nc * Do * Ho * Wo;
            int64_t* am = argmax_.data() + nc * Do * Ho * Wo;
            for (int64_t z = 0; z < Do; ++z)
                for (int64_t y = 0; y < Ho; ++y)
                    for (int64_t xo = 0; xo < Wo; ++xo) {
                        T best = -std::numeric_limits<T>::infinity();
                        int64_t best_idx = 0;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) {
                                    const int64_t idx =
                                        ((2 * z + dz) * H + 2 * y + dy) * W + 2 * xo + dx;
                                    if (xs[idx] > best) {
                                        best = xs[idx];
                                        best_idx = idx;
                                    }
                                }
                        ys[(z * Ho + y) * Wo + xo] = best;
                        am[(z * Ho + y) * Wo + xo] = best_idx;
                    }
        }
    }

    void backward(const std::vector<const Tensor<T>*>& in, const Tensor<T>& out,
                  const Tensor<T>& gout, std::vector<Tensor<T>*>& gin, bool) override {
        if (!gin[0]) return;
        const auto& x = *in[0];
        const int64_t NC = x.shape[0] * x.shape[1];
        const int64_t in_spatial = x.shape[2] * x.shape[3] * x.shape[4];
        const int64_t out_spatial = detail::spatial_numel(out.shape);
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < NC; ++nc) {
            T* dx = gin[0]->data() + nc * in_spatial;
            const T* dy = gout.data() + nc * out_spatial;
            const int64_t* am = argmax_.data() + nc * out_spatial;
            for (int64_t i = 0; i < out_spatial; ++i) dx[am[i]] += dy[i];
        }
    }

private:
    std::vector<int64_t> argmax_;
};

// Factor-2 trilinear upsampling (half-voxel aligned, clamped at borders).
// Implemented as three separable 2-tap passes: along each axis,
// out[2k] = 0.25*in[k-1] + 0.75*in[k] and out[2k+1] = 0.75*in[k] + 0.25*in[k+1],
// with clamped borders.
template <class T>
class Upsample2 : public Layer<T> {
public:
    std::string type() const override { return "upsample2"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        const auto& s = in[0]->shape;
        require(s.size() == 5, "upsample: expected 5D input");
        return {s[0], s[1], s[2] * 2, s[3] * 2, s[4] * 2};
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        const auto& x = *in[0];
        const int64_t NC = x.shape[0] * x.shape[1];
        const int64_t D = x.shape[2], H = x.shape[3], W = x.shape[4];
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < NC; ++nc) {
            std::vector<T> tz(static_cast<size_t>(2 * D * H * W));
            std::vector<T> ty(static_cast<size_t>(2 * D * 2 * H * W));
            const T* xs = x.data() + nc * D * H * W;
            // z pass: whole planes
            for (int64_t z = 0; z < D; ++z) {
                const T* plo = xs + std::max<int64_t>(z - 1, 0) * H * W;
                const T* pmid = xs + z * H * W;
                const T* phi = xs + std::min<int64_t>(z + 1, D - 1) * H * W;
                T* even = tz.data() + (2 * z) * H * W;
                T* odd = tz.data() + (2 * z + 1) * H * W;
                for (int64_t i = 0; i < H * W; ++i) {
                    even[i] = T(0.25) * plo[i] + T(0.75) * pmid[i];
                    odd[i] = T(0.75) * pmid[i] + T(0.25) * phi[i];
                }
            }
            // y pass: rows within each plane
            for (int64_t z = 0; z < 2 * D; ++z)
                for (int64_t y = 0; y < H; ++y) {
                    const T* rlo = tz.data() + (z * H + std::max<int64_t>(y - 1, 0)) * W;
                    const T* rmid = tz.data() + (z * H + y) * W;
                    const T* rhi = tz.data() + (z * H + std::min<int64_t>(y + 1, H - 1)) * W;
                    T* even = ty.data() + (z * 2 * H + 2 * y) * W;
                    T* odd = ty.data() + (z * 2 * H + 2 * y + 1) * W;
                    for (int64_t i = 0; i < W; ++i) {
                        even[i] = T(0.25) * rlo[i] + T(0.75) * rmid[i];
                        odd[i] = T(0.75) * rmid[i] + T(0.25) * rhi[i];
                    }
                }
            // x pass
            T* ys = out.data() + nc * 8 * D * H * W;
            for (int64_t r = 0; r < 2 * D * 2 * H; ++r) {
                const T* src = ty.data() + r * W;
                T* dst = ys + r * 2 * W;
                for (int64_t k = 0; k < W; ++k) {
                    const T lo = src[std::max<int64_t>(k - 1, 0)];
                    const T hi = src[std::min<int64_t>(k + 1, W - 1)];
                    dst[2 * k] = T(0.25) * lo + T(0.75) * src[k];
                    dst[2 * k + 1] = T(0.75) * src[k] + T(0.25) * hi;
                }
            }
        }
    }

    void backward(const std::vector<const Tensor<T>*>& in, const Tensor<T>&,
                  const Tensor<T>& gout, std::vector<Tensor<T>*>& gin, bool) override {
        if (!gin[0]) return;
        const auto& x = *in[0];
        const int64_t NC = x.shape[0] * x.shape[1];
        const int64_t D = x.shape[2], H = x.shape[3], W = x.shape[4];
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < NC; ++nc) {
            std::vector<T> ty(static_cast<size_t>(2 * D * 2 * H * W));
            std::vector<T> tz(static_cast<size_t>(2 * D * H * W));
            const T* gs = gout.data() + nc * 8 * D * H * W;
            // transpose of the x pass
            for (int64_t r = 0; r < 2 * D * 2 * H; ++r) {
                const T* g = gs + r * 2 * W;
                T* dst = ty.data() + r * W;
                for (int64_t k = 0; k < W; ++k) {
                    T acc = T(0.75) * (g[2 * k] + g[2 * k + 1]);
                    if (k > 0) acc += T(0.25) * g[2 * k - 1];
                    else acc += T(0.25) * g[0];
                    if (k + 1 < W) acc += T(0.25) * g[2 * k + 2];
                    else acc += T(0.25) * g[2 * W - 1];
                    dst[k] = acc;
                }
            }
            // transpose of the y pass
            for (int64_t z = 0; z < 2 * D; ++z)
                for (int64_t y = 0; y < H; ++y) {
                    T* dst = tz.data() + (z * H + y) * W;
                    const T* even = ty.data() + (z * 2 * H + 2 * y) * W;
                    const T* odd = ty.data() + (z * 2 * H + 2 * y + 1) * W;
                    const T* prev_odd =
                        ty.data() + (z * 2 * H + (y > 0 ? 2 * y - 1 : 0)) * W;
                    const T* next_even =
                        ty.data() + (z * 2 * H + (y + 1 < H ? 2 * y + 2 : 2 * H - 1)) * W;
                    for (int64_t i = 0; i < W; ++i)
                        dst[i] = T(0.75) * (even[i] + odd[i]) + T(0.25) * (prev_odd[i] + next_even[i]);
                }
            // transpose of the z pass
            T* dx = gin[0]->data() + nc * D * H * W;
            for (int64_t z = 0; z < D; ++z) {
                T* dst = dx + z * H * W;
                const T* even = tz.data() + (2 * z) * H * W;
                const T* odd = tz.data() + (2 * z + 1) * H * W;
                const T* prev_odd = tz.data() + (z > 0 ? 2 * z - 1 : 0) * H * W;
                const T* next_even = tz.data() + (z + 1 < D ? 2 * z + 2 : 2 * D - 1) * H * W;
                for (int64_t i = 0; i < H * W; ++i)
                    dst[i] += T(0.75) * (even[i] + odd[i]) + T(0.25) * (prev_odd[i] + next_even[i]);
            }
        }
    }
};

// Concatenates two inputs along the channel axis.
template <class T>
class ConcatChannels : public Layer<T> {
public:
    std::string type() const override { return "concat"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        const auto& a = in[0]->shape;
        const auto& b = in[1]->shape;
        require(a.size() == 5 && b.size() == 5 && a[0] == b[0] && a[2] == b[2] && a[3] == b[3] &&
                    a[4] == b[4],
                "concat: incompatible shapes");
        return {a[0], a[1] + b[1], a[2], a[3], a[4]};
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        const auto& a = *in[0];
        const auto& b = *in[1];
        const int64_t N = a.shape[0], S = detail::spatial_numel(a.shape);
        const int64_t ca = a.shape[1], cb = b.shape[1];
        for (int64_t n = 0; n < N; ++n) {
            std::memcpy(out.data() + n * (ca + cb) * S, a.data() + n * ca * S,
                        static_cast<size_t>(ca * S) * sizeof(T));
            std::memcpy(out.data() + (n * (ca + cb) + ca) * S, b.data() + n * cb * S,
                        static_cast<size_t>(cb * S) * sizeof(T));
        }
    }

    void backward(const std::vector<const Tensor<T>*>& in, const Tensor<T>&, const Tensor<T>& gout,
                  std::vector<Tensor<T>*>& gin, bool) override {
        const auto& a = *in[0];
        const auto& b = *in[1];
        const int64_t N = a.shape[0], S = detail::spatial_numel(a.shape);
        const int64_t ca = a.shape[1], cb = b.shape[1];
        for (int64_t n = 0; n < N; ++n) {
            if (gin[0])
                detail::axpy(gin[0]->data() + n * ca * S, T(1), gout.data() + n * (ca + cb) * S,
                             ca * S);
            if (gin[1])
                detail::axpy(gin[1]->data() + n * cb * S, T(1),
                             gout.data() + (n * (ca + cb) + ca) * S, cb * S);
        }
    }
};

// Per-voxel softmax over the channel axis.
template <class T>
class ChannelSoftmax : public Layer<T> {
public:
    std::string type() const override { return "softmax"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        return in[0]->shape;
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        const auto& x = *in[0];
        const int64_t N = x.shape[0], C = x.shape[1], S = detail::spatial_numel(x.shape);
        for (int64_t n = 0; n < N; ++n) {
            const T* xs = x.data() + n * C * S;
            T* ys = out.data() + n * C * S;
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < S; ++i) {
                T mx = xs[i];
                for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xs[c * S + i]);
                T denom = 0;
                for (int64_t c = 0; c < C; ++c) {
                    const T e = std::exp(xs[c * S + i] - mx);
                    ys[c * S + i] = e;
                    denom += e;
                }
                for (int64_t c = 0; c < C; ++c) ys[c * S + i] /= denom;
            }
        }
    }

    void backward(const std::vector<const Tensor<T>*>&, const Tensor<T>& out, const Tensor<T>& gout,
                  std::vector<Tensor<T>*>& gin, bool) override {
        if (!gin[0]) return;
        const int64_t N = out.shape[0], C = out.shape[1], S = detail::spatial_numel(out.shape);
        for (int64_t n = 0; n < N; ++n) {
            const T* p = out.data() + n * C * S;
            const T* g = gout.data() + n * C * S;
            T* dx = gin[0]->data() + n * C * S;
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < S; ++i) {
                T dot = 0;
                for (int64_t c = 0; c < C; ++c) dot += p[c * S + i] * g[c * S + i];
                for (int64_t c = 0; c < C; ++c) dx[c * S + i] += p[c * S + i] * (g[c * S + i] - dot);
            }
        }
    }
};

// Global average pooling to a (N,C,1,1,1) tensor.
template <class T>
class GlobalAvgPool : public Layer<T> {
public:
    std::string type() const override { return "gap"; }

    std::vector<int64_t> output_shape(const std::vector<const Tensor<T>*>& in) const override {
        const auto& s = in[0]->shape;
        require(s.size() == 5, "gap: expected 5D input");
        return {s[0], s[1], 1, 1, 1};
    }

    void forward(const std::vector<const Tensor<T>*>& in, Tensor<T>& out, bool) override {
        const auto& x = *in[0];
        const int64_t NC = x.shape[0] * x.shape[1], S = detail::spatial_numel(x.shape);
        for (int64_t nc = 0; nc < NC; ++nc) {
            const T* row = x.data() + nc * S;
            T s = 0;
            for (int64_t i = 0; i < S; ++i) s += row[i];
            out.v[nc] = s / static_cast<T>(S);
        }
    }

    void backward(const std::vector<const Tensor<T>*>& in, const Tensor<T>&, const Tensor<T>& gout,
                  std::vector<Tensor<T>*>& gin, bool) override {
        if (!gin[0]) return;
        const auto& x = *in[0];
        const int64_t NC = x.shape[0] * x.shape[1], S = detail::spatial_numel(x.shape);
        for (int64_t nc = 0; nc < NC; ++nc) {
            const T g = gout.v[nc] / static_cast<T>(S);
            T* row = gin[0]->data() + nc * S;
            for (int64_t i = 0; i < S; ++i) row[i] += g;
        }
    }
};

}  // namespace voxelage::nn

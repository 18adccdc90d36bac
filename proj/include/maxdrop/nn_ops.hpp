#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "maxdrop/tensor.hpp"

namespace maxdrop {

// 2-d convolution, NCHW input, OIHW kernel, no bias. Output spatial extent
// is floor((H + 2*pad - kH)/stride) + 1. Direct summation; the inner loops
// hoist one kernel scalar so both forward and backward stream contiguously
// over rows.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int pad) {
    if (input.rank() != 4)
        throw ShapeError("conv2d: input must be NCHW, got " + shape_str(input.shape()));
    if (kernel.rank() != 4)
        throw ShapeError("conv2d: kernel must be OIHW, got " + shape_str(kernel.shape()));
    if (stride < 1) throw Error("conv2d: stride must be >= 1");
    if (pad < 0) throw Error("conv2d: pad must be >= 0");

    const std::size_t N = input.shape()[0], C = input.shape()[1];
    const std::size_t H = input.shape()[2], W = input.shape()[3];
    const std::size_t O = kernel.shape()[0], KI = kernel.shape()[1];
    const std::size_t KH = kernel.shape()[2], KW = kernel.shape()[3];
    if (KI != C)
        throw ShapeError("conv2d: input channels " + std::to_string(C) +
                         " inconsistent with kernel channels " + std::to_string(KI));

    const long OH = (static_cast<long>(H) + 2 * pad - static_cast<long>(KH)) / stride + 1;
    const long OW = (static_cast<long>(W) + 2 * pad - static_cast<long>(KW)) / stride + 1;
    if (OH < 1 || OW < 1)
        throw ShapeError("conv2d: output extent " + std::to_string(OH) + "x" + std::to_string(OW) +
                         " < 1 for input " + shape_str(input.shape()) + ", kernel " +
                         shape_str(kernel.shape()) + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
    const std::size_t oh_n = static_cast<std::size_t>(OH), ow_n = static_cast<std::size_t>(OW);

    const auto& in = input.values();
    const auto& kv = kernel.values();
    std::vector<T> out(N * O * oh_n * ow_n, T(0));

    // Valid output range for a kernel offset `off`: 0 <= o*stride + off < extent.
    auto lo = [&](long off) {
        return off >= 0 ? 0L : (-off + stride - 1) / stride;
    };
    auto hi = [&](long off, long extent, long out_extent) {  // exclusive
        long h = (extent - 1 - off) / stride + 1;
        return std::min(h, out_extent);
    };

    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < O; ++o) {
            T* op = out.data() + (n * O + o) * oh_n * ow_n;
            for (std::size_t c = 0; c < C; ++c) {
                const T* ip = in.data() + (n * C + c) * H * W;
                for (std::size_t kh = 0; kh < KH; ++kh) {
                    const long roff = static_cast<long>(kh) - pad;
                    const long oh0 = lo(roff), oh1 = hi(roff, static_cast<long>(H), OH);
                    for (std::size_t kw = 0; kw < KW; ++kw) {
                        const T k = kv[((o * C + c) * KH + kh) * KW + kw];
                        if (k == T(0)) continue;
                        const long coff = static_cast<long>(kw) - pad;
                        const long ow0 = lo(coff), ow1 = hi(coff, static_cast<long>(W), OW);
                        for (long oh = oh0; oh < oh1; ++oh) {
                            const T* irow = ip + (oh * stride + roff) * W + coff;
                            T* orow = op + oh * ow_n;
                            if (stride == 1) {
                                for (long ow = ow0; ow < ow1; ++ow) orow[ow] += k * irow[ow];
                            } else {
                                for (long ow = ow0; ow < ow1; ++ow)
                                    orow[ow] += k * irow[ow * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    auto rule = [stride, pad, N, C, H, W, O, KH, KW, oh_n, ow_n, lo, hi](detail::Node<T>& nd) {
        auto& pin = nd.parents[0];
        auto& pk = nd.parents[1];
        const auto& dout = nd.pass_grad;
        const long OH = static_cast<long>(oh_n), OW = static_cast<long>(ow_n);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t o = 0; o < O; ++o) {
                const T* dop = dout.data() + (n * O + o) * oh_n * ow_n;
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t iplane = (n * C + c) * H * W;
                    for (std::size_t kh = 0; kh < KH; ++kh) {
                        const long roff = static_cast<long>(kh) - pad;
                        const long oh0 = lo(roff), oh1 = hi(roff, static_cast<long>(H), OH);
                        for (std::size_t kw = 0; kw < KW; ++kw) {
                            const std::size_t kidx = ((o * C + c) * KH + kh) * KW + kw;
                            const long coff = static_cast<long>(kw) - pad;
                            const long ow0 = lo(coff), ow1 = hi(coff, static_cast<long>(W), OW);
                            if (pin->tracked) {
                                const T k = pk->values[kidx];
                                for (long oh = oh0; oh < oh1; ++oh) {
                                    T* drow = pin->pass_grad.data() + iplane +
                                              (oh * stride + roff) * W + coff;
                                    const T* dorow = dop + oh * ow_n;
                                    for (long ow = ow0; ow < ow1; ++ow)
                                        drow[ow * stride] += k * dorow[ow];
                                }
                            }
                            if (pk->tracked) {
                                T acc = T(0);
                                for (long oh = oh0; oh < oh1; ++oh) {
                                    const T* irow = pin->values.data() + iplane +
                                                    (oh * stride + roff) * W + coff;
                                    const T* dorow = dop + oh * ow_n;
                                    for (long ow = ow0; ow < ow1; ++ow)
                                        acc += irow[ow * stride] * dorow[ow];
                                }
                                pk->pass_grad[kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
    };

    return detail::make_op<T>({N, O, oh_n, ow_n}, std::move(out), {input, kernel}, rule);
}

// Per-channel running statistics for batch normalization. Updated with the
// biased batch variance so that a momentum-1 update reproduces the train
// path exactly.
template <typename T>
struct BnStats {
    std::vector<T> mean;
    std::vector<T> var;

    explicit BnStats(std::size_t channels = 0) : mean(channels, T(0)), var(channels, T(1)) {}
};

// Batch normalization over NCHW input. Train mode normalizes by batch
// statistics (epsilon inside the square root) and updates `stats` with
// momentum; eval mode normalizes by `stats`. Train mode requires batch
// size >= 2.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BnStats<T>& stats, Mode mode, T eps = T(1e-5), T momentum = T(0.1)) {
    if (x.rank() != 4)
        throw ShapeError("batch_norm2d: input must be NCHW, got " + shape_str(x.shape()));
    const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (gamma.size() != C || beta.size() != C)
        throw ShapeError("batch_norm2d: gamma/beta must have " + std::to_string(C) + " channels");
    if (stats.mean.size() != C)
        throw ShapeError("batch_norm2d: running stats sized for " +
                         std::to_string(stats.mean.size()) + " channels, input has " +
                         std::to_string(C));
    if (mode == Mode::kTrain && N < 2)
        throw Error("batch_norm2d: train mode requires batch size >= 2, got " + std::to_string(N));

    const std::size_t HW = H * W;
    const T m = static_cast<T>(N * HW);
    const auto& xv = x.values();

    std::vector<T> mean(C), inv_std(C);
    if (mode == Mode::kTrain) {
        for (std::size_t c = 0; c < C; ++c) {
            T s = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = xv.data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) s += p[i];
            }
            const T mu = s / m;
            T v = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = xv.data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const T d = p[i] - mu;
                    v += d * d;
                }
            }
            v /= m;
            mean[c] = mu;
            inv_std[c] = T(1) / std::sqrt(v + eps);
            stats.mean[c] = (T(1) - momentum) * stats.mean[c] + momentum * mu;
            stats.var[c] = (T(1) - momentum) * stats.var[c] + momentum * v;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = stats.mean[c];
            inv_std[c] = T(1) / std::sqrt(stats.var[c] + eps);
        }
    }

    std::vector<T> out(xv.size());
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = xv.data() + (n * C + c) * HW;
            T* q = out.data() + (n * C + c) * HW;
            const T mu = mean[c], is = inv_std[c], g = gv[c], b = bv[c];
            for (std::size_t i = 0; i < HW; ++i) q[i] = (p[i] - mu) * is * g + b;
        }
    }

    const bool train = mode == Mode::kTrain;
    auto rule = [N, C, HW, m, train, mean, inv_std](detail::Node<T>& nd) {
        auto& px = nd.parents[0];
        auto& pg = nd.parents[1];
        auto& pb = nd.parents[2];
        const auto& dy = nd.pass_grad;
        for (std::size_t c = 0; c < C; ++c) {
            const T mu = mean[c], is = inv_std[c], g = pg->values[c];
            T sum_dy = T(0), sum_dy_xhat = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + c) * HW;
                const T* dp = dy.data() + base;
                const T* xp = px->values.data() + base;
                for (std::size_t i = 0; i < HW; ++i) {
                    sum_dy += dp[i];
                    sum_dy_xhat += dp[i] * (xp[i] - mu) * is;
                }
            }
            if (pg->tracked) pg->pass_grad[c] += sum_dy_xhat;
            if (pb->tracked) pb->pass_grad[c] += sum_dy;
            if (!px->tracked) continue;
            if (train) {
                // dx via the batch-statistics chain rule.
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t base = (n * C + c) * HW;
                    const T* dp = dy.data() + base;
                    const T* xp = px->values.data() + base;
                    T* dx = px->pass_grad.data() + base;
                    for (std::size_t i = 0; i < HW; ++i) {
                        const T xhat = (xp[i] - mu) * is;
                        dx[i] += g * is * (dp[i] - sum_dy / m - xhat * sum_dy_xhat / m);
                    }
                }
            } else {
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t base = (n * C + c) * HW;
                    const T* dp = dy.data() + base;
                    T* dx = px->pass_grad.data() + base;
                    for (std::size_t i = 0; i < HW; ++i) dx[i] += dp[i] * g * is;
                }
            }
        }
    };

    return detail::make_op<T>(x.shape(), std::move(out), {x, gamma, beta}, rule);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return detail::make_op<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& n) {
        auto& p = n.parents[0];
        if (!p->tracked) return;
        for (std::size_t i = 0; i < n.pass_grad.size(); ++i)
            if (p->values[i] > T(0)) p->pass_grad[i] += n.pass_grad[i];
    });
}

// Average pooling with a square window. kernel == spatial extent gives
// global average pooling.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride) {
    if (x.rank() != 4)
        throw ShapeError("avg_pool2d: input must be NCHW, got " + shape_str(x.shape()));
    if (kernel < 1 || stride < 1) throw Error("avg_pool2d: kernel and stride must be >= 1");
    const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const long OH = (static_cast<long>(H) - kernel) / stride + 1;
    const long OW = (static_cast<long>(W) - kernel) / stride + 1;
    if (OH < 1 || OW < 1)
        throw ShapeError("avg_pool2d: window " + std::to_string(kernel) +
                         " larger than input " + shape_str(x.shape()));
    const std::size_t oh_n = static_cast<std::size_t>(OH), ow_n = static_cast<std::size_t>(OW);
    const T inv = T(1) / static_cast<T>(kernel * kernel);

    std::vector<T> out(N * C * oh_n * ow_n);
    const auto& xv = x.values();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* p = xv.data() + nc * H * W;
        T* q = out.data() + nc * oh_n * ow_n;
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
            for (std::size_t ow = 0; ow < ow_n; ++ow) {
                T s = T(0);
                for (int kh = 0; kh < kernel; ++kh)
                    for (int kw = 0; kw < kernel; ++kw)
                        s += p[(oh * stride + kh) * W + ow * stride + kw];
                q[oh * ow_n + ow] = s * inv;
            }
        }
    }

    auto rule = [N, C, H, W, kernel, stride, oh_n, ow_n, inv](detail::Node<T>& nd) {
        auto& p = nd.parents[0];
        if (!p->tracked) return;
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            T* dx = p->pass_grad.data() + nc * H * W;
            const T* dq = nd.pass_grad.data() + nc * oh_n * ow_n;
            for (std::size_t oh = 0; oh < oh_n; ++oh)
                for (std::size_t ow = 0; ow < ow_n; ++ow) {
                    const T d = dq[oh * ow_n + ow] * inv;
                    for (int kh = 0; kh < kernel; ++kh)
                        for (int kw = 0; kw < kernel; ++kw)
                            dx[(oh * stride + kh) * W + ow * stride + kw] += d;
                }
        }
    };

    return detail::make_op<T>({N, C, oh_n, ow_n}, std::move(out), {x}, rule);
}

// Fully connected layer: x (N,F) @ w (F,C) + b (C).
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
        throw ShapeError("dense: expected x (N,F), w (F,C), b (C); got " + shape_str(x.shape()) +
                         ", " + shape_str(w.shape()) + ", " + shape_str(b.shape()));
    const std::size_t N = x.shape()[0], F = x.shape()[1];
    const std::size_t FW = w.shape()[0], C = w.shape()[1];
    if (F != FW || b.size() != C)
        throw ShapeError("dense: shape mismatch " + shape_str(x.shape()) + " @ " +
                         shape_str(w.shape()) + " + " + shape_str(b.shape()));

    std::vector<T> out(N * C);
    const auto& xv = x.values();
    const auto& wv = w.values();
    const auto& bv = b.values();
    for (std::size_t n = 0; n < N; ++n) {
        T* q = out.data() + n * C;
        for (std::size_t c = 0; c < C; ++c) q[c] = bv[c];
        const T* xp = xv.data() + n * F;
        for (std::size_t f = 0; f < F; ++f) {
            const T xval = xp[f];
            const T* wrow = wv.data() + f * C;
            for (std::size_t c = 0; c < C; ++c) q[c] += xval * wrow[c];
        }
    }

    auto rule = [N, F, C](detail::Node<T>& nd) {
        auto& px = nd.parents[0];
        auto& pw = nd.parents[1];
        auto& pb = nd.parents[2];
        const auto& dy = nd.pass_grad;
        for (std::size_t n = 0; n < N; ++n) {
            const T* dyp = dy.data() + n * C;
            const T* xp = px->values.data() + n * F;
            for (std::size_t f = 0; f < F; ++f) {
                const T* wrow = pw->values.data() + f * C;
                if (px->tracked) {
                    T acc = T(0);
                    for (std::size_t c = 0; c < C; ++c) acc += dyp[c] * wrow[c];
                    px->pass_grad[n * F + f] += acc;
                }
                if (pw->tracked) {
                    T* dwrow = pw->pass_grad.data() + f * C;
                    const T xval = xp[f];
                    for (std::size_t c = 0; c < C; ++c) dwrow[c] += xval * dyp[c];
                }
            }
            if (pb->tracked)
                for (std::size_t c = 0; c < C; ++c) pb->pass_grad[c] += dyp[c];
        }
    };

    return detail::make_op<T>({N, C}, std::move(out), {x, w, b}, rule);
}

// Mean softmax cross-entropy over the batch. Logits (N,C), one label per
// row. Stable via per-row max subtraction.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw ShapeError("softmax_cross_entropy: logits must be (N,C), got " +
                         shape_str(logits.shape()));
    const std::size_t N = logits.shape()[0], C = logits.shape()[1];
    if (labels.size() != N)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(N));
    for (std::size_t n = 0; n < N; ++n)
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= C)
            throw Error("softmax_cross_entropy: label " + std::to_string(labels[n]) +
                        " out of range [0, " + std::to_string(C) + ") at row " + std::to_string(n));

    const auto& zv = logits.values();
    std::vector<T> probs(N * C);
    T loss = T(0);
    for (std::size_t n = 0; n < N; ++n) {
        const T* z = zv.data() + n * C;
        T mx = z[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, z[c]);
        T se = T(0);
        for (std::size_t c = 0; c < C; ++c) se += std::exp(z[c] - mx);
        const T lse = std::log(se) + mx;
        loss += lse - z[labels[n]];
        T* p = probs.data() + n * C;
        for (std::size_t c = 0; c < C; ++c) p[c] = std::exp(z[c] - lse);
    }
    loss /= static_cast<T>(N);

    auto rule = [N, C, probs = std::move(probs), labels](detail::Node<T>& nd) {
        auto& pz = nd.parents[0];
        if (!pz->tracked) return;
        const T d = nd.pass_grad[0] / static_cast<T>(N);
        for (std::size_t n = 0; n < N; ++n) {
            const T* p = probs.data() + n * C;
            T* dz = pz->pass_grad.data() + n * C;
            for (std::size_t c = 0; c < C; ++c) dz[c] += d * p[c];
            dz[labels[n]] -= d;
        }
    };

    return detail::make_op<T>({1}, {loss}, {logits}, rule);
}

// Row-wise argmax of (N,C) logits; first maximum wins.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
    if (logits.rank() != 2)
        throw ShapeError("argmax_rows: expected (N,C), got " + shape_str(logits.shape()));
    const std::size_t N = logits.shape()[0], C = logits.shape()[1];
    std::vector<int> idx(N);
    for (std::size_t n = 0; n < N; ++n) {
        const T* z = logits.values().data() + n * C;
        int best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (z[c] > z[best]) best = static_cast<int>(c);
        idx[n] = best;
    }
    return idx;
}

}  // namespace maxdrop

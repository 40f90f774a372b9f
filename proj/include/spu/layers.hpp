// SPDX-License-Identifier: Apache-2.0
//
// Per-layer forward and backward kernels. Activations are NHWC, conv
// kernels (kh, kw, Cin, Cout), depthwise kernels (kh, kw, C), linear
// weights (Cin, Cout). Weight gradients are produced compactly for a set of
// selected output channels: column j of the result belongs to channel
// selected[j].
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "spu/tensor.hpp"

namespace spu {

using ChannelSet = std::vector<int>;
using WeightMask = std::vector<std::uint8_t>;

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, int stride, int pad) {
  require(stride >= 1 && pad >= 0, "conv: stride must be >= 1 and pad >= 0");
  const auto padded = static_cast<long long>(in) + 2LL * pad;
  require(padded >= static_cast<long long>(k), "conv: kernel larger than padded input");
  return static_cast<std::size_t>((padded - static_cast<long long>(k)) / stride + 1);
}

inline void check_selection(const ChannelSet& sel, std::size_t cout) {
  for (std::size_t i = 0; i < sel.size(); ++i) {
    require(sel[i] >= 0 && static_cast<std::size_t>(sel[i]) < cout,
            "selected channel " + std::to_string(sel[i]) + " out of range [0, " +
                std::to_string(cout) + ")");
    require(i == 0 || sel[i - 1] < sel[i], "selected channels must be sorted and unique");
  }
}

inline ChannelSet all_channels(std::size_t n) {
  ChannelSet s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<int>(i);
  return s;
}

// ---------------------------------------------------------------- conv2d

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, std::span<const T> bias, int stride,
                       int pad) {
  require(x.rank() == 4 && w.rank() == 4, "conv_forward: expected NHWC input and 4-d kernel");
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const std::size_t KH = w.dim(0), KW = w.dim(1), Cout = w.dim(3);
  require(w.dim(2) == Cin, "conv_forward: input has " + std::to_string(Cin) +
                               " channels, kernel expects " + std::to_string(w.dim(2)));
  require(bias.empty() || bias.size() == Cout, "conv_forward: bias size mismatch");
  const std::size_t Ho = conv_out_extent(H, KH, stride, pad), Wo = conv_out_extent(W, KW, stride, pad);
  Tensor<T> y({N, Ho, Wo, Cout});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T* out = &y.at(n, oh, ow, 0);
        if (!bias.empty())
          for (std::size_t co = 0; co < Cout; ++co) out[co] = bias[co];
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const long long ih = static_cast<long long>(oh) * stride + static_cast<long long>(kh) - pad;
          if (ih < 0 || ih >= static_cast<long long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const long long iw = static_cast<long long>(ow) * stride + static_cast<long long>(kw) - pad;
            if (iw < 0 || iw >= static_cast<long long>(W)) continue;
            const T* in = &x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            const T* wk = &w.at(kh, kw, 0, 0);
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const T xv = in[ci];
              if (xv == T{0}) continue;
              const T* wrow = wk + ci * Cout;
              for (std::size_t co = 0; co < Cout; ++co) out[co] += xv * wrow[co];
            }
          }
        }
      }
  return y;
}

/// dL/dx for a conv, always with the full kernel.
template <typename T>
Tensor<T> conv_input_grad(const Tensor<T>& grad_out, const Tensor<T>& w, const Shape& in_shape,
                          int stride, int pad) {
  const std::size_t N = in_shape[0], H = in_shape[1], W = in_shape[2], Cin = in_shape[3];
  const std::size_t KH = w.dim(0), KW = w.dim(1), Cout = w.dim(3);
  const std::size_t Ho = grad_out.dim(1), Wo = grad_out.dim(2);
  require(grad_out.dim(3) == Cout, "conv_input_grad: grad_out channel mismatch");
  Tensor<T> gx(in_shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const T* g = &grad_out.at(n, oh, ow, 0);
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const long long ih = static_cast<long long>(oh) * stride + static_cast<long long>(kh) - pad;
          if (ih < 0 || ih >= static_cast<long long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const long long iw = static_cast<long long>(ow) * stride + static_cast<long long>(kw) - pad;
            if (iw < 0 || iw >= static_cast<long long>(W)) continue;
            T* dst = &gx.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            const T* wk = &w.at(kh, kw, 0, 0);
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const T* wrow = wk + ci * Cout;
              T acc{0};
              for (std::size_t co = 0; co < Cout; ++co) acc += wrow[co] * g[co];
              dst[ci] += acc;
            }
          }
        }
      }
  return gx;
}

/// Compact weight gradient (kh, kw, Cin, |selected|) zeroed outside `mask`
/// (when given, mask is congruent to the full kernel).
template <typename T>
Tensor<T> conv_weight_grad(const Tensor<T>& x, const Tensor<T>& grad_out, std::size_t KH,
                           std::size_t KW, const ChannelSet& selected, int stride, int pad,
                           const WeightMask* mask = nullptr) {
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const std::size_t Ho = grad_out.dim(1), Wo = grad_out.dim(2), Cout = grad_out.dim(3);
  check_selection(selected, Cout);
  const std::size_t S = selected.size();
  Tensor<T> gw({KH, KW, Cin, S});
  if (S == 0) return gw;
  std::vector<T> gsel(S);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const T* g = &grad_out.at(n, oh, ow, 0);
        for (std::size_t j = 0; j < S; ++j) gsel[j] = g[static_cast<std::size_t>(selected[j])];
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const long long ih = static_cast<long long>(oh) * stride + static_cast<long long>(kh) - pad;
          if (ih < 0 || ih >= static_cast<long long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const long long iw = static_cast<long long>(ow) * stride + static_cast<long long>(kw) - pad;
            if (iw < 0 || iw >= static_cast<long long>(W)) continue;
            const T* in = &x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            T* dst = &gw.at(kh, kw, 0, 0);
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const T xv = in[ci];
              T* row = dst + ci * S;
              for (std::size_t j = 0; j < S; ++j) row[j] += xv * gsel[j];
            }
          }
        }
      }
  if (mask && !mask->empty()) {
    for (std::size_t k = 0; k < KH * KW * Cin; ++k)
      for (std::size_t j = 0; j < S; ++j)
        if (!(*mask)[k * Cout + static_cast<std::size_t>(selected[j])]) gw[k * S + j] = T{0};
  }
  return gw;
}

/// Reference dense weight gradient over every output channel, no masking.
template <typename T>
Tensor<T> conv_weight_grad_dense(const Tensor<T>& x, const Tensor<T>& grad_out, std::size_t KH,
                                 std::size_t KW, int stride, int pad) {
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const std::size_t Ho = grad_out.dim(1), Wo = grad_out.dim(2), Cout = grad_out.dim(3);
  Tensor<T> gw({KH, KW, Cin, Cout});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const T* g = &grad_out.at(n, oh, ow, 0);
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const long long ih = static_cast<long long>(oh) * stride + static_cast<long long>(kh) - pad;
          if (ih < 0 || ih >= static_cast<long long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const long long iw = static_cast<long long>(ow) * stride + static_cast<long long>(kw) - pad;
            if (iw < 0 || iw >= static_cast<long long>(W)) continue;
            const T* in = &x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            T* dst = &gw.at(kh, kw, 0, 0);
            for (std::size_t ci = 0; ci < Cin; ++ci) {
              const T xv = in[ci];
              T* row = dst + ci * Cout;
              for (std::size_t co = 0; co < Cout; ++co) row[co] += xv * g[co];
            }
          }
        }
      }
  return gw;
}

/// Bias gradient for selected channels (sum of grad_out over N, H, W).
template <typename T>
std::vector<T> channel_bias_grad(const Tensor<T>& grad_out, const ChannelSet& selected) {
  const std::size_t C = grad_out.shape().back();
  const std::size_t rows = grad_out.size() / C;
  std::vector<T> gb(selected.size(), T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = grad_out.data() + r * C;
    for (std::size_t j = 0; j < selected.size(); ++j) gb[j] += g[static_cast<std::size_t>(selected[j])];
  }
  return gb;
}

/// Scatter a compact (..., |selected|) gradient back to (..., Cout).
template <typename T>
Tensor<T> expand_selected(const Tensor<T>& compact, const ChannelSet& selected, std::size_t cout) {
  Shape s = compact.shape();
  const std::size_t S = s.back();
  s.back() = cout;
  Tensor<T> full(s);
  const std::size_t rows = S ? compact.size() / S : shape_numel(s) / cout;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < S; ++j)
      full[r * cout + static_cast<std::size_t>(selected[j])] = compact[r * S + j];
  return full;
}

template <typename T>
struct ConvGrads {
  Tensor<T> grad_w;          // full kernel shape, zero outside selected ∩ mask
  std::vector<T> grad_bias;  // length Cout, zero outside selected
  Tensor<T> grad_in;
};

/// Sparse-update conv backward. `x_saved` is required iff `selected` is
/// nonempty; the input gradient always uses the full kernel.
template <typename T>
ConvGrads<T> conv_backward(const Tensor<T>* x_saved, const Tensor<T>& w, const Tensor<T>& grad_out,
                           const ChannelSet& selected, const Shape& in_shape, int stride, int pad,
                           const WeightMask* mask = nullptr) {
  const std::size_t Cout = w.dim(3);
  check_selection(selected, Cout);
  ConvGrads<T> out;
  if (!selected.empty()) {
    if (!x_saved) throw std::logic_error("conv_backward: missing saved activation for a selected layer");
    auto compact = conv_weight_grad(*x_saved, grad_out, w.dim(0), w.dim(1), selected, stride, pad, mask);
    out.grad_w = expand_selected(compact, selected, Cout);
  } else {
    out.grad_w = Tensor<T>(w.shape());
  }
  out.grad_bias.assign(Cout, T{0});
  auto gb = channel_bias_grad(grad_out, selected);
  for (std::size_t j = 0; j < selected.size(); ++j) out.grad_bias[static_cast<std::size_t>(selected[j])] = gb[j];
  out.grad_in = conv_input_grad(grad_out, w, in_shape, stride, pad);
  return out;
}

// ------------------------------------------------------------- depthwise

template <typename T>
Tensor<T> depthwise_forward(const Tensor<T>& x, const Tensor<T>& w, std::span<const T> bias, int stride,
                            int pad) {
  require(x.rank() == 4 && w.rank() == 3, "depthwise_forward: expected NHWC input and (kh, kw, C) kernel");
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t KH = w.dim(0), KW = w.dim(1);
  require(w.dim(2) == C, "depthwise_forward: channel mismatch");
  require(bias.empty() || bias.size() == C, "depthwise_forward: bias size mismatch");
  const std::size_t Ho = conv_out_extent(H, KH, stride, pad), Wo = conv_out_extent(W, KW, stride, pad);
  Tensor<T> y({N, Ho, Wo, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T* out = &y.at(n, oh, ow, 0);
        if (!bias.empty())
          for (std::size_t c = 0; c < C; ++c) out[c] = bias[c];
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const long long ih = static_cast<long long>(oh) * stride + static_cast<long long>(kh) - pad;
          if (ih < 0 || ih >= static_cast<long long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const long long iw = static_cast<long long>(ow) * stride + static_cast<long long>(kw) - pad;
            if (iw < 0 || iw >= static_cast<long long>(W)) continue;
            const T* in = &x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            const T* wk = w.data() + (kh * KW + kw) * C;
            for (std::size_t c = 0; c < C; ++c) out[c] += in[c] * wk[c];
          }
        }
      }
  return y;
}

template <typename T>
Tensor<T> depthwise_input_grad(const Tensor<T>& grad_out, const Tensor<T>& w, const Shape& in_shape,
                               int stride, int pad) {
  const std::size_t N = in_shape[0], H = in_shape[1], W = in_shape[2], C = in_shape[3];
  const std::size_t KH = w.dim(0), KW = w.dim(1);
  const std::size_t Ho = grad_out.dim(1), Wo = grad_out.dim(2);
  Tensor<T> gx(in_shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const T* g = &grad_out.at(n, oh, ow, 0);
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const long long ih = static_cast<long long>(oh) * stride + static_cast<long long>(kh) - pad;
          if (ih < 0 || ih >= static_cast<long long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const long long iw = static_cast<long long>(ow) * stride + static_cast<long long>(kw) - pad;
            if (iw < 0 || iw >= static_cast<long long>(W)) continue;
            T* dst = &gx.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            const T* wk = w.data() + (kh * KW + kw) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += wk[c] * g[c];
          }
        }
      }
  return gx;
}

/// Compact depthwise weight gradient (kh, kw, |selected|). `x_sel` holds only
/// the selected input channels: its channel j is channel selected[j].
template <typename T>
Tensor<T> depthwise_weight_grad(const Tensor<T>& x_sel, const Tensor<T>& grad_out, std::size_t KH,
                                std::size_t KW, const ChannelSet& selected, int stride, int pad,
                                const WeightMask* mask = nullptr) {
  const std::size_t N = x_sel.dim(0), H = x_sel.dim(1), W = x_sel.dim(2), S = x_sel.dim(3);
  const std::size_t Ho = grad_out.dim(1), Wo = grad_out.dim(2), C = grad_out.dim(3);
  check_selection(selected, C);
  require(S == selected.size(), "depthwise_weight_grad: saved activation does not match selection");
  Tensor<T> gw({KH, KW, S});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const T* g = &grad_out.at(n, oh, ow, 0);
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const long long ih = static_cast<long long>(oh) * stride + static_cast<long long>(kh) - pad;
          if (ih < 0 || ih >= static_cast<long long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const long long iw = static_cast<long long>(ow) * stride + static_cast<long long>(kw) - pad;
            if (iw < 0 || iw >= static_cast<long long>(W)) continue;
            const T* in = &x_sel.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            T* dst = gw.data() + (kh * KW + kw) * S;
            for (std::size_t j = 0; j < S; ++j) dst[j] += in[j] * g[static_cast<std::size_t>(selected[j])];
          }
        }
      }
  if (mask && !mask->empty())
    for (std::size_t k = 0; k < KH * KW; ++k)
      for (std::size_t j = 0; j < S; ++j)
        if (!(*mask)[k * C + static_cast<std::size_t>(selected[j])]) gw[k * S + j] = T{0};
  return gw;
}

/// Gather channels `selected` of an NHWC tensor.
template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, const ChannelSet& selected) {
  const std::size_t C = x.shape().back();
  Shape s = x.shape();
  s.back() = selected.size();
  Tensor<T> out(s);
  const std::size_t rows = x.size() / C;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < selected.size(); ++j)
      out[r * selected.size() + j] = x[r * C + static_cast<std::size_t>(selected[j])];
  return out;
}

// ---------------------------------------------------------------- linear

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, std::span<const T> bias) {
  require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0), "linear_forward: shape mismatch " +
                                                                       shape_str(x.shape()) + " x " +
                                                                       shape_str(w.shape()));
  const std::size_t N = x.dim(0), Cin = w.dim(0), Cout = w.dim(1);
  require(bias.empty() || bias.size() == Cout, "linear_forward: bias size mismatch");
  Tensor<T> y({N, Cout});
  for (std::size_t n = 0; n < N; ++n) {
    T* out = y.data() + n * Cout;
    if (!bias.empty())
      for (std::size_t o = 0; o < Cout; ++o) out[o] = bias[o];
    for (std::size_t i = 0; i < Cin; ++i) {
      const T xv = x[n * Cin + i];
      const T* wrow = w.data() + i * Cout;
      for (std::size_t o = 0; o < Cout; ++o) out[o] += xv * wrow[o];
    }
  }
  return y;
}

template <typename T>
Tensor<T> linear_input_grad(const Tensor<T>& grad_out, const Tensor<T>& w) {
  const std::size_t N = grad_out.dim(0), Cin = w.dim(0), Cout = w.dim(1);
  Tensor<T> gx({N, Cin});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < Cin; ++i) {
      T acc{0};
      for (std::size_t o = 0; o < Cout; ++o) acc += w[i * Cout + o] * grad_out[n * Cout + o];
      gx[n * Cin + i] = acc;
    }
  return gx;
}

/// Compact (Cin, |selected|) linear weight gradient.
template <typename T>
Tensor<T> linear_weight_grad(const Tensor<T>& x, const Tensor<T>& grad_out, const ChannelSet& selected,
                             const WeightMask* mask = nullptr) {
  const std::size_t N = x.dim(0), Cin = x.dim(1), Cout = grad_out.dim(1);
  check_selection(selected, Cout);
  const std::size_t S = selected.size();
  Tensor<T> gw({Cin, S});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < Cin; ++i) {
      const T xv = x[n * Cin + i];
      for (std::size_t j = 0; j < S; ++j)
        gw[i * S + j] += xv * grad_out[n * Cout + static_cast<std::size_t>(selected[j])];
    }
  if (mask && !mask->empty())
    for (std::size_t i = 0; i < Cin; ++i)
      for (std::size_t j = 0; j < S; ++j)
        if (!(*mask)[i * Cout + static_cast<std::size_t>(selected[j])]) gw[i * S + j] = T{0};
  return gw;
}

// ------------------------------------------------------ frozen group norm

/// y = gamma * (x - mean) / sqrt(var + eps) + beta with stored statistics.
/// mean/var are per channel (each channel carries its group's statistics).
template <typename T>
Tensor<T> groupnorm_forward_frozen(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                                   std::span<const T> mean, std::span<const T> var, int groups, T eps) {
  const std::size_t C = x.shape().back();
  require(groups >= 1 && C % static_cast<std::size_t>(groups) == 0,
          "groupnorm: " + std::to_string(C) + " channels not divisible by " + std::to_string(groups) +
              " groups");
  require(gamma.size() == C && beta.size() == C && mean.size() == C && var.size() == C,
          "groupnorm: parameter length mismatch");
  std::vector<T> scale(C), shift(C);
  for (std::size_t c = 0; c < C; ++c) {
    require(var[c] >= T{0}, "groupnorm: negative variance");
    scale[c] = gamma[c] / std::sqrt(var[c] + eps);
    shift[c] = beta[c] - scale[c] * mean[c];
  }
  Tensor<T> y(x.shape());
  const std::size_t rows = x.size() / C;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) y[r * C + c] = x[r * C + c] * scale[c] + shift[c];
  return y;
}

/// Frozen GN is a per-channel affine map; its input gradient is a rescale.
template <typename T>
Tensor<T> groupnorm_backward_frozen(const Tensor<T>& grad_out, std::span<const T> gamma,
                                    std::span<const T> var, T eps) {
  const std::size_t C = grad_out.shape().back();
  std::vector<T> scale(C);
  for (std::size_t c = 0; c < C; ++c) scale[c] = gamma[c] / std::sqrt(var[c] + eps);
  Tensor<T> gx(grad_out.shape());
  const std::size_t rows = grad_out.size() / C;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) gx[r * C + c] = grad_out[r * C + c] * scale[c];
  return gx;
}

// ------------------------------------------- ReLU + block activation pruning

struct BlockPruneConfig {
  int block = 2;
  double threshold = 0.15;
};

template <typename T>
struct PrunedRelu {
  Tensor<T> y;
  Bitset keep;  // positions whose gradient passes (y > 0)
};

/// ReLU followed by block pruning along the innermost dimension: a block is
/// zeroed iff every post-ReLU element in it is below `threshold`. A trailing
/// partial block is its own block.
template <typename T>
PrunedRelu<T> relu_block_prune(const Tensor<T>& x, int block, double threshold) {
  require(block >= 1, "relu_block_prune: block must be >= 1");
  require(threshold >= 0.0, "relu_block_prune: threshold must be >= 0");
  PrunedRelu<T> out{Tensor<T>(x.shape()), Bitset(x.size())};
  if (x.empty()) return out;
  const std::size_t C = x.shape().back();
  const std::size_t rows = x.size() / C;
  const auto B = static_cast<std::size_t>(block);
  const T th = static_cast<T>(threshold);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t b0 = 0; b0 < C; b0 += B) {
      const std::size_t b1 = std::min(C, b0 + B);
      bool keep = false;
      for (std::size_t c = b0; c < b1; ++c) {
        const T v = std::max(x[r * C + c], T{0});
        if (!(v < th)) keep = true;
      }
      if (!keep) continue;
      for (std::size_t c = b0; c < b1; ++c) {
        const std::size_t i = r * C + c;
        if (x[i] > T{0}) {
          out.y[i] = x[i];
          out.keep.set(i);
        }
      }
    }
  return out;
}

template <typename T>
Tensor<T> relu_block_backward(const Tensor<T>& grad_out, const Bitset& keep) {
  require(keep.size() == grad_out.size(), "relu_block_backward: mask size mismatch");
  Tensor<T> gx(grad_out.shape());
  for (std::size_t i = 0; i < grad_out.size(); ++i)
    if (keep.test(i)) gx[i] = grad_out[i];
  return gx;
}

// ------------------------------------------------------ pooling and loss

template <typename T>
Tensor<T> global_avgpool_forward(const Tensor<T>& x) {
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Tensor<T> y({N, 1, 1, C});
  const T inv = T{1} / static_cast<T>(H * W);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < H * W; ++p)
      for (std::size_t c = 0; c < C; ++c) y[n * C + c] += x[(n * H * W + p) * C + c];
    for (std::size_t c = 0; c < C; ++c) y[n * C + c] *= inv;
  }
  return y;
}

template <typename T>
Tensor<T> global_avgpool_backward(const Tensor<T>& grad_out, const Shape& in_shape) {
  const std::size_t N = in_shape[0], H = in_shape[1], W = in_shape[2], C = in_shape[3];
  Tensor<T> gx(in_shape);
  const T inv = T{1} / static_cast<T>(H * W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < H * W; ++p)
      for (std::size_t c = 0; c < C; ++c) gx[(n * H * W + p) * C + c] = grad_out[n * C + c] * inv;
  return gx;
}

template <typename T>
struct LossResult {
  T loss{};
  Tensor<T> grad_logits;
};

/// Mean softmax cross-entropy over the batch, max-subtracted.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), "cross_entropy: batch/label mismatch");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  LossResult<T> out{T{0}, Tensor<T>(logits.shape())};
  const T invN = T{1} / static_cast<T>(N);
  for (std::size_t n = 0; n < N; ++n) {
    const int label = labels[n];
    require(label >= 0 && static_cast<std::size_t>(label) < C,
            "cross_entropy: label " + std::to_string(label) + " out of range");
    const T* z = logits.data() + n * C;
    const T zmax = *std::max_element(z, z + C);
    T denom{0};
    for (std::size_t c = 0; c < C; ++c) denom += std::exp(z[c] - zmax);
    const T log_denom = std::log(denom);
    out.loss += (log_denom - (z[label] - zmax)) * invN;
    T* g = out.grad_logits.data() + n * C;
    for (std::size_t c = 0; c < C; ++c) g[c] = std::exp(z[c] - zmax - log_denom) * invN;
    g[label] -= invN;
  }
  return out;
}

template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& logits, int label) {
  const int labels[1] = {label};
  return cross_entropy_loss(logits, std::span<const int>(labels, 1));
}

}  // namespace spu

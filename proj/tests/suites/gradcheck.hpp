// SPDX-License-Identifier: Apache-2.0
//
// Analytic gradients vs central finite differences (f64, h = 1e-5) for every
// layer kind. Shared by the unit tests and the acceptance runner.
#pragma once

#include <string>
#include <vector>

#include "spu/builders.hpp"
#include "spu/engine.hpp"
#include "test_util.hpp"

namespace spu::suites {

struct GradCheckResult {
  std::string kind;
  int instances = 0;
  double max_rel_err = 0.0;
};

namespace detail {

using testing::dot;
using testing::finite_diff;
using testing::random_tensor;
using testing::rel_err;

inline ChannelSet random_subset(Rng& rng, int n) {
  const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  return rng.sample_without_replacement(n, k);
}

// Values bounded away from 0 and from the block threshold so the ReLU/prune
// decision is locally constant under +-h perturbations.
inline Tensor<double> relu_safe_tensor(Shape s, Rng& rng, double threshold) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.vec()) {
    double x;
    do x = rng.normal();
    while (std::abs(x) < 0.01 || std::abs(x - threshold) < 0.01);
    v = x;
  }
  return t;
}

}  // namespace detail

inline GradCheckResult gradcheck_conv(int instances, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed);
  GradCheckResult r{"conv2d", instances, 0.0};
  for (int t = 0; t < instances; ++t) {
    const std::size_t cin = 1 + rng.below(3), cout = 2 + rng.below(4), k = t % 2 ? 3 : 1;
    const int stride = 1 + static_cast<int>(rng.below(2)), pad = static_cast<int>(k / 2);
    auto x = random_tensor<double>({1, 5, 5, cin}, rng);
    auto w = random_tensor<double>({k, k, cin, cout}, rng);
    std::vector<double> b(cout);
    for (auto& v : b) v = rng.normal();
    auto y = conv_forward(x, w, std::span<const double>(b), stride, pad);
    auto proj = random_tensor<double>(y.shape(), rng);
    const auto sel = random_subset(rng, static_cast<int>(cout));
    auto gw = expand_selected(conv_weight_grad(x, proj, k, k, sel, stride, pad), sel, cout);
    auto gb = channel_bias_grad(proj, sel);
    auto gx = conv_input_grad(proj, w, x.shape(), stride, pad);

    std::vector<double> ws = w.vec(), xs = x.vec(), bs = b;
    auto loss = [&] {
      return dot(conv_forward(Tensor<double>(x.shape(), xs), Tensor<double>(w.shape(), ws),
                              std::span<const double>(bs), stride, pad)
                     .vec(),
                 proj.vec());
    };
    auto nw = finite_diff(ws, loss);
    auto nx = finite_diff(xs, loss);
    auto nb = finite_diff(bs, loss);
    std::vector<double> a_sel, n_sel, ab, nbs;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (std::binary_search(sel.begin(), sel.end(), static_cast<int>(i % cout))) {
        a_sel.push_back(gw[i]);
        n_sel.push_back(nw[i]);
      }
    for (std::size_t j = 0; j < sel.size(); ++j) {
      ab.push_back(gb[j]);
      nbs.push_back(nb[static_cast<std::size_t>(sel[j])]);
    }
    r.max_rel_err = std::max({r.max_rel_err, rel_err(a_sel, n_sel), rel_err(ab, nbs), rel_err(gx.vec(), nx)});
  }
  return r;
}

inline GradCheckResult gradcheck_depthwise(int instances, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed);
  GradCheckResult r{"depthwise", instances, 0.0};
  for (int t = 0; t < instances; ++t) {
    const std::size_t c = 2 + rng.below(5);
    const int stride = 1 + static_cast<int>(rng.below(2));
    auto x = random_tensor<double>({1, 6, 5, c}, rng);
    auto w = random_tensor<double>({3, 3, c}, rng);
    auto y = depthwise_forward(x, w, {}, stride, 1);
    auto proj = random_tensor<double>(y.shape(), rng);
    const auto sel = random_subset(rng, static_cast<int>(c));
    auto gw = expand_selected(depthwise_weight_grad(gather_channels(x, sel), proj, 3, 3, sel, stride, 1), sel, c);
    auto gx = depthwise_input_grad(proj, w, x.shape(), stride, 1);
    std::vector<double> ws = w.vec(), xs = x.vec();
    auto loss = [&] {
      return dot(depthwise_forward(Tensor<double>(x.shape(), xs), Tensor<double>(w.shape(), ws), {}, stride, 1).vec(),
                 proj.vec());
    };
    auto nw = finite_diff(ws, loss);
    auto nx = finite_diff(xs, loss);
    std::vector<double> a_sel, n_sel;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (std::binary_search(sel.begin(), sel.end(), static_cast<int>(i % c))) {
        a_sel.push_back(gw[i]);
        n_sel.push_back(nw[i]);
      }
    r.max_rel_err = std::max({r.max_rel_err, rel_err(a_sel, n_sel), rel_err(gx.vec(), nx)});
  }
  return r;
}

inline GradCheckResult gradcheck_linear(int instances, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed);
  GradCheckResult r{"linear", instances, 0.0};
  for (int t = 0; t < instances; ++t) {
    const std::size_t n = 1 + rng.below(3), cin = 2 + rng.below(6), cout = 2 + rng.below(5);
    auto x = random_tensor<double>({n, cin}, rng);
    auto w = random_tensor<double>({cin, cout}, rng);
    auto proj = random_tensor<double>({n, cout}, rng);
    const auto sel = random_subset(rng, static_cast<int>(cout));
    auto gw = expand_selected(linear_weight_grad(x, proj, sel), sel, cout);
    auto gx = linear_input_grad(proj, w);
    std::vector<double> ws = w.vec(), xs = x.vec();
    auto loss = [&] {
      return dot(linear_forward(Tensor<double>(x.shape(), xs), Tensor<double>(w.shape(), ws), {}).vec(), proj.vec());
    };
    auto nw = finite_diff(ws, loss);
    auto nx = finite_diff(xs, loss);
    std::vector<double> a_sel, n_sel;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (std::binary_search(sel.begin(), sel.end(), static_cast<int>(i % cout))) {
        a_sel.push_back(gw[i]);
        n_sel.push_back(nw[i]);
      }
    r.max_rel_err = std::max({r.max_rel_err, rel_err(a_sel, n_sel), rel_err(gx.vec(), nx)});
  }
  return r;
}

inline GradCheckResult gradcheck_loss(int instances, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed);
  GradCheckResult r{"cross_entropy", instances, 0.0};
  for (int t = 0; t < instances; ++t) {
    const std::size_t c = 2 + rng.below(9);
    auto z = random_tensor<double>({1, c}, rng, 3.0);
    const int label = static_cast<int>(rng.below(c));
    auto g = cross_entropy_loss(z, label).grad_logits;
    std::vector<double> zs = z.vec();
    auto loss = [&] { return cross_entropy_loss(Tensor<double>(z.shape(), zs), label).loss; };
    r.max_rel_err = std::max(r.max_rel_err, rel_err(g.vec(), finite_diff(zs, loss)));
  }
  return r;
}

inline GradCheckResult gradcheck_groupnorm(int instances, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed);
  GradCheckResult r{"groupnorm_frozen", instances, 0.0};
  for (int t = 0; t < instances; ++t) {
    const std::size_t c = 8;
    auto x = random_tensor<double>({1, 3, 3, c}, rng);
    std::vector<double> gamma(c), beta(c), mean(c), var(c);
    for (std::size_t i = 0; i < c; ++i) {
      gamma[i] = rng.normal();
      beta[i] = rng.normal();
      mean[i] = rng.normal();
      var[i] = rng.uniform(0.1, 3.0);
    }
    auto proj = random_tensor<double>(x.shape(), rng);
    auto g = groupnorm_backward_frozen<double>(proj, gamma, var, 1e-5);
    std::vector<double> xs = x.vec();
    auto loss = [&] {
      return dot(groupnorm_forward_frozen<double>(Tensor<double>(x.shape(), xs), gamma, beta, mean, var, 4, 1e-5).vec(),
                 proj.vec());
    };
    r.max_rel_err = std::max(r.max_rel_err, rel_err(g.vec(), finite_diff(xs, loss)));
  }
  return r;
}

inline GradCheckResult gradcheck_relu_block(int instances, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed);
  GradCheckResult r{"relu_block_prune", instances, 0.0};
  for (int t = 0; t < instances; ++t) {
    auto x = relu_safe_tensor({1, 3, 3, 5}, rng, 0.15);
    auto proj = random_tensor<double>(x.shape(), rng);
    auto pr = relu_block_prune(x, 2, 0.15);
    auto g = relu_block_backward(proj, pr.keep);
    std::vector<double> xs = x.vec();
    auto loss = [&] { return dot(relu_block_prune(Tensor<double>(x.shape(), xs), 2, 0.15).y.vec(), proj.vec()); };
    r.max_rel_err = std::max(r.max_rel_err, rel_err(g.vec(), finite_diff(xs, loss)));
  }
  return r;
}

/// Small residual graph (conv, GN, block-pruned ReLU, depthwise, add, pool,
/// flatten, linear) with every layer trainable at a random channel subset.
inline ModelGraph<double> random_residual_model(Rng& rng, std::size_t image = 6) {
  ModelBuilder<double> b({image, image, 2}, rng.next_u64());
  int x = b.conv_gn(kModelInput, 2, 8, 3, 1, true, "c0");
  const int skip = x;
  int y = b.conv_gn(x, 8, 16, 1, 1, true, "expand");
  y = b.dw_gn(y, 16, 1, "dw");
  y = b.conv_gn(y, 16, 8, 1, 1, false, "project");
  x = b.add_residual(skip, y);
  x = b.add_avgpool(x);
  x = b.add_flatten(x);
  b.add_linear(x, 8, 3, true, "fc");
  auto m = std::move(b).build(3);
  for (auto& n : m.nodes) {
    if (n.kind == LayerKind::GroupNorm)
      for (std::size_t c = 0; c < n.gamma.size(); ++c) {
        n.gamma[c] = rng.uniform(0.5, 1.5);
        n.beta[c] = rng.normal() * 0.3;
        n.mean[c] = rng.normal() * 0.1;
        n.var[c] = rng.uniform(0.5, 2.0);
      }
    if (!n.bias.empty())
      for (auto& v : n.bias) v = rng.normal() * 0.1;
  }
  return m;
}

inline GradCheckResult gradcheck_model(int instances, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed);
  GradCheckResult r{"model(residual,avgpool,flatten)", instances, 0.0};
  const BlockPruneConfig prune{2, 0.05};
  int done = 0;
  while (done < instances) {
    auto m = random_residual_model(rng);
    auto x = random_tensor<double>({1, 6, 6, 2}, rng);
    const int label = static_cast<int>(rng.below(3));
    auto plan = empty_plan(m);
    for (const auto& n : m.nodes)
      if (has_weights(n.kind)) set_trainable(plan, m, n.id, random_subset(rng, static_cast<int>(n.out_channels())));
    auto fw = forward(m, x, plan, prune);
    auto loss_res = cross_entropy_loss(fw.logits, label);
    auto grads = backward(m, fw.cache, loss_res.grad_logits, plan);

    // Reject instances where some pre-ReLU value sits within 1e-3 of a
    // decision boundary (kink of ReLU or the block threshold).
    bool near_kink = false;
    {
      auto probe = m;
      for (std::size_t i = 0; i < probe.size() && !near_kink; ++i) {
        if (probe[i].kind != LayerKind::ReLU) continue;
        ModelGraph<double> pre;
        pre.input_shape = m.input_shape;
        pre.nodes.assign(m.nodes.begin(), m.nodes.begin() + probe[i].inputs[0] + 1);
        auto a = predict(pre, x, prune);
        for (double v : a.vec())
          if (std::abs(v) < 1e-3 || std::abs(v - prune.threshold) < 1e-3) near_kink = true;
      }
    }
    if (near_kink) continue;

    for (const auto& pg : grads.params) {
      auto& node = m[static_cast<std::size_t>(pg.node)];
      const std::size_t cout = node.out_channels();
      std::vector<double> ws = node.weight.vec();
      auto loss = [&] {
        node.weight.vec() = ws;
        return cross_entropy_loss(predict(m, x, prune), label).loss;
      };
      auto num = finite_diff(ws, loss);
      node.weight.vec() = ws;
      auto full = expand_selected(pg.weight, pg.selected, cout);
      std::vector<double> a, n;
      for (std::size_t i = 0; i < ws.size(); ++i)
        if (std::binary_search(pg.selected.begin(), pg.selected.end(), static_cast<int>(i % cout))) {
          a.push_back(full[i]);
          n.push_back(num[i]);
        }
      r.max_rel_err = std::max(r.max_rel_err, rel_err(a, n));
    }
    ++done;
  }
  return r;
}

inline std::vector<GradCheckResult> gradcheck_all(int instances, std::uint64_t seed) {
  return {gradcheck_conv(instances, seed + 1),     gradcheck_depthwise(instances, seed + 2),
          gradcheck_linear(instances, seed + 3),   gradcheck_loss(instances, seed + 4),
          gradcheck_groupnorm(instances, seed + 5), gradcheck_relu_block(instances, seed + 6),
          gradcheck_model(instances, seed + 7)};
}

}  // namespace spu::suites

#include "cunet/autodiff.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>

#include "cunet/rng.hpp"

namespace cunet {

namespace {
void check(bool ok, const std::string& msg) {
  if (!ok) throw contract_error(msg);
}

void add_scaled(std::vector<double>& dst, const std::vector<double>& src, double factor) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

std::vector<ParamRef> collect_params(const CUNetParams& p) {
  std::vector<ParamRef> refs;
  visit_params(const_cast<CUNetParams&>(p), [&](const ParamRef& r) { refs.push_back(r); });
  return refs;
}
}  // namespace

AdamState make_adam_state(const CUNetParams& params) {
  AdamState s;
  s.m = zeros_like(params);
  s.v = zeros_like(params);
  return s;
}

LossValue mse_loss(const Tensor& z, const Tensor& target) {
  check(z.same_shape(target), "mse_loss: shape mismatch");
  const double inv_n = 1.0 / static_cast<double>(z.size());
  LossValue out{0.0, Tensor(z.height(), z.width(), z.channels())};
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = z.data()[i] - target.data()[i];
    out.loss += d * d * inv_n;
    out.grad.data()[i] = 2.0 * d * inv_n;
  }
  enforce_precision(out.grad);
  return out;
}

FilterBank filter_grad(int k_count, int s, int c_in, const Tensor& per_k, const Tensor& per_c) {
  check(per_k.channels() == k_count, "filter_grad: per_k channel mismatch");
  check(per_c.channels() == c_in, "filter_grad: per_c channel mismatch");
  check(per_k.height() == per_c.height() && per_k.width() == per_c.width(),
        "filter_grad: spatial size mismatch");
  if (c_in > 1 && k_count > c_in && s % 2 == 1) {
    // The sweep cost scales with the k side; compute the transposed gradient
    // (swapped tensors, flipped taps) and relabel. Odd s only: even filters
    // flip outside their own support.
    FilterBank swapped = filter_grad(c_in, s, k_count, per_c, per_k);
    FilterBank g(k_count, s, c_in);
    for (int k = 0; k < k_count; ++k)
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j)
          for (int c = 0; c < c_in; ++c)
            g.at(k, i, j, c) = swapped.at(c, s - 1 - i, s - 1 - j, k);
    return g;
  }
  const int H = per_k.height(), W = per_k.width();
  const int a = (s - 1) / 2;
  FilterBank g(k_count, s, c_in);

  const double* pk = per_k.data().data();
  const double* pc = per_c.data().data();
  // Per tap, sweep 8-row strips with register accumulators: the (k,c) slice
  // is built in chunks of 8 k-values held in registers across the strip.
  std::vector<double> acc(static_cast<std::size_t>(s) * s * k_count * c_in, 0.0);
  constexpr int kStrip = 8, kChunk = 8;
  for (int h0 = 0; h0 < H; h0 += kStrip) {
    const int h1 = std::min(H, h0 + kStrip);
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < s; ++j) {
        double* ap = acc.data() + (static_cast<std::size_t>(i) * s + j) * k_count * c_in;
        const int dh = i - a, dw = j - a;
        const int hh0 = std::max(h0, -dh), hh1 = std::min(h1, H - dh);
        const int ww0 = std::max(0, -dw), ww1 = std::min(W, W - dw);
        if (hh0 >= hh1 || ww0 >= ww1) continue;
        if (c_in == 1) {
          int k0 = 0;
          for (; k0 + kChunk <= k_count; k0 += kChunk) {
            double loc[kChunk] = {};
            for (int h = hh0; h < hh1; ++h) {
              const double* __restrict kr =
                  pk + (static_cast<std::size_t>(h) * W + ww0) * k_count + k0;
              const double* __restrict cr =
                  pc + (static_cast<std::size_t>(h) + dh) * W + (ww0 + dw);
              for (int w = ww0; w < ww1; ++w, kr += k_count, ++cr) {
                const double v = cr[0];
                for (int k = 0; k < kChunk; ++k) loc[k] += kr[k] * v;
              }
            }
            for (int k = 0; k < kChunk; ++k) ap[k0 + k] += loc[k];
          }
          for (; k0 < k_count; ++k0) {
            double loc = 0.0;
            for (int h = hh0; h < hh1; ++h) {
              const double* kr = pk + (static_cast<std::size_t>(h) * W + ww0) * k_count + k0;
              const double* cr = pc + (static_cast<std::size_t>(h) + dh) * W + (ww0 + dw);
              for (int w = ww0; w < ww1; ++w, kr += k_count, ++cr) loc += kr[0] * cr[0];
            }
            ap[k0] += loc;
          }
        } else {
          // multi-channel per_c: per k, chunked c accumulators in registers
          for (int k0 = 0; k0 < k_count; ++k0) {
            int c0 = 0;
            for (; c0 + kChunk <= c_in; c0 += kChunk) {
              double loc[kChunk] = {};
              for (int h = hh0; h < hh1; ++h) {
                const double* __restrict kr =
                    pk + (static_cast<std::size_t>(h) * W + ww0) * k_count + k0;
                const double* __restrict cr =
                    pc + ((static_cast<std::size_t>(h) + dh) * W + (ww0 + dw)) * c_in + c0;
                for (int w = ww0; w < ww1; ++w, kr += k_count, cr += c_in) {
                  const double v = kr[0];
                  for (int c = 0; c < kChunk; ++c) loc[c] += v * cr[c];
                }
              }
              for (int c = 0; c < kChunk; ++c) ap[k0 * c_in + c0 + c] += loc[c];
            }
            const int tail = c_in - c0;
            if (tail > 0) {
              double loc[kChunk] = {};
              for (int h = hh0; h < hh1; ++h) {
                const double* __restrict kr =
                    pk + (static_cast<std::size_t>(h) * W + ww0) * k_count + k0;
                const double* __restrict cr =
                    pc + ((static_cast<std::size_t>(h) + dh) * W + (ww0 + dw)) * c_in + c0;
                for (int w = ww0; w < ww1; ++w, kr += k_count, cr += c_in) {
                  const double v = kr[0];
                  for (int c = 0; c < tail; ++c) loc[c] += v * cr[c];
                }
              }
              for (int c = 0; c < tail; ++c) ap[k0 * c_in + c0 + c] += loc[c];
            }
          }
        }
      }
    }
  }
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int k = 0; k < k_count; ++k)
        for (int c = 0; c < c_in; ++c)
          g.at(k, i, j, c) =
              acc[((static_cast<std::size_t>(i) * s + j) * k_count + k) * c_in + c];
  enforce_precision(g.data());
  return g;
}

namespace {

void add_bank(FilterBank& dst, const FilterBank& src) {
  for (std::size_t i = 0; i < dst.data().size(); ++i) dst.data()[i] += src.data()[i];
}

struct ChainBackwardOut {
  Tensor d_input;    // gradient w.r.t. the chain's residual input
  Tensor d_code_in;  // gradient w.r.t. the initial (warm-start) code
};

ChainBackwardOut chain_backward(const ChainTrace& ct, const std::vector<LCSCBlockParams>& blocks,
                                std::vector<LCSCBlockParams>& grads, bool residual_mode,
                                Tensor d_code) {
  ChainBackwardOut out;
  out.d_input = Tensor(ct.input.height(), ct.input.width(), ct.input.channels());
  for (int j = static_cast<int>(blocks.size()) - 1; j >= 0; --j) {
    const LCSCBlockParams& blk = blocks[j];
    const BlockTrace& bt = ct.blocks[j];
    LCSCBlockParams& g = grads[j];

    // Soft-threshold backward: pass-through outside the dead zone, and the
    // threshold collects -sign(pre) over pass-through entries.
    const int K = d_code.channels();
    Tensor d_pre(d_code.height(), d_code.width(), K);
    {
      const double* __restrict pre_p = bt.pre_activation.data().data();
      const double* __restrict dc_p = d_code.data().data();
      double* __restrict dp_p = d_pre.data().data();
      const std::size_t pixels = d_code.size() / K;
      for (std::size_t p = 0; p < pixels; ++p, pre_p += K, dc_p += K, dp_p += K)
        for (int c = 0; c < K; ++c) {
          const double pre = pre_p[c];
          if (std::abs(pre) > blk.theta[c]) {
            dp_p[c] = dc_p[c];
            g.theta[c] -= (pre > 0.0 ? 1.0 : -1.0) * dc_p[c];
          }
        }
    }

    // pre = code_in + adjoint_conv(E, input - d_code) in residual mode
    Tensor e_arg = residual_mode ? sub(ct.input, bt.d_code) : ct.input;
    add_bank(g.E, filter_grad(blk.E.k(), blk.E.s(), blk.E.c_in(), e_arg, d_pre));
    Tensor e_route = conv_same(blk.E, d_pre);  // both the input and the D path
    out.d_input = add(out.d_input, e_route);

    if (residual_mode) {
      Tensor d_dcode = scale(std::move(e_route), -1.0);
      add_bank(g.D, filter_grad(blk.D.k(), blk.D.s(), blk.D.c_in(), bt.code_in, d_dcode));
      d_code = add(d_pre, conv_same(blk.D, d_dcode));
    } else {
      d_code = std::move(d_pre);
    }
  }
  out.d_code_in = std::move(d_code);
  return out;
}

}  // namespace

Gradients cunet_backward(const ForwardTrace& trace, const CUNetParams& params,
                         const Tensor& dL_dz) {
  const ModelConfig& cfg = params.cfg;
  check(trace.complete, "cunet_backward: incomplete trace");
  check(trace.task == cfg.task, "cunet_backward: trace/params task mismatch");
  check(static_cast<int>(trace.passes.size()) == cfg.outer_passes,
        "cunet_backward: trace/params pass count mismatch");
  check(dL_dz.same_shape(trace.point4), "cunet_backward: output gradient shape mismatch");
  for (const PassTrace& pt : trace.passes)
    check(static_cast<int>(pt.u.blocks.size()) == cfg.J &&
              static_cast<int>(pt.v.blocks.size()) == cfg.J &&
              static_cast<int>(pt.c.blocks.size()) == cfg.J,
          "cunet_backward: trace/params block count mismatch");

  const bool mif = cfg.task == Task::MIF;
  Gradients g = zeros_like(params);

  const PassTrace& last = trace.passes.back();
  add_bank(g.irm_gc, filter_grad(cfg.m, cfg.s, cfg.K, dL_dz, last.c.code_out));
  add_bank(g.irm_gu, filter_grad(cfg.m, cfg.s, cfg.K, dL_dz, last.u.code_out));
  Tensor d_c = adjoint_conv(params.irm_gc, dL_dz);
  Tensor d_u = adjoint_conv(params.irm_gu, dL_dz);
  Tensor d_v(d_u.height(), d_u.width(), d_u.channels());
  if (mif) {
    add_bank(g.irm_gv, filter_grad(cfg.m, cfg.s, cfg.K, dL_dz, last.v.code_out));
    d_v = adjoint_conv(params.irm_gv, dL_dz);
  }

  for (int p = static_cast<int>(trace.passes.size()) - 1; p >= 0; --p) {
    const PassTrace& pt = trace.passes[p];

    ChainBackwardOut cb = chain_backward(pt.c, params.cfpm, g.cfpm, cfg.residual, d_c);
    Tensor d_xt = slice_channels(cb.d_input, 0, cfg.m);
    Tensor d_yt = slice_channels(cb.d_input, cfg.m, cfg.m);

    // xtilde = x - adjoint_conv(syn_du, codes_u), same for y.
    add_bank(g.syn_du, filter_grad(cfg.K, cfg.s, cfg.m, pt.u.code_out, scale(d_xt, -1.0)));
    add_bank(g.syn_hv, filter_grad(cfg.K, cfg.s, cfg.m, pt.v.code_out, scale(d_yt, -1.0)));
    d_u = sub(d_u, conv_same(params.syn_du, d_xt));
    d_v = sub(d_v, conv_same(params.syn_hv, d_yt));

    ChainBackwardOut ub = chain_backward(pt.u, params.ufem_u, g.ufem_u, cfg.residual, d_u);
    ChainBackwardOut vb = chain_backward(pt.v, params.ufem_v, g.ufem_v, cfg.residual, d_v);

    if (p > 0) {
      // xhat = x - adjoint_conv(syn_dc, previous common codes), same for y.
      const Tensor& c_prev = trace.passes[p - 1].c.code_out;
      add_bank(g.syn_dc, filter_grad(cfg.K, cfg.s, cfg.m, c_prev, scale(ub.d_input, -1.0)));
      add_bank(g.syn_hc, filter_grad(cfg.K, cfg.s, cfg.m, c_prev, scale(vb.d_input, -1.0)));
      d_c = sub(cb.d_code_in, add(conv_same(params.syn_dc, ub.d_input),
                                  conv_same(params.syn_hc, vb.d_input)));
      d_u = ub.d_code_in;
      d_v = vb.d_code_in;
    }
  }

  visit_params(g, [](const ParamRef& r) {
    for (double v : *r.values)
      if (!std::isfinite(v)) throw divergence_error("cunet_backward: non-finite gradient in " + r.name);
  });
  return g;
}

void adam_step(CUNetParams& params, const Gradients& grads, AdamState& state, double lr) {
  auto prefs = collect_params(params);
  auto grefs = collect_params(grads);
  auto mrefs = collect_params(state.m);
  auto vrefs = collect_params(state.v);
  check(prefs.size() == grefs.size() && prefs.size() == mrefs.size() &&
            prefs.size() == vrefs.size(),
        "adam_step: parameter/gradient structure mismatch");
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    check(prefs[i].name == grefs[i].name && prefs[i].values->size() == grefs[i].values->size(),
          "adam_step: gradient shape mismatch at " + prefs[i].name);
    for (double v : *grefs[i].values)
      if (!std::isfinite(v))
        throw divergence_error("adam_step: non-finite gradient in " + grefs[i].name);
  }

  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    std::vector<double>& p = *prefs[i].values;
    const std::vector<double>& gv = *grefs[i].values;
    std::vector<double>& m = *mrefs[i].values;
    std::vector<double>& v = *vrefs[i].values;
    for (std::size_t e = 0; e < p.size(); ++e) {
      m[e] = state.beta1 * m[e] + (1.0 - state.beta1) * gv[e];
      v[e] = state.beta2 * v[e] + (1.0 - state.beta2) * gv[e] * gv[e];
      p[e] -= lr * (m[e] / c1) / (std::sqrt(v[e] / c2) + state.eps);
    }
    if (prefs[i].is_theta)
      for (double& t : p) t = std::max(t, 0.0);
    enforce_precision(p);
    enforce_precision(m);
    enforce_precision(v);
  }
}

double lr_at(int epoch, const TrainConfig& cfg) {
  check(epoch >= 0, "lr_at: epoch must be nonnegative");
  const int k = epoch / cfg.lr_decay_epochs;
  if (k == 0) return cfg.lr0;
  // Decays are human decimals (0.9, 0.5, ...); exponentiate the exact
  // rational so the schedule matches its decimal values to the last bit.
  // pow(0.9, 3) lands one ulp away from 0.729.
  for (double den = 10.0; den <= 1e6; den *= 10.0) {
    const double num = cfg.lr_decay * den;
    if (num == std::floor(num) && std::pow(num, k) < 9e15 && std::pow(den, k) < 9e15)
      return cfg.lr0 * (std::pow(num, static_cast<double>(k)) /
                        std::pow(den, static_cast<double>(k)));
  }
  return cfg.lr0 * std::pow(cfg.lr_decay, static_cast<double>(k));
}

TrainResult train(const TrainConfig& cfg, const std::vector<SamplePair>& dataset,
                  CUNetParams params, AdamState* state_io) {
  // The loop churns through ~256 KB temporaries; keep glibc from serving
  // them with mmap/munmap round trips.
  static const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 64 << 20);
    return true;
  }();
  (void)malloc_tuned;

  check(!dataset.empty(), "train: empty dataset");
  check(cfg.batch >= 1 && cfg.epochs >= 0, "train: bad batch/epoch config");
  for (const SamplePair& s : dataset)
    check(s.x.channels() == params.cfg.m && s.x.same_shape(s.y) && s.x.same_shape(s.z),
          "train: sample shape does not match the model");

  AdamState local_state = state_io ? *state_io : make_adam_state(params);
  TrainResult res;

  const int n = static_cast<int>(dataset.size());
  int val_n = static_cast<int>(cfg.val_fraction * n);
  val_n = std::clamp(val_n, 0, n - 1);
  const int train_n = n - val_n;

  std::vector<int> order(train_n);
  for (int i = 0; i < train_n; ++i) order[i] = i;

  auto validation_psnr = [&]() {
    const int v0 = val_n > 0 ? train_n : 0;
    const int v1 = val_n > 0 ? n : train_n;
    std::vector<double> scores(v1 - v0);
#pragma omp parallel for schedule(dynamic)
    for (int i = v0; i < v1; ++i) {
      ForwardResult fr = cunet_forward(dataset[i].x, dataset[i].y, params);
      scores[i - v0] = psnr(fr.z, dataset[i].z);
    }
    double s = 0.0;
    for (double v : scores) s += v;
    return s / scores.size();
  };

  for (int epoch = 0; epoch < cfg.epochs && !res.diverged; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    SeededRng shuffle_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch) + 1));
    for (int i = train_n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

    double epoch_loss = 0.0;
    int batches = 0;
    for (int b0 = 0; b0 < train_n && !res.diverged; b0 += cfg.batch) {
      const int bsz = std::min(cfg.batch, train_n - b0);
      std::vector<double> item_loss(bsz, 0.0);
      std::vector<Gradients> item_grads(bsz);
      bool failed = false;
#pragma omp parallel for schedule(dynamic)
      for (int b = 0; b < bsz; ++b) {
        try {
          const SamplePair& smp = dataset[order[b0 + b]];
          ForwardResult fr = cunet_forward(smp.x, smp.y, params);
          LossValue lv = mse_loss(fr.z, smp.z);
          item_loss[b] = lv.loss;
          item_grads[b] = cunet_backward(fr.trace, params, lv.grad);
        } catch (const error&) {
#pragma omp atomic write
          failed = true;
        }
      }

      double batch_loss = 0.0;
      for (double v : item_loss) batch_loss += v;
      batch_loss /= bsz;
      if (failed || !std::isfinite(batch_loss)) {
        res.diverged = true;  // params still hold the last good step
        break;
      }

      Gradients acc = zeros_like(params);
      auto acc_refs = collect_params(acc);
      const double inv_b = 1.0 / bsz;
      for (int b = 0; b < bsz; ++b) {
        auto item_refs = collect_params(item_grads[b]);
        for (std::size_t i = 0; i < acc_refs.size(); ++i)
          add_scaled(*acc_refs[i].values, *item_refs[i].values, inv_b);
      }
      visit_params(acc, [](const ParamRef& r) { enforce_precision(*r.values); });

      adam_step(params, acc, local_state, lr);
      epoch_loss += batch_loss;
      ++batches;
    }
    if (batches > 0)
      res.log.push_back({epoch, lr, epoch_loss / batches, validation_psnr()});
  }

  if (state_io) *state_io = local_state;
  res.params = std::move(params);
  return res;
}

}  // namespace cunet

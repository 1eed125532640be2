#include "cunet/model.hpp"

#include <cmath>

#include "cunet/rng.hpp"

namespace cunet {

namespace {
void check(bool ok, const std::string& msg) {
  if (!ok) throw contract_error(msg);
}

FilterBank uniform_bank(int k, int s, int c_in, SeededRng& rng) {
  FilterBank b(k, s, c_in);
  const double bound = 1.0 / std::sqrt(static_cast<double>(s) * s * c_in);
  for (double& v : b.data()) v = rng.uniform(-bound, bound);
  enforce_precision(b.data());
  return b;
}

LCSCBlockParams uniform_block(int K, int s, int m, SeededRng& rng) {
  LCSCBlockParams blk;
  blk.D = uniform_bank(K, s, m, rng);
  blk.E = uniform_bank(m, s, K, rng);
  blk.theta.assign(K, 0.01);
  return blk;
}
}  // namespace

std::string task_name(Task t) { return t == Task::MIR ? "mir" : "mif"; }

Task task_from_name(const std::string& name) {
  if (name == "mir") return Task::MIR;
  if (name == "mif") return Task::MIF;
  throw contract_error("unknown task: " + name);
}

CUNetParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  check(cfg.K >= 1 && cfg.s >= 1 && cfg.J >= 1 && cfg.m >= 1,
        "init_params: K, s, J, m must be >= 1");
  check(cfg.outer_passes >= 1, "init_params: outer_passes must be >= 1");

  SeededRng rng(seed);
  CUNetParams p;
  p.cfg = cfg;
  for (int j = 0; j < cfg.J; ++j) p.ufem_u.push_back(uniform_block(cfg.K, cfg.s, cfg.m, rng));
  for (int j = 0; j < cfg.J; ++j) p.ufem_v.push_back(uniform_block(cfg.K, cfg.s, cfg.m, rng));
  for (int j = 0; j < cfg.J; ++j) p.cfpm.push_back(uniform_block(cfg.K, cfg.s, 2 * cfg.m, rng));
  p.syn_du = uniform_bank(cfg.K, cfg.s, cfg.m, rng);
  p.syn_hv = uniform_bank(cfg.K, cfg.s, cfg.m, rng);
  p.syn_dc = uniform_bank(cfg.K, cfg.s, cfg.m, rng);
  p.syn_hc = uniform_bank(cfg.K, cfg.s, cfg.m, rng);
  p.irm_gc = uniform_bank(cfg.m, cfg.s, cfg.K, rng);
  p.irm_gu = uniform_bank(cfg.m, cfg.s, cfg.K, rng);
  if (cfg.task == Task::MIF) p.irm_gv = uniform_bank(cfg.m, cfg.s, cfg.K, rng);
  return p;
}

void visit_params(CUNetParams& p, const std::function<void(const ParamRef&)>& fn) {
  auto bank_ref = [&](const std::string& name, FilterBank& b) {
    fn(ParamRef{name, &b.data(), {b.k(), b.s(), b.s(), b.c_in()}, false});
  };
  auto block_refs = [&](const std::string& prefix, std::vector<LCSCBlockParams>& blocks) {
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      const std::string base = prefix + "." + std::to_string(j);
      bank_ref(base + ".D", blocks[j].D);
      bank_ref(base + ".E", blocks[j].E);
      fn(ParamRef{base + ".theta", &blocks[j].theta,
                  {static_cast<int>(blocks[j].theta.size())}, true});
    }
  };
  block_refs("ufem_u", p.ufem_u);
  block_refs("ufem_v", p.ufem_v);
  block_refs("cfpm", p.cfpm);
  bank_ref("syn_du", p.syn_du);
  bank_ref("syn_hv", p.syn_hv);
  bank_ref("syn_dc", p.syn_dc);
  bank_ref("syn_hc", p.syn_hc);
  bank_ref("irm_gc", p.irm_gc);
  bank_ref("irm_gu", p.irm_gu);
  if (p.cfg.task == Task::MIF) bank_ref("irm_gv", p.irm_gv);
}

CUNetParams zeros_like(const CUNetParams& p) {
  CUNetParams z = p;
  visit_params(z, [](const ParamRef& r) {
    for (double& v : *r.values) v = 0.0;
  });
  return z;
}

namespace {

Tensor chain_forward(const Tensor& input, const std::vector<LCSCBlockParams>& blocks,
                     ChainTrace* trace, bool residual_mode, const Tensor* warm_start) {
  const int K = blocks.empty() ? 0 : blocks.front().D.k();
  Tensor code = warm_start ? *warm_start
                           : Tensor(input.height(), input.width(), std::max(K, 1));
  if (trace) {
    trace->input = input;
    trace->blocks.clear();
  }
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    const LCSCBlockParams& blk = blocks[j];
    check(input.channels() == blk.D.c_in(), "block forward: residual channel mismatch");
    check(code.channels() == blk.D.k(), "block forward: code channel mismatch");

    BlockTrace bt;
    Tensor pre;
    if (residual_mode) {
      // code - E*(D*code) + E*input, with E applied once to the residual
      bt.d_code = adjoint_conv(blk.D, code);
      pre = add(code, adjoint_conv(blk.E, sub(input, bt.d_code)));
    } else {
      pre = add(code, adjoint_conv(blk.E, input));
    }
    if (!all_finite(pre))
      throw divergence_error("forward divergence in block " + std::to_string(j));
    bt.code_in = std::move(code);
    code = soft_threshold(pre, blk.theta);
    bt.pre_activation = std::move(pre);
    if (trace) trace->blocks.push_back(std::move(bt));
  }
  if (trace) trace->code_out = code;
  return code;
}

}  // namespace

Tensor ufem_forward(const Tensor& residual, const std::vector<LCSCBlockParams>& blocks,
                    ChainTrace* trace, bool residual_mode, const Tensor* warm_start) {
  return chain_forward(residual, blocks, trace, residual_mode, warm_start);
}

Tensor cfpm_forward(const Tensor& xtilde, const Tensor& ytilde,
                    const std::vector<LCSCBlockParams>& blocks, ChainTrace* trace,
                    bool residual_mode, const Tensor* warm_start) {
  check(xtilde.same_shape(ytilde), "cfpm_forward: residual shape mismatch");
  Tensor stacked = concat_channels(xtilde, ytilde);
  return chain_forward(stacked, blocks, trace, residual_mode, warm_start);
}

Reconstruction irm_reconstruct(const Tensor& common, const Tensor& unique_x,
                               const Tensor* unique_y, const CUNetParams& params) {
  const bool mif = params.cfg.task == Task::MIF;
  check(common.channels() == params.irm_gc.c_in(), "irm_reconstruct: code channel mismatch");
  check(mif || unique_y == nullptr,
        "irm_reconstruct: unique_y codes supplied for an MIR model");
  check(!mif || unique_y != nullptr, "irm_reconstruct: MIF model needs unique_y codes");

  Reconstruction rec;
  rec.point1 = conv_same(params.irm_gc, common);
  rec.point2 = conv_same(params.irm_gu, unique_x);
  rec.z = add(rec.point1, rec.point2);
  if (mif) {
    rec.point3 = conv_same(params.irm_gv, *unique_y);
    rec.z = add(rec.z, rec.point3);
  }
  return rec;
}

ForwardResult cunet_forward(const Tensor& x, const Tensor& y, const CUNetParams& params) {
  const ModelConfig& cfg = params.cfg;
  check(x.same_shape(y), "cunet_forward: x/y shape mismatch");
  check(x.channels() == cfg.m, "cunet_forward: input channel count != m");

  ForwardResult out;
  ForwardTrace& tr = out.trace;
  tr.task = cfg.task;
  tr.x = x;
  tr.y = y;

  Tensor codes_u, codes_v, codes_c;
  for (int pass = 0; pass < cfg.outer_passes; ++pass) {
    PassTrace pt;
    pt.xhat = pass == 0 ? x : sub(x, adjoint_conv(params.syn_dc, codes_c));
    pt.yhat = pass == 0 ? y : sub(y, adjoint_conv(params.syn_hc, codes_c));

    const Tensor* warm_u = pass == 0 ? nullptr : &codes_u;
    const Tensor* warm_v = pass == 0 ? nullptr : &codes_v;
    const Tensor* warm_c = pass == 0 ? nullptr : &codes_c;

    codes_u = ufem_forward(pt.xhat, params.ufem_u, &pt.u, cfg.residual, warm_u);
    codes_v = ufem_forward(pt.yhat, params.ufem_v, &pt.v, cfg.residual, warm_v);

    pt.xtilde = sub(x, adjoint_conv(params.syn_du, codes_u));
    pt.ytilde = sub(y, adjoint_conv(params.syn_hv, codes_v));
    codes_c = cfpm_forward(pt.xtilde, pt.ytilde, params.cfpm, &pt.c, cfg.residual, warm_c);

    tr.passes.push_back(std::move(pt));
  }

  Reconstruction rec = irm_reconstruct(codes_c, codes_u,
                                       cfg.task == Task::MIF ? &codes_v : nullptr, params);
  if (!all_finite(rec.z)) throw divergence_error("cunet_forward: non-finite output");
  tr.point1 = rec.point1;
  tr.point2 = rec.point2;
  tr.point3 = rec.point3;
  tr.point4 = rec.z;
  tr.complete = true;
  out.z = rec.z;
  return out;
}

FilterBank transpose_bank(const FilterBank& bank) {
  const int s = bank.s();
  const int out_s = (s % 2 == 1) ? s : s + 1;
  FilterBank out(bank.c_in(), out_s, bank.k());
  for (int k = 0; k < bank.k(); ++k)
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j)
        for (int c = 0; c < bank.c_in(); ++c)
          out.at(c, s - 1 - i, s - 1 - j, k) = bank.at(k, i, j, c);
  return out;
}

std::vector<LCSCBlockParams> tie_to_ista(const FilterBank& bank, double L, double lambda, int J) {
  check(L > 0.0, "tie_to_ista: L must be positive");
  check(J >= 0, "tie_to_ista: J must be nonnegative");
  LCSCBlockParams blk;
  blk.D = bank;
  blk.E = transpose_bank(bank);
  for (double& v : blk.E.data()) v /= L;
  blk.theta.assign(bank.k(), lambda / L);
  return std::vector<LCSCBlockParams>(static_cast<std::size_t>(J), blk);
}

Decomposition decompose(const ForwardTrace& trace) {
  check(trace.complete, "decompose: incomplete forward trace");
  Decomposition d;
  d.common = trace.point1;
  d.unique_x = trace.point2;
  d.final = trace.point4;
  if (trace.task == Task::MIF) d.unique_y = trace.point3;
  return d;
}

}  // namespace cunet

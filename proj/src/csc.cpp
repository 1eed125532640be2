#include "cunet/csc.hpp"

#include <cmath>
#include <string>

#include "cunet/rng.hpp"

namespace cunet {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw contract_error(msg);
}

// One ISTA solve used both standalone and inside the alternating scheme.
IstaResult ista_run(const Tensor& signal, const FilterBank& bank, double lambda,
                    const SolverConfig& cfg, const Tensor* warm) {
  check(cfg.inner_iters >= 1, "ista_csc: inner_iters must be >= 1");
  check(lambda >= 0.0, "ista_csc: lambda must be nonnegative");
  check(signal.channels() == bank.c_in(), "ista_csc: signal/bank channel mismatch");

  double step = cfg.step_size;
  if (step <= 0.0) {
    const double L =
        lipschitz_upper_bound(bank, signal.height(), signal.width(), cfg.power_iters, cfg.seed);
    step = 1.0 / L;
  }

  IstaResult res;
  res.codes = warm ? *warm : Tensor(signal.height(), signal.width(), bank.k());
  check(res.codes.channels() == bank.k() && res.codes.height() == signal.height() &&
            res.codes.width() == signal.width(),
        "ista_csc: warm start shape mismatch");

  CSCProblem obj_p{signal, bank, lambda};
  double prev = csc_objective(obj_p, res.codes);
  for (int it = 0; it < cfg.inner_iters; ++it) {
    Tensor residual = sub(synthesize(bank, res.codes), signal);
    Tensor grad = conv_same(bank, residual);
    res.codes = soft_threshold(sub(res.codes, scale(grad, step)), lambda * step);
    const double obj = csc_objective(obj_p, res.codes);
    if (!std::isfinite(obj))
      throw divergence_error("ista_csc: non-finite objective at iteration " + std::to_string(it));
    res.objective_trace.push_back(obj);
    if (cfg.tolerance > 0.0 && std::abs(prev - obj) <= cfg.tolerance * std::max(std::abs(prev), 1e-300))
      break;
    prev = obj;
  }
  return res;
}

}  // namespace

double lipschitz_upper_bound(const FilterBank& bank, int height, int width, int iters,
                             std::uint64_t seed) {
  check(iters >= 1, "lipschitz_upper_bound: iters must be >= 1");
  check(height >= 1 && width >= 1, "lipschitz_upper_bound: empty domain");

  SeededRng rng(seed);
  Tensor u(height, width, bank.k());
  for (double& v : u.data()) v = rng.uniform(-1.0, 1.0);

  double eig = 0.0;
  for (int it = 0; it < iters; ++it) {
    Tensor v = conv_same(bank, adjoint_conv(bank, u));  // Gram operator on code space
    const double norm = std::sqrt(sq_l2_norm(v));
    if (norm < 1e-300) return 1e-12;  // zero bank
    eig = dot(u, v) / sq_l2_norm(u);
    u = scale(v, 1.0 / norm);
  }
  return std::max(eig * 1.01, 1e-12);
}

double csc_objective(const CSCProblem& p, const Tensor& codes) {
  check(codes.channels() == p.bank.k(), "csc_objective: codes/bank channel mismatch");
  check(p.x.channels() == p.bank.c_in(), "csc_objective: signal/bank channel mismatch");
  const Tensor recon = synthesize(p.bank, codes);
  check(recon.same_shape(p.x), "csc_objective: shape mismatch");
  return 0.5 * sq_l2_norm(sub(p.x, recon)) + p.lambda * l1_norm(codes);
}

IstaResult ista_csc(const CSCProblem& p, const SolverConfig& cfg) {
  return ista_run(p.x, p.bank, p.lambda, cfg, nullptr);
}

IstaResult ista_csc(const CSCProblem& p, const SolverConfig& cfg, const Tensor& warm_start) {
  return ista_run(p.x, p.bank, p.lambda, cfg, &warm_start);
}

double mcsc_objective(const MCSCProblem& p, const Tensor& common, const Tensor& unique_x,
                      const Tensor& unique_y) {
  const int K = p.d_c.k();
  check(common.channels() == K && unique_x.channels() == K && unique_y.channels() == K,
        "mcsc_objective: code channel mismatch");
  Tensor rx = sub(p.x, add(synthesize(p.d_c, common), synthesize(p.d_u, unique_x)));
  Tensor ry = sub(p.y, add(synthesize(p.h_c, common), synthesize(p.h_v, unique_y)));
  return 0.5 * sq_l2_norm(rx) + 0.5 * sq_l2_norm(ry) +
         p.lambda * (l1_norm(common) + l1_norm(unique_x) + l1_norm(unique_y));
}

FilterBank concat_banks(const FilterBank& a, const FilterBank& b) {
  check(a.k() == b.k() && a.s() == b.s(), "concat_banks: K or s mismatch");
  FilterBank out(a.k(), a.s(), a.c_in() + b.c_in());
  for (int k = 0; k < a.k(); ++k)
    for (int i = 0; i < a.s(); ++i)
      for (int j = 0; j < a.s(); ++j) {
        for (int c = 0; c < a.c_in(); ++c) out.at(k, i, j, c) = a.at(k, i, j, c);
        for (int c = 0; c < b.c_in(); ++c) out.at(k, i, j, a.c_in() + c) = b.at(k, i, j, c);
      }
  return out;
}

McscResult mcsc_alternating_solve(const MCSCProblem& p, const SolverConfig& cfg) {
  check(cfg.outer_iters >= 1, "mcsc_alternating_solve: outer_iters must be >= 1");
  check(p.d_c.same_shape(p.d_u) && p.h_c.same_shape(p.h_v) && p.d_c.k() == p.h_c.k() &&
            p.d_c.s() == p.h_c.s(),
        "mcsc_alternating_solve: banks must share K and s");
  check(p.x.height() == p.y.height() && p.x.width() == p.y.width(),
        "mcsc_alternating_solve: x/y spatial size mismatch");

  const int H = p.x.height(), W = p.x.width(), K = p.d_c.k();
  McscResult res;
  res.common = Tensor(H, W, K);
  res.unique_x = Tensor(H, W, K);
  res.unique_y = Tensor(H, W, K);

  const FilterBank joint = concat_banks(p.d_c, p.h_c);

  // One step size per subproblem; each inner solve is plain ISTA on that
  // subproblem, so the full objective never increases across step boundaries.
  SolverConfig sub_cfg = cfg;
  auto auto_step = [&](const FilterBank& bank) {
    if (cfg.step_size > 0.0) return cfg.step_size;
    return 1.0 / lipschitz_upper_bound(bank, H, W, cfg.power_iters, cfg.seed);
  };
  const double step_u = auto_step(p.d_u);
  const double step_v = auto_step(p.h_v);
  const double step_c = auto_step(joint);

  for (int cycle = 0; cycle < cfg.outer_iters; ++cycle) {
    Tensor xhat = sub(p.x, synthesize(p.d_c, res.common));
    sub_cfg.step_size = step_u;
    res.unique_x = ista_run(xhat, p.d_u, p.lambda, sub_cfg, &res.unique_x).codes;
    res.objective_trace.push_back(mcsc_objective(p, res.common, res.unique_x, res.unique_y));

    Tensor yhat = sub(p.y, synthesize(p.h_c, res.common));
    sub_cfg.step_size = step_v;
    res.unique_y = ista_run(yhat, p.h_v, p.lambda, sub_cfg, &res.unique_y).codes;
    res.objective_trace.push_back(mcsc_objective(p, res.common, res.unique_x, res.unique_y));

    Tensor xtilde = sub(p.x, synthesize(p.d_u, res.unique_x));
    Tensor ytilde = sub(p.y, synthesize(p.h_v, res.unique_y));
    Tensor stacked = concat_channels(xtilde, ytilde);
    sub_cfg.step_size = step_c;
    res.common = ista_run(stacked, joint, p.lambda, sub_cfg, &res.common).codes;
    res.objective_trace.push_back(mcsc_objective(p, res.common, res.unique_x, res.unique_y));
  }
  return res;
}

}  // namespace cunet

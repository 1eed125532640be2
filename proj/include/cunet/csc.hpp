#ifndef CUNET_CSC_HPP
#define CUNET_CSC_HPP

#include <cstdint>
#include <vector>

#include "cunet/tensor.hpp"

namespace cunet {

// Single-dictionary convolutional sparse coding:
//   minimize 1/2 ||x - sum_k bank_k * u_k||^2 + lambda * sum_k ||u_k||_1
struct CSCProblem {
  Tensor x;         // signal, bank.c_in channels
  FilterBank bank;  // K analysis filters over the signal channels
  double lambda = 0.0;
};

// Coupled two-signal problem with shared common codes:
//   1/2 ||x - Dc*C - Du*U||^2 + 1/2 ||y - Hc*C - Hv*V||^2
//   + lambda (||C||_1 + ||U||_1 + ||V||_1)
struct MCSCProblem {
  Tensor x, y;
  FilterBank d_c, d_u, h_c, h_v;  // all with the same K and s
  double lambda = 0.0;
};

struct SolverConfig {
  int inner_iters = 50;
  int outer_iters = 10;
  double step_size = 0.0;   // <= 0 selects 1/L via power iteration
  double tolerance = 1e-8;  // relative objective-change stop; <= 0 disables
  int power_iters = 50;
  std::uint64_t seed = 0;
};

// Code-space synthesis sum_k bank_k * codes_k; the adjoint orientation of the
// analysis correlation, mapping K channels back to the signal channels.
inline Tensor synthesize(const FilterBank& bank, const Tensor& codes) {
  return adjoint_conv(bank, codes);
}

// Largest eigenvalue of the dictionary Gram operator on an height x width
// domain, estimated by power iteration, times a 1.01 safety factor.
double lipschitz_upper_bound(const FilterBank& bank, int height, int width, int iters,
                             std::uint64_t seed);

double csc_objective(const CSCProblem& p, const Tensor& codes);

struct IstaResult {
  Tensor codes;
  std::vector<double> objective_trace;  // objective after every iteration
};

// ISTA from codes = 0 (or the warm start), step 1/L when cfg.step_size <= 0;
// the proximal threshold is lambda * step.
IstaResult ista_csc(const CSCProblem& p, const SolverConfig& cfg);
IstaResult ista_csc(const CSCProblem& p, const SolverConfig& cfg, const Tensor& warm_start);

double mcsc_objective(const MCSCProblem& p, const Tensor& common, const Tensor& unique_x,
                      const Tensor& unique_y);

struct McscResult {
  Tensor common, unique_x, unique_y;
  std::vector<double> objective_trace;  // objective after every block update
};

// Block-coordinate solve: unique-x codes, unique-y codes, then the common
// codes against the concatenated residuals, warm-started across cycles.
McscResult mcsc_alternating_solve(const MCSCProblem& p, const SolverConfig& cfg);

// Per-filter concatenation of two banks along the input-channel axis,
// pairing the stacked residual signal in the common-code subproblem.
FilterBank concat_banks(const FilterBank& a, const FilterBank& b);

}  // namespace cunet

#endif

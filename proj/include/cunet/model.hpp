#ifndef CUNET_MODEL_HPP
#define CUNET_MODEL_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cunet/tensor.hpp"

namespace cunet {

enum class Task { MIR, MIF };

std::string task_name(Task t);
Task task_from_name(const std::string& name);

// One unrolled shrinkage block. D maps codes back to the signal domain and E
// maps the signal domain to codes; both are applied through adjoint_conv, so
// D is stored with k = K, c_in = channels and E transposed (k = channels,
// c_in = K).
struct LCSCBlockParams {
  FilterBank D;
  FilterBank E;
  std::vector<double> theta;  // K nonnegative thresholds, one per code channel
};

struct ModelConfig {
  Task task = Task::MIR;
  int K = 64;           // filters per bank
  int s = 8;            // filter spatial size
  int J = 4;            // blocks per module
  int m = 1;            // image channels
  int outer_passes = 1;
  bool residual = true;  // false drops the -E*(D*code) feedback term
};

struct CUNetParams {
  ModelConfig cfg;
  std::vector<LCSCBlockParams> ufem_u;  // unique-code extractor for x
  std::vector<LCSCBlockParams> ufem_v;  // unique-code extractor for y
  std::vector<LCSCBlockParams> cfpm;    // common-code extractor, 2m-channel input
  FilterBank syn_du, syn_hv;  // unique-synthesis banks forming the common-stage residuals
  FilterBank syn_dc, syn_hc;  // common-synthesis banks, active when outer_passes > 1
  FilterBank irm_gc, irm_gu;  // reconstruction banks (k = m, c_in = K, conv_same)
  FilterBank irm_gv;          // second unique reconstruction, MIF only
};

// Uniform init in [-b, b] with b = 1/sqrt(s*s*c_in) per bank; thetas 0.01.
// Deterministic given the seed.
CUNetParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// Visits every learnable array in a fixed order; the same enumeration drives
// the optimizer, gradient containers, and checkpoint tensor tables.
// shape holds bank dims (k, s, s, c_in) or (K) for thresholds.
struct ParamRef {
  std::string name;
  std::vector<double>* values;
  std::vector<int> shape;
  bool is_theta;
};
void visit_params(CUNetParams& p, const std::function<void(const ParamRef&)>& fn);

// Same-shape copy with every learnable value set to zero.
CUNetParams zeros_like(const CUNetParams& p);

struct BlockTrace {
  Tensor code_in;         // U_j entering the block
  Tensor pre_activation;  // value fed to the soft threshold
  Tensor d_code;          // adjoint_conv(D, code_in); empty in non-residual mode
};

struct ChainTrace {
  Tensor input;  // the residual signal this chain codes against
  std::vector<BlockTrace> blocks;
  Tensor code_out;
};

struct PassTrace {
  Tensor xhat, yhat;      // residuals fed to the unique extractors
  ChainTrace u, v;
  Tensor xtilde, ytilde;  // residuals after unique synthesis
  ChainTrace c;           // input is concat(xtilde, ytilde)
};

struct ForwardTrace {
  Task task = Task::MIR;
  Tensor x, y;
  std::vector<PassTrace> passes;
  Tensor point1;  // common reconstruction
  Tensor point2;  // unique reconstruction of x
  Tensor point3;  // unique reconstruction of y, MIF only
  Tensor point4;  // final output, the exact sum of the points above
  bool complete = false;
};

// J unrolled blocks applied to one residual signal. warm_start, when given,
// replaces the zero initial code.
Tensor ufem_forward(const Tensor& residual, const std::vector<LCSCBlockParams>& blocks,
                    ChainTrace* trace = nullptr, bool residual_mode = true,
                    const Tensor* warm_start = nullptr);

// Common-code extractor: same block iteration on the channel-concatenated
// residual pair.
Tensor cfpm_forward(const Tensor& xtilde, const Tensor& ytilde,
                    const std::vector<LCSCBlockParams>& blocks, ChainTrace* trace = nullptr,
                    bool residual_mode = true, const Tensor* warm_start = nullptr);

struct Reconstruction {
  Tensor point1, point2, point3, z;  // point3 empty for MIR
};

Reconstruction irm_reconstruct(const Tensor& common, const Tensor& unique_x,
                               const Tensor* unique_y, const CUNetParams& params);

struct ForwardResult {
  Tensor z;
  ForwardTrace trace;
};

ForwardResult cunet_forward(const Tensor& x, const Tensor& y, const CUNetParams& params);

// Transposed realization of a bank: adjoint_conv(transpose_bank(B), t) equals
// conv_same(B, t) for every t. Exact for odd s; even s needs one extra
// tap row/column, so the result has spatial size s+1.
FilterBank transpose_bank(const FilterBank& bank);

// Blocks that make ufem_forward reproduce J ISTA iterations with step 1/L:
// D = bank, E = (1/L) * transpose_bank(bank), theta = lambda/L.
std::vector<LCSCBlockParams> tie_to_ista(const FilterBank& bank, double L, double lambda, int J);

struct Decomposition {
  Tensor common, unique_x, final;
  std::optional<Tensor> unique_y;  // present for MIF traces
};

// The exported component images of a completed forward trace.
Decomposition decompose(const ForwardTrace& trace);

}  // namespace cunet

#endif

#ifndef CUNET_AUTODIFF_HPP
#define CUNET_AUTODIFF_HPP

#include <cstdint>
#include <vector>

#include "cunet/data.hpp"
#include "cunet/model.hpp"

namespace cunet {

// Gradient container: a CUNetParams-shaped structure whose values are
// d(loss)/d(parameter) for the matching field.
using Gradients = CUNetParams;

struct AdamState {
  CUNetParams m, v;  // first- and second-moment accumulators
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

AdamState make_adam_state(const CUNetParams& params);

struct LossValue {
  double loss;
  Tensor grad;  // d(loss)/d(prediction)
};

// Mean squared error over all samples; grad = 2 (z - target) / N.
LossValue mse_loss(const Tensor& z, const Tensor& target);

// Filter gradient of a correlation under "same" zero padding:
//   G(k, i, j, c) = sum_{h,w} per_k(h, w, k) * per_c(h+i-a, w+j-a, c)
// with a = (s-1)/2. This single kernel serves both orientations: for
// conv_same(B, t) pass per_k = output grad, per_c = t; for adjoint_conv(B, r)
// pass per_k = r, per_c = output grad.
FilterBank filter_grad(int k_count, int s, int c_in, const Tensor& per_k, const Tensor& per_c);

// Exact reverse-mode gradients of every bank and threshold through a
// recorded forward trace. The soft-threshold backward passes through where
// |pre-activation| > theta and is zero otherwise (subgradient 0 at the kink).
Gradients cunet_backward(const ForwardTrace& trace, const CUNetParams& params,
                         const Tensor& dL_dz);

// Bias-corrected Adam update; thresholds are clamped nonnegative afterwards.
void adam_step(CUNetParams& params, const Gradients& grads, AdamState& state, double lr);

struct TrainConfig {
  double lr0 = 1e-4;
  double lr_decay = 0.9;
  int lr_decay_epochs = 50;
  int batch = 64;
  int epochs = 200;
  int patch = 64;
  std::string loss = "mse";
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
};

// lr0 * decay^floor(epoch / decay_epochs)
double lr_at(int epoch, const TrainConfig& cfg);

struct EpochLog {
  int epoch;
  double lr;
  double train_loss;
  double val_psnr;
};

struct TrainResult {
  CUNetParams params;
  std::vector<EpochLog> log;
  bool diverged = false;  // params are from the last good step when set
};

// Mini-batch Adam training with seeded shuffling. Batch items run in
// parallel; gradients reduce in index order, so results are identical at any
// thread count. The held-out tail of the dataset provides the per-epoch
// validation PSNR (the training set itself when val_fraction rounds to zero).
TrainResult train(const TrainConfig& cfg, const std::vector<SamplePair>& dataset,
                  CUNetParams params, AdamState* state = nullptr);

}  // namespace cunet

#endif

#ifndef CUNET_DATA_HPP
#define CUNET_DATA_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cunet/rng.hpp"
#include "cunet/tensor.hpp"

namespace cunet {

enum class TaskKind { GuidedSR, GuidedDenoise, MultifocusFuse };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

// One training/eval triple: degraded or source input x, guidance or second
// source y, ground-truth target z. All three share the spatial size.
struct SamplePair {
  Tensor x, y, z;
  TaskKind task = TaskKind::GuidedSR;
  bool degenerate_mask = false;  // multifocus pairs built from an all-0/all-1 mask
};

// Separable cubic-convolution resampling (kernel parameter a = -0.5),
// half-pixel-center coordinates, edges clamped.
Tensor bicubic_resize(const Tensor& img, double scale);

// Bicubic downsample by `factor` then bicubic upsample back to the original
// size; the standard low-resolution degradation pipeline.
Tensor degrade_sr(const Tensor& hr, int factor);

// Adds i.i.d. N(0, (sigma/255)^2) to a [0,1]-scaled image. No clipping.
Tensor add_gaussian_noise(const Tensor& img, double sigma, SeededRng& rng);

// Separable normalized Gaussian, truncated at `radius` taps per side,
// edges clamped.
Tensor gaussian_blur(const Tensor& img, double sigma_b, int radius);

// Near/far focus pair: x is blurred where mask==1, y where mask==0, z is the
// pristine image. Border blending uses the mask blurred with the same kernel.
SamplePair make_multifocus_pair(const Tensor& img, const Tensor& mask, double sigma_b,
                                int radius);

// Aligned crops of x, y, z in row-major traversal order.
std::vector<SamplePair> extract_patches(const SamplePair& pair, int size, int stride);

double rmse(const Tensor& a, const Tensor& b);  // reported on the 0-255 scale
double psnr(const Tensor& a, const Tensor& b);  // dB on the [0,1] scale, capped at 99
double ssim(const Tensor& a, const Tensor& b);  // 11x11 Gaussian window, sigma 1.5

struct DatasetOptions {
  int size = 64;           // square sample size
  int sr_factor = 4;
  double noise_sigma = 25.0;  // 0-255 units
  double blur_sigma = 2.0;
  int blur_radius = 4;
};

// Deterministic synthetic triples for the three desk-scale tasks. Sample i
// draws from its own stream derive_seed(seed, i), so generation order and
// concurrency cannot change the data.
std::vector<SamplePair> synth_guided_dataset(TaskKind kind, int count, std::uint64_t seed,
                                             const DatasetOptions& opts = {});

// BT.601 luminance of a 3-channel image; single-channel input passes through.
Tensor luminance(const Tensor& img);

}  // namespace cunet

#endif

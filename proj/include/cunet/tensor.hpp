#ifndef CUNET_TENSOR_HPP
#define CUNET_TENSOR_HPP

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cunet {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition / shape-contract violations.
class contract_error : public error {
 public:
  using error::error;
};

// Non-finite values produced by a solver, forward pass, or optimizer.
class divergence_error : public error {
 public:
  using error::error;
};

// File parsing / serialization failures.
class io_error : public error {
 public:
  using error::error;
};

// Process-global sample precision. f64 is the verification default;
// training runs switch to f32, which rounds every produced sample
// through IEEE single precision.
enum class Precision { f32, f64 };

void set_precision(Precision p);
Precision precision();

// H x W x C grid of samples, row-major (h, w, c).
class Tensor {
 public:
  Tensor() = default;
  Tensor(int height, int width, int channels, double fill = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int h, int w, int c) {
    return data_[(static_cast<std::size_t>(h) * width_ + w) * channels_ + c];
  }
  double at(int h, int w, int c) const {
    return data_[(static_cast<std::size_t>(h) * width_ + w) * channels_ + c];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Tensor& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

// K filters of spatial size s x s over c_in input channels,
// stored (k, i, j, c) with c contiguous.
class FilterBank {
 public:
  FilterBank() = default;
  FilterBank(int k, int s, int c_in, double fill = 0.0);

  int k() const { return k_; }
  int s() const { return s_; }
  int c_in() const { return c_in_; }
  // Correlation anchor: tap (anchor, anchor) sits on the output pixel.
  int anchor() const { return (s_ - 1) / 2; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int k, int i, int j, int c) {
    return data_[((static_cast<std::size_t>(k) * s_ + i) * s_ + j) * c_in_ + c];
  }
  double at(int k, int i, int j, int c) const {
    return data_[((static_cast<std::size_t>(k) * s_ + i) * s_ + j) * c_in_ + c];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const FilterBank& o) const {
    return k_ == o.k_ && s_ == o.s_ && c_in_ == o.c_in_;
  }

 private:
  int k_ = 0;
  int s_ = 0;
  int c_in_ = 0;
  std::vector<double> data_;
};

// Multi-channel correlation with "same" zero padding: output channel k is
// sum_c filter_k(:,:,c) applied to t(:,:,c), no kernel flip.
Tensor conv_same(const FilterBank& bank, const Tensor& t);

// Exact linear adjoint of conv_same with the same bank and padding rule:
// <conv_same(B,u), r> == <u, adjoint_conv(B,r)> for all u, r.
Tensor adjoint_conv(const FilterBank& bank, const Tensor& r);

// out = sign(t) * max(|t| - theta[c], 0), one nonnegative threshold per channel.
Tensor soft_threshold(const Tensor& t, std::span<const double> theta);
Tensor soft_threshold(const Tensor& t, double theta);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

double l1_norm(const Tensor& t);
double sq_l2_norm(const Tensor& t);
double dot(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& t);
bool all_finite(const Tensor& t);

// Stacks b's channels after a's; both spatial sizes must match.
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Channels [c0, c0+count) of t as a new tensor.
Tensor slice_channels(const Tensor& t, int c0, int count);

// Rounds samples through f32 when the process precision says so.
// Every op above already applies this to its result; generators and
// other modules call it on tensors they fill by hand.
void enforce_precision(Tensor& t);
void enforce_precision(std::vector<double>& samples);

}  // namespace cunet

#endif

#include "cunet/tensor.hpp"

#include <cmath>
#include <cstdlib>

namespace cunet {

namespace {
Precision g_precision = Precision::f64;

void check(bool ok, const std::string& msg) {
  if (!ok) throw contract_error(msg);
}
}  // namespace

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }

void enforce_precision(std::vector<double>& samples) {
  if (g_precision == Precision::f64) return;
  for (double& v : samples) v = static_cast<double>(static_cast<float>(v));
}

void enforce_precision(Tensor& t) { enforce_precision(t.data()); }

Tensor::Tensor(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  check(height >= 1 && width >= 1 && channels >= 1, "Tensor: dimensions must be >= 1");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

FilterBank::FilterBank(int k, int s, int c_in, double fill)
    : k_(k), s_(s), c_in_(c_in) {
  check(k >= 1 && s >= 1 && c_in >= 1, "FilterBank: dimensions must be >= 1");
  data_.assign(static_cast<std::size_t>(k) * s * s * c_in, fill);
}

namespace {

// Shared correlation engine:
//   out(h,w,e) = sum_{i,j,f} taps[(i*s+j)*E*F + e*F + f] * in(h+i-anchor, w+j-anchor, f)
// with zero padding. Sweeps one tap at a time over 8-row strips so the
// output slab stays cache-resident across the s*s passes. The channel
// counts are dispatched to compile-time values; the vectorizer needs the
// trip counts fixed.
template <int E, int F>
void correlate_body(const double* in, int H, int W, int Fr, double* out, int Er,
                    const double* taps, int s, int anchor) {
  const int Ev = E > 0 ? E : Er;
  const int Fv = F > 0 ? F : Fr;
  std::fill(out, out + static_cast<std::size_t>(H) * W * Ev, 0.0);
  constexpr int kStrip = 8;
  for (int h0 = 0; h0 < H; h0 += kStrip) {
    const int h1 = std::min(H, h0 + kStrip);
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < s; ++j) {
        const double* __restrict tp = taps + (static_cast<std::size_t>(i) * s + j) * Ev * Fv;
        const int dh = i - anchor, dw = j - anchor;
        const int hh0 = std::max(h0, -dh), hh1 = std::min(h1, H - dh);
        const int ww0 = std::max(0, -dw), ww1 = std::min(W, W - dw);
        for (int h = hh0; h < hh1; ++h) {
          const double* __restrict srow =
              in + ((static_cast<std::size_t>(h) + dh) * W + (ww0 + dw)) * Fv;
          double* __restrict drow = out + (static_cast<std::size_t>(h) * W + ww0) * Ev;
          if (Fv == 1) {
            for (int w = ww0; w < ww1; ++w, ++srow, drow += Ev) {
              const double v = srow[0];
              for (int e = 0; e < Ev; ++e) drow[e] += tp[e] * v;
            }
          } else if (Ev == 1) {
            for (int w = ww0; w < ww1; ++w, srow += Fv, ++drow) {
              double acc = 0.0;
              for (int f = 0; f < Fv; ++f) acc += tp[f] * srow[f];
              drow[0] += acc;
            }
          } else {
            for (int w = ww0; w < ww1; ++w, srow += Fv, drow += Ev)
              for (int e = 0; e < Ev; ++e) {
                double acc = 0.0;
                for (int f = 0; f < Fv; ++f) acc += tp[e * Fv + f] * srow[f];
                drow[e] += acc;
              }
          }
        }
      }
    }
  }
}

using CorrelateFn = void (*)(const double*, int, int, int, double*, int, const double*, int,
                             int);

template <int E>
CorrelateFn pick_by_f(int f) {
  switch (f) {
    case 1: return correlate_body<E, 1>;
    case 2: return correlate_body<E, 2>;
    case 3: return correlate_body<E, 3>;
    case 4: return correlate_body<E, 4>;
    case 6: return correlate_body<E, 6>;
    case 8: return correlate_body<E, 8>;
    case 16: return correlate_body<E, 16>;
    default: return correlate_body<E, 0>;
  }
}

CorrelateFn pick_correlate(int e, int f) {
  switch (e) {
    case 1: return pick_by_f<1>(f);
    case 2: return pick_by_f<2>(f);
    case 3: return pick_by_f<3>(f);
    case 4: return pick_by_f<4>(f);
    case 6: return pick_by_f<6>(f);
    case 8: return pick_by_f<8>(f);
    case 16: return pick_by_f<16>(f);
    default: return pick_by_f<0>(f);
  }
}

void correlate(const double* in, int H, int W, int F, double* out, int E,
               const double* taps, int s, int anchor) {
  pick_correlate(E, F)(in, H, W, F, out, E, taps, s, anchor);
}

}  // namespace

Tensor conv_same(const FilterBank& bank, const Tensor& t) {
  check(!t.empty() && !bank.empty(), "conv_same: empty operand");
  check(t.channels() == bank.c_in(),
        "conv_same: input has " + std::to_string(t.channels()) +
            " channels, bank expects " + std::to_string(bank.c_in()));
  const int C = bank.c_in(), K = bank.k(), s = bank.s();
  Tensor out(t.height(), t.width(), K);

  std::vector<double> taps(static_cast<std::size_t>(s) * s * K * C);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int k = 0; k < K; ++k)
        for (int c = 0; c < C; ++c)
          taps[((static_cast<std::size_t>(i) * s + j) * K + k) * C + c] = bank.at(k, i, j, c);

  correlate(t.data().data(), t.height(), t.width(), C, out.data().data(), K, taps.data(), s,
            bank.anchor());
  enforce_precision(out);
  return out;
}

Tensor adjoint_conv(const FilterBank& bank, const Tensor& r) {
  check(!r.empty() && !bank.empty(), "adjoint_conv: empty operand");
  check(r.channels() == bank.k(),
        "adjoint_conv: input has " + std::to_string(r.channels()) +
            " channels, bank has k=" + std::to_string(bank.k()));
  const int C = bank.c_in(), K = bank.k(), s = bank.s(), a = bank.anchor();
  Tensor out(r.height(), r.width(), C);

  // out(h,w,c) = sum_{k,i,j} bank(k,i,j,c) * r(h-i+a, w-j+a, k): the exact
  // transpose of conv_same, realized as a correlation with flipped taps at
  // the mirrored anchor s-1-a.
  std::vector<double> taps(static_cast<std::size_t>(s) * s * C * K);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int c = 0; c < C; ++c)
        for (int k = 0; k < K; ++k)
          taps[((static_cast<std::size_t>(i) * s + j) * C + c) * K + k] =
              bank.at(k, s - 1 - i, s - 1 - j, c);

  correlate(r.data().data(), r.height(), r.width(), K, out.data().data(), C, taps.data(), s,
            s - 1 - a);
  enforce_precision(out);
  return out;
}

Tensor soft_threshold(const Tensor& t, std::span<const double> theta) {
  check(static_cast<int>(theta.size()) == t.channels(),
        "soft_threshold: need one threshold per channel");
  for (double th : theta) check(th >= 0.0, "soft_threshold: negative threshold");
  const int C = t.channels();
  Tensor out(t.height(), t.width(), C);
  const double* __restrict src = t.data().data();
  double* __restrict dst = out.data().data();
  const std::size_t pixels = t.size() / C;
  if (C == 1) {
    const double th = theta[0];
    for (std::size_t i = 0; i < pixels; ++i) {
      const double v = src[i];
      dst[i] = v > th ? v - th : (v < -th ? v + th : 0.0);
    }
  } else {
    for (std::size_t p = 0; p < pixels; ++p, src += C, dst += C)
      for (int c = 0; c < C; ++c) {
        const double v = src[c], th = theta[c];
        dst[c] = v > th ? v - th : (v < -th ? v + th : 0.0);
      }
  }
  enforce_precision(out);
  return out;
}

Tensor soft_threshold(const Tensor& t, double theta) {
  std::vector<double> th(t.channels(), theta);
  return soft_threshold(t, th);
}

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw contract_error(std::string(op) + ": shape mismatch");
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  enforce_precision(out);
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  enforce_precision(out);
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = a;
  for (double& v : out.data()) v *= factor;
  enforce_precision(out);
  return out;
}

double l1_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += std::abs(v);
  return s;
}

double sq_l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return s;
}

double dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check(a.height() == b.height() && a.width() == b.width(),
        "concat_channels: spatial size mismatch");
  const int Ca = a.channels(), Cb = b.channels();
  Tensor out(a.height(), a.width(), Ca + Cb);
  const std::size_t pixels = static_cast<std::size_t>(a.height()) * a.width();
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int c = 0; c < Ca; ++c) out.data()[p * (Ca + Cb) + c] = a.data()[p * Ca + c];
    for (int c = 0; c < Cb; ++c) out.data()[p * (Ca + Cb) + Ca + c] = b.data()[p * Cb + c];
  }
  return out;
}

Tensor slice_channels(const Tensor& t, int c0, int count) {
  check(c0 >= 0 && count >= 1 && c0 + count <= t.channels(),
        "slice_channels: channel range out of bounds");
  const int C = t.channels();
  Tensor out(t.height(), t.width(), count);
  const std::size_t pixels = static_cast<std::size_t>(t.height()) * t.width();
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < count; ++c) out.data()[p * count + c] = t.data()[p * C + c0 + c];
  return out;
}

}  // namespace cunet

#include "cunet/data.hpp"

#include <algorithm>
#include <cmath>

namespace cunet {

namespace {
void check(bool ok, const std::string& msg) {
  if (!ok) throw contract_error(msg);
}

// Keys cubic-convolution kernel with a = -0.5.
double cubic_weight(double t) {
  t = std::abs(t);
  if (t <= 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
  if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
  return 0.0;
}

struct TapRow {
  int idx[4];
  double w[4];
};

std::vector<TapRow> cubic_taps(int in_n, int out_n) {
  std::vector<TapRow> taps(out_n);
  const double ratio = static_cast<double>(in_n) / out_n;
  for (int o = 0; o < out_n; ++o) {
    const double src = (o + 0.5) * ratio - 0.5;
    const int base = static_cast<int>(std::floor(src));
    const double f = src - base;
    for (int t = 0; t < 4; ++t) {
      taps[o].idx[t] = std::clamp(base - 1 + t, 0, in_n - 1);
      taps[o].w[t] = cubic_weight(f + 1.0 - t);
    }
  }
  return taps;
}
}  // namespace

std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::GuidedSR: return "guided-sr";
    case TaskKind::GuidedDenoise: return "guided-denoise";
    case TaskKind::MultifocusFuse: return "multifocus-fuse";
  }
  throw contract_error("task_kind_name: bad enum");
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "guided-sr") return TaskKind::GuidedSR;
  if (name == "guided-denoise") return TaskKind::GuidedDenoise;
  if (name == "multifocus-fuse") return TaskKind::MultifocusFuse;
  throw contract_error("unknown dataset kind: " + name);
}

Tensor bicubic_resize(const Tensor& img, double scale) {
  check(scale > 0.0, "bicubic_resize: scale must be positive");
  const int out_h = static_cast<int>(std::llround(img.height() * scale));
  const int out_w = static_cast<int>(std::llround(img.width() * scale));
  check(out_h >= 1 && out_w >= 1, "bicubic_resize: output size < 1");
  const int C = img.channels();

  const auto col_taps = cubic_taps(img.width(), out_w);
  Tensor horiz(img.height(), out_w, C);
  for (int h = 0; h < img.height(); ++h)
    for (int w = 0; w < out_w; ++w) {
      const TapRow& t = col_taps[w];
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int i = 0; i < 4; ++i) acc += t.w[i] * img.at(h, t.idx[i], c);
        horiz.at(h, w, c) = acc;
      }
    }

  const auto row_taps = cubic_taps(img.height(), out_h);
  Tensor out(out_h, out_w, C);
  for (int h = 0; h < out_h; ++h) {
    const TapRow& t = row_taps[h];
    for (int w = 0; w < out_w; ++w)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int i = 0; i < 4; ++i) acc += t.w[i] * horiz.at(t.idx[i], w, c);
        out.at(h, w, c) = acc;
      }
  }
  enforce_precision(out);
  return out;
}

Tensor degrade_sr(const Tensor& hr, int factor) {
  check(factor >= 2, "degrade_sr: factor must be >= 2");
  check(hr.height() % factor == 0 && hr.width() % factor == 0,
        "degrade_sr: factor must divide the image dimensions");
  Tensor low = bicubic_resize(hr, 1.0 / factor);
  return bicubic_resize(low, static_cast<double>(factor));
}

Tensor add_gaussian_noise(const Tensor& img, double sigma, SeededRng& rng) {
  check(sigma >= 0.0, "add_gaussian_noise: sigma must be nonnegative");
  Tensor out = img;
  const double s = sigma / 255.0;
  if (s > 0.0)
    for (double& v : out.data()) v += s * rng.next_normal();
  enforce_precision(out);
  return out;
}

Tensor gaussian_blur(const Tensor& img, double sigma_b, int radius) {
  check(sigma_b > 0.0, "gaussian_blur: sigma must be positive");
  check(radius >= 1, "gaussian_blur: radius must be >= 1");
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma_b * sigma_b));
    sum += kernel[i + radius];
  }
  for (double& v : kernel) v /= sum;

  const int H = img.height(), W = img.width(), C = img.channels();
  Tensor horiz(H, W, C);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[i + radius] * img.at(h, std::clamp(w + i, 0, W - 1), c);
        horiz.at(h, w, c) = acc;
      }
  Tensor out(H, W, C);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[i + radius] * horiz.at(std::clamp(h + i, 0, H - 1), w, c);
        out.at(h, w, c) = acc;
      }
  enforce_precision(out);
  return out;
}

SamplePair make_multifocus_pair(const Tensor& img, const Tensor& mask, double sigma_b,
                                int radius) {
  check(mask.height() == img.height() && mask.width() == img.width(),
        "make_multifocus_pair: mask spatial size mismatch");
  check(mask.channels() == 1, "make_multifocus_pair: mask must be single-channel");
  bool any_zero = false, any_one = false;
  for (double v : mask.data()) {
    check(v == 0.0 || v == 1.0, "make_multifocus_pair: mask values must be 0 or 1");
    (v == 0.0 ? any_zero : any_one) = true;
  }

  const Tensor blurred = gaussian_blur(img, sigma_b, radius);
  const Tensor soft = gaussian_blur(mask, sigma_b, radius);

  SamplePair pair;
  pair.task = TaskKind::MultifocusFuse;
  pair.degenerate_mask = !(any_zero && any_one);
  pair.z = img;
  pair.x = Tensor(img.height(), img.width(), img.channels());
  pair.y = Tensor(img.height(), img.width(), img.channels());
  for (int h = 0; h < img.height(); ++h)
    for (int w = 0; w < img.width(); ++w) {
      const double mb = soft.at(h, w, 0);
      for (int c = 0; c < img.channels(); ++c) {
        pair.x.at(h, w, c) = (1.0 - mb) * img.at(h, w, c) + mb * blurred.at(h, w, c);
        pair.y.at(h, w, c) = mb * img.at(h, w, c) + (1.0 - mb) * blurred.at(h, w, c);
      }
    }
  enforce_precision(pair.x);
  enforce_precision(pair.y);
  return pair;
}

std::vector<SamplePair> extract_patches(const SamplePair& pair, int size, int stride) {
  const int H = pair.x.height(), W = pair.x.width();
  check(size >= 1 && size <= H && size <= W, "extract_patches: patch larger than image");
  check(stride >= 1, "extract_patches: stride must be >= 1");

  auto crop = [&](const Tensor& t, int h0, int w0) {
    Tensor out(size, size, t.channels());
    for (int h = 0; h < size; ++h)
      for (int w = 0; w < size; ++w)
        for (int c = 0; c < t.channels(); ++c) out.at(h, w, c) = t.at(h0 + h, w0 + w, c);
    return out;
  };

  std::vector<SamplePair> patches;
  for (int h0 = 0; h0 + size <= H; h0 += stride)
    for (int w0 = 0; w0 + size <= W; w0 += stride) {
      SamplePair p;
      p.task = pair.task;
      p.degenerate_mask = pair.degenerate_mask;
      p.x = crop(pair.x, h0, w0);
      p.y = crop(pair.y, h0, w0);
      p.z = crop(pair.z, h0, w0);
      patches.push_back(std::move(p));
    }
  return patches;
}

double rmse(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "rmse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return std::sqrt(acc / a.size()) * 255.0;
}

double psnr(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "psnr: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  const double mse = acc / a.size();
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "ssim: shape mismatch");
  constexpr int kWin = 11, kHalf = 5;
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  check(a.height() >= kWin && a.width() >= kWin, "ssim: image smaller than the 11x11 window");

  double weights[kWin][kWin];
  double wsum = 0.0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const double di = i - kHalf, dj = j - kHalf;
      weights[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
      wsum += weights[i][j];
    }
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) weights[i][j] /= wsum;

  double total = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < a.channels(); ++c)
    for (int h = kHalf; h < a.height() - kHalf; ++h)
      for (int w = kHalf; w < a.width() - kHalf; ++w) {
        double ma = 0.0, mb = 0.0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            ma += weights[i][j] * a.at(h + i - kHalf, w + j - kHalf, c);
            mb += weights[i][j] * b.at(h + i - kHalf, w + j - kHalf, c);
          }
        double va = 0.0, vb = 0.0, cov = 0.0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            const double da = a.at(h + i - kHalf, w + j - kHalf, c) - ma;
            const double db = b.at(h + i - kHalf, w + j - kHalf, c) - mb;
            va += weights[i][j] * da * da;
            vb += weights[i][j] * db * db;
            cov += weights[i][j] * da * db;
          }
        total += ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) /
                 ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
        ++count;
      }
  return total / count;
}

namespace {

struct Shape {
  bool is_ellipse;
  double cx, cy, rx, ry, rot;  // ellipse
  double x0, y0, x1, y1;       // rectangle
};

struct Scene {
  std::vector<Shape> shapes;
};

Scene random_scene(int size, SeededRng& rng) {
  Scene sc;
  const int n = 3 + rng.uniform_int(4);
  for (int i = 0; i < n; ++i) {
    Shape sh{};
    sh.is_ellipse = rng.next_unit() < 0.5;
    if (sh.is_ellipse) {
      sh.cx = rng.uniform(0.15, 0.85) * size;
      sh.cy = rng.uniform(0.15, 0.85) * size;
      sh.rx = rng.uniform(0.10, 0.32) * size;
      sh.ry = rng.uniform(0.10, 0.32) * size;
      sh.rot = rng.uniform(0.0, 3.14159265358979323846);
    } else {
      const double w = rng.uniform(0.18, 0.5) * size;
      const double h = rng.uniform(0.18, 0.5) * size;
      sh.x0 = rng.uniform(0.0, size - w);
      sh.y0 = rng.uniform(0.0, size - h);
      sh.x1 = sh.x0 + w;
      sh.y1 = sh.y0 + h;
    }
    sc.shapes.push_back(sh);
  }
  return sc;
}

int region_of(const Scene& sc, double px, double py) {
  int region = 0;  // background; later shapes paint over earlier ones
  for (std::size_t i = 0; i < sc.shapes.size(); ++i) {
    const Shape& sh = sc.shapes[i];
    bool inside;
    if (sh.is_ellipse) {
      const double dx = px - sh.cx, dy = py - sh.cy;
      const double u = std::cos(sh.rot) * dx + std::sin(sh.rot) * dy;
      const double v = -std::sin(sh.rot) * dx + std::cos(sh.rot) * dy;
      inside = (u * u) / (sh.rx * sh.rx) + (v * v) / (sh.ry * sh.ry) <= 1.0;
    } else {
      inside = px >= sh.x0 && px < sh.x1 && py >= sh.y0 && py < sh.y1;
    }
    if (inside) region = static_cast<int>(i) + 1;
  }
  return region;
}

// Evenly spaced fill values in a shuffled order, so every region boundary
// carries a step of at least 0.84/(n-1).
std::vector<double> spread_palette(int n, SeededRng& rng) {
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = n == 1 ? 0.5 : 0.08 + 0.84 * i / (n - 1);
  for (int i = n - 1; i > 0; --i) std::swap(v[i], v[rng.uniform_int(i + 1)]);
  return v;
}

// block > 1 snaps the geometry to a block grid and clears a 2-block border
// to the background, so block-aligned downsampling sees uniform cells and
// the degradation preserves the image mean.
Tensor render_regions(const Scene& sc, const std::vector<double>& palette, int size,
                      int block = 1) {
  Tensor img(size, size, 1);
  const double margin = 2.0 * block;
  for (int h = 0; h < size; ++h)
    for (int w = 0; w < size; ++w) {
      double px = w + 0.5, py = h + 0.5;
      if (block > 1) {
        px = (w / block) * block + 0.5 * block;
        py = (h / block) * block + 0.5 * block;
      }
      int region = region_of(sc, px, py);
      if (block > 1 &&
          std::min(std::min(px, py), size - std::max(px, py)) < margin)
        region = 0;
      img.at(h, w, 0) = palette[region];
    }
  return img;
}

void add_sine_texture(Tensor& img, double amp, double max_cycles, int waves, SeededRng& rng) {
  const int size = img.height();
  for (int n = 0; n < waves; ++n) {
    const double fx = rng.uniform(0.5, max_cycles);
    const double fy = rng.uniform(0.5, max_cycles);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double a = amp / waves;
    for (int h = 0; h < img.height(); ++h)
      for (int w = 0; w < img.width(); ++w)
        img.at(h, w, 0) += a * std::sin(6.283185307179586 * (fx * w + fy * h) / size + phase);
  }
}

Tensor random_mask(int size, SeededRng& rng) {
  Tensor mask(size, size, 1);
  if (rng.next_unit() < 0.5) {
    const double angle = rng.uniform(0.0, 6.283185307179586);
    const double cx = rng.uniform(0.3, 0.7) * size;
    const double cy = rng.uniform(0.3, 0.7) * size;
    const double nx = std::cos(angle), ny = std::sin(angle);
    for (int h = 0; h < size; ++h)
      for (int w = 0; w < size; ++w)
        mask.at(h, w, 0) = nx * (w - cx) + ny * (h - cy) > 0.0 ? 1.0 : 0.0;
  } else {
    const double cx = rng.uniform(0.25, 0.75) * size;
    const double cy = rng.uniform(0.25, 0.75) * size;
    const double rx = rng.uniform(0.2, 0.4) * size;
    const double ry = rng.uniform(0.2, 0.4) * size;
    for (int h = 0; h < size; ++h)
      for (int w = 0; w < size; ++w) {
        const double dx = (w - cx) / rx, dy = (h - cy) / ry;
        mask.at(h, w, 0) = dx * dx + dy * dy <= 1.0 ? 1.0 : 0.0;
      }
  }
  return mask;
}

}  // namespace

std::vector<SamplePair> synth_guided_dataset(TaskKind kind, int count, std::uint64_t seed,
                                             const DatasetOptions& opts) {
  check(count >= 1, "synth_guided_dataset: count must be >= 1");
  check(opts.size >= 16, "synth_guided_dataset: size must be >= 16");
  if (kind == TaskKind::GuidedSR)
    check(opts.size % opts.sr_factor == 0,
          "synth_guided_dataset: size must be divisible by the SR factor");

  std::vector<SamplePair> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    SeededRng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const Scene scene = random_scene(opts.size, rng);
    const int regions = static_cast<int>(scene.shapes.size()) + 1;
    const auto palette_z = spread_palette(regions, rng);
    const auto palette_y = spread_palette(regions, rng);

    SamplePair pair;
    pair.task = kind;
    switch (kind) {
      case TaskKind::GuidedSR: {
        pair.z = render_regions(scene, palette_z, opts.size, opts.sr_factor);
        pair.y = render_regions(scene, palette_y, opts.size, opts.sr_factor);
        add_sine_texture(pair.y, 0.02, 3.0, 2, rng);
        pair.x = degrade_sr(pair.z, opts.sr_factor);
        break;
      }
      case TaskKind::GuidedDenoise: {
        pair.z = render_regions(scene, palette_z, opts.size);
        add_sine_texture(pair.z, 0.03, 3.0, 2, rng);
        pair.y = render_regions(scene, palette_y, opts.size);
        add_sine_texture(pair.y, 0.03, 3.0, 2, rng);
        pair.x = add_gaussian_noise(pair.z, opts.noise_sigma, rng);
        break;
      }
      case TaskKind::MultifocusFuse: {
        Tensor img = render_regions(scene, palette_z, opts.size);
        add_sine_texture(img, 0.12, 8.0, 3, rng);
        const Tensor mask = random_mask(opts.size, rng);
        pair = make_multifocus_pair(img, mask, opts.blur_sigma, opts.blur_radius);
        break;
      }
    }
    enforce_precision(pair.x);
    enforce_precision(pair.y);
    enforce_precision(pair.z);
    out.push_back(std::move(pair));
  }
  return out;
}

Tensor luminance(const Tensor& img) {
  if (img.channels() == 1) return img;
  check(img.channels() == 3, "luminance: expected 1 or 3 channels");
  Tensor out(img.height(), img.width(), 1);
  for (int h = 0; h < img.height(); ++h)
    for (int w = 0; w < img.width(); ++w)
      out.at(h, w, 0) =
          0.299 * img.at(h, w, 0) + 0.587 * img.at(h, w, 1) + 0.114 * img.at(h, w, 2);
  enforce_precision(out);
  return out;
}

}  // namespace cunet

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gfv/error.hpp"
#include "gfv/rng.hpp"

namespace gfv {

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

enum class Activation { relu, tanh };

// Order of the two post-convolution stages inside one conv block.
enum class BlockOrder { activation_then_norm, norm_then_activation };

enum class Mode { train, eval };

inline constexpr int kEmbeddingLength = 5;

struct LayerShape {
  std::string name;
  std::vector<int> dims;
};

/// Twin-branch encoder layout. Defaults reproduce the reference stack:
/// three 3x3/stride-1/pad-1 convolutions with 4, 8, 8 maps, each followed by
/// a nonlinearity and batch normalisation, then FC 500 -> 500 -> 5.
struct ArchitectureConfig {
  int input_h = 300;
  int input_w = 300;
  std::vector<int> conv_maps{4, 8, 8};
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  std::vector<int> fc_widths{500, 500, kEmbeddingLength};
  Activation activation = Activation::relu;
  BlockOrder order = BlockOrder::activation_then_norm;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  static ArchitectureConfig with_resolution(int side) {
    ArchitectureConfig a;
    a.input_h = side;
    a.input_w = side;
    return a;
  }

  static int conv_out(int in, int kernel, int stride, int padding) { return (in + 2 * padding - kernel) / stride + 1; }

  int conv_out_h(std::size_t layer) const {
    int h = input_h;
    for (std::size_t i = 0; i <= layer; ++i) h = conv_out(h, kernel, stride, padding);
    return h;
  }
  int conv_out_w(std::size_t layer) const {
    int w = input_w;
    for (std::size_t i = 0; i <= layer; ++i) w = conv_out(w, kernel, stride, padding);
    return w;
  }

  std::size_t flatten_width() const {
    const std::size_t last = conv_maps.size() - 1;
    return static_cast<std::size_t>(conv_maps.back()) * static_cast<std::size_t>(conv_out_h(last)) *
           static_cast<std::size_t>(conv_out_w(last));
  }

  int embedding_length() const { return fc_widths.back(); }

  void validate() const {
    auto bad = [](const std::string& m) { fail(ErrorCode::InvalidArgument, "architecture: " + m); };
    if (input_h < 1 || input_w < 1) bad("input size must be positive");
    if (conv_maps.empty() || fc_widths.empty()) bad("need at least one conv and one fc layer");
    if (kernel < 1 || stride < 1 || padding < 0) bad("invalid kernel/stride/padding");
    for (int m : conv_maps)
      if (m < 1) bad("feature map count must be positive");
    for (int f : fc_widths)
      if (f < 1) bad("fc width must be positive");
    if (fc_widths.back() != kEmbeddingLength) bad("final fc width must be 5");
    if (!(bn_epsilon > 0.0) || !(bn_momentum > 0.0 && bn_momentum <= 1.0)) bad("invalid batchnorm settings");
    for (std::size_t i = 0; i < conv_maps.size(); ++i) {
      if (conv_out_h(i) < 1 || conv_out_w(i) < 1) bad("convolution collapses the spatial size");
    }
  }

  /// Canonical text form; its hash identifies checkpoints.
  std::string canonical() const {
    std::ostringstream os;
    os << "in=" << input_h << "x" << input_w << ";conv=";
    for (int m : conv_maps) os << m << ",";
    os << ";k=" << kernel << ";s=" << stride << ";p=" << padding << ";fc=";
    for (int f : fc_widths) os << f << ",";
    os << ";act=" << (activation == Activation::relu ? "relu" : "tanh")
       << ";order=" << (order == BlockOrder::activation_then_norm ? "act-bn" : "bn-act");
    os.precision(17);
    os << ";eps=" << bn_epsilon << ";mom=" << bn_momentum;
    return os.str();
  }

  std::uint64_t fingerprint() const { return fnv1a64(canonical()); }

  /// Output shape of every stage, listed the way the layer table reads.
  std::vector<LayerShape> layer_shapes() const {
    std::vector<LayerShape> out;
    out.push_back({"input", {1, input_h, input_w}});
    const char* act = activation == Activation::relu ? "relu" : "tanh";
    for (std::size_t i = 0; i < conv_maps.size(); ++i) {
      const std::vector<int> dims{conv_maps[i], conv_out_h(i), conv_out_w(i)};
      const std::string idx = std::to_string(i + 1);
      out.push_back({"conv" + idx, dims});
      if (order == BlockOrder::activation_then_norm) {
        out.push_back({std::string(act) + idx, dims});
        out.push_back({"batchnorm" + idx, dims});
      } else {
        out.push_back({"batchnorm" + idx, dims});
        out.push_back({std::string(act) + idx, dims});
      }
    }
    out.push_back({"flatten", {static_cast<int>(flatten_width())}});
    for (std::size_t i = 0; i < fc_widths.size(); ++i) {
      out.push_back({"fc" + std::to_string(i + 1), {fc_widths[i]}});
      if (i + 1 < fc_widths.size()) out.push_back({"relu_fc" + std::to_string(i + 1), {fc_widths[i]}});
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  bool buffer = false;  // running statistics, not trained
  std::size_t offset = 0;
  std::size_t count = 0;
};

struct ConvSlots {
  int in_maps = 0, out_maps = 0;
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::size_t weight = 0, bias = 0, gamma = 0, beta = 0;  // into trainable storage
  bool has_bias = true;  // off when batchnorm follows the conv directly
  std::size_t running_mean = 0, running_var = 0;          // into buffer storage
};

struct FcSlots {
  int in = 0, out = 0;
  std::size_t weight = 0, bias = 0;
};

struct ParamLayout {
  std::vector<ConvSlots> conv;
  std::vector<FcSlots> fc;
  std::vector<NamedTensor> tensors;
  std::size_t trainable = 0;
  std::size_t buffers = 0;

  static ParamLayout build(const ArchitectureConfig& a) {
    a.validate();
    ParamLayout L;
    auto add = [&](const std::string& name, std::vector<std::size_t> shape, bool buffer) {
      std::size_t n = 1;
      for (auto d : shape) n *= d;
      std::size_t& cursor = buffer ? L.buffers : L.trainable;
      L.tensors.push_back({name, std::move(shape), buffer, cursor, n});
      const std::size_t off = cursor;
      cursor += n;
      return off;
    };
    int in_maps = 1, h = a.input_h, w = a.input_w;
    const auto k = static_cast<std::size_t>(a.kernel);
    for (std::size_t i = 0; i < a.conv_maps.size(); ++i) {
      ConvSlots s;
      s.in_maps = in_maps;
      s.out_maps = a.conv_maps[i];
      s.in_h = h;
      s.in_w = w;
      s.out_h = a.conv_out_h(i);
      s.out_w = a.conv_out_w(i);
      const std::string p = "conv" + std::to_string(i + 1) + ".";
      const auto om = static_cast<std::size_t>(s.out_maps);
      s.weight = add(p + "weight", {om, static_cast<std::size_t>(in_maps), k, k}, false);
      // Batchnorm right after the conv subtracts the channel mean, which
      // would cancel a bias exactly.
      s.has_bias = a.order == BlockOrder::activation_then_norm;
      if (s.has_bias) s.bias = add(p + "bias", {om}, false);
      s.gamma = add(p + "bn.weight", {om}, false);
      s.beta = add(p + "bn.bias", {om}, false);
      s.running_mean = add(p + "bn.running_mean", {om}, true);
      s.running_var = add(p + "bn.running_var", {om}, true);
      L.conv.push_back(s);
      in_maps = s.out_maps;
      h = s.out_h;
      w = s.out_w;
    }
    auto in = static_cast<int>(a.flatten_width());
    for (std::size_t i = 0; i < a.fc_widths.size(); ++i) {
      FcSlots s;
      s.in = in;
      s.out = a.fc_widths[i];
      const std::string p = "fc" + std::to_string(i + 1) + ".";
      s.weight = add(p + "weight", {static_cast<std::size_t>(s.out), static_cast<std::size_t>(s.in)}, false);
      s.bias = add(p + "bias", {static_cast<std::size_t>(s.out)}, false);
      L.fc.push_back(s);
      in = s.out;
    }
    return L;
  }
};

/// One parameter set shared by both branches.
template <typename T>
struct SiameseParams {
  ArchitectureConfig arch;
  ParamLayout layout;
  std::uint64_t seed = 0;
  std::vector<T> weights;  // trainable values in layout order
  std::vector<T> buffers;  // batchnorm running mean / variance

  std::uint64_t fingerprint() const { return arch.fingerprint(); }

  std::span<T> view(const NamedTensor& t) {
    auto& store = t.buffer ? buffers : weights;
    return std::span<T>(store).subspan(t.offset, t.count);
  }
  std::span<const T> view(const NamedTensor& t) const {
    const auto& store = t.buffer ? buffers : weights;
    return std::span<const T>(store).subspan(t.offset, t.count);
  }

  friend bool operator==(const SiameseParams& a, const SiameseParams& b) {
    return a.fingerprint() == b.fingerprint() && a.seed == b.seed && a.weights == b.weights &&
           a.buffers == b.buffers;
  }
};

namespace detail {

template <typename T>
void init_batchnorm(SiameseParams<T>& p) {
  for (const auto& c : p.layout.conv) {
    const auto n = static_cast<std::size_t>(c.out_maps);
    std::fill_n(p.weights.begin() + static_cast<std::ptrdiff_t>(c.gamma), n, T(1));
    std::fill_n(p.weights.begin() + static_cast<std::ptrdiff_t>(c.beta), n, T(0));
    std::fill_n(p.buffers.begin() + static_cast<std::ptrdiff_t>(c.running_mean), n, T(0));
    std::fill_n(p.buffers.begin() + static_cast<std::ptrdiff_t>(c.running_var), n, T(1));
  }
}

}  // namespace detail

/// Seeded fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))
/// for weights and biases. Batchnorm starts at scale 1, shift 0, running
/// mean 0, running variance 1. Values are drawn in double, so float and
/// double instances from one seed agree up to rounding.
template <typename T>
SiameseParams<T> init_params(const ArchitectureConfig& arch, std::uint64_t seed) {
  SiameseParams<T> p;
  p.arch = arch;
  p.layout = ParamLayout::build(arch);
  p.seed = seed;
  p.weights.assign(p.layout.trainable, T(0));
  p.buffers.assign(p.layout.buffers, T(0));
  Rng rng(derive_seed(seed, "init"));
  auto fill = [&](std::size_t off, std::size_t n, double bound) {
    for (std::size_t i = 0; i < n; ++i) p.weights[off + i] = static_cast<T>(rng.uniform(-bound, bound));
  };
  for (const auto& c : p.layout.conv) {
    const auto fan_in = static_cast<std::size_t>(c.in_maps) * static_cast<std::size_t>(arch.kernel * arch.kernel);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    fill(c.weight, fan_in * static_cast<std::size_t>(c.out_maps), bound);
    if (c.has_bias) fill(c.bias, static_cast<std::size_t>(c.out_maps), bound);
  }
  for (const auto& f : p.layout.fc) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(f.in));
    fill(f.weight, static_cast<std::size_t>(f.in) * static_cast<std::size_t>(f.out), bound);
    fill(f.bias, static_cast<std::size_t>(f.out), bound);
  }
  detail::init_batchnorm(p);
  return p;
}

/// All weights and biases zero (batchnorm scale included); running stats at
/// their initial values.
template <typename T>
SiameseParams<T> zero_params(const ArchitectureConfig& arch) {
  SiameseParams<T> p;
  p.arch = arch;
  p.layout = ParamLayout::build(arch);
  p.weights.assign(p.layout.trainable, T(0));
  p.buffers.assign(p.layout.buffers, T(0));
  for (const auto& c : p.layout.conv) {
    std::fill_n(p.buffers.begin() + static_cast<std::ptrdiff_t>(c.running_var), c.out_maps, T(1));
  }
  return p;
}

template <typename To, typename From>
SiameseParams<To> convert_params(const SiameseParams<From>& src) {
  SiameseParams<To> p;
  p.arch = src.arch;
  p.layout = src.layout;
  p.seed = src.seed;
  p.weights.assign(src.weights.begin(), src.weights.end());
  p.buffers.assign(src.buffers.begin(), src.buffers.end());
  return p;
}

// ---------------------------------------------------------------------------
// Tensors and embeddings
// ---------------------------------------------------------------------------

/// Network input: one channel, height x width, values in [0, 1].
struct InputTensor {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  friend bool operator==(const InputTensor&, const InputTensor&) = default;
};

struct FeatureVector {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  bool finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

inline double pair_distance(std::span<const double> v1, std::span<const double> v2) {
  if (v1.size() != v2.size()) fail(ErrorCode::LengthMismatch, "feature vectors differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < v1.size(); ++i) {
    const double d = v1[i] - v2[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Euclidean distance between embeddings; the score thresholded by lambda.
inline double pair_distance(const FeatureVector& v1, const FeatureVector& v2) {
  return pair_distance(std::span<const double>(v1.values), std::span<const double>(v2.values));
}

/// Number of components that differ by more than `tol`.
inline int mismatch_count(const FeatureVector& v1, const FeatureVector& v2, double tol) {
  if (v1.size() != v2.size()) fail(ErrorCode::LengthMismatch, "feature vectors differ in length");
  if (!(tol >= 0.0)) fail(ErrorCode::InvalidArgument, "tolerance must be non-negative");
  int n = 0;
  for (std::size_t i = 0; i < v1.size(); ++i)
    if (std::abs(v1.values[i] - v2.values[i]) > tol) ++n;
  return n;
}

/// c * d^2 + (1 - c) * max(m - d, 0)^2
inline double contrastive_loss(double d, int c, double margin) {
  if (!(margin > 0.0)) fail(ErrorCode::InvalidArgument, "margin must be positive");
  if (c != 0 && c != 1) fail(ErrorCode::InvalidArgument, "label must be 0 or 1");
  const double hinge = std::max(margin - d, 0.0);
  return c * d * d + (1 - c) * hinge * hinge;
}

inline double contrastive_loss(const FeatureVector& v1, const FeatureVector& v2, int c, double margin) {
  return contrastive_loss(pair_distance(v1, v2), c, margin);
}

/// Loss of one pair plus its gradient w.r.t. both embeddings, scaled by
/// `scale` (1/batch for a batch mean). At d == 0 the dissimilar branch has no
/// defined direction and contributes zero gradient.
template <typename T>
double contrastive_loss_grad(std::span<const T> v1, std::span<const T> v2, int c, double margin, double scale,
                             std::span<T> g1, std::span<T> g2) {
  const std::size_t n = v1.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(v1[i]) - static_cast<double>(v2[i]);
    s += d * d;
  }
  const double d = std::sqrt(s);
  const double loss = contrastive_loss(d, c, margin);
  double coeff = 0.0;  // dL/dv1 = coeff * (v1 - v2)
  if (c == 1) {
    coeff = 2.0;
  } else if (d > 0.0 && d < margin) {
    coeff = -2.0 * (margin - d) / d;
  }
  coeff *= scale;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = static_cast<double>(v1[i]) - static_cast<double>(v2[i]);
    g1[i] = static_cast<T>(coeff * diff);
    g2[i] = static_cast<T>(-coeff * diff);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename T>
struct ConvCache {
  std::vector<T> input;  // N x Cin x H x W
  std::vector<T> pre;    // convolution output
  std::vector<T> mid;    // after the first post-op
  std::vector<T> out;    // block output
  std::vector<T> xhat;   // standardised batchnorm input
  std::vector<double> mean, var, inv_std;
};

template <typename T>
struct FcCache {
  std::vector<T> input;  // N x in
  std::vector<T> pre;    // N x out
  std::vector<T> out;    // N x out (relu(pre) except on the last layer)
};

template <typename T>
struct Workspace {
  int batch = 0;
  Mode mode = Mode::eval;
  std::vector<ConvCache<T>> conv;
  std::vector<FcCache<T>> fc;

  std::span<const T> embeddings() const { return fc.back().out; }
  std::span<const T> embedding(int n) const {
    const auto len = static_cast<std::size_t>(kEmbeddingLength);
    return embeddings().subspan(static_cast<std::size_t>(n) * len, len);
  }
};

namespace detail {

// Sixteen independent partial sums let the compiler vectorise without
// reassociating, so results stay identical across optimisation levels.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  constexpr std::size_t lanes = 16;
  std::array<T, lanes> acc{};
  std::size_t i = 0;
  for (; i + lanes <= n; i += lanes)
    for (std::size_t k = 0; k < lanes; ++k) acc[k] += a[i + k] * b[i + k];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  T s = 0;
  for (std::size_t k = 0; k < lanes; ++k) s += acc[k];
  return s + tail;
}

template <typename T>
void axpy(T* y, T alpha, const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y += sum_k alpha[k] * x[k], summed in k order for every element.
template <typename T>
void axpy_many(T* y, const T* alpha, const T* const* x, std::size_t count, std::size_t n) {
  std::size_t k = 0;
  for (; k + 4 <= count; k += 4) {
    const T a0 = alpha[k], a1 = alpha[k + 1], a2 = alpha[k + 2], a3 = alpha[k + 3];
    const T *x0 = x[k], *x1 = x[k + 1], *x2 = x[k + 2], *x3 = x[k + 3];
    for (std::size_t i = 0; i < n; ++i) y[i] = (((y[i] + a0 * x0[i]) + a1 * x1[i]) + a2 * x2[i]) + a3 * x3[i];
  }
  for (; k < count; ++k) axpy(y, alpha[k], x[k], n);
}

// Output columns ox for which ix = ox*stride + kx - padding is inside [0, in_w).
inline std::pair<int, int> valid_range(int k_off, int stride, int padding, int in_len, int out_len) {
  const int shift = k_off - padding;
  int lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  int hi_excl = (in_len - 1 - shift) >= 0 ? (in_len - 1 - shift) / stride + 1 : 0;
  lo = std::min(lo, out_len);
  hi_excl = std::clamp(hi_excl, lo, out_len);
  return {lo, hi_excl};
}

template <typename T>
void conv_forward(const ArchitectureConfig& a, const ConvSlots& s, const T* w, const T* b, const T* in, T* out,
                  int batch) {
  const int k = a.kernel, st = a.stride, pd = a.padding;
  const std::size_t in_plane = static_cast<std::size_t>(s.in_h) * static_cast<std::size_t>(s.in_w);
  const std::size_t out_plane = static_cast<std::size_t>(s.out_h) * static_cast<std::size_t>(s.out_w);
  for (int n = 0; n < batch; ++n) {
    for (int co = 0; co < s.out_maps; ++co) {
      T* o = out + (static_cast<std::size_t>(n) * s.out_maps + co) * out_plane;
      std::fill_n(o, out_plane, b ? b[co] : T(0));
      for (int ci = 0; ci < s.in_maps; ++ci) {
        const T* x = in + (static_cast<std::size_t>(n) * s.in_maps + ci) * in_plane;
        const T* wk = w + (static_cast<std::size_t>(co) * s.in_maps + ci) * static_cast<std::size_t>(k * k);
        for (int ky = 0; ky < k; ++ky) {
          const auto [oy0, oy1] = valid_range(ky, st, pd, s.in_h, s.out_h);
          for (int kx = 0; kx < k; ++kx) {
            const auto [ox0, ox1] = valid_range(kx, st, pd, s.in_w, s.out_w);
            const T wv = wk[ky * k + kx];
            for (int oy = oy0; oy < oy1; ++oy) {
              const T* xr = x + static_cast<std::size_t>(oy * st + ky - pd) * s.in_w;
              T* orow = o + static_cast<std::size_t>(oy) * s.out_w;
              if (st == 1) {
                const T* xs = xr + (kx - pd);
                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * xs[ox];
              } else {
                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * xr[ox * st + kx - pd];
              }
            }
          }
        }
      }
    }
  }
}

// Accumulates weight/bias gradients; writes the input gradient when d_in is
// non-null.
template <typename T>
void conv_backward(const ArchitectureConfig& a, const ConvSlots& s, const T* w, const T* in, const T* d_out, T* d_w,
                   T* d_b, T* d_in, int batch) {
  const int k = a.kernel, st = a.stride, pd = a.padding;
  const std::size_t in_plane = static_cast<std::size_t>(s.in_h) * static_cast<std::size_t>(s.in_w);
  const std::size_t out_plane = static_cast<std::size_t>(s.out_h) * static_cast<std::size_t>(s.out_w);
  if (d_in) std::fill_n(d_in, in_plane * static_cast<std::size_t>(s.in_maps) * static_cast<std::size_t>(batch), T(0));
  std::vector<T> lanes;
  for (int n = 0; n < batch; ++n) {
    for (int co = 0; co < s.out_maps; ++co) {
      const T* g = d_out + (static_cast<std::size_t>(n) * s.out_maps + co) * out_plane;
      T bsum = 0;
      for (int oy = 0; oy < s.out_h; ++oy) {
        const T* gr = g + static_cast<std::size_t>(oy) * s.out_w;
        for (int ox = 0; ox < s.out_w; ++ox) bsum += gr[ox];
      }
      if (d_b) d_b[co] += bsum;
      for (int ci = 0; ci < s.in_maps; ++ci) {
        const T* x = in + (static_cast<std::size_t>(n) * s.in_maps + ci) * in_plane;
        T* dx = d_in ? d_in + (static_cast<std::size_t>(n) * s.in_maps + ci) * in_plane : nullptr;
        const std::size_t wbase = (static_cast<std::size_t>(co) * s.in_maps + ci) * static_cast<std::size_t>(k * k);
        for (int ky = 0; ky < k; ++ky) {
          const auto [oy0, oy1] = valid_range(ky, st, pd, s.in_h, s.out_h);
          for (int kx = 0; kx < k; ++kx) {
            const auto [ox0, ox1] = valid_range(kx, st, pd, s.in_w, s.out_w);
            if (ox1 <= ox0) continue;
            const T wv = w[wbase + static_cast<std::size_t>(ky * k + kx)];
            T acc = 0;
            if (st == 1) {
              // One partial sum per output column, reduced once at the end.
              const auto off = static_cast<std::ptrdiff_t>(kx - pd);
              const auto len = static_cast<std::size_t>(ox1 - ox0);
              lanes.assign(len, T(0));
              for (int oy = oy0; oy < oy1; ++oy) {
                const std::size_t xrow = static_cast<std::size_t>(oy * st + ky - pd) * s.in_w;
                const T* gr = g + static_cast<std::size_t>(oy) * s.out_w + ox0;
                const T* xs = x + xrow + off + ox0;
                for (std::size_t i = 0; i < len; ++i) lanes[i] += gr[i] * xs[i];
                if (dx) axpy(dx + xrow + off + ox0, wv, gr, len);
              }
              for (T v : lanes) acc += v;
            }
            for (int oy = oy0; st != 1 && oy < oy1; ++oy) {
              const std::size_t xrow = static_cast<std::size_t>(oy * st + ky - pd) * s.in_w;
              const T* gr = g + static_cast<std::size_t>(oy) * s.out_w;
              for (int ox = ox0; ox < ox1; ++ox) {
                const std::size_t xi = xrow + static_cast<std::size_t>(ox * st + kx - pd);
                acc += gr[ox] * x[xi];
                if (dx) dx[xi] += wv * gr[ox];
              }
            }
            d_w[wbase + static_cast<std::size_t>(ky * k + kx)] += acc;
          }
        }
      }
    }
  }
}

template <typename T>
void activate(Activation act, const std::vector<T>& in, std::vector<T>& out) {
  out.resize(in.size());
  if (act == Activation::relu) {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] < T(0) ? T(0) : in[i];  // NaN passes through
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::tanh(in[i]);
  }
}

// d_in = d_out * f'(in), using the stored output for tanh.
template <typename T>
void activate_backward(Activation act, const std::vector<T>& in, const std::vector<T>& out, std::vector<T>& grad) {
  if (act == Activation::relu) {
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!(in[i] > T(0))) grad[i] = T(0);
  } else {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= T(1) - out[i] * out[i];
  }
}

template <typename T>
void batchnorm_forward(const SiameseParams<T>& p, const ConvSlots& s, Mode mode, int batch, ConvCache<T>& c,
                       const std::vector<T>& in, std::vector<T>& out) {
  const auto maps = static_cast<std::size_t>(s.out_maps);
  const std::size_t plane = static_cast<std::size_t>(s.out_h) * static_cast<std::size_t>(s.out_w);
  c.mean.assign(maps, 0.0);
  c.var.assign(maps, 0.0);
  c.inv_std.assign(maps, 0.0);
  c.xhat.resize(in.size());
  out.resize(in.size());
  const double count = static_cast<double>(plane) * batch;
  for (std::size_t ch = 0; ch < maps; ++ch) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::train) {
      for (int n = 0; n < batch; ++n) {
        const T* x = in.data() + (static_cast<std::size_t>(n) * maps + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) mean += static_cast<double>(x[i]);
      }
      mean /= count;
      for (int n = 0; n < batch; ++n) {
        const T* x = in.data() + (static_cast<std::size_t>(n) * maps + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(x[i]) - mean;
          var += d * d;
        }
      }
      var /= count;
    } else {
      mean = static_cast<double>(p.buffers[s.running_mean + ch]);
      var = static_cast<double>(p.buffers[s.running_var + ch]);
    }
    const double inv_std = 1.0 / std::sqrt(var + p.arch.bn_epsilon);
    c.mean[ch] = mean;
    c.var[ch] = var;
    c.inv_std[ch] = inv_std;
    const T gamma = p.weights[s.gamma + ch];
    const T beta = p.weights[s.beta + ch];
    const T m = static_cast<T>(mean), is = static_cast<T>(inv_std);
    for (int n = 0; n < batch; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * maps + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (in[base + i] - m) * is;
        c.xhat[base + i] = xh;
        out[base + i] = gamma * xh + beta;
      }
    }
  }
}

// In-place: grad holds dL/d(bn output) on entry and dL/d(bn input) on exit.
template <typename T>
void batchnorm_backward(const SiameseParams<T>& p, const ConvSlots& s, Mode mode, int batch, const ConvCache<T>& c,
                        std::vector<T>& grad, std::span<T> d_weights) {
  const auto maps = static_cast<std::size_t>(s.out_maps);
  const std::size_t plane = static_cast<std::size_t>(s.out_h) * static_cast<std::size_t>(s.out_w);
  const double count = static_cast<double>(plane) * batch;
  for (std::size_t ch = 0; ch < maps; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < batch; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * maps + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += static_cast<double>(grad[base + i]);
        sum_dy_xhat += static_cast<double>(grad[base + i]) * static_cast<double>(c.xhat[base + i]);
      }
    }
    d_weights[s.gamma + ch] += static_cast<T>(sum_dy_xhat);
    d_weights[s.beta + ch] += static_cast<T>(sum_dy);
    const double gamma = static_cast<double>(p.weights[s.gamma + ch]);
    const double inv_std = c.inv_std[ch];
    for (int n = 0; n < batch; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * maps + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double dy = static_cast<double>(grad[base + i]);
        double dx = 0.0;
        if (mode == Mode::train) {
          const double xh = static_cast<double>(c.xhat[base + i]);
          dx = gamma * inv_std / count * (count * dy - sum_dy - xh * sum_dy_xhat);
        } else {
          dx = gamma * inv_std * dy;
        }
        grad[base + i] = static_cast<T>(dx);
      }
    }
  }
}

}  // namespace detail

/// Runs conv block `first` onwards using the cached input of that block.
template <typename T>
void forward_conv_from(const SiameseParams<T>& p, Workspace<T>& ws, std::size_t first) {
  const auto& a = p.arch;
  for (std::size_t l = first; l < p.layout.conv.size(); ++l) {
    const ConvSlots& s = p.layout.conv[l];
    ConvCache<T>& c = ws.conv[l];
    if (l > first) c.input = ws.conv[l - 1].out;
    c.pre.assign(static_cast<std::size_t>(ws.batch) * s.out_maps * s.out_h * s.out_w, T(0));
    const T* bias = s.has_bias ? p.weights.data() + s.bias : nullptr;
    detail::conv_forward(a, s, p.weights.data() + s.weight, bias, c.input.data(), c.pre.data(), ws.batch);
    if (a.order == BlockOrder::activation_then_norm) {
      detail::activate(a.activation, c.pre, c.mid);
      detail::batchnorm_forward(p, s, ws.mode, ws.batch, c, c.mid, c.out);
    } else {
      detail::batchnorm_forward(p, s, ws.mode, ws.batch, c, c.pre, c.mid);
      detail::activate(a.activation, c.mid, c.out);
    }
  }
  ws.fc.front().input = ws.conv.back().out;
}

/// Runs fc layer `first` onwards using the cached input of that layer.
template <typename T>
void forward_fc_from(const SiameseParams<T>& p, Workspace<T>& ws, std::size_t first) {
  for (std::size_t l = first; l < p.layout.fc.size(); ++l) {
    const FcSlots& s = p.layout.fc[l];
    FcCache<T>& c = ws.fc[l];
    if (l > first) c.input = ws.fc[l - 1].out;
    const auto in = static_cast<std::size_t>(s.in), out = static_cast<std::size_t>(s.out);
    c.pre.resize(static_cast<std::size_t>(ws.batch) * out);
    const T* w = p.weights.data() + s.weight;
    const T* b = p.weights.data() + s.bias;
    for (std::size_t j = 0; j < out; ++j) {
      const T* wr = w + j * in;
      for (int n = 0; n < ws.batch; ++n) {
        c.pre[static_cast<std::size_t>(n) * out + j] = b[j] + detail::dot(wr, c.input.data() + n * in, in);
      }
    }
    if (l + 1 < p.layout.fc.size()) {
      detail::activate(Activation::relu, c.pre, c.out);
    } else {
      c.out = c.pre;
    }
  }
}

/// Forward pass over a batch of images stored back to back (N x H x W).
/// Train mode normalises with statistics of the whole batch; eval mode uses
/// the running statistics. Parameters are never modified here; see
/// update_running_stats.
template <typename T>
void forward_batch(const SiameseParams<T>& p, std::span<const T> images, int batch, Mode mode, Workspace<T>& ws) {
  const std::size_t per = static_cast<std::size_t>(p.arch.input_h) * static_cast<std::size_t>(p.arch.input_w);
  if (batch < 1 || images.size() != per * static_cast<std::size_t>(batch)) {
    fail(ErrorCode::ShapeMismatch, "input batch does not match the configured " + std::to_string(p.arch.input_h) +
                                       "x" + std::to_string(p.arch.input_w) + " shape");
  }
  ws.batch = batch;
  ws.mode = mode;
  ws.conv.resize(p.layout.conv.size());
  ws.fc.resize(p.layout.fc.size());
  ws.conv.front().input.assign(images.begin(), images.end());
  forward_conv_from(p, ws, 0);
  forward_fc_from(p, ws, 0);
}

/// Exponential moving average of the batch statistics of a train-mode pass.
/// Running variance uses the unbiased estimate.
template <typename T>
void update_running_stats(SiameseParams<T>& p, const Workspace<T>& ws) {
  const double mom = p.arch.bn_momentum;
  for (std::size_t l = 0; l < p.layout.conv.size(); ++l) {
    const ConvSlots& s = p.layout.conv[l];
    const auto& c = ws.conv[l];
    const double count = static_cast<double>(s.out_h) * s.out_w * ws.batch;
    const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
    for (int ch = 0; ch < s.out_maps; ++ch) {
      T& rm = p.buffers[s.running_mean + static_cast<std::size_t>(ch)];
      T& rv = p.buffers[s.running_var + static_cast<std::size_t>(ch)];
      rm = static_cast<T>((1.0 - mom) * static_cast<double>(rm) + mom * c.mean[static_cast<std::size_t>(ch)]);
      rv = static_cast<T>((1.0 - mom) * static_cast<double>(rv) + mom * c.var[static_cast<std::size_t>(ch)] * unbias);
    }
  }
}

/// Back-propagates dL/d(embeddings) (N x 5) and accumulates into `grad`,
/// which has the size of the trainable storage.
template <typename T>
void backward_batch(const SiameseParams<T>& p, const Workspace<T>& ws, std::span<const T> d_embed,
                    std::span<T> grad) {
  if (grad.size() != p.weights.size()) fail(ErrorCode::ShapeMismatch, "gradient buffer has the wrong size");
  const auto& a = p.arch;
  std::vector<T> delta(d_embed.begin(), d_embed.end());
  for (std::size_t l = p.layout.fc.size(); l-- > 0;) {
    const FcSlots& s = p.layout.fc[l];
    const FcCache<T>& c = ws.fc[l];
    const auto in = static_cast<std::size_t>(s.in), out = static_cast<std::size_t>(s.out);
    if (l + 1 < p.layout.fc.size()) {
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (!(c.pre[i] > T(0))) delta[i] = T(0);
    }
    T* dw = grad.data() + s.weight;
    T* db = grad.data() + s.bias;
    const T* w = p.weights.data() + s.weight;
    std::vector<T> d_in(static_cast<std::size_t>(ws.batch) * in, T(0));
    std::vector<T> gs;
    std::vector<const T*> xs;
    for (std::size_t j = 0; j < out; ++j) {
      T* dwr = dw + j * in;
      const T* wr = w + j * in;
      gs.clear();
      xs.clear();
      for (int n = 0; n < ws.batch; ++n) {
        const T g = delta[static_cast<std::size_t>(n) * out + j];
        db[j] += g;
        if (g == T(0)) continue;
        gs.push_back(g);
        xs.push_back(c.input.data() + static_cast<std::size_t>(n) * in);
        detail::axpy(d_in.data() + static_cast<std::size_t>(n) * in, g, wr, in);
      }
      // Weight row updated in one sweep over all samples.
      if (!gs.empty()) detail::axpy_many(dwr, gs.data(), xs.data(), gs.size(), in);
    }
    delta = std::move(d_in);
  }
  for (std::size_t l = p.layout.conv.size(); l-- > 0;) {
    const ConvSlots& s = p.layout.conv[l];
    const ConvCache<T>& c = ws.conv[l];
    if (a.order == BlockOrder::activation_then_norm) {
      detail::batchnorm_backward(p, s, ws.mode, ws.batch, c, delta, grad);
      detail::activate_backward(a.activation, c.pre, c.mid, delta);
    } else {
      detail::activate_backward(a.activation, c.mid, c.out, delta);
      detail::batchnorm_backward(p, s, ws.mode, ws.batch, c, delta, grad);
    }
    std::vector<T> d_in;
    if (l > 0) d_in.resize(c.input.size());
    detail::conv_backward(a, s, p.weights.data() + s.weight, c.input.data(), delta.data(), grad.data() + s.weight,
                          s.has_bias ? grad.data() + s.bias : nullptr, l > 0 ? d_in.data() : nullptr, ws.batch);
    delta = std::move(d_in);
  }
}

// ---------------------------------------------------------------------------
// Convenience wrappers over single images and pairs
// ---------------------------------------------------------------------------

template <typename T>
void check_input(const ArchitectureConfig& a, const InputTensor& x) {
  if (x.channels != 1 || x.height != a.input_h || x.width != a.input_w ||
      x.values.size() != static_cast<std::size_t>(x.height) * static_cast<std::size_t>(x.width)) {
    fail(ErrorCode::ShapeMismatch, "expected 1x" + std::to_string(a.input_h) + "x" + std::to_string(a.input_w) +
                                       " input, got " + std::to_string(x.channels) + "x" + std::to_string(x.height) +
                                       "x" + std::to_string(x.width));
  }
}

template <typename T>
std::vector<T> stack_inputs(const ArchitectureConfig& a, std::initializer_list<const InputTensor*> xs) {
  std::vector<T> out;
  out.reserve(xs.size() * static_cast<std::size_t>(a.input_h) * static_cast<std::size_t>(a.input_w));
  for (const InputTensor* x : xs) {
    check_input<T>(a, *x);
    for (double v : x->values) out.push_back(static_cast<T>(v));
  }
  return out;
}

template <typename T>
FeatureVector to_feature(std::span<const T> v) {
  FeatureVector f;
  f.values.assign(v.begin(), v.end());
  return f;
}

/// Eval-mode embedding of one document; pure and safe to call concurrently.
template <typename T>
FeatureVector forward_branch(const SiameseParams<T>& p, const InputTensor& x) {
  Workspace<T> ws;
  const auto batch = stack_inputs<T>(p.arch, {&x});
  forward_batch<T>(p, batch, 1, Mode::eval, ws);
  return to_feature<T>(ws.embedding(0));
}

/// Train mode normalises with the image's own statistics and folds them
/// into the running averages.
template <typename T>
FeatureVector forward_branch(SiameseParams<T>& p, const InputTensor& x, Mode mode) {
  if (mode == Mode::eval) return forward_branch(std::as_const(p), x);
  Workspace<T> ws;
  const auto batch = stack_inputs<T>(p.arch, {&x});
  forward_batch<T>(p, batch, 1, Mode::train, ws);
  update_running_stats(p, ws);
  return to_feature<T>(ws.embedding(0));
}

/// Both documents go through the one shared parameter set. In train mode
/// they form a single batch, so batchnorm statistics span both branches.
template <typename T>
std::pair<FeatureVector, FeatureVector> embed_pair(SiameseParams<T>& p, const InputTensor& xa, const InputTensor& xb,
                                                   Mode mode) {
  Workspace<T> ws;
  const auto batch = stack_inputs<T>(p.arch, {&xa, &xb});
  if (mode == Mode::eval) {
    // Separate passes: each embedding depends on its own input only.
    return {forward_branch(std::as_const(p), xa), forward_branch(std::as_const(p), xb)};
  }
  forward_batch<T>(p, batch, 2, Mode::train, ws);
  update_running_stats(p, ws);
  return {to_feature<T>(ws.embedding(0)), to_feature<T>(ws.embedding(1))};
}

template <typename T>
std::pair<FeatureVector, FeatureVector> embed_pair(const SiameseParams<T>& p, const InputTensor& xa,
                                                   const InputTensor& xb) {
  return {forward_branch(p, xa), forward_branch(p, xb)};
}

}  // namespace gfv

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "gfv/dataset.hpp"
#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#endif

#include "gfv/error.hpp"
#include "gfv/network.hpp"
#include "gfv/rng.hpp"

namespace gfv {

struct TrainConfig {
  int batch_size = 4;
  int epochs = 500;
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.0;
  double margin = 2.0;
  std::uint64_t seed = 42;

  void validate() const {
    if (batch_size < 1) fail(ErrorCode::InvalidArgument, "batch_size must be >= 1");
    if (epochs < 1) fail(ErrorCode::InvalidArgument, "epochs must be >= 1");
    if (!(margin > 0.0)) fail(ErrorCode::InvalidArgument, "margin must be positive");
    if (!(learning_rate > 0.0)) fail(ErrorCode::InvalidArgument, "learning rate must be positive");
  }
};

struct LossStep {
  int epoch = 0;
  int batch = 0;
  double loss = 0.0;
};

struct LossTrace {
  std::vector<LossStep> steps;

  double epoch_mean(int epoch) const {
    double s = 0.0;
    int n = 0;
    for (const auto& st : steps) {
      if (st.epoch == epoch) {
        s += st.loss;
        ++n;
      }
    }
    return n ? s / n : std::nan("");
  }

  std::string to_csv() const {
    std::string out = "epoch,batch,loss\n";
    char buf[64];
    for (const auto& s : steps) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.17g\n", s.epoch, s.batch, s.loss);
      out += buf;
    }
    return out;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out << to_csv();
  }
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, LossTrace trace)
      : Error(ErrorCode::DivergenceDetected, what), trace_(std::move(trace)) {}
  const LossTrace& trace() const noexcept { return trace_; }

 private:
  LossTrace trace_;
};

/// Adaptive-moment optimiser with bias correction; weight decay is added to
/// the gradient (L2 form).
template <typename T>
class Adam {
 public:
  Adam(std::size_t n, const TrainConfig& cfg) : cfg_(cfg), m_(n, T(0)), v_(n, T(0)) {}

  void step(std::vector<T>& w, const std::vector<T>& g) {
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, t_));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, t_));
    const T lr = static_cast<T>(cfg_.learning_rate), eps = static_cast<T>(cfg_.adam_epsilon);
    const T wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = g[i] + wd * w[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * gi;
      v_[i] = b2 * v_[i] + (T(1) - b2) * gi * gi;
      const T mh = m_[i] / c1;
      const T vh = v_[i] / c2;
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<T> m_, v_;
  int t_ = 0;
};

namespace detail {

// Adam moments of rarely-updated weights decay geometrically into the
// subnormal range, where x86 arithmetic is slower by orders of magnitude.
// Training runs with flush-to-zero; the previous mode is restored on exit.
class FlushDenormals {
 public:
  FlushDenormals() {
#if defined(__SSE__) || defined(_M_X64)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);  // FTZ | DAZ
#endif
  }
  ~FlushDenormals() {
#if defined(__SSE__) || defined(_M_X64)
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

}  // namespace detail

struct TrainResult {
  SiameseParams<float> params;
  LossTrace trace;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Mini-batch training on the mean contrastive loss. Pairs are put in a
/// canonical order first, so the result depends on the pair multiset and the
/// seed only. Each batch of B pairs runs as one 2B-image pass: first members,
/// then second members.
template <typename Preprocessor>
TrainResult train(const TrainConfig& cfg, const ArchitectureConfig& arch, std::vector<PairSample> pairs,
                  Preprocessor&& preprocess_record, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (pairs.empty()) fail(ErrorCode::EmptyTrainingSet, "no training pairs");
  const detail::FlushDenormals ftz;
  std::sort(pairs.begin(), pairs.end(), [](const PairSample& x, const PairSample& y) {
    return std::tie(x.a.id, x.b.id, x.c) < std::tie(y.a.id, y.b.id, y.c);
  });

  TrainResult res{init_params<float>(arch, cfg.seed), {}};
  auto& params = res.params;
  Adam<float> opt(params.weights.size(), cfg);
  Rng rng(derive_seed(cfg.seed, "shuffle"));
  const std::size_t per = static_cast<std::size_t>(arch.input_h) * static_cast<std::size_t>(arch.input_w);

  // Tensors are materialised once as float.
  std::vector<std::vector<float>> first(pairs.size()), second(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (auto [rec, dst] : {std::pair{&pairs[i].a, &first[i]}, std::pair{&pairs[i].b, &second[i]}}) {
      const InputTensor& t = preprocess_record(*rec);
      check_input<float>(arch, t);
      dst->assign(t.values.begin(), t.values.end());
    }
  }

  Workspace<float> ws;
  std::vector<float> grad(params.weights.size());
  std::vector<float> images;
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batch_index) {
      const std::size_t B = std::min(bs, order.size() - start);
      images.resize(2 * B * per);
      for (std::size_t i = 0; i < B; ++i) {
        const std::size_t k = order[start + i];
        std::copy(first[k].begin(), first[k].end(), images.begin() + static_cast<std::ptrdiff_t>(i * per));
        std::copy(second[k].begin(), second[k].end(), images.begin() + static_cast<std::ptrdiff_t>((B + i) * per));
      }
      forward_batch<float>(params, images, static_cast<int>(2 * B), Mode::train, ws);
      update_running_stats(params, ws);

      const auto L = static_cast<std::size_t>(kEmbeddingLength);
      std::vector<float> d_embed(2 * B * L);
      double loss = 0.0;
      for (std::size_t i = 0; i < B; ++i) {
        const int c = pairs[order[start + i]].c;
        loss += contrastive_loss_grad<float>(ws.embedding(static_cast<int>(i)), ws.embedding(static_cast<int>(B + i)), c,
                                             cfg.margin, 1.0 / static_cast<double>(B),
                                             std::span<float>(d_embed).subspan(i * L, L),
                                             std::span<float>(d_embed).subspan((B + i) * L, L));
      }
      loss /= static_cast<double>(B);
      res.trace.steps.push_back({epoch, batch_index, loss});
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index),
                               res.trace);
      }
      std::fill(grad.begin(), grad.end(), 0.0f);
      backward_batch<float>(params, ws, d_embed, grad);
      opt.step(params.weights, grad);
    }
    if (on_epoch) on_epoch(epoch, res.trace.epoch_mean(epoch));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  double worst_analytic = 0.0, worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a ReLU or hinge kink
  double distance = 0.0;
};

namespace detail {

// Sign pattern of every ReLU input plus the hinge side. Two evaluations with
// the same signature lie on the same smooth piece of the loss.
inline std::uint64_t kink_signature(const SiameseParams<double>& p, const Workspace<double>& ws, double d,
                                    double margin) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](bool bit) {
    h ^= bit ? 1u : 0u;
    h *= 0x100000001b3ULL;
  };
  if (p.arch.activation == Activation::relu) {
    for (const auto& c : ws.conv) {
      const auto& act_in = p.arch.order == BlockOrder::activation_then_norm ? c.pre : c.mid;
      for (double v : act_in) mix(v > 0.0);
    }
  }
  for (std::size_t l = 0; l + 1 < ws.fc.size(); ++l)
    for (double v : ws.fc[l].pre) mix(v > 0.0);
  mix(d < margin);
  return h;
}

// Recomputes output row j of fc layer l, then every later layer.
inline void refresh_fc_row(const SiameseParams<double>& p, Workspace<double>& ws, std::size_t l, std::size_t j) {
  const FcSlots& s = p.layout.fc[l];
  FcCache<double>& c = ws.fc[l];
  const auto in = static_cast<std::size_t>(s.in), out = static_cast<std::size_t>(s.out);
  const double* w = p.weights.data() + s.weight + j * in;
  const bool hidden = l + 1 < p.layout.fc.size();
  for (int n = 0; n < ws.batch; ++n) {
    const std::size_t at = static_cast<std::size_t>(n) * out + j;
    c.pre[at] = p.weights[s.bias + j] + dot(w, c.input.data() + static_cast<std::size_t>(n) * in, in);
    c.out[at] = hidden && c.pre[at] < 0.0 ? 0.0 : c.pre[at];
  }
  if (hidden) {
    ws.fc[l + 1].input = c.out;
    forward_fc_from(p, ws, l + 1);
  }
}

inline double pair_loss(const Workspace<double>& ws, int c, double margin, double* distance = nullptr) {
  const double d = pair_distance(ws.embedding(0), ws.embedding(1));
  if (distance) *distance = d;
  return contrastive_loss(d, c, margin);
}

}  // namespace detail

/// Compares the back-propagated gradient of the pair loss with central
/// differences for every trainable parameter, in train mode (batch
/// statistics over both branches). Perturbations that flip a ReLU or the
/// hinge are non-differentiable points and are counted in `skipped`.
/// Relative error is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
inline GradientCheckResult gradient_check(const SiameseParams<double>& base, const InputTensor& xa,
                                          const InputTensor& xb, int c, double margin, double eps = 1e-4) {
  GradientCheckResult out;
  SiameseParams<double> p = base;
  const auto images = stack_inputs<double>(p.arch, {&xa, &xb});
  Workspace<double> ws;
  forward_batch<double>(p, images, 2, Mode::train, ws);
  double d = 0.0;
  detail::pair_loss(ws, c, margin, &d);
  out.distance = d;
  const std::uint64_t base_sig = detail::kink_signature(p, ws, d, margin);

  const auto L = static_cast<std::size_t>(kEmbeddingLength);
  std::vector<double> d_embed(2 * L);
  contrastive_loss_grad<double>(ws.embedding(0), ws.embedding(1), c, margin, 1.0,
                                std::span<double>(d_embed).subspan(0, L), std::span<double>(d_embed).subspan(L, L));
  std::vector<double> analytic(p.weights.size(), 0.0);
  backward_batch<double>(p, ws, d_embed, analytic);

  // Owning layer of each trainable tensor: conv blocks first, then fc.
  struct Owner {
    const NamedTensor* tensor;
    bool conv;
    std::size_t layer;
  };
  std::vector<Owner> owners;
  for (const auto& t : p.layout.tensors) {
    if (t.buffer) continue;
    const bool conv = t.name.rfind("conv", 0) == 0;
    const std::size_t layer = static_cast<std::size_t>(std::stoi(t.name.substr(conv ? 4 : 2))) - 1;
    owners.push_back({&t, conv, layer});
  }

  // Walk layers from the output backwards: perturbing layer l only rewrites
  // caches at or after l, so earlier cached activations stay at baseline.
  auto loss_at = [&](const Owner& o, std::size_t k, double value, std::uint64_t& sig) {
    p.weights[o.tensor->offset + k] = value;
    if (o.conv) {
      forward_conv_from(p, ws, o.layer);
      forward_fc_from(p, ws, 0);
    } else {
      // Only output row j of the layer depends on weight (j, i) or bias j.
      const FcSlots& s = p.layout.fc[o.layer];
      const std::size_t j = o.tensor->name.ends_with("bias") ? k : k / static_cast<std::size_t>(s.in);
      detail::refresh_fc_row(p, ws, o.layer, j);
    }
    double dist = 0.0;
    const double loss = detail::pair_loss(ws, c, margin, &dist);
    sig = detail::kink_signature(p, ws, dist, margin);
    return loss;
  };
  for (auto it = owners.rbegin(); it != owners.rend(); ++it) {
    const NamedTensor& t = *it->tensor;
    for (std::size_t k = 0; k < t.count; ++k) {
      const std::size_t idx = t.offset + k;
      const double orig = p.weights[idx];
      // Central differences at eps and 2 eps, combined so the second-order
      // truncation terms cancel.
      double loss[4];
      bool smooth = true;
      const double steps[4] = {eps, -eps, 2.0 * eps, -2.0 * eps};
      for (int s = 0; s < 4; ++s) {
        std::uint64_t sig = 0;
        loss[s] = loss_at(*it, k, orig + steps[s], sig);
        smooth = smooth && sig == base_sig;
      }
      std::uint64_t sig = 0;
      loss_at(*it, k, orig, sig);
      if (!smooth) {
        ++out.skipped;
        continue;
      }
      const double d1 = (loss[0] - loss[1]) / (2.0 * eps);
      const double d2 = (loss[2] - loss[3]) / (4.0 * eps);
      const double fd = (4.0 * d1 - d2) / 3.0;
      const double ga = analytic[idx];
      const double rel = std::abs(ga - fd) / std::max(1e-8, std::abs(ga) + std::abs(fd));
      ++out.checked;
      if (rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst_parameter = t.name + "[" + std::to_string(k) + "]";
        out.worst_analytic = ga;
        out.worst_numeric = fd;
      }
    }
  }
  return out;
}

}  // namespace gfv

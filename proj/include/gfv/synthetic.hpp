#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <filesystem>
#include <string>
#include <vector>

#include "gfv/dataset.hpp"
#include "gfv/image_io.hpp"
#include "gfv/imaging.hpp"
#include "gfv/rng.hpp"

namespace gfv {

// Stand-in corpus for running the pipeline without the real document
// images. Every pseudo-country gets its own guilloche design and a fixed
// layout of dark foreground boxes (photo, text lines), which is also written
// out as annotations.
struct SyntheticCorpusSpec {
  std::vector<std::string> countries{"alb", "aze", "esp"};
  int docs_per_country = 20;
  int size = 256;
  int pattern_scale = 4;  // pattern drawn at size / pattern_scale, then upsampled
  std::uint64_t seed = 42;
  double noise = 0.005;  // per-document print noise amplitude
  double shading = 0.6;  // depth of the smooth background shading
  bool foreground = true;
  bool annotations = true;
};

inline GuillocheParams country_guilloche(const std::string& country, int side, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "guilloche/" + country));
  GuillocheParams p;
  p.curve_count = 16 + static_cast<int>(rng.below(9));
  p.amplitude = side * rng.uniform(0.45, 0.7);
  p.frequency = rng.uniform(1.2, 2.6);
  p.phase_jitter = 0.8;
  p.line_intensity = rng.uniform(0.3, 0.45);
  p.background_intensity = rng.uniform(0.8, 0.9);
  p.seed = derive_seed(seed, "phase/" + country);
  return p;
}

inline std::vector<Region> country_layout(const std::string& country, int size, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "layout/" + country));
  const int unit = size / 16;
  auto jitter = [&](int n) { return static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, n)))); };
  const int line_h = unit / 2 + 1;
  std::vector<Region> boxes;
  // Title, photo with a signature below it, text lines on the right, two
  // machine-readable lines at the bottom.
  boxes.push_back(Region{3 * unit + jitter(unit), unit, 8 * unit + jitter(2 * unit), line_h});
  boxes.push_back(Region{unit, 3 * unit, 4 * unit, 6 * unit + jitter(unit)});
  boxes.push_back(Region{unit + jitter(unit), 10 * unit + unit / 2, 3 * unit + jitter(unit), unit});
  for (int line = 0; line < 5; ++line) {
    boxes.push_back(Region{7 * unit, 3 * unit + line * 2 * unit, 4 * unit + jitter(4 * unit), line_h});
  }
  for (int line = 0; line < 2; ++line) {
    boxes.push_back(Region{unit, 13 * unit + line * unit + line * unit / 2, 14 * unit, line_h});
  }
  return boxes;
}

/// The country pattern is shared by every document; documents differ by
/// independent print noise only.
inline GrayImage synth_document(const std::string& country, int index, const SyntheticCorpusSpec& spec) {
  const int side = std::max(16, spec.size / std::max(1, spec.pattern_scale));
  const GuillocheParams p = country_guilloche(country, side, spec.seed);
  GrayImage img = resize_bilinear(synth_guilloche(p, side, side), spec.size, spec.size);
  // Printed backgrounds carry a smooth tonal wash; a block moved elsewhere
  // no longer matches its surroundings.
  Rng tone(derive_seed(spec.seed, "shading/" + country));
  struct Wave {
    double kx, ky, phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    const double angle = tone.uniform(0.0, 2.0 * std::numbers::pi);
    const double k = 2.0 * std::numbers::pi / (spec.size * tone.uniform(0.2, 0.35));
    waves.push_back({k * std::cos(angle), k * std::sin(angle), tone.uniform(0.0, 2.0 * std::numbers::pi)});
  }
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      double w = 0.0;
      for (const Wave& v : waves) w += std::sin(v.kx * x + v.ky * y + v.phase);
      img.set(x, y, img.at(x, y) * (1.0 - spec.shading * (0.5 + w / 6.0)));
    }
  }
  if (spec.foreground) {
    for (const Region& r : country_layout(country, spec.size, spec.seed)) fill_region(img, r, 0.12);
  }
  Rng rng(derive_seed(spec.seed, "noise/" + country + "/" + std::to_string(index)));
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) img.set(x, y, img.at(x, y) + rng.uniform(-spec.noise, spec.noise));
  return img;
}

/// Writes root/<country>/templates/doc_NN.png (+ annotations/doc_NN.json).
inline void make_synthetic_corpus(const std::filesystem::path& root, const SyntheticCorpusSpec& spec) {
  for (const auto& country : spec.countries) {
    const auto layout = country_layout(country, spec.size, spec.seed);
    for (int i = 0; i < spec.docs_per_country; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "doc_%02d", i);
      save_png(synth_document(country, i, spec), root / country / "templates" / (std::string(name) + ".png"));
      if (spec.foreground && spec.annotations) {
        write_annotations(root / country / "annotations" / (std::string(name) + ".json"), layout);
      }
    }
  }
}

}  // namespace gfv

#include <fstream>

#include <gtest/gtest.h>

#include "gfv/checkpoint.hpp"
#include "test_util.hpp"

using namespace gfv;

namespace {

ArchitectureConfig arch(int side) {
  ArchitectureConfig a = ArchitectureConfig::with_resolution(side);
  a.fc_widths = {8, 8, 5};
  return a;
}

SiameseParams<double> trained_like(int side) {
  auto p = init_params<double>(arch(side), 9);
  Rng rng(3);
  for (auto& b : p.buffers) b = rng.uniform(0.1, 2.0);
  return p;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto p = trained_like(16);
  const std::string bytes = encode_checkpoint(p);
  const auto q = decode_checkpoint<double>(bytes, arch(16));
  EXPECT_EQ(q.weights, p.weights);
  EXPECT_EQ(q.buffers, p.buffers);
  EXPECT_EQ(q.seed, p.seed);
  EXPECT_EQ(encode_checkpoint(q), bytes);
}

TEST(Checkpoint, FloatParamsSurviveFileRoundTrip) {
  test::TempDir dir;
  const auto p = convert_params<float>(trained_like(16));
  save_checkpoint(p, dir.path() / "sub" / "m.ckpt");
  const auto q = load_checkpoint<float>(dir.path() / "sub" / "m.ckpt", arch(16));
  EXPECT_EQ(q.weights, p.weights);
  EXPECT_EQ(q.buffers, p.buffers);
}

TEST(Checkpoint, ArchitectureMismatchIsRejected) {
  const std::string bytes = encode_checkpoint(trained_like(16));
  EXPECT_GFV_ERROR(decode_checkpoint<double>(bytes, arch(24)), FingerprintMismatch);
  ArchitectureConfig other = arch(16);
  other.activation = Activation::tanh;
  EXPECT_GFV_ERROR(decode_checkpoint<double>(bytes, other), FingerprintMismatch);
}

TEST(Checkpoint, DamageIsDetected) {
  const std::string bytes = encode_checkpoint(trained_like(16));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_GFV_ERROR(decode_checkpoint<double>(bytes.substr(0, cut), arch(16)), CorruptCheckpoint) << cut;
  }
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_GFV_ERROR(decode_checkpoint<double>(flipped, arch(16)), CorruptCheckpoint);
  EXPECT_GFV_ERROR(decode_checkpoint<double>(bytes + "x", arch(16)), CorruptCheckpoint);
}

TEST(Checkpoint, MissingFile) {
  test::TempDir dir;
  EXPECT_GFV_ERROR(load_checkpoint(dir.path() / "none.ckpt", arch(16)), FileNotFound);
}

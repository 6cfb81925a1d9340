#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "askpaint/checkpoint.hpp"
#include "test_util.hpp"

using namespace askpaint;
using askpaint::testing::random_tensor;
using askpaint::testing::TempDir;
using askpaint::testing::tiny_config;

namespace {

std::vector<std::uint8_t> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

Checkpoint<float> sample_checkpoint(ColorMode mode = ColorMode::LabAB) {
  return {kCheckpointVersion, build_model<float>(tiny_config(8, 2, mode)), {{"steps", 5}}, 5};
}

}  // namespace

TEST(Checkpoint, RoundTripForwardBitIdentical) {
  TempDir dir("ckpt");
  const auto ck = sample_checkpoint();
  save_checkpoint(ck, dir.path() / "m.ckpt");
  const auto back = load_checkpoint<float>(dir.path() / "m.ckpt");
  EXPECT_EQ(back.step_count, 5);
  EXPECT_EQ(back.train_config, ck.train_config);
  EXPECT_EQ(back.model.config(), ck.model.config());
  std::mt19937_64 rng(1);
  const auto x = random_tensor<float>(1, 8, 8, rng), q = random_tensor<float>(1, 8, 8, rng, 0, 1);
  const auto c = random_tensor<float>(2, 8, 8, rng), y = random_tensor<float>(2, 8, 8, rng);
  const auto a = ck.model.forward(x, q, c, y), b = back.model.forward(x, q, c, y);
  EXPECT_EQ(a.prediction, b.prediction);
  EXPECT_EQ(a.question, b.question);
}

TEST(Checkpoint, ResaveIsByteIdentical) {
  TempDir dir("ckpt");
  save_checkpoint(sample_checkpoint(), dir.path() / "a.ckpt");
  save_checkpoint(load_checkpoint<float>(dir.path() / "a.ckpt"), dir.path() / "b.ckpt");
  EXPECT_EQ(read_all(dir.path() / "a.ckpt"), read_all(dir.path() / "b.ckpt"));
}

TEST(Checkpoint, TruncatedFileRejected) {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  for (std::size_t cut : {std::size_t(5), bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(deserialize_checkpoint<float>(t), CorruptCheckpointError) << cut;
  }
}

TEST(Checkpoint, FlippedPayloadByteRejected) {
  auto bytes = serialize_checkpoint(sample_checkpoint());
  bytes[bytes.size() - 3] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint<float>(bytes), CorruptCheckpointError);
}

TEST(Checkpoint, BadMagicRejected) {
  auto bytes = serialize_checkpoint(sample_checkpoint());
  bytes[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint<float>(bytes), CorruptCheckpointError);
}

TEST(Checkpoint, VersionMismatch) {
  auto ck = sample_checkpoint();
  ck.format_version = 2;
  EXPECT_THROW(deserialize_checkpoint<float>(serialize_checkpoint(ck)), CheckpointVersionError);
}

TEST(Checkpoint, ShapeMismatchNamesArray) {
  const auto bytes = serialize_checkpoint(sample_checkpoint(ColorMode::LabAB));
  try {
    deserialize_checkpoint<float>(bytes, tiny_config(8, 2, ColorMode::Rgb));
    FAIL() << "expected a shape error";
  } catch (const CheckpointShapeError& e) {
    EXPECT_EQ(e.array_name(), "enc0.conv1.weight");
    EXPECT_NE(std::string(e.what()).find("enc0.conv1.weight"), std::string::npos);
  }
}

TEST(Checkpoint, FailedLoadLeavesTargetUntouched) {
  TempDir dir("ckpt");
  const auto path = dir.path() / "m.ckpt";
  save_checkpoint(sample_checkpoint(), path);
  auto bytes = read_all(path);
  bytes.resize(bytes.size() - 10);
  write_all(dir.path() / "bad.ckpt", bytes);
  Checkpoint<float> target = load_checkpoint<float>(path);
  const auto snapshot = target.model.parameters()[0].value;
  EXPECT_THROW(target = load_checkpoint<float>(dir.path() / "bad.ckpt"), CorruptCheckpointError);
  EXPECT_EQ(target.model.parameters()[0].value, snapshot);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/nowhere.ckpt"), NotFoundError);
}

TEST(Checkpoint, HeaderIsPlainText) {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  const std::string head(bytes.begin(), bytes.begin() + 40);
  EXPECT_EQ(head.rfind("ASKPAINT-CHECKPOINT\nformat_version: 1\n", 0), 0u);
}

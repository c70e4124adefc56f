#include <gtest/gtest.h>

#include <cstring>
#include <limits>
#include <random>

#include "fedstgcrn/codec.hpp"
#include "fedstgcrn/model.hpp"

using namespace fedstgcrn;

namespace {

ModelConfig random_config(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(1, 6);
  ModelConfig c;
  c.input_dim = d(rng);
  c.hidden_dim = d(rng);
  c.embed_dim = d(rng);
  c.num_heads = d(rng) % 3 + 1;
  c.lookback = d(rng);
  c.horizon = d(rng) % 3 + 1;
  return c;
}

}  // namespace

TEST(Codec, RoundTripIsBitExact) {
  ModelConfig c;
  c.input_dim = 3;
  auto p = init_params<float>(c, 5);
  // awkward values survive too
  auto v = p.at("lstm.b_f").mutable_values();
  v[0] = -0.0f;
  v[1] = std::numeric_limits<float>::denorm_min();
  v[2] = std::numeric_limits<float>::max();
  const auto bytes = serialize_params(p);
  const auto back = deserialize_params<float>(bytes, p.manifest());
  EXPECT_TRUE(back.identical_to(p));
  EXPECT_TRUE(std::signbit(back.at("lstm.b_f").values()[0]));
  EXPECT_EQ(serialize_params(back), bytes);

  const auto d = init_params<double>(c, 5);
  EXPECT_TRUE(deserialize_params<double>(serialize_params(d)).identical_to(d));
}

TEST(Codec, PayloadLengthMatchesParamCount) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 10; ++i) {
    const auto c = random_config(rng);
    EXPECT_EQ(serialize_params(init_params<float>(c, i)).size(), param_count(c).payload_bytes);
    EXPECT_EQ(serialize_params(init_params<double>(c, i)).size(), param_count(c, DType::F64).payload_bytes);
  }
}

TEST(Codec, WrongManifestIsRejected) {
  ModelConfig a, b;
  b.hidden_dim = a.hidden_dim + 1;
  const auto bytes = serialize_params(init_params<float>(a, 1));
  EXPECT_THROW(deserialize_params<float>(bytes, make_manifest(b)), ManifestError);
  EXPECT_THROW(deserialize_params<double>(bytes, make_manifest(a, DType::F64)), ManifestError);
}

TEST(Codec, TruncationAndTrailingBytesAreRejected) {
  ModelConfig c;
  const auto bytes = serialize_params(init_params<float>(c, 1));
  const auto m = make_manifest(c);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, bytes.size() - 1}) {
    Bytes shorter(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_ANY_THROW(deserialize_params<float>(shorter, m)) << cut;
  }
  Bytes longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(deserialize_params<float>(longer, m), CodecError);
  Bytes bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_params<float>(bad_magic, m), CodecError);
}

TEST(Codec, ValuesAreLittleEndianAfterManifest) {
  ModelConfig c;
  const auto p = init_params<float>(c, 3);
  const auto bytes = serialize_params(p);
  const std::size_t off = manifest_encoded_size(p.manifest());
  const float first = p.entries()[0].tensor.values()[0];
  std::uint32_t bits;
  std::memcpy(&bits, &first, 4);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(bytes[off + k], static_cast<std::uint8_t>(bits >> (8 * k)));
}

TEST(Codec, DigestTracksLayout) {
  ModelConfig a, b;
  b.num_nodes = 11;  // node count never enters the layout
  EXPECT_EQ(manifest_digest(make_manifest(a)), manifest_digest(make_manifest(b)));
  b.embed_dim = a.embed_dim + 2;
  EXPECT_NE(manifest_digest(make_manifest(a)), manifest_digest(make_manifest(b)));
  EXPECT_EQ(manifest_digest(make_manifest(a)).size(), 16u);
}

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "dsconv/model_store.hpp"

using namespace dsconv;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dsconv_store_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                        std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

nlohmann::json read_manifest(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  return nlohmann::json::parse(f);
}

void write_manifest(const fs::path& dir, const nlohmann::json& j) {
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  f << j.dump(2);
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

/// Rewrites a blob file and patches the manifest checksum so only the content check can object.
void tamper_blob(const fs::path& dir, const std::string& file, const std::function<void(std::vector<std::uint8_t>&)>& edit) {
  auto bytes = read_bytes(dir / file);
  edit(bytes);
  write_bytes(dir / file, bytes);
  auto man = read_manifest(dir);
  auto patch = [&](nlohmann::json& blobs) {
    for (auto& [k, ref] : blobs.items())
      if (ref.at("file") == file) {
        ref["fnv1a64"] = hex(fnv1a64(bytes));
        ref["bytes"] = bytes.size();
      }
  };
  for (auto& l : man["layers"]) patch(l["blobs"]);
  patch(man["classifier"]["blobs"]);
  write_manifest(dir, man);
}

Model pruned_model(std::uint64_t seed = 5) {
  ToyNetSpec spec;
  spec.height = 8;
  spec.width = 8;
  spec.convs = {{4, 3, 1, 1}, {6, 2, 2, 0}, {5, 1, 1, 0}};
  ToyNet net(spec, seed);
  std::mt19937_64 rng(seed);
  Masks masks;
  for (std::size_t l = 0; l < net.conv_count(); ++l) {
    auto w = net.conv(l).weights.data();
    std::vector<std::uint8_t> m(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = std::bernoulli_distribution(0.35)(rng) ? 1 : 0;
      if (!m[i]) w[i] = 0.0;
    }
    masks.push_back(std::move(m));
  }
  Model model = model_from_toynet(net, &masks);
  model.provenance["note"] = "unit test";
  return model;
}

void expect_format_error_not_checksum(const fs::path& dir) {
  try {
    load_model(dir);
    FAIL() << "load succeeded";
  } catch (const ChecksumError& e) {
    FAIL() << "checksum error instead of a content error: " << e.what();
  } catch (const FormatError&) {
  }
}

}  // namespace

TEST(Blob, EncodeDecodeRoundTrip) {
  const std::vector<float> v{1.5f, -0.0f, 3.25f};
  const auto bytes = encode_blob(make_f32_blob(v, {3}));
  EXPECT_EQ(bytes.size() % kBlobAlignment, 0u);
  EXPECT_EQ(std::memcmp(bytes.data(), "DSCB", 4), 0);
  const auto back = blob_f32(decode_blob(bytes, "t"), "t");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(std::memcmp(back.data(), v.data(), 12), 0);
  EXPECT_THROW(blob_u32(decode_blob(bytes, "t"), "t"), FormatError);
  auto truncated = bytes;
  truncated.resize(40);
  EXPECT_THROW(decode_blob(truncated, "t"), FormatError);
  auto future = bytes;
  future[4] = 9;
  EXPECT_THROW(decode_blob(future, "t"), VersionError);
}

TEST(Blob, PackedCodesRoundTrip) {
  std::mt19937_64 rng(1);
  for (unsigned bits : {1u, 2u, 3u, 4u, 5u, 7u, 8u, 11u, 16u}) {
    std::vector<std::uint32_t> codes(333);
    for (auto& c : codes) c = static_cast<std::uint32_t>(rng() & ((1u << bits) - 1));
    const auto b = decode_blob(encode_blob(make_packed_blob(codes, bits)), "codes");
    EXPECT_EQ(b.payload.size(), (codes.size() * bits + 7) / 8);
    EXPECT_EQ(blob_codes(b, "codes"), codes);
  }
  EXPECT_THROW(make_packed_blob(std::vector<std::uint32_t>{4}, 2), ArgumentError);
}

TEST(Fnv, KnownVectors) {
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ull);
  const std::string a = "a";
  EXPECT_EQ(fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(a.data()), 1)),
            0xaf63dc4c8601ec8cull);
}

TEST(ModelStore, DenseCsrCodebookAndHalfRoundTrip) {
  Model m = pruned_model();
  build_layer_csr(m.convs[1]);
  QuantizeOptions q;
  q.scheme = QuantScheme::parse("codebook:8");
  Model cb = m;
  apply_quantization(cb, q);
  Model h = m;
  q.scheme = QuantScheme::parse("half");
  apply_quantization(h, q);
  Model fx = m;
  q.scheme = QuantScheme::parse("fixed:8");
  apply_quantization(fx, q);
  for (const Model* model : {&m, &cb, &h, &fx}) {
    TempDir dir("rt");
    save_model(*model, dir.path);
    const Model back = load_model(dir.path);
    EXPECT_TRUE(same_bits(*model, back));
    EXPECT_EQ(back.provenance, model->provenance);
    for (std::size_t l = 0; l < back.convs.size(); ++l) {
      EXPECT_EQ(back.convs[l].storage, model->convs[l].storage);
      EXPECT_EQ(back.convs[l].mask, model->convs[l].mask);
      EXPECT_EQ(back.convs[l].quant.scheme, model->convs[l].quant.scheme);
    }
  }
  const auto man = [&] {
    TempDir dir("man");
    save_model(m, dir.path);
    return read_manifest(dir.path);
  }();
  EXPECT_EQ(man.at("format"), "dsconv-model");
  EXPECT_EQ(man.at("format_version"), kModelFormatVersion);
  EXPECT_EQ(man.at("layers")[1].at("storage"), "csr");
}

TEST(ModelStore, ModifiedOrTruncatedBlobFailsChecksum) {
  Model m = pruned_model();
  build_layer_csr(m.convs[0]);
  TempDir dir("ck");
  save_model(m, dir.path);
  auto bytes = read_bytes(dir.path / "conv0.values.bin");
  auto flipped = bytes;
  flipped[70] ^= 0x01;
  write_bytes(dir.path / "conv0.values.bin", flipped);
  EXPECT_THROW(load_model(dir.path), ChecksumError);
  auto cut = bytes;
  cut.resize(cut.size() - 64);
  write_bytes(dir.path / "conv0.values.bin", cut);
  EXPECT_THROW(load_model(dir.path), ChecksumError);
  write_bytes(dir.path / "conv0.values.bin", bytes);
  EXPECT_NO_THROW(load_model(dir.path));
  fs::remove(dir.path / "conv0.bias.bin");
  EXPECT_THROW(load_model(dir.path), FormatError);
}

TEST(ModelStore, FutureVersionsAreRejected) {
  Model m = pruned_model();
  TempDir dir("ver");
  save_model(m, dir.path);
  auto man = read_manifest(dir.path);
  man["format_version"] = kModelFormatVersion + 1;
  write_manifest(dir.path, man);
  EXPECT_THROW(load_model(dir.path), VersionError);

  TempDir dir2("blobver");
  save_model(m, dir2.path);
  tamper_blob(dir2.path, "conv0.bias.bin", [](auto& b) { b[4] = 7; });
  EXPECT_THROW(load_model(dir2.path), VersionError);
}

TEST(ModelStore, CorruptColidxWithValidChecksumIsAFormatError) {
  Model m = pruned_model();
  build_layer_csr(m.convs[1]);
  {
    TempDir dir("colidx_range");
    save_model(m, dir.path);
    tamper_blob(dir.path, "conv1.colidx.bin", [](auto& b) {
      const std::uint32_t bad = 0x7ffffff0u;
      std::memcpy(b.data() + 64, &bad, 4);
    });
    expect_format_error_not_checksum(dir.path);
  }
  {
    TempDir dir("colidx_dup");
    save_model(m, dir.path);
    tamper_blob(dir.path, "conv1.colidx.bin", [](auto& b) { std::memcpy(b.data() + 68, b.data() + 64, 4); });
    expect_format_error_not_checksum(dir.path);
  }
  {
    TempDir dir("rowptr");
    save_model(m, dir.path);
    tamper_blob(dir.path, "conv1.rowptr.bin", [](auto& b) { b[64 + 4] += 1; });
    expect_format_error_not_checksum(dir.path);
  }
  {
    // A kept weight marked as pruned contradicts the stored mask.
    TempDir dir("mask");
    save_model(m, dir.path);
    const auto& L = m.convs[1];
    std::size_t i = 0;
    while (!(L.mask[i] && L.weights.data()[i] != 0.0f)) ++i;
    tamper_blob(dir.path, "conv1.mask.bin", [i](auto& b) { b[64 + i / 8] ^= static_cast<std::uint8_t>(1u << (i % 8)); });
    expect_format_error_not_checksum(dir.path);
  }
}

TEST(ModelStore, NetworkConfigAndTensorFiles) {
  Model m = pruned_model();
  NetworkConfig c = all_dense_config(m, Algorithm::dense_gemm);
  c.batch = 16;
  c.layers[1].algorithm = Algorithm::sparse_direct;
  c.layers[1].sub_batch_size = 8;
  c.layers[1].median_ms = 0.123456789;
  c.layers[1].crossover = "0.7500";
  TempDir dir("cfg");
  fs::create_directories(dir.path);
  save_network_config(c, dir.path / "net.json");
  EXPECT_EQ(load_network_config(dir.path / "net.json"), c);

  std::mt19937_64 rng(2);
  Tensor4D<float> x(Extents{3, 1, 8, 8});
  for (auto& v : x.data()) v = std::normal_distribution<float>()(rng);
  save_tensor(x, dir.path / "x.bin");
  const auto y = load_tensor(dir.path / "x.bin");
  EXPECT_EQ(y.extents(), x.extents());
  EXPECT_EQ(std::memcmp(y.data().data(), x.data().data(), x.size() * 4), 0);
  EXPECT_THROW(load_tensor(dir.path / "missing.bin"), Error);
}

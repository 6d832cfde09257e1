#include "dsconv/model_store.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dsconv {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

constexpr char kMagic[4] = {'D', 'S', 'C', 'B'};

void put_u16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v);
  p[1] = static_cast<std::uint8_t>(v >> 8);
}

void put_u64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + p.string());
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

std::uint64_t element_bytes(BlobType t) {
  switch (t) {
    case BlobType::f32:
    case BlobType::u32: return 4;
    case BlobType::f16: return 2;
    case BlobType::u8_packed: return 0;
  }
  return 0;
}

}  // namespace

std::vector<std::uint8_t> encode_blob(const Blob& b) {
  if (b.dims.size() > 4) throw ArgumentError("blob: more than 4 dimensions");
  const std::size_t padded = (b.payload.size() + kBlobAlignment - 1) / kBlobAlignment * kBlobAlignment;
  std::vector<std::uint8_t> out(kBlobAlignment + padded, 0);
  std::memcpy(out.data(), kMagic, 4);
  put_u16(&out[4], kBlobVersion);
  put_u16(&out[6], static_cast<std::uint16_t>(b.type));
  out[8] = b.bits;
  out[9] = static_cast<std::uint8_t>(b.dims.size());
  for (std::size_t i = 0; i < b.dims.size(); ++i) put_u64(&out[16 + 8 * i], b.dims[i]);
  put_u64(&out[48], b.count);
  put_u64(&out[56], b.payload.size());
  std::copy(b.payload.begin(), b.payload.end(), out.begin() + kBlobAlignment);
  return out;
}

Blob decode_blob(std::span<const std::uint8_t> bytes, const std::string& what) {
  if (bytes.size() < kBlobAlignment) throw FormatError(what + ": blob shorter than its 64-byte header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(what + ": bad blob magic");
  const auto version = get_u16(&bytes[4]);
  if (version != kBlobVersion) throw VersionError(what + ": unsupported blob version " + std::to_string(version));
  Blob b;
  const auto tag = get_u16(&bytes[6]);
  if (tag < 1 || tag > 4) throw FormatError(what + ": unknown dtype tag " + std::to_string(tag));
  b.type = static_cast<BlobType>(tag);
  b.bits = bytes[8];
  const std::size_t ndim = bytes[9];
  if (ndim > 4) throw FormatError(what + ": ndim > 4");
  std::uint64_t prod = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    b.dims.push_back(get_u64(&bytes[16 + 8 * i]));
    prod *= b.dims.back();
  }
  b.count = get_u64(&bytes[48]);
  const auto len = get_u64(&bytes[56]);
  if (ndim > 0 && prod != b.count) throw FormatError(what + ": dims do not multiply to the element count");
  const auto eb = element_bytes(b.type);
  const std::uint64_t expect = eb ? b.count * eb : (b.count * b.bits + 7) / 8;
  if (b.type == BlobType::u8_packed && (b.bits < 1 || b.bits > 32)) throw FormatError(what + ": bad code width");
  if (eb && b.bits != eb * 8) throw FormatError(what + ": element width does not match dtype tag");
  if (len != expect) throw FormatError(what + ": payload length " + std::to_string(len) + " != " + std::to_string(expect));
  const std::uint64_t padded = (len + kBlobAlignment - 1) / kBlobAlignment * kBlobAlignment;
  if (bytes.size() != kBlobAlignment + padded) throw FormatError(what + ": file size does not match the header");
  b.payload.assign(bytes.begin() + kBlobAlignment, bytes.begin() + static_cast<std::ptrdiff_t>(kBlobAlignment + len));
  return b;
}

Blob make_f32_blob(std::span<const float> v, std::vector<std::uint64_t> dims) {
  Blob b{BlobType::f32, 32, std::move(dims), v.size(), {}};
  b.payload.resize(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &v[i], 4);
    for (int j = 0; j < 4; ++j) b.payload[4 * i + j] = static_cast<std::uint8_t>(u >> (8 * j));
  }
  return b;
}

Blob make_f16_blob(std::span<const Half> v, std::vector<std::uint64_t> dims) {
  Blob b{BlobType::f16, 16, std::move(dims), v.size(), {}};
  b.payload.resize(v.size() * 2);
  for (std::size_t i = 0; i < v.size(); ++i) put_u16(&b.payload[2 * i], v[i].bits);
  return b;
}

Blob make_u32_blob(std::span<const std::uint32_t> v) {
  Blob b{BlobType::u32, 32, {v.size()}, v.size(), {}};
  b.payload.resize(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (int j = 0; j < 4; ++j) b.payload[4 * i + j] = static_cast<std::uint8_t>(v[i] >> (8 * j));
  return b;
}

Blob make_packed_blob(std::span<const std::uint32_t> codes, unsigned bits) {
  if (bits < 1 || bits > 32) throw ArgumentError("packed blob: code width must be 1..32");
  Blob b{BlobType::u8_packed, static_cast<std::uint8_t>(bits), {codes.size()}, codes.size(), {}};
  b.payload.assign((codes.size() * bits + 7) / 8, 0);
  std::uint64_t pos = 0;
  for (auto c : codes) {
    if (bits < 32 && (c >> bits) != 0) throw ArgumentError("packed blob: code does not fit its width");
    for (unsigned j = 0; j < bits; ++j, ++pos)
      if ((c >> j) & 1u) b.payload[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
  }
  return b;
}

namespace {

void expect_type(const Blob& b, BlobType t, const std::string& what) {
  if (b.type != t) throw FormatError(what + ": unexpected dtype tag " + std::to_string(static_cast<int>(b.type)));
}

}  // namespace

std::vector<float> blob_f32(const Blob& b, const std::string& what) {
  expect_type(b, BlobType::f32, what);
  std::vector<float> v(b.count);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int j = 3; j >= 0; --j) u = (u << 8) | b.payload[4 * i + j];
    std::memcpy(&v[i], &u, 4);
  }
  return v;
}

std::vector<Half> blob_f16(const Blob& b, const std::string& what) {
  expect_type(b, BlobType::f16, what);
  std::vector<Half> v(b.count);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = Half::from_bits(get_u16(&b.payload[2 * i]));
  return v;
}

std::vector<std::uint32_t> blob_u32(const Blob& b, const std::string& what) {
  expect_type(b, BlobType::u32, what);
  std::vector<std::uint32_t> v(b.count);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int j = 3; j >= 0; --j) u = (u << 8) | b.payload[4 * i + j];
    v[i] = u;
  }
  return v;
}

std::vector<std::uint32_t> blob_codes(const Blob& b, const std::string& what) {
  expect_type(b, BlobType::u8_packed, what);
  std::vector<std::uint32_t> v(b.count, 0);
  std::uint64_t pos = 0;
  for (auto& c : v)
    for (unsigned j = 0; j < b.bits; ++j, ++pos)
      if ((b.payload[pos / 8] >> (pos % 8)) & 1u) c |= 1u << j;
  return v;
}

namespace {

json shape_json(const ConvShape& s) {
  return {{"in_channels", s.in_channels}, {"height", s.height},     {"width", s.width},
          {"out_channels", s.out_channels}, {"kernel_h", s.kernel_h}, {"kernel_w", s.kernel_w},
          {"stride", s.stride},           {"padding", s.padding}};
}

ConvShape shape_from(const json& j) {
  ConvShape s;
  s.in_channels = j.at("in_channels");
  s.height = j.at("height");
  s.width = j.at("width");
  s.out_channels = j.at("out_channels");
  s.kernel_h = j.at("kernel_h");
  s.kernel_w = j.at("kernel_w");
  s.stride = j.at("stride");
  s.padding = j.at("padding");
  return s;
}

json fixed_json(const FixedPointParams& p) {
  return {{"total_bits", p.total_bits}, {"int_bits", p.int_bits}, {"frac_bits", p.frac_bits}, {"mu", p.mu},
          {"sigma", p.sigma}};
}

FixedPointParams fixed_from(const json& j) {
  FixedPointParams p;
  p.total_bits = j.at("total_bits");
  p.int_bits = j.at("int_bits");
  p.frac_bits = j.at("frac_bits");
  p.mu = j.at("mu");
  p.sigma = j.at("sigma");
  return p;
}

json affine_json(const AffineIntParams& p) {
  return {{"bits", p.bits},
          {"mode", p.mode == AffineMode::symmetric ? "symmetric" : "asymmetric"},
          {"mu", p.mu},
          {"lo", p.lo},
          {"hi", p.hi},
          {"step", p.step},
          {"zero_point", p.zero_point},
          {"literal_ceil", p.literal_ceil}};
}

AffineIntParams affine_from(const json& j) {
  AffineIntParams p;
  p.bits = j.at("bits");
  const std::string mode = j.at("mode");
  if (mode != "symmetric" && mode != "asymmetric") throw FormatError("unknown affine mode '" + mode + "'");
  p.mode = mode == "symmetric" ? AffineMode::symmetric : AffineMode::asymmetric;
  p.mu = j.at("mu");
  p.lo = j.at("lo");
  p.hi = j.at("hi");
  p.step = j.at("step");
  p.zero_point = j.at("zero_point");
  p.literal_ceil = j.at("literal_ceil");
  return p;
}

std::vector<std::uint16_t> half_bits(const std::vector<Half>& v) {
  std::vector<std::uint16_t> out;
  for (auto h : v) out.push_back(h.bits);
  return out;
}

std::vector<Half> halves_from(const json& j) {
  std::vector<Half> out;
  for (const auto& b : j) out.push_back(Half::from_bits(b.get<std::uint16_t>()));
  return out;
}

json weight_quant_json(const WeightQuant& q) {
  return {{"scheme", q.scheme},           {"bits", q.bits},         {"fixed", fixed_json(q.fixed)},
          {"affine", affine_json(q.affine)}, {"saturated", q.saturated}, {"centroid_bits", half_bits(q.centroids)}};
}

WeightQuant weight_quant_from(const json& j) {
  WeightQuant q;
  q.scheme = j.at("scheme");
  q.bits = j.at("bits");
  q.fixed = fixed_from(j.at("fixed"));
  q.affine = affine_from(j.at("affine"));
  q.saturated = j.at("saturated");
  q.centroids = halves_from(j.at("centroid_bits"));
  return q;
}

json act_json(const ActivationQuant& a) {
  return {{"scheme", a.scheme},     {"bits", a.bits},           {"clip_lo", a.clip_lo},
          {"clip_hi", a.clip_hi},   {"coverage", a.coverage},   {"fixed", fixed_json(a.fixed)},
          {"affine", affine_json(a.affine)}};
}

ActivationQuant act_from(const json& j) {
  ActivationQuant a;
  a.scheme = j.at("scheme");
  a.bits = j.at("bits");
  a.clip_lo = j.at("clip_lo");
  a.clip_hi = j.at("clip_hi");
  a.coverage = j.at("coverage");
  a.fixed = fixed_from(j.at("fixed"));
  a.affine = affine_from(j.at("affine"));
  return a;
}

std::vector<std::uint64_t> dims_of(const Extents& e) { return {e.n, e.c, e.h, e.w}; }

class BlobWriter {
 public:
  explicit BlobWriter(fs::path dir) : dir_(std::move(dir)) {}

  json put(const std::string& file, const Blob& b) {
    const auto bytes = encode_blob(b);
    write_file(dir_ / file, bytes);
    return {{"file", file}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}};
  }

 private:
  fs::path dir_;
};

Blob get_blob(const fs::path& dir, const json& ref, const std::string& what) {
  const std::string file = ref.at("file");
  if (file.find('/') != std::string::npos || file.find("..") != std::string::npos)
    throw FormatError(what + ": blob path escapes the model directory");
  const fs::path p = dir / file;
  if (!fs::exists(p)) throw FormatError(what + ": missing blob " + file);
  const auto bytes = read_file(p);
  const std::string want = ref.at("fnv1a64");
  const std::string got = hex64(fnv1a64(bytes));
  if (got != want) throw ChecksumError(what + ": checksum mismatch for " + file + " (manifest " + want + ", file " + got + ")");
  return decode_blob(bytes, what);
}

template <class T>
void check_count(const std::vector<T>& v, std::size_t n, const std::string& what) {
  if (v.size() != n)
    throw FormatError(what + ": holds " + std::to_string(v.size()) + " elements, expected " + std::to_string(n));
}

}  // namespace

void save_model(const Model& model, const fs::path& dir) {
  model.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create model directory " + dir.string());
  BlobWriter w(dir);

  json layers = json::array();
  for (const auto& l : model.convs) {
    json j{{"name", l.name},
           {"type", "conv"},
           {"shape", shape_json(l.shape)},
           {"dtype", to_string(l.dtype)},
           {"storage", to_string(l.storage)},
           {"sparsity", l.sparsity()},
           {"quant", weight_quant_json(l.quant)},
           {"activation", act_json(l.act)}};
    json blobs;
    const std::string p = l.name + ".";
    blobs["bias"] = w.put(p + "bias.bin", make_f32_blob(l.bias, {l.bias.size()}));
    if (!l.mask.empty()) {
      std::vector<std::uint32_t> bits(l.mask.begin(), l.mask.end());
      blobs["mask"] = w.put(p + "mask.bin", make_packed_blob(bits, 1));
    }
    auto put_values = [&](std::span<const float> v, std::vector<std::uint64_t> dims, const std::string& file) {
      if (l.dtype == DType::f16) {
        std::vector<Half> h(v.size());
        narrow(v, h);
        return w.put(file, make_f16_blob(h, std::move(dims)));
      }
      return w.put(file, make_f32_blob(v, std::move(dims)));
    };
    if (l.storage == Storage::dense) {
      blobs["weights"] = put_values(l.weights.data(), dims_of(l.weights.extents()), p + "weights.bin");
    } else {
      blobs["colidx"] = w.put(p + "colidx.bin", make_u32_blob(l.csr->colidx()));
      blobs["rowptr"] = w.put(p + "rowptr.bin", make_u32_blob(l.csr->rowptr()));
      if (l.storage == Storage::csr) {
        blobs["values"] = put_values(l.csr->values(), {l.csr->values().size()}, p + "values.bin");
      } else {
        const auto& cb = *l.codebook;
        blobs["codes"] = w.put(p + "codes.bin", make_packed_blob(cb.assignments, cb.index_bits()));
        blobs["centroids"] = w.put(p + "centroids.bin", make_f16_blob(cb.centroids, {cb.centroids.size()}));
        j["codebook"] = {{"k", cb.k()},
                         {"requested_k", cb.requested_k},
                         {"zero_pinned", cb.zero_pinned},
                         {"index_bits", cb.index_bits()},
                         {"final_sse", cb.final_sse},
                         {"sse_history", cb.sse_history}};
      }
      j["sparse_level"] = l.csr->sparse_level();
    }
    j["blobs"] = blobs;
    layers.push_back(std::move(j));
  }

  json classifier{{"features", model.features()},
                  {"classes", model.classes},
                  {"quant", weight_quant_json(model.dense_quant)},
                  {"blobs",
                   {{"weights", w.put("classifier.weights.bin",
                                      make_f32_blob(model.dense_w, {model.classes, model.features()}))},
                    {"bias", w.put("classifier.bias.bin", make_f32_blob(model.dense_b, {model.classes}))}}}};

  json manifest{{"format", "dsconv-model"},
                {"format_version", kModelFormatVersion},
                {"endianness", "little"},
                {"input", {{"channels", model.in_channels}, {"height", model.height}, {"width", model.width}}},
                {"layers", layers},
                {"classifier", classifier},
                {"provenance", model.provenance}};
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Model load_model(const fs::path& dir) {
  const fs::path mp = dir / "manifest.json";
  if (!fs::exists(mp)) throw IoError("no manifest.json in " + dir.string());
  json man;
  {
    const auto bytes = read_file(mp);
    try {
      man = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw FormatError(std::string("manifest.json: ") + e.what());
    }
  }
  Model m;
  try {
    if (man.value("format", std::string{}) != "dsconv-model") throw FormatError("manifest.json: not a dsconv model");
    const int version = man.at("format_version");
    if (version != kModelFormatVersion)
      throw VersionError("manifest.json: format_version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(kModelFormatVersion) + ")");
    const auto& in = man.at("input");
    m.in_channels = in.at("channels");
    m.height = in.at("height");
    m.width = in.at("width");
    for (const auto& j : man.at("layers")) {
      ModelConvLayer l;
      l.name = j.at("name");
      const std::string what = "layer " + l.name;
      if (j.at("type") != "conv") throw FormatError(what + ": unknown layer type");
      l.shape = shape_from(j.at("shape"));
      l.dtype = parse_dtype(j.at("dtype").get<std::string>());
      if (l.dtype == DType::f64) throw FormatError(what + ": f64 storage is not supported");
      l.storage = parse_storage(j.at("storage").get<std::string>());
      l.quant = weight_quant_from(j.at("quant"));
      l.act = act_from(j.at("activation"));
      try {
        output_shape(l.shape);
      } catch (const ShapeError& e) {
        throw FormatError(what + ": " + e.what());
      }
      const auto& blobs = j.at("blobs");
      l.bias = blob_f32(get_blob(dir, blobs.at("bias"), what + " bias"), what + " bias");
      check_count(l.bias, l.shape.out_channels, what + " bias");
      if (blobs.contains("mask")) {
        const auto bits = blob_codes(get_blob(dir, blobs.at("mask"), what + " mask"), what + " mask");
        check_count(bits, l.shape.weight_extents().size(), what + " mask");
        l.mask.assign(bits.begin(), bits.end());
      }
      auto get_values = [&](const char* key) {
        const auto b = get_blob(dir, blobs.at(key), what + " " + key);
        if (l.dtype == DType::f16) {
          const auto h = blob_f16(b, what + " " + key);
          std::vector<float> v(h.size());
          widen(h, v);
          return v;
        }
        return blob_f32(b, what + " " + key);
      };
      if (l.storage == Storage::dense) {
        auto v = get_values("weights");
        check_count(v, l.shape.weight_extents().size(), what + " weights");
        l.weights = Tensor4D<float>(l.shape.weight_extents(), std::move(v));
      } else {
        auto colidx = blob_u32(get_blob(dir, blobs.at("colidx"), what + " colidx"), what + " colidx");
        auto rowptr = blob_u32(get_blob(dir, blobs.at("rowptr"), what + " rowptr"), what + " rowptr");
        std::vector<float> values;
        if (l.storage == Storage::csr) {
          values = get_values("values");
        } else {
          Codebook cb;
          cb.centroids = blob_f16(get_blob(dir, blobs.at("centroids"), what + " centroids"), what + " centroids");
          cb.assignments = blob_codes(get_blob(dir, blobs.at("codes"), what + " codes"), what + " codes");
          const auto& cj = j.at("codebook");
          cb.requested_k = cj.at("requested_k");
          cb.zero_pinned = cj.at("zero_pinned");
          cb.final_sse = cj.at("final_sse");
          cb.sse_history = cj.at("sse_history").get<std::vector<double>>();
          if (cb.centroids.empty()) throw FormatError(what + ": empty centroid table");
          for (auto a : cb.assignments)
            if (a >= cb.k()) throw FormatError(what + ": codebook assignment " + std::to_string(a) + " >= k");
          values = cb.decode();
          for (auto& v : values) v = v == 0.0f ? 0.0f : v;
          l.codebook = std::move(cb);
        }
        try {
          l.csr = CsrKernel<float>(l.shape, std::move(values), std::move(colidx), std::move(rowptr));
        } catch (const FormatError& e) {
          throw FormatError(what + ": " + e.what());
        }
        l.weights = decompress(*l.csr);
      }
      m.convs.push_back(std::move(l));
    }
    const auto& cls = man.at("classifier");
    m.classes = cls.at("classes");
    m.dense_quant = weight_quant_from(cls.at("quant"));
    m.dense_w = blob_f32(get_blob(dir, cls.at("blobs").at("weights"), "classifier weights"), "classifier weights");
    m.dense_b = blob_f32(get_blob(dir, cls.at("blobs").at("bias"), "classifier bias"), "classifier bias");
    m.provenance = man.value("provenance", json::object());
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  try {
    m.validate();
  } catch (const InvariantError& e) {
    throw FormatError(std::string("model: ") + e.what());
  }
  return m;
}

void save_network_config(const NetworkConfig& config, const fs::path& file) {
  json j = to_json(config);
  j["format"] = "dsconv-network-config";
  j["format_version"] = kModelFormatVersion;
  const std::string text = j.dump(2) + "\n";
  write_file(file, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

NetworkConfig load_network_config(const fs::path& file) {
  const auto bytes = read_file(file);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
  if (j.value("format", std::string{}) != "dsconv-network-config")
    throw FormatError(file.string() + ": not a network config");
  if (j.value("format_version", 0) != kModelFormatVersion)
    throw VersionError(file.string() + ": unsupported format_version");
  return network_config_from_json(j);
}

void save_tensor(const Tensor4D<float>& x, const fs::path& file) {
  write_file(file, encode_blob(make_f32_blob(x.data(), dims_of(x.extents()))));
}

Tensor4D<float> load_tensor(const fs::path& file) {
  const auto b = decode_blob(read_file(file), file.string());
  if (b.dims.size() != 4) throw FormatError(file.string() + ": tensor files are 4-dimensional");
  return Tensor4D<float>(Extents{b.dims[0], b.dims[1], b.dims[2], b.dims[3]}, blob_f32(b, file.string()));
}

}  // namespace dsconv

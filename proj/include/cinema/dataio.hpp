#pragma once

// Preprocessing (resample, crop/pad, intensity normalization) and the CMRC
// on-disk container: "CMRC" magic, u32 version, u64 header length, UTF-8 JSON
// header describing named arrays, then contiguous little-endian payload.
// Also a minimal uncompressed NIfTI-1 reader.

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "cinema/tensor.hpp"

namespace cinema {

static_assert(std::endian::native == std::endian::little,
              "CMRC I/O assumes a little-endian host");

// segmentation label convention, shared across the whole pipeline
enum : uint8_t { kLabelBG = 0, kLabelRV = 1, kLabelMYO = 2, kLabelLV = 3 };
inline constexpr int64_t kNumLabels = 4;

// linear-interpolation percentile over a pre-sorted ascending vector
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
  require(!sorted.empty(), errc::invalid_argument, "percentile of empty set");
  require(p >= 0.0 && p <= 100.0, errc::invalid_argument, "percentile out of [0,100]");
  if (sorted.size() == 1) return sorted[0];
  double rank = p / 100.0 * double(sorted.size() - 1);
  size_t lo = size_t(rank);
  if (lo >= sorted.size() - 1) return sorted.back();
  double frac = rank - double(lo);
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

inline double percentile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  return percentile_sorted(values, p);
}

// ---- resample -------------------------------------------------------------------

namespace detail {
struct AxisMap {
  int64_t n_out = 0;
  std::vector<int64_t> i0, i1;  // bracketing input indices per output index
  std::vector<double> w1;       // weight of i1
  std::vector<int64_t> nn;      // nearest input index per output index
};

inline AxisMap axis_map(int64_t n_in, double sp_in, double sp_out, int axis) {
  AxisMap m;
  if (sp_in == sp_out) {
    m.n_out = n_in;
    for (int64_t i = 0; i < n_in; ++i) {
      m.i0.push_back(i);
      m.i1.push_back(i);
      m.w1.push_back(0.0);
      m.nn.push_back(i);
    }
    return m;
  }
  require(n_in >= 2, errc::invalid_argument,
          "resample: axis " + std::to_string(axis) + " has one sample but a spacing change");
  m.n_out = std::max<int64_t>(1, llround(double(n_in) * sp_in / sp_out));
  for (int64_t i = 0; i < m.n_out; ++i) {
    // half-pixel centers: output center i maps to input coordinate u
    double u = ((double(i) + 0.5) * sp_out) / sp_in - 0.5;
    double uc = std::clamp(u, 0.0, double(n_in - 1));
    int64_t lo = int64_t(uc);
    if (lo >= n_in - 1) lo = n_in - 2;
    m.i0.push_back(lo);
    m.i1.push_back(lo + 1);
    m.w1.push_back(std::clamp(uc - double(lo), 0.0, 1.0));
    m.nn.push_back(std::clamp<int64_t>(llround(uc), 0, n_in - 1));
  }
  return m;
}
}  // namespace detail

// linear interpolation (nearest=false) or nearest-neighbor (masks), rank 1..3
template <class T>
NdArray<T> resample(const NdArray<T>& img, const std::vector<double>& spacing_in,
                    const std::vector<double>& spacing_out, bool nearest = false) {
  int r = img.rank();
  require(r >= 1 && r <= 3, errc::invalid_argument, "resample: rank must be 1..3");
  require(int(spacing_in.size()) == r && int(spacing_out.size()) == r, errc::invalid_argument,
          "resample: spacing rank mismatch");
  for (int a = 0; a < r; ++a)
    require(spacing_in[size_t(a)] > 0 && spacing_out[size_t(a)] > 0, errc::invalid_argument,
            "resample: spacing must be positive");
  std::array<detail::AxisMap, 3> maps;
  std::vector<int64_t> oshape;
  for (int a = 0; a < r; ++a) {
    maps[size_t(a)] =
        detail::axis_map(img.shape[size_t(a)], spacing_in[size_t(a)], spacing_out[size_t(a)], a);
    oshape.push_back(maps[size_t(a)].n_out);
  }
  // pad to rank 3 with singleton axes for one generic loop
  std::vector<int64_t> ish = img.shape;
  while (int(ish.size()) < 3) {
    ish.push_back(1);
    detail::AxisMap one;
    one.n_out = 1;
    one.i0 = {0};
    one.i1 = {0};
    one.w1 = {0.0};
    one.nn = {0};
    maps[ish.size() - 1] = one;
  }
  int64_t N0 = maps[0].n_out, N1 = maps[1].n_out, N2 = maps[2].n_out;
  int64_t S1 = ish[1] * ish[2], S2 = ish[2];
  NdArray<T> out(oshape);
  int64_t o = 0;
  for (int64_t i = 0; i < N0; ++i)
    for (int64_t j = 0; j < N1; ++j)
      for (int64_t k = 0; k < N2; ++k, ++o) {
        if (nearest) {
          out.v[size_t(o)] =
              img.v[size_t(maps[0].nn[size_t(i)] * S1 + maps[1].nn[size_t(j)] * S2 +
                           maps[2].nn[size_t(k)])];
          continue;
        }
        double acc = 0;
        double wi[2] = {1.0 - maps[0].w1[size_t(i)], maps[0].w1[size_t(i)]};
        double wj[2] = {1.0 - maps[1].w1[size_t(j)], maps[1].w1[size_t(j)]};
        double wk[2] = {1.0 - maps[2].w1[size_t(k)], maps[2].w1[size_t(k)]};
        int64_t ii[2] = {maps[0].i0[size_t(i)], maps[0].i1[size_t(i)]};
        int64_t jj[2] = {maps[1].i0[size_t(j)], maps[1].i1[size_t(j)]};
        int64_t kk[2] = {maps[2].i0[size_t(k)], maps[2].i1[size_t(k)]};
        for (int a = 0; a < 2; ++a) {
          if (wi[a] == 0.0) continue;
          for (int b = 0; b < 2; ++b) {
            if (wj[b] == 0.0) continue;
            for (int c = 0; c < 2; ++c) {
              if (wk[c] == 0.0) continue;
              acc += wi[a] * wj[b] * wk[c] *
                     double(img.v[size_t(ii[a] * S1 + jj[b] * S2 + kk[c])]);
            }
          }
        }
        out.v[size_t(o)] = T(acc);
      }
  return out;
}

// ---- crop / pad -----------------------------------------------------------------

// centered; odd differences put the extra voxel on the high-index side
template <class T>
NdArray<T> crop_or_pad(const NdArray<T>& img, const std::vector<int64_t>& target, T pad_value = T{}) {
  int r = img.rank();
  require(int(target.size()) == r, errc::invalid_argument, "crop_or_pad: rank mismatch");
  for (int64_t t : target) require(t > 0, errc::invalid_argument, "crop_or_pad: target must be positive");
  // src start (crop offset) and dst start (pad offset) per axis
  std::vector<int64_t> src0(size_t(r), 0), dst0(size_t(r), 0), span(size_t(r), 0);
  for (int a = 0; a < r; ++a) {
    int64_t cur = img.shape[size_t(a)], tgt = target[size_t(a)];
    if (tgt >= cur) {
      dst0[size_t(a)] = (tgt - cur) / 2;
      span[size_t(a)] = cur;
    } else {
      src0[size_t(a)] = (cur - tgt) / 2;
      span[size_t(a)] = tgt;
    }
  }
  NdArray<T> out(target, pad_value);
  std::vector<int64_t> is = img.shape, ts = target, s0 = src0, d0 = dst0, sp = span;
  while (int(is.size()) < 3) {
    is.push_back(1);
    ts.push_back(1);
    s0.push_back(0);
    d0.push_back(0);
    sp.push_back(1);
  }
  int64_t iS1 = is[1] * is[2], oS1 = ts[1] * ts[2];
  for (int64_t i = 0; i < sp[0]; ++i)
    for (int64_t j = 0; j < sp[1]; ++j) {
      const T* srow = img.v.data() + (s0[0] + i) * iS1 + (s0[1] + j) * is[2] + s0[2];
      T* drow = out.v.data() + (d0[0] + i) * oS1 + (d0[1] + j) * ts[2] + d0[2];
      std::copy_n(srow, sp[2], drow);
    }
  return out;
}

// ---- intensity normalization -----------------------------------------------------

// clip to [p1, p99], affine map to [0,1]; constant images map to zeros
template <class T>
NdArray<T> normalize_intensity(const NdArray<T>& img) {
  require(img.size() > 0, errc::invalid_argument, "normalize_intensity: empty image");
  std::vector<double> vals(img.v.begin(), img.v.end());
  for (double x : vals)
    require(std::isfinite(x), errc::invalid_argument, "normalize_intensity: non-finite input");
  std::sort(vals.begin(), vals.end());
  double lo = percentile_sorted(vals, 1.0);
  double hi = percentile_sorted(vals, 99.0);
  NdArray<T> out(img.shape);
  if (hi <= lo) return out;
  double inv = 1.0 / (hi - lo);
  for (int64_t i = 0; i < img.size(); ++i) {
    double x = std::clamp(double(img.v[size_t(i)]), lo, hi);
    out.v[size_t(i)] = T((x - lo) * inv);
  }
  return out;
}

// ---- CRC32 (reflected, poly 0xEDB88320; crc32("123456789") == 0xCBF43926) --------

inline uint32_t crc32(const unsigned char* data, size_t n, uint32_t seed = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// ---- CMRC container ---------------------------------------------------------------

enum class CmrcDtype { f32, f64, u8, i64 };

inline const char* dtype_name(CmrcDtype d) {
  switch (d) {
    case CmrcDtype::f32: return "f32";
    case CmrcDtype::f64: return "f64";
    case CmrcDtype::u8: return "u8";
    case CmrcDtype::i64: return "i64";
  }
  fail(errc::invalid_argument, "bad dtype");
}

inline size_t dtype_size(CmrcDtype d) {
  switch (d) {
    case CmrcDtype::f32: return 4;
    case CmrcDtype::f64: return 8;
    case CmrcDtype::u8: return 1;
    case CmrcDtype::i64: return 8;
  }
  fail(errc::invalid_argument, "bad dtype");
}

inline CmrcDtype dtype_from_name(const std::string& s) {
  if (s == "f32") return CmrcDtype::f32;
  if (s == "f64") return CmrcDtype::f64;
  if (s == "u8") return CmrcDtype::u8;
  if (s == "i64") return CmrcDtype::i64;
  fail(errc::io, "cmrc: unknown dtype '" + s + "'");
}

struct CmrcArray {
  CmrcDtype dtype = CmrcDtype::f32;
  std::vector<int64_t> shape;
  std::vector<unsigned char> bytes;

  int64_t count() const { return NdArray<double>::count(shape); }
};

namespace detail {
template <class T> struct cmrc_dtype_of;
template <> struct cmrc_dtype_of<float> { static constexpr CmrcDtype value = CmrcDtype::f32; };
template <> struct cmrc_dtype_of<double> { static constexpr CmrcDtype value = CmrcDtype::f64; };
template <> struct cmrc_dtype_of<uint8_t> { static constexpr CmrcDtype value = CmrcDtype::u8; };
template <> struct cmrc_dtype_of<int64_t> { static constexpr CmrcDtype value = CmrcDtype::i64; };
}  // namespace detail

template <class T>
CmrcArray to_cmrc(const NdArray<T>& a) {
  CmrcArray c;
  c.dtype = detail::cmrc_dtype_of<T>::value;
  c.shape = a.shape;
  c.bytes.resize(size_t(a.size()) * sizeof(T));
  std::memcpy(c.bytes.data(), a.v.data(), c.bytes.size());
  return c;
}

template <class T>
NdArray<T> from_cmrc(const CmrcArray& c) {
  require(c.dtype == detail::cmrc_dtype_of<T>::value, errc::io, "cmrc: dtype mismatch on read");
  NdArray<T> a(c.shape);
  require(c.bytes.size() == size_t(a.size()) * sizeof(T), errc::io, "cmrc: byte size mismatch");
  std::memcpy(a.v.data(), c.bytes.data(), c.bytes.size());
  return a;
}

using CmrcMap = std::map<std::string, CmrcArray>;

inline constexpr uint32_t kCmrcVersion = 1;

inline void write_container(const CmrcMap& arrays, const std::filesystem::path& path) {
  nlohmann::json hdr;
  hdr["arrays"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, arr] : arrays) {
    require(size_t(arr.count()) * dtype_size(arr.dtype) == arr.bytes.size(), errc::invalid_argument,
            "cmrc: array '" + name + "' byte size does not match shape");
    nlohmann::json e;
    e["name"] = name;
    e["dtype"] = dtype_name(arr.dtype);
    e["shape"] = arr.shape;
    e["offset"] = offset;
    e["nbytes"] = arr.bytes.size();
    e["crc32"] = crc32(arr.bytes.data(), arr.bytes.size());
    hdr["arrays"].push_back(e);
    offset += arr.bytes.size();
  }
  std::string hjson = hdr.dump();
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(f.good(), errc::io, "cmrc: cannot open " + tmp.string() + " for writing");
    f.write("CMRC", 4);
    uint32_t ver = kCmrcVersion;
    f.write(reinterpret_cast<const char*>(&ver), 4);
    uint64_t hlen = hjson.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hjson.data(), std::streamsize(hjson.size()));
    for (const auto& [name, arr] : arrays)
      f.write(reinterpret_cast<const char*>(arr.bytes.data()), std::streamsize(arr.bytes.size()));
    f.flush();
    require(f.good(), errc::io, "cmrc: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CmrcMap read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), errc::io, "cmrc: cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  require(f.gcount() == 4 && std::memcmp(magic, "CMRC", 4) == 0, errc::io,
          "cmrc: magic mismatch in " + path.string());
  uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  require(f.gcount() == 4, errc::io, "cmrc: truncated header in " + path.string());
  require(ver == kCmrcVersion, errc::io,
          "cmrc: version mismatch (got " + std::to_string(ver) + ", expected " +
              std::to_string(kCmrcVersion) + ")");
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  require(f.gcount() == 8, errc::io, "cmrc: truncated header in " + path.string());
  std::string hjson(hlen, '\0');
  f.read(hjson.data(), std::streamsize(hlen));
  require(uint64_t(f.gcount()) == hlen, errc::io, "cmrc: truncated header JSON");
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(hjson);
  } catch (const std::exception& e) {
    fail(errc::io, std::string("cmrc: header parse error: ") + e.what());
  }
  std::vector<unsigned char> payload{std::istreambuf_iterator<char>(f),
                                     std::istreambuf_iterator<char>()};
  struct Ent {
    std::string name;
    CmrcDtype dtype;
    std::vector<int64_t> shape;
    uint64_t offset, nbytes;
    uint32_t crc;
  };
  std::vector<Ent> ents;
  for (const auto& e : hdr.at("arrays")) {
    Ent ent;
    ent.name = e.at("name").get<std::string>();
    ent.dtype = dtype_from_name(e.at("dtype").get<std::string>());
    ent.shape = e.at("shape").get<std::vector<int64_t>>();
    ent.offset = e.at("offset").get<uint64_t>();
    ent.nbytes = e.at("nbytes").get<uint64_t>();
    ent.crc = e.at("crc32").get<uint32_t>();
    require(ent.offset + ent.nbytes <= payload.size(), errc::io,
            "cmrc: truncated payload (array '" + ent.name + "' extends past end of file)");
    ents.push_back(std::move(ent));
  }
  std::vector<std::pair<uint64_t, uint64_t>> ranges;
  for (const auto& e : ents)
    if (e.nbytes > 0) ranges.emplace_back(e.offset, e.offset + e.nbytes);
  std::sort(ranges.begin(), ranges.end());
  for (size_t i = 1; i < ranges.size(); ++i)
    require(ranges[i].first >= ranges[i - 1].second, errc::io, "cmrc: offset overlap in header");
  CmrcMap out;
  for (auto& e : ents) {
    CmrcArray arr;
    arr.dtype = e.dtype;
    arr.shape = e.shape;
    require(size_t(arr.count()) * dtype_size(e.dtype) == e.nbytes, errc::io,
            "cmrc: array '" + e.name + "' shape/nbytes mismatch");
    arr.bytes.assign(payload.begin() + int64_t(e.offset),
                     payload.begin() + int64_t(e.offset + e.nbytes));
    uint32_t got = crc32(arr.bytes.data(), arr.bytes.size());
    require(got == e.crc, errc::io, "cmrc: checksum mismatch for array '" + e.name + "'");
    require(!out.count(e.name), errc::io, "cmrc: duplicate array name '" + e.name + "'");
    out.emplace(std::move(e.name), std::move(arr));
  }
  return out;
}

// ---- minimal NIfTI-1 reader --------------------------------------------------------
// Single-file uncompressed .nii, dtypes f32 and i16 only, spacing from pixdim.
// Everything else is an explicit error.

struct NiftiImage {
  NdArray<float> data;           // [t][z][y][x] with leading singleton dims dropped
  std::vector<double> spacing;   // matches data rank, slowest axis first
};

inline NiftiImage read_nifti(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), errc::io, "nifti: cannot open " + path.string());
  std::vector<unsigned char> raw{std::istreambuf_iterator<char>(f),
                                 std::istreambuf_iterator<char>()};
  require(raw.size() >= 2, errc::io, "nifti: file too small");
  require(!(raw[0] == 0x1f && raw[1] == 0x8b), errc::io,
          "nifti: compressed (.nii.gz) files are not supported");
  require(raw.size() >= 352, errc::io, "nifti: file smaller than a NIfTI-1 header");
  auto rd_i32 = [&](size_t off) { int32_t v; std::memcpy(&v, raw.data() + off, 4); return v; };
  auto rd_i16 = [&](size_t off) { int16_t v; std::memcpy(&v, raw.data() + off, 2); return v; };
  auto rd_f32 = [&](size_t off) { float v; std::memcpy(&v, raw.data() + off, 4); return v; };
  require(rd_i32(0) == 348, errc::io, "nifti: sizeof_hdr is not 348 (not a NIfTI-1 file)");
  require(std::memcmp(raw.data() + 344, "n+1\0", 4) == 0, errc::io,
          "nifti: only single-file 'n+1' magic is supported");
  int16_t ndim = rd_i16(40);
  require(ndim >= 1 && ndim <= 4, errc::io, "nifti: unsupported dimensionality " +
                                                std::to_string(ndim) + " (1..4 supported)");
  std::vector<int64_t> dims;       // x,y,z,t order as stored
  std::vector<double> spacings;
  for (int a = 1; a <= ndim; ++a) {
    int16_t d = rd_i16(40 + size_t(a) * 2);
    require(d > 0, errc::io, "nifti: non-positive dim");
    dims.push_back(d);
    float p = rd_f32(76 + size_t(a) * 4);
    spacings.push_back(p > 0 ? double(p) : 1.0);
  }
  int16_t datatype = rd_i16(70);
  require(datatype == 16 || datatype == 4, errc::io,
          "nifti: unsupported datatype " + std::to_string(datatype) + " (f32=16, i16=4 supported)");
  double vox_offset = double(rd_f32(108));
  require(vox_offset >= 352 && vox_offset <= double(raw.size()), errc::io,
          "nifti: bad vox_offset");
  float slope = rd_f32(112), inter = rd_f32(116);
  if (slope == 0.0f) { slope = 1.0f; inter = 0.0f; }
  int64_t n = 1;
  for (int64_t d : dims) n *= d;
  size_t esz = datatype == 16 ? 4 : 2;
  require(size_t(vox_offset) + size_t(n) * esz <= raw.size(), errc::io,
          "nifti: truncated voxel data");
  // stored x-fastest; our arrays are slowest-first, so reverse the axis order
  std::vector<int64_t> shape(dims.rbegin(), dims.rend());
  NiftiImage out;
  out.data = NdArray<float>(shape);
  out.spacing.assign(spacings.rbegin(), spacings.rend());
  const unsigned char* src = raw.data() + size_t(vox_offset);
  for (int64_t i = 0; i < n; ++i) {
    float v;
    if (datatype == 16) {
      std::memcpy(&v, src + size_t(i) * 4, 4);
    } else {
      int16_t s;
      std::memcpy(&s, src + size_t(i) * 2, 2);
      v = float(s);
    }
    out.data.v[size_t(i)] = v * slope + inter;
  }
  return out;
}

// ---- study container ---------------------------------------------------------------

struct Point2 {
  double y = 0, x = 0;  // mm in the image frame
};

// p1, p2: mitral annulus; apex: apical tip
struct LandmarkSet {
  Point2 p1, p2, apex;
};

inline constexpr std::array<const char*, 3> kLaxNames = {"lax_2c", "lax_3c", "lax_4c"};

struct CineStudy {
  NdArray<float> sax;                 // [T, Z, Y, X]
  std::array<NdArray<float>, 3> lax;  // 2C, 3C, 4C; each [T, Y, X]
  std::array<double, 3> spacing_sax{1, 1, 1};  // (z, y, x) mm
  std::array<double, 2> spacing_lax{1, 1};     // (y, x) mm

  // ground truth; empty when absent
  NdArray<uint8_t> gt_sax_masks;                 // [T, Z, Y, X]
  std::array<NdArray<uint8_t>, 3> gt_lax_masks;  // each [T, Y, X]
  std::array<std::vector<LandmarkSet>, 3> gt_landmarks;  // per LAX view, per phase
  std::map<std::string, double> gt_scalars;

  int64_t n_phases() const { return sax.rank() == 4 ? sax.shape[0] : 0; }

  void validate() const {
    require(sax.rank() == 4, errc::invalid_argument, "study: sax must be [T,Z,Y,X]");
    int64_t T = sax.shape[0];
    for (const auto& l : lax) {
      require(l.rank() == 3, errc::invalid_argument, "study: lax must be [T,Y,X]");
      require(l.shape[0] == T, errc::invalid_argument, "study: phase count mismatch across views");
    }
    for (double s : spacing_sax)
      require(s > 0, errc::invalid_argument, "study: non-positive sax spacing");
    for (double s : spacing_lax)
      require(s > 0, errc::invalid_argument, "study: non-positive lax spacing");
    for (float v : sax.v)
      require(std::isfinite(v), errc::invalid_argument, "study: non-finite sax intensity");
    for (const auto& l : lax)
      for (float v : l.v)
        require(std::isfinite(v), errc::invalid_argument, "study: non-finite lax intensity");
    if (!gt_sax_masks.v.empty())
      for (uint8_t m : gt_sax_masks.v)
        require(m <= 3, errc::invalid_argument, "study: mask label outside {0,1,2,3}");
    for (const auto& lm : gt_lax_masks)
      for (uint8_t m : lm.v)
        require(m <= 3, errc::invalid_argument, "study: mask label outside {0,1,2,3}");
  }
};

namespace detail {
inline NdArray<double> landmarks_to_array(const std::vector<LandmarkSet>& ls) {
  NdArray<double> a({int64_t(ls.size()), 3, 2});
  for (size_t t = 0; t < ls.size(); ++t) {
    const Point2 pts[3] = {ls[t].p1, ls[t].p2, ls[t].apex};
    for (int p = 0; p < 3; ++p) {
      a.at3(int64_t(t), p, 0) = pts[p].y;
      a.at3(int64_t(t), p, 1) = pts[p].x;
    }
  }
  return a;
}

inline std::vector<LandmarkSet> landmarks_from_array(const NdArray<double>& a) {
  require(a.rank() == 3 && a.shape[1] == 3 && a.shape[2] == 2, errc::io,
          "study: bad landmark array shape");
  std::vector<LandmarkSet> ls(size_t(a.shape[0]));
  for (int64_t t = 0; t < a.shape[0]; ++t) {
    ls[size_t(t)].p1 = {a.at3(t, 0, 0), a.at3(t, 0, 1)};
    ls[size_t(t)].p2 = {a.at3(t, 1, 0), a.at3(t, 1, 1)};
    ls[size_t(t)].apex = {a.at3(t, 2, 0), a.at3(t, 2, 1)};
  }
  return ls;
}
}  // namespace detail

inline void save_study(const CineStudy& s, const std::filesystem::path& path) {
  s.validate();
  CmrcMap m;
  m["sax"] = to_cmrc(s.sax);
  for (int v = 0; v < 3; ++v) m[kLaxNames[size_t(v)]] = to_cmrc(s.lax[size_t(v)]);
  NdArray<double> ssax({3});
  for (int i = 0; i < 3; ++i) ssax.v[size_t(i)] = s.spacing_sax[size_t(i)];
  m["spacing_sax"] = to_cmrc(ssax);
  NdArray<double> slax({2});
  for (int i = 0; i < 2; ++i) slax.v[size_t(i)] = s.spacing_lax[size_t(i)];
  m["spacing_lax"] = to_cmrc(slax);
  if (!s.gt_sax_masks.v.empty()) m["gt_sax_masks"] = to_cmrc(s.gt_sax_masks);
  for (int v = 0; v < 3; ++v)
    if (!s.gt_lax_masks[size_t(v)].v.empty())
      m[std::string("gt_masks_") + kLaxNames[size_t(v)]] = to_cmrc(s.gt_lax_masks[size_t(v)]);
  for (int v = 0; v < 3; ++v)
    if (!s.gt_landmarks[size_t(v)].empty())
      m[std::string("gt_landmarks_") + kLaxNames[size_t(v)]] =
          to_cmrc(detail::landmarks_to_array(s.gt_landmarks[size_t(v)]));
  for (const auto& [k, val] : s.gt_scalars) {
    NdArray<double> one({1});
    one.v[0] = val;
    m["scalars/" + k] = to_cmrc(one);
  }
  write_container(m, path);
}

inline CineStudy load_study(const std::filesystem::path& path) {
  CmrcMap m = read_container(path);
  auto need = [&](const std::string& k) -> const CmrcArray& {
    auto it = m.find(k);
    require(it != m.end(), errc::io, "study: missing array '" + k + "' in " + path.string());
    return it->second;
  };
  CineStudy s;
  s.sax = from_cmrc<float>(need("sax"));
  for (int v = 0; v < 3; ++v) s.lax[size_t(v)] = from_cmrc<float>(need(kLaxNames[size_t(v)]));
  NdArray<double> ssax = from_cmrc<double>(need("spacing_sax"));
  require(ssax.size() == 3, errc::io, "study: bad spacing_sax");
  for (int i = 0; i < 3; ++i) s.spacing_sax[size_t(i)] = ssax.v[size_t(i)];
  NdArray<double> slax = from_cmrc<double>(need("spacing_lax"));
  require(slax.size() == 2, errc::io, "study: bad spacing_lax");
  for (int i = 0; i < 2; ++i) s.spacing_lax[size_t(i)] = slax.v[size_t(i)];
  if (m.count("gt_sax_masks")) s.gt_sax_masks = from_cmrc<uint8_t>(m.at("gt_sax_masks"));
  for (int v = 0; v < 3; ++v) {
    std::string mk = std::string("gt_masks_") + kLaxNames[size_t(v)];
    if (m.count(mk)) s.gt_lax_masks[size_t(v)] = from_cmrc<uint8_t>(m.at(mk));
    std::string lk = std::string("gt_landmarks_") + kLaxNames[size_t(v)];
    if (m.count(lk))
      s.gt_landmarks[size_t(v)] = detail::landmarks_from_array(from_cmrc<double>(m.at(lk)));
  }
  for (const auto& [k, arr] : m)
    if (k.rfind("scalars/", 0) == 0) {
      NdArray<double> one = from_cmrc<double>(arr);
      require(one.size() == 1, errc::io, "study: bad scalar array");
      s.gt_scalars[k.substr(8)] = one.v[0];
    }
  s.validate();
  return s;
}

}  // namespace cinema

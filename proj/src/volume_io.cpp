#include "dualmod/volume_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>

#include "dualmod/error.hpp"

namespace dualmod {

namespace {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_nifti(const std::string& path) { return ends_with(path, ".nii") || ends_with(path, ".nii.gz"); }

struct GzCloser {
  void operator()(gzFile f) const { gzclose(f); }
};
using GzHandle = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

// gzread passes uncompressed files through unchanged, so every reader uses it.
std::vector<char> read_all(const std::string& path) {
  GzHandle f(gzopen(path.c_str(), "rb"));
  if (!f) throw DataError("cannot open " + path);
  std::vector<char> buf;
  char chunk[1 << 16];
  int n;
  while ((n = gzread(f.get(), chunk, sizeof chunk)) > 0) buf.insert(buf.end(), chunk, chunk + n);
  if (n < 0) throw DataError("read error in " + path);
  return buf;
}

void write_all(const std::string& path, const std::vector<char>& bytes, bool compress) {
  if (compress) {
    GzHandle f(gzopen(path.c_str(), "wb"));
    if (!f || gzwrite(f.get(), bytes.data(), static_cast<unsigned>(bytes.size())) != static_cast<int>(bytes.size()))
      throw Error("cannot write " + path);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + path);
}

template <typename V>
void put(std::vector<char>& buf, std::size_t offset, V value) {
  std::memcpy(buf.data() + offset, &value, sizeof value);
}

template <typename V>
V get(const std::vector<char>& buf, std::size_t offset, bool swap) {
  V value;
  std::memcpy(&value, buf.data() + offset, sizeof value);
  if (swap) {
    auto* p = reinterpret_cast<unsigned char*>(&value);
    std::reverse(p, p + sizeof value);
  }
  return value;
}

struct RawContents {
  Extent3 extent;
  int channels;
  std::vector<float> values;
};

void write_raw(const std::string& path, const Extent3& e, int channels, const std::vector<float>& values) {
  std::vector<char> buf(5 * sizeof(std::int32_t) + values.size() * sizeof(float));
  const std::int32_t header[5] = {kRawMagic, e.d, e.h, e.w, channels};
  std::memcpy(buf.data(), header, sizeof header);
  std::memcpy(buf.data() + sizeof header, values.data(), values.size() * sizeof(float));
  write_all(path, buf, false);
}

RawContents read_raw(const std::string& path) {
  const auto buf = read_all(path);
  if (buf.size() < 20) throw DataError(path + ": truncated raw header");
  std::int32_t header[5];
  std::memcpy(header, buf.data(), sizeof header);
  if (header[0] != kRawMagic) throw DataError(path + ": bad raw magic");
  RawContents r{{header[1], header[2], header[3]}, header[4], {}};
  if (r.extent.d < 1 || r.extent.h < 1 || r.extent.w < 1 || r.channels < 1)
    throw DataError(path + ": bad raw extents");
  if (buf.size() != sizeof header + r.extent.numel() * sizeof(float))
    throw DataError(path + ": payload size does not match header");
  r.values.resize(r.extent.numel());
  std::memcpy(r.values.data(), buf.data() + sizeof header, r.values.size() * sizeof(float));
  return r;
}

SegMask mask_from_values(const std::string& path, const Extent3& e, int classes, const std::vector<float>& values) {
  SegMask m(e, classes);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = values[i];
    if (!(v >= 0.0f) || v >= static_cast<float>(classes) || v != std::floor(v))
      throw DataError(path + ": label value " + std::to_string(v) + " is not a class index below " +
                      std::to_string(classes));
    m.labels[i] = static_cast<std::uint8_t>(v);
  }
  return m;
}

struct NiftiContents {
  Extent3 extent;
  Spacing spacing;
  std::vector<float> values;
};

NiftiContents read_nifti(const std::string& path) {
  const auto buf = read_all(path);
  if (buf.size() < 348) throw DataError(path + ": truncated NIfTI header");
  bool swap = false;
  if (get<std::int32_t>(buf, 0, false) != 348) {
    swap = true;
    if (get<std::int32_t>(buf, 0, true) != 348) throw DataError(path + ": not a NIfTI-1 file");
  }
  if (std::memcmp(buf.data() + 344, "n+1", 4) != 0) throw DataError(path + ": only single-file NIfTI-1 is supported");
  const int rank = get<std::int16_t>(buf, 40, swap);
  if (rank < 3 || rank > 7) throw DataError(path + ": unsupported dimensionality");
  for (int i = 4; i <= rank; ++i)
    if (get<std::int16_t>(buf, 40 + 2 * i, swap) > 1) throw DataError(path + ": only 3D volumes are supported");
  const int nx = get<std::int16_t>(buf, 42, swap), ny = get<std::int16_t>(buf, 44, swap),
            nz = get<std::int16_t>(buf, 46, swap);
  const int datatype = get<std::int16_t>(buf, 70, swap);
  auto pix = [&](int i) {
    const double v = std::fabs(get<float>(buf, 76 + 4 * i, swap));
    return v > 0.0 ? v : 1.0;
  };
  const auto offset = static_cast<std::size_t>(get<float>(buf, 108, swap));
  float slope = get<float>(buf, 112, swap);
  const float inter = get<float>(buf, 116, swap);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  NiftiContents r{{nz, ny, nx}, {pix(3), pix(2), pix(1)}, {}};
  if (nx < 1 || ny < 1 || nz < 1) throw DataError(path + ": bad NIfTI extents");
  const std::size_t n = r.extent.numel();
  std::size_t bytes = 0;
  switch (datatype) {
    case 2: case 256: bytes = 1; break;
    case 4: case 512: bytes = 2; break;
    case 8: case 16: case 768: bytes = 4; break;
    case 64: bytes = 8; break;
    default: throw DataError(path + ": unsupported NIfTI datatype " + std::to_string(datatype));
  }
  if (buf.size() < offset + n * bytes) throw DataError(path + ": truncated NIfTI payload");
  r.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = offset + i * bytes;
    double v = 0;
    switch (datatype) {
      case 2: v = get<std::uint8_t>(buf, at, false); break;
      case 256: v = get<std::int8_t>(buf, at, false); break;
      case 4: v = get<std::int16_t>(buf, at, swap); break;
      case 512: v = get<std::uint16_t>(buf, at, swap); break;
      case 8: v = get<std::int32_t>(buf, at, swap); break;
      case 768: v = get<std::uint32_t>(buf, at, swap); break;
      case 16: v = get<float>(buf, at, swap); break;
      case 64: v = get<double>(buf, at, swap); break;
    }
    r.values[i] = static_cast<float>(v * slope + inter);
  }
  return r;
}

}  // namespace

void write_raw_volume(const std::string& path, const Volume& v) { write_raw(path, v.extent, 1, v.voxels); }

void write_raw_mask(const std::string& path, const SegMask& m) {
  write_raw(path, m.extent, m.num_classes, std::vector<float>(m.labels.begin(), m.labels.end()));
}

Volume read_raw_volume(const std::string& path) {
  auto r = read_raw(path);
  if (r.channels != 1) throw DataError(path + ": expected an intensity volume (C = 1)");
  Volume v;
  v.extent = r.extent;
  v.voxels = std::move(r.values);
  return v;
}

SegMask read_raw_mask(const std::string& path) {
  auto r = read_raw(path);
  if (r.channels < 2) throw DataError(path + ": mask header must carry the class count");
  return mask_from_values(path, r.extent, r.channels, r.values);
}

Volume read_nifti_volume(const std::string& path) {
  auto r = read_nifti(path);
  Volume v;
  v.extent = r.extent;
  v.spacing = r.spacing;
  v.voxels = std::move(r.values);
  return v;
}

SegMask read_nifti_mask(const std::string& path, int num_classes) {
  auto r = read_nifti(path);
  return mask_from_values(path, r.extent, num_classes, r.values);
}

void write_nifti_volume(const std::string& path, const Volume& v) {
  std::vector<char> buf(352 + v.voxels.size() * sizeof(float), 0);
  put<std::int32_t>(buf, 0, 348);
  const std::int16_t dims[8] = {3, static_cast<std::int16_t>(v.extent.w), static_cast<std::int16_t>(v.extent.h),
                                static_cast<std::int16_t>(v.extent.d), 1, 1, 1, 1};
  std::memcpy(buf.data() + 40, dims, sizeof dims);
  put<std::int16_t>(buf, 70, 16);
  put<std::int16_t>(buf, 72, 32);
  const float pixdim[8] = {1.0f, static_cast<float>(v.spacing[2]), static_cast<float>(v.spacing[1]),
                           static_cast<float>(v.spacing[0]), 1.0f, 1.0f, 1.0f, 1.0f};
  std::memcpy(buf.data() + 76, pixdim, sizeof pixdim);
  put<float>(buf, 108, 352.0f);
  put<float>(buf, 112, 1.0f);
  buf[123] = 2;  // millimetres
  std::memcpy(buf.data() + 344, "n+1", 4);
  std::memcpy(buf.data() + 352, v.voxels.data(), v.voxels.size() * sizeof(float));
  write_all(path, buf, ends_with(path, ".gz"));
}

Volume read_volume(const std::string& path) {
  Volume v = is_nifti(path) ? read_nifti_volume(path) : read_raw_volume(path);
  v.validate();
  return v;
}

SegMask read_mask(const std::string& path, int num_classes) {
  if (is_nifti(path)) return read_nifti_mask(path, num_classes);
  SegMask m = read_raw_mask(path);
  if (m.num_classes != num_classes)
    throw DataError(path + ": mask declares " + std::to_string(m.num_classes) + " classes, expected " +
                    std::to_string(num_classes));
  return m;
}

}  // namespace dualmod

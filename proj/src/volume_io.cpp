#include "ncamorph/volume_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ncam {

namespace {

// NIfTI-1 header, 348 bytes.
#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope, scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration, toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t DT_UINT8 = 2;
constexpr std::int16_t DT_INT16 = 4;
constexpr std::int16_t DT_INT32 = 8;
constexpr std::int16_t DT_FLOAT32 = 16;
constexpr std::int16_t DT_FLOAT64 = 64;
constexpr std::int16_t NIFTI_INTENT_VECTOR = 1007;

template <typename T>
T bswap(T v) {
  auto bytes = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

void swap_header(Nifti1Header& h) {
  h.sizeof_hdr = bswap(h.sizeof_hdr);
  h.extents = bswap(h.extents);
  h.session_error = bswap(h.session_error);
  for (auto& v : h.dim) v = bswap(v);
  h.intent_p1 = bswap(h.intent_p1);
  h.intent_p2 = bswap(h.intent_p2);
  h.intent_p3 = bswap(h.intent_p3);
  h.intent_code = bswap(h.intent_code);
  h.datatype = bswap(h.datatype);
  h.bitpix = bswap(h.bitpix);
  h.slice_start = bswap(h.slice_start);
  for (auto& v : h.pixdim) v = bswap(v);
  h.vox_offset = bswap(h.vox_offset);
  h.scl_slope = bswap(h.scl_slope);
  h.scl_inter = bswap(h.scl_inter);
  h.slice_end = bswap(h.slice_end);
  h.cal_max = bswap(h.cal_max);
  h.cal_min = bswap(h.cal_min);
  h.slice_duration = bswap(h.slice_duration);
  h.toffset = bswap(h.toffset);
  h.glmax = bswap(h.glmax);
  h.glmin = bswap(h.glmin);
  h.qform_code = bswap(h.qform_code);
  h.sform_code = bswap(h.sform_code);
  h.quatern_b = bswap(h.quatern_b);
  h.quatern_c = bswap(h.quatern_c);
  h.quatern_d = bswap(h.quatern_d);
  h.qoffset_x = bswap(h.qoffset_x);
  h.qoffset_y = bswap(h.qoffset_y);
  h.qoffset_z = bswap(h.qoffset_z);
  for (auto& v : h.srow_x) v = bswap(v);
  for (auto& v : h.srow_y) v = bswap(v);
  for (auto& v : h.srow_z) v = bswap(v);
}

int dtype_bytes(std::int16_t dt) {
  switch (dt) {
    case DT_UINT8: return 1;
    case DT_INT16: return 2;
    case DT_INT32: return 4;
    case DT_FLOAT32: return 4;
    case DT_FLOAT64: return 8;
    default: return 0;
  }
}

std::array<double, 16> affine_from_header(const Nifti1Header& h) {
  std::array<double, 16> A = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  if (h.sform_code > 0) {
    for (int j = 0; j < 4; ++j) {
      A[0 * 4 + j] = h.srow_x[j];
      A[1 * 4 + j] = h.srow_y[j];
      A[2 * 4 + j] = h.srow_z[j];
    }
  } else if (h.qform_code > 0) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    double a2 = 1.0 - (b * b + c * c + d * d);
    const double a = a2 > 0 ? std::sqrt(a2) : 0.0;
    const double qfac = (h.pixdim[0] < 0.0f) ? -1.0 : 1.0;
    const double px = h.pixdim[1], py = h.pixdim[2], pz = h.pixdim[3];
    const double R[3][3] = {
        {a * a + b * b - c * c - d * d, 2 * (b * c - a * d),
         2 * (b * d + a * c)},
        {2 * (b * c + a * d), a * a + c * c - b * b - d * d,
         2 * (c * d - a * b)},
        {2 * (b * d - a * c), 2 * (c * d + a * b),
         a * a + d * d - b * b - c * c}};
    for (int i = 0; i < 3; ++i) {
      A[i * 4 + 0] = R[i][0] * px;
      A[i * 4 + 1] = R[i][1] * py;
      A[i * 4 + 2] = R[i][2] * pz * qfac;
    }
    A[0 * 4 + 3] = h.qoffset_x;
    A[1 * 4 + 3] = h.qoffset_y;
    A[2 * 4 + 3] = h.qoffset_z;
  } else {
    A[0] = h.pixdim[1];
    A[5] = h.pixdim[2];
    A[10] = h.pixdim[3];
  }
  return A;
}

void fill_header_common(Nifti1Header& h, Shape3 shape,
                        const std::array<float, 3>& spacing,
                        const std::array<double, 16>& affine,
                        std::int16_t dtype) {
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.datatype = dtype;
  h.bitpix = static_cast<std::int16_t>(8 * dtype_bytes(dtype));
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = spacing[0];
  h.pixdim[2] = spacing[1];
  h.pixdim[3] = spacing[2];
  h.pixdim[4] = h.pixdim[5] = h.pixdim[6] = h.pixdim[7] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.dim[1] = static_cast<std::int16_t>(shape.w);
  h.dim[2] = static_cast<std::int16_t>(shape.h);
  h.dim[3] = static_cast<std::int16_t>(shape.d);
  h.sform_code = 1;
  for (int j = 0; j < 4; ++j) {
    h.srow_x[j] = static_cast<float>(affine[0 * 4 + j]);
    h.srow_y[j] = static_cast<float>(affine[1 * 4 + j]);
    h.srow_z[j] = static_cast<float>(affine[2 * 4 + j]);
  }
  std::memcpy(h.magic, "n+1\0", 4);
}

void write_file(const std::string& path, const Nifti1Header& h,
                const void* payload, std::size_t payload_bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(&h), sizeof(h));
  const char pad[4] = {0, 0, 0, 0};  // extension flag
  f.write(pad, 4);
  f.write(static_cast<const char*>(payload),
          static_cast<std::streamsize>(payload_bytes));
  if (!f) throw std::runtime_error("write failed: " + path);
}

template <typename Raw>
void decode_payload(const std::vector<char>& raw, std::size_t count,
                    bool swapped, std::vector<float>& out) {
  out.resize(count);
  const Raw* p = reinterpret_cast<const Raw*>(raw.data());
  for (std::size_t i = 0; i < count; ++i) {
    Raw v;
    std::memcpy(&v, &p[i], sizeof(Raw));
    if (swapped && sizeof(Raw) > 1) v = bswap(v);
    out[i] = static_cast<float>(v);
  }
}

}  // namespace

NiftiImage read_nifti(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  Nifti1Header h;
  if (!f.read(reinterpret_cast<char*>(&h), sizeof(h)))
    throw std::runtime_error("nifti: file shorter than header: " + path);

  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    if (bswap(h.sizeof_hdr) == 348) {
      swapped = true;
      swap_header(h);
    } else {
      throw std::runtime_error("nifti: bad header size (not a NIfTI-1 file): " +
                               path);
    }
  }
  if (std::memcmp(h.magic, "n+1", 3) != 0 || h.magic[3] != '\0')
    throw std::runtime_error("nifti: bad magic (expect single-file n+1): " +
                             path);

  int channels = 1;
  if (h.dim[0] == 3) {
    channels = 1;
  } else if (h.dim[0] == 5 && h.dim[4] == 1 && h.dim[5] == 3) {
    channels = 3;  // displacement-vector volume
  } else {
    throw std::runtime_error("nifti: unsupported dimensionality dim[0]=" +
                             std::to_string(h.dim[0]) + ": " + path);
  }
  const int bytes = dtype_bytes(h.datatype);
  if (bytes == 0)
    throw std::runtime_error("nifti: unsupported datatype " +
                             std::to_string(h.datatype) + ": " + path);
  if (h.dim[1] < 1 || h.dim[2] < 1 || h.dim[3] < 1)
    throw std::runtime_error("nifti: non-positive dimensions: " + path);
  for (int i = 1; i <= 3; ++i)
    if (!(h.pixdim[i] > 0.0f))
      throw std::runtime_error("nifti: non-positive pixdim: " + path);

  NiftiImage img;
  img.channels = channels;
  img.shape = Shape3{h.dim[3], h.dim[2], h.dim[1]};
  img.spacing = {h.pixdim[1], h.pixdim[2], h.pixdim[3]};
  img.affine = affine_from_header(h);
  img.datatype = h.datatype;

  const std::size_t count = img.shape.voxels() * channels;
  const std::size_t offset = static_cast<std::size_t>(h.vox_offset);
  if (offset < 348)
    throw std::runtime_error("nifti: vox_offset below header size: " + path);
  f.seekg(static_cast<std::streamoff>(offset), std::ios::beg);
  std::vector<char> raw(count * bytes);
  if (!f.read(raw.data(), static_cast<std::streamsize>(raw.size())))
    throw std::runtime_error("nifti: truncated data section: " + path);

  switch (h.datatype) {
    case DT_UINT8: decode_payload<std::uint8_t>(raw, count, swapped, img.data); break;
    case DT_INT16: decode_payload<std::int16_t>(raw, count, swapped, img.data); break;
    case DT_INT32: decode_payload<std::int32_t>(raw, count, swapped, img.data); break;
    case DT_FLOAT32: decode_payload<float>(raw, count, swapped, img.data); break;
    case DT_FLOAT64: decode_payload<double>(raw, count, swapped, img.data); break;
    default: throw std::runtime_error("nifti: unsupported datatype");
  }
  // scl_slope/inter rescaling applies when slope is set and non-trivial
  if (h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f))
    for (float& v : img.data) v = v * h.scl_slope + h.scl_inter;
  return img;
}

Volume read_volume(const std::string& path) {
  NiftiImage img = read_nifti(path);
  if (img.channels != 1)
    throw std::runtime_error("read_volume: not a scalar volume: " + path);
  Volume v(img.shape);
  v.spacing = img.spacing;
  v.affine = img.affine;
  v.data = std::move(img.data);
  return v;
}

LabelMap read_labels(const std::string& path) {
  NiftiImage img = read_nifti(path);
  if (img.channels != 1)
    throw std::runtime_error("read_labels: not a scalar volume: " + path);
  LabelMap lm(img.shape, 0);
  std::int32_t max_label = 0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const float f = img.data[i];
    const std::int32_t l = static_cast<std::int32_t>(std::lround(f));
    if (l < 0 || std::abs(f - l) > 1e-4f)
      throw std::runtime_error("read_labels: non-integer or negative label: " +
                               path);
    lm.data[i] = l;
    max_label = std::max(max_label, l);
  }
  lm.num_labels = max_label + 1;
  return lm;
}

FlowField read_flow(const std::string& path) {
  NiftiImage img = read_nifti(path);
  if (img.channels != 3)
    throw std::runtime_error("read_flow: not a 3-component vector volume: " +
                             path);
  FlowField flow(img.shape);
  flow.data = std::move(img.data);
  return flow;
}

void write_nifti(const Volume& vol, const std::string& path) {
  Nifti1Header h;
  fill_header_common(h, vol.shape, vol.spacing, vol.affine, DT_FLOAT32);
  h.dim[0] = 3;
  h.dim[4] = h.dim[5] = h.dim[6] = h.dim[7] = 1;
  write_file(path, h, vol.data.data(), vol.data.size() * sizeof(float));
}

void write_nifti(const LabelMap& labels, const std::string& path,
                 const std::array<float, 3>& spacing) {
  std::array<double, 16> affine = {spacing[0], 0, 0, 0, 0, spacing[1], 0, 0,
                                   0, 0, spacing[2], 0, 0, 0, 0, 1};
  std::int32_t max_label = 0;
  for (const auto l : labels.data) max_label = std::max(max_label, l);
  const bool wide = max_label > 255;
  Nifti1Header h;
  fill_header_common(h, labels.shape, spacing, affine,
                     wide ? DT_INT16 : DT_UINT8);
  h.dim[0] = 3;
  h.dim[4] = h.dim[5] = h.dim[6] = h.dim[7] = 1;
  if (wide) {
    std::vector<std::int16_t> buf(labels.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i)
      buf[i] = static_cast<std::int16_t>(labels.data[i]);
    write_file(path, h, buf.data(), buf.size() * sizeof(std::int16_t));
  } else {
    std::vector<std::uint8_t> buf(labels.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i)
      buf[i] = static_cast<std::uint8_t>(labels.data[i]);
    write_file(path, h, buf.data(), buf.size());
  }
}

void write_nifti(const FlowField& flow, const std::string& path,
                 const std::array<float, 3>& spacing) {
  std::array<double, 16> affine = {spacing[0], 0, 0, 0, 0, spacing[1], 0, 0,
                                   0, 0, spacing[2], 0, 0, 0, 0, 1};
  Nifti1Header h;
  fill_header_common(h, flow.shape, spacing, affine, DT_FLOAT32);
  h.dim[0] = 5;
  h.dim[4] = 1;
  h.dim[5] = 3;
  h.dim[6] = h.dim[7] = 1;
  h.intent_code = NIFTI_INTENT_VECTOR;
  std::memcpy(h.intent_name, "displacement", 12);
  write_file(path, h, flow.data.data(), flow.data.size() * sizeof(float));
}

Volume normalize(const Volume& v) {
  float lo = v.data[0], hi = v.data[0];
  for (const float x : v.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (!(hi > lo))
    throw std::runtime_error("normalize: constant volume has no contrast");
  Volume out = v;
  const float inv = 1.0f / (hi - lo);
  for (float& x : out.data) x = (x - lo) * inv;
  return out;
}

PairDataset read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest: " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) -> std::string {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp.string() : (dir / fp).string();
  };
  PairDataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 4)
      throw std::runtime_error("manifest line " + std::to_string(lineno) +
                               ": expected 4 tab-separated columns");
    PairPaths pp;
    pp.fixed_img = resolve(cols[0]);
    if (cols[1] != "-") pp.fixed_seg = resolve(cols[1]);
    pp.moving_img = resolve(cols[2]);
    if (cols[3] != "-") pp.moving_seg = resolve(cols[3]);
    ds.pairs.push_back(std::move(pp));
  }
  return ds;
}

void write_manifest(const PairDataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open manifest for writing: " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  auto rel = [&](const std::string& p) -> std::string {
    std::error_code ec;
    auto r = std::filesystem::relative(p, dir, ec);
    return ec ? p : r.string();
  };
  for (const auto& pp : ds.pairs) {
    f << rel(pp.fixed_img) << '\t'
      << (pp.fixed_seg ? rel(*pp.fixed_seg) : std::string("-")) << '\t'
      << rel(pp.moving_img) << '\t'
      << (pp.moving_seg ? rel(*pp.moving_seg) : std::string("-")) << '\n';
  }
  if (!f) throw std::runtime_error("manifest write failed: " + path);
}

LoadedPair load_pair(const PairPaths& paths) {
  LoadedPair lp;
  lp.fixed = read_volume(paths.fixed_img).grid();
  lp.moving = read_volume(paths.moving_img).grid();
  if (!(lp.fixed.shape == lp.moving.shape))
    throw std::runtime_error("load_pair: fixed/moving shapes differ");
  if (paths.fixed_seg) lp.fixed_seg = read_labels(*paths.fixed_seg);
  if (paths.moving_seg) lp.moving_seg = read_labels(*paths.moving_seg);
  if (lp.fixed_seg && lp.moving_seg) {
    // one-hot paths need a shared label vocabulary
    const int L = std::max(lp.fixed_seg->num_labels, lp.moving_seg->num_labels);
    lp.fixed_seg->num_labels = L;
    lp.moving_seg->num_labels = L;
  }
  return lp;
}

}  // namespace ncam

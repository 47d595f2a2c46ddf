#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace zmesh {

// Axis convention used everywhere: Z is the slice axis (the anisotropic one,
// 3 mm by default), Y and X are in-plane (0.5 mm). Data is row-major with X
// fastest.

struct Dims3 {
  std::int64_t z = 0, y = 0, x = 0;

  std::int64_t voxels() const { return z * y * x; }
  bool operator==(const Dims3&) const = default;
};

struct Spacing3 {
  double z = 1.0, y = 1.0, x = 1.0;

  bool positive() const { return z > 0.0 && y > 0.0 && x > 0.0; }
  bool operator==(const Spacing3&) const = default;
};

enum class VolumeErrc {
  io_failure,
  malformed_header,
  invalid_dims,
  truncated_payload,
  payload_size_mismatch,
  non_finite_data,
  bad_label,
  empty_mask,
};

class volume_error : public std::runtime_error {
public:
  volume_error(VolumeErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  VolumeErrc code() const { return code_; }

private:
  VolumeErrc code_;
};

/// Multi-channel 3D voxel grid with physical spacing; float32 payload.
class Volume {
public:
  Volume() = default;

  Volume(std::int64_t channels, Dims3 dims, Spacing3 spacing, float fill = 0.0f)
      : channels_(channels), dims_(dims), spacing_(spacing) {
    if (channels <= 0 || dims.z <= 0 || dims.y <= 0 || dims.x <= 0) {
      throw volume_error(VolumeErrc::invalid_dims, "Volume: non-positive dims");
    }
    if (!spacing.positive()) {
      throw volume_error(VolumeErrc::invalid_dims, "Volume: non-positive spacing");
    }
    data_.assign(static_cast<std::size_t>(channels * dims.voxels()), fill);
  }

  std::int64_t channels() const { return channels_; }
  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  std::int64_t voxels() const { return dims_.voxels(); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& raw() { return data_; }
  const std::vector<float>& raw() const { return data_; }

  std::int64_t index(std::int64_t c, std::int64_t z, std::int64_t y,
                     std::int64_t x) const {
    return ((c * dims_.z + z) * dims_.y + y) * dims_.x + x;
  }

  float& at(std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return data_[index(c, z, y, x)];
  }
  float at(std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data_[index(c, z, y, x)];
  }

  float* channel(std::int64_t c) { return data_.data() + c * voxels(); }
  const float* channel(std::int64_t c) const { return data_.data() + c * voxels(); }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool operator==(const Volume& o) const {
    return channels_ == o.channels_ && dims_ == o.dims_ &&
           spacing_ == o.spacing_ && data_ == o.data_;
  }

private:
  std::int64_t channels_ = 0;
  Dims3 dims_;
  Spacing3 spacing_;
  std::vector<float> data_;
};

// Zonal labels: 0 = background, 1 = central gland, 2 = peripheral zone.
enum : std::uint8_t { kLabelBG = 0, kLabelCG = 1, kLabelPZ = 2 };

/// Per-voxel zonal label mask sharing the Volume grid conventions.
class ZonalMask {
public:
  ZonalMask() = default;

  ZonalMask(Dims3 dims, Spacing3 spacing, std::uint8_t fill = kLabelBG)
      : dims_(dims), spacing_(spacing) {
    if (dims.z <= 0 || dims.y <= 0 || dims.x <= 0 || !spacing.positive()) {
      throw volume_error(VolumeErrc::invalid_dims, "ZonalMask: bad geometry");
    }
    labels_.assign(static_cast<std::size_t>(dims.voxels()), fill);
  }

  static ZonalMask from_volume(const Volume& v) {
    if (v.channels() != 1) {
      throw volume_error(VolumeErrc::bad_label, "ZonalMask: expected 1 channel");
    }
    ZonalMask m(v.dims(), v.spacing());
    for (std::int64_t i = 0; i < v.voxels(); ++i) {
      const float f = v.data()[i];
      if (f != 0.0f && f != 1.0f && f != 2.0f) {
        throw volume_error(VolumeErrc::bad_label,
                           "ZonalMask: label not in {0,1,2}");
      }
      m.labels_[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(f);
    }
    return m;
  }

  Volume to_volume() const {
    Volume v(1, dims_, spacing_);
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      v.data()[i] = static_cast<float>(labels_[i]);
    }
    return v;
  }

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  std::int64_t voxels() const { return dims_.voxels(); }

  std::uint8_t* data() { return labels_.data(); }
  const std::uint8_t* data() const { return labels_.data(); }

  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return (z * dims_.y + y) * dims_.x + x;
  }

  std::uint8_t& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return labels_[index(z, y, x)];
  }
  std::uint8_t at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return labels_[index(z, y, x)];
  }

  bool operator==(const ZonalMask&) const = default;

private:
  Dims3 dims_;
  Spacing3 spacing_;
  std::vector<std::uint8_t> labels_;
};

/// One study: bpMRI image channels (T2W, DWI, ADC), the zonal mask, an
/// optional ground-truth lesion mask, and the patient-level label.
struct CaseRecord {
  std::string id;
  Volume image;                   // 3 channels
  ZonalMask zones;
  std::optional<Volume> lesions;  // 1 binary channel when annotated
  bool positive = false;
};

// ---------------------------------------------------------------------------
// File container: "ZVOL1 C Z Y X z_mm y_mm x_mm\n" + float32 LE payload.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_spacing(double s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", s);
  return buf;
}

}  // namespace detail

inline void save_volume(const Volume& v, const std::string& path) {
  if (v.empty()) {
    throw volume_error(VolumeErrc::invalid_dims, "save_volume: empty volume");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw volume_error(VolumeErrc::io_failure, "save_volume: cannot open " + path);
  }
  out << "ZVOL1 " << v.channels() << ' ' << v.dims().z << ' ' << v.dims().y
      << ' ' << v.dims().x << ' ' << detail::format_spacing(v.spacing().z) << ' '
      << detail::format_spacing(v.spacing().y) << ' '
      << detail::format_spacing(v.spacing().x) << '\n';
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!out) {
    throw volume_error(VolumeErrc::io_failure, "save_volume: write failed " + path);
  }
}

inline Volume load_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw volume_error(VolumeErrc::io_failure, "load_volume: cannot open " + path);
  }
  std::string header;
  if (!std::getline(in, header) || header.size() > 4096) {
    throw volume_error(VolumeErrc::malformed_header,
                       "load_volume: missing header line");
  }
  std::istringstream hs(header);
  std::string magic;
  std::int64_t c = 0;
  Dims3 d;
  Spacing3 s;
  hs >> magic >> c >> d.z >> d.y >> d.x >> s.z >> s.y >> s.x;
  std::string trailing;
  if (!hs || magic != "ZVOL1" || (hs >> trailing)) {
    throw volume_error(VolumeErrc::malformed_header,
                       "load_volume: bad header in " + path);
  }
  if (c <= 0 || d.z <= 0 || d.y <= 0 || d.x <= 0 || !s.positive()) {
    throw volume_error(VolumeErrc::invalid_dims,
                       "load_volume: non-positive dims/spacing in " + path);
  }
  Volume v(c, d, s);
  const std::streamsize want =
      static_cast<std::streamsize>(v.size() * sizeof(float));
  in.read(reinterpret_cast<char*>(v.data()), want);
  if (in.gcount() < want) {
    throw volume_error(VolumeErrc::truncated_payload,
                       "load_volume: payload shorter than header dims in " + path);
  }
  in.peek();
  if (!in.eof()) {
    throw volume_error(VolumeErrc::payload_size_mismatch,
                       "load_volume: payload longer than header dims in " + path);
  }
  if (!v.all_finite()) {
    throw volume_error(VolumeErrc::non_finite_data,
                       "load_volume: NaN/Inf payload in " + path);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

enum class Interp { trilinear, nearest };

/// Grid-origin resampling (output index i maps to input position
/// i * target_spacing / input_spacing per axis). Trilinear for images,
/// nearest for label volumes.
inline Volume resample(const Volume& v, Spacing3 target, Interp mode) {
  if (!target.positive()) {
    throw volume_error(VolumeErrc::invalid_dims, "resample: non-positive spacing");
  }
  if (target == v.spacing()) return v;  // exact identity, no interpolation

  const Dims3 in = v.dims();
  Dims3 out;
  out.z = std::max<std::int64_t>(1, std::llround(double(in.z) * v.spacing().z / target.z));
  out.y = std::max<std::int64_t>(1, std::llround(double(in.y) * v.spacing().y / target.y));
  out.x = std::max<std::int64_t>(1, std::llround(double(in.x) * v.spacing().x / target.x));

  const double rz = target.z / v.spacing().z;
  const double ry = target.y / v.spacing().y;
  const double rx = target.x / v.spacing().x;

  Volume r(v.channels(), out, target);
  for (std::int64_t c = 0; c < v.channels(); ++c) {
    const float* src = v.channel(c);
    float* dst = r.channel(c);
    for (std::int64_t z = 0; z < out.z; ++z) {
      const double pz = double(z) * rz;
      for (std::int64_t y = 0; y < out.y; ++y) {
        const double py = double(y) * ry;
        for (std::int64_t x = 0; x < out.x; ++x) {
          const double px = double(x) * rx;
          double value;
          if (mode == Interp::nearest) {
            const std::int64_t iz = std::clamp<std::int64_t>(std::llround(pz), 0, in.z - 1);
            const std::int64_t iy = std::clamp<std::int64_t>(std::llround(py), 0, in.y - 1);
            const std::int64_t ix = std::clamp<std::int64_t>(std::llround(px), 0, in.x - 1);
            value = src[(iz * in.y + iy) * in.x + ix];
          } else {
            const double cz = std::clamp(pz, 0.0, double(in.z - 1));
            const double cy = std::clamp(py, 0.0, double(in.y - 1));
            const double cx = std::clamp(px, 0.0, double(in.x - 1));
            const std::int64_t z0 = static_cast<std::int64_t>(std::floor(cz));
            const std::int64_t y0 = static_cast<std::int64_t>(std::floor(cy));
            const std::int64_t x0 = static_cast<std::int64_t>(std::floor(cx));
            const std::int64_t z1 = std::min(z0 + 1, in.z - 1);
            const std::int64_t y1 = std::min(y0 + 1, in.y - 1);
            const std::int64_t x1 = std::min(x0 + 1, in.x - 1);
            const double fz = cz - double(z0);
            const double fy = cy - double(y0);
            const double fx = cx - double(x0);
            auto sample = [&](std::int64_t iz, std::int64_t iy, std::int64_t ix) {
              return double(src[(iz * in.y + iy) * in.x + ix]);
            };
            const double c00 = sample(z0, y0, x0) * (1 - fx) + sample(z0, y0, x1) * fx;
            const double c01 = sample(z0, y1, x0) * (1 - fx) + sample(z0, y1, x1) * fx;
            const double c10 = sample(z1, y0, x0) * (1 - fx) + sample(z1, y0, x1) * fx;
            const double c11 = sample(z1, y1, x0) * (1 - fx) + sample(z1, y1, x1) * fx;
            const double c0 = c00 * (1 - fy) + c01 * fy;
            const double c1 = c10 * (1 - fy) + c11 * fy;
            value = c0 * (1 - fz) + c1 * fz;
          }
          dst[(z * out.y + y) * out.x + x] = static_cast<float>(value);
        }
      }
    }
  }
  return r;
}

inline ZonalMask resample(const ZonalMask& m, Spacing3 target) {
  return ZonalMask::from_volume(resample(m.to_volume(), target, Interp::nearest));
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

enum class NormMode { unit_range, zscore };

namespace detail {

/// Linear-interpolated percentile over a sorted sample, q in [0, 100].
inline double percentile_sorted(const std::vector<float>& sorted, double q) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double pos = q / 100.0 * double(n - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, n - 1);
  const double frac = pos - double(lo);
  return double(sorted[lo]) * (1.0 - frac) + double(sorted[hi]) * frac;
}

}  // namespace detail

/// Per-channel intensity normalization. unit_range clips at the given
/// percentiles and maps affinely onto [0,1]; zscore standardizes to mean 0,
/// std 1. Constant channels map to all-zeros in both modes.
inline Volume normalize(const Volume& v, NormMode mode,
                        std::pair<double, double> clip_percentiles = {0.5, 99.5}) {
  if (v.empty()) {
    throw volume_error(VolumeErrc::invalid_dims, "normalize: empty volume");
  }
  if (mode == NormMode::unit_range) {
    const auto [lo, hi] = clip_percentiles;
    if (lo < 0.0 || hi > 100.0 || lo >= hi) {
      throw std::invalid_argument("normalize: clip percentiles out of order");
    }
  }
  Volume r = v;
  const std::int64_t n = v.voxels();
  for (std::int64_t c = 0; c < v.channels(); ++c) {
    float* ch = r.channel(c);
    if (mode == NormMode::zscore) {
      double sum = 0.0;
      for (std::int64_t i = 0; i < n; ++i) sum += ch[i];
      const double mean = sum / double(n);
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double d = ch[i] - mean;
        ss += d * d;
      }
      const double sd = std::sqrt(ss / double(n));
      if (sd < 1e-12) {
        std::fill(ch, ch + n, 0.0f);
      } else {
        for (std::int64_t i = 0; i < n; ++i) {
          ch[i] = static_cast<float>((ch[i] - mean) / sd);
        }
      }
    } else {
      std::vector<float> sorted(ch, ch + n);
      std::sort(sorted.begin(), sorted.end());
      const double lo = detail::percentile_sorted(sorted, clip_percentiles.first);
      const double hi = detail::percentile_sorted(sorted, clip_percentiles.second);
      if (hi - lo < 1e-12) {
        std::fill(ch, ch + n, 0.0f);
      } else {
        const double scale = 1.0 / (hi - lo);
        for (std::int64_t i = 0; i < n; ++i) {
          const double clipped = std::clamp(double(ch[i]), lo, hi);
          ch[i] = static_cast<float>((clipped - lo) * scale);
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// One-hot encoding
// ---------------------------------------------------------------------------

/// Expands a zonal mask into 3 binary channels ordered (BG, CG, PZ).
inline Volume one_hot(const ZonalMask& m) {
  Volume v(3, m.dims(), m.spacing());
  const std::int64_t n = m.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    v.data()[m.data()[i] * n + i] = 1.0f;
  }
  return v;
}

/// Inverse of one_hot: per-voxel argmax over channels (first max on ties).
inline ZonalMask to_labels(const Volume& v) {
  if (v.channels() != 3) {
    throw volume_error(VolumeErrc::bad_label, "to_labels: expected 3 channels");
  }
  ZonalMask m(v.dims(), v.spacing());
  const std::int64_t n = v.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint8_t best = 0;
    float best_v = v.data()[i];
    for (std::uint8_t c = 1; c < 3; ++c) {
      const float x = v.data()[c * n + i];
      if (x > best_v) {
        best_v = x;
        best = c;
      }
    }
    m.data()[i] = best;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Cropping
// ---------------------------------------------------------------------------

struct CropBox {
  Dims3 lo;  // inclusive
  Dims3 hi;  // exclusive

  Dims3 extent() const { return {hi.z - lo.z, hi.y - lo.y, hi.x - lo.x}; }
};

inline Volume crop(const Volume& v, const CropBox& box) {
  const Dims3 e = box.extent();
  Volume r(v.channels(), e, v.spacing());
  for (std::int64_t c = 0; c < v.channels(); ++c) {
    for (std::int64_t z = 0; z < e.z; ++z) {
      for (std::int64_t y = 0; y < e.y; ++y) {
        const float* src = v.data() + v.index(c, box.lo.z + z, box.lo.y + y, box.lo.x);
        float* dst = &r.at(c, z, y, 0);
        std::copy(src, src + e.x, dst);
      }
    }
  }
  return r;
}

inline ZonalMask crop(const ZonalMask& m, const CropBox& box) {
  const Dims3 e = box.extent();
  ZonalMask r(e, m.spacing());
  for (std::int64_t z = 0; z < e.z; ++z) {
    for (std::int64_t y = 0; y < e.y; ++y) {
      const std::uint8_t* src = m.data() + m.index(box.lo.z + z, box.lo.y + y, box.lo.x);
      std::copy(src, src + e.x, &r.at(z, y, 0));
    }
  }
  return r;
}

/// Bounding box of the prostate (non-BG voxels) dilated by a physical margin
/// and clamped to the grid.
inline CropBox roi_box(const ZonalMask& zones, double margin_mm) {
  if (margin_mm < 0.0) throw std::invalid_argument("roi_box: negative margin");
  const Dims3 d = zones.dims();
  Dims3 lo{d.z, d.y, d.x}, hi{-1, -1, -1};
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        if (zones.at(z, y, x) != kLabelBG) {
          lo.z = std::min(lo.z, z); hi.z = std::max(hi.z, z);
          lo.y = std::min(lo.y, y); hi.y = std::max(hi.y, y);
          lo.x = std::min(lo.x, x); hi.x = std::max(hi.x, x);
        }
      }
    }
  }
  if (hi.z < 0) {
    throw volume_error(VolumeErrc::empty_mask, "roi_box: no non-background voxel");
  }
  const Dims3 dilation{std::llround(margin_mm / zones.spacing().z),
                       std::llround(margin_mm / zones.spacing().y),
                       std::llround(margin_mm / zones.spacing().x)};
  CropBox box;
  box.lo = {std::max<std::int64_t>(0, lo.z - dilation.z),
            std::max<std::int64_t>(0, lo.y - dilation.y),
            std::max<std::int64_t>(0, lo.x - dilation.x)};
  box.hi = {std::min(d.z, hi.z + dilation.z + 1),
            std::min(d.y, hi.y + dilation.y + 1),
            std::min(d.x, hi.x + dilation.x + 1)};
  return box;
}

/// Crops every constituent of the case to the prostate ROI box.
inline CaseRecord roi_crop(const CaseRecord& rec, double margin_mm = 25.0) {
  const CropBox box = roi_box(rec.zones, margin_mm);
  CaseRecord out;
  out.id = rec.id;
  out.positive = rec.positive;
  out.image = crop(rec.image, box);
  out.zones = crop(rec.zones, box);
  if (rec.lesions) out.lesions = crop(*rec.lesions, box);
  return out;
}

/// Symmetric crop/pad to exact target dims; offsets take the floor of the
/// half-difference on the low side.
inline Volume center_crop_or_pad(const Volume& v, Dims3 target, float pad_value) {
  if (target.z <= 0 || target.y <= 0 || target.x <= 0) {
    throw volume_error(VolumeErrc::invalid_dims, "center_crop_or_pad: bad target");
  }
  if (target == v.dims()) return v;
  const Dims3 in = v.dims();
  // source start (crop) and destination start (pad) per axis
  auto offsets = [](std::int64_t from, std::int64_t to) {
    std::int64_t src = 0, dst = 0;
    if (from > to) src = (from - to) / 2;
    else dst = (to - from) / 2;
    return std::pair{src, dst};
  };
  const auto [sz, dz] = offsets(in.z, target.z);
  const auto [sy, dy] = offsets(in.y, target.y);
  const auto [sx, dx] = offsets(in.x, target.x);
  const Dims3 span{std::min(in.z, target.z), std::min(in.y, target.y),
                   std::min(in.x, target.x)};
  Volume r(v.channels(), target, v.spacing(), pad_value);
  for (std::int64_t c = 0; c < v.channels(); ++c) {
    for (std::int64_t z = 0; z < span.z; ++z) {
      for (std::int64_t y = 0; y < span.y; ++y) {
        const float* src = v.data() + v.index(c, sz + z, sy + y, sx);
        std::copy(src, src + span.x, &r.at(c, dz + z, dy + y, dx));
      }
    }
  }
  return r;
}

inline ZonalMask center_crop_or_pad(const ZonalMask& m, Dims3 target,
                                    std::uint8_t pad_label = kLabelBG) {
  Volume v = m.to_volume();
  Volume r = center_crop_or_pad(v, target, static_cast<float>(pad_label));
  return ZonalMask::from_volume(r);
}

}  // namespace zmesh

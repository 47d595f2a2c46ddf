#pragma once

#include "zmesh/volume.hpp"

namespace zmesh {

struct PreprocessConfig {
  Spacing3 target_spacing{3.0, 0.5, 0.5};
  double roi_margin_mm = 25.0;
  // pad (never crop) up to multiples that satisfy the G=5 mesh, which also
  // covers every smaller grid
  Dims3 pad_multiple{4, 16, 16};
};

inline Dims3 round_up_to_multiple(Dims3 d, Dims3 multiple) {
  auto up = [](std::int64_t v, std::int64_t m) { return ((v + m - 1) / m) * m; };
  return {up(d.z, multiple.z), up(d.y, multiple.y), up(d.x, multiple.x)};
}

/// Resample to the working spacing (trilinear images, nearest labels), crop
/// to the dilated prostate ROI, then zero-pad to network-friendly dims.
inline CaseRecord preprocess_case(const CaseRecord& rec,
                                  const PreprocessConfig& cfg = {}) {
  CaseRecord out;
  out.id = rec.id;
  out.positive = rec.positive;
  out.image = resample(rec.image, cfg.target_spacing, Interp::trilinear);
  out.zones = resample(rec.zones, cfg.target_spacing);
  if (rec.lesions) {
    out.lesions = resample(*rec.lesions, cfg.target_spacing, Interp::nearest);
  }
  out = roi_crop(out, cfg.roi_margin_mm);
  const Dims3 target = round_up_to_multiple(out.image.dims(), cfg.pad_multiple);
  if (!(target == out.image.dims())) {
    out.image = center_crop_or_pad(out.image, target, 0.0f);
    out.zones = center_crop_or_pad(out.zones, target, kLabelBG);
    if (out.lesions) out.lesions = center_crop_or_pad(*out.lesions, target, 0.0f);
  }
  return out;
}

}  // namespace zmesh

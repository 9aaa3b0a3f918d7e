#include "tnt/render.hpp"

#include <algorithm>
#include <cmath>

namespace tnt {
namespace {

void check_renderable(const Dataset& ds, int64_t sample) {
  if (ds.spec.channels != 1)
    throw usage_error(msg("rendering expects single-channel data, got ", ds.spec.channels));
  if (sample < 0 || sample >= ds.size())
    throw domain_error(msg("sample ", sample, " outside the dataset of ", ds.size()));
}

// Per-image affine map onto 0..255; a flat image renders black.
std::vector<int> grey_bytes(const Dataset& ds, int64_t sample) {
  const int64_t h = ds.spec.image_size, w = ds.spec.image_size;
  std::span<const double> px = ds.images.data().subspan(static_cast<size_t>(sample * h * w),
                                                        static_cast<size_t>(h * w));
  double lo = px[0], hi = px[0];
  for (double v : px) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<int> out(px.size(), 0);
  if (hi > lo)
    for (size_t i = 0; i < px.size(); ++i)
      out[i] = static_cast<int>((px[i] - lo) / (hi - lo) * 255.0 + 0.5);
  return out;
}

std::vector<bool> kept_lut(const DatasetSpec& spec, std::span<const int64_t> kept) {
  std::vector<bool> lut(static_cast<size_t>(spec.patch_tokens()), false);
  for (int64_t p : kept) {
    if (p < 0 || p >= spec.patch_tokens())
      throw domain_error(msg("patch ", p, " outside the ", spec.patch_tokens(), "-patch grid"));
    lut[static_cast<size_t>(p)] = true;
  }
  return lut;
}

}  // namespace

std::string render_pgm(const Dataset& ds, int64_t sample, std::span<const int64_t> kept) {
  check_renderable(ds, sample);
  const int64_t size = ds.spec.image_size, ps = ds.spec.patch_size;
  const int64_t pps = ds.spec.patches_per_side();
  std::vector<int> grey = grey_bytes(ds, sample);
  std::vector<bool> keep = kept_lut(ds.spec, kept);

  std::string out = msg("P5\n", size, " ", size, "\n255\n");
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      int g = grey[static_cast<size_t>(y * size + x)];
      if (!keep[static_cast<size_t>((y / ps) * pps + (x / ps))]) g /= 4;
      out.push_back(static_cast<char>(static_cast<unsigned char>(g)));
    }
  return out;
}

std::string render_svg(const Dataset& ds, int64_t sample, const KeepEvent& event) {
  check_renderable(ds, sample);
  const int64_t size = ds.spec.image_size, ps = ds.spec.patch_size;
  const int64_t pps = ds.spec.patches_per_side();
  const int64_t scale = 8;  // display pixels per image pixel
  std::vector<int> grey = grey_bytes(ds, sample);
  std::vector<bool> keep = kept_lut(ds.spec, event.kept);
  std::vector<bool> merged(static_cast<size_t>(ds.spec.patch_tokens()), false);
  for (const Removal& r : event.removed)
    if (r.kind == RemovalKind::merged && r.token >= 0 && r.token < ds.spec.patch_tokens())
      merged[static_cast<size_t>(r.token)] = true;

  std::string out = msg("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"", size * scale,
                        "\" height=\"", size * scale, "\" viewBox=\"0 0 ", size * scale, " ",
                        size * scale, "\">\n");
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      const int g = grey[static_cast<size_t>(y * size + x)];
      out += msg("<rect x=\"", x * scale, "\" y=\"", y * scale, "\" width=\"", scale,
                 "\" height=\"", scale, "\" fill=\"rgb(", g, ",", g, ",", g, ")\"/>\n");
    }
  for (int64_t p = 0; p < ds.spec.patch_tokens(); ++p) {
    if (keep[static_cast<size_t>(p)]) continue;
    const int64_t px = (p % pps) * ps * scale, py = (p / pps) * ps * scale;
    const int64_t side = ps * scale;
    out += msg("<rect x=\"", px, "\" y=\"", py, "\" width=\"", side, "\" height=\"", side,
               "\" fill=\"black\" fill-opacity=\"0.6\"/>\n");
    if (merged[static_cast<size_t>(p)])
      out += msg("<line x1=\"", px, "\" y1=\"", py, "\" x2=\"", px + side, "\" y2=\"", py + side,
                 "\" stroke=\"white\" stroke-width=\"2\"/>\n");
  }
  out += "</svg>\n";
  return out;
}

}  // namespace tnt

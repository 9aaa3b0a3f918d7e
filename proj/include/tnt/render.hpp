#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tnt/data.hpp"
#include "tnt/pruning.hpp"

namespace tnt {

// Binary P5 rendering of one dataset image with a keep set overlaid: pixels
// normalize per image to the full grey range, and every patch outside `kept`
// drops to a quarter of its brightness. Byte-stable by construction, which is
// what the golden tests compare. Single-channel data only.
std::string render_pgm(const Dataset& ds, int64_t sample, std::span<const int64_t> kept);

// The same view as markup: the image as grey rects plus a translucent overlay
// on pruned patches, hatched when the token was merged rather than dropped.
std::string render_svg(const Dataset& ds, int64_t sample, const KeepEvent& event);

}  // namespace tnt

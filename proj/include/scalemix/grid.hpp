#pragma once
// Grid geometry: cell-centered lat/lon coordinates for the global and fine
// grids, and the token-level alignment between the regional window and the
// global token lattice.

#include <cstdint>
#include <vector>

#include "scalemix/common.hpp"
#include "scalemix/config.hpp"

namespace scalemix {

// Cell-centered equiangular grid covering the full sphere. Row 0 is the
// northernmost band; latitudes stay strictly inside (-90, 90).
struct GridGeom {
  int64_t H = 0, W = 0;

  double lat(int64_t i) const { return 90.0 - (i + 0.5) * (180.0 / H); }
  double lon(int64_t j) const { return -180.0 + (j + 0.5) * (360.0 / W); }

  static GridGeom global_from_config(const ModelConfig& mc) {
    return GridGeom{mc.H, mc.W};
  }
  static GridGeom fine_from_config(const ModelConfig& mc) {
    return GridGeom{mc.H * mc.fine_scale, mc.W * mc.fine_scale};
  }
};

// Token-level alignment between the regional window and the global token
// lattice. One regional patch (p fine cells) covers exactly one global patch
// (P coarse cells) because p = fine_scale * P, so each regional token sits on
// top of a unique global token.
struct RegionGeom {
  int64_t global_tokens_h = 0, global_tokens_w = 0;
  int64_t region_tokens_h = 0, region_tokens_w = 0;
  int64_t token_off_y = 0, token_off_x = 0;

  int64_t n() const { return region_tokens_h * region_tokens_w; }

  // Row-major indices of the global tokens the regional window overlaps,
  // ordered the same way as regional tokens.
  std::vector<int64_t> aligned_global_tokens() const {
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(n()));
    for (int64_t ty = 0; ty < region_tokens_h; ++ty)
      for (int64_t tx = 0; tx < region_tokens_w; ++tx)
        out.push_back((token_off_y + ty) * global_tokens_w + token_off_x + tx);
    return out;
  }

  static RegionGeom from_config(const ModelConfig& mc) {
    auto fail = [](const std::string& msg) { throw GeometryError(msg); };
    if (mc.p != mc.fine_scale * mc.P)
      fail("regional patch p must equal fine_scale * P");
    if (mc.H % mc.P != 0 || mc.W % mc.P != 0)
      fail("global patch P must divide H and W");
    if (mc.region_h % mc.p != 0 || mc.region_w % mc.p != 0)
      fail("regional patch p must divide the region extents");
    if (mc.region_off_y < 0 || mc.region_off_x < 0 ||
        mc.region_off_y % mc.p != 0 || mc.region_off_x % mc.p != 0)
      fail("region offset must be a nonnegative multiple of p so regional "
           "tokens align with global tokens");
    if (mc.region_off_y + mc.region_h > mc.H * mc.fine_scale ||
        mc.region_off_x + mc.region_w > mc.W * mc.fine_scale)
      fail("region window extends past the fine grid");
    RegionGeom rg;
    rg.global_tokens_h = mc.H / mc.P;
    rg.global_tokens_w = mc.W / mc.P;
    rg.region_tokens_h = mc.region_h / mc.p;
    rg.region_tokens_w = mc.region_w / mc.p;
    rg.token_off_y = mc.region_off_y / mc.p;
    rg.token_off_x = mc.region_off_x / mc.p;
    return rg;
  }
};

}  // namespace scalemix

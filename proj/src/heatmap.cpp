#include "posegraph/heatmap.hpp"

#include <algorithm>
#include <cmath>

namespace posegraph {

int HeatMapGeometry::nearest_cell(double image_coord, int extent) const {
  const int c = static_cast<int>(std::lround(to_cell(image_coord)));
  return std::clamp(c, 0, extent - 1);
}

Tensor render_gaussian(const HeatMapGeometry& g, double u, double v, double sigma) {
  if (!(sigma > 0.0)) throw Error("render_gaussian: sigma must be positive");
  const int r0 = g.nearest_cell(v, g.height);
  const int c0 = g.nearest_cell(u, g.width);
  Tensor map(1, g.height, g.width);
  const double denom = 2.0 * sigma * sigma;
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      const double d2 = static_cast<double>((r - r0) * (r - r0) + (c - c0) * (c - c0));
      map.at(0, r, c) = std::exp(-d2 / denom);
    }
  }
  return map;
}

}  // namespace posegraph

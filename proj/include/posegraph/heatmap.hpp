#pragma once

#include <vector>

#include "posegraph/tensor.hpp"

namespace posegraph {

/// Grid of heat-map cells; cell (r, c) covers image pixels
/// [stride*r, stride*(r+1)) x [stride*c, stride*(c+1)). Image coordinates put
/// pixel centers on integers, so the cell center is stride*c + (stride-1)/2.
struct HeatMapGeometry {
  int height = 0;
  int width = 0;
  int stride = 1;

  double cell_center(int cell) const { return stride * cell + (stride - 1) / 2.0; }
  double to_cell(double image_coord) const { return (image_coord - (stride - 1) / 2.0) / stride; }
  /// Nearest cell index, clamped into [0, extent).
  int nearest_cell(double image_coord, int extent) const;

  friend bool operator==(const HeatMapGeometry&, const HeatMapGeometry&) = default;
};

/// One channel per joint, plus the stride back to image coordinates.
struct HeatMapSet {
  Tensor maps;
  int stride = 1;

  HeatMapGeometry geometry() const { return {maps.height(), maps.width(), stride}; }
  int num_joints() const { return maps.channels(); }
};

/// Gaussian bump exp(-d^2 / (2 sigma^2)), sigma in cells, centered on the
/// cell nearest to the image-space point, so that cell holds exactly 1.
Tensor render_gaussian(const HeatMapGeometry& geometry, double u, double v, double sigma);

}  // namespace posegraph

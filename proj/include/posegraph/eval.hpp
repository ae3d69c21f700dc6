#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "posegraph/data.hpp"

namespace posegraph {

/// Predicted image-space location of every joint of one image.
struct Prediction {
  std::string image_id;
  std::vector<JointAnnotation> joints;  // `visible` is ignored
};

/// Detection rate per joint and radius. A joint is detected at radius r when
/// |pred - gt| / torso_height <= r; invisible ground-truth joints are left
/// out of both counts. `mean` pools every (image, joint) pair.
struct DetectionCurve {
  std::string model_tag;
  std::vector<double> radii;
  std::vector<std::string> joints;
  std::vector<std::vector<double>> rates;  // [joint][radius]
  std::vector<double> mean;                // [radius]

  double rate(const std::string& joint, std::size_t radius_index) const;
  friend bool operator==(const DetectionCurve&, const DetectionCurve&) = default;
};

/// 0.00, 0.05, ..., 0.50
std::vector<double> default_radii();

/// Predictions are matched to annotations by image id; a prediction without
/// annotation (or the reverse) is an error.
DetectionCurve detection_rate(const std::vector<Prediction>& predictions,
                              const std::vector<Annotation>& ground_truth,
                              const JointSchema& schema, const std::vector<double>& radii,
                              const std::string& model_tag = "");

/// CSV with header "radius,joint,rate,model_tag". Rows per curve, radius
/// ascending, joints in schema order, then "mean" when there is more than
/// one joint.
void emit_curves(const std::vector<DetectionCurve>& curves, const std::filesystem::path& path);
std::string format_curves(const std::vector<DetectionCurve>& curves);
std::vector<DetectionCurve> read_curves(const std::filesystem::path& path);
std::vector<DetectionCurve> parse_curves(const std::string& text, const std::string& origin);

}  // namespace posegraph

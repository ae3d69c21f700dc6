#include "posegraph/eval.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "posegraph/config.hpp"
#include "posegraph/log.hpp"
#include "posegraph/serialize.hpp"

namespace posegraph {

double DetectionCurve::rate(const std::string& joint, std::size_t radius_index) const {
  if (radius_index >= radii.size()) throw Error("detection curve: radius index out of range");
  if (joint == "mean") return mean.at(radius_index);
  for (std::size_t j = 0; j < joints.size(); ++j) {
    if (joints[j] == joint) return rates[j][radius_index];
  }
  throw Error("detection curve has no joint '" + joint + "'");
}

std::vector<double> default_radii() {
  std::vector<double> r;
  for (int i = 0; i <= 10; ++i) r.push_back(i / 20.0);
  return r;
}

DetectionCurve detection_rate(const std::vector<Prediction>& predictions,
                              const std::vector<Annotation>& ground_truth,
                              const JointSchema& schema, const std::vector<double>& radii,
                              const std::string& model_tag) {
  std::map<std::string, const Annotation*> by_id;
  for (const auto& a : ground_truth) {
    if (!by_id.emplace(a.image_id, &a).second) {
      throw Error("duplicate ground-truth image id '" + a.image_id + "'");
    }
  }
  if (predictions.size() != ground_truth.size()) {
    throw Error("detection_rate: " + std::to_string(predictions.size()) + " predictions for " +
                std::to_string(ground_truth.size()) + " annotated images");
  }
  const std::size_t nj = schema.names.size();
  // Normalized error of every visible (image, joint) pair.
  std::vector<std::vector<double>> errors(nj);
  for (const auto& p : predictions) {
    auto it = by_id.find(p.image_id);
    if (it == by_id.end()) throw Error("prediction for unknown image id '" + p.image_id + "'");
    const Annotation& gt = *it->second;
    if (p.joints.size() != nj || gt.joints.size() != nj) {
      throw Error("image '" + p.image_id + "': joint count does not match the schema");
    }
    if (!(gt.torso.h > 0.0)) {
      throw Error("image '" + p.image_id + "': torso height must be positive");
    }
    for (std::size_t j = 0; j < nj; ++j) {
      if (!gt.joints[j].visible) continue;
      const double du = p.joints[j].u - gt.joints[j].u;
      const double dv = p.joints[j].v - gt.joints[j].v;
      errors[j].push_back(std::sqrt(du * du + dv * dv) / gt.torso.h);
    }
  }

  DetectionCurve c{model_tag, radii, schema.names, {}, {}};
  std::size_t pooled_total = 0;
  for (const auto& e : errors) pooled_total += e.size();
  for (std::size_t j = 0; j < nj; ++j) {
    if (errors[j].empty()) warn("joint '" + schema.names[j] + "' is never visible; rate set to 0");
    std::vector<double> row;
    for (double r : radii) {
      std::size_t hits = 0;
      for (double e : errors[j]) hits += e <= r;
      row.push_back(errors[j].empty() ? 0.0 : static_cast<double>(hits) / errors[j].size());
    }
    c.rates.push_back(std::move(row));
  }
  for (double r : radii) {
    std::size_t hits = 0;
    for (const auto& ej : errors) {
      for (double e : ej) hits += e <= r;
    }
    c.mean.push_back(pooled_total == 0 ? 0.0 : static_cast<double>(hits) / pooled_total);
  }
  return c;
}

std::string format_curves(const std::vector<DetectionCurve>& curves) {
  std::string out = "radius,joint,rate,model_tag\n";
  for (const auto& c : curves) {
    if (c.model_tag.find(',') != std::string::npos) {
      throw Error("model tag '" + c.model_tag + "' contains a comma");
    }
    for (std::size_t r = 0; r < c.radii.size(); ++r) {
      for (std::size_t j = 0; j < c.joints.size(); ++j) {
        out += format_double(c.radii[r]) + "," + c.joints[j] + "," + format_double(c.rates[j][r]) +
               "," + c.model_tag + "\n";
      }
      if (c.joints.size() > 1) {
        out += format_double(c.radii[r]) + ",mean," + format_double(c.mean[r]) + "," +
               c.model_tag + "\n";
      }
    }
  }
  return out;
}

void emit_curves(const std::vector<DetectionCurve>& curves, const std::filesystem::path& path) {
  write_text_file(path, format_curves(curves));
}

std::vector<DetectionCurve> parse_curves(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "radius,joint,rate,model_tag") {
    throw Error(origin + ": missing header 'radius,joint,rate,model_tag'");
  }
  std::vector<DetectionCurve> curves;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 4 && !(f.size() == 3 && line.back() == ',')) {
      throw Error(origin + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    const std::string tag = f.size() == 4 ? f[3] : "";
    ConfigMap tmp{{"radius", f[0]}, {"rate", f[2]}};
    const double radius = get_double(tmp, "radius");
    const double rate = get_double(tmp, "rate");
    if (curves.empty() || curves.back().model_tag != tag) curves.push_back({tag, {}, {}, {}, {}});
    DetectionCurve& c = curves.back();
    if (c.radii.empty() || c.radii.back() != radius) {
      c.radii.push_back(radius);
      for (auto& row : c.rates) row.push_back(0.0);
    }
    const std::size_t r = c.radii.size() - 1;
    if (f[1] == "mean") {
      c.mean.push_back(rate);
      continue;
    }
    std::size_t j = 0;
    while (j < c.joints.size() && c.joints[j] != f[1]) ++j;
    if (j == c.joints.size()) {
      if (r != 0) throw Error(origin + ":" + std::to_string(line_no) + ": unexpected joint " + f[1]);
      c.joints.push_back(f[1]);
      c.rates.emplace_back(1, 0.0);
    }
    c.rates[j][r] = rate;
  }
  for (auto& c : curves) {
    if (c.joints.size() == 1) c.mean = c.rates[0];
    if (c.mean.size() != c.radii.size()) throw Error(origin + ": incomplete mean rows");
  }
  return curves;
}

std::vector<DetectionCurve> read_curves(const std::filesystem::path& path) {
  return parse_curves(read_text_file(path), path.string());
}

}  // namespace posegraph

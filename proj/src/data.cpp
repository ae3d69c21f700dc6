#include "posegraph/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "posegraph/serialize.hpp"

namespace posegraph {

using nlohmann::json;

int JointSchema::index_of(const std::string& name) const {
  for (int i = 0; i < size(); ++i) {
    if (names[i] == name) return i;
  }
  return -1;
}

std::vector<int> JointSchema::flip_permutation() const {
  std::vector<int> perm(names.size());
  for (int i = 0; i < size(); ++i) perm[i] = i;
  for (const auto& [a, b] : symmetry) {
    const int ia = index_of(a);
    const int ib = index_of(b);
    if (ia < 0 || ib < 0) throw Error("symmetry pair names unknown joint: " + a + "/" + b);
    perm[ia] = ib;
    perm[ib] = ia;
  }
  return perm;
}

void JointSchema::validate() const {
  if (names.empty()) throw Error("joint schema must name at least one joint");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (!seen.insert(n).second) throw Error("duplicate joint name '" + n + "'");
  }
  flip_permutation();
}

JointSchema JointSchema::upper_body() {
  return {{"head", "lsho", "rsho", "lelb", "relb", "lwri", "rwri"},
          {{"lsho", "rsho"}, {"lelb", "relb"}, {"lwri", "rwri"}}};
}

void SkeletonSpec::validate() const {
  std::set<std::string> known{root};
  for (const auto& b : bones) {
    if (!known.count(b.parent)) {
      throw Error("bone '" + b.name + "' listed before its parent '" + b.parent + "'");
    }
    if (!known.insert(b.name).second) throw Error("duplicate bone '" + b.name + "'");
    if (b.length_min < 0.0 || b.length_max < b.length_min || b.angle_max < b.angle_min) {
      throw Error("bone '" + b.name + "' has an empty length or angle range");
    }
  }
  if (torso_joints.empty()) throw Error("skeleton needs at least one torso joint");
  for (const auto& t : torso_joints) {
    if (!known.count(t)) throw Error("torso joint '" + t + "' is not in the skeleton");
  }
}

SkeletonSpec SkeletonSpec::upper_body() {
  // The person faces the camera, so their left side appears at +u.
  return {"neck",
          {
              {"pelvis", "neck", 14, 18, -8, 8},
              {"head", "neck", 6, 8, 172, 188},
              {"lsho", "neck", 6, 8, 80, 100},
              {"rsho", "neck", 6, 8, -100, -80},
              {"lelb", "lsho", 9, 12, -10, 140},
              {"relb", "rsho", 9, 12, -140, 10},
              {"lwri", "lelb", 8, 11, -60, 170},
              {"rwri", "relb", 8, 11, -170, 60},
          },
          {"neck", "lsho", "rsho", "pelvis"}};
}

void SyntheticSceneConfig::validate() const {
  if (height <= 0 || width <= 0) throw Error("scene size must be positive");
  if (num_distractors < 0 || noise < 0.0 || limb_thickness <= 0.0 || intensity <= 0.0) {
    throw Error("invalid synthetic scene configuration");
  }
  skeleton.validate();
  schema.validate();
  for (const auto& n : schema.names) {
    const bool found = n == skeleton.root ||
                       std::any_of(skeleton.bones.begin(), skeleton.bones.end(),
                                   [&](const BoneSpec& b) { return b.name == n; });
    if (!found) throw Error("annotated joint '" + n + "' is not part of the skeleton");
  }
}

ConfigMap SyntheticSceneConfig::to_config() const {
  return {{"data.height", std::to_string(height)},
          {"data.width", std::to_string(width)},
          {"data.num_distractors", std::to_string(num_distractors)},
          {"data.noise", format_double(noise)},
          {"data.limb_thickness", format_double(limb_thickness)},
          {"data.joint_radius", format_double(joint_radius)},
          {"data.head_radius", format_double(head_radius)},
          {"data.intensity", format_double(intensity)},
          {"data.intensity_jitter", format_double(intensity_jitter)},
          {"data.min_separation", format_double(min_separation)},
          {"data.margin", std::to_string(margin)}};
}

SyntheticSceneConfig SyntheticSceneConfig::from_config(const ConfigMap& config) {
  SyntheticSceneConfig c;
  auto has = [&](const char* k) { return config.count(k) > 0; };
  if (has("data.height")) c.height = get_int(config, "data.height");
  if (has("data.width")) c.width = get_int(config, "data.width");
  if (has("data.num_distractors")) c.num_distractors = get_int(config, "data.num_distractors");
  if (has("data.noise")) c.noise = get_double(config, "data.noise");
  if (has("data.limb_thickness")) c.limb_thickness = get_double(config, "data.limb_thickness");
  if (has("data.joint_radius")) c.joint_radius = get_double(config, "data.joint_radius");
  if (has("data.head_radius")) c.head_radius = get_double(config, "data.head_radius");
  if (has("data.intensity")) c.intensity = get_double(config, "data.intensity");
  if (has("data.intensity_jitter")) c.intensity_jitter = get_double(config, "data.intensity_jitter");
  if (has("data.min_separation")) c.min_separation = get_double(config, "data.min_separation");
  if (has("data.margin")) c.margin = get_int(config, "data.margin");
  c.validate();
  return c;
}

namespace {

struct Figure {
  std::map<std::string, std::pair<double, double>> points;  // name -> (u, v)
  std::vector<std::pair<std::string, std::string>> limbs;
  double intensity = 1.0;
};

Figure sample_figure(const SyntheticSceneConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Figure f;
  f.points[cfg.skeleton.root] = {0.0, 0.0};
  for (const auto& b : cfg.skeleton.bones) {
    const double len = b.length_min + (b.length_max - b.length_min) * unit(rng);
    const double ang = (b.angle_min + (b.angle_max - b.angle_min) * unit(rng)) *
                       std::numbers::pi / 180.0;
    const auto [pu, pv] = f.points.at(b.parent);
    f.points[b.name] = {pu + len * std::sin(ang), pv + len * std::cos(ang)};
    f.limbs.emplace_back(b.parent, b.name);
  }
  f.intensity = cfg.intensity * (1.0 - cfg.intensity_jitter * unit(rng));
  return f;
}

TorsoBox torso_of(const Figure& f, const SkeletonSpec& skel) {
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  auto include = [&](const std::string& name) {
    const auto [u, v] = f.points.at(name);
    umin = std::min(umin, u);
    umax = std::max(umax, u);
    vmin = std::min(vmin, v);
    vmax = std::max(vmax, v);
  };
  for (const auto& name : skel.torso_joints) include(name);
  return {umin, vmin, umax - umin, vmax - vmin};
}

void shift_figure(Figure& f, double du, double dv) {
  for (auto& [name, p] : f.points) {
    p.first += du;
    p.second += dv;
  }
}

bool inside(const Figure& f, const SyntheticSceneConfig& cfg) {
  const double m = cfg.margin;
  for (const auto& [name, p] : f.points) {
    if (p.first < m || p.first > cfg.width - 1 - m || p.second < m ||
        p.second > cfg.height - 1 - m) {
      return false;
    }
  }
  return true;
}

double segment_distance(double pu, double pv, double au, double av, double bu, double bv) {
  const double du = bu - au, dv = bv - av;
  const double len2 = du * du + dv * dv;
  double t = len2 > 0.0 ? ((pu - au) * du + (pv - av) * dv) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qu = au + t * du - pu, qv = av + t * dv - pv;
  return std::sqrt(qu * qu + qv * qv);
}

void draw_segment(Tensor& img, double au, double av, double bu, double bv, double thickness,
                  double value) {
  const double reach = thickness / 2.0 + 1.0;
  const int u0 = std::max(0, static_cast<int>(std::floor(std::min(au, bu) - reach)));
  const int u1 = std::min(img.width() - 1, static_cast<int>(std::ceil(std::max(au, bu) + reach)));
  const int v0 = std::max(0, static_cast<int>(std::floor(std::min(av, bv) - reach)));
  const int v1 = std::min(img.height() - 1, static_cast<int>(std::ceil(std::max(av, bv) + reach)));
  for (int y = v0; y <= v1; ++y) {
    for (int x = u0; x <= u1; ++x) {
      const double d = segment_distance(x, y, au, av, bu, bv);
      const double cover = std::clamp(thickness / 2.0 + 0.5 - d, 0.0, 1.0);
      img.at(0, y, x) = std::max(img.at(0, y, x), value * cover);
    }
  }
}

void draw_figure(Tensor& img, const Figure& f, const SyntheticSceneConfig& cfg) {
  for (const auto& [a, b] : f.limbs) {
    const auto [au, av] = f.points.at(a);
    const auto [bu, bv] = f.points.at(b);
    draw_segment(img, au, av, bu, bv, cfg.limb_thickness, f.intensity);
  }
  for (const auto& name : cfg.schema.names) {
    const auto [u, v] = f.points.at(name);
    const double r = name == "head" ? cfg.head_radius : cfg.joint_radius;
    // A zero-length segment is a disc of diameter 2r.
    draw_segment(img, u, v, u, v, 2.0 * r, f.intensity);
  }
}

}  // namespace

Scene generate_scene(const SyntheticSceneConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::vector<Figure> figures;
  std::vector<std::pair<double, double>> centers;
  for (int k = 0; k <= cfg.num_distractors; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      Figure f = sample_figure(cfg, rng);
      double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
      for (const auto& [name, p] : f.points) {
        umin = std::min(umin, p.first);
        umax = std::max(umax, p.first);
        vmin = std::min(vmin, p.second);
        vmax = std::max(vmax, p.second);
      }
      const double lo_u = cfg.margin - umin, hi_u = cfg.width - 1 - cfg.margin - umax;
      const double lo_v = cfg.margin - vmin, hi_v = cfg.height - 1 - cfg.margin - vmax;
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const double ru = unit(rng), rv = unit(rng);
      if (hi_u < lo_u || hi_v < lo_v) continue;
      shift_figure(f, lo_u + (hi_u - lo_u) * ru, lo_v + (hi_v - lo_v) * rv);
      if (!inside(f, cfg)) continue;
      const TorsoBox t = torso_of(f, cfg.skeleton);
      const bool clear = std::all_of(centers.begin(), centers.end(), [&](const auto& c) {
        return std::hypot(c.first - t.center_u(), c.second - t.center_v()) >= cfg.min_separation;
      });
      if (!clear) continue;
      centers.emplace_back(t.center_u(), t.center_v());
      figures.push_back(std::move(f));
      placed = true;
    }
    if (!placed) {
      throw Error("could not place figure " + std::to_string(k) + " after 50 tries");
    }
  }

  Scene scene{Tensor(1, cfg.height, cfg.width), {}};
  for (const auto& f : figures) draw_figure(scene.image, f, cfg);
  if (cfg.noise > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise);
    for (double& v : scene.image.values()) v += noise(rng);
  }
  for (double& v : scene.image.values()) v = std::clamp(v, 0.0, 1.0);
  scene.image = quantize(scene.image);

  const Figure& labeled = figures.front();
  scene.annotation.person_id = 0;
  scene.annotation.torso = torso_of(labeled, cfg.skeleton);
  for (const auto& name : cfg.schema.names) {
    const auto [u, v] = labeled.points.at(name);
    scene.annotation.joints.push_back({u, v, true});
  }
  return scene;
}

Tensor render_torso_map(const Annotation& annotation, const HeatMapGeometry& geometry,
                        double sigma) {
  if (!(annotation.torso.h > 0.0)) throw Error("torso box height must be positive");
  return render_gaussian(geometry, annotation.torso.center_u(), annotation.torso.center_v(),
                         sigma);
}

// ---------------------------------------------------------------------------

Tensor quantize(const Tensor& image, int maxval) {
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double q = std::round(std::clamp(image[i], 0.0, 1.0) * maxval);
    out[i] = q / maxval;
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image, int maxval) {
  if (image.channels() != 1) throw Error("PGM images are single channel");
  if (maxval < 1 || maxval > 65535) throw Error("PGM maxval must be in [1, 65535]");
  std::ostringstream header;
  header << "P5\n" << image.width() << ' ' << image.height() << '\n' << maxval << '\n';
  std::string bytes = header.str();
  for (double v : image.values()) {
    const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * maxval));
    if (maxval > 255) bytes.push_back(static_cast<char>(q >> 8));
    bytes.push_back(static_cast<char>(q & 0xFFu));
  }
  write_text_file(path, bytes);
}

Tensor read_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_text_file(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& field) -> Error {
    return Error(path.string() + ": malformed PGM " + field);
  };
  auto next_token = [&](const char* field) {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw fail(field);
    return bytes.substr(start, pos - start);
  };
  auto next_int = [&](const char* field) {
    const std::string tok = next_token(field);
    try {
      std::size_t used = 0;
      const int v = std::stoi(tok, &used);
      if (used != tok.size()) throw fail(field);
      return v;
    } catch (const std::logic_error&) {
      throw fail(field);
    }
  };
  if (next_token("magic") != "P5") throw fail("magic (expected P5)");
  const int w = next_int("width");
  const int h = next_int("height");
  const int maxval = next_int("maxval");
  if (w <= 0 || h <= 0) throw fail("dimensions");
  if (maxval < 1 || maxval > 65535) throw fail("maxval");
  ++pos;  // single whitespace before the raster
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  if (bytes.size() - std::min(pos, bytes.size()) != static_cast<std::size_t>(w) * h * bpp) {
    throw fail("raster size");
  }
  Tensor img(1, h, w);
  for (std::size_t i = 0; i < img.size(); ++i) {
    unsigned q = static_cast<unsigned char>(bytes[pos + i * bpp]);
    if (bpp == 2) q = (q << 8) | static_cast<unsigned char>(bytes[pos + i * bpp + 1]);
    if (q > static_cast<unsigned>(maxval)) throw fail("sample above maxval");
    img[i] = static_cast<double>(q) / maxval;
  }
  return img;
}

namespace {

constexpr const char* kAnnotationFile = "annotations.jsonl";
constexpr const char* kImageDir = "images";

json annotation_to_json(const Annotation& a, const JointSchema& schema) {
  json joints = json::object();
  for (int j = 0; j < schema.size(); ++j) {
    const auto& ja = a.joints.at(j);
    joints[schema.names[j]] = json::array({ja.u, ja.v, ja.visible ? 1 : 0});
  }
  return json{{"image", a.image_id},
              {"person_id", a.person_id},
              {"joints", joints},
              {"torso_box", json::array({a.torso.u, a.torso.v, a.torso.w, a.torso.h})}};
}

Annotation annotation_from_json(const json& j, const JointSchema& schema,
                                const std::string& where) {
  auto field = [&](const char* name) -> const json& {
    if (!j.contains(name)) throw Error(where + ": missing field '" + name + "'");
    return j.at(name);
  };
  Annotation a;
  try {
    a.image_id = field("image").get<std::string>();
  } catch (const json::exception&) {
    throw Error(where + ": field 'image' must be a string");
  }
  const std::string ctx = where + " (image " + a.image_id + ")";
  try {
    a.person_id = j.value("person_id", 0);
    const json& joints = field("joints");
    for (const auto& name : schema.names) {
      if (!joints.contains(name)) throw Error(ctx + ": missing joint '" + name + "'");
      const json& v = joints.at(name);
      if (!v.is_array() || v.size() != 3) throw Error(ctx + ": joint '" + name + "' malformed");
      a.joints.push_back({v[0].get<double>(), v[1].get<double>(), v[2].get<int>() != 0});
    }
    const json& t = field("torso_box");
    if (!t.is_array() || t.size() != 4) throw Error(ctx + ": field 'torso_box' malformed");
    a.torso = {t[0].get<double>(), t[1].get<double>(), t[2].get<double>(), t[3].get<double>()};
  } catch (const json::exception& e) {
    throw Error(ctx + ": " + e.what());
  }
  if (!(a.torso.h > 0.0)) throw Error(ctx + ": field 'torso_box' needs positive height");
  return a;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, int maxval) {
  if (dataset.images.size() != dataset.annotations.size()) {
    throw Error("dataset has " + std::to_string(dataset.images.size()) + " images but " +
                std::to_string(dataset.annotations.size()) + " annotations");
  }
  dataset.schema.validate();
  std::filesystem::create_directories(dir / kImageDir);
  json header{{"format", "posegraph-annotations"},
              {"version", 1},
              {"joints", dataset.schema.names},
              {"symmetry", json::array()}};
  for (const auto& [a, b] : dataset.schema.symmetry) header["symmetry"].push_back({a, b});
  std::string text = header.dump() + "\n";
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Annotation& a = dataset.annotations[i];
    if (a.image_id.empty()) throw Error("annotation " + std::to_string(i) + " has no image id");
    write_pgm(dir / kImageDir / (a.image_id + ".pgm"), dataset.images[i], maxval);
    text += annotation_to_json(a, dataset.schema).dump() + "\n";
  }
  write_text_file(dir / kAnnotationFile, text);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto ann_path = dir / kAnnotationFile;
  const std::string text = read_text_file(ann_path);
  std::istringstream lines(text);
  std::string line;
  if (!std::getline(lines, line)) throw Error(ann_path.string() + ": missing header line");

  Dataset ds;
  try {
    const json header = json::parse(line);
    ds.schema.names = header.at("joints").get<std::vector<std::string>>();
    for (const auto& pair : header.at("symmetry")) {
      ds.schema.symmetry.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
    }
  } catch (const json::exception& e) {
    throw Error(ann_path.string() + ": malformed header line: " + e.what());
  }
  ds.schema.validate();

  std::map<std::string, std::size_t> seen;
  int line_no = 1;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = ann_path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(where + ": invalid JSON: " + e.what());
    }
    Annotation a = annotation_from_json(j, ds.schema, where);
    if (!seen.emplace(a.image_id, ds.annotations.size()).second) {
      throw Error(where + ": duplicate annotation for image " + a.image_id);
    }
    const auto img_path = dir / kImageDir / (a.image_id + ".pgm");
    if (!std::filesystem::exists(img_path)) {
      throw Error(where + ": image file missing for image " + a.image_id);
    }
    ds.images.push_back(read_pgm(img_path));
    ds.annotations.push_back(std::move(a));
  }

  if (std::filesystem::exists(dir / kImageDir)) {
    std::vector<std::string> stray;
    for (const auto& entry : std::filesystem::directory_iterator(dir / kImageDir)) {
      if (entry.path().extension() != ".pgm") continue;
      if (!seen.count(entry.path().stem().string())) stray.push_back(entry.path().filename().string());
    }
    if (!stray.empty()) {
      std::sort(stray.begin(), stray.end());
      throw Error(ann_path.string() + ": no annotation line for image " + stray.front());
    }
  }
  return ds;
}

Dataset generate_dataset(const SyntheticSceneConfig& config, int count, std::uint64_t seed) {
  if (count < 0) throw Error("scene count must be nonnegative");
  config.validate();
  Dataset ds;
  ds.schema = config.schema;
  const int digits = std::max(6, static_cast<int>(std::to_string(count).size()));
  for (int i = 0; i < count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    Scene scene = generate_scene(config, rng);
    std::string id = std::to_string(i);
    scene.annotation.image_id = std::string(digits - id.size(), '0') + id;
    ds.images.push_back(std::move(scene.image));
    ds.annotations.push_back(std::move(scene.annotation));
  }
  return ds;
}

}  // namespace posegraph

#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "posegraph/config.hpp"
#include "posegraph/heatmap.hpp"
#include "posegraph/tensor.hpp"

namespace posegraph {

struct JointAnnotation {
  double u = 0.0;
  double v = 0.0;
  bool visible = true;

  friend bool operator==(const JointAnnotation&, const JointAnnotation&) = default;
};

struct TorsoBox {
  double u = 0.0;
  double v = 0.0;
  double w = 0.0;
  double h = 0.0;

  double center_u() const { return u + 0.5 * w; }
  double center_v() const { return v + 0.5 * h; }
  friend bool operator==(const TorsoBox&, const TorsoBox&) = default;
};

/// Ground truth for the one labeled person in an image. Joint order follows
/// the dataset's JointSchema.
struct Annotation {
  std::string image_id;
  int person_id = 0;
  std::vector<JointAnnotation> joints;
  TorsoBox torso;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Joint names plus the left/right pairs swapped by a horizontal flip.
struct JointSchema {
  std::vector<std::string> names;
  std::vector<std::pair<std::string, std::string>> symmetry;

  int size() const { return static_cast<int>(names.size()); }
  int index_of(const std::string& name) const;
  /// flip_permutation()[j] is the joint that j becomes after mirroring.
  std::vector<int> flip_permutation() const;
  void validate() const;

  static JointSchema upper_body();

  friend bool operator==(const JointSchema&, const JointSchema&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic scenes

/// One segment of the kinematic tree. Angles are absolute, in degrees,
/// measured from the +v (downward) image axis toward +u.
struct BoneSpec {
  std::string name;
  std::string parent;
  double length_min = 0.0;
  double length_max = 0.0;
  double angle_min = 0.0;
  double angle_max = 0.0;
};

struct SkeletonSpec {
  std::string root;
  std::vector<BoneSpec> bones;  // parents listed before children
  /// Joints whose bounding box defines the torso box.
  std::vector<std::string> torso_joints;

  void validate() const;
  /// Neck-rooted upper body: head, shoulders, elbows, wrists (annotated) and
  /// a pelvis that closes the torso.
  static SkeletonSpec upper_body();
};

struct SyntheticSceneConfig {
  int height = 64;
  int width = 64;
  SkeletonSpec skeleton = SkeletonSpec::upper_body();
  JointSchema schema = JointSchema::upper_body();
  int num_distractors = 2;
  double noise = 0.05;
  double limb_thickness = 2.0;
  double joint_radius = 1.5;
  double head_radius = 3.0;
  double intensity = 1.0;
  double intensity_jitter = 0.2;
  /// Minimum distance between torso centers of any two figures.
  double min_separation = 14.0;
  /// Joints keep at least this many pixels from the border.
  int margin = 2;

  void validate() const;

  /// data.* keys for the scalar fields; the skeleton and schema stay at their
  /// upper-body defaults.
  ConfigMap to_config() const;
  static SyntheticSceneConfig from_config(const ConfigMap& config);
};

struct Dataset;

struct Scene {
  Tensor image;
  Annotation annotation;
};

/// Renders one labeled figure plus num_distractors unlabeled ones. The image is
/// clamped to [0, 1] and quantized to 16-bit levels so it survives PGM I/O
/// exactly. Throws if a figure cannot be placed in 50 tries.
Scene generate_scene(const SyntheticSceneConfig& config, std::mt19937_64& rng);

/// `count` scenes; scene i draws from its own generator seeded with
/// (seed, i), so any subset can be regenerated independently. Image ids are
/// the zero-padded index.
Dataset generate_dataset(const SyntheticSceneConfig& config, int count, std::uint64_t seed);

/// Gaussian bump at the torso-box center, in heat-map geometry.
Tensor render_torso_map(const Annotation& annotation, const HeatMapGeometry& geometry,
                        double sigma = 1.0);

// ---------------------------------------------------------------------------
// Dataset I/O: <dir>/images/<id>.pgm plus <dir>/annotations.jsonl, whose first
// line is a header carrying the joint schema.

struct Dataset {
  JointSchema schema;
  std::vector<Tensor> images;
  std::vector<Annotation> annotations;

  std::size_t size() const { return images.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

void write_pgm(const std::filesystem::path& path, const Tensor& image, int maxval = 65535);
/// Values scaled to [0, 1] by maxval.
Tensor read_pgm(const std::filesystem::path& path);
/// Rounds to the nearest k/maxval.
Tensor quantize(const Tensor& image, int maxval = 65535);

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, int maxval = 65535);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace posegraph

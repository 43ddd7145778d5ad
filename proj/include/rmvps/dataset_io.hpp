#pragma once

// On-disk rotated-capture datasets: a JSON manifest beside PNG/PFM images, masks and
// ground-truth normal maps, plus a generator that renders analytic scenes through the
// forward renderer.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rmvps/brdf.hpp"
#include "rmvps/image.hpp"
#include "rmvps/rig.hpp"
#include "rmvps/sdf_field.hpp"
#include "rmvps/volume_renderer.hpp"

namespace rmvps {

inline constexpr int kManifestSchemaVersion = 1;

struct Primitive {
  enum class Kind { sphere, box };
  Kind kind = Kind::sphere;
  double radius = 0.5;                     // sphere
  Vec3 half_extents = Vec3::Constant(0.3);  // box
  Vec3 center = Vec3::Zero();
  BrdfParams brdf;
};

struct SceneSpec {
  std::string name;
  std::vector<Primitive> primitives;
  ShEnvironment env = ShEnvironment::zero(1);

  void validate() const;
  std::shared_ptr<const SdfSource> field() const;
};

/// BRDF of the primitive with the smallest signed distance at each point.
class PrimitiveMaterial : public MaterialSource {
 public:
  explicit PrimitiveMaterial(const SceneSpec& scene);
  std::vector<BrdfParams> evaluate(const Matrix& points) const override;

 private:
  std::vector<std::shared_ptr<const SdfSource>> fields_;
  std::vector<BrdfParams> params_;
};

/// Built-in scenes: "sphere_lambert" and "two_sphere".
SceneSpec builtin_scene(const std::string& name);
std::vector<std::string> builtin_scene_names();

struct ScheduleSpec {
  int rig_steps = 4;
  int turntable_steps = 25;
  double rig_step_deg = 90.0;
  double turntable_step_deg = 14.4;
  RigAxes axes;

  CaptureSchedule build() const;
};

/// Camera on a sphere of radius `distance` at `elevation_deg` above the turntable plane,
/// looking at the origin with +Z up.
Camera orbit_camera(int size, double distance = 3.0, double elevation_deg = 20.0,
                    double focal_factor = 2.0);

struct FrameRecord {
  int m = 1;
  int n = 1;
  std::string image;         // 8-bit sRGB PNG
  std::string image_linear;  // PFM linear radiance
  std::string mask;          // gray PNG
  std::string normal;        // PFM object-frame normals, zero outside the mask
  Rotation rig;
  Rotation turntable;
};

struct DatasetManifest {
  int schema_version = kManifestSchemaVersion;
  ScheduleSpec schedule;
  Camera camera;
  double near = 2.0;
  double far = 4.0;
  double mm_per_unit = 100.0;
  std::uint64_t seed = 0;
  std::vector<FrameRecord> frames;
  std::optional<SceneSpec> ground_truth;
  std::string features_dir;  // external feature files; empty when none

  std::string to_json() const;
  /// Parses and validates the schema; does not touch the referenced files.
  static DatasetManifest from_json(const std::string& text);
};

struct SynthOptions {
  ScheduleSpec schedule;
  int image_size = 128;
  double camera_distance = 3.0;
  double camera_elevation_deg = 20.0;
  int samples = 128;
  double sharpness = 400.0;
  double mm_per_unit = 100.0;
  std::uint64_t seed = 0;
};

/// Renders every pose, writes images, masks (opacity > 0.5), normal maps and manifest.json.
DatasetManifest synth_dataset(const SceneSpec& scene, const SynthOptions& options,
                              const std::filesystem::path& out_dir);

struct Frame {
  RigPose pose;
  Image rgb;     // linear
  Image mask;    // 1 channel, 0 or 1
  Image normal;  // 3 channels; empty when the manifest has none
};

class Dataset {
 public:
  Dataset(DatasetManifest manifest, std::filesystem::path root, std::vector<Frame> frames);

  const DatasetManifest& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }
  const Camera& camera() const { return manifest_.camera; }
  std::size_t size() const { return frames_.size(); }
  const Frame& frame(std::size_t i) const { return frames_[i]; }
  const std::vector<Frame>& frames() const { return frames_; }
  /// Camera forward direction in the object frame of frame i.
  Vec3 object_view_direction(std::size_t i) const;
  /// (frame, pixel index) of every pixel inside a mask.
  const std::vector<std::pair<int, int>>& masked_pixels() const { return masked_pixels_; }

 private:
  DatasetManifest manifest_;
  std::filesystem::path root_;
  std::vector<Frame> frames_;
  std::vector<std::pair<int, int>> masked_pixels_;
};

/// {"order": k, "coefficients": [...]}, coefficients channel-major as in ShEnvironment.
std::string environment_to_json(const ShEnvironment& env);
ShEnvironment environment_from_json(const std::string& text);

/// Reads the manifest and every referenced file. Rejects schema violations, missing files,
/// frame-count mismatches, invalid rotations and rotations that disagree with the schedule.
Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Copy holding only the frames captured at rig step m.
Dataset restrict_to_rig_step(const Dataset& dataset, int m);

enum class MaskPolicy {
  uniform,   // pixels uniformly over all frames
  balanced,  // at least half of the batch inside the masks
};

struct RayBatch {
  std::vector<Ray> rays;  // world frame
  std::vector<int> frame;
  std::vector<int> px;
  std::vector<int> py;
  std::vector<Vec3> target;
  std::vector<double> mask;

  std::size_t size() const { return rays.size(); }
};

RayBatch sample_rays(const Dataset& dataset, int batch_size, MaskPolicy policy,
                     std::uint64_t seed);

/// Rays of one whole frame in row-major pixel order.
RayBatch frame_rays(const Dataset& dataset, std::size_t frame_index);

}  // namespace rmvps

#pragma once

// Loss stack, Adam, the learnable scene (SDF, material, occlusion, indirect gain, lights and
// the feature lift map) and the two training stages.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rmvps/dataset_io.hpp"
#include "rmvps/nn.hpp"
#include "rmvps/photometric_features.hpp"
#include "rmvps/sdf_field.hpp"
#include "rmvps/volume_renderer.hpp"

namespace rmvps {

struct LossWeights {
  double eikonal = 0.1;
  double occ = 1.0;
  double geo = 1.0;

  void validate() const;
};

struct LossParts {
  double rendering = 0.0;
  double eikonal = 0.0;
  double occ = 0.0;
  double geo = 0.0;
};

struct LossReport {
  LossParts parts;
  double total = 0.0;
  int iteration = 0;
  double wall_ms = 0.0;
};

/// sqrt(sum (I - C)^2) over every channel of the batch. grad, when given, receives dL/dC.
double loss_rendering(std::span<const Vec3> predicted, std::span<const Vec3> target,
                      std::vector<Vec3>* grad = nullptr);
/// sum (|g| - 1)^2.
double loss_eikonal(std::span<const Vec3> gradients, std::vector<Vec3>* grad = nullptr);
/// mean |s - s_march|.
double loss_occ(std::span<const double> predicted, std::span<const double> marched,
                std::vector<double>* grad = nullptr);
/// Mean over columns of |target - latent|^2; grad receives dL/dlatent (dL/dtarget is its
/// negative).
double loss_geo(const Matrix& target, const Matrix& latent, Matrix* grad = nullptr);

LossReport total_loss(const LossParts& parts, const LossWeights& weights);

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct ParamRange {
  std::size_t offset = 0;
  std::size_t size = 0;
};

class Adam {
 public:
  Adam(std::size_t parameter_count, const AdamConfig& config = {});

  /// Bias-corrected update. Ranges in `frozen` are left untouched. A non-finite gradient skips
  /// the whole step and returns false.
  bool step(Vector& params, const Vector& grad, std::span<const ParamRange> frozen = {});

  long steps() const { return steps_; }
  long skipped() const { return skipped_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  AdamConfig config_;
  Vector m_;
  Vector v_;
  long steps_ = 0;
  long skipped_ = 0;
};

struct SceneModelConfig {
  SdfFieldSpec sdf;
  int material_freqs = 4;
  int material_width = 64;
  int occlusion_freqs = 4;
  int occlusion_width = 64;
  int gain_freqs = 2;
  int env_order = 2;
  int indirect_order = 2;
  double init_sharpness = 20.0;
  double init_radiance = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static SceneModelConfig from_json(const std::string& text);
};

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Everything optimized during training.
class NeuralScene : public MaterialSource, public ReflectionSource {
 public:
  explicit NeuralScene(const SceneModelConfig& config);

  const SceneModelConfig& config() const { return config_; }

  SdfNetwork& sdf() { return sdf_; }
  const SdfNetwork& sdf() const { return sdf_; }
  Mlp& material() { return material_; }
  const Mlp& material() const { return material_; }
  Mlp& occlusion() { return occlusion_; }
  const Mlp& occlusion() const { return occlusion_; }
  Mlp& gain() { return gain_; }
  const Mlp& gain() const { return gain_; }
  LiftMap& lift() { return lift_; }
  const LiftMap& lift() const { return lift_; }
  ShEnvironment& environment() { return env_; }
  const ShEnvironment& environment() const { return env_; }
  ShEnvironment& indirect_environment() { return indirect_; }
  const ShEnvironment& indirect_environment() const { return indirect_; }
  DirectLightMap& direct_map() { return map_; }
  const DirectLightMap& direct_map() const { return map_; }
  double& log_sharpness() { return log_sharpness_; }
  double sharpness() const { return std::exp(log_sharpness_); }
  Vec3& background() { return background_; }
  const Vec3& background() const { return background_; }

  /// Named slices of the flat parameter vector, in storage order.
  std::vector<ParamBlock> blocks() const;
  const ParamBlock& block(const std::string& name) const;
  std::size_t parameter_count() const;
  Vector pack() const;
  void unpack(const Vector& flat);

  std::vector<BrdfParams> evaluate(const Matrix& points) const override;
  void evaluate(const Matrix& points, const Matrix& reflections, Vector& occlusion,
                Matrix& indirect_gain) const override;

  /// Scene for the forward renderer; points into this object.
  RenderScene render_scene() const;

 private:
  SceneModelConfig config_;
  SdfNetwork sdf_;
  Mlp material_;
  Mlp occlusion_;
  Mlp gain_;
  LiftMap lift_;
  ShEnvironment env_;
  ShEnvironment indirect_;
  DirectLightMap map_;
  double log_sharpness_ = 0.0;
  Vec3 background_ = Vec3::Zero();
  std::vector<ParamBlock> blocks_;
};

void write_checkpoint(const std::filesystem::path& path, const NeuralScene& scene, int iteration);
struct LoadedCheckpoint {
  NeuralScene scene;
  int iteration = 0;
};
LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);

/// Per-frame geometry feature supervision: the top-variance 32 channels of each view's raw
/// features and that view's direction in the object frame.
class FeatureTargets {
 public:
  struct View {
    Image selected;  // H x W x 32
    Vec3 direction = Vec3::UnitX();
  };

  static FeatureTargets from_oracle(const Dataset& dataset, std::uint64_t seed = 0);
  static FeatureTargets from_raw(const Dataset& dataset, const std::vector<RawFeatureMap>& maps);

  std::size_t size() const { return views_.size(); }
  const View& view(std::size_t i) const { return views_[i]; }

 private:
  std::vector<View> views_;
};

struct BatchOptions {
  RenderConfig render;
  int eikonal_points = 512;
  double bound = 1.0;  // eikonal points are uniform in [-bound, bound]^3
  OcclusionConfig occlusion;
  double shade_threshold = 1e-6;
};

/// One training batch with every quantity that is held fixed (detached) during the gradient
/// computation. The detached part is filled by the first evaluation and reused afterwards, so
/// repeated evaluations under perturbed parameters see the same plan.
struct BatchPlan {
  RayBatch rays;
  std::vector<Ray> local;  // object frame
  int samples = 0;
  Matrix positions;        // 3 x (rays * samples)
  Matrix eikonal_points;   // 3 x E

  bool detached_ready = false;
  std::vector<std::pair<int, int>> shaded;  // (ray, sample)
  Matrix occ_points;
  Matrix occ_dirs;
  Vector occ_targets;
  Matrix geo_points;
  Matrix geo_features;  // 32 x G selected features
  Matrix geo_views;     // 3 x G
};

BatchPlan make_plan(const Dataset& dataset, const RayBatch& rays, const BatchOptions& options,
                    std::uint64_t seed);

struct BatchResult {
  LossReport report;
  std::vector<Vec3> colors;
  std::vector<double> opacity;
  int occ_count = 0;
  int geo_count = 0;
};

/// Loss of the plan under the scene's current parameters. grad, when given, is resized to
/// parameter_count() and receives the gradient of the total.
BatchResult evaluate_plan(const NeuralScene& scene, BatchPlan& plan, const Dataset& dataset,
                          const FeatureTargets* features, const LossWeights& weights,
                          const BatchOptions& options, Vector* grad);

struct GradientCheckResult {
  int coordinates = 0;
  int within_tolerance = 0;
  double worst_relative = 0.0;
  std::vector<std::size_t> indices;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Central differences of the total loss on `count` random coordinates of a fixed plan.
/// Relative error is |a - n| / max(|a|, |n|, floor).
GradientCheckResult check_gradients(NeuralScene& scene, BatchPlan& plan, const Dataset& dataset,
                                    const FeatureTargets* features, const LossWeights& weights,
                                    const BatchOptions& options, int count, double step,
                                    double tolerance, std::uint64_t seed, double floor = 1e-6);

struct TrainingConfig {
  int iterations = 1000;
  int batch_rays = 512;
  BatchOptions batch;
  LossWeights weights;
  AdamConfig adam;
  MaskPolicy mask_policy = MaskPolicy::balanced;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;  // checkpoints and loss CSV when not empty
  int checkpoint_every = 500;
  /// Cosine decay of the learning rate to this fraction of its initial value over the run;
  /// 1 keeps it constant.
  double final_lr_fraction = 1.0;
  std::vector<std::string> frozen_blocks;
};

/// Learning rate at 1-based iteration `it` of `iterations` under cosine decay.
double cosine_learning_rate(double base, double final_fraction, int it, int iterations);

struct TrainingResult {
  std::vector<LossReport> history;
  bool diverged = false;
  int last_good_iteration = 0;
};

using ProgressCallback = std::function<void(const LossReport&)>;

/// Stage 1: shape, material and light from the full loss. Non-finite losses stop training and
/// restore the last good parameters.
TrainingResult train_stage1(NeuralScene& scene, const Dataset& dataset,
                            const FeatureTargets* features, const TrainingConfig& config,
                            const ProgressCallback& progress = {});

struct Stage2Config {
  int iterations = 500;
  int batch_rays = 256;
  int directions = 128;
  double diffuse_fraction = 0.5;  // share of cosine-distributed directions
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  OcclusionConfig trace;  // surface search along camera rays
};

/// Monte-Carlo estimate of the rendered color of a surface point: diffuse plus full micro-facet
/// specular over `directions` sampled directions, lit by the gated direct and indirect light.
struct McPlan {
  RayBatch rays;
  std::vector<int> hit;      // ray index of every surface point
  Matrix points;             // 3 x P, detached
  Matrix normals;            // 3 x P, detached
  Matrix views;              // 3 x P, toward the camera
  std::vector<Matrix> dirs;  // per point 3 x D sampled light directions
  std::vector<Vector> pdf;   // per point D densities of the mixture
};

McPlan make_mc_plan(const NeuralScene& scene, const Dataset& dataset, const RayBatch& rays,
                    const Stage2Config& config, std::uint64_t seed);
/// Rendering loss of the plan; grad receives the gradient over the non-shape parameters.
double evaluate_mc_plan(const NeuralScene& scene, const McPlan& plan, const Dataset& dataset,
                        std::vector<Vec3>* colors, Vector* grad);

/// Stage 2: SDF frozen, BRDF, lights and gain refined with the Monte-Carlo rendering loss.
TrainingResult train_stage2(NeuralScene& scene, const Dataset& dataset, const Stage2Config& config,
                            const ProgressCallback& progress = {});

/// Blocks that stage 2 never changes.
std::vector<std::string> stage2_frozen_blocks();

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& history);

}  // namespace rmvps

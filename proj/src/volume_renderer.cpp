#include "rmvps/volume_renderer.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <sstream>

namespace rmvps {

void RenderConfig::validate() const {
  if (samples < 2) {
    throw ValidationError("render needs at least 2 samples per ray");
  }
  if (!(near < far) || !std::isfinite(near) || !std::isfinite(far)) {
    throw ValidationError("render bounds need near < far");
  }
  if (!(sharpness > 0.0) || !std::isfinite(sharpness)) {
    throw ValidationError("sharpness must be positive");
  }
}

std::vector<double> sample_ray(const RenderConfig& config, std::uint64_t ray_seed) {
  config.validate();
  const double step = (config.far - config.near) / config.samples;
  std::vector<double> t(static_cast<std::size_t>(config.samples));
  std::mt19937_64 rng(mix_seed(config.seed, ray_seed));
  for (int i = 0; i < config.samples; ++i) {
    const double u = config.jitter ? to_unit_double(rng()) : 0.5;
    t[static_cast<std::size_t>(i)] = config.near + (i + u) * step;
  }
  return t;
}

namespace {

// log(sigmoid(x)) without overflow.
double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

}  // namespace

SdfWeights sdf_weights(std::span<const double> sdf, double sharpness) {
  const std::size_t k = sdf.size();
  if (k < 2) {
    throw ValidationError("sdf weights need at least 2 samples");
  }
  SdfWeights out;
  out.alpha.assign(k, 0.0);
  out.weights.assign(k, 0.0);
  double trans = 1.0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    const double ratio = std::exp(log_sigmoid(sharpness * sdf[i + 1]) - log_sigmoid(sharpness * sdf[i]));
    const double a = std::clamp(1.0 - ratio, 0.0, 1.0);
    out.alpha[i] = a;
    out.weights[i] = trans * a;
    trans *= 1.0 - a;
  }
  out.transmittance = trans;
  return out;
}

double sdf_weights_backward(std::span<const double> sdf, double sharpness, const SdfWeights& fwd,
                            std::span<const double> grad_weights, double grad_transmittance,
                            std::span<double> grad_sdf) {
  const std::size_t k = sdf.size();
  std::fill(grad_sdf.begin(), grad_sdf.end(), 0.0);
  // rest_i: gradient flowing into everything after sample i, per unit transmittance at i + 1.
  double rest = grad_transmittance;
  double grad_sharpness = 0.0;
  std::vector<double> trans(k, 1.0);
  for (std::size_t i = 1; i < k; ++i) {
    trans[i] = trans[i - 1] * (1.0 - fwd.alpha[i - 1]);
  }
  for (std::size_t i = k - 1; i-- > 0;) {
    const double g_alpha = trans[i] * (grad_weights[i] - rest);
    const double a = sharpness * sdf[i];
    const double b = sharpness * sdf[i + 1];
    const double ratio = std::exp(log_sigmoid(b) - log_sigmoid(a));
    if (ratio < 1.0) {
      // d(1 - ratio)/da = ratio (1 - sigmoid(a)), d/db = -ratio (1 - sigmoid(b)).
      const double da = ratio * sigmoid(-a);
      const double db = -ratio * sigmoid(-b);
      grad_sdf[i] += g_alpha * da * sharpness;
      grad_sdf[i + 1] += g_alpha * db * sharpness;
      grad_sharpness += g_alpha * (da * sdf[i] + db * sdf[i + 1]);
    }
    rest = grad_weights[i] * fwd.alpha[i] + (1.0 - fwd.alpha[i]) * rest;
  }
  return grad_sharpness;
}

void RenderScene::validate() const {
  if (field == nullptr || material == nullptr) {
    throw ValidationError("render scene needs a field and a material");
  }
  if (!all_finite(background)) {
    throw ValidationError("background color must be finite");
  }
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width, int height,
                       double focal) {
  Camera c;
  c.width = width;
  c.height = height;
  c.fx = focal;
  c.fy = focal;
  c.cx = 0.5 * width;
  c.cy = 0.5 * height;
  c.position = eye;
  c.forward = (target - eye).normalized();
  c.right = c.forward.cross(up).normalized();
  c.down = c.forward.cross(c.right);
  c.validate();
  return c;
}

Ray Camera::ray(double px, double py) const {
  const Vec3 dir = forward + ((px + 0.5 - cx) / fx) * right + ((py + 0.5 - cy) / fy) * down;
  return Ray::make(position, dir);
}

Camera Camera::flipped_vertically() const {
  Camera c = *this;
  c.down = -down;
  c.cy = height - cy;
  return c;
}

void Camera::validate() const {
  if (width <= 0 || height <= 0 || !(fx > 0.0) || !(fy > 0.0)) {
    throw ValidationError("camera needs positive size and focal lengths");
  }
  if (!all_finite(position) || !(forward.norm() > 0.0) || !(right.norm() > 0.0) ||
      !(down.norm() > 0.0)) {
    throw ValidationError("camera axes must be finite and non-zero");
  }
}

std::vector<PixelSampleRecord> render_rays(std::span<const Ray> rays, const RigPose& pose,
                                           const RenderScene& scene, const ShadingContext& ctx,
                                           const RenderConfig& config) {
  config.validate();
  scene.validate();
  const std::size_t count = rays.size();
  const auto k = static_cast<std::size_t>(config.samples);
  std::vector<PixelSampleRecord> out(count);
  std::vector<Ray> local(count);
  Matrix points(3, static_cast<Eigen::Index>(count * k));
  for (std::size_t r = 0; r < count; ++r) {
    local[r] = equivalent_ray(rays[r], pose.turntable);
    const std::vector<double> t = sample_ray(config, r);
    PixelSampleRecord& rec = out[r];
    rec.positions.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      rec.positions[i] = local[r].origin + t[i] * local[r].direction;
      points.col(static_cast<Eigen::Index>(r * k + i)) = rec.positions[i];
    }
  }
  const std::vector<FieldSample> samples = scene.field->evaluate_batch(points);

  std::vector<SdfWeights> weights(count);
  std::vector<std::pair<std::size_t, std::size_t>> shaded;
  for (std::size_t r = 0; r < count; ++r) {
    PixelSampleRecord& rec = out[r];
    rec.sdf.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      rec.sdf[i] = samples[r * k + i].sdf;
    }
    weights[r] = sdf_weights(rec.sdf, config.sharpness);
    rec.weights = weights[r].weights;
    rec.radiance.assign(k, Vec3::Zero());
    for (std::size_t i = 0; i < k; ++i) {
      if (rec.weights[i] > config.shade_threshold) {
        shaded.emplace_back(r, i);
      }
    }
  }

  const auto n_shaded = static_cast<Eigen::Index>(shaded.size());
  Matrix shade_points(3, n_shaded);
  Matrix reflections(3, n_shaded);
  for (Eigen::Index j = 0; j < n_shaded; ++j) {
    const auto [r, i] = shaded[static_cast<std::size_t>(j)];
    const FieldSample& s = samples[r * k + i];
    const Vec3 view = -local[r].direction;
    shade_points.col(j) = out[r].positions[i];
    reflections.col(j) = 2.0 * view.dot(s.normal) * s.normal - view;
  }
  std::vector<BrdfParams> params;
  Vector occlusion = Vector::Zero(n_shaded);
  Matrix gain = Matrix::Ones(3, n_shaded);
  if (n_shaded > 0) {
    params = scene.material->evaluate(shade_points);
    if (scene.reflection != nullptr) {
      scene.reflection->evaluate(shade_points, reflections, occlusion, gain);
    }
  }
  for (Eigen::Index j = 0; j < n_shaded; ++j) {
    const auto [r, i] = shaded[static_cast<std::size_t>(j)];
    const FieldSample& s = samples[r * k + i];
    PointShadeInput in;
    in.params = params[static_cast<std::size_t>(j)];
    in.normal = s.normal;
    in.view = -local[r].direction;
    in.occlusion = occlusion[j];
    in.indirect_gain = gain.col(j);
    const Vec3 c = shade_point(in, ctx);
    if (!all_finite(c)) {
      std::ostringstream msg;
      msg << "non-finite radiance at sample " << i << " of ray " << r << " (position "
          << out[r].positions[i].transpose() << ", sdf " << s.sdf << ")";
      throw RuntimeError(msg.str());
    }
    out[r].radiance[i] = c;
  }
  for (std::size_t r = 0; r < count; ++r) {
    PixelSampleRecord& rec = out[r];
    Vec3 color = Vec3::Zero();
    for (std::size_t i = 0; i < k; ++i) {
      color += rec.weights[i] * rec.radiance[i];
    }
    rec.opacity = 1.0 - weights[r].transmittance;
    rec.color = color + weights[r].transmittance * scene.background;
  }
  return out;
}

PixelSampleRecord render_pixel(const Ray& ray, const RigPose& pose, const RenderScene& scene,
                               const RenderConfig& config) {
  const ShadingContext ctx =
      ShadingContext::build(scene.env, pose, scene.indirect_env, scene.direct_map);
  return render_rays(std::span<const Ray>(&ray, 1), pose, scene, ctx, config).front();
}

RenderedImage render_image(const RigPose& pose, const Camera& camera, const RenderScene& scene,
                           const RenderConfig& config) {
  camera.validate();
  config.validate();
  scene.validate();
  const ShadingContext ctx =
      ShadingContext::build(scene.env, pose, scene.indirect_env, scene.direct_map);
  RenderedImage img{Image(camera.width, camera.height, 3), Image(camera.width, camera.height, 1)};
  std::string error;
#pragma omp parallel for schedule(dynamic)
  for (int y = 0; y < camera.height; ++y) {
    std::vector<Ray> rays;
    rays.reserve(static_cast<std::size_t>(camera.width));
    for (int x = 0; x < camera.width; ++x) {
      rays.push_back(camera.ray(x, y));
    }
    try {
      RenderConfig row_config = config;
      row_config.seed = mix_seed(config.seed, static_cast<std::uint64_t>(y));
      const std::vector<PixelSampleRecord> recs = render_rays(rays, pose, scene, ctx, row_config);
      for (int x = 0; x < camera.width; ++x) {
        img.rgb.set_rgb(x, y, recs[static_cast<std::size_t>(x)].color);
        img.opacity.at(x, y) = recs[static_cast<std::size_t>(x)].opacity;
      }
    } catch (const std::exception& e) {
#pragma omp critical
      if (error.empty()) {
        error = "row " + std::to_string(y) + ": " + e.what();
      }
    }
  }
  if (!error.empty()) {
    throw RuntimeError(error);
  }
  return img;
}

std::vector<OcclusionResult> march_occlusion_batch(const Matrix& points, const Matrix& normals,
                                                   const Matrix& directions,
                                                   const SdfSource& field,
                                                   const OcclusionConfig& config) {
  const Eigen::Index n = points.cols();
  std::vector<OcclusionResult> out(static_cast<std::size_t>(n));
  Matrix start = points + config.offset * normals;
  std::vector<double> t(static_cast<std::size_t>(n), 0.0);
  std::vector<double> min_sdf(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<Eigen::Index> active(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = i;
  for (int step = 0; step < config.max_steps && !active.empty(); ++step) {
    Matrix query(3, static_cast<Eigen::Index>(active.size()));
    for (std::size_t a = 0; a < active.size(); ++a) {
      const Eigen::Index i = active[a];
      query.col(static_cast<Eigen::Index>(a)) =
          start.col(i) + t[static_cast<std::size_t>(i)] * directions.col(i);
    }
    const Vector d = field.sdf_batch(query);
    std::vector<Eigen::Index> next;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const auto i = static_cast<std::size_t>(active[a]);
      const double v = d[static_cast<Eigen::Index>(a)];
      min_sdf[i] = std::min(min_sdf[i], v);
      if (v < config.hit_eps) {
        out[i].hit = 1.0;
        continue;
      }
      t[i] += v;
      if (t[i] <= config.far) {
        next.push_back(active[a]);
      }
    }
    active.swap(next);
  }
  for (const Eigen::Index i : active) {
    out[static_cast<std::size_t>(i)].exhausted = true;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].soft = sigmoid(config.softness * (config.hit_eps - min_sdf[i]));
  }
  return out;
}

OcclusionResult march_occlusion(const Vec3& p, const Vec3& t, const SdfSource& field,
                                const OcclusionConfig& config) {
  const Matrix normal = field.evaluate(p).normal;
  const Matrix point = p;
  const Matrix dir = t;
  return march_occlusion_batch(point, normal, dir, field, config).front();
}

}  // namespace rmvps

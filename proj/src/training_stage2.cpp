#include <chrono>
#include <random>

#include "rmvps/microfacet.hpp"
#include "rmvps/training.hpp"

namespace rmvps {

namespace {

constexpr int kMaterialOutputs = 5;

struct SurfaceHit {
  bool hit = false;
  Vec3 point = Vec3::Zero();
};

// Lockstep sphere tracing of object-frame rays against the field.
std::vector<SurfaceHit> trace_surface(const std::vector<Ray>& rays, const SdfSource& field,
                                      double near, double far, const OcclusionConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(rays.size());
  std::vector<SurfaceHit> out(rays.size());
  std::vector<double> t(rays.size(), near);
  std::vector<char> active(rays.size(), 1);
  for (int step = 0; step < cfg.max_steps; ++step) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (active[static_cast<std::size_t>(i)] != 0) {
        idx.push_back(i);
      }
    }
    if (idx.empty()) {
      break;
    }
    Matrix pts(3, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Ray& r = rays[static_cast<std::size_t>(idx[j])];
      pts.col(static_cast<Eigen::Index>(j)) = r.origin + t[static_cast<std::size_t>(idx[j])] * r.direction;
    }
    const Vector d = field.sdf_batch(pts);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto i = static_cast<std::size_t>(idx[j]);
      const double s = d[static_cast<Eigen::Index>(j)];
      if (std::abs(s) < cfg.hit_eps) {
        out[i] = SurfaceHit{true, pts.col(static_cast<Eigen::Index>(j))};
        active[i] = 0;
        continue;
      }
      t[i] += s;
      if (t[i] > far || t[i] < near - 1.0) {
        active[i] = 0;
      }
    }
  }
  return out;
}

Vec3 from_local(const Vec3& l, const Vec3& n) {
  const Vec3 a = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 tx = n.cross(a).normalized();
  const Vec3 ty = n.cross(tx);
  return l.x() * tx + l.y() * ty + l.z() * n;
}

double mixture_pdf(const Vec3& w, const Vec3& n, const Vec3& v, double roughness, double diffuse) {
  const double cos_i = std::max(0.0, w.dot(n));
  double pdf = diffuse * cos_i * kInvPi;
  const Vec3 hsum = w + v;
  if (hsum.squaredNorm() > 1e-20) {
    const Vec3 h = hsum.normalized();
    const double vh = std::abs(v.dot(h));
    const double nh = n.dot(h);
    if (vh > 1e-12 && nh > 0.0) {
      pdf += (1.0 - diffuse) * ggx_d(nh, roughness) * nh / (4.0 * vh);
    }
  }
  return pdf;
}

}  // namespace

std::vector<std::string> stage2_frozen_blocks() {
  return {"sdf", "occlusion", "lift", "log_sharpness"};
}

McPlan make_mc_plan(const NeuralScene& scene, const Dataset& dataset, const RayBatch& rays,
                    const Stage2Config& config, std::uint64_t seed) {
  if (config.directions < 1 || !(config.diffuse_fraction >= 0.0 && config.diffuse_fraction <= 1.0)) {
    throw ValidationError("stage 2 needs at least one direction and a diffuse share in [0, 1]");
  }
  McPlan plan;
  plan.rays = rays;
  std::vector<Ray> local;
  for (std::size_t r = 0; r < rays.size(); ++r) {
    local.push_back(equivalent_ray(rays.rays[r],
                                   dataset.frame(static_cast<std::size_t>(rays.frame[r])).pose.turntable));
  }
  const std::vector<SurfaceHit> hits = trace_surface(local, scene.sdf(), dataset.manifest().near,
                                                     dataset.manifest().far, config.trace);
  std::vector<std::size_t> hit_rays;
  for (std::size_t r = 0; r < hits.size(); ++r) {
    if (hits[r].hit) {
      hit_rays.push_back(r);
    }
  }
  const auto p = static_cast<Eigen::Index>(hit_rays.size());
  plan.points.resize(3, p);
  plan.normals.resize(3, p);
  plan.views.resize(3, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const std::size_t r = hit_rays[static_cast<std::size_t>(j)];
    plan.hit.push_back(static_cast<int>(r));
    plan.points.col(j) = hits[r].point;
    plan.views.col(j) = -local[r].direction;
  }
  const std::vector<FieldSample> fs = scene.sdf().evaluate_batch(plan.points);
  for (Eigen::Index j = 0; j < p; ++j) {
    plan.normals.col(j) = fs[static_cast<std::size_t>(j)].normal;
  }
  const std::vector<BrdfParams> brdf = scene.evaluate(plan.points);

  std::mt19937_64 rng(mix_seed(seed, 0x2C));
  const int d = config.directions;
  for (Eigen::Index j = 0; j < p; ++j) {
    const Vec3 n = plan.normals.col(j);
    const Vec3 v = plan.views.col(j);
    const double rho = brdf[static_cast<std::size_t>(j)].roughness;
    const double a2 = std::pow(rho, 4.0);
    Matrix dirs(3, d);
    Vector pdf(d);
    for (int k = 0; k < d; ++k) {
      const double u0 = to_unit_double(rng());
      const double u1 = to_unit_double(rng());
      const double u2 = to_unit_double(rng());
      const double phi = 2.0 * kPi * u2;
      Vec3 w;
      if (u0 < config.diffuse_fraction) {
        const double r = std::sqrt(u1);
        w = from_local(Vec3(r * std::cos(phi), r * std::sin(phi), std::sqrt(std::max(0.0, 1.0 - u1))), n);
      } else {
        const double cos2 = (1.0 - u1) / (1.0 + (a2 - 1.0) * u1);
        const double ct = std::sqrt(std::max(0.0, cos2));
        const double st = std::sqrt(std::max(0.0, 1.0 - cos2));
        const Vec3 h = from_local(Vec3(st * std::cos(phi), st * std::sin(phi), ct), n);
        w = 2.0 * v.dot(h) * h - v;
      }
      w.normalize();
      dirs.col(k) = w;
      pdf[k] = mixture_pdf(w, n, v, rho, config.diffuse_fraction);
    }
    plan.dirs.push_back(std::move(dirs));
    plan.pdf.push_back(std::move(pdf));
  }
  return plan;
}

double evaluate_mc_plan(const NeuralScene& scene, const McPlan& plan, const Dataset& dataset,
                        std::vector<Vec3>* colors, Vector* grad) {
  const SceneModelConfig& cfg = scene.config();
  const Eigen::Index p = plan.points.cols();
  const bool want_grad = grad != nullptr;

  Matrix mat_enc;
  positional_encoding(plan.points, cfg.material_freqs, mat_enc);
  Mlp::Cache mat_cache;
  scene.material().forward(mat_enc, mat_cache);
  Matrix gain_enc;
  positional_encoding(plan.points, cfg.gain_freqs, gain_enc);
  Mlp::Cache gain_cache;
  scene.gain().forward(gain_enc, gain_cache);

  const ShEnvironment& env = scene.environment();
  const ShEnvironment& ind = scene.indirect_environment();
  const DirectLightMap& map = scene.direct_map();
  const int nb_env = env.basis_count();
  const int nb_ind = ind.basis_count();

  std::vector<double> g_env(env.coefficients().size(), 0.0);
  std::vector<double> g_ind(ind.coefficients().size(), 0.0);
  Vec3 g_map_gain = Vec3::Zero();
  Vec3 g_map_offset = Vec3::Zero();
  Matrix g_mat_raw = Matrix::Zero(kMaterialOutputs, p);
  Matrix g_gain_raw = Matrix::Zero(3, p);

  std::vector<Vec3> pred(static_cast<std::size_t>(p));
  std::vector<Vec3> target(static_cast<std::size_t>(p));

  struct Sample {
    Vec3 f;
    Vec3 light;
    double weight;  // cos / (pdf D)
    Vec3 raw_env;
    Vec3 mapped;
    double occ;
    Vec3 ind;
    std::vector<double> b_env;
    std::vector<double> b_ind;
  };
  std::vector<std::vector<Sample>> samples(static_cast<std::size_t>(p));
  std::vector<BrdfParams> params(static_cast<std::size_t>(p));
  std::vector<Vec3> gains(static_cast<std::size_t>(p));

  for (Eigen::Index j = 0; j < p; ++j) {
    const int r = plan.hit[static_cast<std::size_t>(j)];
    const RigPose& pose = dataset.frame(static_cast<std::size_t>(plan.rays.frame[static_cast<std::size_t>(r)])).pose;
    const Rotation lf = pose.light_frame();
    const BrdfParams bp = squash_brdf(mat_cache.output.block<3, 1>(0, j), mat_cache.output(3, j),
                                      mat_cache.output(4, j));
    params[static_cast<std::size_t>(j)] = bp;
    Vec3 gain;
    for (int c = 0; c < 3; ++c) {
      gain[c] = 2.0 * sigmoid(gain_cache.output(c, j));
    }
    gains[static_cast<std::size_t>(j)] = gain;
    const Vec3 n = plan.normals.col(j);
    const Vec3 v = plan.views.col(j);
    const Matrix& dirs = plan.dirs[static_cast<std::size_t>(j)];
    const Vector& pdf = plan.pdf[static_cast<std::size_t>(j)];
    const Eigen::Index d = dirs.cols();

    Vector occ(d);
    Matrix dummy;
    {
      Matrix pts = plan.points.col(j).replicate(1, d);
      static_cast<const ReflectionSource&>(scene).evaluate(pts, dirs, occ, dummy);
    }

    Vec3 c_sum = Vec3::Zero();
    std::vector<Sample>& ss = samples[static_cast<std::size_t>(j)];
    ss.resize(static_cast<std::size_t>(d));
    for (Eigen::Index k = 0; k < d; ++k) {
      Sample& s = ss[static_cast<std::size_t>(k)];
      const Vec3 w = dirs.col(k);
      const double cos_i = w.dot(n);
      s.weight = 0.0;
      if (cos_i <= 0.0 || pdf[k] <= 0.0) {
        continue;
      }
      s.weight = cos_i / (pdf[k] * static_cast<double>(d));
      s.f = brdf_eval(bp, n, w, v);
      s.b_env.assign(static_cast<std::size_t>(nb_env), 0.0);
      sh_basis(env.order(), lf * w, s.b_env);
      s.b_ind.assign(static_cast<std::size_t>(nb_ind), 0.0);
      sh_basis(ind.order(), w, s.b_ind);
      for (int c = 0; c < 3; ++c) {
        double e = 0.0;
        for (int b = 0; b < nb_env; ++b) {
          e += env.coefficient(c, b) * s.b_env[static_cast<std::size_t>(b)];
        }
        double q = 0.0;
        for (int b = 0; b < nb_ind; ++b) {
          q += ind.coefficient(c, b) * s.b_ind[static_cast<std::size_t>(b)];
        }
        s.raw_env[c] = e;
        s.ind[c] = std::max(0.0, q);
      }
      s.mapped = map.apply(s.raw_env.cwiseMax(0.0));
      s.occ = occ[k];
      s.light = (1.0 - s.occ) * s.mapped + s.occ * gain.cwiseProduct(s.ind);
      c_sum += s.weight * s.f.cwiseProduct(s.light);
    }
    pred[static_cast<std::size_t>(j)] = c_sum;
    target[static_cast<std::size_t>(j)] = plan.rays.target[static_cast<std::size_t>(r)];
  }

  std::vector<Vec3> g_pred;
  const double loss = loss_rendering(pred, target, want_grad ? &g_pred : nullptr);
  if (colors != nullptr) {
    *colors = pred;
  }
  if (!want_grad) {
    return loss;
  }

  for (Eigen::Index j = 0; j < p; ++j) {
    const Vec3& gc = g_pred[static_cast<std::size_t>(j)];
    const BrdfParams& bp = params[static_cast<std::size_t>(j)];
    const Vec3& gain = gains[static_cast<std::size_t>(j)];
    const Vec3 n = plan.normals.col(j);
    const Vec3 v = plan.views.col(j);
    const Matrix& dirs = plan.dirs[static_cast<std::size_t>(j)];
    const Vec3 f0 = bp.f0();
    Vec3 g_albedo = Vec3::Zero();
    double g_rough = 0.0;
    double g_metal = 0.0;
    Vec3 g_gain = Vec3::Zero();
    for (std::size_t k = 0; k < samples[static_cast<std::size_t>(j)].size(); ++k) {
      const Sample& s = samples[static_cast<std::size_t>(j)][k];
      if (s.weight == 0.0) {
        continue;
      }
      const Vec3 w = dirs.col(static_cast<Eigen::Index>(k));
      const Vec3 g_f = s.weight * gc.cwiseProduct(s.light);
      const Vec3 g_light = s.weight * gc.cwiseProduct(s.f);

      // f = a (1 - m) / pi + F(F0) D G / (4 ci co).
      const double cos_i = n.dot(w);
      const double cos_o = n.dot(v);
      const Vec3 h = (w + v).normalized();
      const double nh = n.dot(h);
      const double dd = ggx_d(nh, bp.roughness);
      const double gg = smith_g(cos_i, cos_o, bp.roughness);
      const double denom = 4.0 * cos_i * cos_o;
      const double spec = dd * gg / denom;
      const double t = std::pow(1.0 - std::clamp(w.dot(h), 0.0, 1.0), 5.0);
      const Vec3 fres = fresnel_schlick(w.dot(h), f0);
      const Vec3 g_f0 = g_f * (spec * (1.0 - t));
      g_albedo += g_f * ((1.0 - bp.metallic) * kInvPi) + g_f0 * bp.metallic;
      g_metal += -g_f.dot(bp.albedo) * kInvPi + g_f0.dot(bp.albedo - Vec3::Constant(0.04));
      double dd_cos = 0.0;
      double dd_rough = 0.0;
      ggx_d_grad(nh, bp.roughness, dd_cos, dd_rough);
      const double dg_rough = smith_g_roughness_grad(cos_i, cos_o, bp.roughness);
      g_rough += g_f.dot(fres) * (dd_rough * gg + dd * dg_rough) / denom;

      // light = (1 - s) map(max(0, env)) + s gain * ind.
      const Vec3 g_mapped = (1.0 - s.occ) * g_light;
      g_gain += s.occ * g_light.cwiseProduct(s.ind);
      const Vec3 g_ind_light = s.occ * g_light.cwiseProduct(gain);
      for (int c = 0; c < 3; ++c) {
        const double clamped = std::max(0.0, s.raw_env[c]);
        const double pre = map.gain[c] * clamped + map.offset[c];
        if (pre <= 0.0) {
          continue;
        }
        g_map_gain[c] += g_mapped[c] * clamped;
        g_map_offset[c] += g_mapped[c];
        if (s.raw_env[c] > 0.0) {
          const double ge = g_mapped[c] * map.gain[c];
          for (int b = 0; b < nb_env; ++b) {
            g_env[static_cast<std::size_t>(c * nb_env + b)] += ge * s.b_env[static_cast<std::size_t>(b)];
          }
        }
      }
      for (int c = 0; c < 3; ++c) {
        if (s.ind[c] > 0.0) {
          for (int b = 0; b < nb_ind; ++b) {
            g_ind[static_cast<std::size_t>(c * nb_ind + b)] += g_ind_light[c] * s.b_ind[static_cast<std::size_t>(b)];
          }
        }
      }
    }
    for (int c = 0; c < 3; ++c) {
      g_mat_raw(c, j) = g_albedo[c] * bp.albedo[c] * (1.0 - bp.albedo[c]);
      g_gain_raw(c, j) = g_gain[c] * gain[c] * (1.0 - 0.5 * gain[c]);
    }
    const double sr = (bp.roughness - kRoughnessFloor) / (1.0 - kRoughnessFloor);
    g_mat_raw(3, j) = g_rough * (1.0 - kRoughnessFloor) * sr * (1.0 - sr);
    g_mat_raw(4, j) = g_metal * bp.metallic * (1.0 - bp.metallic);
  }

  grad->setZero(static_cast<Eigen::Index>(scene.parameter_count()));
  auto add = [&](const std::string& name, const double* data) {
    const ParamBlock& b = scene.block(name);
    for (std::size_t i = 0; i < b.size; ++i) {
      (*grad)[static_cast<Eigen::Index>(b.offset + i)] += data[i];
    }
  };
  if (p > 0) {
    Vector g_material = Vector::Zero(scene.material().params().size());
    scene.material().backward(mat_cache, g_mat_raw, g_material, nullptr);
    add("material", g_material.data());
    Vector g_gain = Vector::Zero(scene.gain().params().size());
    scene.gain().backward(gain_cache, g_gain_raw, g_gain, nullptr);
    add("gain", g_gain.data());
  }
  add("env", g_env.data());
  add("indirect_env", g_ind.data());
  const double g_map[6] = {g_map_gain.x(),   g_map_gain.y(),   g_map_gain.z(),
                           g_map_offset.x(), g_map_offset.y(), g_map_offset.z()};
  add("direct_map", g_map);
  return loss;
}

TrainingResult train_stage2(NeuralScene& scene, const Dataset& dataset, const Stage2Config& config,
                            const ProgressCallback& progress) {
  if (config.iterations < 0 || config.batch_rays <= 0) {
    throw ValidationError("training needs non-negative iterations and a positive batch size");
  }
  std::vector<ParamRange> frozen;
  for (const std::string& name : stage2_frozen_blocks()) {
    const ParamBlock& b = scene.block(name);
    frozen.push_back(ParamRange{b.offset, b.size});
  }
  // Background only matters for rays that miss, which stage 2 does not render.
  const ParamBlock& bg = scene.block("background");
  frozen.push_back(ParamRange{bg.offset, bg.size});

  Adam adam(scene.parameter_count(), config.adam);
  TrainingResult result;
  Vector params = scene.pack();
  Vector last_good = params;
  const auto start = std::chrono::steady_clock::now();
  const bool write = !config.out_dir.empty();
  if (write) {
    std::filesystem::create_directories(config.out_dir);
  }
  for (int it = 1; it <= config.iterations; ++it) {
    const std::uint64_t batch_seed = mix_seed(config.seed, 0x5200000ULL + static_cast<std::uint64_t>(it));
    const RayBatch rays = sample_rays(dataset, config.batch_rays, MaskPolicy::balanced, batch_seed);
    const McPlan plan = make_mc_plan(scene, dataset, rays, config, batch_seed);
    Vector grad;
    const double loss = evaluate_mc_plan(scene, plan, dataset, nullptr, &grad);
    if (!std::isfinite(loss)) {
      scene.unpack(last_good);
      result.diverged = true;
      break;
    }
    last_good = params;
    result.last_good_iteration = it - 1;
    adam.step(params, grad, frozen);
    scene.unpack(params);
    LossReport rep;
    rep.parts.rendering = loss;
    rep.total = loss;
    rep.iteration = it;
    rep.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rep);
    if (progress) {
      progress(rep);
    }
  }
  if (!result.diverged) {
    result.last_good_iteration = config.iterations;
  }
  if (write) {
    write_checkpoint(config.out_dir / "checkpoint_stage2.bin", scene, result.last_good_iteration);
    write_loss_csv(config.out_dir / "loss_stage2.csv", result.history);
  }
  return result;
}

}  // namespace rmvps

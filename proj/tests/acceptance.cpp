// Acceptance run: one PASS/FAIL line per criterion. Optional arguments select criteria by
// number, e.g. `acceptance 1 7 8`.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"
#include "rmvps/dataset_io.hpp"
#include "rmvps/metrics_mesh.hpp"
#include "rmvps/microfacet.hpp"
#include "rmvps/training.hpp"

namespace {

using namespace rmvps;
namespace fs = std::filesystem;
using json = nlohmann::json;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

fs::path work_root() {
  static const fs::path root = fs::temp_directory_path() / "rmvps_acceptance";
  return root;
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Vec3 v(nd(rng), nd(rng), nd(rng));
  return v.normalized();
}

Rotation random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(0.0, 360.0);
  return rotation_about_axis(random_unit(rng), angle(rng));
}

// Runs the CLI and returns its JSON summary; throws on a non-zero exit.
json cli(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(args, out, err);
  if (code != 0) {
    throw std::runtime_error("rmvps " + args.front() + " exited " + std::to_string(code) + ": " +
                             err.str());
  }
  return json::parse(out.str());
}

// ---------------------------------------------------------------------------------------------

Outcome rotations() {
  const double tol = 1e-6;
  double worst = 0.0;
  std::mt19937_64 rng(101);
  const Ray ray = Ray::make(Vec3(1.0, 2.0, 3.0), Vec3(0.3, -0.2, 0.9));
  const Ray same = equivalent_ray(ray, Rotation());
  worst = std::max({worst, (same.origin - ray.origin).norm(), (same.direction - ray.direction).norm()});
  for (int i = 0; i < 100; ++i) {
    const Vec3 w = random_unit(rng);
    worst = std::max(worst, (world_light_direction(w, RigPose::identity()) - w).norm());
  }
  for (int i = 0; i < 200; ++i) {
    const Rotation r = random_rotation(rng);
    const Ray q = Ray::make(random_unit(rng) * 2.5, random_unit(rng));
    const Ray back = equivalent_ray(equivalent_ray(q, r), r.transposed());
    worst = std::max({worst, (back.origin - q.origin).norm(), (back.direction - q.direction).norm()});
    const Vec3 v = random_unit(rng) * 3.7;
    worst = std::max(worst, std::abs((r * v).norm() - v.norm()));
    RigPose pose;
    pose.rig = random_rotation(rng);
    pose.turntable = r;
    worst = std::max(worst, std::abs(world_light_direction(random_unit(rng), pose).norm() - 1.0));
  }
  const Rotation step = rotation_about_axis(Vec3::UnitZ(), 14.4);
  Rotation acc;
  for (int i = 0; i < 25; ++i) {
    acc = acc * step;
  }
  worst = std::max(worst, (acc.matrix() - Mat3::Identity()).cwiseAbs().maxCoeff());
  const CaptureSchedule sched = build_schedule(4, 25, 90.0, 14.4);
  const Rotation closed = sched.at(1, 25).turntable * step;
  worst = std::max(worst, (closed.matrix() - Mat3::Identity()).cwiseAbs().maxCoeff());
  return {worst <= tol, "worst deviation " + fmt("%.2e", worst) + " (tol 1e-6)"};
}

Outcome scene_equivalence() {
  std::mt19937_64 rng(202);
  const AnalyticSphere sphere(0.4, Vec3(0.25, -0.15, 0.1));
  const ConstantMaterial mat(BrdfParams{Vec3(0.8, 0.5, 0.3), 0.35, 0.4});
  RenderScene scene;
  scene.field = &sphere;
  scene.material = &mat;
  ShEnvironment env(2);
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  for (int c = 0; c < 3; ++c) {
    env.coefficient(c, 0) = 2.5;
    for (int i = 1; i < env.basis_count(); ++i) {
      env.coefficient(c, i) = u(rng);
    }
  }
  scene.env = env;
  const Camera cam = Camera::look_at(Vec3(3.0, 0.0, 0.0), Vec3::Zero(), Vec3::UnitZ(), 32, 32, 64.0);
  RenderConfig cfg;
  cfg.samples = 64;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    RigPose pose;
    pose.rig = random_rotation(rng);
    pose.turntable = random_rotation(rng);
    Camera pre = cam;
    const Rotation back = pose.turntable.transposed();
    pre.position = back * cam.position;
    pre.right = back * cam.right;
    pre.down = back * cam.down;
    pre.forward = back * cam.forward;
    RigPose light_only;
    light_only.rig = pose.light_frame();
    const RenderedImage a = render_image(pose, cam, scene, cfg);
    const RenderedImage b = render_image(light_only, pre, scene, cfg);
    for (std::size_t i = 0; i < a.rgb.data.size(); ++i) {
      worst = std::max(worst, std::abs(a.rgb.data[i] - b.rgb.data[i]));
    }
  }
  return {worst <= 1e-4, "10 poses, worst pixel difference " + fmt("%.2e", worst) + " (tol 1e-4)"};
}

Outcome shading_oracles() {
  const ShEnvironment white = ShEnvironment::constant(3, Vec3::Ones());
  const auto& quad = default_quadrature();
  double furnace = 0.0;
  for (double m : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    for (double rho : {kRoughnessFloor, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0}) {
      for (double theta_deg : {0.0, 20.0, 45.0}) {
        const double th = deg_to_rad(theta_deg);
        const ShadingPoint sp = ShadingPoint::make(Vec3::Zero(), Vec3::UnitZ(),
                                                   Vec3(std::sin(th), 0.0, std::cos(th)));
        const BrdfParams p{Vec3::Ones(), rho, m};
        const Vec3 total = shade_diffuse(p, sp, white, RigPose::identity(), quad) +
                           shade_specular(p, sp, white, RigPose::identity(), quad).rgb;
        furnace = std::max(furnace, total.maxCoeff());
      }
    }
  }

  const AnalyticSphere sphere(0.5);
  const ConstantMaterial lambert(BrdfParams{Vec3::Ones(), 1.0, 0.0});
  RenderScene scene;
  scene.field = &sphere;
  scene.material = &lambert;
  scene.env = white;
  const Camera cam = Camera::look_at(Vec3(3.0, 0.0, 0.0), Vec3::Zero(), Vec3::UnitZ(), 32, 32, 64.0);
  const PixelSampleRecord rec = render_pixel(cam.ray(15.5, 15.5), RigPose::identity(), scene, {});
  const double lambert_err = (rec.color - Vec3::Ones()).cwiseAbs().maxCoeff();

  const Vec3 t = Vec3(0.3, -0.1, 0.95).normalized();
  const QuadratureRule rule = QuadratureRule::lobe_aligned(t);
  double lobe_err = 0.0;
  for (double rho : {0.2, 0.5, 0.9}) {
    double sum = 0.0;
    for (std::size_t j = 0; j < rule.size(); ++j) {
      const double c = rule.directions[j].dot(t);
      sum += ggx_d(c, rho) * c * rule.weights[j];
    }
    lobe_err = std::max(lobe_err, std::abs(sum - 1.0));
  }
  const bool pass = furnace <= 1.05 && lambert_err <= 0.05 && lobe_err <= 0.02;
  return {pass, "furnace max " + fmt("%.4f", furnace) + " (<= 1.05), Lambertian error " +
                    fmt("%.4f", lambert_err) + " (<= 0.05), GGX normalization error " +
                    fmt("%.4f", lobe_err) + " (<= 0.02)"};
}

Outcome gradient_check() {
  const fs::path root = work_root() / "c4";
  fs::remove_all(root);
  SynthOptions o;
  o.schedule.rig_steps = 2;
  o.schedule.turntable_steps = 3;
  o.schedule.turntable_step_deg = 120.0;
  o.image_size = 24;
  o.samples = 48;
  synth_dataset(builtin_scene("sphere_lambert"), o, root);
  const Dataset data = load_dataset(root / "manifest.json");

  SceneModelConfig mc;
  mc.sdf.frequencies = 2;
  mc.sdf.hidden_layers = 3;
  mc.sdf.width = 16;
  mc.sdf.latent_layer = 2;
  mc.material_width = 16;
  mc.occlusion_width = 16;
  mc.gain_freqs = 1;
  mc.env_order = 2;
  mc.indirect_order = 1;
  NeuralScene scene(mc);
  // Perturb the zero-initialized heads so every block carries gradient.
  Vector p = scene.pack();
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0.0, 0.05);
  for (const std::string& name : {"material", "occlusion", "gain", "indirect_env"}) {
    const ParamBlock& b = scene.block(name);
    for (std::size_t i = 0; i < b.size; ++i) {
      p[static_cast<Eigen::Index>(b.offset + i)] += nd(rng);
    }
  }
  scene.unpack(p);
  scene.lift().randomize(4);

  const FeatureTargets features = FeatureTargets::from_oracle(data, 1);
  BatchOptions opts;
  opts.render.samples = 8;
  opts.render.near = data.manifest().near;
  opts.render.far = data.manifest().far;
  opts.render.jitter = true;
  opts.eikonal_points = 32;
  const RayBatch rays = sample_rays(data, 24, MaskPolicy::balanced, 17);
  BatchPlan plan = make_plan(data, rays, opts, 17);
  const GradientCheckResult r =
      check_gradients(scene, plan, data, &features, LossWeights{}, opts, 200, 1e-4, 1e-2, 33);
  fs::remove_all(root);
  const double share = static_cast<double>(r.within_tolerance) / r.coordinates;
  return {share >= 0.95, std::to_string(r.within_tolerance) + "/" + std::to_string(r.coordinates) +
                             " coordinates within 1e-2 relative (need 95%)"};
}

// Toy training schedule shared by criteria 5, 6 and 9.
std::vector<std::string> toy_train_args(const fs::path& data, const fs::path& out, int iterations) {
  return {"train",         "--data",         data.string(),  "--out",
          out.string(),    "--iterations",   std::to_string(iterations),
          "--batch-rays",  "256",            "--samples",    "32",
          "--width",       "32",             "--layers",     "4",
          "--latent-layer", "3",             "--head-width", "32",
          "--init-radius", "0.3",            "--lr",         "2e-3",
          "--lr-final",    "0.02",
          "--eikonal-points", "256",         "--progress-every", "0",
          "--checkpoint-every", "1000"};
}

constexpr int kToyIterations = 4000;

Outcome toy_reconstruction() {
  const fs::path root = work_root() / "c5";
  fs::remove_all(root);
  cli({"synth", "--scene", "sphere_lambert", "--schedule", "4x8", "--size", "64", "--out",
       (root / "data").string()});
  const Dataset data = load_dataset(root / "data" / "manifest.json");
  const int env_order = data.manifest().ground_truth->env.order();
  const double radius = data.manifest().ground_truth->primitives.front().radius;
  const double limit_mm = 0.02 * radius * data.manifest().mm_per_unit;
  cli(toy_train_args(root / "data", root / "run", kToyIterations));
  const json ev = cli({"eval", "--data", (root / "data").string(), "--checkpoint",
                       (root / "run" / "checkpoint.bin").string(), "--out",
                       (root / "eval").string()});
  const double cd = ev.at("chamfer_mm").get<double>();
  const double ps = ev.at("psnr_db").get<double>();
  const bool pass = env_order == 1 && cd <= limit_mm && ps >= 28.0;
  return {pass, std::to_string(kToyIterations) + " iterations, CD " + fmt("%.3f", cd) + " mm (<= " +
                    fmt("%.2f", limit_mm) + "), PSNR " + fmt("%.2f", ps) + " dB (>= 28) over " +
                    std::to_string(ev.at("views").get<int>()) + " views"};
}

Outcome ablation() {
  const fs::path root = work_root() / "c6";
  fs::remove_all(root);
  cli({"synth", "--scene", "two_sphere", "--schedule", "4x8", "--size", "64", "--out",
       (root / "data").string()});
  double cd[2] = {0.0, 0.0};
  const char* geo[2] = {"1.0", "0"};
  for (int k = 0; k < 2; ++k) {
    const fs::path run = root / (k == 0 ? "with_prior" : "without_prior");
    std::vector<std::string> args = toy_train_args(root / "data", run, kToyIterations);
    args.insert(args.end(), {"--lambda-geo", geo[k], "--features", "oracle"});
    cli(args);
    const json ev = cli({"eval", "--data", (root / "data").string(), "--checkpoint",
                         (run / "checkpoint.bin").string(), "--out", (run / "eval").string(),
                         "--view-step", "4"});
    cd[k] = ev.at("chamfer_mm").get<double>();
  }
  return {cd[0] <= cd[1], "CD with prior " + fmt("%.3f", cd[0]) + " mm, without " +
                              fmt("%.3f", cd[1]) + " mm"};
}

Outcome loss_units() {
  int failed = 0;
  int total = 0;
  auto expect = [&](bool ok) {
    failed += ok ? 0 : 1;
    ++total;
  };
  const std::vector<Vec3> a{Vec3(0.2, 0.4, 0.6), Vec3(0.1, 0.1, 0.1)};
  expect(loss_rendering(a, a) == 0.0);
  std::vector<Vec3> b = a;
  b[0].y() += 0.3;
  expect(std::abs(loss_rendering(a, b) - 0.3) < 1e-12);
  b[1].z() -= 0.3;
  expect(std::abs(loss_rendering(a, b) - 0.3 * std::sqrt(2.0)) < 1e-12);
  expect(std::abs(loss_rendering(a, b) - 0.4243) < 5e-5);

  expect(loss_eikonal(std::vector<Vec3>{Vec3::UnitX(), Vec3(0.6, 0.8, 0.0)}) == 0.0);
  expect(loss_eikonal(std::vector<Vec3>{Vec3(0.0, 2.0, 0.0)}) == 1.0);
  const AnalyticSphere sphere(0.5);
  std::mt19937_64 rng(3);
  std::vector<Vec3> grads;
  for (int i = 0; i < 500; ++i) {
    Vec3 p;
    for (int k = 0; k < 3; ++k) {
      p[k] = 2.0 * to_unit_double(rng()) - 1.0;
    }
    if (p.norm() > 1e-3) {
      grads.push_back(sphere.evaluate(p).gradient);
    }
  }
  expect(loss_eikonal(grads) < 1e-10);

  expect(loss_occ(std::vector<double>{0.2, 0.7}, std::vector<double>{0.2, 0.7}) == 0.0);
  expect(loss_occ(std::vector<double>{0.5}, std::vector<double>{1.0}) == 0.5);
  expect(loss_occ(std::vector<double>{0.0, 1.0}, std::vector<double>{1.0, 1.0}) == 0.5);

  Matrix same = Matrix::Random(kLatentDim, 3);
  expect(loss_geo(same, same) == 0.0);
  Matrix t1 = Matrix::Zero(kLatentDim, 1);
  Matrix l1 = t1;
  l1(0, 0) = 1.0;
  expect(loss_geo(t1, l1) == 1.0);
  Matrix t2 = Matrix::Zero(kLatentDim, 2);
  Matrix l2 = t2;
  l2(0, 0) = 1.0;
  l2.col(1).head(3).setOnes();
  expect(loss_geo(t2, l2) == 2.0);
  bool threw = false;
  try {
    loss_geo(Matrix::Zero(kLatentDim, 2), Matrix::Zero(16, 2));
  } catch (const ValidationError&) {
    threw = true;
  }
  expect(threw);

  expect(std::abs(total_loss(LossParts{1.0, 1.0, 1.0, 1.0}, LossWeights{}).total - 3.1) < 1e-12);
  expect(total_loss(LossParts{}, LossWeights{}).total == 0.0);
  return {failed == 0, std::to_string(total - failed) + "/" + std::to_string(total) +
                           " worked examples"};
}

Outcome metric_oracles() {
  int failed = 0;
  int total = 0;
  auto expect = [&](bool ok) {
    failed += ok ? 0 : 1;
    ++total;
  };
  const std::vector<Vec3> origin{Vec3::Zero()};
  const std::vector<Vec3> x1{Vec3::UnitX()};
  const std::vector<Vec3> pair{Vec3::Zero(), Vec3(2.0, 0.0, 0.0)};
  expect(chamfer(pair, pair) == 0.0);
  expect(chamfer(origin, x1) == 1.0);
  expect(chamfer(pair, x1) == 1.0);

  const Image img(32, 32, 3, 0.4);
  Image e1 = img;
  Image e5 = img;
  for (double& v : e1.data) v += 0.1;
  for (double& v : e5.data) v += 0.5;
  expect(psnr(img, img) == 100.0);
  expect(std::abs(psnr(e1, img) - 20.0) < 1e-9);
  expect(std::abs(psnr(e5, img) - 6.0206) < 1e-4);

  std::mt19937_64 rng(8);
  Image x(32, 32, 3);
  for (double& v : x.data) v = to_unit_double(rng());
  Image neg = x;
  for (double& v : neg.data) v = 1.0 - v;
  expect(std::abs(ssim(x, x) - 1.0) < 1e-12);
  expect(ssim(x, neg) < 0.0);
  const Image k(20, 20, 1, 0.3);
  expect(std::abs(ssim(k, k) - 1.0) < 1e-12);

  const TriangleMesh mesh = marching_cubes(AnalyticSphere(0.5), 64);
  const double area = kPi;
  const double area_err = std::abs(mesh.area() - area) / area;
  expect(area_err <= 0.03);
  return {failed == 0, std::to_string(total - failed) + "/" + std::to_string(total) +
                           " examples, sphere area error " +
                           fmt("%.2f", 100.0 * area_err) + "% (<= 3%)"};
}

std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Loss CSV without the wall-clock column.
std::string loss_without_timing(const fs::path& p) {
  std::istringstream is(file_bytes(p));
  std::string line;
  std::string out;
  while (std::getline(is, line)) {
    out += line.substr(0, line.rfind(',')) + "\n";
  }
  return out;
}

std::uint64_t tree_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = fnv1a("");
  for (const fs::path& f : files) {
    h = fnv1a(fs::relative(f, dir).generic_string(), h);
    h = fnv1a(f.filename() == "loss.csv" ? loss_without_timing(f) : file_bytes(f), h);
  }
  return h;
}

Outcome determinism() {
  const fs::path root = work_root() / "c9";
  fs::remove_all(root);
  std::uint64_t synth_hash[2];
  std::uint64_t train_hash[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path run = root / ("run" + std::to_string(k));
    cli({"synth", "--scene", "sphere_lambert", "--schedule", "2x4", "--size", "48", "--seed", "7",
         "--out", (run / "data").string()});
    // Both runs read the same dataset so the recorded config is identical.
    const fs::path data = root / "run0" / "data";
    std::vector<std::string> args = toy_train_args(data, run / "train", 100);
    args.insert(args.end(), {"--seed", "7"});
    cli(args);
    synth_hash[k] = tree_hash(run / "data");
    train_hash[k] = tree_hash(run / "train");
  }
  std::ostringstream os;
  os << std::hex << "synth " << synth_hash[0] << "/" << synth_hash[1] << ", train "
     << train_hash[0] << "/" << train_hash[1];
  return {synth_hash[0] == synth_hash[1] && train_hash[0] == train_hash[1], os.str()};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "rotation algebra", 1.0, rotations},
      {2, "scene equivalence render", 30.0, scene_equivalence},
      {3, "shading oracles", 60.0, shading_oracles},
      {4, "gradient check", 300.0, gradient_check},
      {5, "toy reconstruction", 3600.0, toy_reconstruction},
      {6, "geometry prior ablation", 7200.0, ablation},
      {7, "loss unit examples", 1.0, loss_units},
      {8, "metric oracles", 30.0, metric_oracles},
      {9, "determinism", 600.0, determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    selected.insert(std::atoi(argv[i]));
  }
  fs::create_directories(work_root());
  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && selected.count(c.id) == 0) {
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.limit_s;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << ": "
              << o.detail << "; " << fmt("%.1f", secs) << " s (limit " << fmt("%.0f", c.limit_s)
              << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

#include "rmvps/dataset_io.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "rmvps/image_io.hpp"

namespace rmvps {

using nlohmann::json;

void SceneSpec::validate() const {
  if (primitives.empty()) {
    throw ValidationError("scene needs at least one primitive");
  }
  for (const Primitive& p : primitives) {
    p.brdf.validate();
    if (!all_finite(p.center)) {
      throw ValidationError("primitive center must be finite");
    }
    if (p.kind == Primitive::Kind::sphere && !(p.radius > 0.0)) {
      throw ValidationError("sphere radius must be positive");
    }
    if (p.kind == Primitive::Kind::box && !(p.half_extents.minCoeff() > 0.0)) {
      throw ValidationError("box half extents must be positive");
    }
  }
}

namespace {

std::shared_ptr<const SdfSource> primitive_field(const Primitive& p) {
  if (p.kind == Primitive::Kind::sphere) {
    return std::make_shared<AnalyticSphere>(p.radius, p.center);
  }
  return std::make_shared<AnalyticBox>(p.half_extents, p.center);
}

}  // namespace

std::shared_ptr<const SdfSource> SceneSpec::field() const {
  validate();
  if (primitives.size() == 1) {
    return primitive_field(primitives.front());
  }
  std::vector<std::shared_ptr<const SdfSource>> members;
  for (const Primitive& p : primitives) {
    members.push_back(primitive_field(p));
  }
  return std::make_shared<SdfUnion>(std::move(members));
}

PrimitiveMaterial::PrimitiveMaterial(const SceneSpec& scene) {
  scene.validate();
  for (const Primitive& p : scene.primitives) {
    fields_.push_back(primitive_field(p));
    params_.push_back(p.brdf);
  }
}

std::vector<BrdfParams> PrimitiveMaterial::evaluate(const Matrix& points) const {
  std::vector<BrdfParams> out(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < fields_.size(); ++k) {
      const double d = fields_[k]->sdf(points.col(i));
      if (d < best) {
        best = d;
        out[static_cast<std::size_t>(i)] = params_[k];
      }
    }
  }
  return out;
}

namespace {

// L(w) = base + slope * (d . w) per channel, written in SH order 1.
ShEnvironment linear_environment(const Vec3& base, const Vec3& slope, const Vec3& direction) {
  const double y00 = 0.5 * std::sqrt(1.0 / kPi);
  const double y1 = std::sqrt(3.0 / (4.0 * kPi));
  const Vec3 d = direction.normalized();
  ShEnvironment env(1);
  for (int c = 0; c < 3; ++c) {
    env.coefficient(c, 0) = base[c] / y00;
    env.coefficient(c, 1) = slope[c] * d.y() / y1;
    env.coefficient(c, 2) = slope[c] * d.z() / y1;
    env.coefficient(c, 3) = slope[c] * d.x() / y1;
  }
  return env;
}

}  // namespace

SceneSpec builtin_scene(const std::string& name) {
  SceneSpec s;
  s.name = name;
  s.env = linear_environment(Vec3(0.75, 0.7, 0.65), Vec3(0.55, 0.5, 0.45), Vec3(0.3, 0.5, 0.8));
  if (name == "sphere_lambert") {
    Primitive p;
    p.radius = 0.5;
    p.brdf = BrdfParams{Vec3(0.8, 0.6, 0.4), 1.0, 0.0};
    s.primitives.push_back(p);
  } else if (name == "two_sphere") {
    Primitive a;
    a.radius = 0.35;
    a.center = Vec3(0.0, -0.3, 0.05);
    a.brdf = BrdfParams{Vec3(0.8, 0.6, 0.4), 1.0, 0.0};
    Primitive b;
    b.radius = 0.25;
    b.center = Vec3(0.05, 0.35, -0.1);
    b.brdf = BrdfParams{Vec3(0.4, 0.6, 0.8), 1.0, 0.0};
    s.primitives = {a, b};
  } else {
    throw ValidationError("unknown scene '" + name + "'");
  }
  return s;
}

std::vector<std::string> builtin_scene_names() { return {"sphere_lambert", "two_sphere"}; }

CaptureSchedule ScheduleSpec::build() const {
  return build_schedule(rig_steps, turntable_steps, rig_step_deg, turntable_step_deg, axes);
}

Camera orbit_camera(int size, double distance, double elevation_deg, double focal_factor) {
  const double e = deg_to_rad(elevation_deg);
  const Vec3 eye(distance * std::cos(e), 0.0, distance * std::sin(e));
  return Camera::look_at(eye, Vec3::Zero(), Vec3::UnitZ(), size, size, focal_factor * size);
}

namespace {

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) {
    throw ValidationError(std::string("manifest field '") + what + "' must be a 3-vector");
  }
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json brdf_json(const BrdfParams& p) {
  return {{"albedo", vec_json(p.albedo)}, {"roughness", p.roughness}, {"metallic", p.metallic}};
}

json env_json(const ShEnvironment& env) {
  const auto c = env.coefficients();
  return {{"order", env.order()}, {"coefficients", std::vector<double>(c.begin(), c.end())}};
}

ShEnvironment json_env(const json& j) {
  return ShEnvironment(j.at("order").get<int>(), j.at("coefficients").get<std::vector<double>>());
}

json scene_json(const SceneSpec& s) {
  json prims = json::array();
  for (const Primitive& p : s.primitives) {
    json jp = {{"center", vec_json(p.center)}, {"brdf", brdf_json(p.brdf)}};
    if (p.kind == Primitive::Kind::sphere) {
      jp["type"] = "sphere";
      jp["radius"] = p.radius;
    } else {
      jp["type"] = "box";
      jp["half_extents"] = vec_json(p.half_extents);
    }
    prims.push_back(jp);
  }
  return {{"name", s.name}, {"primitives", prims}, {"env", env_json(s.env)}};
}

SceneSpec json_scene(const json& j) {
  SceneSpec s;
  s.name = j.value("name", "");
  for (const json& jp : j.at("primitives")) {
    Primitive p;
    const std::string type = jp.at("type").get<std::string>();
    if (type == "sphere") {
      p.kind = Primitive::Kind::sphere;
      p.radius = jp.at("radius").get<double>();
    } else if (type == "box") {
      p.kind = Primitive::Kind::box;
      p.half_extents = json_vec(jp.at("half_extents"), "half_extents");
    } else {
      throw ValidationError("unknown primitive type '" + type + "'");
    }
    p.center = json_vec(jp.at("center"), "center");
    const json& b = jp.at("brdf");
    p.brdf = BrdfParams{json_vec(b.at("albedo"), "albedo"), b.at("roughness").get<double>(),
                        b.at("metallic").get<double>()};
    s.primitives.push_back(p);
  }
  s.env = json_env(j.at("env"));
  s.validate();
  return s;
}

Rotation json_rotation(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 9) {
    throw ValidationError("manifest rotation '" + what + "' must have 9 entries");
  }
  std::array<double, 9> v{};
  for (std::size_t i = 0; i < 9; ++i) {
    v[i] = j[i].get<double>();
  }
  try {
    return Rotation::from_row_major(v, 1e-9);
  } catch (const ValidationError& e) {
    throw ValidationError("manifest rotation '" + what + "': " + e.what());
  }
}

}  // namespace

std::string DatasetManifest::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["schedule"] = {{"rig_steps", schedule.rig_steps},
                   {"turntable_steps", schedule.turntable_steps},
                   {"rig_step_deg", schedule.rig_step_deg},
                   {"turntable_step_deg", schedule.turntable_step_deg},
                   {"rig_axis", vec_json(schedule.axes.rig)},
                   {"turntable_axis", vec_json(schedule.axes.turntable)}};
  j["camera"] = {{"width", camera.width},         {"height", camera.height},
                 {"fx", camera.fx},               {"fy", camera.fy},
                 {"cx", camera.cx},               {"cy", camera.cy},
                 {"position", vec_json(camera.position)}, {"right", vec_json(camera.right)},
                 {"down", vec_json(camera.down)}, {"forward", vec_json(camera.forward)}};
  j["near"] = near;
  j["far"] = far;
  j["mm_per_unit"] = mm_per_unit;
  j["seed"] = seed;
  json frames_json = json::array();
  for (const FrameRecord& f : frames) {
    frames_json.push_back({{"m", f.m},
                           {"n", f.n},
                           {"image", f.image},
                           {"image_linear", f.image_linear},
                           {"mask", f.mask},
                           {"normal", f.normal},
                           {"R_a", f.rig.row_major()},
                           {"R_b", f.turntable.row_major()}});
  }
  j["frames"] = frames_json;
  if (ground_truth) {
    j["ground_truth"] = scene_json(*ground_truth);
  }
  if (!features_dir.empty()) {
    j["features_dir"] = features_dir;
  }
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const json j = json::parse(text);
    if (!j.contains("schema_version")) {
      throw ValidationError("manifest lacks schema_version");
    }
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kManifestSchemaVersion) {
      throw ValidationError("unsupported manifest schema_version " +
                            std::to_string(m.schema_version));
    }
    const json& s = j.at("schedule");
    m.schedule.rig_steps = s.at("rig_steps").get<int>();
    m.schedule.turntable_steps = s.at("turntable_steps").get<int>();
    m.schedule.rig_step_deg = s.at("rig_step_deg").get<double>();
    m.schedule.turntable_step_deg = s.at("turntable_step_deg").get<double>();
    m.schedule.axes.rig = json_vec(s.at("rig_axis"), "rig_axis");
    m.schedule.axes.turntable = json_vec(s.at("turntable_axis"), "turntable_axis");
    const json& c = j.at("camera");
    m.camera.width = c.at("width").get<int>();
    m.camera.height = c.at("height").get<int>();
    m.camera.fx = c.at("fx").get<double>();
    m.camera.fy = c.at("fy").get<double>();
    m.camera.cx = c.at("cx").get<double>();
    m.camera.cy = c.at("cy").get<double>();
    m.camera.position = json_vec(c.at("position"), "position");
    m.camera.right = json_vec(c.at("right"), "right");
    m.camera.down = json_vec(c.at("down"), "down");
    m.camera.forward = json_vec(c.at("forward"), "forward");
    m.camera.validate();
    m.near = j.at("near").get<double>();
    m.far = j.at("far").get<double>();
    if (!(m.near > 0.0 && m.near < m.far)) {
      throw ValidationError("manifest needs 0 < near < far");
    }
    m.mm_per_unit = j.value("mm_per_unit", 100.0);
    if (!(m.mm_per_unit > 0.0)) {
      throw ValidationError("mm_per_unit must be positive");
    }
    m.seed = j.value("seed", std::uint64_t{0});
    for (const json& f : j.at("frames")) {
      FrameRecord r;
      r.m = f.at("m").get<int>();
      r.n = f.at("n").get<int>();
      r.image = f.at("image").get<std::string>();
      r.image_linear = f.value("image_linear", "");
      r.mask = f.value("mask", "");
      r.normal = f.value("normal", "");
      const std::string tag = "frame m=" + std::to_string(r.m) + " n=" + std::to_string(r.n);
      r.rig = json_rotation(f.at("R_a"), tag + " R_a");
      r.turntable = json_rotation(f.at("R_b"), tag + " R_b");
      m.frames.push_back(r);
    }
    if (j.contains("ground_truth")) {
      m.ground_truth = json_scene(j.at("ground_truth"));
    }
    m.features_dir = j.value("features_dir", "");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest schema error: ") + e.what());
  }

  const CaptureSchedule sched = m.schedule.build();
  if (m.frames.size() != sched.size()) {
    throw ValidationError("manifest has " + std::to_string(m.frames.size()) +
                          " frames, schedule needs " + std::to_string(sched.size()));
  }
  for (const FrameRecord& f : m.frames) {
    const RigPose& pose = sched.at(f.m, f.n);
    const double err = std::max((pose.rig.matrix() - f.rig.matrix()).cwiseAbs().maxCoeff(),
                                (pose.turntable.matrix() - f.turntable.matrix()).cwiseAbs().maxCoeff());
    if (err > 1e-9) {
      throw ValidationError("frame m=" + std::to_string(f.m) + " n=" + std::to_string(f.n) +
                            " rotations disagree with the schedule");
    }
  }
  return m;
}

namespace {

std::string frame_stem(int m, int n) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "m%d_n%03d", m, n);
  return buf;
}

// Sphere-traced first hit of the object-frame ray, for ground-truth normals.
std::optional<Vec3> trace_normal(const SdfSource& field, const Ray& ray, double near, double far) {
  double t = near;
  for (int step = 0; step < 512 && t < far; ++step) {
    const double d = field.sdf(ray.origin + t * ray.direction);
    if (d < 1e-7) {
      return field.evaluate(ray.origin + t * ray.direction).normal;
    }
    t += d;
  }
  return std::nullopt;
}

}  // namespace

DatasetManifest synth_dataset(const SceneSpec& scene, const SynthOptions& options,
                              const std::filesystem::path& out_dir) {
  scene.validate();
  const CaptureSchedule sched = options.schedule.build();
  const Camera camera = orbit_camera(options.image_size, options.camera_distance,
                                     options.camera_elevation_deg);
  std::error_code ec;
  for (const char* sub : {"images", "linear", "masks", "normals"}) {
    std::filesystem::create_directories(out_dir / sub, ec);
    if (ec) {
      throw RuntimeError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
    }
  }

  const std::shared_ptr<const SdfSource> field = scene.field();
  const PrimitiveMaterial material(scene);
  RenderScene rs;
  rs.field = field.get();
  rs.material = &material;
  rs.env = scene.env;
  RenderConfig rc;
  rc.samples = options.samples;
  rc.sharpness = options.sharpness;
  rc.near = options.camera_distance - 1.0;
  rc.far = options.camera_distance + 1.0;
  rc.seed = options.seed;

  DatasetManifest m;
  m.schedule = options.schedule;
  m.camera = camera;
  m.near = rc.near;
  m.far = rc.far;
  m.mm_per_unit = options.mm_per_unit;
  m.seed = options.seed;
  m.ground_truth = scene;

  for (const RigPose& pose : sched.poses) {
    const RenderedImage img = render_image(pose, camera, rs, rc);
    Image mask(camera.width, camera.height, 1);
    Image normals(camera.width, camera.height, 3);
    for (int y = 0; y < camera.height; ++y) {
      for (int x = 0; x < camera.width; ++x) {
        if (!(img.opacity.at(x, y) > 0.5)) {
          continue;
        }
        mask.at(x, y) = 1.0;
        const Ray local = equivalent_ray(camera.ray(x, y), pose.turntable);
        if (const auto n = trace_normal(*field, local, rc.near, rc.far)) {
          normals.set_rgb(x, y, *n);
        }
      }
    }
    FrameRecord r;
    r.m = pose.rig_step;
    r.n = pose.turntable_step;
    const std::string stem = frame_stem(r.m, r.n);
    r.image = "images/" + stem + ".png";
    r.image_linear = "linear/" + stem + ".pfm";
    r.mask = "masks/" + stem + ".png";
    r.normal = "normals/" + stem + ".pfm";
    r.rig = pose.rig;
    r.turntable = pose.turntable;
    write_png(out_dir / r.image, img.rgb);
    write_pfm(out_dir / r.image_linear, img.rgb);
    write_png(out_dir / r.mask, mask);
    write_pfm(out_dir / r.normal, normals);
    m.frames.push_back(r);
  }

  std::ofstream os(out_dir / "manifest.json");
  os << m.to_json();
  if (!os) {
    throw RuntimeError("cannot write " + (out_dir / "manifest.json").string());
  }
  return m;
}

Dataset::Dataset(DatasetManifest manifest, std::filesystem::path root, std::vector<Frame> frames)
    : manifest_(std::move(manifest)), root_(std::move(root)), frames_(std::move(frames)) {
  for (std::size_t f = 0; f < frames_.size(); ++f) {
    const Image& mask = frames_[f].mask;
    for (std::size_t p = 0; p < mask.data.size(); ++p) {
      if (mask.data[p] > 0.5) {
        masked_pixels_.emplace_back(static_cast<int>(f), static_cast<int>(p));
      }
    }
  }
}

std::string environment_to_json(const ShEnvironment& env) { return env_json(env).dump(2); }

ShEnvironment environment_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    return json_env(j);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid environment file: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ValidationError(std::string("invalid environment file: ") + e.what());
  }
}

Dataset restrict_to_rig_step(const Dataset& dataset, int m) {
  DatasetManifest manifest = dataset.manifest();
  std::vector<FrameRecord> records;
  std::vector<Frame> frames;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (manifest.frames[i].m == m) {
      records.push_back(manifest.frames[i]);
      frames.push_back(dataset.frame(i));
    }
  }
  if (frames.empty()) {
    throw ValidationError("no frames at rig step " + std::to_string(m));
  }
  manifest.frames = std::move(records);
  return Dataset(std::move(manifest), dataset.root(), std::move(frames));
}

Vec3 Dataset::object_view_direction(std::size_t i) const {
  return frames_[i].pose.turntable.matrix().transpose() * camera().forward.normalized();
}

namespace {

std::filesystem::path existing(const std::filesystem::path& root, const std::string& rel) {
  const std::filesystem::path p = root / rel;
  if (!std::filesystem::is_regular_file(p)) {
    throw ValidationError("dataset file not found: " + p.string());
  }
  return p;
}

void check_size(const Image& img, const Camera& cam, const std::filesystem::path& file) {
  if (img.width != cam.width || img.height != cam.height) {
    throw ValidationError("image " + file.string() + " is " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) + ", camera is " +
                          std::to_string(cam.width) + "x" + std::to_string(cam.height));
  }
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) {
    throw ValidationError("cannot open manifest " + manifest_path.string());
  }
  std::stringstream ss;
  ss << is.rdbuf();
  DatasetManifest m = DatasetManifest::from_json(ss.str());
  const std::filesystem::path root = manifest_path.parent_path();
  const CaptureSchedule sched = m.schedule.build();

  std::vector<Frame> frames;
  for (const FrameRecord& r : m.frames) {
    Frame f;
    f.pose = sched.at(r.m, r.n);
    f.pose.rig = r.rig;
    f.pose.turntable = r.turntable;
    if (!r.image_linear.empty()) {
      const auto p = existing(root, r.image_linear);
      f.rgb = read_pfm(p);
      check_size(f.rgb, m.camera, p);
    } else {
      const auto p = existing(root, r.image);
      f.rgb = read_png(p);
      check_size(f.rgb, m.camera, p);
    }
    if (f.rgb.channels != 3) {
      throw ValidationError("frame image must have 3 channels: " + r.image);
    }
    existing(root, r.image);
    if (!r.mask.empty()) {
      const auto p = existing(root, r.mask);
      f.mask = read_png(p);
      check_size(f.mask, m.camera, p);
      if (f.mask.channels != 1) {
        throw ValidationError("mask must be single-channel: " + p.string());
      }
      for (double& v : f.mask.data) {
        v = v > 0.5 ? 1.0 : 0.0;
      }
    } else {
      f.mask = Image(m.camera.width, m.camera.height, 1, 1.0);
    }
    if (!r.normal.empty()) {
      const auto p = existing(root, r.normal);
      f.normal = read_pfm(p);
      check_size(f.normal, m.camera, p);
    }
    frames.push_back(std::move(f));
  }
  return Dataset(std::move(m), root, std::move(frames));
}

namespace {

void push_ray(const Dataset& d, RayBatch& b, int frame, int pixel) {
  const Camera& cam = d.camera();
  const int x = pixel % cam.width;
  const int y = pixel / cam.width;
  const Frame& f = d.frame(static_cast<std::size_t>(frame));
  b.rays.push_back(cam.ray(x, y));
  b.frame.push_back(frame);
  b.px.push_back(x);
  b.py.push_back(y);
  b.target.push_back(f.rgb.rgb(x, y));
  b.mask.push_back(f.mask.at(x, y));
}

}  // namespace

RayBatch sample_rays(const Dataset& dataset, int batch_size, MaskPolicy policy,
                     std::uint64_t seed) {
  if (batch_size <= 0 || dataset.size() == 0) {
    throw ValidationError("ray sampling needs a positive batch size and a non-empty dataset");
  }
  std::mt19937_64 rng(mix_seed(seed, 0x5A3B));
  const Camera& cam = dataset.camera();
  const std::uint64_t pixels = static_cast<std::uint64_t>(cam.width) * cam.height;
  const auto& inside = dataset.masked_pixels();
  const int n_inside =
      policy == MaskPolicy::balanced && !inside.empty() ? (batch_size + 1) / 2 : 0;
  RayBatch b;
  for (int i = 0; i < batch_size; ++i) {
    if (i < n_inside) {
      const auto& [frame, pixel] = inside[rng() % inside.size()];
      push_ray(dataset, b, frame, pixel);
    } else {
      const std::uint64_t k = rng() % (pixels * dataset.size());
      push_ray(dataset, b, static_cast<int>(k / pixels), static_cast<int>(k % pixels));
    }
  }
  return b;
}

RayBatch frame_rays(const Dataset& dataset, std::size_t frame_index) {
  const Camera& cam = dataset.camera();
  RayBatch b;
  for (int p = 0; p < cam.width * cam.height; ++p) {
    push_ray(dataset, b, static_cast<int>(frame_index), p);
  }
  return b;
}

}  // namespace rmvps

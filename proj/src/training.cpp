#include "rmvps/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "json.hpp"

namespace rmvps {

using nlohmann::json;

void LossWeights::validate() const {
  if (!(eikonal >= 0.0) || !(occ >= 0.0) || !(geo >= 0.0)) {
    throw ValidationError("loss weights must be non-negative");
  }
}

double loss_rendering(std::span<const Vec3> predicted, std::span<const Vec3> target,
                      std::vector<Vec3>* grad) {
  if (predicted.size() != target.size()) {
    throw ValidationError("rendering loss needs equal batch sizes");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    sum += (target[i] - predicted[i]).squaredNorm();
  }
  const double loss = std::sqrt(sum);
  if (grad != nullptr) {
    grad->assign(predicted.size(), Vec3::Zero());
    if (loss > 0.0) {
      for (std::size_t i = 0; i < predicted.size(); ++i) {
        (*grad)[i] = (predicted[i] - target[i]) / loss;
      }
    }
  }
  return loss;
}

double loss_eikonal(std::span<const Vec3> gradients, std::vector<Vec3>* grad) {
  double sum = 0.0;
  if (grad != nullptr) {
    grad->assign(gradients.size(), Vec3::Zero());
  }
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    const double norm = gradients[i].norm();
    sum += (norm - 1.0) * (norm - 1.0);
    if (grad != nullptr && norm > 0.0) {
      (*grad)[i] = 2.0 * (norm - 1.0) * gradients[i] / norm;
    }
  }
  return sum;
}

double loss_occ(std::span<const double> predicted, std::span<const double> marched,
                std::vector<double>* grad) {
  if (predicted.size() != marched.size()) {
    throw ValidationError("occlusion loss needs equal batch sizes");
  }
  if (grad != nullptr) {
    grad->assign(predicted.size(), 0.0);
  }
  if (predicted.empty()) {
    return 0.0;
  }
  const double inv = 1.0 / static_cast<double>(predicted.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - marched[i];
    sum += std::abs(d);
    if (grad != nullptr) {
      (*grad)[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
    }
  }
  return sum * inv;
}

double loss_geo(const Matrix& target, const Matrix& latent, Matrix* grad) {
  if (target.rows() != latent.rows() || target.cols() != latent.cols()) {
    throw ValidationError("geometry loss needs matching feature shapes (" +
                          std::to_string(target.rows()) + "x" + std::to_string(target.cols()) +
                          " vs " + std::to_string(latent.rows()) + "x" +
                          std::to_string(latent.cols()) + ")");
  }
  if (target.rows() != kLatentDim) {
    throw ValidationError("geometry loss compares 32-dimensional features");
  }
  if (grad != nullptr) {
    grad->setZero(latent.rows(), latent.cols());
  }
  if (latent.cols() == 0) {
    return 0.0;
  }
  const double inv = 1.0 / static_cast<double>(latent.cols());
  if (grad != nullptr) {
    *grad = 2.0 * inv * (latent - target);
  }
  return (target - latent).squaredNorm() * inv;
}

LossReport total_loss(const LossParts& parts, const LossWeights& weights) {
  LossReport r;
  r.parts = parts;
  r.total = parts.rendering + weights.eikonal * parts.eikonal + weights.occ * parts.occ +
            weights.geo * parts.geo;
  return r;
}

Adam::Adam(std::size_t parameter_count, const AdamConfig& config)
    : config_(config),
      m_(Vector::Zero(static_cast<Eigen::Index>(parameter_count))),
      v_(Vector::Zero(static_cast<Eigen::Index>(parameter_count))) {
  if (!(config.learning_rate > 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 >= 0.0 && config.beta2 < 1.0) || !(config.epsilon > 0.0)) {
    throw ValidationError("invalid Adam configuration");
  }
}

bool Adam::step(Vector& params, const Vector& grad, std::span<const ParamRange> frozen) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw ValidationError("Adam: parameter and gradient sizes must match the optimizer state");
  }
  if (!grad.allFinite()) {
    ++skipped_;
    return false;
  }
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  std::vector<char> skip;
  if (!frozen.empty()) {
    skip.assign(static_cast<std::size_t>(params.size()), 0);
    for (const ParamRange& r : frozen) {
      std::fill_n(skip.begin() + static_cast<std::ptrdiff_t>(r.offset), r.size, 1);
    }
  }
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    if (!skip.empty() && skip[static_cast<std::size_t>(i)] != 0) {
      continue;
    }
    m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
  }
  return true;
}

void SceneModelConfig::validate() const {
  sdf.validate();
  if (material_freqs < 0 || occlusion_freqs < 0 || gain_freqs < 0 || material_width < 1 ||
      occlusion_width < 1) {
    throw ValidationError("invalid auxiliary network shape");
  }
  if (env_order < 0 || indirect_order < 0) {
    throw ValidationError("SH orders must be non-negative");
  }
  if (!(init_sharpness > 0.0)) {
    throw ValidationError("initial sharpness must be positive");
  }
}

std::string SceneModelConfig::to_json() const {
  json j = {{"sdf",
             {{"frequencies", sdf.frequencies},
              {"hidden_layers", sdf.hidden_layers},
              {"width", sdf.width},
              {"latent_layer", sdf.latent_layer},
              {"latent_dim", sdf.latent_dim},
              {"init_radius", sdf.init_radius},
              {"softplus_beta", sdf.softplus_beta}}},
            {"material_freqs", material_freqs},
            {"material_width", material_width},
            {"occlusion_freqs", occlusion_freqs},
            {"occlusion_width", occlusion_width},
            {"gain_freqs", gain_freqs},
            {"env_order", env_order},
            {"indirect_order", indirect_order},
            {"init_sharpness", init_sharpness},
            {"init_radiance", init_radiance},
            {"seed", seed}};
  return j.dump();
}

SceneModelConfig SceneModelConfig::from_json(const std::string& text) {
  SceneModelConfig c;
  try {
    const json j = json::parse(text);
    const json& s = j.at("sdf");
    c.sdf.frequencies = s.at("frequencies").get<int>();
    c.sdf.hidden_layers = s.at("hidden_layers").get<int>();
    c.sdf.width = s.at("width").get<int>();
    c.sdf.latent_layer = s.at("latent_layer").get<int>();
    c.sdf.latent_dim = s.at("latent_dim").get<int>();
    c.sdf.init_radius = s.at("init_radius").get<double>();
    c.sdf.softplus_beta = s.at("softplus_beta").get<double>();
    c.material_freqs = j.at("material_freqs").get<int>();
    c.material_width = j.at("material_width").get<int>();
    c.occlusion_freqs = j.at("occlusion_freqs").get<int>();
    c.occlusion_width = j.at("occlusion_width").get<int>();
    c.gain_freqs = j.at("gain_freqs").get<int>();
    c.env_order = j.at("env_order").get<int>();
    c.indirect_order = j.at("indirect_order").get<int>();
    c.init_sharpness = j.at("init_sharpness").get<double>();
    c.init_radiance = j.at("init_radiance").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad scene model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

constexpr int kMaterialOutputs = 5;
constexpr double kMetallicInitBias = -3.0;
constexpr double kOcclusionInitBias = -2.0;

}  // namespace

NeuralScene::NeuralScene(const SceneModelConfig& config)
    : config_(config),
      sdf_((config.validate(), config.sdf), config.seed),
      material_({encoding_dim(config.material_freqs), config.material_width,
                 config.material_width, kMaterialOutputs},
                Activation::relu),
      occlusion_({encoding_dim(config.occlusion_freqs) + 3, config.occlusion_width,
                  config.occlusion_width, 1},
                 Activation::relu),
      gain_({encoding_dim(config.gain_freqs), 3}, Activation::relu),
      env_(ShEnvironment::constant(config.env_order, Vec3::Constant(config.init_radiance))),
      indirect_(ShEnvironment::zero(config.indirect_order)),
      log_sharpness_(std::log(config.init_sharpness)) {
  std::mt19937_64 rng(mix_seed(config.seed, 0xA11));
  material_.init(rng, true);
  material_.bias(material_.layer_count() - 1)[4] = kMetallicInitBias;
  occlusion_.init(rng, true);
  occlusion_.bias(occlusion_.layer_count() - 1)[0] = kOcclusionInitBias;
  gain_.init(rng, true);

  std::size_t offset = 0;
  auto add = [&](const std::string& name, std::size_t size) {
    blocks_.push_back(ParamBlock{name, offset, size});
    offset += size;
  };
  add("sdf", static_cast<std::size_t>(sdf_.params().size()));
  add("material", static_cast<std::size_t>(material_.params().size()));
  add("occlusion", static_cast<std::size_t>(occlusion_.params().size()));
  add("gain", static_cast<std::size_t>(gain_.params().size()));
  add("lift", static_cast<std::size_t>(lift_.params().size()));
  add("env", env_.coefficients().size());
  add("indirect_env", indirect_.coefficients().size());
  add("direct_map", 6);
  add("log_sharpness", 1);
  add("background", 3);
}

std::vector<ParamBlock> NeuralScene::blocks() const { return blocks_; }

const ParamBlock& NeuralScene::block(const std::string& name) const {
  for (const ParamBlock& b : blocks_) {
    if (b.name == name) {
      return b;
    }
  }
  throw ValidationError("unknown parameter block '" + name + "'");
}

std::size_t NeuralScene::parameter_count() const {
  return blocks_.back().offset + blocks_.back().size;
}

Vector NeuralScene::pack() const {
  Vector flat(static_cast<Eigen::Index>(parameter_count()));
  auto put = [&](const std::string& name, const double* data) {
    const ParamBlock& b = block(name);
    std::copy_n(data, b.size, flat.data() + b.offset);
  };
  put("sdf", sdf_.params().data());
  put("material", material_.params().data());
  put("occlusion", occlusion_.params().data());
  put("gain", gain_.params().data());
  put("lift", lift_.params().data());
  put("env", env_.coefficients().data());
  put("indirect_env", indirect_.coefficients().data());
  const double map[6] = {map_.gain.x(),   map_.gain.y(),   map_.gain.z(),
                         map_.offset.x(), map_.offset.y(), map_.offset.z()};
  put("direct_map", map);
  put("log_sharpness", &log_sharpness_);
  put("background", background_.data());
  return flat;
}

void NeuralScene::unpack(const Vector& flat) {
  if (static_cast<std::size_t>(flat.size()) != parameter_count()) {
    throw ValidationError("parameter vector has the wrong size");
  }
  auto get = [&](const std::string& name, double* data) {
    const ParamBlock& b = block(name);
    std::copy_n(flat.data() + b.offset, b.size, data);
  };
  get("sdf", sdf_.params().data());
  get("material", material_.params().data());
  get("occlusion", occlusion_.params().data());
  get("gain", gain_.params().data());
  get("lift", lift_.params().data());
  get("env", env_.coefficients().data());
  get("indirect_env", indirect_.coefficients().data());
  double map[6];
  get("direct_map", map);
  map_.gain = Vec3(map[0], map[1], map[2]);
  map_.offset = Vec3(map[3], map[4], map[5]);
  get("log_sharpness", &log_sharpness_);
  get("background", background_.data());
}

namespace {

BrdfParams squash_column(const Matrix& raw, Eigen::Index j) {
  return squash_brdf(raw.block<3, 1>(0, j), raw(3, j), raw(4, j));
}

// Gradient of the squashed parameters with respect to the raw network output.
void squash_backward(const BrdfParams& p, const Vec3& g_albedo, double g_roughness,
                     double g_metallic, Eigen::Ref<Vector> g_raw) {
  for (int c = 0; c < 3; ++c) {
    g_raw[c] = g_albedo[c] * p.albedo[c] * (1.0 - p.albedo[c]);
  }
  const double s = (p.roughness - kRoughnessFloor) / (1.0 - kRoughnessFloor);
  g_raw[3] = g_roughness * (1.0 - kRoughnessFloor) * s * (1.0 - s);
  g_raw[4] = g_metallic * p.metallic * (1.0 - p.metallic);
}

Matrix occlusion_input(const Matrix& points, const Matrix& dirs, int freqs) {
  Matrix enc;
  positional_encoding(points, freqs, enc);
  Matrix x(enc.rows() + 3, points.cols());
  x.topRows(enc.rows()) = enc;
  x.bottomRows(3) = dirs;
  return x;
}

Matrix gain_from_raw(const Matrix& raw) {
  return raw.unaryExpr([](double z) { return 2.0 * sigmoid(z); });
}

}  // namespace

std::vector<BrdfParams> NeuralScene::evaluate(const Matrix& points) const {
  Matrix enc;
  positional_encoding(points, config_.material_freqs, enc);
  const Matrix raw = material_.forward(enc);
  std::vector<BrdfParams> out(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index j = 0; j < points.cols(); ++j) {
    out[static_cast<std::size_t>(j)] = squash_column(raw, j);
  }
  return out;
}

void NeuralScene::evaluate(const Matrix& points, const Matrix& reflections, Vector& occlusion,
                           Matrix& indirect_gain) const {
  const Matrix o = occlusion_.forward(occlusion_input(points, reflections, config_.occlusion_freqs));
  occlusion = o.row(0).transpose().unaryExpr([](double z) { return sigmoid(z); });
  Matrix enc;
  positional_encoding(points, config_.gain_freqs, enc);
  indirect_gain = gain_from_raw(gain_.forward(enc));
}

RenderScene NeuralScene::render_scene() const {
  RenderScene rs;
  rs.field = &sdf_;
  rs.material = this;
  rs.env = env_;
  rs.direct_map = map_;
  rs.indirect_env = &indirect_;
  rs.reflection = this;
  rs.background = background_;
  return rs;
}

namespace {

constexpr char kCheckpointMagic[8] = {'R', 'M', 'V', 'P', 'S', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) {
    b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  os.write(b, 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8] = {};
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  }
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const NeuralScene& scene, int iteration) {
  json header;
  header["version"] = kCheckpointVersion;
  header["iteration"] = iteration;
  header["config"] = json::parse(scene.config().to_json());
  json blocks = json::array();
  for (const ParamBlock& b : scene.blocks()) {
    blocks.push_back({{"name", b.name}, {"size", b.size}});
  }
  header["blocks"] = blocks;
  const std::string text = header.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) {
      throw RuntimeError("cannot write checkpoint " + path.string());
    }
    os.write(kCheckpointMagic, 8);
    put_u64(os, kCheckpointVersion);
    put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    const Vector flat = scene.pack();
    for (Eigen::Index i = 0; i < flat.size(); ++i) {
      put_u64(os, std::bit_cast<std::uint64_t>(flat[i]));
    }
    if (!os) {
      throw RuntimeError("failed writing checkpoint " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw ValidationError("cannot open checkpoint " + path.string());
  }
  char magic[8] = {};
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw ValidationError("not a checkpoint: " + path.string());
  }
  const std::uint64_t version = get_u64(is);
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t len = get_u64(is);
  if (!is || len > (1u << 24)) {
    throw ValidationError("bad checkpoint header in " + path.string());
  }
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  LoadedCheckpoint out{NeuralScene(SceneModelConfig::from_json(header.at("config").dump())),
                       header.at("iteration").get<int>()};
  const std::vector<ParamBlock> expect = out.scene.blocks();
  const json& blocks = header.at("blocks");
  if (blocks.size() != expect.size()) {
    throw ValidationError("checkpoint block list does not match the model");
  }
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (blocks[i].at("name").get<std::string>() != expect[i].name ||
        blocks[i].at("size").get<std::size_t>() != expect[i].size) {
      throw ValidationError("checkpoint block '" + blocks[i].at("name").get<std::string>() +
                            "' does not match the model");
    }
  }
  Vector flat(static_cast<Eigen::Index>(out.scene.parameter_count()));
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    flat[i] = std::bit_cast<double>(get_u64(is));
  }
  if (!is) {
    throw ValidationError("truncated checkpoint " + path.string());
  }
  out.scene.unpack(flat);
  return out;
}

FeatureTargets FeatureTargets::from_oracle(const Dataset& dataset, std::uint64_t seed) {
  FeatureTargets t;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Frame& f = dataset.frame(i);
    if (f.normal.channels != 3) {
      throw ValidationError("oracle features need ground-truth normal maps");
    }
    const RawFeatureMap raw = oracle_features(f.normal, f.mask, static_cast<int>(i), seed);
    t.views_.push_back(View{topk_variance_select(raw.features, kLatentDim).features,
                            dataset.object_view_direction(i)});
  }
  return t;
}

FeatureTargets FeatureTargets::from_raw(const Dataset& dataset,
                                        const std::vector<RawFeatureMap>& maps) {
  if (maps.size() != dataset.size()) {
    throw ValidationError("need one feature map per frame");
  }
  FeatureTargets t;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    t.views_.push_back(View{topk_variance_select(maps[i].features, kLatentDim).features,
                            dataset.object_view_direction(i)});
  }
  return t;
}

BatchPlan make_plan(const Dataset& dataset, const RayBatch& rays, const BatchOptions& options,
                    std::uint64_t seed) {
  options.render.validate();
  BatchPlan plan;
  plan.rays = rays;
  plan.samples = options.render.samples;
  const auto k = static_cast<std::size_t>(plan.samples);
  plan.positions.resize(3, static_cast<Eigen::Index>(rays.size() * k));
  RenderConfig rc = options.render;
  rc.seed = seed;
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const RigPose& pose = dataset.frame(static_cast<std::size_t>(rays.frame[r])).pose;
    plan.local.push_back(equivalent_ray(rays.rays[r], pose.turntable));
    const std::vector<double> t = sample_ray(rc, r);
    for (std::size_t i = 0; i < k; ++i) {
      plan.positions.col(static_cast<Eigen::Index>(r * k + i)) =
          plan.local[r].origin + t[i] * plan.local[r].direction;
    }
  }
  std::mt19937_64 rng(mix_seed(seed, 0xE1C0));
  plan.eikonal_points.resize(3, options.eikonal_points);
  for (Eigen::Index j = 0; j < plan.eikonal_points.cols(); ++j) {
    for (int a = 0; a < 3; ++a) {
      plan.eikonal_points(a, j) = options.bound * (2.0 * to_unit_double(rng()) - 1.0);
    }
  }
  return plan;
}

namespace {

struct Tables {
  std::map<int, ShadingContext> ctx;
  std::map<int, std::vector<Vec3>> grad_direct;
  std::map<int, std::vector<Vec3>> grad_indirect;
};

Vec3 reflect(const Vec3& view, const Vec3& n) { return 2.0 * view.dot(n) * n - view; }

// Gradient through t = 2 (v . n) n - v with respect to n.
Vec3 reflect_backward(const Vec3& view, const Vec3& n, const Vec3& gt) {
  return 2.0 * (view.dot(n) * gt + gt.dot(n) * view);
}

// Gradient through n = g / |g| with respect to g.
Vec3 normalize_backward(const Vec3& g, const Vec3& gn) {
  const double len = g.norm();
  const Vec3 n = g / len;
  return (gn - n * n.dot(gn)) / len;
}

void add_block(Vector& flat, const ParamBlock& b, const double* data) {
  for (std::size_t i = 0; i < b.size; ++i) {
    flat[static_cast<Eigen::Index>(b.offset + i)] += data[i];
  }
}

}  // namespace

BatchResult evaluate_plan(const NeuralScene& scene, BatchPlan& plan, const Dataset& dataset,
                          const FeatureTargets* features, const LossWeights& weights,
                          const BatchOptions& options, Vector* grad) {
  weights.validate();
  const SceneModelConfig& cfg = scene.config();
  const std::size_t n_rays = plan.rays.size();
  const auto k = static_cast<std::size_t>(plan.samples);
  const Eigen::Index n_samples = plan.positions.cols();
  const Eigen::Index n_eik = plan.eikonal_points.cols();
  const double sharp = scene.sharpness();
  const bool want_grad = grad != nullptr;

  // Field at ray samples and eikonal points together.
  Matrix all_points(3, n_samples + n_eik);
  all_points << plan.positions, plan.eikonal_points;
  SdfNetwork::Cache sdf_cache;
  scene.sdf().forward(all_points, sdf_cache, true);
  std::vector<Vec3> normals(static_cast<std::size_t>(n_samples));
  std::vector<char> degenerate(static_cast<std::size_t>(n_samples), 0);
  for (Eigen::Index j = 0; j < n_samples; ++j) {
    bool bad = false;
    normals[static_cast<std::size_t>(j)] = safe_normal(sdf_cache.gradient.col(j), &bad);
    degenerate[static_cast<std::size_t>(j)] = bad ? 1 : 0;
  }

  std::vector<SdfWeights> wts(n_rays);
  std::vector<std::vector<double>> ray_sdf(n_rays);
  for (std::size_t r = 0; r < n_rays; ++r) {
    ray_sdf[r].assign(sdf_cache.sdf.data() + r * k, sdf_cache.sdf.data() + (r + 1) * k);
    wts[r] = sdf_weights(ray_sdf[r], sharp);
  }

  if (!plan.detached_ready) {
    plan.shaded.clear();
    std::vector<Vec3> occ_p;
    std::vector<Vec3> occ_n;
    std::vector<Vec3> occ_t;
    std::vector<Vec3> geo_p;
    std::vector<Vector> geo_f;
    std::vector<Vec3> geo_v;
    for (std::size_t r = 0; r < n_rays; ++r) {
      double wsum = 0.0;
      Vec3 expected = Vec3::Zero();
      std::size_t best = 0;
      for (std::size_t i = 0; i < k; ++i) {
        const double w = wts[r].weights[i];
        if (w > options.shade_threshold) {
          plan.shaded.emplace_back(static_cast<int>(r), static_cast<int>(i));
        }
        wsum += w;
        expected += w * plan.positions.col(static_cast<Eigen::Index>(r * k + i));
        if (w > wts[r].weights[best]) {
          best = i;
        }
      }
      if (wsum <= 0.5) {
        continue;
      }
      const std::size_t j = r * k + best;
      const Vec3 view = -plan.local[r].direction;
      occ_p.push_back(plan.positions.col(static_cast<Eigen::Index>(j)));
      occ_n.push_back(normals[j]);
      occ_t.push_back(reflect(view, normals[j]).normalized());
      const int frame = plan.rays.frame[r];
      if (features != nullptr && plan.rays.mask[r] > 0.5) {
        const FeatureTargets::View& fv = features->view(static_cast<std::size_t>(frame));
        const std::size_t base = fv.selected.index(plan.rays.px[r], plan.rays.py[r]);
        geo_p.push_back(expected / wsum);
        geo_f.push_back(Eigen::Map<const Vector>(fv.selected.data.data() + base, kLatentDim));
        geo_v.push_back(fv.direction);
      }
    }
    const auto n_occ = static_cast<Eigen::Index>(occ_p.size());
    plan.occ_points.resize(3, n_occ);
    plan.occ_dirs.resize(3, n_occ);
    Matrix occ_normals(3, n_occ);
    for (Eigen::Index j = 0; j < n_occ; ++j) {
      plan.occ_points.col(j) = occ_p[static_cast<std::size_t>(j)];
      plan.occ_dirs.col(j) = occ_t[static_cast<std::size_t>(j)];
      occ_normals.col(j) = occ_n[static_cast<std::size_t>(j)];
    }
    const std::vector<OcclusionResult> marched = march_occlusion_batch(
        plan.occ_points, occ_normals, plan.occ_dirs, scene.sdf(), options.occlusion);
    plan.occ_targets.resize(n_occ);
    for (Eigen::Index j = 0; j < n_occ; ++j) {
      plan.occ_targets[j] = marched[static_cast<std::size_t>(j)].hit;
    }
    const auto n_geo = static_cast<Eigen::Index>(geo_p.size());
    plan.geo_points.resize(3, n_geo);
    plan.geo_features.resize(kLatentDim, n_geo);
    plan.geo_views.resize(3, n_geo);
    for (Eigen::Index j = 0; j < n_geo; ++j) {
      plan.geo_points.col(j) = geo_p[static_cast<std::size_t>(j)];
      plan.geo_features.col(j) = geo_f[static_cast<std::size_t>(j)];
      plan.geo_views.col(j) = geo_v[static_cast<std::size_t>(j)];
    }
    plan.detached_ready = true;
  }

  // Shading of the planned samples.
  const auto n_shaded = static_cast<Eigen::Index>(plan.shaded.size());
  Matrix sp(3, n_shaded);
  Matrix refl(3, n_shaded);
  for (Eigen::Index j = 0; j < n_shaded; ++j) {
    const auto [r, i] = plan.shaded[static_cast<std::size_t>(j)];
    const std::size_t idx = static_cast<std::size_t>(r) * k + static_cast<std::size_t>(i);
    sp.col(j) = plan.positions.col(static_cast<Eigen::Index>(idx));
    refl.col(j) = reflect(-plan.local[static_cast<std::size_t>(r)].direction, normals[idx]);
  }
  Matrix mat_enc;
  positional_encoding(sp, cfg.material_freqs, mat_enc);
  Mlp::Cache mat_cache;
  scene.material().forward(mat_enc, mat_cache);
  Mlp::Cache occ_cache;
  scene.occlusion().forward(occlusion_input(sp, refl, cfg.occlusion_freqs), occ_cache);
  Matrix gain_enc;
  positional_encoding(sp, cfg.gain_freqs, gain_enc);
  Mlp::Cache gain_cache;
  scene.gain().forward(gain_enc, gain_cache);
  const Matrix gain = gain_from_raw(gain_cache.output);

  Tables tables;
  const ShEnvironment* indirect = &scene.indirect_environment();
  auto context = [&](int frame) -> const ShadingContext& {
    auto it = tables.ctx.find(frame);
    if (it == tables.ctx.end()) {
      const RigPose& pose = dataset.frame(static_cast<std::size_t>(frame)).pose;
      it = tables.ctx
               .emplace(frame, ShadingContext::build(scene.environment(), pose, indirect,
                                                     scene.direct_map()))
               .first;
      if (want_grad) {
        tables.grad_direct[frame].assign(it->second.direct.radiance.size(), Vec3::Zero());
        tables.grad_indirect[frame].assign(it->second.indirect.radiance.size(), Vec3::Zero());
      }
    }
    return it->second;
  };

  std::vector<PointShadeInput> inputs(static_cast<std::size_t>(n_shaded));
  std::vector<std::vector<Vec3>> radiance(n_rays, std::vector<Vec3>(k, Vec3::Zero()));
  for (Eigen::Index j = 0; j < n_shaded; ++j) {
    const auto [r, i] = plan.shaded[static_cast<std::size_t>(j)];
    const std::size_t idx = static_cast<std::size_t>(r) * k + static_cast<std::size_t>(i);
    PointShadeInput& in = inputs[static_cast<std::size_t>(j)];
    in.params = squash_column(mat_cache.output, j);
    in.normal = normals[idx];
    in.view = -plan.local[static_cast<std::size_t>(r)].direction;
    in.occlusion = sigmoid(occ_cache.output(0, j));
    in.indirect_gain = gain.col(j);
    radiance[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)] =
        shade_point(in, context(plan.rays.frame[static_cast<std::size_t>(r)]));
  }

  BatchResult result;
  result.colors.resize(n_rays);
  result.opacity.resize(n_rays);
  for (std::size_t r = 0; r < n_rays; ++r) {
    Vec3 c = Vec3::Zero();
    for (std::size_t i = 0; i < k; ++i) {
      c += wts[r].weights[i] * radiance[r][i];
    }
    result.colors[r] = c + wts[r].transmittance * scene.background();
    result.opacity[r] = 1.0 - wts[r].transmittance;
  }

  LossParts parts;
  std::vector<Vec3> g_color;
  parts.rendering = loss_rendering(result.colors, plan.rays.target, want_grad ? &g_color : nullptr);

  std::vector<Vec3> grads(static_cast<std::size_t>(all_points.cols()));
  for (Eigen::Index j = 0; j < all_points.cols(); ++j) {
    grads[static_cast<std::size_t>(j)] = sdf_cache.gradient.col(j);
  }
  std::vector<Vec3> g_eik;
  parts.eikonal = loss_eikonal(grads, want_grad ? &g_eik : nullptr);

  Mlp::Cache occ_loss_cache;
  std::vector<double> g_occ;
  std::vector<double> s_pred;
  if (plan.occ_points.cols() > 0) {
    scene.occlusion().forward(
        occlusion_input(plan.occ_points, plan.occ_dirs, cfg.occlusion_freqs), occ_loss_cache);
    for (Eigen::Index j = 0; j < plan.occ_points.cols(); ++j) {
      s_pred.push_back(sigmoid(occ_loss_cache.output(0, j)));
    }
  }
  const std::vector<double> s_march(plan.occ_targets.data(),
                                    plan.occ_targets.data() + plan.occ_targets.size());
  parts.occ = loss_occ(s_pred, s_march, want_grad ? &g_occ : nullptr);
  result.occ_count = static_cast<int>(s_pred.size());

  SdfNetwork::Cache geo_cache;
  Mlp::Cache lift_cache;
  Matrix g_latent;
  const bool use_geo = plan.geo_points.cols() > 0 && weights.geo > 0.0;
  if (use_geo) {
    scene.sdf().forward(plan.geo_points, geo_cache, false);
    const Matrix target = scene.lift().forward(plan.geo_features, plan.geo_views, &lift_cache);
    parts.geo = loss_geo(target, geo_cache.latent, want_grad ? &g_latent : nullptr);
    result.geo_count = static_cast<int>(plan.geo_points.cols());
  }

  result.report = total_loss(parts, weights);
  if (!want_grad) {
    return result;
  }

  // Backward.
  grad->setZero(static_cast<Eigen::Index>(scene.parameter_count()));
  Vector g_sdf_params = Vector::Zero(scene.sdf().params().size());
  Vector g_sdf_values = Vector::Zero(all_points.cols());
  Matrix g_gradient = Matrix::Zero(3, all_points.cols());
  Vec3 g_background = Vec3::Zero();
  double g_sharp = 0.0;

  std::vector<std::vector<Vec3>> g_radiance(n_rays);
  for (std::size_t r = 0; r < n_rays; ++r) {
    const Vec3& gc = g_color[r];
    g_background += wts[r].transmittance * gc;
    std::vector<double> gw(k);
    for (std::size_t i = 0; i < k; ++i) {
      gw[i] = gc.dot(radiance[r][i]);
    }
    g_radiance[r].resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      g_radiance[r][i] = wts[r].weights[i] * gc;
    }
    std::vector<double> gs(k);
    g_sharp += sdf_weights_backward(ray_sdf[r], sharp, wts[r], gw, gc.dot(scene.background()), gs);
    for (std::size_t i = 0; i < k; ++i) {
      g_sdf_values[static_cast<Eigen::Index>(r * k + i)] += gs[i];
    }
  }

  Matrix g_mat_raw = Matrix::Zero(kMaterialOutputs, n_shaded);
  Matrix g_occ_out = Matrix::Zero(1, n_shaded);
  Matrix g_gain_raw = Matrix::Zero(3, n_shaded);
  Vec3 g_map_gain = Vec3::Zero();
  Vec3 g_map_offset = Vec3::Zero();
  std::vector<Vec3> g_normal(static_cast<std::size_t>(n_shaded), Vec3::Zero());
  for (Eigen::Index j = 0; j < n_shaded; ++j) {
    const auto [r, i] = plan.shaded[static_cast<std::size_t>(j)];
    const int frame = plan.rays.frame[static_cast<std::size_t>(r)];
    const PointShadeInput& in = inputs[static_cast<std::size_t>(j)];
    PointShadeGrad pg;
    shade_point_backward(in, tables.ctx.at(frame),
                         g_radiance[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)], pg,
                         tables.grad_direct.at(frame), tables.grad_indirect.at(frame));
    squash_backward(in.params, pg.albedo, pg.roughness, pg.metallic, g_mat_raw.col(j));
    g_occ_out(0, j) = pg.occlusion * in.occlusion * (1.0 - in.occlusion);
    for (int c = 0; c < 3; ++c) {
      const double gval = in.indirect_gain[c];
      g_gain_raw(c, j) = pg.indirect_gain[c] * gval * (1.0 - 0.5 * gval);
    }
    g_map_gain += pg.map_gain;
    g_map_offset += pg.map_offset;
    g_normal[static_cast<std::size_t>(j)] = pg.normal;
  }

  Vector g_material = Vector::Zero(scene.material().params().size());
  if (n_shaded > 0) {
    scene.material().backward(mat_cache, g_mat_raw, g_material, nullptr);
  }
  Vector g_occlusion = Vector::Zero(scene.occlusion().params().size());
  if (n_shaded > 0) {
    Matrix g_occ_in;
    scene.occlusion().backward(occ_cache, g_occ_out, g_occlusion, &g_occ_in);
    const Eigen::Index dir_row = g_occ_in.rows() - 3;
    for (Eigen::Index j = 0; j < n_shaded; ++j) {
      const auto [r, i] = plan.shaded[static_cast<std::size_t>(j)];
      const std::size_t idx = static_cast<std::size_t>(r) * k + static_cast<std::size_t>(i);
      const Vec3 view = -plan.local[static_cast<std::size_t>(r)].direction;
      const Vec3 gt = g_occ_in.block<3, 1>(dir_row, j);
      g_normal[static_cast<std::size_t>(j)] += reflect_backward(view, normals[idx], gt);
    }
  }
  for (Eigen::Index j = 0; j < n_shaded; ++j) {
    const auto [r, i] = plan.shaded[static_cast<std::size_t>(j)];
    const std::size_t idx = static_cast<std::size_t>(r) * k + static_cast<std::size_t>(i);
    if (degenerate[idx] == 0) {
      g_gradient.col(static_cast<Eigen::Index>(idx)) +=
          normalize_backward(sdf_cache.gradient.col(static_cast<Eigen::Index>(idx)),
                             g_normal[static_cast<std::size_t>(j)]);
    }
  }
  Vector g_gain = Vector::Zero(scene.gain().params().size());
  if (n_shaded > 0) {
    scene.gain().backward(gain_cache, g_gain_raw, g_gain, nullptr);
  }

  for (Eigen::Index j = 0; j < all_points.cols(); ++j) {
    g_gradient.col(j) += weights.eikonal * g_eik[static_cast<std::size_t>(j)];
  }
  scene.sdf().backward(sdf_cache, g_sdf_values, g_gradient, Matrix(), g_sdf_params);

  if (!s_pred.empty() && weights.occ > 0.0) {
    Matrix g_out(1, static_cast<Eigen::Index>(s_pred.size()));
    for (std::size_t j = 0; j < s_pred.size(); ++j) {
      g_out(0, static_cast<Eigen::Index>(j)) = weights.occ * g_occ[j] * s_pred[j] * (1.0 - s_pred[j]);
    }
    scene.occlusion().backward(occ_loss_cache, g_out, g_occlusion, nullptr);
  }

  Vector g_lift = Vector::Zero(scene.lift().params().size());
  if (use_geo) {
    scene.sdf().backward(geo_cache, Vector(), Matrix(), weights.geo * g_latent, g_sdf_params);
    scene.lift().backward(lift_cache, -weights.geo * g_latent, g_lift);
  }

  std::vector<double> g_env(scene.environment().coefficients().size(), 0.0);
  std::vector<double> g_ind(scene.indirect_environment().coefficients().size(), 0.0);
  for (auto& [frame, ctx] : tables.ctx) {
    ctx.direct.backpropagate(tables.grad_direct.at(frame), g_env);
    if (ctx.has_indirect) {
      ctx.indirect.backpropagate(tables.grad_indirect.at(frame), g_ind);
    }
  }

  add_block(*grad, scene.block("sdf"), g_sdf_params.data());
  add_block(*grad, scene.block("material"), g_material.data());
  add_block(*grad, scene.block("occlusion"), g_occlusion.data());
  add_block(*grad, scene.block("gain"), g_gain.data());
  add_block(*grad, scene.block("lift"), g_lift.data());
  add_block(*grad, scene.block("env"), g_env.data());
  add_block(*grad, scene.block("indirect_env"), g_ind.data());
  const double g_map[6] = {g_map_gain.x(),   g_map_gain.y(),   g_map_gain.z(),
                           g_map_offset.x(), g_map_offset.y(), g_map_offset.z()};
  add_block(*grad, scene.block("direct_map"), g_map);
  const double g_log_sharp = g_sharp * sharp;
  add_block(*grad, scene.block("log_sharpness"), &g_log_sharp);
  add_block(*grad, scene.block("background"), g_background.data());
  return result;
}

GradientCheckResult check_gradients(NeuralScene& scene, BatchPlan& plan, const Dataset& dataset,
                                    const FeatureTargets* features, const LossWeights& weights,
                                    const BatchOptions& options, int count, double step,
                                    double tolerance, std::uint64_t seed, double floor) {
  Vector grad;
  evaluate_plan(scene, plan, dataset, features, weights, options, &grad);
  const Vector base = scene.pack();
  std::mt19937_64 rng(mix_seed(seed, 0x6C));
  GradientCheckResult out;
  for (int c = 0; c < count; ++c) {
    const auto i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(base.size()));
    Vector p = base;
    p[i] += step;
    scene.unpack(p);
    const double hi =
        evaluate_plan(scene, plan, dataset, features, weights, options, nullptr).report.total;
    p[i] = base[i] - step;
    scene.unpack(p);
    const double lo =
        evaluate_plan(scene, plan, dataset, features, weights, options, nullptr).report.total;
    const double fd = (hi - lo) / (2.0 * step);
    const double rel = std::abs(grad[i] - fd) / std::max({std::abs(grad[i]), std::abs(fd), floor});
    out.indices.push_back(static_cast<std::size_t>(i));
    out.analytic.push_back(grad[i]);
    out.numeric.push_back(fd);
    out.worst_relative = std::max(out.worst_relative, rel);
    out.within_tolerance += rel <= tolerance ? 1 : 0;
    ++out.coordinates;
  }
  scene.unpack(base);
  return out;
}

namespace {

std::vector<ParamRange> frozen_ranges(const NeuralScene& scene,
                                      const std::vector<std::string>& names) {
  std::vector<ParamRange> out;
  for (const std::string& n : names) {
    const ParamBlock& b = scene.block(n);
    out.push_back(ParamRange{b.offset, b.size});
  }
  return out;
}

}  // namespace

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& history) {
  std::ofstream os(path);
  if (!os) {
    throw RuntimeError("cannot write " + path.string());
  }
  os << "iter,rendering,eikonal,occ,geo,total,wall_ms\n";
  os.precision(10);
  for (const LossReport& r : history) {
    os << r.iteration << ',' << r.parts.rendering << ',' << r.parts.eikonal << ','
       << r.parts.occ << ',' << r.parts.geo << ',' << r.total << ',' << r.wall_ms << '\n';
  }
}

double cosine_learning_rate(double base, double final_fraction, int it, int iterations) {
  if (iterations <= 1 || final_fraction == 1.0) {
    return base;
  }
  const double t = static_cast<double>(it - 1) / (iterations - 1);
  return base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(kPi * t)));
}

TrainingResult train_stage1(NeuralScene& scene, const Dataset& dataset,
                            const FeatureTargets* features, const TrainingConfig& config,
                            const ProgressCallback& progress) {
  config.weights.validate();
  if (!(config.final_lr_fraction > 0.0 && config.final_lr_fraction <= 1.0)) {
    throw ValidationError("final learning-rate fraction must lie in (0, 1]");
  }
  if (config.iterations < 0 || config.batch_rays <= 0) {
    throw ValidationError("training needs non-negative iterations and a positive batch size");
  }
  if (features != nullptr && features->size() != dataset.size()) {
    throw ValidationError("feature targets must cover every frame");
  }
  const auto frozen = frozen_ranges(scene, config.frozen_blocks);
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
    const std::uint64_t batch_seed = mix_seed(config.seed, static_cast<std::uint64_t>(it));
    const RayBatch rays =
        sample_rays(dataset, config.batch_rays, config.mask_policy, batch_seed);
    BatchPlan plan = make_plan(dataset, rays, config.batch, batch_seed);
    Vector grad;
    BatchResult br;
    bool finite = true;
    try {
      br = evaluate_plan(scene, plan, dataset, features, config.weights, config.batch, &grad);
      finite = std::isfinite(br.report.total);
    } catch (const RuntimeError&) {
      finite = false;
    }
    if (!finite) {
      scene.unpack(last_good);
      result.diverged = true;
      break;
    }
    last_good = params;
    result.last_good_iteration = it - 1;
    adam.set_learning_rate(cosine_learning_rate(config.adam.learning_rate,
                                                config.final_lr_fraction, it, config.iterations));
    adam.step(params, grad, frozen);
    scene.unpack(params);

    br.report.iteration = it;
    br.report.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(br.report);
    if (progress) {
      progress(br.report);
    }
    if (write && config.checkpoint_every > 0 && it % config.checkpoint_every == 0) {
      write_checkpoint(config.out_dir / "checkpoint.bin", scene, it);
      write_loss_csv(config.out_dir / "loss.csv", result.history);
    }
  }
  if (!result.diverged) {
    result.last_good_iteration = config.iterations;
  }
  if (write) {
    write_checkpoint(config.out_dir / "checkpoint.bin", scene, result.last_good_iteration);
    write_loss_csv(config.out_dir / "loss.csv", result.history);
  }
  return result;
}

}  // namespace rmvps

#include "cli.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "plot.hpp"
#include "rmvps/dataset_io.hpp"
#include "rmvps/image_io.hpp"
#include "rmvps/metrics_mesh.hpp"
#include "rmvps/training.hpp"

namespace rmvps::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct SynthArgs {
  std::string scene;
  std::string schedule = "4x25";
  double rig_step = 90.0;
  double turntable_step = 0.0;  // 0: a full turn over the schedule
  int size = 128;
  int samples = 128;
  double distance = 3.0;
  double elevation = 20.0;
  double mm_per_unit = 100.0;
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainArgs {
  std::string data;
  std::string out;
  int iterations = 1000;
  int batch_rays = 512;
  int samples = 64;
  int eikonal_points = 512;
  double lr = 1e-4;
  double lr_final = 1.0;
  std::uint64_t seed = 0;
  double lambda_eik = 0.1;
  double lambda_occ = 1.0;
  double lambda_geo = 1.0;
  bool no_geo_prior = false;
  bool no_rotation = false;
  std::string features = "auto";
  int width = 64;
  int layers = 8;
  int latent_layer = 6;
  int frequencies = 6;
  double init_radius = 0.5;
  int head_width = 64;
  double init_sharpness = 20.0;
  int env_order = 2;
  int checkpoint_every = 500;
  int progress_every = 100;
  bool stage2 = false;
  int stage2_iterations = 500;
  int stage2_batch_rays = 256;
  int stage2_directions = 128;
  double stage2_lr = 1e-4;
};

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string mesh;
  std::string reference_mesh;
  std::string out;
  int resolution = 128;
  int points = 30000;
  int samples = 64;
  int view_step = 1;
  std::uint64_t seed = 0;
};

struct RelightArgs {
  std::string checkpoint;
  std::string data;
  std::string env;
  std::string out;
  int samples = 64;
  int view_step = 1;
};

struct PlotArgs {
  std::string csv;
  std::string checkpoint;
  std::string data;
  std::string out;
  int samples = 64;
  int view_step = 1;
  double error_scale = 0.25;
  bool linear = false;
};

fs::path manifest_path(const std::string& data) {
  const fs::path p(data);
  return fs::is_directory(p) ? p / "manifest.json" : p;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw RuntimeError("cannot create " + dir.string() + ": " + ec.message());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!os) {
    throw RuntimeError("cannot write " + path.string());
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw ValidationError("cannot open " + path.string());
  }
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::pair<int, int> parse_schedule(const std::string& s) {
  const auto x = s.find('x');
  int m = 0;
  int n = 0;
  try {
    if (x == std::string::npos) {
      throw std::invalid_argument(s);
    }
    std::size_t used = 0;
    m = std::stoi(s.substr(0, x), &used);
    if (used != x) {
      throw std::invalid_argument(s);
    }
    n = std::stoi(s.substr(x + 1), &used);
    if (used != s.size() - x - 1) {
      throw std::invalid_argument(s);
    }
  } catch (const std::exception&) {
    throw ValidationError("schedule must look like MxN, got '" + s + "'");
  }
  if (m < 1 || n < 1) {
    throw ValidationError("schedule needs at least one rig and one turntable step");
  }
  return {m, n};
}

void apply_thread_override() {
  const char* env = std::getenv("RMVPS_THREADS");
  if (env == nullptr || *env == '\0') {
    return;
  }
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 4096) {
    throw ValidationError(std::string("RMVPS_THREADS must be a positive integer, got '") + env +
                          "'");
  }
  omp_set_num_threads(static_cast<int>(n));
}

RenderConfig eval_render_config(const Dataset& data, const NeuralScene& scene, int samples) {
  RenderConfig rc;
  rc.samples = samples;
  rc.near = data.manifest().near;
  rc.far = data.manifest().far;
  rc.sharpness = scene.sharpness();
  return rc;
}

Image clamped(Image img) {
  for (double& v : img.data) {
    v = std::clamp(v, 0.0, 1.0);
  }
  return img;
}

std::string frame_name(const Dataset& data, std::size_t i) {
  const FrameRecord& r = data.manifest().frames[i];
  std::ostringstream os;
  os << std::setfill('0') << "m" << std::setw(2) << r.m << "_n" << std::setw(3) << r.n;
  return os.str();
}

void check_view_step(int step) {
  if (step < 1) {
    throw ValidationError("--view-step must be positive");
  }
}

json cmd_synth(const SynthArgs& a) {
  const auto [m, n] = parse_schedule(a.schedule);
  SynthOptions o;
  o.schedule.rig_steps = m;
  o.schedule.turntable_steps = n;
  o.schedule.rig_step_deg = a.rig_step;
  o.schedule.turntable_step_deg = a.turntable_step > 0.0 ? a.turntable_step : 360.0 / n;
  o.image_size = a.size;
  o.samples = a.samples;
  o.camera_distance = a.distance;
  o.camera_elevation_deg = a.elevation;
  o.mm_per_unit = a.mm_per_unit;
  o.seed = a.seed;
  if (a.size < 8 || a.samples < 2 || a.distance <= 1.0 || a.mm_per_unit <= 0.0) {
    throw ValidationError("synth needs size >= 8, samples >= 2, distance > 1, mm-per-unit > 0");
  }
  const SceneSpec scene = builtin_scene(a.scene);
  const fs::path out(a.out);
  make_dir(out);
  json config = {{"command", "synth"},
                 {"scene", a.scene},
                 {"schedule", a.schedule},
                 {"rig_step_deg", o.schedule.rig_step_deg},
                 {"turntable_step_deg", o.schedule.turntable_step_deg},
                 {"size", a.size},
                 {"samples", a.samples},
                 {"distance", a.distance},
                 {"elevation_deg", a.elevation},
                 {"mm_per_unit", a.mm_per_unit},
                 {"seed", a.seed}};
  write_text(out / "config.json", config.dump(2) + "\n");
  const DatasetManifest manifest = synth_dataset(scene, o, out);
  write_text(out / "environment.json", environment_to_json(scene.env) + "\n");
  return {{"command", "synth"},
          {"status", "ok"},
          {"frames", manifest.frames.size()},
          {"manifest", (out / "manifest.json").string()}};
}

Dataset load_training_data(const TrainArgs& a) {
  Dataset data = load_dataset(manifest_path(a.data));
  if (a.no_rotation) {
    return restrict_to_rig_step(data, 1);
  }
  return data;
}

json cmd_train(const TrainArgs& in, std::ostream& err) {
  TrainArgs a = in;
  if (a.no_geo_prior) {
    a.lambda_geo = 0.0;
  }
  const Dataset data = load_training_data(a);

  SceneModelConfig mc;
  mc.sdf.frequencies = a.frequencies;
  mc.sdf.hidden_layers = a.layers;
  mc.sdf.width = a.width;
  mc.sdf.latent_layer = a.latent_layer;
  mc.sdf.init_radius = a.init_radius;
  mc.material_width = a.head_width;
  mc.occlusion_width = a.head_width;
  mc.env_order = a.env_order;
  mc.init_sharpness = a.init_sharpness;
  mc.seed = a.seed;
  mc.validate();

  std::string feature_source = "none";
  std::optional<FeatureTargets> features;
  if (a.lambda_geo > 0.0) {
    std::string mode = a.features;
    if (mode == "auto") {
      if (!data.manifest().features_dir.empty()) {
        mode = (data.root() / data.manifest().features_dir).string();
      } else if (!data.frames().empty() && data.frame(0).normal.width > 0) {
        mode = "oracle";
      } else {
        mode = "none";
      }
    }
    if (mode == "oracle") {
      for (const Frame& f : data.frames()) {
        if (f.normal.width == 0) {
          throw ValidationError("oracle features need normal maps in the dataset");
        }
      }
      features = FeatureTargets::from_oracle(data, a.seed);
    } else if (mode != "none") {
      const auto maps = load_feature_maps(mode, static_cast<int>(data.size()),
                                          data.camera().height, data.camera().width);
      features = FeatureTargets::from_raw(data, maps);
    }
    feature_source = mode;
  }

  TrainingConfig tc;
  tc.iterations = a.iterations;
  tc.batch_rays = a.batch_rays;
  tc.batch.render.samples = a.samples;
  tc.batch.render.near = data.manifest().near;
  tc.batch.render.far = data.manifest().far;
  tc.batch.render.jitter = true;
  tc.batch.eikonal_points = a.eikonal_points;
  tc.weights.eikonal = a.lambda_eik;
  tc.weights.occ = a.lambda_occ;
  tc.weights.geo = a.lambda_geo;
  tc.adam.learning_rate = a.lr;
  tc.final_lr_fraction = a.lr_final;
  tc.seed = a.seed;
  tc.checkpoint_every = a.checkpoint_every;
  tc.weights.validate();
  tc.batch.render.validate();
  if (a.lr <= 0.0 || !(a.lr_final > 0.0 && a.lr_final <= 1.0) || a.eikonal_points < 1 || a.progress_every < 0) {
    throw ValidationError("train needs lr > 0, lr-final in (0, 1], eikonal points >= 1, progress-every >= 0");
  }

  const fs::path out(a.out);
  make_dir(out);
  tc.out_dir = out;
  json config = {{"command", "train"},
                 {"data", a.data},
                 {"frames", data.size()},
                 {"iterations", a.iterations},
                 {"batch_rays", a.batch_rays},
                 {"samples", a.samples},
                 {"eikonal_points", a.eikonal_points},
                 {"lr", a.lr},
                 {"lr_final_fraction", a.lr_final},
                 {"seed", a.seed},
                 {"weights", {{"eikonal", a.lambda_eik}, {"occ", a.lambda_occ}, {"geo", a.lambda_geo}}},
                 {"geo_prior", a.lambda_geo > 0.0},
                 {"no_rotation", a.no_rotation},
                 {"features", feature_source},
                 {"model", json::parse(mc.to_json())},
                 {"checkpoint_every", a.checkpoint_every},
                 {"stage2", a.stage2 ? json{{"iterations", a.stage2_iterations},
                                            {"batch_rays", a.stage2_batch_rays},
                                            {"directions", a.stage2_directions},
                                            {"lr", a.stage2_lr}}
                                     : json(nullptr)}};
  write_text(out / "config.json", config.dump(2) + "\n");

  NeuralScene scene(mc);
  auto progress = [&](const LossReport& r) {
    if (a.progress_every > 0 && r.iteration % a.progress_every == 0) {
      err << "iter " << r.iteration << " total " << r.total << " rendering " << r.parts.rendering
          << " eikonal " << r.parts.eikonal << " occ " << r.parts.occ << " geo " << r.parts.geo
          << "\n";
    }
  };
  const TrainingResult r1 = train_stage1(scene, data, features ? &*features : nullptr, tc, progress);
  if (r1.diverged) {
    throw RuntimeError("non-finite loss at iteration " +
                       std::to_string(r1.history.size() + 1) +
                       "; checkpoint holds iteration " + std::to_string(r1.last_good_iteration));
  }
  json summary = {{"command", "train"},
                  {"status", "ok"},
                  {"iterations", r1.history.size()},
                  {"checkpoint", (out / "checkpoint.bin").string()},
                  {"loss_csv", (out / "loss.csv").string()}};
  if (!r1.history.empty()) {
    const LossReport& last = r1.history.back();
    summary["final"] = {{"rendering", last.parts.rendering}, {"eikonal", last.parts.eikonal},
                        {"occ", last.parts.occ},             {"geo", last.parts.geo},
                        {"total", last.total}};
  }

  if (a.stage2) {
    Stage2Config s2;
    s2.iterations = a.stage2_iterations;
    s2.batch_rays = a.stage2_batch_rays;
    s2.directions = a.stage2_directions;
    s2.adam.learning_rate = a.stage2_lr;
    s2.seed = a.seed;
    s2.out_dir = out;
    const TrainingResult r2 = train_stage2(scene, data, s2, progress);
    if (r2.diverged) {
      throw RuntimeError("non-finite stage 2 loss at iteration " +
                         std::to_string(r2.history.size() + 1));
    }
    summary["stage2"] = {{"iterations", r2.history.size()},
                         {"checkpoint", (out / "checkpoint_stage2.bin").string()},
                         {"final_rendering",
                          r2.history.empty() ? 0.0 : r2.history.back().parts.rendering}};
  }
  write_text(out / "environment.json", environment_to_json(scene.environment()) + "\n");
  return summary;
}

json cmd_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() == a.mesh.empty()) {
    throw ValidationError("eval needs exactly one of --checkpoint and --mesh");
  }
  check_view_step(a.view_step);
  if (a.resolution < 8 || a.points < 1 || a.samples < 2) {
    throw ValidationError("eval needs resolution >= 8, points >= 1, samples >= 2");
  }
  const Dataset data = load_dataset(manifest_path(a.data));
  const fs::path out(a.out);
  make_dir(out);

  TriangleMesh reference;
  std::string object = "object";
  if (!a.reference_mesh.empty()) {
    reference = read_ply(a.reference_mesh);
  } else {
    if (!data.manifest().ground_truth) {
      throw ValidationError("dataset has no ground truth scene; pass --reference-mesh");
    }
    object = data.manifest().ground_truth->name;
    reference = marching_cubes(*data.manifest().ground_truth->field(), a.resolution);
  }

  std::optional<LoadedCheckpoint> ckpt;
  TriangleMesh mesh;
  if (!a.checkpoint.empty()) {
    ckpt.emplace(read_checkpoint(a.checkpoint));
    mesh = marching_cubes(ckpt->scene.sdf(), a.resolution);
  } else {
    mesh = read_ply(a.mesh);
  }
  if (mesh.empty()) {
    throw RuntimeError("reconstruction has no surface");
  }
  write_ply(out / "mesh.ply", mesh);
  write_obj(out / "mesh.obj", mesh);
  write_ply(out / "reference.ply", reference);

  ChamferOptions co;
  co.points = a.points;
  co.mm_per_unit = data.manifest().mm_per_unit;
  co.seed = a.seed;
  MetricRow row;
  row.object = object;
  row.chamfer_mm = mesh_chamfer_mm(mesh, reference, co);
  row.psnr_db = std::numeric_limits<double>::quiet_NaN();
  row.ssim = std::numeric_limits<double>::quiet_NaN();

  json summary = {{"command", "eval"}, {"status", "ok"}, {"object", object},
                  {"chamfer_mm", row.chamfer_mm}};
  if (ckpt) {
    const NeuralScene& scene = ckpt->scene;
    const RenderConfig rc = eval_render_config(data, scene, a.samples);
    std::ofstream views(out / "views.csv");
    views << "view,m,n,psnr_db,ssim\n";
    double psum = 0.0;
    double ssum = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(a.view_step)) {
      const RenderedImage img = render_image(data.frame(i).pose, data.camera(), scene.render_scene(), rc);
      const Image pred = clamped(img.rgb);
      const Image ref = clamped(data.frame(i).rgb);
      const double p = psnr(pred, ref);
      const double s = ssim(pred, ref);
      const FrameRecord& fr = data.manifest().frames[i];
      views << i << "," << fr.m << "," << fr.n << "," << std::setprecision(10) << p << "," << s
            << "\n";
      psum += p;
      ssum += s;
      ++count;
    }
    if (!views) {
      throw RuntimeError("cannot write " + (out / "views.csv").string());
    }
    row.psnr_db = psum / count;
    row.ssim = ssum / count;
    summary["psnr_db"] = row.psnr_db;
    summary["ssim"] = row.ssim;
    summary["views"] = count;
  }
  write_metric_csv(out / "metrics.csv", {row});
  summary["metrics_csv"] = (out / "metrics.csv").string();
  return summary;
}

json cmd_relight(const RelightArgs& a) {
  check_view_step(a.view_step);
  if (a.samples < 2) {
    throw ValidationError("relight needs samples >= 2");
  }
  const LoadedCheckpoint ckpt = read_checkpoint(a.checkpoint);
  const Dataset data = load_dataset(manifest_path(a.data));
  const fs::path out(a.out);
  make_dir(out);
  RenderScene rs = ckpt.scene.render_scene();
  if (!a.env.empty()) {
    rs.env = environment_from_json(read_text(a.env));
    rs.direct_map = DirectLightMap{};
  }
  write_text(out / "environment.json", environment_to_json(rs.env) + "\n");
  const RenderConfig rc = eval_render_config(data, ckpt.scene, a.samples);
  std::ofstream csv(out / "relight.csv");
  csv << "view,m,n,psnr_db,ssim\n";
  double psum = 0.0;
  double ssum = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(a.view_step)) {
    const RenderedImage img = render_image(data.frame(i).pose, data.camera(), rs, rc);
    const Image pred = clamped(img.rgb);
    write_png(out / ("relight_" + frame_name(data, i) + ".png"), pred);
    const Image ref = clamped(data.frame(i).rgb);
    const double p = psnr(pred, ref);
    const double s = ssim(pred, ref);
    const FrameRecord& fr = data.manifest().frames[i];
    csv << i << "," << fr.m << "," << fr.n << "," << std::setprecision(10) << p << "," << s << "\n";
    psum += p;
    ssum += s;
    ++count;
  }
  if (!csv) {
    throw RuntimeError("cannot write " + (out / "relight.csv").string());
  }
  return {{"command", "relight"},
          {"status", "ok"},
          {"views", count},
          {"environment", a.env.empty() ? "recovered" : a.env},
          {"psnr_db", psum / count},
          {"ssim", ssum / count}};
}

struct LossTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> values;  // per column
};

LossTable read_loss_csv(const fs::path& path) {
  std::istringstream is(read_text(path));
  LossTable t;
  std::string line;
  if (!std::getline(is, line) || line.empty()) {
    throw ValidationError("empty loss CSV " + path.string());
  }
  std::stringstream header(line);
  std::string cell;
  while (std::getline(header, cell, ',')) {
    t.columns.push_back(cell);
  }
  t.values.resize(t.columns.size());
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) {
      continue;
    }
    std::stringstream ls(line);
    std::size_t c = 0;
    while (std::getline(ls, cell, ',')) {
      if (c >= t.columns.size()) {
        throw ValidationError("too many cells on row " + std::to_string(row) + " of " + path.string());
      }
      try {
        t.values[c].push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ValidationError("bad number '" + cell + "' in " + path.string());
      }
      ++c;
    }
    if (c != t.columns.size()) {
      throw ValidationError("short row " + std::to_string(row) + " in " + path.string());
    }
  }
  return t;
}

json cmd_plot(const PlotArgs& a) {
  if (a.csv.empty() && a.checkpoint.empty()) {
    throw ValidationError("plot needs --csv, or --checkpoint with --data");
  }
  if (a.checkpoint.empty() != a.data.empty()) {
    throw ValidationError("error maps need both --checkpoint and --data");
  }
  check_view_step(a.view_step);
  if (a.error_scale <= 0.0) {
    throw ValidationError("--error-scale must be positive");
  }
  const fs::path out(a.out);
  make_dir(out);
  json summary = {{"command", "plot"}, {"status", "ok"}};
  json curves = json::array();
  if (!a.csv.empty()) {
    const LossTable t = read_loss_csv(a.csv);
    const auto x_it = std::find(t.columns.begin(), t.columns.end(), "iter");
    if (x_it == t.columns.end()) {
      throw ValidationError("loss CSV has no 'iter' column");
    }
    const std::vector<double>& x = t.values[static_cast<std::size_t>(x_it - t.columns.begin())];
    std::ofstream stats(out / "loss_summary.csv");
    stats << "column,first,last,min,max\n";
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      const std::string& name = t.columns[c];
      if (name == "iter" || name == "wall_ms") {
        continue;
      }
      const std::vector<double>& y = t.values[c];
      write_png(out / ("loss_" + name + ".png"), plot_curve(x, y, !a.linear));
      curves.push_back(name);
      if (!y.empty()) {
        stats << name << "," << std::setprecision(10) << y.front() << "," << y.back() << ","
              << *std::min_element(y.begin(), y.end()) << ","
              << *std::max_element(y.begin(), y.end()) << "\n";
      }
    }
    if (!stats) {
      throw RuntimeError("cannot write " + (out / "loss_summary.csv").string());
    }
  }
  summary["loss_plots"] = curves;

  if (!a.checkpoint.empty()) {
    const LoadedCheckpoint ckpt = read_checkpoint(a.checkpoint);
    const Dataset data = load_dataset(manifest_path(a.data));
    const RenderConfig rc = eval_render_config(data, ckpt.scene, a.samples);
    std::ofstream csv(out / "errors.csv");
    csv << "view,m,n,mean_abs_error,psnr_db\n";
    int count = 0;
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(a.view_step)) {
      const RenderedImage img =
          render_image(data.frame(i).pose, data.camera(), ckpt.scene.render_scene(), rc);
      const Image pred = clamped(img.rgb);
      const Image ref = clamped(data.frame(i).rgb);
      write_png(out / ("error_" + frame_name(data, i) + ".png"), error_map(pred, ref, a.error_scale));
      double mae = 0.0;
      for (std::size_t k = 0; k < pred.data.size(); ++k) {
        mae += std::abs(pred.data[k] - ref.data[k]);
      }
      mae /= static_cast<double>(pred.data.size());
      const FrameRecord& fr = data.manifest().frames[i];
      csv << i << "," << fr.m << "," << fr.n << "," << std::setprecision(10) << mae << ","
          << psnr(pred, ref) << "\n";
      ++count;
    }
    if (!csv) {
      throw RuntimeError("cannot write " + (out / "errors.csv").string());
    }
    summary["error_maps"] = count;
  }
  return summary;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rotated-capture multi-view photometric stereo", "rmvps"};
  app.require_subcommand(1);

  SynthArgs sa;
  CLI::App* synth = app.add_subcommand("synth", "Render a synthetic dataset");
  synth->add_option("--scene", sa.scene, "Built-in scene: sphere_lambert, two_sphere")->required();
  synth->add_option("--schedule", sa.schedule, "Rig x turntable steps, e.g. 4x25")->capture_default_str();
  synth->add_option("--rig-step", sa.rig_step, "Rig step in degrees")->capture_default_str();
  synth->add_option("--turntable-step", sa.turntable_step, "Turntable step in degrees (default 360/N)");
  synth->add_option("--size", sa.size, "Image width and height")->capture_default_str();
  synth->add_option("--samples", sa.samples, "Samples per ray")->capture_default_str();
  synth->add_option("--distance", sa.distance, "Camera distance")->capture_default_str();
  synth->add_option("--elevation", sa.elevation, "Camera elevation in degrees")->capture_default_str();
  synth->add_option("--mm-per-unit", sa.mm_per_unit, "Scene scale")->capture_default_str();
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_option("--out", sa.out, "Output directory")->required();

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "Fit the neural scene to a dataset");
  train->add_option("--data", ta.data, "Manifest or dataset directory")->required();
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--iterations", ta.iterations)->capture_default_str();
  train->add_option("--batch-rays", ta.batch_rays)->capture_default_str();
  train->add_option("--samples", ta.samples, "Samples per ray")->capture_default_str();
  train->add_option("--eikonal-points", ta.eikonal_points)->capture_default_str();
  train->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--lr-final", ta.lr_final, "Cosine decay to this fraction of --lr")
      ->capture_default_str();
  train->add_option("--seed", ta.seed)->capture_default_str();
  train->add_option("--lambda-eik", ta.lambda_eik)->capture_default_str();
  train->add_option("--lambda-occ", ta.lambda_occ)->capture_default_str();
  CLI::Option* geo = train->add_option("--lambda-geo", ta.lambda_geo)->capture_default_str();
  train->add_flag("--no-geo-prior", ta.no_geo_prior, "Same as --lambda-geo 0")->excludes(geo);
  train->add_flag("--no-rotation", ta.no_rotation, "Train on rig step 1 frames only");
  train->add_option("--features", ta.features, "auto, oracle, none or a feature directory")
      ->capture_default_str();
  train->add_option("--width", ta.width, "SDF hidden width")->capture_default_str();
  train->add_option("--layers", ta.layers, "SDF hidden layers")->capture_default_str();
  train->add_option("--latent-layer", ta.latent_layer)->capture_default_str();
  train->add_option("--frequencies", ta.frequencies, "SDF positional encoding")->capture_default_str();
  train->add_option("--init-radius", ta.init_radius)->capture_default_str();
  train->add_option("--head-width", ta.head_width, "Material and occlusion MLP width")
      ->capture_default_str();
  train->add_option("--init-sharpness", ta.init_sharpness)->capture_default_str();
  train->add_option("--env-order", ta.env_order)->capture_default_str();
  train->add_option("--checkpoint-every", ta.checkpoint_every)->capture_default_str();
  train->add_option("--progress-every", ta.progress_every)->capture_default_str();
  train->add_flag("--stage2", ta.stage2, "Run the Monte-Carlo refinement afterwards");
  train->add_option("--stage2-iterations", ta.stage2_iterations)->capture_default_str();
  train->add_option("--stage2-batch-rays", ta.stage2_batch_rays)->capture_default_str();
  train->add_option("--stage2-directions", ta.stage2_directions)->capture_default_str();
  train->add_option("--stage2-lr", ta.stage2_lr)->capture_default_str();

  EvalArgs ea;
  CLI::App* eval = app.add_subcommand("eval", "Mesh extraction, Chamfer distance, PSNR and SSIM");
  eval->add_option("--data", ea.data, "Manifest or dataset directory")->required();
  CLI::Option* eck = eval->add_option("--checkpoint", ea.checkpoint);
  eval->add_option("--mesh", ea.mesh, "PLY reconstruction instead of a checkpoint")->excludes(eck);
  eval->add_option("--reference-mesh", ea.reference_mesh, "PLY reference (default: ground truth)");
  eval->add_option("--out", ea.out)->required();
  eval->add_option("--resolution", ea.resolution, "Marching cubes cells per axis")->capture_default_str();
  eval->add_option("--points", ea.points, "Chamfer samples per mesh")->capture_default_str();
  eval->add_option("--samples", ea.samples, "Samples per ray")->capture_default_str();
  eval->add_option("--view-step", ea.view_step)->capture_default_str();
  eval->add_option("--seed", ea.seed)->capture_default_str();

  RelightArgs ra;
  CLI::App* relight = app.add_subcommand("relight", "Render a checkpoint under an SH environment");
  relight->add_option("--checkpoint", ra.checkpoint)->required();
  relight->add_option("--data", ra.data, "Dataset giving poses, camera and reference images")->required();
  relight->add_option("--env", ra.env, "SH environment JSON (default: the recovered light)");
  relight->add_option("--out", ra.out)->required();
  relight->add_option("--samples", ra.samples)->capture_default_str();
  relight->add_option("--view-step", ra.view_step)->capture_default_str();

  PlotArgs pa;
  CLI::App* plot = app.add_subcommand("plot", "Loss curves and error maps");
  plot->add_option("--csv", pa.csv, "Loss CSV written by train");
  plot->add_option("--checkpoint", pa.checkpoint);
  plot->add_option("--data", pa.data);
  plot->add_option("--out", pa.out)->required();
  plot->add_option("--samples", pa.samples)->capture_default_str();
  plot->add_option("--view-step", pa.view_step)->capture_default_str();
  plot->add_option("--error-scale", pa.error_scale)->capture_default_str();
  plot->add_flag("--linear", pa.linear, "Linear instead of log loss axis");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const CLI::App* shown = &app;
    for (const CLI::App* sub : {synth, train, eval, relight, plot}) {
      if (sub->parsed()) {
        shown = sub;
      }
    }
    err << shown->help();
    return kExitValidation;
  }

  try {
    apply_thread_override();
    json summary;
    if (synth->parsed()) {
      summary = cmd_synth(sa);
    } else if (train->parsed()) {
      summary = cmd_train(ta, err);
    } else if (eval->parsed()) {
      summary = cmd_eval(ea);
    } else if (relight->parsed()) {
      summary = cmd_relight(ra);
    } else {
      summary = cmd_plot(pa);
    }
    out << summary.dump() << "\n";
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace rmvps::cli

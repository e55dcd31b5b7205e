#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "marf/dataset.hpp"
#include "marf/error.hpp"
#include "marf/evaluation.hpp"
#include "marf/gradcheck.hpp"
#include "marf/parallel.hpp"
#include "marf/render.hpp"
#include "marf/run_config.hpp"
#include "marf/trainer.hpp"

using namespace marf;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct ConfigArgs {
  std::string preset = "desk";
  std::string path;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "Base hyperparameters: desk or paper")->capture_default_str();
    app->add_option("--config", path, "RunConfig JSON applied on top of the preset");
  }
  RunConfig load() const { return path.empty() ? RunConfig::preset(preset) : load_run_config(path, preset); }
};

Vec3 parse_vec3(const std::string& s, const char* what) {
  std::stringstream ss(s);
  std::string part;
  std::vector<double> v;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw InvalidInputError(std::string(what) + " must be three comma-separated numbers");
    }
  }
  if (v.size() != 3) throw InvalidInputError(std::string(what) + " must be three comma-separated numbers");
  return {v[0], v[1], v[2]};
}

std::optional<Eigen::VectorXd> latent_for(const NetworkParams& p, int shape_id) {
  if (p.config.latent_dim == 0) {
    if (shape_id != 0) throw InvalidInputError("network is unconditioned; only shape id 0 exists");
    return std::nullopt;
  }
  if (shape_id < 0 || shape_id >= p.latents.cols()) {
    throw InvalidInputError("shape id " + std::to_string(shape_id) + " outside the latent table (" +
                            std::to_string(p.latents.cols()) + " shapes)");
  }
  return Eigen::VectorXd(p.latents.col(shape_id));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write '" + path + "'");
  f << text << '\n';
}

// ---- dataset ----

struct DatasetArgs {
  ConfigArgs config;
  std::vector<std::string> shapes;
  std::optional<int> views, res;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_dataset(const DatasetArgs& a) {
  RunConfig rc = a.config.load();
  if (a.views) rc.data.views = *a.views;
  if (a.res) rc.data.width = rc.data.height = *a.res;
  if (a.seed) rc.data.seed = *a.seed;
  rc.validate();
  std::vector<Shape> shapes;
  for (const auto& s : a.shapes) shapes.push_back(Shape::parse(s));
  const Dataset ds = generate_dataset(shapes, rc.data);
  write_dataset(ds, a.out);
  for (std::size_t i = 0; i < ds.shapes.size(); ++i) {
    std::size_t hits = 0;
    for (const auto& v : ds.shapes[i].views) hits += v.count(PixelStatus::Hit);
    std::printf("shape %zu %s: %zu views, %zu hit pixels\n", i, ds.shapes[i].spec.c_str(), ds.shapes[i].views.size(),
                hits);
  }
  std::printf("wrote %s\n", a.out.c_str());
  return kOk;
}

// ---- train ----

struct TrainArgs {
  ConfigArgs config;
  std::string dataset, out, metrics, resume, head;
  std::optional<int> epochs, latent_dim, checkpoint_every;
  std::optional<std::uint64_t> seed;
  int stop_after = -1;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  const Dataset ds = read_dataset(a.dataset);
  TrainState state;
  int checkpoint_every = 1;
  int stride = 2;
  if (!a.resume.empty()) {
    state = load_checkpoint(a.resume);
    const RunConfig rc = a.config.load();
    checkpoint_every = a.checkpoint_every.value_or(rc.checkpoint_every);
    stride = rc.stride;
    std::printf("resuming %s at epoch %d\n", a.resume.c_str(), state.epoch);
  } else {
    RunConfig rc = a.config.load();
    if (!a.head.empty()) rc.network.head = parse_head(a.head);
    if (a.epochs) {
      // Keep the hold/decay proportions of the preset.
      const double hold = static_cast<double>(rc.train.hold_epochs) / rc.train.epochs;
      rc.train.epochs = *a.epochs;
      rc.train.hold_epochs = static_cast<int>(std::lround(hold * *a.epochs));
      rc.train.decay_epochs = rc.train.epochs - rc.train.hold_epochs;
    }
    if (a.seed) rc.train.seed = *a.seed;
    if (a.latent_dim) rc.network.latent_dim = *a.latent_dim;
    if (a.checkpoint_every) rc.checkpoint_every = *a.checkpoint_every;
    rc.network.n_shapes = static_cast<int>(ds.shapes.size());
    if (rc.network.n_shapes > 1 && rc.network.latent_dim == 0) {
      throw InvalidInputError("a multi-shape dataset needs network.latent_dim > 0 (--latent-dim)");
    }
    rc.validate();
    checkpoint_every = rc.checkpoint_every;
    stride = rc.stride;
    state = init_train_state(rc.setup());
  }
  if (state.params.config.n_shapes < static_cast<int>(ds.shapes.size())) {
    throw InvalidInputError("dataset has more shapes than the checkpoint's latent table");
  }
  const ViewMap& v0 = ds.shapes.front().views.front();
  if (v0.width % stride != 0 || v0.height % stride != 0) {
    throw InvalidInputError("stride " + std::to_string(stride) + " does not divide the dataset resolution");
  }
  const TrainingItems items = split_dataset(ds, stride);

  TrainRunOptions opts;
  opts.checkpoint_path = a.out;
  opts.metrics_path = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;
  opts.checkpoint_every = checkpoint_every;
  opts.stop_epoch = a.stop_after;
  opts.epoch.dump_dir = std::filesystem::path(a.out).parent_path().string();
  if (opts.epoch.dump_dir.empty()) opts.epoch.dump_dir = ".";
  const bool quiet = a.quiet;
  opts.on_epoch = [quiet](const EpochStats& s) {
    if (quiet) return;
    std::printf("epoch %3d  lr %.3e  loss %.6g  grad %.3g  %.1fs\n", s.epoch, s.lr, s.total, s.grad_norm,
                s.wall_seconds);
    std::fflush(stdout);
  };
  const auto stats = train(state, items, opts);
  if (!stats.empty()) {
    std::printf("first epoch loss %.6g, last epoch loss %.6g\n", stats.front().total, stats.back().total);
  }
  std::printf("wrote %s and %s\n", a.out.c_str(), opts.metrics_path.c_str());
  return kOk;
}

// ---- render / interp ----

struct RenderArgs {
  ConfigArgs config;
  std::string checkpoint, out, mode, view, light, stats;
  std::optional<int> res, orbit;
  std::optional<double> elevation;
  int shape_id = 0;
  std::vector<int> interp;  // idA idB steps
};

std::string frame_path(const std::string& out, const std::string& mode, int frame, bool tag_mode, bool tag_frame) {
  std::filesystem::path p(out);
  std::string stem = p.stem().string();
  if (tag_mode) stem += "_" + mode;
  if (tag_frame) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "_%03d", frame);
    stem += buf;
  }
  const std::string ext = p.has_extension() ? p.extension().string() : ".ppm";
  return (p.parent_path() / (stem + ext)).string();
}

int cmd_render(const RenderArgs& a) {
  RunConfig rc = a.config.load();
  const TrainState state = load_checkpoint(a.checkpoint);
  const NetworkParams& params = state.params;
  if (a.res) rc.render.width = rc.render.height = *a.res;
  if (!a.view.empty()) rc.render.view = parse_vec3(a.view, "--view");
  if (!a.light.empty()) rc.render.params.light = parse_vec3(a.light, "--light");
  if (a.elevation) rc.render.elevation = *a.elevation;
  rc.validate();

  std::vector<RenderMode> modes;
  if (a.mode == "all") {
    modes = all_render_modes();
  } else {
    modes.push_back(a.mode.empty() ? rc.render.mode : parse_render_mode(a.mode));
  }

  // Frames are (view, latent) pairs.
  std::vector<Vec3> views;
  std::vector<std::optional<Eigen::VectorXd>> latents;
  if (!a.interp.empty()) {
    if (a.interp.size() != 3) throw InvalidInputError("--latent-interp takes idA idB steps");
    const auto za = latent_for(params, a.interp[0]), zb = latent_for(params, a.interp[1]);
    if (!za || !zb) throw InvalidInputError("latent interpolation needs a latent-conditioned network");
    for (const auto& z : interpolate_latents(*za, *zb, a.interp[2])) {
      latents.emplace_back(z);
      views.push_back(rc.render.view);
    }
  } else if (a.orbit) {
    views = orbit_directions(*a.orbit, rc.render.elevation);
    latents.assign(views.size(), latent_for(params, a.shape_id));
  } else {
    views.push_back(rc.render.view);
    latents.push_back(latent_for(params, a.shape_id));
  }

  nlohmann::json report = nlohmann::json::array();
  const bool tag_frame = views.size() > 1, tag_mode = modes.size() > 1;
  for (std::size_t f = 0; f < views.size(); ++f) {
    const SurfaceField field = network_field(params, latents[f]);
    const OrthoCamera cam = OrthoCamera::look(views[f], rc.render.width, rc.render.height);
    for (RenderMode m : modes) {
      const RenderResult r = render(field, cam, m, rc.render.params);
      const std::string path = frame_path(a.out, render_mode_name(m), static_cast<int>(f), tag_mode, tag_frame);
      write_ppm(r.image, path);
      std::printf("wrote %s  hit %d  degenerate %d  %.2fs\n", path.c_str(), r.stats.hit, r.stats.degenerate,
                  r.stats.seconds);
      nlohmann::json j = nlohmann::json::parse(r.stats.to_json());
      j["path"] = path;
      j["frame"] = f;
      report.push_back(j);
    }
  }
  if (!a.stats.empty()) write_text(a.stats, report.dump(2));
  return kOk;
}

// ---- eval ----

struct EvalArgs {
  ConfigArgs config;
  std::string checkpoint, oracle, shape, out, csv;
  int shape_id = 0;
  std::optional<int> viewpoints, budget, samples;
  std::optional<std::uint64_t> seed;
};

int cmd_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() == a.oracle.empty()) throw InvalidInputError("give either a checkpoint or --oracle");
  RunConfig rc = a.config.load();
  if (a.viewpoints) rc.eval.viewpoints = *a.viewpoints;
  if (a.budget) rc.eval.ray_budget = *a.budget;
  if (a.samples) rc.eval.samples = *a.samples;
  if (a.seed) rc.eval.seed = *a.seed;
  rc.validate();
  const Shape truth = Shape::parse(a.shape);
  EvalReport rep;
  std::string source;
  if (!a.oracle.empty()) {
    rep = evaluate_shape(Shape::parse(a.oracle), truth, rc.eval);
    source = "oracle:" + a.oracle;
  } else {
    const TrainState state = load_checkpoint(a.checkpoint);
    rep = evaluate_network(state.params, truth, rc.eval, latent_for(state.params, a.shape_id));
    source = a.checkpoint;
  }
  const std::string json = rep.to_json();
  if (a.out.empty()) {
    std::printf("%s\n", json.c_str());
  } else {
    write_text(a.out, json);
    std::printf("precision %.4f recall %.4f iou %.4f cd %.6g\nwrote %s\n", rep.cls.precision, rep.cls.recall,
                rep.cls.iou, rep.cd, a.out.c_str());
  }
  if (!a.csv.empty()) append_results_csv(a.csv, source, a.shape, rep);
  return kOk;
}

// ---- gradcheck ----

struct GradArgs {
  std::string term = "all", mv_mode = "analytic", out;
  GradcheckOptions opts;
};

int cmd_gradcheck(GradArgs a) {
  if (a.mv_mode == "fd") {
    a.opts.mv_mode = MultiviewMode::FiniteDifference;
  } else if (a.mv_mode != "analytic") {
    throw InvalidInputError("--mv-mode must be analytic or fd");
  }
  std::vector<TermCheck> checks;
  if (a.term == "all") {
    checks = check_all_terms(a.opts);
  } else {
    checks.push_back(check_term(a.term, a.opts));
  }
  bool ok = true;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : checks) {
    std::printf("%-6s value %-12.6g rel.err %-10.3e tol %.0e  %s\n", c.term.c_str(), c.value, c.max_rel_error,
                c.tolerance, c.pass ? "PASS" : "FAIL");
    ok = ok && c.pass;
    j.push_back({{"term", c.term},
                 {"value", c.value},
                 {"max_rel_error", c.max_rel_error},
                 {"tolerance", c.tolerance},
                 {"coordinates", c.coordinates},
                 {"pass", c.pass}});
  }
  if (!a.out.empty()) write_text(a.out, j.dump(2));
  std::printf("%s\n", ok ? "all terms pass" : "gradient check FAILED");
  return ok ? kOk : kNumerical;
}

void add_render_options(CLI::App* c, RenderArgs& r) {
  r.config.add(c);
  c->add_option("--out,-o", r.out, "Output image (.ppm); frames and modes get suffixes")->required();
  c->add_option("--mode", r.mode, "Shading mode or 'all'");
  c->add_option("--view", r.view, "Camera view direction x,y,z");
  c->add_option("--light", r.light, "Light travel direction x,y,z (default: headlight)");
  c->add_option("--res", r.res, "Square resolution");
  c->add_option("--elevation", r.elevation, "Orbit elevation in degrees");
  c->add_option("--shape-id", r.shape_id, "Latent column for conditioned networks");
  c->add_option("--stats", r.stats, "Write per-image statistics JSON");
}

int configure_threads(int flag) {
  int n = flag;
  if (n <= 0) {
    if (const char* env = std::getenv("MARF_THREADS")) {
      try {
        n = std::stoi(env);
      } catch (const std::exception&) {
        throw InvalidInputError("MARF_THREADS must be an integer");
      }
    }
  }
  if (n < 0) throw InvalidInputError("thread count must be non-negative");
  set_thread_count(n);
  return thread_count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Medial atom ray fields: dataset generation, training, rendering and evaluation"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: MARF_THREADS, else all cores)");

  DatasetArgs ds;
  auto* c_ds = app.add_subcommand("dataset", "Render depth/normal/silhouette maps of analytic shapes or meshes");
  ds.config.add(c_ds);
  c_ds->add_option("--shape", ds.shapes, "Shape spec (repeat for multi-shape datasets)")->required();
  c_ds->add_option("--views", ds.views, "Number of views");
  c_ds->add_option("--res", ds.res, "Square map resolution");
  c_ds->add_option("--seed", ds.seed, "View rotation seed");
  c_ds->add_option("--out,-o", ds.out, "Dataset file")->required();

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a MARF or the PRIF baseline");
  tr.config.add(c_tr);
  c_tr->add_option("--dataset,-d", tr.dataset, "Dataset file")->required();
  c_tr->add_option("--out,-o", tr.out, "Checkpoint path")->required();
  c_tr->add_option("--metrics", tr.metrics, "Metrics CSV (default: <out>.metrics.csv)");
  c_tr->add_option("--resume", tr.resume, "Continue from a checkpoint");
  c_tr->add_option("--head", tr.head, "marf or prif");
  c_tr->add_option("--epochs", tr.epochs, "Epoch count (hold/decay keep their proportions)");
  c_tr->add_option("--seed", tr.seed, "Training seed");
  c_tr->add_option("--latent-dim", tr.latent_dim, "Latent size for multi-shape datasets");
  c_tr->add_option("--checkpoint-every", tr.checkpoint_every, "Epochs between checkpoints");
  c_tr->add_option("--stop-after", tr.stop_after, "Stop once this many epochs are complete (resumable)");
  c_tr->add_flag("--quiet,-q", tr.quiet, "No per-epoch output");

  RenderArgs rd;
  auto* c_rd = app.add_subcommand("render", "Render a checkpoint");
  c_rd->add_option("checkpoint", rd.checkpoint, "Checkpoint file")->required();
  add_render_options(c_rd, rd);
  c_rd->add_option("--orbit", rd.orbit, "Frames around the z axis");
  c_rd->add_option("--latent-interp", rd.interp, "idA idB steps")->expected(3);

  RenderArgs ip;
  auto* c_ip = app.add_subcommand("interp", "Render latent in-betweens of two shapes");
  c_ip->add_option("checkpoint", ip.checkpoint, "Checkpoint file")->required();
  c_ip->add_option("ids", ip.interp, "idA idB steps")->expected(3)->required();
  add_render_options(c_ip, ip);

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Ray-hit classification, Chamfer and cosine metrics");
  ev.config.add(c_ev);
  c_ev->add_option("checkpoint", ev.checkpoint, "Checkpoint file");
  c_ev->add_option("--oracle", ev.oracle, "Evaluate an exact shape instead of a checkpoint");
  c_ev->add_option("--shape", ev.shape, "Ground-truth shape spec")->required();
  c_ev->add_option("--shape-id", ev.shape_id, "Latent column for conditioned networks");
  c_ev->add_option("--viewpoints", ev.viewpoints, "Viewpoints on the unit sphere");
  c_ev->add_option("--budget", ev.budget, "Ray budget");
  c_ev->add_option("--samples", ev.samples, "Hit points sampled for CD/COS");
  c_ev->add_option("--seed", ev.seed, "Protocol seed");
  c_ev->add_option("--out,-o", ev.out, "Report JSON (default: stdout)");
  c_ev->add_option("--csv", ev.csv, "Append a row to this results CSV");

  GradArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss term");
  c_gc->add_option("--term", gc.term, "Term name, 'total' or 'all'")->capture_default_str();
  c_gc->add_option("--seed", gc.opts.seed, "Seed")->capture_default_str();
  c_gc->add_option("--perturb", gc.opts.perturb, "Scale the analytic gradient by 1+x (self-test)");
  c_gc->add_option("--mv-mode", gc.mv_mode, "analytic or fd")->capture_default_str();
  c_gc->add_option("--rays", gc.opts.rays_per_item, "Rays per item")->capture_default_str();
  c_gc->add_option("--items", gc.opts.items, "Items per batch")->capture_default_str();
  c_gc->add_option("--out,-o", gc.out, "Report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    configure_threads(threads);
    if (c_ds->parsed()) return cmd_dataset(ds);
    if (c_tr->parsed()) return cmd_train(tr);
    if (c_rd->parsed()) return cmd_render(rd);
    if (c_ip->parsed()) return cmd_render(ip);
    if (c_ev->parsed()) return cmd_eval(ev);
    if (c_gc->parsed()) return cmd_gradcheck(gc);
  } catch (const InvalidInputError& e) {
    std::cerr << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DegenerateNormalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

#include "marf/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "marf/error.hpp"

namespace marf {

namespace {

using nlohmann::json;

// Reads optional keys from one JSON object and rejects anything it did not consume.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InvalidInputError("config section '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InvalidInputError("config key '" + where(key) + "': " + e.what());
    }
  }

  void get_vec(const char* key, Vec3& out) {
    std::vector<double> v;
    get(key, v);
    if (!j_.contains(key)) return;
    if (v.size() != 3) throw InvalidInputError("config key '" + where(key) + "' needs three numbers");
    out = Vec3(v[0], v[1], v[2]);
  }

  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw InvalidInputError("unknown config key '" + where(it.key()) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* ease_name(Schedule::Ease e) {
  switch (e) {
    case Schedule::Ease::None: return "none";
    case Schedule::Ease::Linear: return "linear";
    case Schedule::Ease::Sine: return "sine";
  }
  return "none";
}

Schedule::Ease parse_ease(const std::string& s) {
  if (s == "none") return Schedule::Ease::None;
  if (s == "linear") return Schedule::Ease::Linear;
  if (s == "sine") return Schedule::Ease::Sine;
  throw InvalidInputError("unknown ease '" + s + "' (expected none, linear or sine)");
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

void read_network(Section s, NetworkConfig& c) {
  s.get("hidden_layers", c.hidden_layers);
  s.get("width", c.width);
  s.get("n_atoms", c.n_atoms);
  s.get("leaky_slope", c.leaky_slope);
  s.get("dropout_rate", c.dropout_rate);
  s.get("latent_dim", c.latent_dim);
  s.get("n_shapes", c.n_shapes);
  s.get("medial_init", c.medial_init);
  std::string head = head_name(c.head);
  s.get("head", head);
  c.head = parse_head(head);
  s.finish();
}

void read_train(Section s, RunConfig& rc) {
  TrainConfig& c = rc.train;
  s.get("epochs", c.epochs);
  s.get("warmup_steps", c.warmup_steps);
  s.get("peak_lr", c.peak_lr);
  s.get("hold_epochs", c.hold_epochs);
  s.get("final_lr", c.final_lr);
  s.get("decay_epochs", c.decay_epochs);
  s.get("weight_decay", c.weight_decay);
  s.get("grad_clip_norm", c.grad_clip_norm);
  s.get("batch_size", c.batch_size);
  s.get("seed", c.seed);
  s.get("schedule_time_scale", c.schedule_time_scale);
  s.get("checkpoint_every", rc.checkpoint_every);
  s.finish();
}

void read_data(Section s, RunConfig& rc) {
  DatasetOptions& d = rc.data;
  s.get("views", d.views);
  s.get("width", d.width);
  s.get("height", d.height);
  s.get("seed", d.seed);
  s.get("stride", rc.stride);
  if (const json* sil = s.sub("silhouette")) {
    Section t(*sil, s.where("silhouette"));
    t.get("step_fraction", d.silhouette.step_fraction);
    t.get("margin", d.silhouette.margin);
    t.get("floor", d.silhouette.floor);
    t.get("max_steps", d.silhouette.max_steps);
    t.get("refine_steps", d.silhouette.refine_steps);
    t.finish();
  }
  s.finish();
}

void read_loss(Section s, RunConfig& rc) {
  if (const json* sc = s.sub("scale")) {
    Section t(*sc, s.where("scale"));
    for (std::size_t i = 0; i < kTermCount; ++i) t.get(std::string(kTermNames[i]).c_str(), rc.schedule.scale[i]);
    t.finish();
  }
  if (const json* sched = s.sub("schedule")) {
    Section t(*sched, s.where("schedule"));
    for (std::size_t i = 0; i < kTermCount; ++i) {
      const std::string name(kTermNames[i]);
      const json* term = t.sub(name.c_str());
      if (!term) continue;
      Section u(*term, t.where(name));
      Schedule& l = rc.schedule.lambda[i];
      u.get("base", l.base);
      u.get("slope", l.slope);
      u.get("divisor", l.divisor);
      u.get("duration", l.duration);
      u.get("offset", l.offset);
      std::string ease = ease_name(l.ease);
      u.get("ease", ease);
      l.ease = parse_ease(ease);
      u.finish();
    }
    t.finish();
  }
  std::string mode = rc.loss.multiview.mode == MultiviewMode::Analytic ? "analytic" : "fd";
  s.get("multiview_mode", mode);
  if (mode == "analytic") {
    rc.loss.multiview.mode = MultiviewMode::Analytic;
  } else if (mode == "fd") {
    rc.loss.multiview.mode = MultiviewMode::FiniteDifference;
  } else {
    throw InvalidInputError("multiview_mode must be analytic or fd");
  }
  s.get("fd_step", rc.loss.multiview.fd_step);
  s.get("skip_zero_weight", rc.loss.skip_zero_weight);
  if (const json* p = s.sub("prif")) {
    Section t(*p, s.where("prif"));
    t.get("bce", rc.prif.bce);
    t.get("displacement", rc.prif.displacement);
    t.get("normal", rc.prif.normal);
    t.get("multiview", rc.prif.multiview);
    t.finish();
  }
  s.finish();
}

void read_eval(Section s, ProtocolConfig& c) {
  s.get("viewpoints", c.viewpoints);
  s.get("ray_budget", c.ray_budget);
  s.get("samples", c.samples);
  s.get("seed", c.seed);
  s.finish();
}

void read_render(Section s, RenderConfig& c) {
  s.get("width", c.width);
  s.get("height", c.height);
  std::string mode = render_mode_name(c.mode);
  s.get("mode", mode);
  c.mode = parse_render_mode(mode);
  s.get_vec("view", c.view);
  s.get("elevation", c.elevation);
  s.get_vec("light", c.params.light);
  s.get("radius_max", c.params.radius_max);
  s.get("curvature_max", c.params.curvature_max);
  s.get("chunk", c.params.chunk);
  if (const json* t = s.sub("translucency")) {
    Section u(*t, s.where("translucency"));
    u.get("epsilon", c.params.translucency.epsilon);
    u.get("distortion", c.params.translucency.distortion);
    u.get("sharpness", c.params.translucency.sharpness);
    u.finish();
  }
  if (const json* w = s.sub("ward")) {
    Section u(*w, s.where("ward"));
    u.get("a1", c.params.ward.a1);
    u.get("a2", c.params.ward.a2);
    u.finish();
  }
  s.finish();
}

}  // namespace

RunConfig RunConfig::desk() {
  RunConfig c;
  c.network = NetworkConfig::desk();
  c.train = TrainConfig::desk();
  c.eval = ProtocolConfig::desk();
  return c;
}

RunConfig RunConfig::paper() {
  RunConfig c;
  c.network = NetworkConfig::paper();
  c.train = TrainConfig::paper();
  c.data.views = 50;
  c.data.width = 200;
  c.data.height = 200;
  c.stride = 4;
  c.eval = ProtocolConfig::paper();
  c.render.width = 256;
  c.render.height = 256;
  return c;
}

RunConfig RunConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw InvalidInputError("unknown preset '" + name + "' (expected desk or paper)");
}

void RunConfig::validate() const {
  network.validate();
  train.validate();
  eval.validate();
  render.params.translucency.validate();
  render.params.ward.validate();
  if (checkpoint_every <= 0) throw InvalidInputError("checkpoint_every must be positive");
  if (data.views <= 0 || data.width <= 0 || data.height <= 0) throw InvalidInputError("data views and resolution must be positive");
  if (stride <= 0 || data.width % stride != 0 || data.height % stride != 0) {
    throw InvalidInputError("data stride must divide the resolution");
  }
  if (render.width <= 0 || render.height <= 0) throw InvalidInputError("render resolution must be positive");
  if (render.params.chunk <= 0) throw InvalidInputError("render chunk must be positive");
  if (!(loss.multiview.fd_step > 0.0)) throw InvalidInputError("fd_step must be positive");
}

TrainSetup RunConfig::setup() const { return {network, train, schedule, loss, prif}; }

std::string RunConfig::to_json() const {
  json sched = json::object(), scale = json::object();
  for (std::size_t i = 0; i < kTermCount; ++i) {
    const Schedule& l = schedule.lambda[i];
    const std::string name(kTermNames[i]);
    sched[name] = {{"base", l.base}, {"slope", l.slope},       {"divisor", l.divisor},
                   {"ease", ease_name(l.ease)}, {"duration", l.duration}, {"offset", l.offset}};
    scale[name] = schedule.scale[i];
  }
  const SilhouetteOptions& sil = data.silhouette;
  json j{
      {"network",
       {{"hidden_layers", network.hidden_layers},
        {"width", network.width},
        {"n_atoms", network.n_atoms},
        {"leaky_slope", network.leaky_slope},
        {"dropout_rate", network.dropout_rate},
        {"latent_dim", network.latent_dim},
        {"n_shapes", network.n_shapes},
        {"head", head_name(network.head)},
        {"medial_init", network.medial_init}}},
      {"train",
       {{"epochs", train.epochs},
        {"warmup_steps", train.warmup_steps},
        {"peak_lr", train.peak_lr},
        {"hold_epochs", train.hold_epochs},
        {"final_lr", train.final_lr},
        {"decay_epochs", train.decay_epochs},
        {"weight_decay", train.weight_decay},
        {"grad_clip_norm", train.grad_clip_norm},
        {"batch_size", train.batch_size},
        {"seed", train.seed},
        {"schedule_time_scale", train.schedule_time_scale},
        {"checkpoint_every", checkpoint_every}}},
      {"data",
       {{"views", data.views},
        {"width", data.width},
        {"height", data.height},
        {"seed", data.seed},
        {"stride", stride},
        {"silhouette",
         {{"step_fraction", sil.step_fraction},
          {"margin", sil.margin},
          {"floor", sil.floor},
          {"max_steps", sil.max_steps},
          {"refine_steps", sil.refine_steps}}}}},
      {"loss",
       {{"scale", scale},
        {"schedule", sched},
        {"multiview_mode", loss.multiview.mode == MultiviewMode::Analytic ? "analytic" : "fd"},
        {"fd_step", loss.multiview.fd_step},
        {"skip_zero_weight", loss.skip_zero_weight},
        {"prif",
         {{"bce", prif.bce}, {"displacement", prif.displacement}, {"normal", prif.normal}, {"multiview", prif.multiview}}}}},
      {"eval",
       {{"viewpoints", eval.viewpoints}, {"ray_budget", eval.ray_budget}, {"samples", eval.samples}, {"seed", eval.seed}}},
      {"render",
       {{"width", render.width},
        {"height", render.height},
        {"mode", render_mode_name(render.mode)},
        {"view", vec_json(render.view)},
        {"elevation", render.elevation},
        {"light", vec_json(render.params.light)},
        {"radius_max", render.params.radius_max},
        {"curvature_max", render.params.curvature_max},
        {"chunk", render.params.chunk},
        {"translucency",
         {{"epsilon", render.params.translucency.epsilon},
          {"distortion", render.params.translucency.distortion},
          {"sharpness", render.params.translucency.sharpness}}},
        {"ward", {{"a1", render.params.ward.a1}, {"a2", render.params.ward.a2}}}}}};
  return j.dump(2);
}

RunConfig parse_run_config(const std::string& text, const std::string& base_preset) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidInputError(std::string("config is not valid JSON: ") + e.what());
  }
  Section top(j, "");
  std::string preset = base_preset;
  top.get("preset", preset);
  RunConfig rc = RunConfig::preset(preset);
  if (const json* s = top.sub("network")) read_network(Section(*s, "network"), rc.network);
  if (const json* s = top.sub("train")) read_train(Section(*s, "train"), rc);
  if (const json* s = top.sub("data")) read_data(Section(*s, "data"), rc);
  if (const json* s = top.sub("loss")) read_loss(Section(*s, "loss"), rc);
  if (const json* s = top.sub("eval")) read_eval(Section(*s, "eval"), rc.eval);
  if (const json* s = top.sub("render")) read_render(Section(*s, "render"), rc.render);
  top.finish();
  rc.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path, const std::string& base_preset) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), base_preset);
}

}  // namespace marf

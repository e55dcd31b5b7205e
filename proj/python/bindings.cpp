#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "marf/dataset.hpp"
#include "marf/error.hpp"
#include "marf/evaluation.hpp"
#include "marf/gradcheck.hpp"
#include "marf/parallel.hpp"
#include "marf/render.hpp"
#include "marf/run_config.hpp"
#include "marf/trainer.hpp"

namespace py = pybind11;
using namespace marf;

namespace {

std::optional<Eigen::VectorXd> latent_for(const NetworkParams& p, int shape_id) {
  if (p.config.latent_dim == 0) return std::nullopt;
  if (shape_id < 0 || shape_id >= p.latents.cols()) throw InvalidInputError("shape id outside the latent table");
  return Eigen::VectorXd(p.latents.col(shape_id));
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["precision"] = r.cls.precision;
  d["recall"] = r.cls.recall;
  d["iou"] = r.cls.iou;
  d["tp"] = r.cls.tp;
  d["fp"] = r.cls.fp;
  d["fn"] = r.cls.fn;
  d["tn"] = r.cls.tn;
  d["cd"] = r.cd;
  d["cos_medial"] = r.cos_medial ? py::cast(r.cos_medial->value) : py::none();
  d["cos_analytical"] = r.cos_analytical ? py::cast(r.cos_analytical->value) : py::none();
  d["rays"] = r.rays;
  d["samples"] = r.samples;
  d["notes"] = r.notes;
  return d;
}

py::array_t<std::uint8_t> image_array(const Image& img) {
  py::array_t<std::uint8_t> a({img.height, img.width, 3});
  std::copy(img.rgb.begin(), img.rgb.end(), a.mutable_data());
  return a;
}

ad::Mat columns(const Eigen::Ref<const Eigen::MatrixXd>& m, const char* what) {
  // Accept N x 3 (numpy row layout) and return 3 x N.
  if (m.cols() != 3) throw InvalidInputError(std::string(what) + " must have shape (N, 3)");
  return m.transpose();
}

}  // namespace

PYBIND11_MODULE(_marf, m) {
  m.doc() = "Medial atom ray fields";

  py::register_exception<InvalidInputError>(m, "InvalidInputError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<DegenerateNormalError>(m, "DegenerateNormalError", PyExc_ArithmeticError);

  m.def("set_threads", &set_thread_count, py::arg("n"));
  m.def("threads", &thread_count);

  py::class_<MedialAtom>(m, "MedialAtom")
      .def(py::init([](const Vec3& c, double r) { return MedialAtom{c, r}; }), py::arg("center"), py::arg("radius"))
      .def_readwrite("center", &MedialAtom::center)
      .def_readwrite("radius", &MedialAtom::radius);

  py::class_<IntersectionOutcome>(m, "IntersectionOutcome")
      .def_readonly("hit", &IntersectionOutcome::hit)
      .def_readonly("discriminant", &IntersectionOutcome::discriminant)
      .def_readonly("point", &IntersectionOutcome::point)
      .def_readonly("silhouette", &IntersectionOutcome::silhouette)
      .def_readonly("signed_silhouette", &IntersectionOutcome::signed_silhouette)
      .def_readonly("t", &IntersectionOutcome::t);

  m.def(
      "intersect_atom",
      [](const Vec3& origin, const Vec3& direction, const MedialAtom& atom) {
        return intersect_atom({origin, direction}, atom);
      },
      py::arg("origin"), py::arg("direction"), py::arg("atom"));
  m.def(
      "canonicalize",
      [](const Vec3& origin, const Vec3& direction) {
        const CanonicalRay c = canonicalize({origin, direction});
        return py::make_tuple(c.q_hat, c.moment, c.foot);
      },
      py::arg("origin"), py::arg("direction"), "(q_hat, moment, foot) of a ray");

  py::class_<Shape>(m, "Shape")
      .def_static("parse", &Shape::parse, py::arg("spec"))
      .def_property_readonly("spec", &Shape::spec)
      .def(
          "cast",
          [](const Shape& s, const Vec3& origin, const Vec3& direction) -> py::object {
            const CastResult r = s.cast({origin, direction});
            if (!r.hit) return py::none();
            return py::make_tuple(r.point, r.normal);
          },
          py::arg("origin"), py::arg("direction"), "(point, normal) of the first hit, or None");

  m.def(
      "make_dataset",
      [](const std::vector<std::string>& specs, const std::string& path, int views, int resolution,
         std::uint64_t seed) {
        DatasetOptions opts;
        opts.views = views;
        opts.width = opts.height = resolution;
        opts.seed = seed;
        std::vector<Shape> shapes;
        for (const auto& s : specs) shapes.push_back(Shape::parse(s));
        write_dataset(generate_dataset(shapes, opts), path);
      },
      py::arg("shapes"), py::arg("path"), py::arg("views") = 20, py::arg("resolution") = 64, py::arg("seed") = 0);

  m.def(
      "config",
      [](const std::string& preset, const std::string& overrides) {
        return parse_run_config(overrides.empty() ? "{}" : overrides, preset).to_json();
      },
      py::arg("preset") = "desk", py::arg("overrides") = "",
      "Resolved RunConfig JSON for a preset plus JSON overrides");

  py::class_<TrainState>(m, "Checkpoint")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const TrainState& s, const std::string& path) { save_checkpoint(s, path); }, py::arg("path"))
      .def_readonly("epoch", &TrainState::epoch)
      .def_readonly("step", &TrainState::step)
      .def_property_readonly("head", [](const TrainState& s) { return std::string(head_name(s.params.config.head)); })
      .def_property_readonly("n_atoms", [](const TrainState& s) { return s.params.config.n_atoms; })
      .def_property_readonly("parameter_count", [](const TrainState& s) { return s.params.parameter_count(); })
      .def(
          "predict",
          [](const TrainState& s, const Eigen::MatrixXd& origins, const Eigen::MatrixXd& directions, int shape_id) {
            ad::Mat q = columns(directions, "directions");
            q.colwise().normalize();
            const ad::Mat raw = predict_raw(s.params, columns(origins, "origins"), q, latent_for(s.params, shape_id));
            return Eigen::MatrixXd(raw.transpose());
          },
          py::arg("origins"), py::arg("directions"), py::arg("shape_id") = 0,
          "Raw network outputs per ray: MARF gives 3n centers then n radii, PRIF gives (t, logit)")
      .def(
          "surface",
          [](const TrainState& s, const Eigen::MatrixXd& origins, const Eigen::MatrixXd& directions, int shape_id) {
            ad::Mat q = columns(directions, "directions");
            q.colwise().normalize();
            const SurfaceBatch b = evaluate_surface(network_field(s.params, latent_for(s.params, shape_id)),
                                                    columns(origins, "origins"), q, false);
            py::dict d;
            d["hit"] = std::vector<bool>(b.hit.begin(), b.hit.end());
            d["point"] = Eigen::MatrixXd(b.point.transpose());
            d["center"] = Eigen::MatrixXd(b.center.transpose());
            d["radius"] = Eigen::VectorXd(b.radius.transpose());
            d["winner"] = b.winner;
            return d;
          },
          py::arg("origins"), py::arg("directions"), py::arg("shape_id") = 0);

  m.def(
      "train",
      [](const std::string& dataset, const std::string& checkpoint, const std::string& preset,
         const std::string& overrides, const std::string& metrics) {
        const Dataset ds = read_dataset(dataset);
        RunConfig rc = parse_run_config(overrides.empty() ? "{}" : overrides, preset);
        rc.network.n_shapes = static_cast<int>(ds.shapes.size());
        rc.validate();
        TrainState state = init_train_state(rc.setup());
        TrainRunOptions opts;
        opts.checkpoint_path = checkpoint;
        opts.metrics_path = metrics;
        opts.checkpoint_every = rc.checkpoint_every;
        std::vector<EpochStats> stats;
        {
          py::gil_scoped_release release;
          stats = train(state, split_dataset(ds, rc.stride), opts);
        }
        std::vector<double> losses;
        for (const auto& e : stats) losses.push_back(e.total);
        return losses;
      },
      py::arg("dataset"), py::arg("checkpoint"), py::arg("preset") = "desk", py::arg("overrides") = "",
      py::arg("metrics") = "", "Trains from scratch; returns the per-epoch mean loss");

  m.def(
      "render",
      [](const TrainState& s, const Vec3& view, int resolution, const std::string& mode, int shape_id) {
        const OrthoCamera cam = OrthoCamera::look(view, resolution, resolution);
        RenderResult r;
        {
          py::gil_scoped_release release;
          r = render(network_field(s.params, latent_for(s.params, shape_id)), cam, parse_render_mode(mode));
        }
        return py::make_tuple(image_array(r.image), r.winner);
      },
      py::arg("checkpoint"), py::arg("view"), py::arg("resolution") = 128, py::arg("mode") = "lambertian",
      py::arg("shape_id") = 0, "(H x W x 3 uint8 image, per-pixel winner)");
  m.def("render_modes", [] {
    std::vector<std::string> names;
    for (RenderMode mode : all_render_modes()) names.emplace_back(render_mode_name(mode));
    return names;
  });

  m.def(
      "evaluate",
      [](const TrainState& s, const std::string& shape, int viewpoints, int budget, int samples, std::uint64_t seed,
         int shape_id) {
        const ProtocolConfig pc{viewpoints, budget, samples, seed};
        return report_dict(evaluate_network(s.params, Shape::parse(shape), pc, latent_for(s.params, shape_id)));
      },
      py::arg("checkpoint"), py::arg("shape"), py::arg("viewpoints") = 200, py::arg("budget") = 10000,
      py::arg("samples") = 3000, py::arg("seed") = 0, py::arg("shape_id") = 0);
  m.def(
      "evaluate_oracle",
      [](const std::string& predicted, const std::string& truth, int viewpoints, int budget, int samples,
         std::uint64_t seed) {
        const ProtocolConfig pc{viewpoints, budget, samples, seed};
        return report_dict(evaluate_shape(Shape::parse(predicted), Shape::parse(truth), pc));
      },
      py::arg("predicted"), py::arg("truth"), py::arg("viewpoints") = 200, py::arg("budget") = 10000,
      py::arg("samples") = 3000, py::arg("seed") = 0);

  m.def(
      "chamfer",
      [](const Eigen::MatrixXd& u, const Eigen::MatrixXd& v) {
        auto pts = [](const Eigen::MatrixXd& a) {
          if (a.cols() != 3) throw InvalidInputError("point clouds must have shape (N, 3)");
          std::vector<Vec3> out;
          for (Eigen::Index i = 0; i < a.rows(); ++i) out.push_back(a.row(i).transpose());
          return out;
        };
        return chamfer(pts(u), pts(v));
      },
      py::arg("u"), py::arg("v"));
  m.def(
      "classification",
      [](const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
        const Classification c = classification_metrics(pred, gt);
        return py::make_tuple(c.precision, c.recall, c.iou);
      },
      py::arg("pred"), py::arg("gt"), "(precision, recall, IoU) of two hit-flag sequences");

  m.def(
      "gradcheck",
      [](const std::string& term, std::uint64_t seed, double perturb) {
        GradcheckOptions opts;
        opts.seed = seed;
        opts.perturb = perturb;
        std::vector<TermCheck> checks = term == "all" ? check_all_terms(opts) : std::vector{check_term(term, opts)};
        py::list out;
        for (const auto& c : checks) {
          py::dict d;
          d["term"] = c.term;
          d["max_rel_error"] = c.max_rel_error;
          d["tolerance"] = c.tolerance;
          d["pass"] = c.pass;
          out.append(d);
        }
        return out;
      },
      py::arg("term") = "all", py::arg("seed") = 0, py::arg("perturb") = 0.0);
}

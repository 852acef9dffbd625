#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "haccn/evaluation.hpp"
#include "haccn/io.hpp"
#include "haccn/synth.hpp"
#include "haccn/training.hpp"
#include "haccn/weak.hpp"

namespace py = pybind11;
using namespace haccn;

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

Array to_array(const DensityMap& d) {
  Array a({d.height, d.width});
  std::copy(d.values.begin(), d.values.end(), a.mutable_data());
  return a;
}

Array to_array(const Tensor& t) {
  Array a({t.channels, t.height, t.width});
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

DensityMap to_density(const Array& a, int scale) {
  if (a.ndim() != 2) throw ShapeError("density map must be 2-D");
  DensityMap d(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), scale);
  std::copy(a.data(), a.data() + a.size(), d.values.begin());
  return d;
}

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 2) {
    Tensor t(1, static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), t.data.begin());
    return t;
  }
  if (a.ndim() != 3) throw ShapeError("expected a (C, H, W) array");
  Tensor t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

PointAnnotation to_annotation(const Array& points, int height, int width) {
  PointAnnotation ann{"array", width, height, {}};
  if (points.size() == 0) return ann;
  if (points.ndim() != 2 || points.shape(1) != 2) throw ShapeError("points must be an (N, 2) array of (x, y)");
  auto p = points.unchecked<2>();
  for (py::ssize_t i = 0; i < p.shape(0); ++i) ann.points.push_back({p(i, 0), p(i, 1)});
  return ann;
}

Array points_array(const PointAnnotation& ann) {
  Array a({static_cast<py::ssize_t>(ann.points.size()), py::ssize_t{2}});
  auto m = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < ann.points.size(); ++i) {
    m(static_cast<py::ssize_t>(i), 0) = ann.points[i].x;
    m(static_cast<py::ssize_t>(i), 1) = ann.points[i].y;
  }
  return a;
}

ClassBoundaries boundaries_from(const std::optional<std::vector<double>>& v) {
  ClassBoundaries b;
  if (!v) return b;
  if (v->size() != b.thresholds.size()) throw InvalidArgument("boundaries need 5 values");
  std::copy(v->begin(), v->end(), b.thresholds.begin());
  b.validate();
  return b;
}

std::vector<CountResult> pairs(const std::vector<double>& gt, const std::vector<double>& pred) {
  if (gt.size() != pred.size()) throw InvalidArgument("gt and pred lengths differ");
  std::vector<CountResult> r;
  for (std::size_t i = 0; i < gt.size(); ++i) r.push_back({std::to_string(i), gt[i], pred[i]});
  return r;
}

}  // namespace

PYBIND11_MODULE(_haccn, m) {
  m.doc() = "Attention-guided density-map crowd counting (C++ core).";

  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<InvalidData>(m, "InvalidData", PyExc_ValueError);
  py::register_exception<Diverged>(m, "Diverged", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "generate_density_map",
      [](const Array& points, int height, int width, double sigma) {
        auto ann = to_annotation(points, height, width);
        return to_array(generate_density_map(ann, sigma));
      },
      py::arg("points"), py::arg("height"), py::arg("width"), py::arg("sigma") = kDefaultSigma);
  m.def(
      "downsample_density_map",
      [](const Array& dmap, int factor) { return to_array(downsample_density_map(to_density(dmap, 1), factor)); },
      py::arg("dmap"), py::arg("factor"));
  m.def(
      "segmentation_mask",
      [](const Array& dmap, double threshold) {
        auto mask = derive_segmentation_mask(to_density(dmap, 1), threshold);
        py::array_t<std::uint8_t> a({mask.height, mask.width});
        std::copy(mask.values.begin(), mask.values.end(), a.mutable_data());
        return a;
      },
      py::arg("dmap"), py::arg("threshold") = kDefaultSegThreshold);
  m.def(
      "density_class",
      [](double count, const std::optional<std::vector<double>>& b) {
        return static_cast<int>(assign_density_class(count, boundaries_from(b)));
      },
      py::arg("count"), py::arg("boundaries") = py::none());

  m.def(
      "aggregate",
      [](const Array& scores, const std::string& method, double r) {
        auto agg = parse_aggregation(method, r);
        if (scores.ndim() == 2) {
          auto t = to_tensor(scores);
          return py::cast(aggregate_plane(t.channel(0), agg));
        }
        auto t = to_tensor(scores);
        if (t.channels != kNumClasses) throw ShapeError("expected 6 score planes");
        auto s = aggregate_scores(t, agg);
        return py::cast(std::vector<double>(s.begin(), s.end()));
      },
      py::arg("scores"), py::arg("method") = "lse", py::arg("r") = 4.0);
  m.def(
      "pseudo_gt",
      [](const Array& scores, const std::vector<double>& priors, const std::string& norm) {
        if (priors.size() != kNumClasses) throw InvalidArgument("need 6 class priors");
        ClassPriors p;
        std::copy(priors.begin(), priors.end(), p.n.begin());
        PseudoGtNormalization n = norm == "plane" ? PseudoGtNormalization::kPlaneSoftmax
                                                  : PseudoGtNormalization::kPixelSoftmax;
        if (norm != "plane" && norm != "pixel") throw InvalidArgument("norm must be pixel or plane");
        return to_array(generate_pseudo_gt(to_tensor(scores), p, n));
      },
      py::arg("scores"), py::arg("priors"), py::arg("norm") = "pixel");

  m.def(
      "mae", [](const std::vector<double>& gt, const std::vector<double>& pred) { return mae(pairs(gt, pred)); },
      py::arg("gt"), py::arg("pred"));
  m.def(
      "mse", [](const std::vector<double>& gt, const std::vector<double>& pred) { return mse(pairs(gt, pred)); },
      py::arg("gt"), py::arg("pred"));

  m.def(
      "synth_scene",
      [](const std::string& preset, int size, std::uint64_t seed) {
        auto spec = synth::preset_spec(synth::parse_preset(preset), size);
        spec.seed = seed;
        auto s = synth::generate_scene(spec);
        return py::make_tuple(to_array(s.image), points_array(s.ann));
      },
      py::arg("preset") = "source", py::arg("size") = 64, py::arg("seed") = 0);

  m.def(
      "read_dmap", [](const std::string& path) { return to_array(io::read_dmap(path)); }, py::arg("path"));
  m.def(
      "write_dmap",
      [](const std::string& path, const Array& dmap, int scale) { io::write_dmap(path, to_density(dmap, scale)); },
      py::arg("path"), py::arg("dmap"), py::arg("scale") = 1);

  py::class_<NetworkParams>(m, "Params")
      .def("checksum",
           [](const NetworkParams& p, const std::optional<std::vector<std::string>>& groups) {
             if (!groups) return p.checksum();
             GroupSet g;
             for (const auto& n : *groups) g.insert(parse_group(n));
             return p.checksum(g);
           },
           py::arg("groups") = py::none())
      .def("scalar_count", [](const NetworkParams& p) { return p.scalar_count(); })
      .def("names", [](const NetworkParams& p) {
        std::vector<std::string> out;
        for (const auto& t : p.all()) out.push_back(t.name);
        return out;
      });

  py::class_<HaCcn>(m, "Model")
      .def(py::init([](const std::string& ablation, double channel_scale, int input_size) {
             ModelConfig c;
             c.channel_scale = channel_scale;
             c.input_size = input_size;
             return HaCcn(apply_ablation(c, parse_ablation(ablation)));
           }),
           py::arg("ablation") = "full", py::arg("channel_scale") = 0.25, py::arg("input_size") = 64)
      .def("init_params", &HaCcn::init_params, py::arg("seed") = 0)
      .def("config", [](const HaCcn& h) { return io::config_to_json(h.config()); })
      .def(
          "predict",
          [](const HaCcn& h, const NetworkParams& p, const Array& image) {
            auto r = infer_full_image(h, p, to_tensor(image));
            return py::make_tuple(to_array(r.density), r.count);
          },
          py::arg("params"), py::arg("image"));

  m.def(
      "load_checkpoint",
      [](const std::string& path) {
        auto ck = io::load_checkpoint(path);
        return py::make_tuple(HaCcn(ck.config), std::move(ck.params));
      },
      py::arg("path"));
  m.def(
      "save_checkpoint",
      [](const std::string& path, const HaCcn& h, const NetworkParams& p) { io::save_checkpoint(path, h.config(), p); },
      py::arg("path"), py::arg("model"), py::arg("params"));

  m.def(
      "train_synthetic",
      [](const std::string& ablation, int n_images, int iterations, double lr, double channel_scale,
         std::uint64_t seed) {
        ModelConfig mc;
        mc.channel_scale = channel_scale;
        mc.input_size = 64;
        mc = apply_ablation(mc, parse_ablation(ablation));
        TrainConfig tc;
        tc.iterations = iterations;
        tc.learning_rate = lr;
        tc.patch_size = 64;
        tc.patches_per_image = 1;
        tc.val_fraction = 0.0;
        tc.seed = seed;
        auto data = synth::generate_dataset_in_memory(n_images, synth::preset_spec(synth::Preset::kSource, 64), seed);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(mc, tc, data);
        }
        std::vector<double> losses;
        for (const auto& h : r.history) losses.push_back(h.total_loss);
        return py::make_tuple(HaCcn(mc), std::move(r.params), losses);
      },
      py::arg("ablation") = "full", py::arg("n_images") = 4, py::arg("iterations") = 20, py::arg("lr") = 3e-4,
      py::arg("channel_scale") = 0.125, py::arg("seed") = 0);
}

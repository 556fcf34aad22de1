#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "clusvpr/checkpoint.hpp"
#include "clusvpr/config.hpp"
#include "clusvpr/training.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using namespace clusvpr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_image(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("image: expected an H x W x 3 array");
  Tensor t({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)), 3});
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  Array a(shape);
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

Array to_array(const std::vector<double>& v) {
  Array a(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

std::vector<std::vector<double>> to_rows(const std::vector<Array>& rows) {
  std::vector<std::vector<double>> out;
  for (const auto& r : rows) out.push_back(to_vector(r));
  return out;
}

GeoTag to_geo(const std::pair<double, double>& p, const std::string& mode) {
  if (mode == "planar") return GeoTag::planar(p.first, p.second);
  if (mode == "spherical") return GeoTag::spherical(p.first, p.second);
  throw std::invalid_argument("geo mode must be planar or spherical");
}

py::list hits_to_list(const std::vector<Hit>& hits) {
  py::list out;
  for (const auto& h : hits) out.append(py::make_tuple(h.id, h.similarity));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Place recognition with clustering attention and grouped VLAD aggregation";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalFailure>(m, "NumericalFailure", PyExc_ArithmeticError);

  m.def("preset_names", &preset_names);
  m.def(
      "resolve_config", [](const std::string& name_or_path) { return dump_config(load_config(name_or_path)); },
      py::arg("config"), "Resolved configuration as JSON text.");
  m.def(
      "parse_config", [](const std::string& text) { return dump_config(parse_config(text)); }, py::arg("json_text"),
      "Validates JSON configuration text and returns the resolved JSON.");

  m.def(
      "synth_world",
      [](const std::filesystem::path& out_dir, const std::string& config) {
        const auto split = synth_world(load_config(config).world, out_dir);
        return py::dict("gallery"_a = split.gallery.size(), "train_queries"_a = split.train_queries.size(),
                        "test_queries"_a = split.test_queries.size());
      },
      py::arg("out_dir"), py::arg("config") = "default");
  m.def("load_image", [](const std::filesystem::path& p) { return to_array(load_image(p)); }, py::arg("path"));

  m.def(
      "geo_distance",
      [](std::pair<double, double> a, std::pair<double, double> b, const std::string& mode) {
        return geo_distance(to_geo(a, mode), to_geo(b, mode));
      },
      py::arg("a"), py::arg("b"), py::arg("mode") = "planar");

  m.def(
      "softmax_triplet_loss",
      [](const Array& q, const Array& p, const std::vector<Array>& negs) {
        return softmax_triplet_loss(to_vector(q), to_vector(p), to_rows(negs));
      },
      py::arg("query"), py::arg("positive"), py::arg("negatives"));
  m.def(
      "pyramid_scores",
      [](const std::vector<Array>& q, const std::vector<Array>& p, double tau) {
        return to_array(pyramid_scores(to_rows(q), to_rows(p), tau).values);
      },
      py::arg("query_reps"), py::arg("positive_reps"), py::arg("temperature"));
  m.def(
      "pyramid_loss",
      [](const Array& current, const Array& target) {
        PyramidScores c, t;
        c.values = to_vector(current);
        t.values = to_vector(target);
        return pyramid_loss(c, t);
      },
      py::arg("current"), py::arg("target"));

  m.def(
      "param_counts",
      [](const std::string& config) {
        const auto cfg = load_config(config);
        const auto r = param_count_report(cfg.params.channels, cfg.model.expansion, cfg.model.groups,
                                          cfg.model.clusters, cfg.params.netvlad_clusters, cfg.model.pca_dim);
        return py::dict("netvlad_dim"_a = r.netvlad_dim, "netvlad_pca"_a = r.netvlad_pca,
                        "optlad_dim"_a = r.optlad_dim, "optlad_pca"_a = r.optlad_pca,
                        "netvlad_same_k_pca"_a = r.netvlad_same_k_pca, "pca_ratio"_a = r.pca_ratio);
      },
      py::arg("config") = "default");

  m.def(
      "gradcheck",
      [](const std::string& config, std::size_t coords) {
        const auto cfg = load_config(config);
        auto fx = make_gradcheck_fixture(cfg.model, cfg.world, cfg.train.seed, cfg.train.schedule.lambda_s,
                                         cfg.train.schedule.temperature(0));
        GradCheckOptions opt;
        opt.max_coords = coords;
        opt.seed = cfg.train.seed;
        py::list out;
        for (const auto& r : gradient_check_suite(fx->model, fx->example, opt))
          out.append(py::make_tuple(r.parameter, r.max_relative_error, r.pass));
        return out;
      },
      py::arg("config") = "tiny", py::arg("coords") = 0);

  m.def(
      "train",
      [](const std::filesystem::path& data_dir, const std::filesystem::path& out_dir, const std::string& config,
         std::optional<double> lambda_s) {
        auto cfg = load_config(config);
        if (lambda_s) cfg.train.schedule.lambda_s = *lambda_s;
        cfg.validate();
        const auto data = load_training_data(data_dir);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_generations(data, cfg.model, cfg.train, out_dir);
        }
        py::list gens;
        for (const auto& g : r.generations) gens.append(py::make_tuple(g.checkpoint, g.recall1));
        return py::dict("initial_recall1"_a = r.initial_recall1, "generations"_a = gens,
                        "metrics_log"_a = r.metrics_log);
      },
      py::arg("data_dir"), py::arg("out_dir"), py::arg("config") = "desk", py::arg("lambda_s") = py::none());

  py::class_<ClusVpr>(m, "Model")
      .def(py::init([](const std::string& config, std::uint64_t seed) {
             Rng rng(seed);
             return ClusVpr(load_config(config).model, rng);
           }),
           py::arg("config") = "tiny", py::arg("seed") = 7)
      .def_static("load", &load_model, py::arg("path"))
      .def("save", [](const ClusVpr& self, const std::filesystem::path& p) { save_model(self, p); }, py::arg("path"))
      .def("embed", [](const ClusVpr& self, const Array& img) { return to_array(self.embed(to_image(img))); },
           py::arg("image"), "Pre-PCA unit descriptor.")
      .def("describe", [](const ClusVpr& self, const Array& img) { return to_array(self.describe(to_image(img))); },
           py::arg("image"), "Stored descriptor (after PCA when fitted).")
      .def("features", [](const ClusVpr& self, const Array& img) { return to_array(self.features(to_image(img))); },
           py::arg("image"))
      .def_property_readonly("descriptor_dim", [](const ClusVpr& self) { return self.config().optlad().descriptor_dim(); })
      .def_property_readonly("has_pca", [](const ClusVpr& self) { return self.pca().has_value(); })
      .def_property_readonly("parameter_count", [](const ClusVpr& self) {
        std::size_t n = 0;
        for (const Param* p : self.params()) n += p->value.numel();
        return n;
      });

  py::class_<DescriptorIndex>(m, "Index")
      .def_static("load", &load_index, py::arg("path"))
      .def_static(
          "build",
          [](const ClusVpr& model, const std::filesystem::path& manifest) {
            return embed_index(model, load_samples(manifest), true);
          },
          py::arg("model"), py::arg("manifest"))
      .def("save", [](const DescriptorIndex& self, const std::filesystem::path& p) { save_index(self, p); }, py::arg("path"))
      .def("__len__", &DescriptorIndex::size)
      .def_property_readonly("dim", [](const DescriptorIndex& self) { return self.dim; })
      .def_property_readonly("ids", [](const DescriptorIndex& self) {
        std::vector<std::string> ids;
        for (const auto& r : self.records) ids.push_back(r.id);
        return ids;
      })
      .def(
          "query",
          [](const DescriptorIndex& self, const Array& d, std::size_t k) {
            return hits_to_list(query_topk(self, to_vector(d), k).hits);
          },
          py::arg("descriptor"), py::arg("k") = 10)
      .def(
          "evaluate",
          [](const DescriptorIndex& self, const ClusVpr& model, const std::filesystem::path& queries,
             std::vector<std::size_t> ks, double threshold) {
            const auto rep = recall_at_k(self, embed_queries(model, load_samples(queries), true), ks, threshold);
            py::dict out;
            for (std::size_t i = 0; i < rep.ks.size(); ++i) out[py::int_(rep.ks[i])] = rep.recall[i];
            return out;
          },
          py::arg("model"), py::arg("queries"), py::arg("ks") = std::vector<std::size_t>{1, 5, 10},
          py::arg("threshold") = 25.0);
}

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "clusvpr/checkpoint.hpp"
#include "clusvpr/config.hpp"
#include "clusvpr/datagen.hpp"
#include "clusvpr/optlad.hpp"
#include "clusvpr/retrieval.hpp"
#include "clusvpr/training.hpp"

namespace fs = std::filesystem;
using namespace clusvpr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

struct Common {
  std::string config = "default";
  std::optional<std::uint64_t> seed;
  std::string run_dir;
};

fs::path default_run_dir() {
  if (const char* env = std::getenv("CLUSVPR_RUN_DIR"); env && *env) return env;
  return "run";
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "preset name (default, desk, tiny) or JSON file");
  app->add_option("--seed", c.seed, "overrides the seed of the command");
  app->add_option("--run-dir", c.run_dir, "artifact directory (default $CLUSVPR_RUN_DIR or ./run)");
}

fs::path run_dir(const Common& c) { return c.run_dir.empty() ? default_run_dir() : fs::path(c.run_dir); }

fs::path under(const Common& c, const std::string& p, const char* fallback) {
  if (p.empty()) return run_dir(c) / fallback;
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void echo_config(const Common& c, const RunConfig& cfg) {
  fs::create_directories(run_dir(c));
  write_text(run_dir(c) / "config.resolved", dump_config(cfg));
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v == 0) throw ConfigError("--k: expected comma-separated positive integers, got '" + s + "'");
    ks.push_back(v);
  }
  if (ks.empty()) throw ConfigError("--k: empty list");
  return ks;
}

// Files/directories created by the current command; removed if it fails.
struct Outputs {
  std::vector<fs::path> created;
  void track(const fs::path& p) {
    if (!fs::exists(p)) created.push_back(p);
  }
  void rollback() {
    for (auto it = created.rbegin(); it != created.rend(); ++it) {
      std::error_code ec;
      fs::remove_all(*it, ec);
    }
  }
};

fs::path model_for_index(const fs::path& index_path) { return fs::path(index_path.string() + ".ckpt"); }

std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ClusVPR reference pipeline"};
  app.require_subcommand(1);

  Common synth_c, train_c, index_c, query_c, eval_c, grad_c, params_c;
  std::string synth_out, train_data, train_out, index_ckpt, index_manifest, index_out;
  std::string query_index, query_ckpt, query_image, eval_index, eval_ckpt, eval_queries, eval_k;
  std::optional<double> train_lambda;
  std::size_t query_k = 5;
  std::size_t grad_coords = 0;

  auto* synth = app.add_subcommand("synth", "render the synthetic geo-tagged world");
  add_common(synth, synth_c);
  synth->add_option("--out", synth_out, "output directory (default <run>/world)");

  auto* train = app.add_subcommand("train", "generational training");
  add_common(train, train_c);
  train->add_option("--data", train_data, "world directory (default <run>/world)");
  train->add_option("--out", train_out, "output directory (default <run>/train)");
  train->add_option("--lambda-s", train_lambda, "overrides pyramid.lambda_s");

  auto* index = app.add_subcommand("index", "embed a gallery manifest into a descriptor index");
  add_common(index, index_c);
  index->add_option("--checkpoint", index_ckpt, "model checkpoint")->required();
  index->add_option("--manifest", index_manifest, "gallery manifest")->required();
  index->add_option("--out", index_out, "index file (default <run>/index.bin)");

  auto* query = app.add_subcommand("query", "top-k retrieval for one image");
  add_common(query, query_c);
  query->add_option("--index", query_index, "index file")->required();
  query->add_option("--checkpoint", query_ckpt, "model checkpoint (default <index>.ckpt)");
  query->add_option("--image", query_image, "query image (PPM)")->required();
  query->add_option("--k", query_k, "number of results");

  auto* eval = app.add_subcommand("eval", "recall@k of a query manifest against an index");
  add_common(eval, eval_c);
  eval->add_option("--index", eval_index, "index file")->required();
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint (default <index>.ckpt)");
  eval->add_option("--queries", eval_queries, "query manifest")->required();
  eval->add_option("--k", eval_k, "comma-separated k values (default from config)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every parameter");
  add_common(grad, grad_c);
  grad->add_option("--coords", grad_coords, "coordinates sampled per tensor (0 = all)");

  auto* params = app.add_subcommand("params", "descriptor and PCA parameter accounting");
  add_common(params, params_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  Outputs outputs;
  try {
    if (synth->parsed()) {
      RunConfig cfg = load_config(synth_c.config);
      if (synth_c.seed) cfg.world.seed = *synth_c.seed;
      cfg.validate();
      const fs::path out = under(synth_c, synth_out, "world");
      outputs.track(run_dir(synth_c));
      outputs.track(out);
      echo_config(synth_c, cfg);
      const auto split = synth_world(cfg.world, out);
      std::cout << "gallery " << split.gallery.size() << ", train queries " << split.train_queries.size()
                << ", test queries " << split.test_queries.size() << " -> " << out.string() << '\n';
    } else if (train->parsed()) {
      RunConfig cfg = load_config(train_c.config);
      if (train_c.seed) cfg.train.seed = *train_c.seed;
      if (train_lambda) cfg.train.schedule.lambda_s = *train_lambda;
      cfg.validate();
      const fs::path data_dir = under(train_c, train_data, "world");
      const fs::path out = under(train_c, train_out, "train");
      outputs.track(run_dir(train_c));
      outputs.track(out);
      echo_config(train_c, cfg);
      const auto data = load_training_data(data_dir);
      try {
        const auto res = train_generations(data, cfg.model, cfg.train, out);
        std::cout << "untrained recall@1 " << fmt(res.initial_recall1) << '\n';
        for (std::size_t g = 0; g < res.generations.size(); ++g)
          std::cout << "generation " << g + 1 << " recall@1 " << fmt(res.generations[g].recall1) << " -> "
                    << res.generations[g].checkpoint.string() << '\n';
      } catch (const NumericalFailure& e) {
        // Completed checkpoints are kept.
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
      }
    } else if (index->parsed()) {
      RunConfig cfg = load_config(index_c.config);
      const fs::path out = under(index_c, index_out, "index.bin");
      const ClusVpr model = load_model(index_ckpt);
      const auto samples = load_samples(index_manifest);
      outputs.track(run_dir(index_c));
      outputs.track(out);
      outputs.track(model_for_index(out));
      echo_config(index_c, cfg);
      const auto idx = embed_index(model, samples, true);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      save_index(idx, out);
      fs::copy_file(index_ckpt, model_for_index(out), fs::copy_options::overwrite_existing);
      std::cout << idx.records.size() << " records, dim " << idx.dim << " -> " << out.string() << '\n';
    } else if (query->parsed()) {
      const auto idx = load_index(query_index);
      const ClusVpr model = load_model(query_ckpt.empty() ? model_for_index(query_index) : fs::path(query_ckpt));
      const auto desc = model.describe(load_image(query_image));
      const auto top = query_topk(idx, desc, query_k);
      if (top.truncated_k) std::cerr << "warning: k truncated to " << top.hits.size() << '\n';
      std::cout << "rank,id,similarity,a,b\n";
      for (std::size_t r = 0; r < top.hits.size(); ++r) {
        const auto& rec = idx.records[top.hits[r].record];
        std::cout << r + 1 << ',' << rec.id << ',' << fmt(top.hits[r].similarity, "%.9g") << ','
                  << fmt(rec.geo.a, "%.10g") << ',' << fmt(rec.geo.b, "%.10g") << '\n';
      }
    } else if (eval->parsed()) {
      RunConfig cfg = load_config(eval_c.config);
      const auto ks = eval_k.empty() ? cfg.eval.ks : parse_ks(eval_k);
      const auto idx = load_index(eval_index);
      const ClusVpr model = load_model(eval_ckpt.empty() ? model_for_index(eval_index) : fs::path(eval_ckpt));
      const auto queries = embed_queries(model, load_samples(eval_queries), true);
      const auto report = recall_at_k(idx, queries, ks, cfg.eval.threshold);
      for (const auto& id : report.unreachable) std::cerr << "warning: query " << id << " has no gallery item in range\n";
      std::cout << report.to_text();
    } else if (grad->parsed()) {
      RunConfig cfg = load_config(grad_c.config);
      const std::uint64_t seed = grad_c.seed.value_or(cfg.train.seed);
      auto fx = make_gradcheck_fixture(cfg.model, cfg.world, seed, cfg.train.schedule.lambda_s,
                                       cfg.train.schedule.temperature(0));
      GradCheckOptions opt;
      opt.max_coords = grad_coords;
      opt.seed = seed;
      const auto reports = gradient_check_suite(fx->model, fx->example, opt);
      bool ok = true;
      std::cout << "parameter,max_rel_err,pass\n";
      for (const auto& r : reports) {
        std::cout << r.parameter << ',' << fmt(r.max_relative_error, "%.3e") << ',' << (r.pass ? "yes" : "no") << '\n';
        ok = ok && r.pass;
      }
      if (!ok) {
        for (const auto& r : reports)
          if (!r.pass) std::cerr << "gradient check failed: " << r.parameter << '\n';
        return kExitNumerical;
      }
    } else if (params->parsed()) {
      RunConfig cfg = load_config(params_c.config);
      const auto& m = cfg.model;
      const auto r = param_count_report(cfg.params.channels, m.expansion, m.groups, m.clusters,
                                        cfg.params.netvlad_clusters, m.pca_dim);
      std::cout << "method,clusters,descriptor_dim,pca_params,pca_params_with_mean\n";
      std::cout << "netvlad," << r.netvlad_clusters << ',' << r.netvlad_dim << ',' << r.netvlad_pca << ','
                << r.netvlad_pca_with_mean << '\n';
      std::cout << "netvlad," << r.clusters << ',' << r.netvlad_same_k_dim << ',' << r.netvlad_same_k_pca << ','
                << r.netvlad_same_k_pca_with_mean << '\n';
      std::cout << "optlad," << r.clusters << ',' << r.optlad_dim << ',' << r.optlad_pca << ','
                << r.optlad_pca_with_mean << '\n';
      std::cout << "C=" << r.channels << " lambda=" << r.expansion << " G=" << r.groups << " N'=" << r.output_dim
                << '\n';
      std::cout << "netvlad PCA (K=" << r.netvlad_clusters << "): " << fmt(r.netvlad_pca / 1e6, "%.1f") << "M\n";
      std::cout << "optlad PCA (K=" << r.clusters << "): " << fmt(r.optlad_pca_with_mean / 1e6, "%.1f") << "M\n";
      std::cout << "PCA ratio at equal K (G/lambda): " << fmt(r.pca_ratio, "%.6g") << '\n';
    }
  } catch (const ConfigError& e) {
    outputs.rollback();
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    outputs.rollback();
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::domain_error& e) {
    outputs.rollback();
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    outputs.rollback();
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

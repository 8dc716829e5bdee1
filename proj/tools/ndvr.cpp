// ndvr: command-line front end for the retrieval pipeline.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ndvr/pipeline.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct Globals {
  std::string config_path;
  std::string workspace = "workspace";
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::vector<std::string> overrides;  // key=value
};

struct StageFlags {
  std::optional<double> rate;
  std::optional<std::size_t> kpca_dim;
  std::string kpca_sigma;
  std::optional<double> sso_k;
  std::string sso_sigma;
  std::string sso_form;
  std::optional<std::size_t> knn_k;
  std::optional<int> num_trees;
  std::optional<std::size_t> budget;
};

ndvr::PipelineConfig make_config(const Globals& g, const StageFlags& f) {
  ndvr::PipelineConfig c;
  if (!g.config_path.empty()) c = ndvr::load_config(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ndvr::Error(ndvr::ErrorCode::kParameter, "--set expects key=value, got " + kv);
    ndvr::set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.seed = *g.seed;
  if (g.threads) c.threads = *g.threads;
  if (f.rate) c.rate = *f.rate;
  if (f.kpca_dim) c.kpca_dim = *f.kpca_dim;
  if (!f.kpca_sigma.empty()) c.kpca_sigma = ndvr::parse_sigma(f.kpca_sigma, "kpca_sigma");
  if (f.sso_k) c.sso_k = *f.sso_k;
  if (!f.sso_sigma.empty()) c.sso_sigma = ndvr::parse_sigma(f.sso_sigma, "sso_sigma");
  if (!f.sso_form.empty()) c.sso_form = ndvr::parse_metric_form(f.sso_form);
  if (f.knn_k) c.knn_k = *f.knn_k;
  if (f.num_trees) c.num_trees = *f.num_trees;
  if (f.budget) c.budget = *f.budget;
  ndvr::validate(c);
  return c;
}

void add_stage_flags(CLI::App* app, StageFlags& f) {
  app->add_option("--rate", f.rate, "keyframes per second");
  app->add_option("--kpca-dim", f.kpca_dim, "KPCA output dimension");
  app->add_option("--kpca-sigma", f.kpca_sigma, "RBF width: median or a value");
  app->add_option("--sso-k", f.sso_k, "similarity bandwidth multiplier");
  app->add_option("--sso-sigma", f.sso_sigma, "similarity width: median or a value");
  app->add_option("--sso-form", f.sso_form, "frame distance form: signed or magnitude");
  app->add_option("--knn-k", f.knn_k, "neighbourhood size");
  app->add_option("--num-trees", f.num_trees, "kd-trees in the forest");
  app->add_option("--budget", f.budget, "leaf visits per ANN query (0 = default)");
}

void print(const json& doc) { std::cout << doc.dump(2) << '\n'; }

ndvr::Pipeline make_pipeline(const Globals& g, const StageFlags& f) {
  return ndvr::Pipeline(make_config(g, f), ndvr::Workspace(g.workspace));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"near-duplicate video retrieval"};
  app.require_subcommand(1);
  Globals g;
  StageFlags flags;
  app.add_option("--config", g.config_path, "TOML-style key = value config file");
  app.add_option("--workspace", g.workspace, "workspace directory");
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--threads", g.threads, "worker threads");
  app.add_option("--set", g.overrides, "config override key=value (repeatable)");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "copy and validate NDVF inputs into the workspace");
  std::string ingest_input;
  ingest->add_option("input", ingest_input, "directory of .ndvf files or a manifest.json")->required();

  // keyframes
  auto* keyframes = app.add_subcommand("keyframes", "select keyframes");
  std::vector<std::string> keyframe_files;
  keyframes->add_option("files", keyframe_files, "NDVF files (prints selections without touching a workspace)");

  auto* reduce = app.add_subcommand("reduce", "descriptors and KPCA signatures");
  auto* index = app.add_subcommand("index", "ANN forests and refined neighbour lists");

  auto* query = app.add_subcommand("query", "rank the gallery for queries");
  std::string query_video, query_levels;
  std::optional<std::size_t> query_k;
  query->add_option("--video", query_video, "gallery video id or NDVF path (default: all truth queries)");
  query->add_option("--k", query_k, "neighbourhood size for fusion");
  query->add_option("--levels", query_levels, "comma-separated subset of fc,conv,fused");

  auto* evaluate = app.add_subcommand("evaluate", "AP per query and mAP");
  std::string eval_results, eval_truth, eval_labels, eval_level = "fused", eval_pr_dir;
  evaluate->add_option("--results", eval_results, "results.json (default: workspace)");
  evaluate->add_option("--truth", eval_truth, "ground truth file");
  evaluate->add_option("--label-map", eval_labels, "label codes, e.g. E=1,S=1,X=0");
  evaluate->add_option("--level", eval_level, "level to score when --results is given");
  evaluate->add_option("--pr-dir", eval_pr_dir, "directory for per-query PR CSVs");

  auto* synth = app.add_subcommand("synth", "write a synthetic near-duplicate collection");
  ndvr::SynthParams sp;
  std::string synth_out;
  synth->add_option("--clusters", sp.clusters);
  synth->add_option("--videos", sp.videos_per_cluster, "videos per cluster");
  synth->add_option("--frames", sp.frames, "frames per video");
  synth->add_option("--dims", sp.dims);
  synth->add_option("--noise", sp.noise);
  synth->add_option("--dropout", sp.dropout);
  synth->add_option("--seed", sp.seed);
  synth->add_option("--out", synth_out)->required();

  auto* pipeline = app.add_subcommand("pipeline", "run every stage");
  std::string pipeline_input;
  pipeline->add_option("input", pipeline_input, "directory of .ndvf files or a manifest.json")->required();

  for (auto* sub : {ingest, keyframes, reduce, index, query, evaluate, pipeline}) add_stage_flags(sub, flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      print(make_pipeline(g, flags).ingest(ingest_input));
    } else if (*keyframes) {
      if (keyframe_files.empty()) {
        print(make_pipeline(g, flags).keyframes());
      } else {
        const auto config = make_config(g, flags);
        for (const auto& file : keyframe_files) {
          const auto set = ndvr::select_keyframes(ndvr::read_features_file(file), config.rate);
          std::cout << json{{"video_id", set.video_id}, {"selected", set.selected}}.dump() << '\n';
        }
      }
    } else if (*reduce) {
      print(make_pipeline(g, flags).reduce());
    } else if (*index) {
      print(make_pipeline(g, flags).index());
    } else if (*query) {
      auto p = make_pipeline(g, flags);
      const auto levels = query_levels.empty() ? p.config().levels : ndvr::split_list(query_levels);
      for (const auto& l : levels)
        if (l != "fc" && l != "conv" && l != "fused")
          throw ndvr::Error(ndvr::ErrorCode::kParameter, "unknown level '" + l + "'");
      if (query_video.empty()) {
        print(p.query({}, query_k));
      } else {
        const bool is_file = fs::is_regular_file(query_video);
        const auto result = is_file ? p.query_external(ndvr::read_features_file(query_video), query_k)
                                    : p.query_video(query_video, query_k);
        if (levels.size() == 1) {
          print(ndvr::Pipeline::ranking_json(result.levels.at(levels.front())));
        } else {
          json doc = json::object();
          for (const auto& l : levels) doc[l] = ndvr::Pipeline::ranking_json(result.levels.at(l));
          print(doc);
        }
      }
    } else if (*evaluate) {
      const auto labels = eval_labels.empty() ? ndvr::default_label_map() : ndvr::parse_label_map(eval_labels);
      if (eval_results.empty()) {
        print(make_pipeline(g, flags).evaluate(eval_truth, labels));
      } else {
        if (eval_truth.empty()) throw ndvr::Error(ndvr::ErrorCode::kParameter, "--results needs --truth");
        const json results = ndvr::read_json_file(eval_results);
        // Either a workspace results.json or a bare [{query_id, ranking}] array.
        const json& arr = results.is_array() ? results : results.at("levels").at(eval_level);
        const auto rankings = ndvr::Pipeline::rankings_from_json(arr);
        const auto truths = ndvr::load_ground_truth(eval_truth, labels);
        const auto eval = ndvr::evaluate(rankings, truths);
        if (!eval_pr_dir.empty()) {
          fs::create_directories(eval_pr_dir);
          std::map<std::string, const ndvr::RankedResult*> by_query;
          for (const auto& r : rankings) by_query[r.query_id] = &r;
          for (const auto& t : truths) {
            std::ofstream csv(fs::path(eval_pr_dir) / (ndvr::Pipeline::safe_name(t.query_id) + ".csv"));
            ndvr::write_pr_csv(ndvr::precision_recall(*by_query.at(t.query_id), t), csv);
          }
        }
        print(ndvr::Pipeline::evaluation_json(eval));
      }
    } else if (*synth) {
      const auto data = ndvr::synth_dataset(sp);
      fs::create_directories(synth_out);
      std::vector<ndvr::ManifestEntry> manifest;
      for (const auto& v : data.videos) {
        const std::string name = v.video_id + ".ndvf";
        ndvr::write_features_file(v, fs::path(synth_out) / name);
        manifest.push_back({v.video_id, name});
      }
      ndvr::write_manifest(manifest, fs::path(synth_out) / "manifest.json");
      std::ofstream truth(fs::path(synth_out) / "truth.txt");
      ndvr::write_ground_truth(data.truths, truth);
      print({{"videos", data.videos.size()}, {"queries", data.truths.size()}, {"out", synth_out}});
    } else if (*pipeline) {
      print(make_pipeline(g, flags).run_all(pipeline_input));
    }
  } catch (const ndvr::Error& e) {
    std::cerr << "error [" << ndvr::to_string(e.code()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

#pragma once

// End-to-end orchestration over a workspace directory:
//
//   features/   canonical NDVF per video + manifest.json
//   keyframes/  keyframes.json
//   models/     kpca_<level>.model, signatures_<level>.ndsg
//   index/      index_<level>.ndix, neighbors_<level>.json
//   results/    results.json, eval_<level>.json, pr/<level>/<query>.csv
//   reports/    <stage>.json
//
// Every stage report and artifact header carries the stage's config hash, a
// digest of the parameters that stage and its prerequisites depend on. A
// stage refuses to run on a prerequisite whose hash differs from the current
// configuration.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ndvr/aggregation.hpp"
#include "ndvr/ann_index.hpp"
#include "ndvr/binary_io.hpp"
#include "ndvr/error.hpp"
#include "ndvr/eval.hpp"
#include "ndvr/feature_store.hpp"
#include "ndvr/fsuml.hpp"
#include "ndvr/keyframe.hpp"
#include "ndvr/kpca.hpp"
#include "ndvr/parallel.hpp"
#include "ndvr/random.hpp"
#include "ndvr/ranking.hpp"
#include "ndvr/rerank.hpp"

namespace ndvr {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  double rate = kDefaultKeyframeRate;
  std::size_t kpca_dim = kDefaultKpcaDim;
  std::optional<double> kpca_sigma;  // empty: median heuristic
  std::size_t kpca_train_max = 2000;
  double sso_k = 2.0;
  std::optional<double> sso_sigma;   // empty: per-pair median
  MetricForm sso_form = MetricForm::kMagnitude;
  std::size_t knn_k = kDefaultNeighborhood;
  int num_trees = 8;
  int leaf_size = 16;
  std::size_t budget = 0;            // 0: 8 * pool * num_trees
  std::uint64_t seed = 0;
  std::vector<std::string> levels{"fc", "conv", "fused"};
  unsigned threads = 1;

  SsoParams sso() const { return {sso_k, sso_sigma, 1, sso_form}; }
  // Candidates fetched from the index before FSUML refinement.
  std::size_t pool_size() const { return std::max<std::size_t>(4 * knn_k, 50); }
  std::size_t query_budget(std::size_t k) const { return budget > 0 ? budget : default_budget(k, num_trees); }
};

inline void validate(const PipelineConfig& c) {
  auto positive = [](bool ok, const char* name) {
    if (!ok) throw Error(ErrorCode::kParameter, std::string(name) + " must be positive");
  };
  positive(c.rate > 0.0, "rate");
  positive(c.kpca_dim > 0, "kpca_dim");
  positive(!c.kpca_sigma || *c.kpca_sigma > 0.0, "kpca_sigma");
  positive(c.kpca_train_max > 1, "kpca_train_max");
  positive(c.sso_k > 0.0, "sso_k");
  positive(!c.sso_sigma || *c.sso_sigma > 0.0, "sso_sigma");
  positive(c.knn_k > 0, "knn_k");
  positive(c.num_trees > 0, "num_trees");
  positive(c.leaf_size > 0, "leaf_size");
  positive(c.threads > 0, "threads");
  for (const auto& l : c.levels)
    if (l != "fc" && l != "conv" && l != "fused") throw Error(ErrorCode::kParameter, "unknown level '" + l + "'");
  if (c.levels.empty()) throw Error(ErrorCode::kParameter, "at least one level is required");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// "median" or a positive number.
inline std::optional<double> parse_sigma(const std::string& text, const char* key) {
  if (text == "median") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !(v > 0.0)) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kParameter, std::string(key) + " must be 'median' or a positive number, got '" + text + "'");
  }
}

// Applies one key/value pair; used for config files and CLI overrides alike.
inline void set_config_value(PipelineConfig& c, const std::string& key, const std::string& value) {
  auto number = [&](auto& field) {
    try {
      std::size_t used = 0;
      const double v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      using T = std::remove_reference_t<decltype(field)>;
      if constexpr (std::is_integral_v<T>) {
        if (v < 0 || v != std::floor(v)) throw std::invalid_argument(value);
      }
      field = static_cast<std::remove_reference_t<decltype(field)>>(v);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kParameter, "config key '" + key + "' expects a number, got '" + value + "'");
    }
  };
  if (key == "rate") number(c.rate);
  else if (key == "kpca_dim") number(c.kpca_dim);
  else if (key == "kpca_sigma") c.kpca_sigma = parse_sigma(value, "kpca_sigma");
  else if (key == "kpca_train_max") number(c.kpca_train_max);
  else if (key == "sso_k") number(c.sso_k);
  else if (key == "sso_sigma") c.sso_sigma = parse_sigma(value, "sso_sigma");
  else if (key == "sso_form") c.sso_form = parse_metric_form(value);
  else if (key == "knn_k") number(c.knn_k);
  else if (key == "num_trees") number(c.num_trees);
  else if (key == "leaf_size") number(c.leaf_size);
  else if (key == "budget") number(c.budget);
  else if (key == "seed") number(c.seed);
  else if (key == "threads") number(c.threads);
  else if (key == "levels") c.levels = split_list(value);
  else throw Error(ErrorCode::kParameter, "unknown config key '" + key + "'");
}

// TOML-style "key = value" lines; '#' starts a comment, values may be quoted.
inline void read_config(std::istream& in, PipelineConfig& c) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::kParameter, "config line " + std::to_string(line_no) + " is not 'key = value'");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
      value = value.substr(1, value.size() - 2);
    if (value.size() >= 2 && value.front() == '[' && value.back() == ']') {
      value = value.substr(1, value.size() - 2);
      value.erase(std::remove(value.begin(), value.end(), '"'), value.end());
    }
    set_config_value(c, key, value);
  }
}

inline PipelineConfig load_config(const fs::path& path, PipelineConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path.string());
  read_config(in, base);
  return base;
}

enum class Stage { kIngest, kKeyframes, kReduce, kIndex, kQuery, kEvaluate };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kIngest: return "ingest";
    case Stage::kKeyframes: return "keyframes";
    case Stage::kReduce: return "reduce";
    case Stage::kIndex: return "index";
    case Stage::kQuery: return "query";
    case Stage::kEvaluate: return "evaluate";
  }
  return "?";
}

inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

namespace detail {

inline json sigma_json(const std::optional<double>& s) { return s ? json(*s) : json("median"); }

}  // namespace detail

// Parameters each stage depends on, chained through its prerequisite.
inline std::string stage_hash(const PipelineConfig& c, Stage stage) {
  json params;
  std::string upstream;
  switch (stage) {
    case Stage::kIngest: params = json::object(); break;
    case Stage::kKeyframes:
      upstream = stage_hash(c, Stage::kIngest);
      params = {{"rate", c.rate}};
      break;
    case Stage::kReduce:
      upstream = stage_hash(c, Stage::kKeyframes);
      params = {{"kpca_dim", c.kpca_dim}, {"kpca_sigma", detail::sigma_json(c.kpca_sigma)},
                {"kpca_train_max", c.kpca_train_max}, {"seed", c.seed}};
      break;
    case Stage::kIndex:
      upstream = stage_hash(c, Stage::kReduce);
      params = {{"sso_k", c.sso_k}, {"sso_sigma", detail::sigma_json(c.sso_sigma)},
                {"sso_form", metric_form_name(c.sso_form)}, {"knn_k", c.knn_k},
                {"num_trees", c.num_trees}, {"leaf_size", c.leaf_size}, {"budget", c.budget}, {"seed", c.seed}};
      break;
    case Stage::kQuery:
      upstream = stage_hash(c, Stage::kIndex);
      params = {{"levels", c.levels}};
      break;
    case Stage::kEvaluate:
      upstream = stage_hash(c, Stage::kQuery);
      params = json::object();
      break;
  }
  return fnv1a_hex(std::string(stage_name(stage)) + "|" + upstream + "|" + params.dump());
}

inline json config_json(const PipelineConfig& c) {
  return {{"rate", c.rate},
          {"kpca_dim", c.kpca_dim},
          {"kpca_sigma", detail::sigma_json(c.kpca_sigma)},
          {"kpca_train_max", c.kpca_train_max},
          {"sso_k", c.sso_k},
          {"sso_sigma", detail::sigma_json(c.sso_sigma)},
          {"sso_form", metric_form_name(c.sso_form)},
          {"knn_k", c.knn_k},
          {"num_trees", c.num_trees},
          {"leaf_size", c.leaf_size},
          {"budget", c.budget},
          {"seed", c.seed},
          {"levels", c.levels}};
}

// ---------------------------------------------------------------------------
// Workspace artifacts

class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }
  fs::path features_dir() const { return root_ / "features"; }
  fs::path manifest() const { return features_dir() / "manifest.json"; }
  fs::path truth() const { return root_ / "truth.txt"; }
  fs::path keyframes() const { return root_ / "keyframes" / "keyframes.json"; }
  fs::path kpca_model(Level l) const { return root_ / "models" / (std::string("kpca_") + level_name(l) + ".model"); }
  fs::path signatures(Level l) const { return root_ / "models" / (std::string("signatures_") + level_name(l) + ".ndsg"); }
  fs::path index(Level l) const { return root_ / "index" / (std::string("index_") + level_name(l) + ".ndix"); }
  fs::path neighbors(Level l) const { return root_ / "index" / (std::string("neighbors_") + level_name(l) + ".json"); }
  fs::path results() const { return root_ / "results" / "results.json"; }
  fs::path evaluation(const std::string& level) const { return root_ / "results" / ("eval_" + level + ".json"); }
  fs::path pr_dir(const std::string& level) const { return root_ / "results" / "pr" / level; }
  fs::path report(Stage s) const { return root_ / "reports" / (std::string(stage_name(s)) + ".json"); }

  void make_dirs() const {
    for (const char* d : {"features", "keyframes", "models", "index", "results", "reports"})
      fs::create_directories(root_ / d);
  }

 private:
  fs::path root_;
};

inline void write_json_file(const fs::path& path, const json& doc) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorruption, path.string() + ": " + e.what());
  }
}

// Signatures of every video at one level:
//   "NDSG" 0x01, JSON header {level, dim, videos: [{video_id, rows}], ...},
//   then float64 rows in header order.
inline constexpr char kSignatureMagic[] = "NDSG";
inline constexpr std::uint8_t kSignatureVersion = 1;

inline void save_signatures(const std::vector<VideoSignature>& sigs, Level level, Eigen::Index dim,
                            const fs::path& path, const json& extra = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  io::Writer w(out);
  w.magic(kSignatureMagic, kSignatureVersion);
  json header = extra.is_object() ? extra : json::object();
  header["level"] = level_name(level);
  header["dim"] = dim;
  header["videos"] = json::array();
  for (const auto& s : sigs) header["videos"].push_back({{"video_id", s.video_id}, {"rows", s.frames.rows()}});
  w.json_header(header);
  for (const auto& s : sigs)
    for (Eigen::Index i = 0; i < s.frames.rows(); ++i)
      for (Eigen::Index j = 0; j < s.frames.cols(); ++j) w.f64(s.frames(i, j));
}

inline std::vector<VideoSignature> load_signatures(const fs::path& path, json* header_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  io::Reader r(in);
  r.expect_magic(kSignatureMagic, kSignatureVersion);
  const json header = r.json_header();
  const auto dim = io::header_field<Eigen::Index>(header, "dim");
  std::vector<VideoSignature> sigs;
  for (const auto& v : io::header_field<json>(header, "videos")) {
    VideoSignature s;
    s.video_id = v.at("video_id").get<std::string>();
    s.frames.resize(v.at("rows").get<Eigen::Index>(), dim);
    for (Eigen::Index i = 0; i < s.frames.rows(); ++i)
      for (Eigen::Index j = 0; j < dim; ++j) s.frames(i, j) = r.f64("signature rows");
    sigs.push_back(std::move(s));
  }
  if (header_out) *header_out = header;
  return sigs;
}

struct StageReport {
  json doc;
};

class Pipeline {
 public:
  Pipeline(PipelineConfig config, Workspace workspace) : config_(std::move(config)), ws_(std::move(workspace)) {
    validate(config_);
  }

  const PipelineConfig& config() const { return config_; }
  const Workspace& workspace() const { return ws_; }

  // -------------------------------------------------------------------------
  // ingest: copy and validate NDVF inputs (a manifest.json or every *.ndvf in
  // the directory), plus truth.txt when present.
  json ingest(const fs::path& input) {
    const auto start = now();
    ws_.make_dirs();
    std::vector<ManifestEntry> sources;
    fs::path truth_source;
    if (fs::is_regular_file(input) && input.extension() == ".json") {
      for (auto e : read_manifest(input)) {
        if (fs::path(e.path).is_relative()) e.path = (input.parent_path() / e.path).string();
        sources.push_back(e);
      }
      truth_source = input.parent_path() / "truth.txt";
    } else if (fs::is_directory(input)) {
      if (fs::exists(input / "manifest.json")) return ingest(input / "manifest.json");
      for (const auto& entry : fs::directory_iterator(input))
        if (entry.path().extension() == ".ndvf") sources.push_back({"", entry.path().string()});
      std::sort(sources.begin(), sources.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
      truth_source = input / "truth.txt";
    } else {
      throw Error(ErrorCode::kIo, "ingest input " + input.string() + " is neither a manifest nor a directory");
    }
    if (sources.empty()) throw Error(ErrorCode::kParameter, "no NDVF inputs found under " + input.string());

    std::vector<ManifestEntry> manifest;
    std::set<std::string> seen;
    std::size_t frames = 0;
    for (const auto& src : sources) {
      VideoFeatures video = read_features_file(src.path);
      if (!src.video_id.empty() && src.video_id != video.video_id)
        throw Error(ErrorCode::kValidation, "manifest id " + src.video_id + " does not match " + video.video_id);
      if (!seen.insert(video.video_id).second) throw Error(ErrorCode::kValidation, "duplicate video id " + video.video_id);
      if (video.empty()) throw Error(ErrorCode::kEmptyVideo, video.video_id + " has no frames");
      const std::string name = safe_name(video.video_id) + ".ndvf";
      write_features_file(video, ws_.features_dir() / name);
      manifest.push_back({video.video_id, name});
      frames += video.size();
    }
    std::sort(manifest.begin(), manifest.end(), [](const auto& a, const auto& b) { return a.video_id < b.video_id; });
    write_manifest(manifest, ws_.manifest());
    bool has_truth = false;
    if (fs::exists(truth_source)) {
      fs::copy_file(truth_source, ws_.truth(), fs::copy_options::overwrite_existing);
      has_truth = true;
    }
    return finish(Stage::kIngest, start, {{"videos", manifest.size()}, {"frames", frames}, {"truth", has_truth}});
  }

  // keyframes: per-video keyframe selection on fc vectors.
  json keyframes() {
    const auto start = now();
    require(Stage::kIngest);
    const auto manifest = read_manifest(ws_.manifest());
    std::vector<KeyframeSet> sets(manifest.size());
    parallel_for(manifest.size(), config_.threads, [&](std::size_t i) {
      sets[i] = select_keyframes(read_features_file(ws_.features_dir() / manifest[i].path), config_.rate);
    });
    json doc = {{"config_hash", stage_hash(config_, Stage::kKeyframes)}, {"rate", config_.rate}, {"videos", json::array()}};
    std::size_t total = 0;
    for (const auto& s : sets) {
      doc["videos"].push_back({{"video_id", s.video_id}, {"selected", s.selected}});
      total += s.selected.size();
    }
    write_json_file(ws_.keyframes(), doc);
    return finish(Stage::kKeyframes, start, {{"videos", sets.size()}, {"keyframes", total}});
  }

  // reduce: ULF/LLF descriptors of every keyframe, one KPCA per level,
  // reduced signatures.
  json reduce() {
    const auto start = now();
    require(Stage::kKeyframes);
    const auto manifest = read_manifest(ws_.manifest());
    const json kf = read_json_file(ws_.keyframes());

    struct Raw {
      std::string video_id;
      std::vector<Vector> fc, conv;
    };
    std::vector<Raw> raw(manifest.size());
    std::map<std::string, std::vector<std::size_t>> selected;
    for (const auto& v : kf.at("videos")) selected[v.at("video_id")] = v.at("selected").get<std::vector<std::size_t>>();
    parallel_for(manifest.size(), config_.threads, [&](std::size_t i) {
      const VideoFeatures video = read_features_file(ws_.features_dir() / manifest[i].path);
      raw[i].video_id = video.video_id;
      const auto it = selected.find(video.video_id);
      if (it == selected.end()) throw Error(ErrorCode::kState, "no keyframes recorded for " + video.video_id);
      for (std::size_t pos : it->second) {
        if (pos >= video.size()) throw Error(ErrorCode::kState, "stale keyframe index for " + video.video_id);
        const auto& f = video.frames[pos];
        try {
          Vector fc = build_ulf(f.fc_vector).vector;
          Vector conv = build_llf(f.conv_vectors).vector;
          raw[i].fc.push_back(std::move(fc));
          raw[i].conv.push_back(std::move(conv));
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kDegenerateDescriptor) throw;
        }
      }
      if (raw[i].fc.empty()) throw Error(ErrorCode::kDegenerateDescriptor, video.video_id + " has no usable keyframe");
    });

    json counts = json::object();
    for (Level level : {Level::kFc, Level::kConv}) {
      std::vector<const Vector*> all;
      std::vector<std::size_t> owner;
      for (std::size_t i = 0; i < raw.size(); ++i)
        for (const auto& d : level == Level::kFc ? raw[i].fc : raw[i].conv) {
          all.push_back(&d);
          owner.push_back(i);
        }
      Rng rng(config_.seed ^ (level == Level::kFc ? 0x5eedf00dull : 0xc0de5eedull));
      const auto picks = rng.sample_without_replacement(all.size(), std::min(all.size(), config_.kpca_train_max));
      RowMatrix training(static_cast<Eigen::Index>(picks.size()), all.front()->size());
      for (std::size_t r = 0; r < picks.size(); ++r) training.row(static_cast<Eigen::Index>(r)) = all[picks[r]]->transpose();

      const double sigma = config_.kpca_sigma ? *config_.kpca_sigma : median_sigma(training, config_.seed);
      const auto out_dim = static_cast<Eigen::Index>(
          std::min<std::size_t>(config_.kpca_dim, training.rows() > 1 ? static_cast<std::size_t>(training.rows()) - 1 : 1));
      const KpcaModel fitted = kpca_fit(training, sigma, out_dim, {1e-10, true});
      const json extra = {{"config_hash", stage_hash(config_, Stage::kReduce)}, {"level", level_name(level)}};
      save_kpca_model(fitted, ws_.kpca_model(level), extra);
      // Reload so signatures come from exactly the persisted model.
      const KpcaModel model = load_kpca_model(ws_.kpca_model(level));

      std::vector<VideoSignature> sigs(raw.size());
      parallel_for(raw.size(), config_.threads, [&](std::size_t i) {
        const auto& descs = level == Level::kFc ? raw[i].fc : raw[i].conv;
        sigs[i].video_id = raw[i].video_id;
        sigs[i].frames.resize(static_cast<Eigen::Index>(descs.size()), model.out_dim());
        for (std::size_t r = 0; r < descs.size(); ++r)
          sigs[i].frames.row(static_cast<Eigen::Index>(r)) = kpca_transform(model, descs[r]).transpose();
      });
      save_signatures(sigs, level, model.out_dim(), ws_.signatures(level), extra);
      counts[level_name(level)] = {{"training", training.rows()},
                                   {"input_dim", training.cols()},
                                   {"out_dim", model.out_dim()},
                                   {"sigma", sigma},
                                   {"descriptors", all.size()}};
    }
    return finish(Stage::kReduce, start, counts);
  }

  // index: per level, a kd-forest over video centroids and every video's
  // refined neighbour list (candidate pool re-scored by FSUML distance).
  json index() {
    const auto start = now();
    require(Stage::kReduce);
    json counts = json::object();
    for (Level level : {Level::kFc, Level::kConv}) {
      const auto sigs = load_signatures(ws_.signatures(level));
      const std::size_t n = sigs.size();
      RowMatrix centroids(static_cast<Eigen::Index>(n), sigs.front().frames.cols());
      std::vector<std::string> ids;
      for (std::size_t i = 0; i < n; ++i) {
        centroids.row(static_cast<Eigen::Index>(i)) = sigs[i].centroid().transpose();
        ids.push_back(sigs[i].video_id);
      }
      const AnnIndex ann = AnnIndex::build(centroids, ids, {config_.num_trees, config_.leaf_size, config_.seed});
      const json extra = {{"config_hash", stage_hash(config_, Stage::kIndex)}, {"level", level_name(level)}};
      ann.save(ws_.index(level), extra);

      // Candidate pools, then each needed unordered pair scored once in both directions.
      const std::size_t fetch = std::min(n, config_.pool_size() + 1);
      std::vector<std::vector<std::size_t>> pools(n);
      std::unordered_map<std::string, std::size_t> position;
      for (std::size_t i = 0; i < n; ++i) position[ids[i]] = i;
      parallel_for(n, config_.threads, [&](std::size_t i) {
        for (const auto& nb : ann.knn(ann.points().row(static_cast<Eigen::Index>(i)).transpose(), fetch,
                                      config_.query_budget(fetch)))
          if (nb.video_id != ids[i]) pools[i].push_back(position.at(nb.video_id));
      });
      std::set<std::pair<std::size_t, std::size_t>> pair_set;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j : pools[i]) pair_set.insert({std::min(i, j), std::max(i, j)});
      const std::vector<std::pair<std::size_t, std::size_t>> pairs(pair_set.begin(), pair_set.end());
      std::vector<VideoPairDistance> scored(pairs.size());
      const SsoParams sso = config_.sso();
      parallel_for(pairs.size(), config_.threads, [&](std::size_t p) {
        scored[p] = video_distance_both(sigs[pairs[p].first].frames, sigs[pairs[p].second].frames, sso);
      });
      std::map<std::pair<std::size_t, std::size_t>, double> directed;
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        directed[{pairs[p].first, pairs[p].second}] = scored[p].forward;
        directed[{pairs[p].second, pairs[p].first}] = scored[p].backward;
      }

      json doc = {{"config_hash", stage_hash(config_, Stage::kIndex)},
                  {"level", level_name(level)},
                  {"pool_size", config_.pool_size()},
                  {"videos", json::array()}};
      for (std::size_t i = 0; i < n; ++i) {
        NeighborList list;
        for (std::size_t j : pools[i]) list.push_back({ids[j], directed.at({i, j})});
        std::sort(list.begin(), list.end(), neighbor_less);
        json neighbors = json::array();
        for (const auto& nb : list) neighbors.push_back({{"video_id", nb.video_id}, {"distance", nb.distance}});
        doc["videos"].push_back({{"video_id", ids[i]}, {"neighbors", neighbors}});
      }
      write_json_file(ws_.neighbors(level), doc);
      counts[level_name(level)] = {{"videos", n}, {"scored_pairs", pairs.size()}};
    }
    return finish(Stage::kIndex, start, counts);
  }

  // Per-level and fused rankings for a gallery video.
  struct QueryRankings {
    std::string query_id;
    std::map<std::string, RankedResult> levels;
  };

  // query: rankings for the given gallery ids (all truth queries, or every
  // video when no truth file exists, if empty).
  json query(std::vector<std::string> query_ids = {}, std::optional<std::size_t> k = std::nullopt) {
    const auto start = now();
    require(Stage::kIndex);
    const State state = load_state();
    if (query_ids.empty()) query_ids = default_queries(state);
    std::vector<QueryRankings> all(query_ids.size());
    parallel_for(query_ids.size(), config_.threads,
                 [&](std::size_t i) { all[i] = rank_gallery_video(state, query_ids[i], k.value_or(config_.knn_k)); });

    json doc = {{"config_hash", stage_hash(config_, Stage::kQuery)},
                {"k", k.value_or(config_.knn_k)},
                {"levels", json::object()}};
    for (const auto& level : config_.levels) {
      json arr = json::array();
      for (const auto& q : all) arr.push_back({{"query_id", q.query_id}, {"ranking", ranking_json(q.levels.at(level))}});
      doc["levels"][level] = arr;
    }
    write_json_file(ws_.results(), doc);
    return finish(Stage::kQuery, start, {{"queries", all.size()}, {"levels", config_.levels}});
  }

  // Rankings for one gallery video, without touching results.json.
  QueryRankings query_video(const std::string& id, std::optional<std::size_t> k = std::nullopt) {
    require(Stage::kIndex);
    return rank_gallery_video(load_state(), id, k.value_or(config_.knn_k));
  }

  // Rankings for a video outside the gallery, read from an NDVF file.
  QueryRankings query_external(const VideoFeatures& video, std::optional<std::size_t> k = std::nullopt) {
    require(Stage::kIndex);
    const State state = load_state();
    const std::size_t kk = k.value_or(config_.knn_k);
    const KeyframeSet kfs = select_keyframes(video, config_.rate);
    QueryRankings out;
    out.query_id = video.video_id;
    for (Level level : {Level::kFc, Level::kConv}) {
      const KpcaModel model = load_kpca_model(ws_.kpca_model(level));
      std::vector<Vector> rows;
      for (std::size_t pos : kfs.selected) {
        const auto& f = video.frames[pos];
        try {
          const Vector d = level == Level::kFc ? build_ulf(f.fc_vector).vector : build_llf(f.conv_vectors).vector;
          rows.push_back(kpca_transform(model, d));
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kDegenerateDescriptor) throw;
        }
      }
      if (rows.empty()) throw Error(ErrorCode::kDegenerateDescriptor, video.video_id + " has no usable keyframe");
      RowMatrix sig(static_cast<Eigen::Index>(rows.size()), model.out_dim());
      for (std::size_t r = 0; r < rows.size(); ++r) sig.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();

      const auto& ls = state.level(level);
      const Vector centroid = sig.colwise().mean().transpose();
      const std::size_t fetch = std::min(ls.ann.size(), config_.pool_size());
      NeighborList refined;
      for (const auto& nb : ls.ann.knn(centroid, fetch, config_.query_budget(fetch))) {
        if (nb.video_id == video.video_id) continue;
        refined.push_back({nb.video_id, video_distance(sig, ls.signatures[ls.position.at(nb.video_id)].frames, config_.sso())});
      }
      std::sort(refined.begin(), refined.end(), neighbor_less);
      out.levels[level_name(level)] = complete_ranking(video.video_id, refined, centroid, ls);
    }
    out.levels["fused"] = fused(state, out.query_id, out.levels.at("fc"), out.levels.at("conv"), kk);
    return out;
  }

  // evaluate: AP per query and mAP per level, PR curves as CSV.
  json evaluate(const fs::path& truth_path = {}, const LabelMap& labels = default_label_map()) {
    const auto start = now();
    require(Stage::kQuery);
    const fs::path path = truth_path.empty() ? ws_.truth() : truth_path;
    if (!fs::exists(path)) throw Error(ErrorCode::kOrdering, "evaluate needs ground truth; none at " + path.string());
    const auto truths = load_ground_truth(path, labels);
    const json results = read_json_file(ws_.results());
    json summary = json::object();
    for (const auto& [level, arr] : results.at("levels").items()) {
      const auto rankings = rankings_from_json(arr);
      const Evaluation eval = ndvr::evaluate(rankings, truths);
      write_json_file(ws_.evaluation(level), evaluation_json(eval, stage_hash(config_, Stage::kEvaluate)));
      fs::create_directories(ws_.pr_dir(level));
      std::map<std::string, const RankedResult*> by_query;
      for (const auto& r : rankings) by_query[r.query_id] = &r;
      for (const auto& t : truths) {
        std::ofstream csv(ws_.pr_dir(level) / (safe_name(t.query_id) + ".csv"), std::ios::trunc);
        write_pr_csv(precision_recall(*by_query.at(t.query_id), t), csv);
      }
      summary[level] = eval.map;
    }
    return finish(Stage::kEvaluate, start, {{"map", summary}, {"queries", truths.size()}});
  }

  // All stages in order; evaluate only when ground truth is available.
  json run_all(const fs::path& input) {
    json reports = json::object();
    reports["ingest"] = ingest(input);
    reports["keyframes"] = keyframes();
    reports["reduce"] = reduce();
    reports["index"] = index();
    reports["query"] = query();
    if (fs::exists(ws_.truth())) reports["evaluate"] = evaluate();
    return reports;
  }

  json run_stage(Stage stage, const fs::path& input = {}) {
    switch (stage) {
      case Stage::kIngest: return ingest(input);
      case Stage::kKeyframes: return keyframes();
      case Stage::kReduce: return reduce();
      case Stage::kIndex: return index();
      case Stage::kQuery: return query();
      case Stage::kEvaluate: return evaluate();
    }
    return {};
  }

  static json ranking_json(const RankedResult& r) {
    json arr = json::array();
    for (std::size_t i = 0; i < r.ranking.size(); ++i)
      arr.push_back({{"video_id", r.ranking[i].video_id}, {"score", r.ranking[i].score}, {"rank", i + 1}});
    return arr;
  }

  static std::vector<RankedResult> rankings_from_json(const json& arr) {
    std::vector<RankedResult> out;
    for (const auto& q : arr) {
      RankedResult r;
      r.query_id = q.at("query_id").get<std::string>();
      for (const auto& item : q.at("ranking")) r.ranking.push_back({item.at("video_id"), item.at("score")});
      out.push_back(std::move(r));
    }
    return out;
  }

  static json evaluation_json(const Evaluation& eval, const std::string& hash = {}) {
    json per_query = json::array();
    for (const auto& q : eval.per_query) per_query.push_back({{"query_id", q.query_id}, {"ap", q.ap}});
    json doc = {{"per_query", per_query}, {"map", eval.map}};
    if (!hash.empty()) doc["config_hash"] = hash;
    return doc;
  }

  static std::string safe_name(const std::string& id) {
    std::string out;
    for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
    return out.empty() ? "_" : out;
  }

 private:
  struct LevelState {
    std::vector<VideoSignature> signatures;
    std::unordered_map<std::string, std::size_t> position;
    AnnIndex ann;
    std::unordered_map<std::string, NeighborList> neighbors;  // refined pool per gallery video
  };

  struct State {
    GalleryIndex gallery;
    LevelState fc, conv;
    std::vector<FusedActivations> activations;  // per gallery position, for the index-time k
    std::size_t activation_k = 0;

    const LevelState& level(Level l) const { return l == Level::kFc ? fc : conv; }
  };

  State load_state() const {
    State state;
    for (Level level : {Level::kFc, Level::kConv}) {
      LevelState& ls = level == Level::kFc ? state.fc : state.conv;
      ls.signatures = load_signatures(ws_.signatures(level));
      for (std::size_t i = 0; i < ls.signatures.size(); ++i) ls.position[ls.signatures[i].video_id] = i;
      json header;
      ls.ann = AnnIndex::load(ws_.index(level), &header);
      check_hash(header, Stage::kIndex, ws_.index(level));
      const json doc = read_json_file(ws_.neighbors(level));
      check_hash(doc, Stage::kIndex, ws_.neighbors(level));
      for (const auto& v : doc.at("videos")) {
        NeighborList list;
        for (const auto& nb : v.at("neighbors")) list.push_back({nb.at("video_id"), nb.at("distance")});
        ls.neighbors[v.at("video_id").get<std::string>()] = std::move(list);
      }
    }
    std::vector<std::string> ids;
    for (const auto& s : state.fc.signatures) ids.push_back(s.video_id);
    state.gallery = GalleryIndex(ids);
    return state;
  }

  std::vector<FusedActivations> gallery_activations(const State& state, std::size_t k) const {
    std::vector<FusedActivations> acts(state.gallery.size());
    for (std::size_t pos = 0; pos < state.gallery.size(); ++pos) {
      const auto& id = state.gallery.id(pos);
      const auto fc = state.fc.neighbors.find(id);
      const auto conv = state.conv.neighbors.find(id);
      if (fc == state.fc.neighbors.end() || conv == state.conv.neighbors.end())
        throw Error(ErrorCode::kState, "no precomputed neighbours for gallery video " + id);
      acts[pos] = fuse(activation(fc->second, state.gallery, k), activation(conv->second, state.gallery, k));
    }
    return acts;
  }

  // Refined pool first, then the rest of the gallery by centroid distance.
  RankedResult complete_ranking(const std::string& query_id, const NeighborList& refined, const Vector& centroid,
                                const LevelState& ls) const {
    RankedResult out;
    out.query_id = query_id;
    std::set<std::string> placed{query_id};
    for (const auto& nb : refined) {
      out.ranking.push_back({nb.video_id, nb.distance});
      placed.insert(nb.video_id);
    }
    NeighborList rest;
    for (Eigen::Index i = 0; i < ls.ann.points().rows(); ++i) {
      const auto& id = ls.ann.ids()[static_cast<std::size_t>(i)];
      if (!placed.count(id)) rest.push_back({id, (ls.ann.points().row(i).transpose() - centroid).norm()});
    }
    std::sort(rest.begin(), rest.end(), neighbor_less);
    for (const auto& nb : rest) out.ranking.push_back({nb.video_id, nb.distance});
    return out;
  }

  RankedResult fused(const State& state, const std::string& query_id, const RankedResult& fc, const RankedResult& conv,
                     std::size_t k) const {
    return rerank({query_id, fc, conv}, state.gallery, gallery_activations(state, k), k);
  }

  QueryRankings rank_gallery_video(const State& state, const std::string& id, std::size_t k) const {
    if (!state.gallery.contains(id)) throw Error(ErrorCode::kMapping, "video '" + id + "' is not in the gallery");
    QueryRankings out;
    out.query_id = id;
    for (Level level : {Level::kFc, Level::kConv}) {
      const auto& ls = state.level(level);
      const Vector centroid = ls.signatures[ls.position.at(id)].centroid().cast<float>().cast<double>();
      out.levels[level_name(level)] = complete_ranking(id, ls.neighbors.at(id), centroid, ls);
    }
    out.levels["fused"] = fused(state, id, out.levels.at("fc"), out.levels.at("conv"), k);
    return out;
  }

  std::vector<std::string> default_queries(const State& state) const {
    std::vector<std::string> ids;
    if (fs::exists(ws_.truth())) {
      std::ifstream in(ws_.truth());
      std::string line;
      while (std::getline(in, line)) {
        std::istringstream fields(line);
        std::string first, second;
        if (fields >> first >> second && first == "query") ids.push_back(second);
      }
    }
    if (ids.empty()) ids = state.gallery.ids();
    return ids;
  }

  void check_hash(const json& doc, Stage stage, const fs::path& what) const {
    const std::string expected = stage_hash(config_, stage);
    if (!doc.contains("config_hash") || doc.at("config_hash") != expected)
      throw Error(ErrorCode::kStale, what.string() + " was produced with a different configuration; rerun '" +
                                         stage_name(stage) + "'");
  }

  // The prerequisite stage must have run, with the current configuration.
  void require(Stage prerequisite) const {
    const fs::path report = ws_.report(prerequisite);
    if (!fs::exists(report))
      throw Error(ErrorCode::kOrdering, std::string("stage '") + stage_name(prerequisite) +
                                            "' has not been run in workspace " + ws_.root().string());
    check_hash(read_json_file(report), prerequisite, report);
  }

  using Clock = std::chrono::steady_clock;
  static Clock::time_point now() { return Clock::now(); }

  json finish(Stage stage, Clock::time_point start, json counts) const {
    const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
    json report = {{"stage", stage_name(stage)},
                   {"config_hash", stage_hash(config_, stage)},
                   {"config", config_json(config_)},
                   {"counts", std::move(counts)},
                   {"seconds", seconds}};
    write_json_file(ws_.report(stage), report);
    return report;
  }

  PipelineConfig config_;
  Workspace ws_;
};

}  // namespace ndvr

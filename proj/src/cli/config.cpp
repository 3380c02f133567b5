#include "spvd/cli/config.hpp"

#include <algorithm>

#include "spvd/common/error.hpp"
#include "spvd/data/io.hpp"

namespace spvd::cli {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* key) { return k == key; }))
      throw ConfigError("unknown key '" + where + "." + k + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + where + "." + key + "' has the wrong type");
  }
}

std::string task_name(train::TaskSpec::Kind k) {
  switch (k) {
    case train::TaskSpec::Kind::kNone: return "none";
    case train::TaskSpec::Kind::kCompletion: return "completion";
    case train::TaskSpec::Kind::kSuperres: return "superres";
  }
  return "?";
}

}  // namespace

diffusion::NoiseSchedule ScheduleConfig::make() const {
  return diffusion::make_linear_schedule(T, beta_start, beta_end, sigma);
}

json RunConfig::to_json() const {
  json j;
  j["data"] = {{"n_shapes", data.n_shapes},
               {"n_points", data.n_points},
               {"normalization", data::to_string(data.normalization)}};
  if (data.manifest.empty()) {
    j["data"]["kind"] = data.kinds;
  } else {
    j["data"]["manifest"] = data.manifest;
  }
  j["model"] = model::to_json(model);
  j["schedule"] = {{"T", schedule.T},
                   {"beta_start", schedule.beta_start},
                   {"beta_end", schedule.beta_end},
                   {"sigma_variant", diffusion::to_string(schedule.sigma)}};
  j["train"] = {{"steps", train.steps},         {"batch", train.batch}, {"lr", train.lr},
                {"one_cycle", train.one_cycle}, {"seed", train.seed},   {"save_every", train.save_every}};
  j["sample"] = {{"rule", diffusion::to_string(sample.rule)},
                 {"steps", sample.steps},
                 {"count", sample.count},
                 {"batch", sample.batch},
                 {"points", sample.points}};
  j["task"] = {{"kind", task_name(task.kind)}};
  if (task.kind == train::TaskSpec::Kind::kCompletion) j["task"]["m"] = task.m;
  if (task.kind == train::TaskSpec::Kind::kSuperres) {
    j["task"]["k_in"] = task.k_in;
    j["task"]["n_out"] = task.n_out;
  }
  j["eval"] = {{"runs", eval.runs}, {"emd", eval.emd}};
  return j;
}

std::size_t RunConfig::train_points() const {
  return task.kind == train::TaskSpec::Kind::kSuperres ? task.n_out : data.n_points;
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j, {"data", "model", "schedule", "train", "sample", "task", "eval"}, "config");
  RunConfig c;
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, {"kind", "manifest", "n_shapes", "n_points", "normalization"}, "data");
    if (d.contains("kind")) {
      if (d["kind"].is_string()) {
        c.data.kinds = {d["kind"].get<std::string>()};
      } else {
        read(d, "kind", c.data.kinds, "data");
      }
      if (c.data.kinds.size() == 1 && c.data.kinds[0] == "mixed") {
        c.data.kinds.clear();
        for (auto k : data::all_shape_kinds()) c.data.kinds.push_back(data::to_string(k));
      }
      for (const auto& k : c.data.kinds) data::parse_shape_kind(k);
    }
    read(d, "manifest", c.data.manifest, "data");
    read(d, "n_shapes", c.data.n_shapes, "data");
    read(d, "n_points", c.data.n_points, "data");
    std::string norm = data::to_string(c.data.normalization);
    read(d, "normalization", norm, "data");
    c.data.normalization = data::parse_norm_mode(norm);
  }
  if (j.contains("model")) c.model = model::network_config_from_json(j["model"]);
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    reject_unknown(s, {"T", "beta_start", "beta_end", "sigma_variant"}, "schedule");
    read(s, "T", c.schedule.T, "schedule");
    read(s, "beta_start", c.schedule.beta_start, "schedule");
    read(s, "beta_end", c.schedule.beta_end, "schedule");
    std::string v = diffusion::to_string(c.schedule.sigma);
    read(s, "sigma_variant", v, "schedule");
    c.schedule.sigma = diffusion::parse_sigma_variant(v);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, {"steps", "batch", "lr", "one_cycle", "seed", "save_every"}, "train");
    read(t, "steps", c.train.steps, "train");
    read(t, "batch", c.train.batch, "train");
    read(t, "lr", c.train.lr, "train");
    read(t, "one_cycle", c.train.one_cycle, "train");
    read(t, "seed", c.train.seed, "train");
    read(t, "save_every", c.train.save_every, "train");
  }
  if (j.contains("sample")) {
    const auto& s = j["sample"];
    reject_unknown(s, {"rule", "steps", "count", "batch", "points"}, "sample");
    std::string rule = diffusion::to_string(c.sample.rule);
    read(s, "rule", rule, "sample");
    c.sample.rule = diffusion::parse_sampler_rule(rule);
    read(s, "steps", c.sample.steps, "sample");
    read(s, "count", c.sample.count, "sample");
    read(s, "batch", c.sample.batch, "sample");
    read(s, "points", c.sample.points, "sample");
  }
  if (j.contains("task")) {
    const auto& t = j["task"];
    std::string kind = "none";
    read(t, "kind", kind, "task");
    if (kind == "none") {
      reject_unknown(t, {"kind"}, "task");
    } else if (kind == "completion") {
      reject_unknown(t, {"kind", "m"}, "task");
      c.task.kind = train::TaskSpec::Kind::kCompletion;
      read(t, "m", c.task.m, "task");
    } else if (kind == "superres") {
      reject_unknown(t, {"kind", "k_in", "n_out"}, "task");
      c.task.kind = train::TaskSpec::Kind::kSuperres;
      read(t, "k_in", c.task.k_in, "task");
      read(t, "n_out", c.task.n_out, "task");
    } else {
      throw ConfigError("unknown task kind '" + kind + "'");
    }
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    reject_unknown(e, {"runs", "emd"}, "eval");
    read(e, "runs", c.eval.runs, "eval");
    read(e, "emd", c.eval.emd, "eval");
  }

  if (c.train.steps < 0) throw ConfigError("train.steps must be non-negative");
  if (c.train.batch == 0) throw ConfigError("train.batch must be positive");
  if (!(c.train.lr > 0)) throw ConfigError("train.lr must be positive");
  if (c.sample.batch == 0) throw ConfigError("sample.batch must be positive");
  if (c.eval.runs < 1) throw ConfigError("eval.runs must be at least 1");
  if (c.task.kind == train::TaskSpec::Kind::kCompletion && c.task.m < 1) throw ConfigError("task.m must be >= 1");
  if (c.task.kind == train::TaskSpec::Kind::kSuperres && c.task.k_in >= c.task.n_out)
    throw ConfigError("task.k_in must be smaller than task.n_out");
  c.schedule.make();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = data::read_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  try {
    return run_config_from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' is malformed");
    if (!node->is_object()) *node = json::object();
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
}

data::Dataset build_dataset(const RunConfig& cfg) {
  const std::size_t n = cfg.train_points();
  if (!cfg.data.manifest.empty()) {
    auto d = data::load_manifest(cfg.data.manifest, cfg.data.normalization);
    Rng rng = make_stream(cfg.train.seed, "subsample");
    return data::resample_points(d, n, rng);
  }
  if (n < 64) throw ConfigError("synthetic shapes need at least 64 points");
  std::vector<data::ShapeKind> kinds;
  for (const auto& k : cfg.data.kinds) kinds.push_back(data::parse_shape_kind(k));
  return data::synth_dataset(kinds, cfg.data.n_shapes, n, cfg.train.seed, cfg.data.normalization);
}

}  // namespace spvd::cli

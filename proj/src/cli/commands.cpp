#include "spvd/cli/commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "spvd/common/error.hpp"
#include "spvd/data/checkpoint.hpp"
#include "spvd/data/io.hpp"

namespace spvd::cli {

using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void write_json(const fs::path& path, const json& j) { data::write_file_atomic(path, j.dump(2) + "\n"); }

diffusion::EpsModel<float> eps_model(const model::Network<float>& net) {
  return [&net](const ad::Tensor<float>& x, std::span<const int> t, std::span<const int> c, std::size_t b) {
    return net.predict(x, t, c, b);
  };
}

std::vector<int> class_ids(const model::Network<float>& net, std::size_t batch, std::size_t first, int class_id) {
  const int nc = net.config().num_classes;
  if (nc == 0) {
    if (class_id > 0) throw ConfigError("--class given for an unconditional network");
    return {};
  }
  if (class_id >= nc) throw ConfigError("--class " + std::to_string(class_id) + " is outside the network's classes");
  std::vector<int> out;
  for (std::size_t b = 0; b < batch; ++b) out.push_back(class_id >= 0 ? class_id : static_cast<int>((first + b) % nc));
  return out;
}

diffusion::SamplerOptions sampler_options(const RunConfig& cfg, const diffusion::NoiseSchedule& sched) {
  diffusion::SamplerOptions o{cfg.sample.rule, cfg.sample.steps, false};
  if (o.rule == diffusion::SamplerRule::kDdpm && o.steps != 0 && o.steps != sched.T())
    throw ConfigError("ddpm visits every timestep; sample.steps must be 0 or T = " + std::to_string(sched.T()));
  if (o.steps > sched.T())
    throw ConfigError("sample.steps = " + std::to_string(o.steps) + " exceeds T = " + std::to_string(sched.T()));
  if (o.rule == diffusion::SamplerRule::kDdim && o.steps < 1) throw ConfigError("ddim needs sample.steps >= 1");
  return o;
}

struct Loaded {
  data::Checkpoint ck;
  std::unique_ptr<model::Network<float>> net;
  diffusion::NoiseSchedule sched;
};

Loaded load_model(const fs::path& path) {
  Loaded l;
  l.ck = data::load_checkpoint(path);
  l.net = data::restore_network(l.ck);
  l.sched = l.ck.schedule();
  return l;
}

// Masked sampling of one cloud. `known` holds normalized coordinates for
// every slot; KNOWN slots are copied from `raw` into the output afterwards.
std::vector<float> masked_generate(const Loaded& m, const RunConfig& cfg, const std::vector<float>& normalized,
                                   const diffusion::SampleMask& mask, const data::Normalization& norm,
                                   const std::vector<float>& raw, std::uint64_t seed, int class_id) {
  const std::size_t n = mask.points;
  const auto opts = sampler_options(cfg, m.sched);
  diffusion::KnownPoints<float> kp{PointBatch<float>(1, n, normalized), mask};
  const auto classes = class_ids(*m.net, 1, 0, class_id);
  Rng noise = make_stream(seed, "noise");
  auto res = diffusion::sample<float>(eps_model(*m.net), 1, n, m.sched, opts, classes, &kp, noise);
  auto out = norm.inverse(res.xyz);
  for (std::size_t i = 0; i < n; ++i)
    if (mask.known[i])
      for (int a = 0; a < 3; ++a) out[i * 3 + a] = raw[i * 3 + a];
  return out;
}

std::string zero_pad(std::size_t i, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

TrainResult cmd_train(const RunConfig& cfg_in, const fs::path& out, const std::optional<fs::path>& resume,
                      std::ostream& log) {
  RunConfig cfg = cfg_in;
  fs::create_directories(out);
  std::unique_ptr<model::Network<float>> net;
  diffusion::NoiseSchedule sched;
  std::int64_t start = 0;
  std::optional<data::Checkpoint> ck;
  if (resume) {
    ck = data::load_checkpoint(*resume);
    net = data::restore_network(*ck);
    sched = ck->schedule();
    start = ck->step;
    cfg.model = ck->network;
    cfg.schedule = {ck->schedule_steps, ck->beta_start, ck->beta_end, ck->sigma};
  } else {
    Rng init = make_stream(cfg.train.seed, "init");
    net = std::make_unique<model::Network<float>>(cfg.model, init);
    sched = cfg.schedule.make();
  }
  train::Adam<float> adam(net->params());
  if (ck) train::load_adam(adam, net->params(), ck->blobs, ck->extra.value("adam_steps", ck->step));

  const auto dataset = build_dataset(cfg);
  write_json(out / "config.json", cfg.to_json());

  const fs::path ckpt_path = out / "checkpoint.spvd";
  auto save = [&](std::int64_t step) {
    auto c = data::make_checkpoint(*net, sched, step, cfg.train.seed);
    auto moments = train::adam_blobs(adam, net->params());
    c.blobs.insert(c.blobs.end(), moments.begin(), moments.end());
    c.extra["adam_steps"] = adam.steps();
    c.extra["n_points"] = cfg.train_points();
    c.extra["config"] = cfg.to_json();
    data::save_checkpoint(c, ckpt_path);
  };

  const fs::path csv = out / "loss.csv";
  const bool append = resume && fs::exists(csv);
  std::ofstream loss(csv, append ? std::ios::app : std::ios::trunc);
  if (!loss) throw Error("cannot write " + csv.string());
  if (!append) loss << "step,loss,lr\n";
  loss << std::setprecision(9);

  train::TrainOptions opts{cfg.train.steps, cfg.train.batch, cfg.train.lr, cfg.train.one_cycle, cfg.train.seed,
                           cfg.task};
  const auto t0 = Clock::now();
  const std::int64_t every = std::max<std::int64_t>(1, (cfg.train.steps - start) / 20);
  train::TrainHooks hooks;
  hooks.on_step = [&](const train::LossRecord& r) {
    loss << r.step << ',' << r.loss << ',' << r.lr << '\n';
    if ((r.step - start + 1) % every == 0 || r.step + 1 == cfg.train.steps)
      log << "step " << r.step + 1 << "/" << cfg.train.steps << " loss " << r.loss << " lr " << r.lr << " ("
          << std::fixed << std::setprecision(1) << seconds_since(t0) << " s)\n"
          << std::defaultfloat << std::setprecision(6);
  };
  hooks.on_save = [&](std::int64_t next) {
    loss.flush();
    save(next);
  };
  hooks.save_every = cfg.train.save_every;
  auto records = train::train(*net, dataset, sched, opts, adam, start, hooks);
  loss.close();
  const std::int64_t end = std::max(start, cfg.train.steps);
  save(end);
  TrainResult r{start, end, records.empty() ? 0.0 : records.back().loss, ckpt_path};
  return r;
}

SampleResult cmd_sample(const fs::path& checkpoint, const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                        int class_id, std::ostream& log) {
  auto m = load_model(checkpoint);
  const auto opts = sampler_options(cfg, m.sched);
  std::size_t points = cfg.sample.points;
  if (points == 0) points = m.ck.extra.value("n_points", cfg.data.n_points);
  if (cfg.sample.count == 0) throw ConfigError("sample.count must be positive");
  fs::create_directories(out);

  SampleResult res;
  json batches = json::array();
  const auto t0 = Clock::now();
  const int width = std::max<int>(3, static_cast<int>(std::to_string(cfg.sample.count).size()));
  for (std::size_t first = 0, k = 0; first < cfg.sample.count; first += cfg.sample.batch, ++k) {
    const std::size_t b = std::min(cfg.sample.batch, cfg.sample.count - first);
    const auto classes = class_ids(*m.net, b, first, class_id);
    Rng noise = make_stream(seed, "noise", k);
    const auto tb = Clock::now();
    auto clouds = diffusion::sample<float>(eps_model(*m.net), b, points, m.sched, opts, classes, nullptr, noise);
    const double secs = seconds_since(tb);
    batches.push_back({{"size", b}, {"seconds", secs}});
    log << "batch " << k << ": " << b << " clouds in " << secs << " s\n";
    for (std::size_t i = 0; i < b; ++i) {
      data::PointCloud c;
      auto v = clouds.cloud(i);
      c.xyz.assign(v.begin(), v.end());
      if (!classes.empty()) c.class_id = classes[i];
      auto path = out / ("sample_" + zero_pad(first + i, width) + ".ply");
      data::save_ply(c, path);
      res.files.push_back(path);
    }
  }
  res.seconds = seconds_since(t0);
  json manifest{{"seed", seed},
                {"rule", diffusion::to_string(opts.rule)},
                {"steps", opts.rule == diffusion::SamplerRule::kDdpm ? m.sched.T() : opts.steps},
                {"count", cfg.sample.count},
                {"points", points},
                {"checkpoint", checkpoint.string()},
                {"timing", {{"total_seconds", res.seconds}, {"batches", batches}}},
                {"normalization", m.ck.extra.contains("config") ? m.ck.extra["config"]["data"]["normalization"]
                                                                : json(data::to_string(cfg.data.normalization))}};
  json files = json::array();
  for (const auto& f : res.files) files.push_back(f.filename().string());
  manifest["files"] = files;
  write_json(out / "manifest.json", manifest);
  write_json(out / "config.json", cfg.to_json());
  return res;
}

fs::path cmd_complete(const fs::path& checkpoint, const fs::path& input, const RunConfig& cfg, int m_parts,
                      std::uint64_t seed, const fs::path& out, int class_id, std::ostream& log) {
  const auto cloud = data::load_cloud(input);
  if (!cloud.has_parts()) throw ConfigError("completion needs per-point part labels in " + input.string());
  auto m = load_model(checkpoint);
  Rng mrng = make_stream(seed, "mask");
  auto mask = data::sample_part_mask(cloud.parts, m_parts, mrng);
  auto [normalized, norm] = data::normalize(cloud.xyz, cfg.data.normalization);
  const auto t0 = Clock::now();
  auto xyz = masked_generate(m, cfg, normalized, mask, norm, cloud.xyz, seed, class_id);
  const double secs = seconds_since(t0);
  data::PointCloud result{xyz, cloud.parts, cloud.class_id, cloud.name};
  data::save_ply(result, out);
  std::vector<int> free_parts;
  for (std::size_t i = 0; i < mask.points; ++i)
    if (!mask.known[i] && std::find(free_parts.begin(), free_parts.end(), cloud.parts[i]) == free_parts.end())
      free_parts.push_back(cloud.parts[i]);
  fs::path meta = out;
  meta += ".json";
  write_json(meta, {{"task", "completion"},
                    {"input", input.string()},
                    {"m", m_parts},
                    {"free_parts", free_parts},
                    {"free_points", mask.free_count(0)},
                    {"seed", seed},
                    {"seconds", secs},
                    {"config", cfg.to_json()}});
  log << "completed " << mask.free_count(0) << " of " << mask.points << " points in " << secs << " s\n";
  return out;
}

fs::path cmd_superres(const fs::path& checkpoint, const fs::path& input, const RunConfig& cfg, std::size_t n_out,
                      std::uint64_t seed, const fs::path& out, int class_id, std::ostream& log) {
  const auto cloud = data::load_cloud(input);
  const std::size_t k = cloud.size();
  if (n_out <= k)
    throw ConfigError("n_out = " + std::to_string(n_out) + " must exceed the input size " + std::to_string(k));
  auto m = load_model(checkpoint);
  auto [normalized, norm] = data::normalize(cloud.xyz, cfg.data.normalization);
  normalized.resize(n_out * 3, 0.0f);
  std::vector<float> raw = cloud.xyz;
  raw.resize(n_out * 3, 0.0f);
  diffusion::SampleMask mask{1, n_out, std::vector<std::uint8_t>(n_out, 0)};
  std::fill(mask.known.begin(), mask.known.begin() + static_cast<std::ptrdiff_t>(k), 1);
  const auto t0 = Clock::now();
  auto xyz = masked_generate(m, cfg, normalized, mask, norm, raw, seed, class_id);
  const double secs = seconds_since(t0);
  data::save_ply(data::PointCloud{xyz, {}, cloud.class_id, cloud.name}, out);
  fs::path meta = out;
  meta += ".json";
  write_json(meta, {{"task", "superres"},
                    {"input", input.string()},
                    {"k_in", k},
                    {"n_out", n_out},
                    {"seed", seed},
                    {"seconds", secs},
                    {"config", cfg.to_json()}});
  log << "upsampled " << k << " -> " << n_out << " points in " << secs << " s\n";
  return out;
}

metrics::MetricReport cmd_eval(const fs::path& gen_dir, const fs::path& ref_dir, int runs, std::uint64_t seed,
                               bool with_emd, const std::optional<fs::path>& out) {
  auto load_dir = [](const fs::path& dir) {
    std::vector<fs::path> files;
    try {
      files = data::list_clouds(dir);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (files.size() < 2) throw ConfigError(dir.string() + " holds fewer than two clouds");
    std::vector<metrics::CloudF> clouds;
    for (const auto& f : files) clouds.push_back(data::load_cloud(f).xyz);
    return clouds;
  };
  const auto gen = load_dir(gen_dir);
  const auto ref = load_dir(ref_dir);
  std::string note;
  if (with_emd) {
    const std::size_t n = ref.front().size();
    bool uniform = true;
    for (const auto* set : {&gen, &ref})
      for (const auto& c : *set) uniform = uniform && c.size() == n;
    if (!uniform) {
      with_emd = false;
      note = "EMD needs equal cloud sizes for every pair; skipped";
    }
  } else {
    note = "disabled";
  }
  metrics::ReportOptions opts{runs, seed, with_emd, {}};
  auto rep = metrics::eval_report(gen, ref, opts);
  rep.emd_note = note;
  if (out) {
    fs::create_directories(*out);
    auto j = rep.to_json();
    j["gen_dir"] = gen_dir.string();
    j["ref_dir"] = ref_dir.string();
    write_json(*out / "report.json", j);
  }
  return rep;
}

fs::path cmd_synth(const RunConfig& cfg, const fs::path& out) {
  const auto d = build_dataset(cfg);
  fs::create_directories(out);
  json shapes = json::array();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto name = zero_pad(i, 3) + "_" + d.shapes[i].name + ".ply";
    data::save_ply(d.shapes[i], out / name);
    shapes.push_back({{"path", name}, {"class", d.shapes[i].class_id}});
  }
  const auto path = out / "manifest.json";
  write_json(path, {{"shapes", shapes}});
  write_json(out / "config.json", cfg.to_json());
  return path;
}

json cmd_inspect(const RunConfig& cfg, const std::optional<fs::path>& checkpoint) {
  std::unique_ptr<model::Network<float>> net;
  json j;
  if (checkpoint) {
    auto ck = data::load_checkpoint(*checkpoint);
    net = data::restore_network(ck);
    j["checkpoint"] = {{"step", ck.step},
                       {"seed", ck.seed},
                       {"schedule", {{"T", ck.schedule_steps}, {"beta_start", ck.beta_start}, {"beta_end", ck.beta_end}}}};
    if (ck.extra.contains("config")) j["config"] = ck.extra["config"];
    j["model"] = model::to_json(ck.network);
  } else {
    Rng rng(0);
    net = std::make_unique<model::Network<float>>(cfg.model, rng);
    j["config"] = cfg.to_json();
  }
  j["param_count"] = net->param_count();
  std::map<std::string, std::size_t> groups;
  for (const auto& [name, p] : net->params()) groups[name.substr(0, name.find('.'))] += p.numel();
  j["params_by_group"] = groups;
  return j;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse point-voxel diffusion for point clouds"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir, checkpoint, input, gen_dir, ref_dir, rule;
  std::optional<std::int64_t> steps;
  std::optional<int> sample_steps, m_parts, runs;
  std::optional<std::size_t> count, n_out;
  int class_id = -1;
  bool no_emd = false;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "Run config JSON");
    c->add_option("--set", overrides, "Override a config key, e.g. train.steps=100");
    c->add_option("--seed", seed, "Run seed");
  };
  auto* train = app.add_subcommand("train", "Train a network");
  common(train);
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--checkpoint", checkpoint, "Resume from this checkpoint");
  train->add_option("--steps", steps, "Total training steps");

  auto* sample = app.add_subcommand("sample", "Generate point clouds");
  common(sample);
  sample->add_option("--checkpoint", checkpoint)->required();
  sample->add_option("--out", out_dir)->required();
  sample->add_option("--rule", rule, "ddpm or ddim");
  sample->add_option("--steps", sample_steps, "Sampler steps");
  sample->add_option("--count", count, "Number of clouds");
  sample->add_option("--class", class_id, "Class id for conditional networks");

  auto* complete = app.add_subcommand("complete", "Regenerate missing parts of a labelled cloud");
  common(complete);
  complete->add_option("--checkpoint", checkpoint)->required();
  complete->add_option("--input", input)->required();
  complete->add_option("--out", out_dir, "Output PLY")->required();
  complete->add_option("--m", m_parts, "Maximum number of parts to regenerate");
  complete->add_option("--rule", rule);
  complete->add_option("--steps", sample_steps);
  complete->add_option("--class", class_id);

  auto* superres = app.add_subcommand("superres", "Densify a sparse cloud");
  common(superres);
  superres->add_option("--checkpoint", checkpoint)->required();
  superres->add_option("--input", input)->required();
  superres->add_option("--out", out_dir, "Output PLY")->required();
  superres->add_option("--n-out", n_out, "Output point count");
  superres->add_option("--rule", rule);
  superres->add_option("--steps", sample_steps);
  superres->add_option("--class", class_id);

  auto* eval = app.add_subcommand("eval", "Compare generated and reference clouds");
  common(eval);
  eval->add_option("--gen", gen_dir)->required();
  eval->add_option("--ref", ref_dir)->required();
  eval->add_option("--runs", runs);
  eval->add_option("--out", out_dir, "Directory for report.json");
  eval->add_flag("--no-emd", no_emd, "Skip EMD");

  auto* synth = app.add_subcommand("synth", "Write the configured synthetic dataset");
  common(synth);
  synth->add_option("--out", out_dir)->required();

  auto* inspect = app.add_subcommand("inspect", "Print the resolved config and parameter count");
  common(inspect);
  inspect->add_option("--checkpoint", checkpoint);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    json j = json::object();
    if (!config_path.empty()) {
      try {
        j = json::parse(data::read_file(config_path));
      } catch (const json::parse_error& e) {
        throw ConfigError("config " + config_path + ": " + e.what());
      } catch (const json::exception& e) {
        throw ConfigError(e.what());
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    }
    for (const auto& o : overrides) apply_override(j, o);
    if (seed) j["train"]["seed"] = *seed;
    if (steps) j["train"]["steps"] = *steps;
    if (!rule.empty()) j["sample"]["rule"] = rule;
    if (sample_steps) j["sample"]["steps"] = *sample_steps;
    if (count) j["sample"]["count"] = *count;
    if (runs) j["eval"]["runs"] = *runs;
    RunConfig cfg = run_config_from_json(j);
    const std::uint64_t run_seed = cfg.train.seed;

    if (*train) {
      std::optional<fs::path> resume;
      if (!checkpoint.empty()) resume = checkpoint;
      auto r = cmd_train(cfg, out_dir, resume, err);
      out << "trained steps " << r.first_step << ".." << r.last_step << ", final loss " << r.final_loss
          << ", checkpoint " << r.checkpoint.string() << "\n";
    } else if (*sample) {
      auto r = cmd_sample(checkpoint, cfg, run_seed, out_dir, class_id, err);
      out << "wrote " << r.files.size() << " clouds to " << out_dir << " in " << r.seconds << " s\n";
    } else if (*complete) {
      const int m = m_parts.value_or(cfg.task.kind == train::TaskSpec::Kind::kCompletion ? cfg.task.m : 1);
      const auto path = cmd_complete(checkpoint, input, cfg, m, run_seed, out_dir, class_id, err);
      out << "wrote " << path.string() << "\n";
    } else if (*superres) {
      const std::size_t n = n_out.value_or(cfg.task.n_out);
      const auto path = cmd_superres(checkpoint, input, cfg, n, run_seed, out_dir, class_id, err);
      out << "wrote " << path.string() << "\n";
    } else if (*eval) {
      std::optional<fs::path> dest;
      if (!out_dir.empty()) dest = out_dir;
      auto rep = cmd_eval(gen_dir, ref_dir, cfg.eval.runs, run_seed, cfg.eval.emd && !no_emd, dest);
      out << rep.table();
      out << "best run " << rep.best_run + 1 << " of " << rep.runs.size() << "\n";
      if (!rep.emd_note.empty()) out << "EMD: " << rep.emd_note << "\n";
    } else if (*synth) {
      const auto path = cmd_synth(cfg, out_dir);
      out << "wrote " << path.string() << "\n";
    } else if (*inspect) {
      std::optional<fs::path> ck;
      if (!checkpoint.empty()) ck = checkpoint;
      out << cmd_inspect(cfg, ck).dump(2) << "\n";
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace spvd::cli

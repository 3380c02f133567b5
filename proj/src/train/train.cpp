#include "spvd/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <unordered_map>

#include "spvd/common/error.hpp"

namespace spvd::train {

template <typename T>
Adam<T>::Adam(model::NamedParams<T>& params) : params_(params) {
  for (const auto& [_, p] : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const double c1 = 1 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : static_cast<double>(g[k]);
      m[k] = static_cast<T>(kBeta1 * m[k] + (1 - kBeta1) * gk);
      v[k] = static_cast<T>(kBeta2 * v[k] + (1 - kBeta2) * gk * gk);
      const double mh = m[k] / c1, vh = v[k] / c2;
      w[k] = static_cast<T>(w[k] - lr * mh / (std::sqrt(vh) + kEps));
    }
    p.zero_grad();
  }
}

double one_cycle_lr(std::int64_t step, std::int64_t total, double peak, bool one_cycle) {
  if (!one_cycle || total <= 1) return peak;
  const std::int64_t warm = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(0.1 * total)));
  if (step < warm) return peak * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double floor = peak / 100;
  const std::int64_t span = std::max<std::int64_t>(1, total - 1 - warm);
  const double p = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
  return floor + (peak - floor) * 0.5 * (1 + std::cos(std::numbers::pi * p));
}

std::vector<data::Blob> adam_blobs(Adam<float>& adam, const model::NamedParams<float>& params) {
  std::vector<data::Blob> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({"adam.m/" + params[i].first, params[i].second.shape(), adam.first_moments()[i]});
    out.push_back({"adam.v/" + params[i].first, params[i].second.shape(), adam.second_moments()[i]});
  }
  return out;
}

void load_adam(Adam<float>& adam, const model::NamedParams<float>& params, const std::vector<data::Blob>& blobs,
               std::int64_t steps) {
  std::unordered_map<std::string, const data::Blob*> by_name;
  for (const auto& b : blobs) by_name[b.name] = &b;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = by_name.find("adam.m/" + params[i].first);
    auto v = by_name.find("adam.v/" + params[i].first);
    if (m == by_name.end() || v == by_name.end()) continue;
    if (m->second->values.size() != params[i].second.numel() || v->second->values.size() != params[i].second.numel())
      throw CheckpointError("optimizer state for '" + params[i].first + "' has the wrong size");
    adam.first_moments()[i] = m->second->values;
    adam.second_moments()[i] = v->second->values;
  }
  adam.set_steps(steps);
}

diffusion::SampleMask task_mask(const TaskSpec& task, const data::Dataset& data, std::span<const std::size_t> picks,
                                std::size_t points, Rng& rng) {
  diffusion::SampleMask mask{picks.size(), points, std::vector<std::uint8_t>(picks.size() * points, 0)};
  for (std::size_t b = 0; b < picks.size(); ++b) {
    const auto& shape = data.shapes[picks[b]];
    auto out = mask.known.begin() + static_cast<std::ptrdiff_t>(b * points);
    if (task.kind == TaskSpec::Kind::kCompletion) {
      if (!shape.has_parts()) throw ContractError("completion training needs part labels on '" + shape.name + "'");
      auto m = data::sample_part_mask(shape.parts, task.m, rng);
      std::copy(m.known.begin(), m.known.end(), out);
    } else if (task.kind == TaskSpec::Kind::kSuperres) {
      if (task.k_in >= points) throw ContractError("superres training: k_in must be below the point count");
      std::vector<std::size_t> idx(points);
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t i = 0; i < task.k_in; ++i) out[static_cast<std::ptrdiff_t>(idx[i])] = 1;
    }
  }
  return mask;
}

std::vector<LossRecord> train(model::Network<float>& net, const data::Dataset& data,
                              const diffusion::NoiseSchedule& sched, const TrainOptions& opts, Adam<float>& adam,
                              std::int64_t start_step, const TrainHooks& hooks) {
  if (data.size() == 0) throw ContractError("training needs a non-empty dataset");
  if (opts.batch == 0) throw ConfigError("train.batch must be positive");
  const std::size_t n = data.shapes[0].size();
  for (const auto& s : data.shapes)
    if (s.size() != n) throw ContractError("training shapes must share one point count");
  const bool conditional = net.config().num_classes > 0;
  for (const auto& s : data.shapes)
    if (conditional && (s.class_id < 0 || s.class_id >= net.config().num_classes))
      throw ContractError("class id of '" + s.name + "' is outside the network's class range");

  diffusion::EpsModel<float> model = [&](const ad::Tensor<float>& x, std::span<const int> t,
                                         std::span<const int> c, std::size_t b) { return net.forward(x, t, c, b); };
  std::vector<LossRecord> log;
  for (std::int64_t s = start_step; s < opts.steps; ++s) {
    Rng shuffle = make_stream(opts.seed, "shuffle", static_cast<std::uint64_t>(s));
    std::vector<std::size_t> picks;
    if (opts.batch <= data.size()) {
      std::vector<std::size_t> all(data.size());
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), shuffle);
      picks.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(opts.batch));
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
      for (std::size_t b = 0; b < opts.batch; ++b) picks.push_back(pick(shuffle));
    }
    PointBatch<float> x0(opts.batch, n);
    std::vector<int> classes;
    for (std::size_t b = 0; b < opts.batch; ++b) {
      const auto& shape = data.shapes[picks[b]];
      std::copy(shape.xyz.begin(), shape.xyz.end(), x0.cloud(b).begin());
      if (conditional) classes.push_back(shape.class_id);
    }
    std::optional<diffusion::SampleMask> mask;
    if (opts.task.kind != TaskSpec::Kind::kNone) {
      Rng mrng = make_stream(opts.seed, "mask", static_cast<std::uint64_t>(s));
      mask = task_mask(opts.task, data, picks, n, mrng);
    }
    Rng noise = make_stream(opts.seed, "noise", static_cast<std::uint64_t>(s));
    auto loss = diffusion::training_loss<float>(model, x0, classes, mask ? &*mask : nullptr, sched, noise);
    ad::backward(loss);
    const double lr = one_cycle_lr(s, opts.steps, opts.lr, opts.one_cycle);
    adam.step(lr);
    LossRecord rec{s, static_cast<double>(loss.item()), lr};
    log.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (hooks.on_save && hooks.save_every > 0 && (s + 1) % hooks.save_every == 0 && s + 1 < opts.steps)
      hooks.on_save(s + 1);
  }
  return log;
}

template class Adam<float>;
template class Adam<double>;

}  // namespace spvd::train

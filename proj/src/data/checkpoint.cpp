#include "spvd/data/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <unordered_map>

#include "spvd/common/error.hpp"
#include "spvd/data/io.hpp"

namespace spvd::data {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'V', 'D'};

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw CheckpointError("checkpoint: truncated at byte " + std::to_string(pos));
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

std::size_t count_of(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

diffusion::NoiseSchedule Checkpoint::schedule() const {
  return diffusion::make_linear_schedule(schedule_steps, beta_start, beta_end, sigma);
}

Checkpoint make_checkpoint(const model::Network<float>& net, const diffusion::NoiseSchedule& sched,
                           std::int64_t step, std::uint64_t seed) {
  Checkpoint ck;
  ck.network = net.config();
  ck.schedule_steps = sched.T();
  ck.beta_start = sched.beta_start;
  ck.beta_end = sched.beta_end;
  ck.sigma = sched.variant;
  ck.step = step;
  ck.seed = seed;
  for (const auto& [name, p] : net.params()) {
    auto d = p.data();
    ck.blobs.push_back({name, p.shape(), std::vector<float>(d.begin(), d.end())});
  }
  return ck;
}

std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json h;
  h["network"] = model::to_json(ck.network);
  h["schedule"] = {{"T", ck.schedule_steps},
                   {"beta_start", ck.beta_start},
                   {"beta_end", ck.beta_end},
                   {"sigma_variant", diffusion::to_string(ck.sigma)}};
  h["step"] = ck.step;
  h["seed"] = ck.seed;
  h["extra"] = ck.extra;
  h["blobs"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& b : ck.blobs) {
    if (count_of(b.shape) != b.values.size()) throw ContractError("checkpoint: blob '" + b.name + "' shape mismatch");
    h["blobs"].push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset}, {"count", b.values.size()}});
    offset += b.values.size() * sizeof(float);
  }
  h["payload_bytes"] = offset;
  const std::string header = h.dump();

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header.size());
  out += header;
  out.reserve(out.size() + offset);
  for (const auto& b : ck.blobs)
    out.append(reinterpret_cast<const char*>(b.values.data()), b.values.size() * sizeof(float));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic");
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(bytes, pos);
  if (header_len > bytes.size() - pos) throw CheckpointError("checkpoint: truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  pos += header_len;
  const std::size_t payload = bytes.size() - pos;

  Checkpoint ck;
  try {
    ck.network = model::network_config_from_json(h.at("network"));
    const auto& s = h.at("schedule");
    ck.schedule_steps = s.at("T").get<int>();
    ck.beta_start = s.at("beta_start").get<double>();
    ck.beta_end = s.at("beta_end").get<double>();
    ck.sigma = diffusion::parse_sigma_variant(s.at("sigma_variant").get<std::string>());
    ck.step = h.at("step").get<std::int64_t>();
    ck.seed = h.at("seed").get<std::uint64_t>();
    ck.extra = h.value("extra", nlohmann::json::object());
    const auto declared = h.at("payload_bytes").get<std::size_t>();
    if (declared > payload) throw CheckpointError("checkpoint: truncated payload");
    if (declared < payload) throw CheckpointError("checkpoint: trailing bytes after payload");
    std::size_t expect = 0;
    for (const auto& e : h.at("blobs")) {
      Blob b;
      b.name = e.at("name").get<std::string>();
      b.shape = e.at("shape").get<std::vector<std::size_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (offset != expect) throw CheckpointError("checkpoint: blob '" + b.name + "' offset does not match layout");
      if (count != count_of(b.shape)) throw CheckpointError("checkpoint: blob '" + b.name + "' count mismatch");
      if (offset + count * sizeof(float) > payload) throw CheckpointError("checkpoint: blob '" + b.name + "' truncated");
      b.values.resize(count);
      std::memcpy(b.values.data(), bytes.data() + pos + offset, count * sizeof(float));
      expect = offset + count * sizeof(float);
      ck.blobs.push_back(std::move(b));
    }
    if (expect != declared) throw CheckpointError("checkpoint: blob layout does not cover the payload");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: invalid config: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(ck));
}

void save_checkpoint(const model::Network<float>& net, const diffusion::NoiseSchedule& sched, std::int64_t step,
                     const std::filesystem::path& path, std::uint64_t seed) {
  save_checkpoint(make_checkpoint(net, sched, step, seed), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const Error& e) {
    throw CheckpointError(e.what());
  }
  return decode_checkpoint(bytes);
}

std::unique_ptr<model::Network<float>> restore_network(const Checkpoint& ck) {
  Rng rng(0);
  auto net = std::make_unique<model::Network<float>>(ck.network, rng);
  load_params(*net, ck.blobs);
  return net;
}

void load_params(model::Network<float>& net, const std::vector<Blob>& blobs) {
  std::unordered_map<std::string, const Blob*> by_name;
  for (const auto& b : blobs) by_name[b.name] = &b;
  for (auto& [name, p] : net.params()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint: missing parameter '" + name + "'");
    if (it->second->shape != p.shape()) throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
    auto dst = p.mutable_data();
    std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
  }
}

}  // namespace spvd::data

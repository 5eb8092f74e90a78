#include "tsdpo/snapshot.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>

namespace tsdpo {

static_assert(std::endian::native == std::endian::little,
              "snapshot payloads are written in host order, which must be little-endian");

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size},
           {"dim", c.dim},
           {"n_layers", c.n_layers},
           {"n_heads", c.n_heads},
           {"max_seq_len", c.max_seq_len},
           {"trainable_last_layers", c.trainable_last_layers},
           {"train_head", c.train_head},
           {"hidden_tap_layer", c.hidden_tap_layer}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.dim = j.value("dim", d.dim);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.trainable_last_layers = j.value("trainable_last_layers", d.trainable_last_layers);
  c.train_head = j.value("train_head", d.train_head);
  c.hidden_tap_layer = j.value("hidden_tap_layer", d.hidden_tap_layer);
}

void to_json(json& j, const Provenance& p) {
  j = json{{"objective", p.objective}, {"method", p.method}, {"run_id", p.run_id}};
}

void from_json(const json& j, Provenance& p) {
  p.objective = j.value("objective", "");
  p.method = j.value("method", "");
  p.run_id = j.value("run_id", "");
}

namespace {

constexpr char kMagic[8] = {'T', 'S', 'D', 'S', 'N', 'A', 'P', '1'};

template <typename Scalar>
const char* dtype_name() {
  return sizeof(Scalar) == 8 ? "f64" : "f32";
}

template <typename Scalar>
void write_container(const std::string& path, json header, const NamedTensors<Scalar>& tensors,
                     const std::function<ParamTags(const std::string&)>& tags) {
  json list = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const ParamTags tg = tags(name);
    list.push_back({{"name", name},
                    {"shape", t.shape()},
                    {"layer", tg.layer ? json(*tg.layer) : json(nullptr)},
                    {"block", block_name(tg.block)},
                    {"trainable", tg.trainable},
                    {"offset", offset},
                    {"count", t.size()}});
    offset += static_cast<std::uint64_t>(t.size());
  }
  header["dtype"] = dtype_name<Scalar>();
  header["tensors"] = std::move(list);
  header["buffers"] = json::array();
  const std::string text = header.dump();

  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, t] : tensors)
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  if (!out) throw Error("write failed for '" + path + "'");
}

struct Container {
  json header;
  std::vector<char> payload;
};

Container read_container(const std::string& path, bool with_payload) {
  if (!std::filesystem::exists(path)) throw MissingDependency(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingDependency(path);
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw DataError(0, "'" + path + "' is not a snapshot container");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(0, "'" + path + "': truncated header");
  Container c;
  try {
    c.header = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(0, "'" + path + "': bad header: " + e.what());
  }
  if (with_payload)
    c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return c;
}

template <typename Scalar>
NamedTensors<Scalar> decode_tensors(const std::string& path, const Container& c,
                                    std::map<std::string, ParamTags>* tags) {
  if (c.header.value("dtype", "") != dtype_name<Scalar>())
    throw DataError(0, "'" + path + "' holds dtype " + c.header.value("dtype", "?") +
                           ", requested " + dtype_name<Scalar>());
  NamedTensors<Scalar> out;
  const std::size_t available = c.payload.size() / sizeof(Scalar);
  for (const json& e : c.header.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (offset + count > available || static_cast<Index>(count) != shape_size(shape))
      throw DataError(0, "'" + path + "': payload range of '" + name + "' is invalid");
    Tensor<Scalar> t(shape);
    std::memcpy(t.data().data(), c.payload.data() + offset * sizeof(Scalar), count * sizeof(Scalar));
    out.emplace(name, std::move(t));
    if (tags) {
      ParamTags tg;
      if (!e.at("layer").is_null()) tg.layer = e.at("layer").get<int>();
      tg.block = parse_block(e.at("block").get<std::string>());
      tg.trainable = e.at("trainable").get<bool>();
      (*tags)[name] = tg;
    }
  }
  return out;
}

}  // namespace

json read_snapshot_header(const std::string& path) { return read_container(path, false).header; }

template <std::floating_point Scalar>
void save_params(const std::string& path, const ParamStore<Scalar>& params) {
  json header{{"kind", "params"}, {"config", params.config()}};
  write_container<Scalar>(path, header, params.tensors(),
                          [&](const std::string& n) { return params.tags(n); });
}

template <std::floating_point Scalar>
ParamStore<Scalar> load_params(const std::string& path) {
  const Container c = read_container(path, true);
  if (c.header.value("kind", "") != "params")
    throw DataError(0, "'" + path + "' is not a parameter snapshot");
  std::map<std::string, ParamTags> tags;
  auto tensors = decode_tensors<Scalar>(path, c, &tags);
  ParamStore<Scalar> store(c.header.at("config").get<ModelConfig>());
  for (auto& [name, t] : tensors) store.add(name, std::move(t), tags.at(name));
  return store;
}

template <std::floating_point Scalar>
void save_task_vector(const std::string& path, const TaskVector<Scalar>& tv,
                      const ModelConfig& config) {
  std::map<std::string, ParamTags> tags;
  for (const ParamSpec& s : parameter_layout(config)) tags[s.name] = s.tags;
  for (const auto& [name, t] : tv.tensors) {
    auto it = tags.find(name);
    if (it == tags.end() || !it->second.trainable)
      throw NameError("task vector entry '" + name + "' is not trainable under the given config");
  }
  json header{{"kind", "task_vector"}, {"config", config}, {"provenance", tv.provenance}};
  write_container<Scalar>(path, header, tv.tensors,
                          [&](const std::string& n) { return tags.at(n); });
}

template <std::floating_point Scalar>
TaskVector<Scalar> load_task_vector(const std::string& path, ModelConfig* config) {
  const Container c = read_container(path, true);
  if (c.header.value("kind", "") != "task_vector")
    throw DataError(0, "'" + path + "' is not a task vector snapshot");
  TaskVector<Scalar> tv;
  tv.tensors = decode_tensors<Scalar>(path, c, nullptr);
  tv.provenance = c.header.at("provenance").get<Provenance>();
  if (config) *config = c.header.at("config").get<ModelConfig>();
  return tv;
}

#define TSDPO_INSTANTIATE(S)                                                              \
  template void save_params<S>(const std::string&, const ParamStore<S>&);                \
  template ParamStore<S> load_params<S>(const std::string&);                             \
  template void save_task_vector<S>(const std::string&, const TaskVector<S>&,            \
                                    const ModelConfig&);                                 \
  template TaskVector<S> load_task_vector<S>(const std::string&, ModelConfig*);

TSDPO_INSTANTIATE(double)
TSDPO_INSTANTIATE(float)

}  // namespace tsdpo

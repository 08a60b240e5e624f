#include <cstring>
#include <fstream>
#include <set>

#include "vitpose/train.hpp"

namespace vitpose {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'V', 'P', 'C', 'K'};
constexpr std::size_t kHeader = 4 + 4 + 8;

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}


struct Framed {
  json doc;
  std::size_t start = 0;  // first payload byte
};

void frame(std::vector<std::uint8_t>& out, const std::string& text) {
  out.assign(kMagic, kMagic + 4);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
}

void put_f32(std::vector<std::uint8_t>& out, const Tensor& t) {
  for (double x : t.values()) {
    const float f = static_cast<float>(x);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_le(out, bits, 4);
  }
}

void get_f32(const std::uint8_t* src, Tensor& t) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const auto bits = static_cast<std::uint32_t>(get_le(src + 4 * i, 4));
    float f;
    std::memcpy(&f, &bits, 4);
    t.data()[i] = f;
  }
}

Framed unframe(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("bad magic: not a VPCK checkpoint");
  }
  if (bytes.size() < kHeader) throw CheckpointError("truncated checkpoint: header is incomplete");
  const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t meta_len = get_le(bytes.data() + 8, 8);
  if (meta_len > bytes.size() - kHeader) {
    throw CheckpointError("truncated checkpoint: metadata needs " + std::to_string(meta_len) + " bytes, " +
                          std::to_string(bytes.size() - kHeader) + " present");
  }
  Framed f;
  try {
    f.doc = json::parse(bytes.begin() + kHeader, bytes.begin() + static_cast<std::ptrdiff_t>(kHeader + meta_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  f.start = kHeader + meta_len;
  return f;
}

void check_payload(const std::vector<std::uint8_t>& bytes, std::size_t start, std::uint64_t payload_bytes) {
  if (bytes.size() - start < payload_bytes) {
    throw CheckpointError("truncated checkpoint: payload needs " + std::to_string(payload_bytes) + " bytes, " +
                          std::to_string(bytes.size() - start) + " present");
  }
  if (bytes.size() - start > payload_bytes) throw CheckpointError("corrupt checkpoint: trailing bytes after payload");
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return {(std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()};
}

void write_file(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const PoseModel& model, const CheckpointMeta& meta) {
  json dir = json::array(), frozen = json::array(), tasks = json::array();
  std::size_t offset = 0;
  auto list = [&](const std::vector<NamedTensor>& v, const char* kind) {
    for (const auto& t : v) {
      dir.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}, {"kind", kind}});
      offset += t.tensor.numel() * 4;
    }
  };
  list(model.parameters(), "param");
  list(model.buffers(), "buffer");
  for (const auto& p : model.parameters()) {
    if (!model.trainable(p.name)) frozen.push_back(p.name);
  }
  const auto& cfg = model.config();
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    tasks.push_back({{"id", i}, {"name", cfg.tasks[i].name}, {"num_keypoints", cfg.tasks[i].num_keypoints}});
  }
  const json doc = {{"model", cfg},
                    {"tasks", tasks},
                    {"step", meta.step},
                    {"rng", {{"seed", meta.rng_seed}, {"counter", meta.rng_counter}}},
                    {"tensors", dir},
                    {"frozen", frozen},
                    {"payload_bytes", offset},
                    {"extra", meta.extra}};
  std::vector<std::uint8_t> out;
  frame(out, doc.dump());
  out.reserve(out.size() + offset);
  for (const auto& t : model.parameters()) put_f32(out, t.tensor);
  for (const auto& t : model.buffers()) put_f32(out, t.tensor);
  return out;
}

void save_checkpoint(const PoseModel& model, const std::string& path, const CheckpointMeta& meta) {
  write_file(serialize_checkpoint(model, meta), path);
}

LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Framed framed = unframe(bytes);
  const json& doc = framed.doc;
  ModelConfig cfg;
  std::vector<json> entries;
  std::uint64_t payload_bytes = 0;
  CheckpointMeta meta;
  if (doc.contains("model") && doc["model"].is_null()) {
    throw CheckpointError("file holds plain tensors, not a model checkpoint");
  }
  try {
    cfg = doc.at("model").get<ModelConfig>();
    entries = doc.at("tensors").get<std::vector<json>>();
    payload_bytes = doc.at("payload_bytes").get<std::uint64_t>();
    meta.step = doc.at("step").get<std::size_t>();
    meta.rng_seed = doc.at("rng").at("seed").get<std::uint64_t>();
    meta.rng_counter = doc.at("rng").at("counter").get<std::uint64_t>();
    meta.extra = doc.value("extra", json::object());
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  const std::size_t start = framed.start;
  check_payload(bytes, start, payload_bytes);
  try {
    validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint holds an invalid model config: ") + e.what());
  }
  LoadedCheckpoint out{PoseModel(cfg, 0), meta};
  std::vector<NamedTensor> params, buffers;
  std::set<std::string> expected;
  for (const auto& p : out.model.parameters()) expected.insert(p.name);
  for (const auto& b : out.model.buffers()) expected.insert(b.name);
  std::uint64_t running = 0;
  for (const auto& e : entries) {
    const std::string name = e.at("name").get<std::string>();
    const Shape shape = e.at("shape").get<Shape>();
    const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    if (offset != running) throw CheckpointError("corrupt checkpoint: tensor " + name + " is not contiguous");
    running += shape_numel(shape) * 4;
    if (running > payload_bytes) throw CheckpointError("corrupt checkpoint: tensor " + name + " exceeds the payload");
    if (!expected.erase(name)) throw CheckpointError("checkpoint tensor " + name + " does not belong to the model");
    Tensor t(shape);
    get_f32(bytes.data() + start + offset, t);
    (e.value("kind", "param") == "buffer" ? buffers : params).push_back({name, t});
  }
  if (running != payload_bytes) throw CheckpointError("corrupt checkpoint: directory does not cover the payload");
  if (!expected.empty()) throw CheckpointError("checkpoint is missing tensor " + *expected.begin());
  try {
    for (const auto& p : params) {
      if (out.model.param(p.name).shape() != p.tensor.shape()) {
        throw CheckpointError("checkpoint tensor " + p.name + " has shape " + shape_str(p.tensor.shape()));
      }
    }
    out.model.load_state(params, buffers);
  } catch (const std::out_of_range& e) {
    throw CheckpointError(std::string("checkpoint does not match its model config: ") + e.what());
  }
  for (const auto& name : doc.value("frozen", json::array())) out.model.set_trainable(name.get<std::string>(), false);
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path));
}

std::vector<std::uint8_t> serialize_tensors(const std::vector<NamedTensor>& tensors, const json& extra) {
  json dir = json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    dir.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}, {"kind", "tensor"}});
    offset += t.tensor.numel() * 4;
  }
  const json doc = {{"model", nullptr}, {"tensors", dir}, {"payload_bytes", offset}, {"extra", extra}};
  std::vector<std::uint8_t> out;
  frame(out, doc.dump());
  for (const auto& t : tensors) put_f32(out, t.tensor);
  return out;
}

TensorContainer deserialize_tensors(const std::vector<std::uint8_t>& bytes) {
  const Framed framed = unframe(bytes);
  TensorContainer out;
  try {
    const std::uint64_t payload_bytes = framed.doc.at("payload_bytes").get<std::uint64_t>();
    check_payload(bytes, framed.start, payload_bytes);
    std::uint64_t running = 0;
    for (const auto& e : framed.doc.at("tensors")) {
      const std::string name = e.at("name").get<std::string>();
      Tensor t(e.at("shape").get<Shape>());
      if (e.at("offset").get<std::uint64_t>() != running) {
        throw CheckpointError("corrupt checkpoint: tensor " + name + " is not contiguous");
      }
      running += t.numel() * 4;
      if (running > payload_bytes) throw CheckpointError("corrupt checkpoint: tensor " + name + " exceeds the payload");
      get_f32(bytes.data() + framed.start + (running - t.numel() * 4), t);
      out.tensors.push_back({name, t});
    }
    if (running != payload_bytes) throw CheckpointError("corrupt checkpoint: directory does not cover the payload");
    out.extra = framed.doc.value("extra", json::object());
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  return out;
}

void save_tensors(const std::vector<NamedTensor>& tensors, const std::string& path, const json& extra) {
  write_file(serialize_tensors(tensors, extra), path);
}

TensorContainer load_tensors(const std::string& path) { return deserialize_tensors(read_file(path)); }

}  // namespace vitpose

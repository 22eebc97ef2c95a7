#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "alignvlm/config.hpp"
#include "alignvlm/image.hpp"
#include "alignvlm/train.hpp"

namespace alignvlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host order, which must be little-endian");

inline constexpr char kCheckpointMagic[8] = {'A', 'L', 'V', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StageHistoryEntry {
  int stage = 0;
  std::size_t steps = 0;
  double final_loss = 0;
  bool complete = true;
  std::uint64_t seed = 0;
  friend bool operator==(const StageHistoryEntry&, const StageHistoryEntry&) = default;
};

/// Model weights plus what is needed to continue training: the optimizer
/// state and position of the stage that ran last, and the stage history.
template <class T>
struct Checkpoint {
  VlmModel<T> model;
  std::vector<StageHistoryEntry> history;
  int last_stage = 0;
  std::optional<StageResult<T>> training;  // log is not stored
  Json extra = Json::object();
};

namespace detail {

template <class T>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>) {
    return 1;
  } else {
    static_assert(std::is_same_v<T, double>);
    return 2;
  }
}

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  template <class U>
  U get() {
    U v;
    get_bytes(&v, sizeof(U));
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    if (n > b_.size() - pos_) throw InputError("checkpoint is truncated");
    std::memcpy(out, b_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

struct EntryHeader {
  std::string name;
  std::uint8_t dtype = 0;
  Shape shape;
};

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& ck) {
  std::vector<std::pair<std::string, const std::vector<T>*>> payloads;
  std::vector<Shape> shapes;
  ck.model.for_each_param([&](const std::string& name, const Tensor<T>& t, ParamGroup) {
    payloads.emplace_back(name, &t.storage());
    shapes.push_back(t.shape());
  });
  if (ck.training) {
    for (const auto& [name, mom] : ck.training->optimizer.moments()) {
      payloads.emplace_back("adam.m/" + name, &mom.m);
      shapes.push_back({mom.m.size()});
      payloads.emplace_back("adam.v/" + name, &mom.v);
      shapes.push_back({mom.v.size()});
    }
  }

  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(payloads.size()));
  for (std::size_t i = 0; i < payloads.size(); ++i) {
    const auto& name = payloads[i].first;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(detail::dtype_tag<T>());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(shapes[i].size()));
    for (auto d : shapes[i]) w.put<std::uint64_t>(d);
  }
  for (const auto& [name, data] : payloads) w.put_bytes(data->data(), data->size() * sizeof(T));

  Json trailer{{"model", dims_to_json(ck.model.dims)},
               {"connector", std::string(connector_name(ck.model.kind()))},
               {"last_stage", ck.last_stage},
               {"history", Json::array()},
               {"extra", ck.extra}};
  for (const auto& h : ck.history) {
    trailer["history"].push_back({{"stage", h.stage},
                                  {"steps", h.steps},
                                  {"final_loss", h.final_loss},
                                  {"complete", h.complete},
                                  {"seed", h.seed}});
  }
  if (ck.training) {
    const auto& tr = *ck.training;
    trailer["training"] = {{"next_step", tr.next_step},
                           {"epoch_rng", tr.epoch_rng},
                           {"initial_loss", tr.initial_loss},
                           {"steps_above", tr.steps_above},
                           {"complete", tr.complete},
                           {"adam_steps", tr.optimizer.steps()},
                           {"adam_lr", tr.optimizer.lr()}};
  }
  const std::string text = trailer.dump();
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text.data(), text.size());
  return std::move(w.bytes);
}

template <class T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw InputError("not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<detail::EntryHeader> headers(count);
  for (auto& h : headers) {
    const auto len = r.get<std::uint32_t>();
    if (len > r.remaining()) throw InputError("checkpoint is truncated");
    h.name.resize(len);
    r.get_bytes(h.name.data(), len);
    h.dtype = r.get<std::uint8_t>();
    if (h.dtype != detail::dtype_tag<T>()) {
      throw InputError("checkpoint entry '" + h.name + "' has dtype tag " +
                       std::to_string(h.dtype) + ", expected " +
                       std::to_string(detail::dtype_tag<T>()));
    }
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw InputError("checkpoint entry '" + h.name + "' has implausible rank");
    for (std::uint32_t k = 0; k < rank; ++k) h.shape.push_back(r.get<std::uint64_t>());
  }
  std::map<std::string, std::vector<T>> data;
  for (const auto& h : headers) {
    const std::size_t n = shape_numel(h.shape);
    if (n > r.remaining() / sizeof(T)) throw InputError("checkpoint is truncated");
    std::vector<T> v(n);
    r.get_bytes(v.data(), n * sizeof(T));
    data.emplace(h.name, std::move(v));
  }
  const auto tlen = r.get<std::uint64_t>();
  if (tlen != r.remaining()) throw InputError("checkpoint trailer length does not match file size");
  std::string text(tlen, '\0');
  r.get_bytes(text.data(), tlen);
  Json trailer;
  try {
    trailer = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint trailer is not valid JSON: ") + e.what());
  }

  Checkpoint<T> ck;
  const ModelDims dims = dims_from_json(trailer.at("model"));
  const auto kind = parse_connector(trailer.at("connector").get<std::string>());
  ck.model = VlmModel<T>::create(dims, kind, 0);
  std::map<std::string, Shape> shapes;
  for (const auto& h : headers) shapes[h.name] = h.shape;
  ck.model.for_each_param([&](const std::string& name, Tensor<T>& t, ParamGroup) {
    auto it = data.find(name);
    if (it == data.end()) throw InputError("checkpoint lacks parameter '" + name + "'");
    if (shapes[name] != t.shape()) {
      throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                       shape_str(shapes[name]) + ", model expects " + shape_str(t.shape()));
    }
    t = Tensor<T>(shapes[name], std::move(it->second));
  });
  ck.model.decoder.embed.refresh_bounds();
  ck.last_stage = trailer.at("last_stage").get<int>();
  for (const auto& h : trailer.at("history")) {
    ck.history.push_back({h.at("stage").get<int>(), h.at("steps").get<std::size_t>(),
                          h.at("final_loss").get<double>(), h.at("complete").get<bool>(),
                          h.at("seed").get<std::uint64_t>()});
  }
  ck.extra = trailer.value("extra", Json::object());
  if (trailer.contains("training")) {
    const auto& tj = trailer["training"];
    StageResult<T> tr;
    tr.optimizer = Adam<T>(tj.at("adam_lr").get<double>());
    tr.optimizer.set_steps(tj.at("adam_steps").get<std::uint64_t>());
    for (auto& [name, v] : data) {
      if (name.rfind("adam.m/", 0) == 0) {
        const std::string pname = name.substr(7);
        auto vit = data.find("adam.v/" + pname);
        if (vit == data.end()) throw InputError("checkpoint lacks adam.v for '" + pname + "'");
        tr.optimizer.moments()[pname] = {v, vit->second};
      }
    }
    tr.next_step = tj.at("next_step").get<std::size_t>();
    tr.epoch_rng = tj.at("epoch_rng").get<std::string>();
    tr.initial_loss = tj.at("initial_loss").get<double>();
    tr.steps_above = tj.at("steps_above").get<std::size_t>();
    tr.complete = tj.at("complete").get<bool>();
    ck.training = std::move(tr);
  }
  return ck;
}

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  write_bytes(path, encode_checkpoint(ck));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint<T>(read_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint '" + path + "' has a malformed trailer: " + e.what());
  }
}

}  // namespace alignvlm

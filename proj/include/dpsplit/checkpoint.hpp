#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpsplit/common.hpp"
#include "dpsplit/nn/network.hpp"
#include "dpsplit/splitnet.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit {

// Container layout: 8-byte magic, u32 format version, u64 header length,
// UTF-8 JSON header, then raw little-endian tensor payloads at the offsets
// the header lists. Round-trips are bit-exact because payloads are the
// in-memory bytes.
namespace ckpt {

inline constexpr char kMagic[8] = {'D', 'P', 'S', 'P', 'L', 'I', 'T', '1'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else return "unknown";
}

template <typename T>
void write_tensor_file(const std::string& path, const nlohmann::json& meta,
                       const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(t->numel()) * sizeof(T);
    dir.push_back({{"name", name},
                   {"dtype", dtype_name<T>()},
                   {"shape", t->shape()},
                   {"offset", offset},
                   {"bytes", bytes}});
    offset += bytes;
  }
  nlohmann::json header = {{"format_version", kVersion}, {"meta", meta}, {"tensors", dir}};
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t ver = kVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : tensors) {
    (void)name;
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(static_cast<std::uint64_t>(t->numel()) * sizeof(T)));
  }
  if (!out) throw IoError("write failed: " + path);
}

template <typename T>
struct TensorFile {
  nlohmann::json meta;
  std::vector<std::string> order;
  std::map<std::string, Tensor<T>> tensors;
};

template <typename T>
TensorFile<T> read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  std::uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (!in || ver != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(ver) + ": " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1ull << 30)) throw IoError("corrupt checkpoint header: " + path);
  std::string hs(static_cast<std::size_t>(hlen), '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated checkpoint header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header json: ") + e.what());
  }

  TensorFile<T> tf;
  const std::streampos payload = in.tellg();
  try {
    tf.meta = header.at("meta");
    for (const auto& ent : header.at("tensors")) {
      const std::string name = ent.at("name").get<std::string>();
      const std::string dtype = ent.at("dtype").get<std::string>();
      if (dtype != dtype_name<T>())
        throw IoError("tensor '" + name + "' has dtype " + dtype + ", expected " + dtype_name<T>());
      const std::vector<int> shape = ent.at("shape").get<std::vector<int>>();
      const std::uint64_t offset = ent.at("offset").get<std::uint64_t>();
      const std::uint64_t bytes = ent.at("bytes").get<std::uint64_t>();
      Tensor<T> t(shape);
      if (static_cast<std::uint64_t>(t.numel()) * sizeof(T) != bytes)
        throw IoError("tensor '" + name + "' byte count disagrees with shape");
      in.seekg(payload + static_cast<std::streamoff>(offset));
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(bytes));
      if (!in) throw IoError("truncated tensor payload: " + name);
      tf.order.push_back(name);
      tf.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint directory: ") + e.what());
  }
  return tf;
}

// Deterministic naming for every persistent tensor of a network.
template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> named_tensors(const nn::Network<T>& net,
                                                                    const std::string& prefix) {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (std::size_t i = 0; i < net.size(); ++i) {
    const auto& layer = net.layer(i);
    const auto ps = layer.params();
    for (std::size_t j = 0; j < ps.size(); ++j)
      out.emplace_back(prefix + std::to_string(i) + "." + layer.kind() + ".p" + std::to_string(j), ps[j]);
    const auto ss = layer.state();
    for (std::size_t j = 0; j < ss.size(); ++j)
      out.emplace_back(prefix + std::to_string(i) + "." + layer.kind() + ".s" + std::to_string(j), ss[j]);
  }
  return out;
}

template <typename T>
void fill_from_file(nn::Network<T>& net, const std::string& prefix, const TensorFile<T>& tf) {
  for (std::size_t i = 0; i < net.size(); ++i) {
    auto& layer = net.layer(i);
    auto write_group = [&](const std::vector<Tensor<T>*>& dst, const char* tag) {
      for (std::size_t j = 0; j < dst.size(); ++j) {
        const std::string name =
            prefix + std::to_string(i) + "." + layer.kind() + "." + tag + std::to_string(j);
        auto it = tf.tensors.find(name);
        if (it == tf.tensors.end()) throw IoError("checkpoint missing tensor: " + name);
        if (it->second.shape() != dst[j]->shape())
          throw IoError("checkpoint tensor shape mismatch: " + name);
        *dst[j] = it->second;
      }
    };
    write_group(layer.params(), "p");
    write_group(layer.state(), "s");
  }
}

}  // namespace ckpt

// Saves a full (unsplit) classifier together with the architecture it was
// built from, so loading needs no out-of-band information.
template <typename T>
void save_backbone(const std::string& path, const ArchitectureSpec& spec, int classes,
                   const nn::Network<T>& net, const nlohmann::json& provenance = {}) {
  nlohmann::json meta = {{"kind", "backbone"},
                         {"architecture", spec.to_json()},
                         {"classes", classes},
                         {"provenance", provenance}};
  ckpt::write_tensor_file<T>(path, meta, ckpt::named_tensors<T>(net, "net."));
}

template <typename T>
struct LoadedBackbone {
  ArchitectureSpec spec;
  int classes = 0;
  nn::Network<T> net;
  nlohmann::json provenance;
};

template <typename T>
LoadedBackbone<T> load_backbone(const std::string& path) {
  const auto tf = ckpt::read_tensor_file<T>(path);
  const nlohmann::json& meta = tf.meta;
  LoadedBackbone<T> out;
  try {
    if (meta.at("kind").get<std::string>() != "backbone")
      throw IoError("checkpoint is not a backbone: " + path);
    out.spec = ArchitectureSpec::from_json(meta.at("architecture"));
    out.classes = meta.at("classes").get<int>();
    out.provenance = meta.value("provenance", nlohmann::json{});
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("backbone checkpoint metadata: ") + e.what());
  }
  out.net = build_network<T>(out.spec, out.classes, /*seed=*/0);
  ckpt::fill_from_file(out.net, "net.", tf);
  return out;
}

template <typename T>
void save_split_model(const std::string& path, const SplitModel<T>& m,
                      const nlohmann::json& provenance = {}) {
  nlohmann::json meta = {{"kind", "split_model"},
                         {"architecture", m.spec.to_json()},
                         {"split_case", m.split_case},
                         {"provenance", provenance}};
  auto tensors = ckpt::named_tensors<T>(m.local, "local.");
  const auto rt = ckpt::named_tensors<T>(m.remote, "remote.");
  tensors.insert(tensors.end(), rt.begin(), rt.end());
  ckpt::write_tensor_file<T>(path, meta, tensors);
}

template <typename T>
SplitModel<T> load_split_model(const std::string& path, nlohmann::json* provenance = nullptr) {
  const auto tf = ckpt::read_tensor_file<T>(path);
  const nlohmann::json& meta = tf.meta;
  ArchitectureSpec spec;
  int split_case = 0;
  try {
    if (meta.at("kind").get<std::string>() != "split_model")
      throw IoError("checkpoint is not a split model: " + path);
    spec = ArchitectureSpec::from_json(meta.at("architecture"));
    split_case = meta.at("split_case").get<int>();
    if (provenance) *provenance = meta.value("provenance", nlohmann::json{});
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("split-model checkpoint metadata: ") + e.what());
  }
  nn::Network<T> scaffold = build_network<T>(spec, spec.num_classes, /*seed=*/0);
  SplitModel<T> m = make_split_model<T>(scaffold, spec, split_case, /*seed=*/0);
  ckpt::fill_from_file(m.local, "local.", tf);
  ckpt::fill_from_file(m.remote, "remote.", tf);
  return m;
}

}  // namespace dpsplit

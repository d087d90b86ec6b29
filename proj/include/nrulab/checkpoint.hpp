#pragma once

// Checkpoint container:
//
//   NRULAB-CHECKPOINT 1\n
//   <header: one line of JSON>\n
//   <blob: raw little-endian float64 values>
//
// The header lists every tensor as {name, shape, offset}, with offset in bytes
// from the start of the blob, followed by the config snapshot, rng state,
// step counter and task cursor.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nrulab/config.hpp"
#include "nrulab/error.hpp"
#include "nrulab/optim.hpp"

namespace nrulab {

struct Checkpoint {
  TrainConfig config;  // resolved: input_size set, budget applied
  std::size_t num_classes = 0;
  ParamMap params;
  AdamState adam;
  std::int64_t step = 0;
  std::string data_rng;  // engine state as written by operator<<
  ParamMap carried;      // recurrent state carried across updates ("h", "m", "c")
  json task_cursor = json::object();
};

inline constexpr const char* kCheckpointMagic = "NRULAB-CHECKPOINT 1";

namespace detail {

inline void append_le(std::string& blob, const Tensor& t) {
  const std::size_t start = blob.size();
  blob.resize(start + t.size() * sizeof(double));
  char* out = blob.data() + start;
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &t.values()[i], sizeof bits);
    for (int b = 0; b < 8; ++b) out[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
}

inline Tensor read_le(const std::string& blob, std::size_t offset, const Shape& shape) {
  Tensor t(shape);
  if (offset + t.size() * 8 > blob.size()) {
    throw FormatError("checkpoint: tensor data at offset " + std::to_string(offset) + " runs past the end of the file");
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= std::uint64_t{static_cast<unsigned char>(blob[offset + i * 8 + b])} << (8 * b);
    }
    std::memcpy(&t.values()[i], &bits, sizeof bits);
  }
  return t;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json tensors = json::array();
  std::string blob;
  auto add = [&](const std::string& name, const Tensor& t) {
    tensors.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}});
    detail::append_le(blob, t);
  };
  for (const auto& [name, t] : ckpt.params) add("param/" + name, t);
  for (const auto& [name, t] : ckpt.adam.m) add("adam_m/" + name, t);
  for (const auto& [name, t] : ckpt.adam.v) add("adam_v/" + name, t);
  for (const auto& [name, t] : ckpt.carried) add("state/" + name, t);
  json header{{"tensors", tensors},
              {"config", to_json(ckpt.config)},
              {"num_classes", ckpt.num_classes},
              {"step", ckpt.step},
              {"adam_t", ckpt.adam.t},
              {"rng", ckpt.data_rng},
              {"task_cursor", ckpt.task_cursor}};
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint '" + path.string() + "'");
  out << kCheckpointMagic << '\n' << header.dump() << '\n';
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw FormatError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw FormatError(path.string() + ": not a checkpoint (bad magic at offset 0)");
  std::getline(in, header_line);
  json header = json::parse(header_line, nullptr, false);
  if (header.is_discarded()) {
    throw FormatError(path.string() + ": malformed header at offset " + std::to_string(magic.size() + 1));
  }
  const std::string blob(std::istreambuf_iterator<char>(in), {});
  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(header.at("config"));
    ckpt.num_classes = header.at("num_classes").get<std::size_t>();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.adam.t = header.at("adam_t").get<std::int64_t>();
    ckpt.data_rng = header.at("rng").get<std::string>();
    ckpt.task_cursor = header.at("task_cursor");
    for (const auto& entry : header.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      Tensor t = detail::read_le(blob, entry.at("offset").get<std::size_t>(), entry.at("shape").get<Shape>());
      const auto slash = name.find('/');
      const std::string group = name.substr(0, slash), key = name.substr(slash + 1);
      if (group == "param") ckpt.params.emplace(key, std::move(t));
      else if (group == "adam_m") ckpt.adam.m.emplace(key, std::move(t));
      else if (group == "adam_v") ckpt.adam.v.emplace(key, std::move(t));
      else if (group == "state") ckpt.carried.emplace(key, std::move(t));
      else throw FormatError(path.string() + ": unknown tensor group '" + group + "'");
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  return ckpt;
}

}  // namespace nrulab

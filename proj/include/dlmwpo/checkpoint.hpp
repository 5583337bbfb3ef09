#pragma once

// Checkpoint container: the magic string "DLMWPO1", a little-endian u64 byte
// length, a JSON header (parameter names and shapes in storage order, dtype,
// step counter, config hash, optional extras like rng stream states), then the
// raw little-endian f32 payload in exactly the header's order. Round-trips are
// bit-exact.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <string>

#include "model.hpp"

namespace dlmwpo {

inline constexpr char kCheckpointMagic[] = "DLMWPO1";

struct CheckpointMeta {
  long step = 0;
  std::string config_hash;
  nlohmann::json extra;  // rng streams, run counters; absent entries tolerated
};

inline void save_checkpoint(const std::string& path, const ParamStore<float>& ps,
                            const CheckpointMeta& meta) {
  nlohmann::json header;
  header["dtype"] = "f32";
  header["step"] = meta.step;
  header["config_hash"] = meta.config_hash;
  header["model"] = {{"vocab", ps.cfg.vocab},         {"d_model", ps.cfg.d_model},
                     {"n_layers", ps.cfg.n_layers},   {"n_heads", ps.cfg.n_heads},
                     {"max_seq_len", ps.cfg.max_seq_len}, {"init_std", ps.cfg.init_std}};
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < ps.names.size(); ++i)
    params.push_back({{"name", ps.names[i]}, {"shape", ps.tensors[i].shape}});
  header["params"] = params;
  if (!meta.extra.is_null()) header["extra"] = meta.extra;

  std::string hs = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::invalid_argument("checkpoint: cannot open for write: " + path);
  f.write(kCheckpointMagic, 7);
  std::uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : ps.tensors)
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!f) throw std::invalid_argument("checkpoint: write failed: " + path);
}

inline ParamStore<float> load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("checkpoint: cannot open: " + path);
  char magic[7];
  f.read(magic, 7);
  if (!f || std::memcmp(magic, kCheckpointMagic, 7) != 0)
    throw std::invalid_argument("checkpoint: bad magic in " + path);
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen > (1ull << 24)) throw std::invalid_argument("checkpoint: corrupt header length");
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw std::invalid_argument("checkpoint: malformed header JSON");
  if (header.value("dtype", "") != "f32")
    throw std::invalid_argument("checkpoint: unsupported dtype " + header.value("dtype", "?"));

  ParamStore<float> ps;
  const auto& m = header.at("model");
  ps.cfg.vocab = m.at("vocab").get<int>();
  ps.cfg.d_model = m.at("d_model").get<int>();
  ps.cfg.n_layers = m.at("n_layers").get<int>();
  ps.cfg.n_heads = m.at("n_heads").get<int>();
  ps.cfg.max_seq_len = m.at("max_seq_len").get<int>();
  ps.cfg.init_std = m.at("init_std").get<double>();
  for (const auto& pj : header.at("params")) {
    ps.names.push_back(pj.at("name").get<std::string>());
    ps.tensors.emplace_back(pj.at("shape").get<std::vector<int>>());
  }
  for (auto& t : ps.tensors) {
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!f) throw std::invalid_argument("checkpoint: truncated payload in " + path);
  }
  if (meta_out) {
    meta_out->step = header.value("step", 0L);
    meta_out->config_hash = header.value("config_hash", "");
    meta_out->extra = header.contains("extra") ? header["extra"] : nlohmann::json();
  }
  return ps;
}

}  // namespace dlmwpo

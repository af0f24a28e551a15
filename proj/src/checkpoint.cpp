#include "selfroll/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace selfroll {

namespace {

using nlohmann::json;

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t double_bits(double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  return u;
}

double bits_double(std::uint64_t u) {
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::vector<std::pair<std::string, Tensor>> Checkpoint::with_prefix(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [n, t] : tensors) {
    if (n.rfind(prefix, 0) == 0) out.emplace_back(n.substr(prefix.size()), t);
  }
  return out;
}

void atomic_write_file(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json header;
  header["version"] = ckpt.version;
  header["config"] = ckpt.config_text;
  header["iteration"] = ckpt.iteration;
  header["rng_key"] = std::to_string(ckpt.rng_key);
  header["rng_counter"] = std::to_string(ckpt.rng_counter);
  header["opt_g_steps"] = ckpt.opt_g_steps;
  header["opt_c_steps"] = ckpt.opt_c_steps;
  json tensors = json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    tensors.push_back(entry);
  }
  header["tensors"] = tensors;

  std::string blob;
  const std::string head = header.dump();
  put_u64_le(blob, head.size());
  blob += head;
  for (const auto& [name, t] : ckpt.tensors) {
    for (double v : t.value()) put_u64_le(blob, double_bits(v));
  }
  atomic_write_file(path, blob);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 8) throw std::runtime_error("checkpoint: truncated file " + path);
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint64_t head_len = get_u64_le(bytes);
  if (blob.size() < 8 + head_len) throw std::runtime_error("checkpoint: truncated header");
  json header = json::parse(blob.substr(8, head_len));

  Checkpoint ckpt;
  ckpt.version = header.at("version").get<int>();
  if (ckpt.version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ckpt.version));
  }
  ckpt.config_text = header.at("config").get<std::string>();
  ckpt.iteration = header.at("iteration").get<std::uint64_t>();
  ckpt.rng_key = std::stoull(header.at("rng_key").get<std::string>());
  ckpt.rng_counter = std::stoull(header.at("rng_counter").get<std::string>());
  ckpt.opt_g_steps = header.at("opt_g_steps").get<std::uint64_t>();
  ckpt.opt_c_steps = header.at("opt_c_steps").get<std::uint64_t>();

  std::size_t offset = 8 + head_len;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (blob.size() < offset + 8 * n) throw std::runtime_error("checkpoint: truncated payload");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      data[i] = bits_double(get_u64_le(bytes + offset + 8 * i));
    }
    offset += 8 * n;
    ckpt.tensors.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data)));
  }
  if (offset != blob.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

}  // namespace selfroll

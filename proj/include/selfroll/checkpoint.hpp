#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "selfroll/tensor.hpp"

namespace selfroll {

// Single-file container: a JSON header (version, config text, tensor names and
// shapes, iteration, rng state) followed by a contiguous little-endian 64-bit
// float payload. Round trips are bit-exact; writes go through a temp file and
// rename.
struct Checkpoint {
  int version = 1;
  std::string config_text;
  std::uint64_t iteration = 0;
  std::uint64_t rng_key = 0;
  std::uint64_t rng_counter = 0;
  std::uint64_t opt_g_steps = 0;
  std::uint64_t opt_c_steps = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t.detached_copy()); }
  const Tensor* find(const std::string& name) const;
  // All tensors whose name starts with prefix, with the prefix stripped.
  std::vector<std::pair<std::string, Tensor>> with_prefix(const std::string& prefix) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// write-temp-then-rename
void atomic_write_file(const std::string& path, const std::string& contents);

}  // namespace selfroll

#pragma once

#include <string>

#include "selfroll/dm.hpp"
#include "selfroll/inference.hpp"
#include "selfroll/optim.hpp"
#include "selfroll/world.hpp"

namespace selfroll {

// Everything a run needs, parsed from flat `section.key = value` text.
// Unknown keys are rejected so typos cannot silently revert to defaults.
struct RunConfig {
  ModelConfig model;
  NoiseSchedule schedule;
  WorldConfig world;

  std::string paradigm = "sf";    // tf | df | sf
  std::string objective = "dmd";  // denoise | dmd | sid | gan

  OptimizerConfig opt_generator{1e-3, 0.0, 0.999, 1e-8, 0.0};
  OptimizerConfig opt_critic{1e-3, 0.0, 0.999, 1e-8, 0.0};

  DMDConfig dm;
  SiDConfig sid;
  GANConfig gan;
  double ema_decay = 0.99;

  std::uint64_t seed = 1;
  std::size_t iterations = 100;
  std::size_t batch_size = 1;
  bool local_window = false;
  std::size_t pretrain_iters = 400;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  bool pos_offset_augment = true;
  double condition_dropout = 0.1;

  CacheStrategy cache;

  void validate() const;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string serialize() const;
};

std::string cache_kind_name(CacheKind k);
CacheKind cache_kind_from(const std::string& name);

// Shortest round-trip decimal representation.
std::string format_double(double v);

}  // namespace selfroll

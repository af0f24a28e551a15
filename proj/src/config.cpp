#include "selfroll/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace selfroll {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: bad bool for " + key + ": '" + v + "'");
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_double(key, item));
  }
  if (out.empty()) throw std::invalid_argument("config: empty list for " + key);
  return out;
}

std::string format_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += format_double(v[i]);
  }
  return s;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<Field>& registry() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    auto u = [&](const char* key, std::size_t RunConfig::* member) {
      f.push_back({key,
                   [member](const RunConfig& c) { return std::to_string(c.*member); },
                   [member, key = std::string(key)](RunConfig& c, const std::string& v) {
                     c.*member = static_cast<std::size_t>(parse_uint(key, v));
                   }});
    };
    auto d = [&](const char* key, double RunConfig::* member) {
      f.push_back({key, [member](const RunConfig& c) { return format_double(c.*member); },
                   [member, key = std::string(key)](RunConfig& c, const std::string& v) {
                     c.*member = parse_double(key, v);
                   }});
    };
    auto b = [&](const char* key, bool RunConfig::* member) {
      f.push_back({key,
                   [member](const RunConfig& c) { return c.*member ? "true" : "false"; },
                   [member, key = std::string(key)](RunConfig& c, const std::string& v) {
                     c.*member = parse_bool(key, v);
                   }});
    };
    auto custom = [&](const char* key, auto get, auto set) { f.push_back({key, get, set}); };

    auto mu = [&](const char* key, std::size_t ModelConfig::* member) {
      f.push_back({key,
                   [member](const RunConfig& c) { return std::to_string(c.model.*member); },
                   [member, key = std::string(key)](RunConfig& c, const std::string& v) {
                     c.model.*member = static_cast<std::size_t>(parse_uint(key, v));
                   }});
    };
    mu("model.frame_dim", &ModelConfig::frame_dim);
    mu("model.tokens_per_frame", &ModelConfig::tokens_per_frame);
    mu("model.model_dim", &ModelConfig::model_dim);
    mu("model.layers", &ModelConfig::layers);
    mu("model.heads", &ModelConfig::heads);
    mu("model.chunk_size", &ModelConfig::chunk_size);
    mu("model.max_frames", &ModelConfig::max_frames);
    mu("model.condition_vocab", &ModelConfig::condition_vocab);
    mu("model.mlp_mult", &ModelConfig::mlp_mult);
    mu("model.position_table", &ModelConfig::position_table);

    custom(
        "schedule.steps",
        [](const RunConfig& c) { return format_list(c.schedule.raw_steps); },
        [](RunConfig& c, const std::string& v) {
          c.schedule.raw_steps = parse_list("schedule.steps", v);
        });
    custom(
        "schedule.shift_factor",
        [](const RunConfig& c) { return format_double(c.schedule.shift_factor); },
        [](RunConfig& c, const std::string& v) {
          c.schedule.shift_factor = parse_double("schedule.shift_factor", v);
        });

    custom(
        "world.rho", [](const RunConfig& c) { return format_double(c.world.rho); },
        [](RunConfig& c, const std::string& v) { c.world.rho = parse_double("world.rho", v); });
    custom(
        "world.sigma_w", [](const RunConfig& c) { return format_double(c.world.sigma_w); },
        [](RunConfig& c, const std::string& v) {
          c.world.sigma_w = parse_double("world.sigma_w", v);
        });
    custom(
        "world.anchor_gain",
        [](const RunConfig& c) { return format_double(c.world.anchor_gain); },
        [](RunConfig& c, const std::string& v) {
          c.world.anchor_gain = parse_double("world.anchor_gain", v);
        });
    custom(
        "world.angles_deg", [](const RunConfig& c) { return format_list(c.world.angles_deg); },
        [](RunConfig& c, const std::string& v) {
          c.world.angles_deg = parse_list("world.angles_deg", v);
        });

    custom(
        "run.paradigm", [](const RunConfig& c) { return c.paradigm; },
        [](RunConfig& c, const std::string& v) { c.paradigm = v; });
    custom(
        "run.objective", [](const RunConfig& c) { return c.objective; },
        [](RunConfig& c, const std::string& v) { c.objective = v; });
    custom(
        "run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
        [](RunConfig& c, const std::string& v) { c.seed = parse_uint("run.seed", v); });
    u("run.iterations", &RunConfig::iterations);
    u("run.batch_size", &RunConfig::batch_size);
    b("run.local_window", &RunConfig::local_window);
    u("run.pretrain_iters", &RunConfig::pretrain_iters);
    u("run.checkpoint_every", &RunConfig::checkpoint_every);
    b("run.pos_offset_augment", &RunConfig::pos_offset_augment);
    d("run.condition_dropout", &RunConfig::condition_dropout);

    auto opt_fields = [&](const char* prefix, OptimizerConfig RunConfig::* member) {
      auto od = [&, prefix, member](const char* suffix, double OptimizerConfig::* field) {
        std::string key = std::string(prefix) + "." + suffix;
        f.push_back({key,
                     [member, field](const RunConfig& c) {
                       return format_double(c.*member.*field);
                     },
                     [member, field, key](RunConfig& c, const std::string& v) {
                       c.*member.*field = parse_double(key, v);
                     }});
      };
      od("learning_rate", &OptimizerConfig::learning_rate);
      od("beta1", &OptimizerConfig::beta1);
      od("beta2", &OptimizerConfig::beta2);
      od("epsilon", &OptimizerConfig::epsilon);
      od("weight_decay", &OptimizerConfig::weight_decay);
    };
    opt_fields("opt_g", &RunConfig::opt_generator);
    opt_fields("opt_c", &RunConfig::opt_critic);

    custom(
        "dm.cfg_weight", [](const RunConfig& c) { return format_double(c.dm.cfg_weight); },
        [](RunConfig& c, const std::string& v) {
          c.dm.cfg_weight = parse_double("dm.cfg_weight", v);
        });
    custom(
        "dm.update_ratio", [](const RunConfig& c) { return std::to_string(c.dm.update_ratio); },
        [](RunConfig& c, const std::string& v) {
          c.dm.update_ratio = static_cast<std::size_t>(parse_uint("dm.update_ratio", v));
        });
    custom(
        "dm.t_grid_step", [](const RunConfig& c) { return format_double(c.dm.t_grid_step); },
        [](RunConfig& c, const std::string& v) {
          c.dm.t_grid_step = parse_double("dm.t_grid_step", v);
        });
    custom(
        "dm.restrict_t_to_truncation",
        [](const RunConfig& c) { return c.dm.restrict_t_to_truncation ? "true" : "false"; },
        [](RunConfig& c, const std::string& v) {
          c.dm.restrict_t_to_truncation = parse_bool("dm.restrict_t_to_truncation", v);
        });
    custom(
        "dm.per_frame_t",
        [](const RunConfig& c) { return c.dm.per_frame_t ? "true" : "false"; },
        [](RunConfig& c, const std::string& v) {
          c.dm.per_frame_t = parse_bool("dm.per_frame_t", v);
        });
    custom(
        "sid.alpha", [](const RunConfig& c) { return format_double(c.sid.alpha); },
        [](RunConfig& c, const std::string& v) { c.sid.alpha = parse_double("sid.alpha", v); });
    custom(
        "gan.lambda_reg", [](const RunConfig& c) { return format_double(c.gan.lambda_reg); },
        [](RunConfig& c, const std::string& v) {
          c.gan.lambda_reg = parse_double("gan.lambda_reg", v);
        });
    custom(
        "gan.sigma_perturb",
        [](const RunConfig& c) { return format_double(c.gan.sigma_perturb); },
        [](RunConfig& c, const std::string& v) {
          c.gan.sigma_perturb = parse_double("gan.sigma_perturb", v);
        });
    d("ema.decay", &RunConfig::ema_decay);

    custom(
        "cache.kind", [](const RunConfig& c) { return cache_kind_name(c.cache.kind); },
        [](RunConfig& c, const std::string& v) { c.cache.kind = cache_kind_from(v); });
    custom(
        "cache.window", [](const RunConfig& c) { return std::to_string(c.cache.window); },
        [](RunConfig& c, const std::string& v) {
          c.cache.window = static_cast<std::size_t>(parse_uint("cache.window", v));
        });
    custom(
        "cache.stride", [](const RunConfig& c) { return std::to_string(c.cache.stride); },
        [](RunConfig& c, const std::string& v) {
          c.cache.stride = static_cast<std::size_t>(parse_uint("cache.stride", v));
        });
    return f;
  }();
  return fields;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf, p);
}

std::string cache_kind_name(CacheKind k) {
  switch (k) {
    case CacheKind::rolling:
      return "rolling";
    case CacheKind::recompute_window:
      return "recompute";
    case CacheKind::no_cache:
      return "nocache";
  }
  throw std::logic_error("cache_kind_name");
}

CacheKind cache_kind_from(const std::string& name) {
  if (name == "rolling") return CacheKind::rolling;
  if (name == "recompute") return CacheKind::recompute_window;
  if (name == "nocache") return CacheKind::no_cache;
  throw std::invalid_argument("config: unknown cache kind '" + name + "'");
}

void RunConfig::validate() const {
  model.validate();
  schedule.validate();
  WorldConfig w = world;
  w.frame_dim = model.frame_dim;
  w.validate();
  if (paradigm != "tf" && paradigm != "df" && paradigm != "sf") {
    throw std::invalid_argument("config: paradigm must be tf, df or sf");
  }
  if (objective != "denoise" && objective != "dmd" && objective != "sid" && objective != "gan") {
    throw std::invalid_argument("config: objective must be denoise, dmd, sid or gan");
  }
  const bool denoise = objective == "denoise";
  if (paradigm == "sf" && denoise) {
    throw std::invalid_argument(
        "config: sf + denoise is invalid: self-forcing has no ground-truth context to "
        "denoise against; use dmd, sid or gan");
  }
  if (paradigm != "sf" && !denoise) {
    throw std::invalid_argument("config: " + paradigm + " + " + objective +
                                " is invalid: distribution-matching objectives require "
                                "self-forcing rollouts");
  }
  if (world.angles_deg.size() != model.condition_vocab) {
    throw std::invalid_argument("config: world.angles_deg must list one angle per condition");
  }
  if (batch_size == 0) throw std::invalid_argument("config: batch_size must be >= 1");
  if (ema_decay < 0.0 || ema_decay > 1.0) {
    throw std::invalid_argument("config: ema.decay must lie in [0, 1]");
  }
  if (condition_dropout < 0.0 || condition_dropout >= 1.0) {
    throw std::invalid_argument("config: condition dropout must lie in [0, 1)");
  }
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& field : registry()) {
      if (field.key == key) {
        field.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" +
                                  key + "'");
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& field : registry()) {
    out += field.key;
    out += " = ";
    out += field.get(*this);
    out += "\n";
  }
  return out;
}

}  // namespace selfroll

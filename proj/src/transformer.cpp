#include "selfroll/transformer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace selfroll {

namespace {

std::string blk(std::size_t layer, const char* suffix) {
  return "blk" + std::to_string(layer) + "." + suffix;
}

}  // namespace

void ModelConfig::validate() const {
  if (frame_dim == 0 || model_dim == 0 || layers == 0 || heads == 0 || tokens_per_frame == 0) {
    throw std::invalid_argument("ModelConfig: zero-sized dimension");
  }
  if (model_dim % heads != 0) {
    throw std::invalid_argument("ModelConfig: model_dim must be divisible by heads");
  }
  if (chunk_size == 0 || max_frames % chunk_size != 0) {
    throw std::invalid_argument("ModelConfig: chunk_size must divide max_frames");
  }
}

// ---- masks --------------------------------------------------------------------

AttentionMaskSpec build_mask(Paradigm paradigm, std::size_t n_frames,
                             std::size_t tokens_per_frame, std::size_t chunk_size,
                             std::optional<std::size_t> local_window) {
  if (n_frames == 0 || tokens_per_frame == 0 || chunk_size == 0 || n_frames % chunk_size != 0) {
    throw std::invalid_argument("build_mask: invalid dimensions");
  }
  if (local_window) {
    if (paradigm != Paradigm::self_forcing_full) {
      throw std::invalid_argument("build_mask: local_window applies to self-forcing only");
    }
    if (*local_window > n_frames) {
      throw std::invalid_argument("build_mask: local_window larger than the frame count");
    }
  }
  const std::size_t p = tokens_per_frame;
  const std::size_t n_chunks = n_frames / chunk_size;

  AttentionMaskSpec spec;
  spec.paradigm = paradigm;
  spec.n_frames = n_frames;
  spec.tokens_per_frame = p;

  if (paradigm == Paradigm::teacher_forcing) {
    // Slot order: [clean chunk 0, noisy chunk 0, clean chunk 1, ...]. Clean
    // slots attend causally within the clean stream; noisy slots attend to
    // clean context from strictly earlier chunks plus their own noisy chunk.
    const std::size_t n_slots = 2 * n_frames;
    auto slot_chunk = [&](std::size_t s) { return s / (2 * chunk_size); };
    auto slot_is_noisy = [&](std::size_t s) { return (s / chunk_size) % 2 == 1; };
    BoolMatrix m;
    m.rows = m.cols = n_slots * p;
    m.allow.assign(m.rows * m.cols, 0);
    for (std::size_t r = 0; r < n_slots; ++r) {
      for (std::size_t c = 0; c < n_slots; ++c) {
        bool ok;
        if (!slot_is_noisy(r)) {
          ok = !slot_is_noisy(c) && slot_chunk(c) <= slot_chunk(r);
        } else if (slot_is_noisy(c)) {
          ok = slot_chunk(c) == slot_chunk(r);
        } else {
          ok = slot_chunk(c) < slot_chunk(r);
        }
        if (!ok) continue;
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t j = 0; j < p; ++j) m.set(r * p + i, c * p + j, true);
        }
      }
    }
    spec.tokens = std::move(m);
    return spec;
  }

  // DF and SF share the chunk-causal structure over a single stream.
  BoolMatrix m;
  m.rows = m.cols = n_frames * p;
  m.allow.assign(m.rows * m.cols, 0);
  for (std::size_t r = 0; r < n_frames; ++r) {
    for (std::size_t c = 0; c < n_frames; ++c) {
      bool ok = (c / chunk_size) <= (r / chunk_size);
      if (ok && local_window && r / chunk_size == n_chunks - 1) {
        ok = c + *local_window >= n_frames;
      }
      if (!ok) continue;
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < p; ++j) m.set(r * p + i, c * p + j, true);
      }
    }
  }
  spec.tokens = std::move(m);
  return spec;
}

// ---- KV cache -------------------------------------------------------------------

KVCache::KVCache(std::size_t layers, std::size_t capacity_frames, std::size_t tokens_per_frame)
    : capacity_(capacity_frames), tokens_per_frame_(tokens_per_frame), keys_(layers),
      values_(layers) {
  if (layers == 0 || capacity_frames == 0 || tokens_per_frame == 0) {
    throw std::invalid_argument("KVCache: zero-sized cache");
  }
}

void KVCache::append_chunk(std::span<const Tensor> layer_keys,
                           std::span<const Tensor> layer_values,
                           std::span<const std::size_t> chunk_abs_frames) {
  if (layer_keys.size() != keys_.size() || layer_values.size() != keys_.size()) {
    throw std::invalid_argument("KVCache::append_chunk: layer count mismatch");
  }
  const std::size_t p = tokens_per_frame_;
  const std::size_t frames = chunk_abs_frames.size();
  for (const auto& t : layer_keys) {
    if (t.rows() != frames * p) {
      throw std::invalid_argument("KVCache::append_chunk: chunk tokens do not match frames");
    }
  }
  for (std::size_t f = 0; f < frames; ++f) {
    if (!abs_frames_.empty() && chunk_abs_frames[f] <= abs_frames_.back()) {
      throw std::invalid_argument("KVCache::append_chunk: frame order must increase");
    }
    if (abs_frames_.size() == capacity_) {
      abs_frames_.pop_front();
      for (auto& q : keys_) q.pop_front();
      for (auto& q : values_) q.pop_front();
    }
    abs_frames_.push_back(chunk_abs_frames[f]);
    for (std::size_t l = 0; l < keys_.size(); ++l) {
      const std::size_t d = layer_keys[l].cols();
      auto take = [&](const Tensor& src) {
        std::vector<double> block(p * d);
        auto v = src.value();
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(f * p * d), p * d, block.begin());
        return Tensor::from_data({p, d}, std::move(block));
      };
      keys_[l].push_back(take(layer_keys[l]));
      values_[l].push_back(take(layer_values[l]));
    }
  }
}

namespace {

Tensor concat_frame_blocks(const std::deque<Tensor>& blocks) {
  if (blocks.empty()) throw std::runtime_error("KVCache: empty cache");
  const std::size_t d = blocks.front().cols();
  std::size_t rows = 0;
  for (const auto& b : blocks) rows += b.rows();
  std::vector<double> out(rows * d);
  std::size_t at = 0;
  for (const auto& b : blocks) {
    std::copy_n(b.value().begin(), b.size(), out.begin() + static_cast<std::ptrdiff_t>(at));
    at += b.size();
  }
  return Tensor::from_data({rows, d}, std::move(out));
}

}  // namespace

Tensor KVCache::keys(std::size_t layer) const { return concat_frame_blocks(keys_.at(layer)); }
Tensor KVCache::values(std::size_t layer) const { return concat_frame_blocks(values_.at(layer)); }

// ---- parameters ------------------------------------------------------------------

ParameterStore init_generator_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  const std::size_t p = cfg.tokens_per_frame;
  const std::size_t mlp = cfg.mlp_mult * d;
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));

  ParameterStore ps;
  auto w = [&](const std::string& name, std::size_t r, std::size_t c, double stddev) {
    ps.add(name, Tensor::randn(rng, {r, c}, stddev));
  };
  auto zeros = [&](const std::string& name, std::size_t r, std::size_t c, double fill = 0.0) {
    ps.add(name, Tensor::full({r, c}, fill));
  };

  w("embed.w", cfg.frame_dim, p * d, 1.0 / std::sqrt(static_cast<double>(cfg.frame_dim)));
  zeros("embed.b", 1, p * d);
  w("pos", cfg.pos_slots(), d, 0.1);
  w("cond", cfg.condition_vocab + 1, d, 0.1);
  w("marker", 1, d, 0.1);
  w("tmlp.w1", 1, d, 1.0);
  zeros("tmlp.b1", 1, d);
  w("tmlp.w2", d, d, 1.0 / std::sqrt(static_cast<double>(d)));
  zeros("tmlp.b2", 1, d);

  const double wd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    zeros(blk(l, "ln1.g"), 1, d, 1.0);
    zeros(blk(l, "ln1.b"), 1, d);
    w(blk(l, "attn.wq"), d, d, wd);
    // No key bias: softmax is invariant to the per-row constant it would add.
    w(blk(l, "attn.wk"), d, d, wd);
    w(blk(l, "attn.wv"), d, d, wd);
    w(blk(l, "attn.wo"), d, d, wd * resid);
    zeros(blk(l, "attn.bq"), 1, d);
    zeros(blk(l, "attn.bv"), 1, d);
    zeros(blk(l, "attn.bo"), 1, d);
    zeros(blk(l, "ln2.g"), 1, d, 1.0);
    zeros(blk(l, "ln2.b"), 1, d);
    w(blk(l, "mlp.w1"), d, mlp, wd);
    zeros(blk(l, "mlp.b1"), 1, mlp);
    w(blk(l, "mlp.w2"), mlp, d, resid / std::sqrt(static_cast<double>(mlp)));
    zeros(blk(l, "mlp.b2"), 1, d);
  }
  // The final norm carries no bias: a hidden-state shift is absorbable into
  // head.b and invisible to the relativistic discriminator readout.
  zeros("lnf.g", 1, d, 1.0);
  w("head.w", p * d, cfg.frame_dim, 0.2 / std::sqrt(static_cast<double>(p * d)));
  zeros("head.b", 1, cfg.frame_dim);
  return ps;
}

void add_discriminator_head(ParameterStore& params, const ModelConfig& cfg, Rng& rng) {
  // No output bias: the relativistic pairing is invariant to score shifts.
  params.add("dhead.w",
             Tensor::randn(rng, {cfg.model_dim, 1},
                           1.0 / std::sqrt(static_cast<double>(cfg.model_dim))));
}

Tensor discriminator_score(Tape& tape, const ParameterStore& params, const Tensor& hidden) {
  const std::size_t n = hidden.rows();
  Tensor pool = Tensor::full({1, n}, 1.0 / static_cast<double>(n));
  Tensor mean = matmul(tape, pool, hidden);  // [1 x d]
  return matmul(tape, mean, params.at("dhead.w"));
}

// ---- forward ---------------------------------------------------------------------

namespace {

// Embeds a slot layout into token space: projection of the frame data plus
// position, timestep, condition and the first-frame marker.
Tensor embed_tokens(Tape& tape, const ParameterStore& ps, const ModelConfig& cfg,
                    const NoiseSchedule& schedule, const Tensor& frames,
                    std::span<const Slot> slots, std::size_t condition, std::size_t pos_offset) {
  const std::size_t s = slots.size();
  const std::size_t p = cfg.tokens_per_frame;
  const std::size_t d = cfg.model_dim;
  if (frames.rows() != s || frames.cols() != cfg.frame_dim) {
    throw std::invalid_argument("forward: frames are " + shape_str(frames.shape()) + ", layout has " +
                                std::to_string(s) + " slots of dim " +
                                std::to_string(cfg.frame_dim));
  }
  if (condition > cfg.null_condition()) {
    throw std::invalid_argument("forward: condition label out of range");
  }

  Tensor base = row_bias_add(tape, matmul(tape, frames, ps.at("embed.w")), ps.at("embed.b"));
  base = reshape(tape, base, {s * p, d});

  std::vector<std::size_t> pos_idx(s);
  std::vector<double> t_feat(s), marker_ind(s);
  for (std::size_t i = 0; i < s; ++i) {
    pos_idx[i] = (pos_offset + slots[i].abs_frame) % cfg.pos_slots();
    t_feat[i] = timestep_shift(schedule.shift_factor, slots[i].t) / 1000.0;
    marker_ind[i] = slots[i].abs_frame == 0 ? 1.0 : 0.0;
  }

  Tensor pos = embedding_rows(tape, ps.at("pos"), pos_idx);

  Tensor tf = Tensor::from_data({s, 1}, std::move(t_feat));
  Tensor temb = row_bias_add(tape, matmul(tape, tf, ps.at("tmlp.w1")), ps.at("tmlp.b1"));
  temb = row_bias_add(tape, matmul(tape, gelu(tape, temb), ps.at("tmlp.w2")), ps.at("tmlp.b2"));

  Tensor marker =
      matmul(tape, Tensor::from_data({s, 1}, std::move(marker_ind)), ps.at("marker"));

  Tensor slot_add = add(tape, add(tape, pos, temb), marker);
  Tensor token_add = repeat_rows(tape, slot_add, p);

  std::vector<std::size_t> cond_idx(s * p, condition);
  Tensor cond = embedding_rows(tape, ps.at("cond"), cond_idx);

  return add(tape, add(tape, base, token_add), cond);
}

Tensor attention_layer(Tape& tape, const ParameterStore& ps, const ModelConfig& cfg,
                       std::size_t layer, const Tensor& q_tokens, const Tensor& k_full,
                       const Tensor& v_full, const BoolMatrix* mask) {
  const std::size_t d = cfg.model_dim;
  const std::size_t hd = d / cfg.heads;
  std::vector<Tensor> head_outs;
  head_outs.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Tensor qh = slice_cols(tape, q_tokens, h * hd, hd);
    Tensor kh = slice_cols(tape, k_full, h * hd, hd);
    Tensor vh = slice_cols(tape, v_full, h * hd, hd);
    head_outs.push_back(masked_attention(tape, qh, kh, vh, mask));
  }
  Tensor cat = concat_cols(tape, head_outs);
  return row_bias_add(tape, matmul(tape, cat, ps.at(blk(layer, "attn.wo"))),
                      ps.at(blk(layer, "attn.bo")));
}

struct ContextView {
  // Per-layer constants prepended to the current tokens' keys/values; empty
  // tensors when there is no cached context.
  std::vector<Tensor> keys, values;
  std::size_t context_tokens = 0;
};

ForwardResult run_stack(Tape& tape, const ParameterStore& ps, const ModelConfig& cfg,
                        const NoiseSchedule& schedule, const Tensor& frames,
                        std::span<const Slot> slots, std::size_t condition,
                        const BoolMatrix* mask, const ContextView* context,
                        std::size_t pos_offset) {
  const std::size_t d = cfg.model_dim;
  const std::size_t p = cfg.tokens_per_frame;
  Tensor x = embed_tokens(tape, ps, cfg, schedule, frames, slots, condition, pos_offset);

  ForwardResult result;
  result.chunk_keys.reserve(cfg.layers);
  result.chunk_values.reserve(cfg.layers);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Tensor xn = layer_norm(tape, x, ps.at(blk(l, "ln1.g")), ps.at(blk(l, "ln1.b")));
    Tensor q = row_bias_add(tape, matmul(tape, xn, ps.at(blk(l, "attn.wq"))),
                            ps.at(blk(l, "attn.bq")));
    Tensor k = matmul(tape, xn, ps.at(blk(l, "attn.wk")));
    Tensor v = row_bias_add(tape, matmul(tape, xn, ps.at(blk(l, "attn.wv"))),
                            ps.at(blk(l, "attn.bv")));
    result.chunk_keys.push_back(k);
    result.chunk_values.push_back(v);

    Tensor k_full = k, v_full = v;
    if (context != nullptr && context->context_tokens > 0) {
      const Tensor kparts[] = {context->keys[l], k};
      const Tensor vparts[] = {context->values[l], v};
      k_full = concat_rows(tape, kparts);
      v_full = concat_rows(tape, vparts);
    }
    Tensor attn = attention_layer(tape, ps, cfg, l, q, k_full, v_full, mask);
    x = add(tape, x, attn);

    Tensor xm = layer_norm(tape, x, ps.at(blk(l, "ln2.g")), ps.at(blk(l, "ln2.b")));
    Tensor h = row_bias_add(tape, matmul(tape, xm, ps.at(blk(l, "mlp.w1"))),
                            ps.at(blk(l, "mlp.b1")));
    h = row_bias_add(tape, matmul(tape, gelu(tape, h), ps.at(blk(l, "mlp.w2"))),
                     ps.at(blk(l, "mlp.b2")));
    x = add(tape, x, h);
  }

  x = layer_norm(tape, x, ps.at("lnf.g"), Tensor::zeros({1, d}));
  result.hidden = x;

  Tensor per_frame = reshape(tape, x, {slots.size(), p * d});
  result.v_hat = row_bias_add(tape, matmul(tape, per_frame, ps.at("head.w")), ps.at("head.b"));
  return result;
}

}  // namespace

ForwardResult forward_masked(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                             const NoiseSchedule& schedule, const Tensor& frames,
                             std::span<const Slot> slots, std::size_t condition,
                             const AttentionMaskSpec& mask, std::size_t pos_offset) {
  cfg.validate();
  const std::size_t n_tok = slots.size() * cfg.tokens_per_frame;
  if (mask.tokens.rows != n_tok || mask.tokens.cols != n_tok) {
    throw std::invalid_argument("forward_masked: mask is " + std::to_string(mask.tokens.rows) +
                                "x" + std::to_string(mask.tokens.cols) + ", layout has " +
                                std::to_string(n_tok) + " tokens");
  }
  return run_stack(tape, params, cfg, schedule, frames, slots, condition, &mask.tokens, nullptr,
                   pos_offset);
}

ForwardResult forward_cached(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                             const NoiseSchedule& schedule, const Tensor& chunk_frames,
                             std::span<const Slot> slots, std::size_t condition,
                             const KVCache& cache, std::size_t pos_offset,
                             std::optional<std::size_t> exclude_frames_below) {
  cfg.validate();
  if (cache.layer_count() != cfg.layers) {
    throw std::invalid_argument("forward_cached: cache has " +
                                std::to_string(cache.layer_count()) + " layers, model has " +
                                std::to_string(cfg.layers));
  }

  ContextView ctx;
  BoolMatrix mask;
  const BoolMatrix* mask_ptr = nullptr;
  const std::size_t p = cfg.tokens_per_frame;
  if (cache.size_frames() > 0) {
    ctx.context_tokens = cache.token_count();
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      ctx.keys.push_back(cache.keys(l));
      ctx.values.push_back(cache.values(l));
    }
    if (exclude_frames_below) {
      const std::size_t n_q = slots.size() * p;
      mask = BoolMatrix::all_true(n_q, ctx.context_tokens + n_q);
      std::size_t col = 0;
      for (std::size_t f : cache.abs_frames()) {
        if (f < *exclude_frames_below) {
          for (std::size_t r = 0; r < n_q; ++r) {
            for (std::size_t j = 0; j < p; ++j) mask.set(r, col + j, false);
          }
        }
        col += p;
      }
      mask_ptr = &mask;
    }
  }
  return run_stack(tape, params, cfg, schedule, chunk_frames, slots, condition, mask_ptr,
                   cache.size_frames() > 0 ? &ctx : nullptr, pos_offset);
}

void append_kv(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
               const NoiseSchedule& schedule, const Tensor& clean_chunk,
               std::span<const Slot> slots, std::size_t condition, KVCache& cache,
               std::size_t pos_offset) {
  for (const auto& s : slots) {
    if (s.t != 0.0) {
      throw std::invalid_argument("append_kv: cached chunks must carry timestep 0");
    }
  }
  std::vector<Tensor> ks(cfg.layers), vs(cfg.layers);
  if (!tape.replaying()) {
    auto ng = tape.no_grad();
    ForwardResult r = forward_cached(tape, params, cfg, schedule, clean_chunk, slots, condition,
                                     cache, pos_offset);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      ks[l] = r.chunk_keys[l];
      vs[l] = r.chunk_values[l];
    }
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    ks[l] = tape.stop_gradient(ks[l]);
    vs[l] = tape.stop_gradient(vs[l]);
  }
  std::vector<std::size_t> abs_frames;
  abs_frames.reserve(slots.size());
  for (const auto& s : slots) abs_frames.push_back(s.abs_frame);
  cache.append_chunk(ks, vs, abs_frames);
}

}  // namespace selfroll

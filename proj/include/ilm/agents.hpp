#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ilm/nn.hpp"

namespace ilm {

struct AgentConfig {
  int input_dim = 66;  // many-hot k*a, or the thought-vector width in image mode
  int embed = 50;      // embedding and GRU hidden width
  int utt_len = 6;     // L
  int vocab = 4;       // V
  int attributes = 2;  // a (symbolic receiver head)
  int values = 33;     // k
  bool image_mode = false;
  real dropout_rate = real(0);  // token-embedding dropout, image runs
  int image_hw = 32;
  int conv_layers = 8;
  int conv_channels = 32;
};

struct SenderParams {
  Linear in_proj;       // meaning -> initial hidden state
  EmbeddingTable sos;   // learned start-of-sequence input, table [1,E]
  EmbeddingTable tok;   // token embeddings fed back autoregressively
  GruParams gru;
  Linear out;           // hidden -> vocab logits, shared across steps
};

struct ReceiverParams {
  EmbeddingTable tok;
  GruParams gru;
  Linear head;  // hidden -> a*k logits (symbolic) or thought vector (image)
};

struct PerceptionParams {
  std::vector<Conv2dLayer> convs;
  Linear proj;  // flattened channels -> thought vector
};

/// One agent: sender + receiver, plus a perception network shared between
/// them in image mode. Sender and receiver share no other parameters.
struct Agent {
  AgentConfig cfg;
  SenderParams sender;
  ReceiverParams receiver;
  std::optional<PerceptionParams> perception;

  static Agent make(const AgentConfig& cfg, Rng& rng) {
    Agent a;
    a.cfg = cfg;
    a.sender.in_proj = Linear(cfg.input_dim, cfg.embed, rng);
    a.sender.sos = EmbeddingTable(1, cfg.embed, rng);
    a.sender.tok = EmbeddingTable(cfg.vocab, cfg.embed, rng);
    a.sender.gru = GruParams(cfg.embed, cfg.embed, rng);
    a.sender.out = Linear(cfg.embed, cfg.vocab, rng);
    a.receiver.tok = EmbeddingTable(cfg.vocab, cfg.embed, rng);
    a.receiver.gru = GruParams(cfg.embed, cfg.embed, rng);
    const int head_out = cfg.image_mode ? cfg.embed : cfg.attributes * cfg.values;
    a.receiver.head = Linear(cfg.embed, head_out, rng);
    if (cfg.image_mode) {
      PerceptionParams p;
      int ch = 3;
      for (int i = 0; i < cfg.conv_layers; ++i) {
        p.convs.emplace_back(ch, cfg.conv_channels, 3, /*pad=*/1, rng);
        ch = cfg.conv_channels;
      }
      p.proj = Linear(cfg.conv_channels, cfg.embed, rng);
      a.perception = std::move(p);
    }
    return a;
  }

  ParamMap sender_params() const {
    ParamMap m;
    sender.in_proj.collect(m, "sender.in");
    sender.sos.collect(m, "sender.sos");
    sender.tok.collect(m, "sender.tok");
    sender.gru.collect(m, "sender.gru");
    sender.out.collect(m, "sender.out");
    return m;
  }

  ParamMap receiver_params() const {
    ParamMap m;
    receiver.tok.collect(m, "receiver.tok");
    receiver.gru.collect(m, "receiver.gru");
    receiver.head.collect(m, "receiver.head");
    return m;
  }

  ParamMap perception_params() const {
    ParamMap m;
    if (perception) {
      for (size_t i = 0; i < perception->convs.size(); ++i)
        perception->convs[i].collect(m, "perception.conv" + std::to_string(i));
      perception->proj.collect(m, "perception.proj");
    }
    return m;
  }

  ParamMap params() const {
    ParamMap m = sender_params();
    for (auto& kv : receiver_params()) m.push_back(kv);
    for (auto& kv : perception_params()) m.push_back(kv);
    return m;
  }
};

namespace detail {
inline Tensor maybe_dropout(const Tensor& x, const Agent& agent, bool train, Rng& rng) {
  if (!train || agent.cfg.dropout_rate <= real(0)) return x;
  return dropout(x, real(1) - agent.cfg.dropout_rate, rng);
}
}  // namespace detail

/// Image batch [N,3,H,W] -> thought vectors [N,embed]. Conv stack with
/// stride-1 3x3 layers (zero padding 1), 2x2 max-pool after the early
/// layers while the map stays larger than 8px, then a final 8x8 pool.
inline Tensor perception_forward(const Agent& agent, const Tensor& images, bool train,
                                 Rng& rng) {
  (void)train;
  (void)rng;
  if (!agent.perception)
    throw ValueError("perception_forward: agent has no perception network");
  if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != agent.cfg.image_hw ||
      images.dim(3) != agent.cfg.image_hw)
    throw ShapeError("perception_forward: expected [N,3," +
                     std::to_string(agent.cfg.image_hw) + "," +
                     std::to_string(agent.cfg.image_hw) + "], got " +
                     shape_str(images.shape()));
  Tensor h = images;
  int spatial = agent.cfg.image_hw;
  for (const Conv2dLayer& conv : agent.perception->convs) {
    h = relu(conv(h));
    if (spatial / 2 >= 8) {
      h = max_pool2d(h, 2);
      spatial /= 2;
    }
  }
  h = max_pool2d(h, spatial);  // collapse the remaining map
  h = reshape(h, {h.dim(0), agent.cfg.conv_channels});
  return agent.perception->proj(h);
}

/// Temperature decode of [L,V] logits: argmax per step at temperature 0
/// (ties to the lowest token index), categorical sampling from
/// softmax(logits/t) otherwise.
inline Utterance decode(const Tensor& logits, real temperature, Rng& rng) {
  if (temperature < real(0))
    throw ValueError("decode: temperature must be >= 0, got " + fmt_real(temperature));
  if (logits.ndim() != 2)
    throw ShapeError("decode: expected [L,V] logits, got " + shape_str(logits.shape()));
  const int64_t l = logits.dim(0), v = logits.dim(1);
  Utterance u;
  u.tokens.reserve(l);
  for (int64_t step = 0; step < l; ++step) {
    const real* row = logits.value().data() + step * v;
    for (int64_t j = 0; j < v; ++j)
      if (!std::isfinite(row[j]))
        throw NumericError("decode: non-finite logit at step " + std::to_string(step));
    if (temperature == real(0)) {
      int best = 0;
      for (int64_t j = 1; j < v; ++j)
        if (row[j] > row[best]) best = static_cast<int>(j);
      u.tokens.push_back(best);
    } else {
      std::vector<real> probs(v);
      real mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      real sum = 0;
      for (int64_t j = 0; j < v; ++j) {
        probs[j] = std::exp((row[j] - mx) / temperature);
        sum += probs[j];
      }
      for (auto& p : probs) p /= sum;
      u.tokens.push_back(rng.categorical(probs.data(), static_cast<int>(v)));
    }
  }
  return u;
}

/// Autoregressive rollout: each step's decoded token feeds the next step.
/// The per-step draws match what decode() performs on the collected logits
/// with an identically seeded stream.
struct SenderRollout {
  std::vector<Utterance> utterances;  // one per batch row
  std::vector<Tensor> step_logits;    // L tensors of [N,V]
};

inline SenderRollout sender_rollout(const Agent& agent, const Tensor& meanings,
                                    real temperature, Rng& rng, bool train = false) {
  if (meanings.ndim() != 2 || meanings.dim(1) != agent.cfg.input_dim)
    throw ShapeError("sender_rollout: expected [N," + std::to_string(agent.cfg.input_dim) +
                     "] input, got " + shape_str(meanings.shape()));
  const auto n = meanings.dim(0);
  SenderRollout out;
  out.utterances.assign(static_cast<size_t>(n), Utterance{});
  Tensor h = agent.sender.in_proj(meanings);
  Tensor x = detail::maybe_dropout(agent.sender.sos(std::vector<int>(n, 0)), agent, train, rng);
  for (int step = 0; step < agent.cfg.utt_len; ++step) {
    h = gru_cell(x, h, agent.sender.gru);
    Tensor logits = agent.sender.out(h);
    out.step_logits.push_back(logits);
    std::vector<int> tokens(n);
    {
      Graph::NoGrad off;
      for (int64_t i = 0; i < n; ++i) {
        Tensor row = Tensor::from({1, agent.cfg.vocab},
                                  {logits.value().begin() + i * agent.cfg.vocab,
                                   logits.value().begin() + (i + 1) * agent.cfg.vocab});
        tokens[i] = decode(row, temperature, rng).tokens[0];
      }
    }
    for (int64_t i = 0; i < n; ++i) out.utterances[i].tokens.push_back(tokens[i]);
    if (step + 1 < agent.cfg.utt_len)
      x = detail::maybe_dropout(agent.sender.tok(tokens), agent, train, rng);
  }
  return out;
}

/// Teacher-forced pass for supervised training: ground-truth tokens feed
/// the next step. Returns per-step [N,V] logits.
inline std::vector<Tensor> sender_forward_forced(const Agent& agent, const Tensor& meanings,
                                                 const std::vector<Utterance>& targets,
                                                 bool train, Rng& rng) {
  const auto n = meanings.dim(0);
  if (static_cast<int64_t>(targets.size()) != n)
    throw ShapeError("sender_forward_forced: " + std::to_string(targets.size()) +
                     " target utterances for " + std::to_string(n) + " meanings");
  std::vector<Tensor> step_logits;
  Tensor h = agent.sender.in_proj(meanings);
  Tensor x = detail::maybe_dropout(agent.sender.sos(std::vector<int>(n, 0)), agent, train, rng);
  for (int step = 0; step < agent.cfg.utt_len; ++step) {
    h = gru_cell(x, h, agent.sender.gru);
    step_logits.push_back(agent.sender.out(h));
    if (step + 1 < agent.cfg.utt_len) {
      std::vector<int> tokens(n);
      for (int64_t i = 0; i < n; ++i) tokens[i] = targets[i].tokens[step];
      x = detail::maybe_dropout(agent.sender.tok(tokens), agent, train, rng);
    }
  }
  return step_logits;
}

/// Differentiable soft rollout for the SOFTMAX channel: per-step token
/// probability vectors feed both the sender's own next input and,
/// downstream, the receiver.
struct SoftRollout {
  std::vector<Tensor> step_probs;   // L tensors of [N,V]
  std::vector<Tensor> step_logits;  // L tensors of [N,V]
};

inline SoftRollout sender_soft_rollout(const Agent& agent, const Tensor& meanings,
                                       bool train, Rng& rng) {
  const auto n = meanings.dim(0);
  SoftRollout out;
  Tensor h = agent.sender.in_proj(meanings);
  Tensor x = detail::maybe_dropout(agent.sender.sos(std::vector<int>(n, 0)), agent, train, rng);
  for (int step = 0; step < agent.cfg.utt_len; ++step) {
    h = gru_cell(x, h, agent.sender.gru);
    Tensor logits = agent.sender.out(h);
    Tensor probs = softmax(logits);
    out.step_logits.push_back(logits);
    out.step_probs.push_back(probs);
    if (step + 1 < agent.cfg.utt_len)
      x = detail::maybe_dropout(agent.sender.tok.soft(probs), agent, train, rng);
  }
  return out;
}

/// Single-meaning sender forward at temperature 0: the [L,V] logits of the
/// agent's argmax rollout; decode(logits, 0) reproduces the rollout tokens.
inline Tensor sender_forward(const Agent& agent, const Tensor& meaning_row) {
  Tensor m = meaning_row.ndim() == 1
                 ? reshape(meaning_row, {1, meaning_row.dim(0)})
                 : meaning_row;
  Rng unused(0);
  SenderRollout roll = sender_rollout(agent, m, real(0), unused, false);
  std::vector<Tensor> rows;
  for (Tensor& t : roll.step_logits) rows.push_back(t);
  return concat_rows(rows);  // [L,V]
}

/// Utterances -> meaning logits [N, a*k] (symbolic) or thought vectors
/// [N, embed] (image mode).
inline Tensor receiver_forward(const Agent& agent, const std::vector<Utterance>& utts,
                               bool train, Rng& rng) {
  if (utts.empty()) throw ValueError("receiver_forward: empty batch");
  const auto n = static_cast<int64_t>(utts.size());
  for (const Utterance& u : utts)
    if (u.size() != agent.cfg.utt_len)
      throw ShapeError("receiver_forward: utterance length " + std::to_string(u.size()) +
                       " != " + std::to_string(agent.cfg.utt_len));
  Tensor h = Tensor::zeros({n, agent.cfg.embed});
  for (int step = 0; step < agent.cfg.utt_len; ++step) {
    std::vector<int> tokens(n);
    for (int64_t i = 0; i < n; ++i) tokens[i] = utts[i].tokens[step];
    Tensor x = detail::maybe_dropout(agent.receiver.tok(tokens), agent, train, rng);
    h = gru_cell(x, h, agent.receiver.gru);
  }
  return agent.receiver.head(h);
}

/// Soft-channel receiver: step probability vectors instead of tokens.
inline Tensor receiver_forward_soft(const Agent& agent, const std::vector<Tensor>& step_probs,
                                    bool train, Rng& rng) {
  if (step_probs.size() != static_cast<size_t>(agent.cfg.utt_len))
    throw ShapeError("receiver_forward_soft: got " + std::to_string(step_probs.size()) +
                     " steps, expected " + std::to_string(agent.cfg.utt_len));
  const auto n = step_probs[0].dim(0);
  Tensor h = Tensor::zeros({n, agent.cfg.embed});
  for (const Tensor& probs : step_probs) {
    Tensor x = detail::maybe_dropout(agent.receiver.tok.soft(probs), agent, train, rng);
    h = gru_cell(x, h, agent.receiver.gru);
  }
  return agent.receiver.head(h);
}

/// Per-attribute logit block [N,k] for attribute index i.
inline Tensor attribute_block(const Agent& agent, const Tensor& head_out, int attr) {
  const int k = agent.cfg.values;
  return slice_cols(head_out, static_cast<int64_t>(attr) * k,
                    static_cast<int64_t>(attr + 1) * k);
}

inline void save_agent(const Agent& agent, const std::string& path) {
  ParamMap m = agent.params();
  save_params(m, path);
}

inline void load_agent(Agent& agent, const std::string& path) {
  ParamMap m = agent.params();
  load_params(m, path);
}

}  // namespace ilm

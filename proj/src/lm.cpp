#include "dssm/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "json.hpp"

namespace dssm {

// ============================================================================
// Vocab
// ============================================================================

static const char* control_text(int64_t id) {
  switch (id) {
    case Vocab::kUser: return "<|user|>";
    case Vocab::kAssistant: return "<|assistant|>";
    case Vocab::kBeginOfSpeech: return "<|beginofspeech|>";
    case Vocab::kEndOfSpeech: return "<|endofspeech|>";
    case Vocab::kEndOfUser: return "<|endofuser|>";
    case Vocab::kEos: return "<eos>";
    case Vocab::kResponse: return "<response>";
    case Vocab::kIncomplete: return "<incomplete>";
    case Vocab::kIgnore: return "<ignore>";
    default: return nullptr;
  }
}

std::vector<int64_t> Vocab::tokenize(std::string_view text) const {
  std::vector<int64_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int64_t>(c));
  return ids;
}

std::string Vocab::detokenize(std::span<const int64_t> ids) const {
  std::string out;
  for (int64_t id : ids) out += token_text(id);
  return out;
}

std::string Vocab::token_text(int64_t id) const {
  check(id >= 0 && id < kSize, "Vocab: token id out of range");
  if (id < 256) return std::string(1, static_cast<char>(static_cast<unsigned char>(id)));
  return control_text(id);
}

const std::array<int64_t, 3>& Vocab::state_token_ids() {
  static const std::array<int64_t, 3> ids{kResponse, kIncomplete, kIgnore};
  return ids;
}

const char* state_token_name(StateToken t) {
  switch (t) {
    case StateToken::Response: return "response";
    case StateToken::Incomplete: return "incomplete";
    case StateToken::Ignore: return "ignore";
  }
  return "?";
}

int64_t state_token_id(StateToken t) {
  switch (t) {
    case StateToken::Response: return Vocab::kResponse;
    case StateToken::Incomplete: return Vocab::kIncomplete;
    case StateToken::Ignore: return Vocab::kIgnore;
  }
  throw std::runtime_error("state_token_id: bad enum");
}

StateToken state_token_from_id(int64_t id) {
  if (id == Vocab::kResponse) return StateToken::Response;
  if (id == Vocab::kIncomplete) return StateToken::Incomplete;
  if (id == Vocab::kIgnore) return StateToken::Ignore;
  throw std::runtime_error("state_token_from_id: id is not a state token");
}

// ============================================================================
// Config / weights / state
// ============================================================================

void LmConfig::validate() const {
  check(n_layers >= 1, "LmConfig: n_layers must be >= 1");
  check(d_model >= 1 && d_state >= 1 && vocab_size >= 2, "LmConfig: bad dims");
  check(expand >= 1 && conv_kernel >= 1, "LmConfig: bad expand/conv_kernel");
}

std::string LmConfig::to_json() const {
  nlohmann::json j{{"n_layers", n_layers}, {"d_model", d_model},
                   {"d_state", d_state},   {"vocab_size", vocab_size},
                   {"expand", expand},     {"conv_kernel", conv_kernel}};
  return j.dump();
}

LmConfig LmConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  LmConfig cfg;
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.d_state = j.value("d_state", cfg.d_state);
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.expand = j.value("expand", cfg.expand);
  cfg.conv_kernel = j.value("conv_kernel", cfg.conv_kernel);
  cfg.validate();
  return cfg;
}

LmWeights LmWeights::init(const LmConfig& cfg, Rng& rng, Dtype dt) {
  cfg.validate();
  LmWeights w;
  w.embedding = randn({cfg.vocab_size, cfg.d_model},
                      1.0 / std::sqrt(double(cfg.d_model)), rng, dt);
  w.layers.reserve(static_cast<size_t>(cfg.n_layers));
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    w.layers.push_back(MambaBlockWeights::init(cfg.d_model, cfg.d_inner(),
                                               cfg.d_state, cfg.conv_kernel, rng, dt));
  }
  w.final_norm_gamma = Tensor::full({cfg.d_model}, 1.0, dt);
  w.head = randn({cfg.vocab_size, cfg.d_model},
                 1.0 / std::sqrt(double(cfg.d_model)), rng, dt);
  return w;
}

void LmWeights::validate(const LmConfig& cfg) const {
  check(embedding.rank() == 2 && embedding.dim(0) == cfg.vocab_size &&
            embedding.dim(1) == cfg.d_model,
        "LmWeights: embedding shape does not match config");
  check(static_cast<int64_t>(layers.size()) == cfg.n_layers,
        "LmWeights: layer count does not match config");
  for (const MambaBlockWeights& l : layers) {
    l.inner.validate();
    check(l.inner.d_model() == cfg.d_model && l.inner.d_inner() == cfg.d_inner(),
          "LmWeights: layer dims do not match config");
    check(l.inner.ssm.d_state() == cfg.d_state,
          "LmWeights: layer d_state does not match config");
  }
  check(head.rank() == 2 && head.dim(0) == cfg.vocab_size && head.dim(1) == cfg.d_model,
        "LmWeights: head shape does not match config");
}

ModelState ModelState::zeros(const LmConfig& cfg, Dtype dt) {
  cfg.validate();
  ModelState s;
  s.layers.reserve(static_cast<size_t>(cfg.n_layers));
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    s.layers.push_back(LayerState::zeros(cfg.conv_kernel, cfg.d_inner(), cfg.d_state, dt));
  }
  return s;
}

size_t ModelState::byte_size() const {
  size_t n = sizeof(int64_t);  // position counter
  for (const LayerState& l : layers) n += l.byte_size();
  return n;
}

std::vector<std::byte> ModelState::serialize() const {
  std::vector<std::byte> out;
  out.resize(sizeof(int64_t));
  std::memcpy(out.data(), &position, sizeof(int64_t));
  for (const LayerState& l : layers) {
    l.conv.frames.append_bytes(out);
    l.ssm.h.append_bytes(out);
  }
  return out;
}

uint64_t ModelState::checksum() const {
  const std::vector<std::byte> bytes = serialize();
  return fnv1a(bytes.data(), bytes.size());
}

ModelState snapshot(const ModelState& state) { return state; }

bool states_bitwise_equal(const ModelState& a, const ModelState& b) {
  if (a.position != b.position || a.layers.size() != b.layers.size()) return false;
  for (size_t i = 0; i < a.layers.size(); ++i) {
    if (!bitwise_equal(a.layers[i].conv.frames, b.layers[i].conv.frames)) return false;
    if (!bitwise_equal(a.layers[i].ssm.h, b.layers[i].ssm.h)) return false;
  }
  return true;
}

// ============================================================================
// Prompt assembly
// ============================================================================

Tensor embed_tokens(const LmWeights& w, std::span<const int64_t> tokens, GradTape* tape) {
  for (int64_t t : tokens) {
    check(t >= 0 && t < w.vocab_size(), "embed_tokens: token id out of range");
  }
  return gather_rows(w.embedding, tokens, tape);
}

AssembledPrompt assemble_prompt(const PromptPieces& pieces, const Vocab& vocab,
                                const LmWeights& w) {
  check(w.vocab_size() >= Vocab::kSize,
        "assemble_prompt: weights do not cover the control tokens");
  AssembledPrompt out;
  std::vector<int64_t> head_tokens{Vocab::kUser};
  for (int64_t t : vocab.tokenize(pieces.sentence)) head_tokens.push_back(t);
  head_tokens.push_back(Vocab::kBeginOfSpeech);

  std::vector<Tensor> parts;
  parts.push_back(embed_tokens(w, head_tokens));
  for (int64_t t : head_tokens) out.token_at.push_back(t);

  out.speech_begin = static_cast<int64_t>(out.token_at.size());
  if (pieces.speech.has_value() && pieces.speech->dim(0) > 0) {
    check(pieces.speech->rank() == 2 && pieces.speech->dim(1) == w.d_model(),
          "assemble_prompt: speech rows must be [T_s, d_model]");
    parts.push_back(*pieces.speech);
    for (int64_t t = 0; t < pieces.speech->dim(0); ++t) out.token_at.push_back(-1);
  }
  out.speech_end = static_cast<int64_t>(out.token_at.size());

  std::vector<int64_t> tail_tokens{Vocab::kEndOfSpeech};
  if (pieces.include_trailer) {
    tail_tokens.push_back(Vocab::kEndOfUser);
    tail_tokens.push_back(Vocab::kAssistant);
  }
  parts.push_back(embed_tokens(w, tail_tokens));
  for (int64_t t : tail_tokens) out.token_at.push_back(t);

  out.rows = concat_rows(parts);
  return out;
}

// ============================================================================
// Streaming forward
// ============================================================================

/** Rows through every layer, advancing per-layer states; pre-final-norm. */
static Tensor run_layers(ModelState& state, const Tensor& rows, const LmWeights& w) {
  check(state.layers.size() == w.layers.size(),
        "run_layers: state/weight layer count mismatch");
  Tensor h = rows;
  for (size_t i = 0; i < w.layers.size(); ++i) {
    auto [y, next] = mamba_block_forward(h, w.layers[i], std::move(state.layers[i]));
    h = std::move(y);
    state.layers[i] = std::move(next);
  }
  state.position += rows.dim(0);
  return h;
}

static Tensor logits_from_hidden_row(const Tensor& h_last, const LmWeights& w) {
  Tensor normed = rms_norm(h_last, w.final_norm_gamma, 1e-6);
  return linear(normed, w.head);
}

Tensor prefill(ModelState& state, const Tensor& rows, const LmWeights& w) {
  check(rows.rank() == 2 && rows.dim(1) == w.d_model(),
        "prefill: rows must be [T, d_model]");
  check(rows.dim(0) >= 1, "prefill: nothing to consume");
  Tensor h = run_layers(state, rows, w);
  Tensor last = reshape(slice_rows(h, h.dim(0) - 1, h.dim(0)), {w.d_model()});
  return logits_from_hidden_row(last, w);
}

Tensor decode_step(ModelState& state, int64_t token, const LmWeights& w) {
  const int64_t ids[1] = {token};
  return prefill(state, embed_tokens(w, ids), w);
}

Tensor decode_rows(ModelState& state, const Tensor& rows, const LmWeights& w) {
  return prefill(state, rows, w);
}

int64_t select_next(const Tensor& logits, std::span<const int64_t> restrict_to) {
  check(logits.rank() == 1 && logits.dim(0) >= 1, "select_next: logits must be [V]");
  const int64_t V = logits.dim(0);
  int64_t best = -1;
  double best_v = 0;
  auto consider = [&](int64_t id) {
    check(id >= 0 && id < V, "select_next: restricted id out of range");
    const double v = logits.get(id);
    if (best < 0 || v > best_v) {  // strict: exact ties keep the lowest id
      best = id;
      best_v = v;
    }
  };
  if (restrict_to.empty()) {
    for (int64_t id = 0; id < V; ++id) consider(id);
  } else {
    // Visit in ascending id order so ties resolve low regardless of input order.
    std::vector<int64_t> ids(restrict_to.begin(), restrict_to.end());
    std::sort(ids.begin(), ids.end());
    for (int64_t id : ids) consider(id);
  }
  return best;
}

std::pair<StateToken, ModelState> probe_state_token(const ModelState& state,
                                                    const LmWeights& w,
                                                    const Vocab& vocab) {
  ModelState probed = snapshot(state);
  Tensor logits = decode_step(probed, Vocab::kEndOfSpeech, w);
  const auto& ids = vocab.state_token_ids();
  const int64_t pick = select_next(logits, std::span<const int64_t>(ids.data(), ids.size()));
  return {state_token_from_id(pick), std::move(probed)};
}

// ============================================================================
// Training-side forward
// ============================================================================

Tensor lm_hidden_seq(const Tensor& rows, const LmConfig& cfg, const LmWeights& w,
                     GradTape* tape) {
  w.validate(cfg);
  check(rows.rank() == 2 && rows.dim(1) == cfg.d_model,
        "lm_hidden_seq: rows must be [T, d_model]");
  check(rows.dim(0) >= 1, "lm_hidden_seq: nothing to consume");
  const Dtype dt = rows.dtype();
  Tensor h = rows;
  for (const MambaBlockWeights& layer : w.layers) {
    LayerState zero = LayerState::zeros(cfg.conv_kernel, cfg.d_inner(), cfg.d_state, dt);
    auto [y, next] = mamba_block_forward(h, layer, std::move(zero), tape);
    h = std::move(y);
  }
  return h;
}

Tensor lm_logits_at(const Tensor& hidden, const LmWeights& w,
                    std::span<const int64_t> positions, GradTape* tape) {
  check(!positions.empty(), "lm_logits_at: no positions requested");
  Tensor picked = gather_rows(hidden, positions, tape);
  Tensor normed = rms_norm(picked, w.final_norm_gamma, 1e-6, tape);
  return linear(normed, w.head, tape);
}

}  // namespace dssm

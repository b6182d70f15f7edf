#pragma once

/**
 * Decoder-side language model: byte-fallback vocabulary with reserved control
 * tokens, prompt template assembly, streaming prefill/decode over a fixed-size
 * recurrent state, state snapshots, and the end-of-speech probe that reads a
 * state token off the logits.
 *
 * Prompt template (fixed order):
 *   <|user|>  sentence  <|beginofspeech|>  S  <|endofspeech|>  <|endofuser|>  <|assistant|>
 * where S is a block of speech-embedding rows and the rest are token
 * embeddings. The streaming probe variant stops right after <|endofspeech|>.
 */

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dssm/blocks.hpp"

namespace dssm {

// ============================================================================
// Vocabulary
// ============================================================================

/** Byte-level fallback: ids 0..255 are raw bytes, control tokens follow. */
class Vocab {
 public:
  static constexpr int64_t kUser = 256;
  static constexpr int64_t kAssistant = 257;
  static constexpr int64_t kBeginOfSpeech = 258;
  static constexpr int64_t kEndOfSpeech = 259;
  static constexpr int64_t kEndOfUser = 260;
  static constexpr int64_t kEos = 261;
  // State tokens; ascending ids so the documented lowest-id tie-break favors
  // the respond decision.
  static constexpr int64_t kResponse = 262;
  static constexpr int64_t kIncomplete = 263;
  static constexpr int64_t kIgnore = 264;
  static constexpr int64_t kSize = 265;

  int64_t size() const { return kSize; }
  std::vector<int64_t> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int64_t> ids) const;
  std::string token_text(int64_t id) const;
  bool is_control(int64_t id) const { return id >= 256 && id < kSize; }
  static const std::array<int64_t, 3>& state_token_ids();  // {response, incomplete, ignore}
};

enum class StateToken { Response, Incomplete, Ignore };
const char* state_token_name(StateToken t);
int64_t state_token_id(StateToken t);
StateToken state_token_from_id(int64_t id);

// ============================================================================
// Model
// ============================================================================

struct LmConfig {
  int64_t n_layers = 2;
  int64_t d_model = 64;
  int64_t d_state = 16;
  int64_t vocab_size = Vocab::kSize;
  int64_t expand = 2;       // d_inner = expand * d_model
  int64_t conv_kernel = 4;

  int64_t d_inner() const { return expand * d_model; }
  void validate() const;
  std::string to_json() const;
  static LmConfig from_json(const std::string& text);
};

struct LmWeights {
  Tensor embedding;  // [V, d_model]
  std::vector<MambaBlockWeights> layers;
  Tensor final_norm_gamma;  // [d_model]
  Tensor head;              // [V, d_model]

  int64_t d_model() const { return embedding.dim(1); }
  int64_t vocab_size() const { return embedding.dim(0); }
  static LmWeights init(const LmConfig& cfg, Rng& rng, Dtype dt);
  void validate(const LmConfig& cfg) const;
};

/**
 * Everything the decoder carries between tokens. The size is a function of
 * the architecture alone: processing more context never grows it.
 */
struct ModelState {
  std::vector<LayerState> layers;
  int64_t position = 0;  // tokens/rows consumed so far (bookkeeping only)

  static ModelState zeros(const LmConfig& cfg, Dtype dt);
  size_t byte_size() const;
  std::vector<std::byte> serialize() const;
  uint64_t checksum() const;
};

/** Deep copy; the duplex runtime duplicates branches through this. */
ModelState snapshot(const ModelState& state);
bool states_bitwise_equal(const ModelState& a, const ModelState& b);

// ============================================================================
// Prompt assembly
// ============================================================================

struct PromptPieces {
  std::string sentence;                   // may be empty
  std::optional<Tensor> speech;           // [T_s, d_model] rows, optional
  bool include_trailer = true;            // <|endofuser|> <|assistant|> suffix
};

struct AssembledPrompt {
  Tensor rows;                    // [T, d_model] mixed embedding rows
  std::vector<int64_t> token_at;  // token id per row, -1 for speech rows
  int64_t speech_begin = -1;      // row span of S (begin inclusive, end exclusive)
  int64_t speech_end = -1;
};

/** Lays out the template around the pieces and embeds the tokens. */
AssembledPrompt assemble_prompt(const PromptPieces& pieces, const Vocab& vocab,
                                const LmWeights& w);

// ============================================================================
// Streaming forward
// ============================================================================

/**
 * Consumes embedding rows [T, d_model] (T >= 1; empty prefill is an error)
 * and returns the logits after the final row. Mutates `state` in place;
 * snapshot() first when the previous state must stay reachable. Bit-identical
 * to feeding the same rows one decode step at a time.
 */
Tensor prefill(ModelState& state, const Tensor& rows, const LmWeights& w);

/** Embeds one token and advances the state; returns next-token logits. */
Tensor decode_step(ModelState& state, int64_t token, const LmWeights& w);

/** Advances the state over embedding rows; returns logits after the last. */
Tensor decode_rows(ModelState& state, const Tensor& rows, const LmWeights& w);

/**
 * Greedy argmax. With `restrict_to` non-empty only those ids compete; exact
 * ties resolve to the lowest id.
 */
int64_t select_next(const Tensor& logits, std::span<const int64_t> restrict_to = {});

/**
 * Feeds <|endofspeech|> to a copy of `state` and restricted-argmaxes the
 * state tokens. Returns the decision and the post-probe state; the caller
 * keeps its own pre-probe snapshot for rollback.
 */
std::pair<StateToken, ModelState> probe_state_token(const ModelState& state,
                                                    const LmWeights& w,
                                                    const Vocab& vocab);

/**
 * Whole-sequence hidden states from zero state (training path; records on
 * the tape). Returns [T, d_model] pre-final-norm activations.
 */
Tensor lm_hidden_seq(const Tensor& rows, const LmConfig& cfg, const LmWeights& w,
                     GradTape* tape = nullptr);

/** final-norm + head over selected hidden rows -> [n, V] logits. */
Tensor lm_logits_at(const Tensor& hidden, const LmWeights& w,
                    std::span<const int64_t> positions, GradTape* tape = nullptr);

/** Embedding rows for a token sequence (gather; differentiable). */
Tensor embed_tokens(const LmWeights& w, std::span<const int64_t> tokens,
                    GradTape* tape = nullptr);

}  // namespace dssm

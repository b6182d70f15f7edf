#pragma once

/**
 * Checkpoint container and the full-model weight bundle.
 *
 * File layout: 8-byte magic "DPLXSSM1", u64 little-endian header length, a
 * UTF-8 JSON header mapping tensor name -> {dtype, shape, offset, length}
 * (offsets relative to the payload start), then the raw little-endian
 * payload. Tensor names are dotted paths like "lm.layers.3.inner.in_proj".
 *
 * Save/load round-trips are bit-exact for both dtypes.
 */

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dssm/adapter.hpp"
#include "dssm/blocks.hpp"
#include "dssm/lm.hpp"

namespace dssm {

inline constexpr char kCheckpointMagic[8] = {'D', 'P', 'L', 'X', 'S', 'S', 'M', '1'};

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// ============================================================================
// Model bundle
// ============================================================================

/** Ordered name -> tensor view over a model's parameters. */
using ParamMap = std::vector<std::pair<std::string, Tensor*>>;

/**
 * The deployable unit: decoder LM plus (optionally) the speech encoder and
 * adapter. Token-only checkpoints simply omit the speech components.
 */
struct ModelWeights {
  LmConfig lm_cfg;
  LmWeights lm;
  std::optional<EncoderConfig> enc_cfg;
  std::optional<EncoderWeights> encoder;
  std::optional<AdapterWeights> adapter;

  bool has_speech_path() const { return encoder.has_value() && adapter.has_value(); }
  ParamMap named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params_const() const;
};

ModelWeights init_lm_only(const LmConfig& cfg, uint64_t seed, Dtype dt);
ModelWeights init_full(const LmConfig& lm_cfg, const EncoderConfig& enc_cfg,
                       int64_t adapter_k, int64_t adapter_hidden, uint64_t seed, Dtype dt);

void save_model(const std::string& path, const ModelWeights& model);
/** Rebuilds configs from tensor names/shapes; errors on malformed sets. */
ModelWeights load_model(const std::string& path);

/** Validates that a config matches the tensors (e.g. d_state agreement). */
void validate_model_against_config(const ModelWeights& model, const LmConfig& cfg);

}  // namespace dssm

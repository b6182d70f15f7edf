#pragma once

// ============================================================================
// Everything needed to exercise the engine end to end without real audio or
// trained weights: a deterministic stub decoder, the synthetic
// state-discrimination task, toy training loops, the bundled protocol
// scenarios with expected skeletons, and the memory/latency benchmark.
// ============================================================================

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dssm/duplex.hpp"
#include "dssm/training.hpp"

namespace dssm {

// ============================================================================
// Stub decoder
// ============================================================================

/** Behaviour knobs for the stub decoder. */
struct StubConfig {
  std::vector<std::string> responses = {"ok."};  // cycled per reply
  int64_t terminator = '.';  // byte that marks an utterance as complete
  int64_t bg_marker = '#';   // leading byte that marks background speech
};

/**
 * The stub's entire memory: a handful of registers updated per consumed
 * token. Because the registers depend only on the consumed content, cloning
 * and rolling back behave exactly like the real recurrent state.
 */
class StubState : public DecoderState {
 public:
  std::unique_ptr<DecoderState> clone() const override;
  size_t byte_size() const override;
  std::vector<std::byte> serialize() const override;
  uint64_t checksum() const override;
  int64_t position() const override { return pos; }

  int64_t pos = 0;              // tokens consumed
  int64_t utt_rows = 0;         // content tokens in the open utterance
  int64_t assistant_count = 0;  // replies opened so far
  int64_t resp_off = 0;         // next byte of the current canned reply
  bool in_speech = false;
  bool term_seen = false;
  bool bg_seen = false;
  bool generating = false;
};

/**
 * A token-only decoder whose outputs are a pure function of what each state
 * has consumed: utterances ending in the terminator probe as complete,
 * utterances opening with the background marker probe as not-for-us, and
 * replies replay the configured strings byte by byte. Protocol tests run on
 * it without any trained weights.
 */
class StubDecoder : public Decoder {
 public:
  explicit StubDecoder(StubConfig cfg = {});

  std::unique_ptr<DecoderState> make_state() const override;
  Tensor feed(DecoderState& s, std::span<const int64_t> tokens) const override;
  Tensor feed_speech(DecoderState& s, const Tensor& rows) const override;
  Tensor encode_slice(const Tensor& features) const override;
  bool has_speech_path() const override { return false; }
  int64_t vocab_size() const override { return Vocab::kSize; }

  const StubConfig& config() const { return cfg_; }

 private:
  Tensor logits_after(const StubState& s, int64_t last_token) const;
  StubConfig cfg_;
};

// ============================================================================
// Bundled text assets
// ============================================================================

/** Directory of the prompt/label text files (env DSSM_DATA_DIR overrides). */
std::string data_dir();
std::vector<std::string> read_text_lines(const std::string& path);
const std::vector<std::string>& asr_prompts();        // 6 transcription prompts
const std::vector<std::string>& qa_prompts();         // 7 question prompts
const std::vector<std::string>& incomplete_labels();  // 6 cut-off replies
const std::vector<std::string>& ignored_responses();  // 10 clarification replies

// ============================================================================
// Synthetic state-discrimination task
// ============================================================================

struct SyntheticTaskSpec {
  std::vector<std::string> words;  // default: the 26 single-letter words a..z
  std::string terminator = ".";
  std::string bg_marker = "#";
  int64_t min_words = 4;
  int64_t max_words = 12;
  int64_t n = 400;
  uint64_t seed = 1;
  int64_t max_response_len = 24;  // canned targets clipped for speed
  int ratio_response = 2;         // class mix Response : Incomplete : Ignore
  int ratio_incomplete = 1;
  int ratio_ignore = 1;

  static SyntheticTaskSpec defaults();
  void validate() const;
};

struct SyntheticSample {
  std::string utterance;
  StateToken label = StateToken::Response;
  std::string response;
};

/** Deterministic labeled samples; complete/truncated/background by construction. */
std::vector<SyntheticSample> gen_synthetic_dataset(const SyntheticTaskSpec& spec);

void write_dataset_jsonl(const std::string& path, std::span<const SyntheticSample> samples);
std::vector<SyntheticSample> read_dataset_jsonl(const std::string& path);

/** Teacher-forced token sequence with loss positions marked. */
struct TrainingSequence {
  std::vector<int64_t> tokens;  // user .. speech .. state token .. reply .. eos
  int64_t state_pos = -1;       // index of the state token
  int64_t response_start = -1;  // index of the first reply token
  std::vector<int64_t> response_targets;  // reply bytes + eos
  int64_t state_target = -1;
};

TrainingSequence build_training_sequence(const SyntheticSample& sample,
                                         const std::string& sentence = "");

// ============================================================================
// Toy training
// ============================================================================

struct Metrics {
  int64_t tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0, f1 = 0;
};

/** Precision/recall/F1 with empty denominators scored as zero. */
Metrics metrics_from_counts(int64_t tp, int64_t fp, int64_t fn);

struct ToyTrainConfig {
  LmConfig lm;  // defaults are already toy-sized
  int64_t n_train = 2000;
  int64_t n_eval = 400;
  int64_t epochs = 5;
  double lr = 1e-3;
  uint64_t seed = 7;
  int stage = 3;
  int64_t max_response_len = 24;
  int64_t log_every = 0;  // 0 = quiet
};

struct ToyTrainResult {
  std::vector<double> step_losses;
  double first_window_loss = 0;  // mean of the first 10 step losses
  double last_window_loss = 0;   // mean of the last 10 step losses
  Metrics eval;
  ModelWeights model;
};

/**
 * Trains a tiny LM on token-mode synthetic samples with the stage mask
 * applied every step, then scores held-out complete-vs-background utterances
 * (complete counts positive). Throws on a non-finite loss.
 */
ToyTrainResult train_toy_state_discrimination(const ToyTrainConfig& cfg);

/** Restricted state-token prediction after the utterance's closing marker. */
StateToken predict_state(const ModelWeights& model, const SyntheticSample& sample,
                         const std::string& sentence = "");

Metrics evaluate_state_discrimination(const ModelWeights& model,
                                      std::span<const SyntheticSample> samples);

/** Parameter fingerprints bracketing a training run. */
struct ToyFeatureResult {
  std::vector<double> step_losses;
  std::map<std::string, uint64_t> initial_checksums;  // per parameter, before step one
  ModelWeights model;                                 // after the final step
};

/** FNV-1a over shape, dtype name, and raw payload; equal only if bit-equal. */
uint64_t tensor_checksum(const Tensor& t);

/**
 * Miniature run of the speech-path stages: synthetic "features" (a fixed
 * random projection per byte, four frames each) flow through a tiny encoder
 * and adapter into a frozen tiny LM; only encoder/adapter move.
 */
ToyFeatureResult train_toy_feature_alignment(int64_t steps, uint64_t seed);

// ============================================================================
// Scenario library
// ============================================================================

/** One expected protocol event: kind + branch + exact detail. */
struct SkeletonItem {
  TraceKind kind;
  int64_t branch;
  std::string detail;
};

struct LibraryScenario {
  std::string name;
  std::string summary;
  Scenario scenario;
  StubConfig stub;
  DuplexConfig duplex;
  std::vector<SkeletonItem> skeleton;
};

/** Slice whose payload is the byte tokens of `text`. */
ScenarioEvent token_slice(int64_t t_ms, const std::string& text, std::string note = "");

/**
 * The four bundled protocol scenarios: "interruption" (a two-part query cuts
 * off an ongoing reply), "non-awakening" (background speech during a reply is
 * dropped), "incomplete-continuation" (one query across three slices), and
 * "idle-query" (single turn from idle).
 */
const std::vector<LibraryScenario>& scenario_library();
const LibraryScenario& library_scenario(const std::string& name);

/** Protocol-significant events only (drops bookends and reply text). */
std::vector<SkeletonItem> skeleton_of(const std::vector<TraceEvent>& trace);

/** Exact skeleton match; throws naming the first divergence. */
void check_skeleton(const std::vector<TraceEvent>& trace,
                    const std::vector<SkeletonItem>& expected);

// ============================================================================
// Memory / latency benchmark
// ============================================================================

struct BenchRow {
  int64_t context = 0;
  size_t state_bytes = 0;
  size_t peak_bytes = 0;
  double tok_us = 0;
  double dup_us = 0;
};

/**
 * For each context length: prefill that many random byte tokens, then report
 * the state's exact byte size, process peak RSS, mean per-token decode
 * latency over 64 steps (after warmup), and median state-duplication time.
 */
std::vector<BenchRow> bench_memory_latency(const ModelWeights& model,
                                           std::span<const int64_t> contexts,
                                           uint64_t seed);

/** CSV with header "context,state_bytes,peak_bytes,tok_us,dup_us". */
std::string bench_csv(std::span<const BenchRow> rows);

size_t peak_rss_bytes();

}  // namespace dssm

#pragma once

// ============================================================================
// Full-duplex streaming session: trace events, scenario files, the decoder
// abstraction, and the branch-switching session loop.
//
// The session owns one "main" branch (the voice of the system) and at most
// one "aux" branch (a speculative copy that listens while main is talking).
// Slices of user speech arrive on a virtual clock; every slice ends with a
// probe that classifies the utterance so far, and the session reacts by
// rolling back, promoting the listener, or dropping it.
// ============================================================================

#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dssm/checkpoint.hpp"
#include "dssm/lm.hpp"
#include "dssm/tensor.hpp"

namespace dssm {

// ============================================================================
// Trace events
// ============================================================================

enum class TraceKind {
  SessionStart,
  SliceConsumed,
  StateToken,
  BranchCreated,
  BranchPromoted,
  BranchDiscarded,
  Rollback,
  TextToken,
  ResponseStart,
  ResponseEnd,
  SessionEnd,
};

const char* trace_kind_name(TraceKind k);
TraceKind trace_kind_from_name(const std::string& name);

/** One line of the session's observable behaviour. */
struct TraceEvent {
  int64_t t_ms = 0;    // virtual tick time
  int64_t seq = 0;     // order within the tick, starting at 0
  TraceKind kind = TraceKind::SessionStart;
  int64_t branch = 0;  // branch the event concerns
  std::string detail;  // kind-specific payload (token text, reason, ...)

  std::string to_json() const;
  static TraceEvent from_json(const std::string& line);
};

void write_trace(const std::string& path, const std::vector<TraceEvent>& events);
std::vector<TraceEvent> read_trace(const std::string& path);

/**
 * Structural checks on a finished trace: SessionStart/SessionEnd bookends,
 * monotone clocks, per-tick sequence numbering, branch lifecycles (every
 * created branch is promoted, discarded, or retained after a rollback), and
 * response start/end pairing. Throws on the first violation.
 */
void validate_trace(const std::vector<TraceEvent>& events);

// ============================================================================
// Scenario files
// ============================================================================

enum class SliceMode { Features, MockEmb, MockTokens };

const char* slice_mode_name(SliceMode m);
SliceMode slice_mode_from_name(const std::string& name);

/** The content of one captured slice of user input. */
struct SlicePayload {
  SliceMode mode = SliceMode::MockTokens;
  Tensor data;                  // Features: [T_f, d_feat]; MockEmb: [T_s, d_lm]
  std::vector<int64_t> tokens;  // MockTokens only
};

struct ScenarioEvent {
  int64_t t_ms = 0;
  SlicePayload payload;
  std::string note;  // free-form authoring comment, carried but unused

  std::string to_json() const;
  static ScenarioEvent from_json(const std::string& line);
};

struct Scenario {
  std::vector<ScenarioEvent> events;  // kept sorted by t_ms
};

void write_scenario(const std::string& path, const Scenario& s);
/** Reads JSONL, validates every line, and stable-sorts events by time. */
Scenario read_scenario(const std::string& path);

std::string base64_encode(std::span<const std::byte> bytes);
std::vector<std::byte> base64_decode(const std::string& text);

// ============================================================================
// Decoder abstraction
// ============================================================================

/** Opaque per-branch recurrent state; cloning it is the duplication primitive. */
class DecoderState {
 public:
  virtual ~DecoderState() = default;
  virtual std::unique_ptr<DecoderState> clone() const = 0;
  virtual size_t byte_size() const = 0;
  virtual std::vector<std::byte> serialize() const = 0;
  virtual uint64_t checksum() const = 0;
  virtual int64_t position() const = 0;
};

/**
 * What the session needs from a language model: advance a state through
 * tokens or speech rows (returning the logits after the last input) and,
 * when a speech front end is available, turn raw features into rows.
 */
class Decoder {
 public:
  virtual ~Decoder() = default;
  virtual std::unique_ptr<DecoderState> make_state() const = 0;
  virtual Tensor feed(DecoderState& s, std::span<const int64_t> tokens) const = 0;
  virtual Tensor feed_speech(DecoderState& s, const Tensor& rows) const = 0;
  virtual Tensor encode_slice(const Tensor& features) const = 0;
  virtual bool has_speech_path() const = 0;
  virtual int64_t vocab_size() const = 0;
};

/** Runs real model weights behind the Decoder interface. */
class RealDecoder : public Decoder {
 public:
  explicit RealDecoder(ModelWeights weights);

  std::unique_ptr<DecoderState> make_state() const override;
  Tensor feed(DecoderState& s, std::span<const int64_t> tokens) const override;
  Tensor feed_speech(DecoderState& s, const Tensor& rows) const override;
  Tensor encode_slice(const Tensor& features) const override;
  bool has_speech_path() const override;
  int64_t vocab_size() const override;

  const ModelWeights& weights() const { return weights_; }

 private:
  ModelWeights weights_;
};

/** DecoderState carried by RealDecoder; wraps the recurrent ModelState. */
class RealDecoderState : public DecoderState {
 public:
  explicit RealDecoderState(ModelState s) : state(std::move(s)) {}
  std::unique_ptr<DecoderState> clone() const override;
  size_t byte_size() const override { return state.byte_size(); }
  std::vector<std::byte> serialize() const override { return state.serialize(); }
  uint64_t checksum() const override { return state.checksum(); }
  int64_t position() const override { return state.position; }

  ModelState state;
};

// ============================================================================
// Session
// ============================================================================

struct DuplexConfig {
  int64_t tick_ms = 200;            // wall-clock step of the session loop
  int64_t slice_ms = 3000;          // capture window per slice (generators)
  int64_t tokens_per_sec = 20;      // decode throughput budget
  int64_t max_response_tokens = 256;  // hard cap before a reply is cut off

  int64_t tokens_per_tick() const;
  void validate() const;
  std::string to_json() const;
  static DuplexConfig from_json(const std::string& text);
};

enum class BranchPhase { AwaitingInput, ConsumingSpeech, Generating };

/** One live decode branch plus the snapshots its protocol moves depend on. */
struct Branch {
  int64_t id = 0;
  BranchPhase phase = BranchPhase::AwaitingInput;
  std::unique_ptr<DecoderState> state;
  std::unique_ptr<DecoderState> pre_probe;      // restored when a probe says "keep listening"
  std::unique_ptr<DecoderState> pre_utterance;  // restored when an idle-heard utterance is ignored
  Tensor logits;                // logits after the last fed input
  bool logits_valid = false;
  int64_t response_tokens = 0;  // emitted so far in the open response
};

/**
 * The full-duplex loop. Feed it timed slices, advance the clock with tick(),
 * and read the trace. All state transitions are deterministic functions of
 * the decoder outputs, so identical inputs give byte-identical traces.
 */
class Session {
 public:
  Session(const Decoder& dec, const DuplexConfig& cfg);

  /** Emits SessionStart. Must be called exactly once, first. */
  void start();
  /** Queues a slice; timestamps must be non-decreasing. */
  void enqueue(ScenarioEvent ev);
  /** Ingests every queued slice with t_ms <= now, then lets main speak. */
  void tick(int64_t now_ms);
  /** No queued slices and main is not mid-response. */
  bool quiescent() const;
  /** Emits SessionEnd. */
  void finish(int64_t now_ms);

  /** start() + enqueue all + tick until quiescent + finish; returns the trace. */
  const std::vector<TraceEvent>& run_scenario(const Scenario& s);

  const std::vector<TraceEvent>& trace() const { return trace_; }
  const Branch& main_branch() const { return main_; }
  bool has_aux() const { return aux_.has_value(); }
  const Branch& aux_branch() const;

 private:
  void emit(TraceKind kind, int64_t branch, std::string detail);
  void ingest(const ScenarioEvent& ev);
  void generate_budget();

  const Decoder& dec_;
  DuplexConfig cfg_;
  Branch main_;
  std::optional<Branch> aux_;
  std::deque<ScenarioEvent> pending_;
  std::vector<TraceEvent> trace_;
  int64_t now_ms_ = 0;
  int64_t seq_ = 0;
  int64_t next_branch_id_ = 1;
  int64_t last_enqueued_t_ = -1;
  bool started_ = false;
  bool finished_ = false;
};

}  // namespace dssm

#include "dssm/duplex.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dssm/adapter.hpp"
#include "dssm/blocks.hpp"
#include "json.hpp"

namespace dssm {

// ============================================================================
// Trace kinds and events
// ============================================================================

namespace {

struct KindName {
  TraceKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {TraceKind::SessionStart, "session-start"},
    {TraceKind::SliceConsumed, "slice-consumed"},
    {TraceKind::StateToken, "state-token"},
    {TraceKind::BranchCreated, "branch-created"},
    {TraceKind::BranchPromoted, "branch-promoted"},
    {TraceKind::BranchDiscarded, "branch-discarded"},
    {TraceKind::Rollback, "rollback"},
    {TraceKind::TextToken, "text-token"},
    {TraceKind::ResponseStart, "response-start"},
    {TraceKind::ResponseEnd, "response-end"},
    {TraceKind::SessionEnd, "session-end"},
};

}  // namespace

const char* trace_kind_name(TraceKind k) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == k) return kn.name;
  }
  throw std::runtime_error("trace_kind_name: unknown kind");
}

TraceKind trace_kind_from_name(const std::string& name) {
  for (const auto& kn : kKindNames) {
    if (name == kn.name) return kn.kind;
  }
  throw std::runtime_error("trace_kind_from_name: unknown kind '" + name + "'");
}

std::string TraceEvent::to_json() const {
  nlohmann::json j = {{"t_ms", t_ms},
                      {"seq", seq},
                      {"kind", trace_kind_name(kind)},
                      {"branch", branch},
                      {"detail", detail}};
  return j.dump();
}

TraceEvent TraceEvent::from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("trace line is not valid JSON: ") + e.what());
  }
  TraceEvent ev;
  ev.t_ms = j.at("t_ms").get<int64_t>();
  ev.seq = j.at("seq").get<int64_t>();
  ev.kind = trace_kind_from_name(j.at("kind").get<std::string>());
  ev.branch = j.at("branch").get<int64_t>();
  ev.detail = j.at("detail").get<std::string>();
  return ev;
}

void write_trace(const std::string& path, const std::vector<TraceEvent>& events) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "write_trace: cannot open " + path);
  for (const auto& ev : events) out << ev.to_json() << "\n";
  check(out.good(), "write_trace: write failed for " + path);
}

std::vector<TraceEvent> read_trace(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "read_trace: cannot open " + path);
  std::vector<TraceEvent> events;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    events.push_back(TraceEvent::from_json(line));
  }
  return events;
}

// ============================================================================
// Trace validation
// ============================================================================

namespace {

[[noreturn]] void trace_fail(size_t index, const std::string& why) {
  throw std::runtime_error("invalid trace at event " + std::to_string(index) + ": " + why);
}

}  // namespace

void validate_trace(const std::vector<TraceEvent>& events) {
  check(!events.empty(), "invalid trace: no events");
  check(events.front().kind == TraceKind::SessionStart,
        "invalid trace: must begin with session-start");
  check(events.back().kind == TraceKind::SessionEnd,
        "invalid trace: must end with session-end");

  int64_t current_main = events.front().branch;
  std::set<int64_t> live_aux;
  std::set<int64_t> ever_created;
  std::map<int64_t, int> close_count;    // promotions + discards per created id
  std::map<int64_t, int> rollback_count;
  std::map<int64_t, bool> response_open;

  int64_t prev_t = events.front().t_ms;
  int64_t expect_seq = 0;
  for (size_t i = 0; i < events.size(); ++i) {
    const TraceEvent& ev = events[i];
    if (i > 0) {
      if (ev.kind == TraceKind::SessionStart) trace_fail(i, "second session-start");
      if (ev.t_ms < prev_t) trace_fail(i, "time went backwards");
      if (ev.t_ms != prev_t) expect_seq = 0;
      prev_t = ev.t_ms;
    }
    if (ev.seq != expect_seq) {
      trace_fail(i, "sequence number " + std::to_string(ev.seq) + " where " +
                        std::to_string(expect_seq) + " was expected");
    }
    ++expect_seq;
    if (ev.kind == TraceKind::SessionEnd && i + 1 != events.size()) {
      trace_fail(i, "session-end before the final event");
    }

    const bool live = ev.branch == current_main || live_aux.count(ev.branch) > 0;
    switch (ev.kind) {
      case TraceKind::SessionStart:
      case TraceKind::SessionEnd:
        if (ev.branch != current_main) trace_fail(i, "session bookend not on the main branch");
        break;
      case TraceKind::BranchCreated:
        if (ev.branch == current_main || ever_created.count(ev.branch))
          trace_fail(i, "branch id reused");
        ever_created.insert(ev.branch);
        live_aux.insert(ev.branch);
        break;
      case TraceKind::BranchPromoted:
        if (!live_aux.count(ev.branch)) trace_fail(i, "promoted branch is not a live aux");
        if (response_open[current_main]) trace_fail(i, "promotion over an open response");
        live_aux.erase(ev.branch);
        ++close_count[ev.branch];
        current_main = ev.branch;
        break;
      case TraceKind::BranchDiscarded:
        if (!live_aux.count(ev.branch)) trace_fail(i, "discarded branch is not a live aux");
        live_aux.erase(ev.branch);
        ++close_count[ev.branch];
        break;
      case TraceKind::Rollback:
        if (!live) trace_fail(i, "rollback on a dead branch");
        ++rollback_count[ev.branch];
        break;
      case TraceKind::StateToken:
        if (!live) trace_fail(i, "state token on a dead branch");
        if (ev.detail != "response" && ev.detail != "incomplete" && ev.detail != "ignore")
          trace_fail(i, "unknown state token '" + ev.detail + "'");
        break;
      case TraceKind::SliceConsumed:
        if (!live) trace_fail(i, "slice consumed on a dead branch");
        break;
      case TraceKind::ResponseStart:
        if (!live) trace_fail(i, "response start on a dead branch");
        if (response_open[ev.branch]) trace_fail(i, "nested response start");
        response_open[ev.branch] = true;
        break;
      case TraceKind::ResponseEnd:
        if (!live) trace_fail(i, "response end on a dead branch");
        if (!response_open[ev.branch]) trace_fail(i, "response end without a start");
        response_open[ev.branch] = false;
        break;
      case TraceKind::TextToken:
        if (!live) trace_fail(i, "text token on a dead branch");
        if (!response_open[ev.branch]) trace_fail(i, "text token outside a response");
        break;
    }
  }

  for (const auto& [id, open] : response_open) {
    if (open) throw std::runtime_error("invalid trace: response on branch " +
                                       std::to_string(id) + " never ended");
  }
  for (int64_t id : ever_created) {
    const int closes = close_count.count(id) ? close_count.at(id) : 0;
    if (closes > 1) {
      throw std::runtime_error("invalid trace: branch " + std::to_string(id) +
                               " closed more than once");
    }
    if (closes == 0 && rollback_count[id] == 0) {
      throw std::runtime_error("invalid trace: branch " + std::to_string(id) +
                               " neither promoted, discarded, nor retained via rollback");
    }
  }
}

// ============================================================================
// Base64
// ============================================================================

namespace {
constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const std::byte> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 2 < bytes.size()) {
    const uint32_t v = (uint32_t(bytes[i]) << 16) | (uint32_t(bytes[i + 1]) << 8) |
                       uint32_t(bytes[i + 2]);
    out += kB64Alphabet[(v >> 18) & 63];
    out += kB64Alphabet[(v >> 12) & 63];
    out += kB64Alphabet[(v >> 6) & 63];
    out += kB64Alphabet[v & 63];
    i += 3;
  }
  const size_t rest = bytes.size() - i;
  if (rest == 1) {
    const uint32_t v = uint32_t(bytes[i]) << 16;
    out += kB64Alphabet[(v >> 18) & 63];
    out += kB64Alphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const uint32_t v = (uint32_t(bytes[i]) << 16) | (uint32_t(bytes[i + 1]) << 8);
    out += kB64Alphabet[(v >> 18) & 63];
    out += kB64Alphabet[(v >> 12) & 63];
    out += kB64Alphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::byte> base64_decode(const std::string& text) {
  check(text.size() % 4 == 0, "base64: length must be a multiple of 4");
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    throw std::runtime_error("base64: invalid character");
  };
  std::vector<std::byte> out;
  out.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int pad = 0;
    if (last && text[i + 3] == '=') pad = text[i + 2] == '=' ? 2 : 1;
    check(pad > 0 || (text[i + 2] != '=' && text[i + 3] != '='),
          "base64: padding only allowed at the end");
    const int a = value_of(text[i]);
    const int b = value_of(text[i + 1]);
    const int c = pad == 2 ? 0 : value_of(text[i + 2]);
    const int d = pad >= 1 ? 0 : value_of(text[i + 3]);
    const uint32_t v = (uint32_t(a) << 18) | (uint32_t(b) << 12) | (uint32_t(c) << 6) |
                       uint32_t(d);
    out.push_back(std::byte((v >> 16) & 0xff));
    if (pad < 2) out.push_back(std::byte((v >> 8) & 0xff));
    if (pad < 1) out.push_back(std::byte(v & 0xff));
  }
  return out;
}

// ============================================================================
// Scenario files
// ============================================================================

const char* slice_mode_name(SliceMode m) {
  switch (m) {
    case SliceMode::Features: return "features";
    case SliceMode::MockEmb: return "mock_emb";
    case SliceMode::MockTokens: return "mock_tokens";
  }
  throw std::runtime_error("slice_mode_name: unknown mode");
}

SliceMode slice_mode_from_name(const std::string& name) {
  if (name == "features") return SliceMode::Features;
  if (name == "mock_emb") return SliceMode::MockEmb;
  if (name == "mock_tokens") return SliceMode::MockTokens;
  throw std::runtime_error("unknown slice mode '" + name + "'");
}

std::string ScenarioEvent::to_json() const {
  nlohmann::json p;
  p["mode"] = slice_mode_name(payload.mode);
  if (payload.mode == SliceMode::MockTokens) {
    p["data"] = payload.tokens;
  } else {
    check(payload.data.rank() == 2, "scenario payload tensor must be rank 2");
    check(payload.data.dtype() == Dtype::F32, "scenario payload tensor must be f32");
    std::vector<std::byte> bytes;
    payload.data.append_bytes(bytes);
    p["data"] = base64_encode(bytes);
    p["shape"] = payload.data.shape();
  }
  nlohmann::json j = {{"t_ms", t_ms}, {"kind", "slice"}, {"payload", p}};
  if (!note.empty()) j["note"] = note;
  return j.dump();
}

ScenarioEvent ScenarioEvent::from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("scenario line is not valid JSON: ") + e.what());
  }
  ScenarioEvent ev;
  ev.t_ms = j.at("t_ms").get<int64_t>();
  check(ev.t_ms >= 0, "scenario event time must be non-negative");
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "slice") throw std::runtime_error("unknown scenario event kind '" + kind + "'");
  const nlohmann::json& p = j.at("payload");
  ev.payload.mode = slice_mode_from_name(p.at("mode").get<std::string>());
  if (ev.payload.mode == SliceMode::MockTokens) {
    ev.payload.tokens = p.at("data").get<std::vector<int64_t>>();
    check(!ev.payload.tokens.empty(), "scenario slice carries no tokens");
    for (int64_t t : ev.payload.tokens) {
      check(t >= 0, "scenario token ids must be non-negative");
    }
  } else {
    const std::vector<int64_t> shape = p.at("shape").get<std::vector<int64_t>>();
    check(shape.size() == 2 && shape[0] >= 1 && shape[1] >= 1,
          "scenario payload shape must be [rows, cols] with both positive");
    const std::vector<std::byte> bytes = base64_decode(p.at("data").get<std::string>());
    Tensor t(shape, Dtype::F32);
    check(bytes.size() == t.byte_size(),
          "scenario payload byte length does not match its shape");
    std::memcpy(t.ptr<float>(), bytes.data(), bytes.size());
    check(t.all_finite(), "scenario payload holds non-finite values");
    ev.payload.data = std::move(t);
  }
  if (j.contains("note")) ev.note = j.at("note").get<std::string>();
  return ev;
}

void write_scenario(const std::string& path, const Scenario& s) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "write_scenario: cannot open " + path);
  for (const auto& ev : s.events) out << ev.to_json() << "\n";
  check(out.good(), "write_scenario: write failed for " + path);
}

Scenario read_scenario(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "read_scenario: cannot open " + path);
  Scenario s;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      s.events.push_back(ScenarioEvent::from_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const ScenarioEvent& a, const ScenarioEvent& b) {
                     return a.t_ms < b.t_ms;
                   });
  return s;
}

// ============================================================================
// RealDecoder
// ============================================================================

RealDecoder::RealDecoder(ModelWeights weights) : weights_(std::move(weights)) {
  weights_.lm_cfg.validate();
  weights_.lm.validate(weights_.lm_cfg);
}

std::unique_ptr<DecoderState> RealDecoder::make_state() const {
  return std::make_unique<RealDecoderState>(
      ModelState::zeros(weights_.lm_cfg, weights_.lm.embedding.dtype()));
}

std::unique_ptr<DecoderState> RealDecoderState::clone() const {
  return std::make_unique<RealDecoderState>(snapshot(state));
}

namespace {

RealDecoderState& as_real(DecoderState& s) {
  auto* rs = dynamic_cast<RealDecoderState*>(&s);
  check(rs != nullptr, "decoder was handed a state it did not create");
  return *rs;
}

}  // namespace

Tensor RealDecoder::feed(DecoderState& s, std::span<const int64_t> tokens) const {
  check(!tokens.empty(), "feed: no tokens");
  RealDecoderState& rs = as_real(s);
  Tensor logits;
  for (int64_t tok : tokens) {
    check(tok >= 0 && tok < weights_.lm_cfg.vocab_size, "feed: token id out of range");
    logits = decode_step(rs.state, tok, weights_.lm);
  }
  return logits;
}

Tensor RealDecoder::feed_speech(DecoderState& s, const Tensor& rows) const {
  RealDecoderState& rs = as_real(s);
  return prefill(rs.state, rows, weights_.lm);
}

Tensor RealDecoder::encode_slice(const Tensor& features) const {
  check(has_speech_path(), "this decoder has no speech front end; use token slices");
  Tensor h = encoder_forward(features, *weights_.enc_cfg, *weights_.encoder);
  return adapter_forward(h, *weights_.adapter).s;
}

bool RealDecoder::has_speech_path() const { return weights_.has_speech_path(); }

int64_t RealDecoder::vocab_size() const { return weights_.lm_cfg.vocab_size; }

// ============================================================================
// DuplexConfig
// ============================================================================

int64_t DuplexConfig::tokens_per_tick() const {
  return std::max<int64_t>(1, tokens_per_sec * tick_ms / 1000);
}

void DuplexConfig::validate() const {
  check(tick_ms >= 1, "duplex config: tick_ms must be positive");
  check(slice_ms >= 1, "duplex config: slice_ms must be positive");
  check(tokens_per_sec >= 1, "duplex config: tokens_per_sec must be positive");
  check(max_response_tokens >= 1, "duplex config: max_response_tokens must be positive");
}

std::string DuplexConfig::to_json() const {
  nlohmann::json j = {{"tick_ms", tick_ms},
                      {"slice_ms", slice_ms},
                      {"tokens_per_sec", tokens_per_sec},
                      {"max_response_tokens", max_response_tokens}};
  return j.dump();
}

DuplexConfig DuplexConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  DuplexConfig c;
  if (j.contains("tick_ms")) c.tick_ms = j.at("tick_ms").get<int64_t>();
  if (j.contains("slice_ms")) c.slice_ms = j.at("slice_ms").get<int64_t>();
  if (j.contains("tokens_per_sec")) c.tokens_per_sec = j.at("tokens_per_sec").get<int64_t>();
  if (j.contains("max_response_tokens"))
    c.max_response_tokens = j.at("max_response_tokens").get<int64_t>();
  c.validate();
  return c;
}

// ============================================================================
// Session
// ============================================================================

namespace {

/** JSON-safe rendering of a generated token for the trace. */
std::string printable_token(int64_t id) {
  static const Vocab vocab;
  if (id >= 256) return vocab.token_text(id);
  if (id >= 32 && id < 127) return std::string(1, static_cast<char>(id));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "\\x%02x", static_cast<unsigned>(id));
  return buf;
}

}  // namespace

Session::Session(const Decoder& dec, const DuplexConfig& cfg) : dec_(dec), cfg_(cfg) {
  cfg_.validate();
}

const Branch& Session::aux_branch() const {
  check(aux_.has_value(), "no aux branch is alive");
  return *aux_;
}

void Session::emit(TraceKind kind, int64_t branch, std::string detail) {
  if (trace_.empty() || trace_.back().t_ms != now_ms_) seq_ = 0;
  trace_.push_back(TraceEvent{now_ms_, seq_++, kind, branch, std::move(detail)});
}

void Session::start() {
  check(!started_, "session already started");
  started_ = true;
  main_.id = 0;
  main_.state = dec_.make_state();
  emit(TraceKind::SessionStart, main_.id, "");
}

void Session::enqueue(ScenarioEvent ev) {
  check(started_, "session not started");
  check(!finished_, "session already finished");
  check(ev.t_ms >= last_enqueued_t_, "slice timestamps must not go backwards");
  last_enqueued_t_ = ev.t_ms;
  pending_.push_back(std::move(ev));
}

bool Session::quiescent() const {
  return pending_.empty() && main_.phase != BranchPhase::Generating;
}

void Session::tick(int64_t now_ms) {
  check(started_, "session not started");
  check(!finished_, "session already finished");
  check(now_ms >= now_ms_, "session clock went backwards");
  now_ms_ = now_ms;
  while (!pending_.empty() && pending_.front().t_ms <= now_ms) {
    ScenarioEvent ev = std::move(pending_.front());
    pending_.pop_front();
    ingest(ev);
  }
  generate_budget();
}

void Session::finish(int64_t now_ms) {
  check(started_, "session not started");
  check(!finished_, "session already finished");
  check(now_ms >= now_ms_, "session clock went backwards");
  now_ms_ = now_ms;
  finished_ = true;
  emit(TraceKind::SessionEnd, main_.id, "");
}

void Session::ingest(const ScenarioEvent& ev) {
  // --- route the slice to its receiving branch ---
  Branch* rb = nullptr;
  if (aux_.has_value()) {
    rb = &*aux_;  // an open utterance always stays on the branch that heard it start
  } else if (main_.phase == BranchPhase::Generating) {
    // The user starts talking over the system: listen on a duplicate so the
    // reply keeps flowing untouched.
    Branch aux;
    aux.id = next_branch_id_++;
    aux.phase = BranchPhase::ConsumingSpeech;
    aux.state = main_.state->clone();
    aux_.emplace(std::move(aux));
    rb = &*aux_;
    emit(TraceKind::BranchCreated, rb->id, "from=" + std::to_string(main_.id));
    // In the listener's view the unfinished reply ends here and a user turn opens.
    const int64_t open_turn[] = {Vocab::kEos, Vocab::kUser, Vocab::kBeginOfSpeech};
    dec_.feed(*rb->state, open_turn);
  } else if (main_.phase == BranchPhase::AwaitingInput) {
    rb = &main_;
    rb->pre_utterance = rb->state->clone();
    rb->phase = BranchPhase::ConsumingSpeech;
    const int64_t open_turn[] = {Vocab::kUser, Vocab::kBeginOfSpeech};
    dec_.feed(*rb->state, open_turn);
  } else {
    rb = &main_;  // main already mid-utterance: plain continuation
  }

  // --- feed the slice content ---
  int64_t rows = 0;
  switch (ev.payload.mode) {
    case SliceMode::Features: {
      Tensor emb = dec_.encode_slice(ev.payload.data);
      rows = emb.rows();
      dec_.feed_speech(*rb->state, emb);
      break;
    }
    case SliceMode::MockEmb:
      rows = ev.payload.data.rows();
      dec_.feed_speech(*rb->state, ev.payload.data);
      break;
    case SliceMode::MockTokens:
      for (int64_t t : ev.payload.tokens) {
        check(t < dec_.vocab_size(), "scenario token id exceeds the vocabulary");
      }
      rows = static_cast<int64_t>(ev.payload.tokens.size());
      dec_.feed(*rb->state, ev.payload.tokens);
      break;
  }
  emit(TraceKind::SliceConsumed, rb->id, "rows=" + std::to_string(rows));

  // --- probe: is the utterance finished, and is it for us? ---
  rb->pre_probe = rb->state->clone();
  const int64_t probe_tok[] = {Vocab::kEndOfSpeech};
  Tensor probe_logits = dec_.feed(*rb->state, probe_tok);
  const int64_t picked = select_next(probe_logits, Vocab::state_token_ids());
  const StateToken st = state_token_from_id(picked);
  emit(TraceKind::StateToken, rb->id, state_token_name(st));

  switch (st) {
    case StateToken::Incomplete:
      // Unwind the probe and keep listening.
      rb->state = std::move(rb->pre_probe);
      emit(TraceKind::Rollback, rb->id, "incomplete");
      break;

    case StateToken::Response: {
      if (aux_.has_value()) {
        // The listener wins. Cut the talker off if it is still talking.
        if (main_.phase == BranchPhase::Generating) {
          emit(TraceKind::ResponseEnd, main_.id, "interrupted");
        }
        emit(TraceKind::BranchPromoted, aux_->id, "replaces=" + std::to_string(main_.id));
        main_ = std::move(*aux_);
        aux_.reset();
      }
      const int64_t close_turn[] = {Vocab::kEndOfUser, Vocab::kAssistant};
      main_.logits = dec_.feed(*main_.state, close_turn);
      main_.logits_valid = true;
      main_.phase = BranchPhase::Generating;
      main_.response_tokens = 0;
      emit(TraceKind::ResponseStart, main_.id, "");
      break;
    }

    case StateToken::Ignore:
      if (aux_.has_value()) {
        emit(TraceKind::BranchDiscarded, aux_->id, "ignore");
        aux_.reset();
      } else {
        // The utterance was not for us: make it leave no imprint at all.
        check(main_.pre_utterance != nullptr, "no snapshot to restore for ignored utterance");
        main_.state = std::move(main_.pre_utterance);
        main_.phase = BranchPhase::AwaitingInput;
        main_.logits_valid = false;
        emit(TraceKind::Rollback, main_.id, "ignored-utterance");
      }
      break;
  }
}

void Session::generate_budget() {
  const int64_t budget = cfg_.tokens_per_tick();
  for (int64_t g = 0; g < budget && main_.phase == BranchPhase::Generating; ++g) {
    check(main_.logits_valid, "generating without logits");
    const int64_t eos_tok[] = {Vocab::kEos};
    if (main_.response_tokens >= cfg_.max_response_tokens) {
      main_.logits = dec_.feed(*main_.state, eos_tok);
      main_.phase = BranchPhase::AwaitingInput;
      emit(TraceKind::ResponseEnd, main_.id, "budget");
      continue;
    }
    const int64_t tok = select_next(main_.logits);
    if (tok == Vocab::kEos) {
      main_.logits = dec_.feed(*main_.state, eos_tok);
      main_.phase = BranchPhase::AwaitingInput;
      emit(TraceKind::ResponseEnd, main_.id, "eos");
    } else {
      emit(TraceKind::TextToken, main_.id, printable_token(tok));
      const int64_t toks[] = {tok};
      main_.logits = dec_.feed(*main_.state, toks);
      ++main_.response_tokens;
    }
  }
}

const std::vector<TraceEvent>& Session::run_scenario(const Scenario& s) {
  check(!started_, "run_scenario needs a fresh session");
  start();
  for (const auto& ev : s.events) enqueue(ev);
  int64_t t = 0;
  while (!quiescent()) {
    t += cfg_.tick_ms;
    tick(t);
  }
  finish(t);
  return trace_;
}

}  // namespace dssm

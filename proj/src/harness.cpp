#include "dssm/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <sys/resource.h>

#include "dssm/adapter.hpp"
#include "dssm/blocks.hpp"
#include "json.hpp"

namespace dssm {

// ============================================================================
// Stub decoder
// ============================================================================

std::unique_ptr<DecoderState> StubState::clone() const {
  return std::make_unique<StubState>(*this);
}

std::vector<std::byte> StubState::serialize() const {
  const int64_t regs[8] = {pos,
                           utt_rows,
                           assistant_count,
                           resp_off,
                           in_speech ? 1 : 0,
                           term_seen ? 1 : 0,
                           bg_seen ? 1 : 0,
                           generating ? 1 : 0};
  std::vector<std::byte> out(sizeof(regs));
  std::memcpy(out.data(), regs, sizeof(regs));
  return out;
}

size_t StubState::byte_size() const { return 8 * sizeof(int64_t); }

uint64_t StubState::checksum() const {
  const auto bytes = serialize();
  return fnv1a(bytes.data(), bytes.size());
}

StubDecoder::StubDecoder(StubConfig cfg) : cfg_(std::move(cfg)) {
  check(!cfg_.responses.empty(), "stub decoder needs at least one canned response");
  check(cfg_.terminator >= 0 && cfg_.terminator < 256, "stub terminator must be a byte");
  check(cfg_.bg_marker >= 0 && cfg_.bg_marker < 256, "stub background marker must be a byte");
}

std::unique_ptr<DecoderState> StubDecoder::make_state() const {
  return std::make_unique<StubState>();
}

namespace {

StubState& as_stub(DecoderState& s) {
  auto* st = dynamic_cast<StubState*>(&s);
  check(st != nullptr, "stub decoder was handed a state it did not create");
  return *st;
}

void stub_consume(StubState& s, int64_t tok, const StubConfig& cfg) {
  if (tok == Vocab::kBeginOfSpeech) {
    s.in_speech = true;
    s.term_seen = false;
    s.bg_seen = false;
    s.utt_rows = 0;
  } else if (tok == Vocab::kEndOfSpeech) {
    s.in_speech = false;
  } else if (tok == Vocab::kAssistant) {
    s.generating = true;
    ++s.assistant_count;
    s.resp_off = 0;
  } else if (tok == Vocab::kEos) {
    s.generating = false;
  } else if (tok < 256) {
    if (s.in_speech) {
      if (s.utt_rows == 0 && tok == cfg.bg_marker) s.bg_seen = true;
      if (tok == cfg.terminator) s.term_seen = true;
      ++s.utt_rows;
    } else if (s.generating) {
      ++s.resp_off;
    }
  }
  ++s.pos;
}

}  // namespace

Tensor StubDecoder::logits_after(const StubState& s, int64_t last_token) const {
  int64_t target = Vocab::kEos;
  if (last_token == Vocab::kEndOfSpeech) {
    if (s.bg_seen) {
      target = Vocab::kIgnore;
    } else if (s.term_seen) {
      target = Vocab::kResponse;
    } else {
      target = Vocab::kIncomplete;
    }
  } else if (s.generating && s.assistant_count >= 1) {
    const std::string& r =
        cfg_.responses[static_cast<size_t>((s.assistant_count - 1) %
                                           static_cast<int64_t>(cfg_.responses.size()))];
    if (s.resp_off < static_cast<int64_t>(r.size())) {
      target = static_cast<unsigned char>(r[static_cast<size_t>(s.resp_off)]);
    }
  }
  Tensor logits = Tensor::zeros({Vocab::kSize}, Dtype::F32);
  logits.set(target, 1.0);
  return logits;
}

Tensor StubDecoder::feed(DecoderState& s, std::span<const int64_t> tokens) const {
  check(!tokens.empty(), "feed: no tokens");
  StubState& st = as_stub(s);
  for (int64_t tok : tokens) {
    check(tok >= 0 && tok < Vocab::kSize, "feed: token id out of range");
    stub_consume(st, tok, cfg_);
  }
  return logits_after(st, tokens.back());
}

Tensor StubDecoder::feed_speech(DecoderState&, const Tensor&) const {
  throw std::runtime_error("stub decoder is token-only; use mock_tokens slices");
}

Tensor StubDecoder::encode_slice(const Tensor&) const {
  throw std::runtime_error("stub decoder is token-only; use mock_tokens slices");
}

// ============================================================================
// Bundled text assets
// ============================================================================

std::string data_dir() {
  if (const char* env = std::getenv("DSSM_DATA_DIR"); env != nullptr && *env != '\0') {
    return env;
  }
#ifdef DSSM_DATA_DIR
  return DSSM_DATA_DIR;
#else
  return "data/prompts";
#endif
}

std::vector<std::string> read_text_lines(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open text file " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

namespace {

const std::vector<std::string>& cached_lines(const char* file, size_t expected) {
  static std::map<std::string, std::vector<std::string>> cache;
  auto it = cache.find(file);
  if (it == cache.end()) {
    std::vector<std::string> lines = read_text_lines(data_dir() + "/" + file);
    check(lines.size() == expected,
          std::string(file) + ": expected " + std::to_string(expected) + " lines, found " +
              std::to_string(lines.size()));
    it = cache.emplace(file, std::move(lines)).first;
  }
  return it->second;
}

}  // namespace

const std::vector<std::string>& asr_prompts() { return cached_lines("asr_prompts.txt", 6); }
const std::vector<std::string>& qa_prompts() { return cached_lines("qa_prompts.txt", 7); }
const std::vector<std::string>& incomplete_labels() {
  return cached_lines("incomplete_labels.txt", 6);
}
const std::vector<std::string>& ignored_responses() {
  return cached_lines("ignored_responses.txt", 10);
}

// ============================================================================
// Synthetic state-discrimination task
// ============================================================================

SyntheticTaskSpec SyntheticTaskSpec::defaults() {
  SyntheticTaskSpec s;
  for (char c = 'a'; c <= 'z'; ++c) s.words.emplace_back(1, c);
  return s;
}

void SyntheticTaskSpec::validate() const {
  check(!words.empty(), "synthetic task: empty word vocabulary");
  check(!terminator.empty() && !bg_marker.empty(),
        "synthetic task: terminator and background marker must be non-empty");
  for (const auto& w : words) {
    check(!w.empty(), "synthetic task: empty word");
    check(w.find(terminator) == std::string::npos && w.find(bg_marker) == std::string::npos,
          "synthetic task: word '" + w + "' collides with a marker");
  }
  check(min_words >= 2, "synthetic task: min_words must be at least 2 (truncation needs room)");
  check(max_words >= min_words, "synthetic task: max_words below min_words");
  check(n >= 1, "synthetic task: need at least one sample");
  check(ratio_response >= 1 && ratio_incomplete >= 0 && ratio_ignore >= 0,
        "synthetic task: bad class ratio");
  check(max_response_len >= 4, "synthetic task: max_response_len too small");
}

namespace {

/** Clip to a byte budget without splitting a UTF-8 sequence. */
std::string clip_utf8(const std::string& s, int64_t max_bytes) {
  if (static_cast<int64_t>(s.size()) <= max_bytes) return s;
  size_t len = static_cast<size_t>(max_bytes);
  while (len > 0 && (static_cast<unsigned char>(s[len]) & 0xC0) == 0x80) --len;
  return s.substr(0, len);
}

const std::vector<std::string>& toy_answers() {
  static const std::vector<std::string> a = {"ok.", "sure.", "noted.", "done."};
  return a;
}

}  // namespace

std::vector<SyntheticSample> gen_synthetic_dataset(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::vector<StateToken> pattern;
  for (int i = 0; i < spec.ratio_response; ++i) pattern.push_back(StateToken::Response);
  for (int i = 0; i < spec.ratio_incomplete; ++i) pattern.push_back(StateToken::Incomplete);
  for (int i = 0; i < spec.ratio_ignore; ++i) pattern.push_back(StateToken::Ignore);
  check(!pattern.empty(), "synthetic task: class ratio sums to zero");

  Rng rng(spec.seed);
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<size_t>(spec.n));
  int64_t c_re = 0, c_ic = 0, c_ig = 0;
  for (int64_t i = 0; i < spec.n; ++i) {
    const StateToken label = pattern[static_cast<size_t>(i) % pattern.size()];
    const int64_t n_words = rng.uniform_int(spec.min_words, spec.max_words);
    std::vector<std::string> picked;
    picked.reserve(static_cast<size_t>(n_words));
    for (int64_t k = 0; k < n_words; ++k) {
      picked.push_back(
          spec.words[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(spec.words.size()) - 1))]);
    }
    auto join = [](std::span<const std::string> ws) {
      std::string s;
      for (size_t k = 0; k < ws.size(); ++k) {
        if (k > 0) s += ' ';
        s += ws[k];
      }
      return s;
    };

    SyntheticSample sample;
    sample.label = label;
    switch (label) {
      case StateToken::Response:
        sample.utterance = join(picked) + spec.terminator;
        sample.response = clip_utf8(
            toy_answers()[static_cast<size_t>(c_re++) % toy_answers().size()],
            spec.max_response_len);
        break;
      case StateToken::Incomplete: {
        const int64_t keep = rng.uniform_int(1, n_words - 1);
        sample.utterance = join(std::span(picked.data(), static_cast<size_t>(keep)));
        sample.response = clip_utf8(
            incomplete_labels()[static_cast<size_t>(c_ic++) % incomplete_labels().size()],
            spec.max_response_len);
        break;
      }
      case StateToken::Ignore:
        sample.utterance = spec.bg_marker + join(picked) + spec.terminator;
        sample.response = clip_utf8(
            ignored_responses()[static_cast<size_t>(c_ig++) % ignored_responses().size()],
            spec.max_response_len);
        break;
    }
    out.push_back(std::move(sample));
  }
  return out;
}

void write_dataset_jsonl(const std::string& path, std::span<const SyntheticSample> samples) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "write_dataset_jsonl: cannot open " + path);
  for (const auto& s : samples) {
    nlohmann::json j = {{"utterance", s.utterance},
                        {"label", state_token_name(s.label)},
                        {"response", s.response}};
    out << j.dump() << "\n";
  }
  check(out.good(), "write_dataset_jsonl: write failed for " + path);
}

std::vector<SyntheticSample> read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "read_dataset_jsonl: cannot open " + path);
  std::vector<SyntheticSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SyntheticSample s;
    s.utterance = j.at("utterance").get<std::string>();
    const std::string label = j.at("label").get<std::string>();
    if (label == "response") {
      s.label = StateToken::Response;
    } else if (label == "incomplete") {
      s.label = StateToken::Incomplete;
    } else if (label == "ignore") {
      s.label = StateToken::Ignore;
    } else {
      throw std::runtime_error("read_dataset_jsonl: unknown label '" + label + "'");
    }
    s.response = j.at("response").get<std::string>();
    out.push_back(std::move(s));
  }
  return out;
}

TrainingSequence build_training_sequence(const SyntheticSample& sample,
                                         const std::string& sentence) {
  static const Vocab vocab;
  TrainingSequence seq;
  seq.tokens.push_back(Vocab::kUser);
  for (int64_t t : vocab.tokenize(sentence)) seq.tokens.push_back(t);
  seq.tokens.push_back(Vocab::kBeginOfSpeech);
  for (int64_t t : vocab.tokenize(sample.utterance)) seq.tokens.push_back(t);
  seq.tokens.push_back(Vocab::kEndOfSpeech);
  seq.state_pos = static_cast<int64_t>(seq.tokens.size());
  seq.state_target = state_token_id(sample.label);
  seq.tokens.push_back(seq.state_target);
  seq.tokens.push_back(Vocab::kEndOfUser);
  seq.tokens.push_back(Vocab::kAssistant);
  seq.response_start = static_cast<int64_t>(seq.tokens.size());
  for (int64_t t : vocab.tokenize(sample.response)) {
    seq.tokens.push_back(t);
    seq.response_targets.push_back(t);
  }
  seq.tokens.push_back(Vocab::kEos);
  seq.response_targets.push_back(Vocab::kEos);
  return seq;
}

// ============================================================================
// Toy training
// ============================================================================

Metrics metrics_from_counts(int64_t tp, int64_t fp, int64_t fn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

StateToken predict_state(const ModelWeights& model, const SyntheticSample& sample,
                         const std::string& sentence) {
  static const Vocab vocab;
  std::vector<int64_t> toks;
  toks.push_back(Vocab::kUser);
  for (int64_t t : vocab.tokenize(sentence)) toks.push_back(t);
  toks.push_back(Vocab::kBeginOfSpeech);
  for (int64_t t : vocab.tokenize(sample.utterance)) toks.push_back(t);
  toks.push_back(Vocab::kEndOfSpeech);

  ModelState st = ModelState::zeros(model.lm_cfg, model.lm.embedding.dtype());
  Tensor rows = embed_tokens(model.lm, toks);
  Tensor logits = prefill(st, rows, model.lm);
  return state_token_from_id(select_next(logits, Vocab::state_token_ids()));
}

Metrics evaluate_state_discrimination(const ModelWeights& model,
                                      std::span<const SyntheticSample> samples) {
  int64_t tp = 0, fp = 0, fn = 0;
  for (const auto& s : samples) {
    if (s.label == StateToken::Incomplete) continue;  // binary task: complete vs background
    const StateToken pred = predict_state(model, s);
    if (s.label == StateToken::Response) {
      if (pred == StateToken::Response) {
        ++tp;
      } else {
        ++fn;
      }
    } else if (pred == StateToken::Response) {
      ++fp;
    }
  }
  return metrics_from_counts(tp, fp, fn);
}

ToyTrainResult train_toy_state_discrimination(const ToyTrainConfig& cfg) {
  cfg.lm.validate();
  check(cfg.lm.n_layers <= 4 && cfg.lm.d_model <= 128,
        "toy training expects a tiny model (<= 4 layers, d_model <= 128)");
  check(cfg.n_train >= 1 && cfg.n_eval >= 1 && cfg.epochs >= 1,
        "toy training: empty train/eval split");

  SyntheticTaskSpec spec = SyntheticTaskSpec::defaults();
  spec.n = cfg.n_train + cfg.n_eval;
  spec.seed = cfg.seed;
  spec.max_response_len = cfg.max_response_len;
  const std::vector<SyntheticSample> samples = gen_synthetic_dataset(spec);

  ToyTrainResult out;
  out.model = init_lm_only(cfg.lm, cfg.seed + 1, Dtype::F32);
  ParamMap params = out.model.named_params();
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam adam(params, acfg);

  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int64_t i = 0; i < cfg.n_train; ++i) {
      const TrainingSequence seq = build_training_sequence(samples[static_cast<size_t>(i)]);
      GradTape tape;
      for (auto& [name, p] : params) tape.watch(*p);
      // the final token's output is never read, so it is not fed
      std::span<const int64_t> inputs(seq.tokens.data(), seq.tokens.size() - 1);
      Tensor rows = embed_tokens(out.model.lm, inputs, &tape);
      Tensor hidden = lm_hidden_seq(rows, out.model.lm_cfg, out.model.lm, &tape);
      LossBreakdown lb =
          duplex_loss_from_hidden(hidden, out.model.lm, seq.state_pos, seq.state_target,
                                  seq.response_targets, seq.response_start, &tape);
      check(lb.total.all_finite(), "toy training: non-finite loss");
      out.step_losses.push_back(lb.total.item());
      tape.backward(lb.total);
      std::vector<Tensor> grads = collect_grads(tape, params);
      apply_freeze(params, grads, cfg.stage);
      adam.step(grads);
      ++step;
      if (cfg.log_every > 0 && step % cfg.log_every == 0) {
        std::cout << "step " << step << "  loss " << std::fixed << std::setprecision(4)
                  << lb.total.item() << "\n";
      }
    }
  }

  const size_t w = std::min<size_t>(10, out.step_losses.size());
  double first = 0, last = 0;
  for (size_t i = 0; i < w; ++i) {
    first += out.step_losses[i];
    last += out.step_losses[out.step_losses.size() - 1 - i];
  }
  out.first_window_loss = first / static_cast<double>(w);
  out.last_window_loss = last / static_cast<double>(w);

  std::vector<SyntheticSample> eval_set(samples.begin() + cfg.n_train, samples.end());
  out.eval = evaluate_state_discrimination(out.model, eval_set);
  return out;
}

// ============================================================================
// Feature-mode toy run (speech path end to end at tiny scale)
// ============================================================================

uint64_t tensor_checksum(const Tensor& t) {
  std::vector<std::byte> bytes;
  for (int64_t d : t.shape()) {
    const auto* p = reinterpret_cast<const std::byte*>(&d);
    bytes.insert(bytes.end(), p, p + sizeof(d));
  }
  const std::string dt = dtype_name(t.dtype());
  for (char c : dt) bytes.push_back(static_cast<std::byte>(c));
  t.append_bytes(bytes);
  return fnv1a(bytes.data(), bytes.size());
}

ToyFeatureResult train_toy_feature_alignment(int64_t steps, uint64_t seed) {
  check(steps >= 1, "feature alignment: need at least one step");
  LmConfig lmc;
  lmc.n_layers = 1;
  lmc.d_model = 32;
  lmc.d_state = 8;
  EncoderConfig ec;
  ec.n_layers = 1;
  ec.d_model = 32;
  ec.d_state = 8;
  ec.d_feat = 16;
  ec.frontend_c1 = 8;
  ec.frontend_c2 = 8;
  ec.conv_kernel = 7;
  ec.ffn_mult = 2;
  ToyFeatureResult out;
  out.model = init_full(lmc, ec, /*adapter_k=*/5, /*adapter_hidden=*/0, seed, Dtype::F32);
  ModelWeights& model = out.model;
  for (const auto& [name, p] : model.named_params_const()) {
    out.initial_checksums[name] = tensor_checksum(*p);
  }

  SyntheticTaskSpec spec = SyntheticTaskSpec::defaults();
  spec.n = 16;
  spec.seed = seed;
  spec.max_response_len = 6;
  const std::vector<SyntheticSample> samples = gen_synthetic_dataset(spec);

  // Fixed per-byte "acoustics": one random feature row per byte value, held
  // for four frames, so each utterance maps to a deterministic feature clip.
  Rng feat_rng(seed ^ 0x9e3779b97f4a7c15ull);
  Tensor byte_rows = randn({256, ec.d_feat}, 1.0, feat_rng, Dtype::F32);
  auto features_of = [&](const std::string& text) {
    const int64_t t_f = 4 * static_cast<int64_t>(text.size());
    Tensor f({t_f, ec.d_feat}, Dtype::F32);
    for (int64_t i = 0; i < t_f; ++i) {
      const auto b = static_cast<unsigned char>(text[static_cast<size_t>(i / 4)]);
      for (int64_t c = 0; c < ec.d_feat; ++c) f.set2(i, c, byte_rows.get2(b, c));
    }
    return f;
  };

  ParamMap params = model.named_params();
  AdamConfig acfg;
  acfg.lr = 3e-3;
  Adam adam(params, acfg);

  for (int64_t s = 0; s < steps; ++s) {
    const SyntheticSample& sample = samples[static_cast<size_t>(s) % samples.size()];
    GradTape tape;
    for (auto& [name, p] : params) tape.watch(*p);

    Tensor feats = features_of(sample.utterance);
    Tensor h = encoder_forward(feats, ec, *model.encoder, &tape);
    Tensor speech = adapter_forward(h, *model.adapter, &tape).s;
    const int64_t t_s = speech.rows();

    static const Vocab vocab;
    const std::vector<int64_t> pre = {Vocab::kUser, Vocab::kBeginOfSpeech};
    std::vector<int64_t> post = {Vocab::kEndOfSpeech, state_token_id(sample.label),
                                 Vocab::kEndOfUser, Vocab::kAssistant};
    std::vector<int64_t> targets;
    for (int64_t t : vocab.tokenize(sample.response)) {
      post.push_back(t);
      targets.push_back(t);
    }
    targets.push_back(Vocab::kEos);  // predicted but not fed

    std::vector<Tensor> parts;
    parts.push_back(embed_tokens(model.lm, pre, &tape));
    parts.push_back(speech);
    parts.push_back(embed_tokens(model.lm, post, &tape));
    Tensor rows = concat_rows(parts, &tape);
    Tensor hidden = lm_hidden_seq(rows, lmc, model.lm, &tape);
    const int64_t j = 2 + t_s + 1;           // the state token's row
    const int64_t response_start = j + 3;    // first reply byte's row
    LossBreakdown lb = duplex_loss_from_hidden(hidden, model.lm, j, state_token_id(sample.label),
                                               targets, response_start, &tape);
    check(lb.total.all_finite(), "feature alignment: non-finite loss");
    out.step_losses.push_back(lb.total.item());
    tape.backward(lb.total);
    std::vector<Tensor> grads = collect_grads(tape, params);
    apply_freeze(params, grads, /*stage=*/1);
    adam.step(grads);
  }
  return out;
}

// ============================================================================
// Scenario library
// ============================================================================

ScenarioEvent token_slice(int64_t t_ms, const std::string& text, std::string note) {
  static const Vocab vocab;
  ScenarioEvent ev;
  ev.t_ms = t_ms;
  ev.payload.mode = SliceMode::MockTokens;
  ev.payload.tokens = vocab.tokenize(text);
  ev.note = std::move(note);
  return ev;
}

namespace {

std::string rows_of(const std::string& text) {
  return "rows=" + std::to_string(text.size());
}

std::vector<LibraryScenario> build_library() {
  std::vector<LibraryScenario> v;

  {
    LibraryScenario sc;
    sc.name = "interruption";
    sc.summary = "a two-part follow-up cuts off the reply to the first query";
    const std::string q1 = "what is the answer.";
    const std::string b1 = "wait";
    const std::string b2 = "stop talking now.";
    sc.stub.responses = {
        "let me think about that for a long moment while I explain everything.",
        "okay, stopping now."};
    sc.scenario.events = {token_slice(0, q1, "initial query"),
                          token_slice(600, b1, "barge-in begins"),
                          token_slice(1200, b2, "barge-in completes")};
    sc.skeleton = {
        {TraceKind::SliceConsumed, 0, rows_of(q1)},
        {TraceKind::StateToken, 0, "response"},
        {TraceKind::ResponseStart, 0, ""},
        {TraceKind::BranchCreated, 1, "from=0"},
        {TraceKind::SliceConsumed, 1, rows_of(b1)},
        {TraceKind::StateToken, 1, "incomplete"},
        {TraceKind::Rollback, 1, "incomplete"},
        {TraceKind::SliceConsumed, 1, rows_of(b2)},
        {TraceKind::StateToken, 1, "response"},
        {TraceKind::ResponseEnd, 0, "interrupted"},
        {TraceKind::BranchPromoted, 1, "replaces=0"},
        {TraceKind::ResponseStart, 1, ""},
        {TraceKind::ResponseEnd, 1, "eos"},
    };
    v.push_back(std::move(sc));
  }

  {
    LibraryScenario sc;
    sc.name = "non-awakening";
    sc.summary = "background speech during a reply is heard, classified, and dropped";
    const std::string q1 = "tell me a story.";
    const std::string bg = "#chatter in the background.";
    sc.stub.responses = {"here is a rather long story that keeps going until it is done."};
    sc.scenario.events = {token_slice(0, q1, "initial query"),
                          token_slice(600, bg, "background speech")};
    sc.skeleton = {
        {TraceKind::SliceConsumed, 0, rows_of(q1)},
        {TraceKind::StateToken, 0, "response"},
        {TraceKind::ResponseStart, 0, ""},
        {TraceKind::BranchCreated, 1, "from=0"},
        {TraceKind::SliceConsumed, 1, rows_of(bg)},
        {TraceKind::StateToken, 1, "ignore"},
        {TraceKind::BranchDiscarded, 1, "ignore"},
        {TraceKind::ResponseEnd, 0, "eos"},
    };
    v.push_back(std::move(sc));
  }

  {
    LibraryScenario sc;
    sc.name = "incomplete-continuation";
    sc.summary = "one query arrives across three slices; the probe keeps rolling back";
    const std::string s1 = "tell me";
    const std::string s2 = " about the";
    const std::string s3 = " weather please.";
    sc.stub.responses = {"sunny today."};
    sc.scenario.events = {token_slice(0, s1, "query begins"),
                          token_slice(3000, s2, "query continues"),
                          token_slice(6000, s3, "query completes")};
    sc.skeleton = {
        {TraceKind::SliceConsumed, 0, rows_of(s1)},
        {TraceKind::StateToken, 0, "incomplete"},
        {TraceKind::Rollback, 0, "incomplete"},
        {TraceKind::SliceConsumed, 0, rows_of(s2)},
        {TraceKind::StateToken, 0, "incomplete"},
        {TraceKind::Rollback, 0, "incomplete"},
        {TraceKind::SliceConsumed, 0, rows_of(s3)},
        {TraceKind::StateToken, 0, "response"},
        {TraceKind::ResponseStart, 0, ""},
        {TraceKind::ResponseEnd, 0, "eos"},
    };
    v.push_back(std::move(sc));
  }

  {
    LibraryScenario sc;
    sc.name = "idle-query";
    sc.summary = "a single complete query answered from idle";
    const std::string q1 = "hi there.";
    sc.stub.responses = {"hello!"};
    sc.scenario.events = {token_slice(0, q1, "query")};
    sc.skeleton = {
        {TraceKind::SliceConsumed, 0, rows_of(q1)},
        {TraceKind::StateToken, 0, "response"},
        {TraceKind::ResponseStart, 0, ""},
        {TraceKind::ResponseEnd, 0, "eos"},
    };
    v.push_back(std::move(sc));
  }

  return v;
}

}  // namespace

const std::vector<LibraryScenario>& scenario_library() {
  static const std::vector<LibraryScenario> lib = build_library();
  return lib;
}

const LibraryScenario& library_scenario(const std::string& name) {
  for (const auto& sc : scenario_library()) {
    if (sc.name == name) return sc;
  }
  throw std::runtime_error("unknown scenario '" + name + "'");
}

std::vector<SkeletonItem> skeleton_of(const std::vector<TraceEvent>& trace) {
  std::vector<SkeletonItem> out;
  for (const auto& ev : trace) {
    if (ev.kind == TraceKind::SessionStart || ev.kind == TraceKind::SessionEnd ||
        ev.kind == TraceKind::TextToken) {
      continue;
    }
    out.push_back(SkeletonItem{ev.kind, ev.branch, ev.detail});
  }
  return out;
}

void check_skeleton(const std::vector<TraceEvent>& trace,
                    const std::vector<SkeletonItem>& expected) {
  const std::vector<SkeletonItem> got = skeleton_of(trace);
  auto show = [](const SkeletonItem& it) {
    std::string s = trace_kind_name(it.kind);
    s += " branch=" + std::to_string(it.branch);
    if (!it.detail.empty()) s += " detail=" + it.detail;
    return s;
  };
  const size_t n = std::min(got.size(), expected.size());
  for (size_t i = 0; i < n; ++i) {
    if (got[i].kind != expected[i].kind || got[i].branch != expected[i].branch ||
        got[i].detail != expected[i].detail) {
      throw std::runtime_error("trace diverges from the expected skeleton at step " +
                               std::to_string(i) + ": expected [" + show(expected[i]) +
                               "], got [" + show(got[i]) + "]");
    }
  }
  if (got.size() != expected.size()) {
    throw std::runtime_error("trace skeleton has " + std::to_string(got.size()) +
                             " protocol events where " + std::to_string(expected.size()) +
                             " were expected");
  }
}

// ============================================================================
// Memory / latency benchmark
// ============================================================================

size_t peak_rss_bytes() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
#ifdef __APPLE__
  return static_cast<size_t>(ru.ru_maxrss);
#else
  return static_cast<size_t>(ru.ru_maxrss) * 1024;
#endif
}

std::vector<BenchRow> bench_memory_latency(const ModelWeights& model,
                                           std::span<const int64_t> contexts,
                                           uint64_t seed) {
  check(!contexts.empty(), "bench: no context lengths");
  for (size_t i = 1; i < contexts.size(); ++i) {
    check(contexts[i] > contexts[i - 1], "bench: context lengths must be strictly increasing");
  }
  using Clock = std::chrono::steady_clock;
  const Dtype dt = model.lm.embedding.dtype();
  Rng rng(seed);
  double sink = 0;

  std::vector<BenchRow> rows;
  for (int64_t context : contexts) {
    ModelState st = ModelState::zeros(model.lm_cfg, dt);
    for (int64_t i = 0; i < context; ++i) {
      decode_step(st, rng.uniform_int(0, 255), model.lm);
    }
    for (int i = 0; i < 16; ++i) decode_step(st, 'a', model.lm);  // warmup

    const auto t0 = Clock::now();
    for (int i = 0; i < 64; ++i) decode_step(st, 'a', model.lm);
    const auto t1 = Clock::now();
    const double tok_us =
        std::chrono::duration<double, std::micro>(t1 - t0).count() / 64.0;

    std::vector<double> dup;
    dup.reserve(33);
    for (int i = 0; i < 33; ++i) {
      const auto d0 = Clock::now();
      ModelState copy = snapshot(st);
      const auto d1 = Clock::now();
      sink += static_cast<double>(copy.position);
      dup.push_back(std::chrono::duration<double, std::micro>(d1 - d0).count());
    }
    std::sort(dup.begin(), dup.end());
    BenchRow row;
    row.context = context;
    row.state_bytes = st.byte_size();
    row.peak_bytes = peak_rss_bytes();
    row.tok_us = tok_us;
    row.dup_us = dup[dup.size() / 2];
    rows.push_back(row);
  }
  if (sink == 12345.6789) std::cerr << "";  // keep the duplication work observable
  return rows;
}

std::string bench_csv(std::span<const BenchRow> rows) {
  std::ostringstream o;
  o << "context,state_bytes,peak_bytes,tok_us,dup_us\n";
  for (const auto& r : rows) {
    o << r.context << ',' << r.state_bytes << ',' << r.peak_bytes << ','
      << std::fixed << std::setprecision(3) << r.tok_us << ',' << r.dup_us << "\n";
  }
  return o.str();
}

}  // namespace dssm

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

// ============================================================================
// Duplex runtime: trace/scenario serialization, structural trace validation,
// the stub decoder's scripted behaviour, session protocol moves (probe,
// rollback, branch switch, budget), and byte-exact golden comparisons.
// ============================================================================

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dssm/duplex.hpp"
#include "dssm/harness.hpp"

using namespace dssm;

namespace {

std::string temp_path(const std::string& stem) {
  static int counter = 0;
  return (std::filesystem::temp_directory_path() /
          (stem + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++)))
      .string();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string golden_dir() {
#ifdef DSSM_GOLDEN_DIR
  return DSSM_GOLDEN_DIR;
#else
  return "tests/golden";
#endif
}

TraceEvent ev(int64_t t, int64_t seq, TraceKind k, int64_t branch,
              std::string detail = "") {
  return TraceEvent{t, seq, k, branch, std::move(detail)};
}

}  // namespace

// ============================================================================
// Trace events
// ============================================================================

TEST_CASE("trace kind names are frozen") {
  // The .trace.jsonl files on disk spell these out; renaming any of them
  // would orphan every recorded trace.
  CHECK(std::string(trace_kind_name(TraceKind::SessionStart)) == "session-start");
  CHECK(std::string(trace_kind_name(TraceKind::SliceConsumed)) == "slice-consumed");
  CHECK(std::string(trace_kind_name(TraceKind::StateToken)) == "state-token");
  CHECK(std::string(trace_kind_name(TraceKind::BranchCreated)) == "branch-created");
  CHECK(std::string(trace_kind_name(TraceKind::BranchPromoted)) == "branch-promoted");
  CHECK(std::string(trace_kind_name(TraceKind::BranchDiscarded)) == "branch-discarded");
  CHECK(std::string(trace_kind_name(TraceKind::Rollback)) == "rollback");
  CHECK(std::string(trace_kind_name(TraceKind::TextToken)) == "text-token");
  CHECK(std::string(trace_kind_name(TraceKind::ResponseStart)) == "response-start");
  CHECK(std::string(trace_kind_name(TraceKind::ResponseEnd)) == "response-end");
  CHECK(std::string(trace_kind_name(TraceKind::SessionEnd)) == "session-end");
  CHECK(trace_kind_from_name("rollback") == TraceKind::Rollback);
  CHECK(trace_kind_from_name("branch-promoted") == TraceKind::BranchPromoted);
  CHECK_THROWS(trace_kind_from_name("restart"));
}

TEST_CASE("every trace kind survives the json round trip") {
  const std::vector<TraceKind> kinds = {
      TraceKind::SessionStart,  TraceKind::SliceConsumed,  TraceKind::StateToken,
      TraceKind::BranchCreated, TraceKind::BranchPromoted, TraceKind::BranchDiscarded,
      TraceKind::Rollback,      TraceKind::TextToken,      TraceKind::ResponseStart,
      TraceKind::ResponseEnd,   TraceKind::SessionEnd};
  int64_t t = 0;
  for (TraceKind k : kinds) {
    TraceEvent e = ev(t, t % 3, k, t % 2, "detail-" + std::to_string(t));
    TraceEvent back = TraceEvent::from_json(e.to_json());
    CHECK(back.t_ms == e.t_ms);
    CHECK(back.seq == e.seq);
    CHECK(back.kind == e.kind);
    CHECK(back.branch == e.branch);
    CHECK(back.detail == e.detail);
    ++t;
  }
  // Detail strings with quotes and non-ASCII bytes must pass through intact.
  TraceEvent tricky = ev(5, 0, TraceKind::TextToken, 0, "\"quoted\" \xc3\xa9 \\ back");
  CHECK(TraceEvent::from_json(tricky.to_json()).detail == tricky.detail);
  CHECK_THROWS(TraceEvent::from_json("not json at all"));
  CHECK_THROWS(TraceEvent::from_json(R"({"t_ms":0,"seq":0,"kind":"warp","branch":0,"detail":""})"));
}

TEST_CASE("trace files round trip line by line") {
  std::vector<TraceEvent> events = {
      ev(0, 0, TraceKind::SessionStart, 0),
      ev(200, 0, TraceKind::ResponseStart, 0),
      ev(200, 1, TraceKind::TextToken, 0, "h"),
      ev(400, 0, TraceKind::ResponseEnd, 0, "eos"),
      ev(400, 1, TraceKind::SessionEnd, 0),
  };
  const std::string path = temp_path("trace-roundtrip");
  write_trace(path, events);
  std::vector<TraceEvent> back = read_trace(path);
  REQUIRE(back.size() == events.size());
  for (size_t i = 0; i < events.size(); ++i) {
    CHECK(back[i].t_ms == events[i].t_ms);
    CHECK(back[i].seq == events[i].seq);
    CHECK(back[i].kind == events[i].kind);
    CHECK(back[i].branch == events[i].branch);
    CHECK(back[i].detail == events[i].detail);
  }
  std::filesystem::remove(path);
  CHECK_THROWS(read_trace(temp_path("missing-trace")));
}

// ============================================================================
// Trace validation
// ============================================================================

TEST_CASE("validator accepts a well-formed branching trace") {
  const std::vector<TraceEvent> good = {
      ev(0, 0, TraceKind::SessionStart, 0),
      ev(0, 1, TraceKind::SliceConsumed, 0, "rows=3"),
      ev(0, 2, TraceKind::StateToken, 0, "incomplete"),
      ev(0, 3, TraceKind::Rollback, 0, "incomplete"),
      ev(200, 0, TraceKind::ResponseStart, 0),
      ev(200, 1, TraceKind::TextToken, 0, "o"),
      ev(400, 0, TraceKind::BranchCreated, 1),
      ev(400, 1, TraceKind::SliceConsumed, 1, "rows=4"),
      ev(400, 2, TraceKind::StateToken, 1, "response"),
      ev(400, 3, TraceKind::ResponseEnd, 0, "interrupted"),
      ev(400, 4, TraceKind::BranchPromoted, 1, "replaces=0"),
      ev(400, 5, TraceKind::ResponseStart, 1),
      ev(400, 6, TraceKind::TextToken, 1, "k"),
      ev(600, 0, TraceKind::ResponseEnd, 1, "eos"),
      ev(600, 1, TraceKind::SessionEnd, 1),
  };
  CHECK_NOTHROW(validate_trace(good));
}

TEST_CASE("validator rejects each structural violation") {
  CHECK_THROWS(validate_trace({}));  // empty

  // Missing bookends.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::ResponseStart, 0)}));
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 1, TraceKind::ResponseStart, 0)}));

  // Time runs backwards.
  CHECK_THROWS(validate_trace({ev(200, 0, TraceKind::SessionStart, 0),
                               ev(100, 0, TraceKind::SessionEnd, 0)}));

  // Sequence numbers must restart at 0 per tick and stay consecutive.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 2, TraceKind::SessionEnd, 0)}));
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(200, 1, TraceKind::SessionEnd, 0)}));

  // A created branch must be promoted or discarded before the end.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 1, TraceKind::BranchCreated, 1),
                               ev(0, 2, TraceKind::SessionEnd, 0)}));

  // Promotion while main still has a response open.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 1, TraceKind::ResponseStart, 0),
                               ev(0, 2, TraceKind::BranchCreated, 1),
                               ev(0, 3, TraceKind::BranchPromoted, 1, "replaces=0"),
                               ev(0, 4, TraceKind::SessionEnd, 1)}));

  // Double close of the same aux branch.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 1, TraceKind::BranchCreated, 1),
                               ev(0, 2, TraceKind::BranchDiscarded, 1, "ignore"),
                               ev(0, 3, TraceKind::BranchDiscarded, 1, "ignore"),
                               ev(0, 4, TraceKind::SessionEnd, 0)}));

  // Response left open at session end.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 1, TraceKind::ResponseStart, 0),
                               ev(0, 2, TraceKind::SessionEnd, 0)}));

  // Text token outside any response.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 1, TraceKind::TextToken, 0, "x"),
                               ev(0, 2, TraceKind::SessionEnd, 0)}));

  // Unknown state-token detail.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 1, TraceKind::StateToken, 0, "maybe"),
                               ev(0, 2, TraceKind::SessionEnd, 0)}));

  // Events on a branch that was never created.
  CHECK_THROWS(validate_trace({ev(0, 0, TraceKind::SessionStart, 0),
                               ev(0, 1, TraceKind::SliceConsumed, 7, "rows=1"),
                               ev(0, 2, TraceKind::SessionEnd, 0)}));
}

// ============================================================================
// Base64
// ============================================================================

TEST_CASE("base64 matches the reference vectors") {
  auto enc = [](const std::string& s) {
    std::vector<std::byte> b(s.size());
    for (size_t i = 0; i < s.size(); ++i) b[i] = static_cast<std::byte>(s[i]);
    return base64_encode(b);
  };
  CHECK(enc("Man") == "TWFu");
  CHECK(enc("Ma") == "TWE=");
  CHECK(enc("M") == "TQ==");
  CHECK(enc("") == "");

  auto dec_str = [](const std::string& s) {
    std::vector<std::byte> b = base64_decode(s);
    std::string out(b.size(), '\0');
    for (size_t i = 0; i < b.size(); ++i) out[i] = static_cast<char>(b[i]);
    return out;
  };
  CHECK(dec_str("TWFu") == "Man");
  CHECK(dec_str("TWE=") == "Ma");
  CHECK(dec_str("TQ==") == "M");

  Rng rng(91);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t n = rng.uniform_int(0, 67);
    std::vector<std::byte> bytes(static_cast<size_t>(n));
    for (auto& b : bytes) b = static_cast<std::byte>(rng.uniform_int(0, 255));
    CHECK(base64_decode(base64_encode(bytes)) == bytes);
  }

  CHECK_THROWS(base64_decode("TW!u"));  // invalid alphabet
  CHECK_THROWS(base64_decode("TWFuA"));  // length not a multiple of 4
  CHECK_THROWS(base64_decode("T==="));   // malformed padding
}

// ============================================================================
// Scenario files
// ============================================================================

TEST_CASE("slice payloads round trip in all three modes") {
  Scenario s;
  s.events.push_back(token_slice(0, "hello.", "greeting"));

  ScenarioEvent emb;
  emb.t_ms = 400;
  emb.payload.mode = SliceMode::MockEmb;
  Rng rng(92);
  emb.payload.data = randn({3, 16}, 1.0, rng, Dtype::F32);
  s.events.push_back(emb);

  ScenarioEvent feat;
  feat.t_ms = 900;
  feat.payload.mode = SliceMode::Features;
  feat.payload.data = randn({8, 5}, 1.0, rng, Dtype::F32);
  feat.note = "raw capture";
  s.events.push_back(feat);

  const std::string path = temp_path("scenario-roundtrip");
  write_scenario(path, s);
  Scenario back = read_scenario(path);
  REQUIRE(back.events.size() == 3);

  CHECK(back.events[0].payload.mode == SliceMode::MockTokens);
  const std::string text = "hello.";
  REQUIRE(back.events[0].payload.tokens.size() == text.size());
  for (size_t i = 0; i < text.size(); ++i)
    CHECK(back.events[0].payload.tokens[i] == static_cast<int64_t>(text[i]));
  CHECK(back.events[0].note == "greeting");

  CHECK(back.events[1].payload.mode == SliceMode::MockEmb);
  CHECK(bitwise_equal(back.events[1].payload.data, emb.payload.data));

  CHECK(back.events[2].payload.mode == SliceMode::Features);
  CHECK(bitwise_equal(back.events[2].payload.data, feat.payload.data));
  CHECK(back.events[2].note == "raw capture");
  std::filesystem::remove(path);
}

TEST_CASE("scenario reading sorts by time and rejects bad payloads") {
  const std::string path = temp_path("scenario-unsorted");
  {
    std::ofstream out(path);
    out << token_slice(800, "b").to_json() << "\n";
    out << "\n";  // blank lines are skipped
    out << token_slice(200, "a").to_json() << "\n";
    out << token_slice(800, "c").to_json() << "\n";
  }
  Scenario s = read_scenario(path);
  REQUIRE(s.events.size() == 3);
  CHECK(s.events[0].t_ms == 200);
  CHECK(s.events[1].t_ms == 800);
  CHECK(s.events[2].t_ms == 800);
  // Stable sort: the two t=800 slices keep their file order ("b" then "c").
  CHECK(s.events[1].payload.tokens[0] == 'b');
  CHECK(s.events[2].payload.tokens[0] == 'c');
  std::filesystem::remove(path);

  auto write_line = [&](const std::string& line) {
    const std::string p = temp_path("scenario-bad");
    std::ofstream out(p);
    out << line << "\n";
    out.close();
    return p;
  };
  // Negative token id.
  std::string bad1 = write_line(
      R"({"t_ms":0,"kind":"slice","payload":{"mode":"mock_tokens","data":[104,-1]}})");
  CHECK_THROWS(read_scenario(bad1));
  std::filesystem::remove(bad1);
  // Unknown kind.
  std::string bad2 =
      write_line(R"({"t_ms":0,"kind":"pause","payload":{"mode":"mock_tokens","data":[1]}})");
  CHECK_THROWS(read_scenario(bad2));
  std::filesystem::remove(bad2);
  // Non-finite feature payload: inf encodes fine but must be rejected on read.
  {
    Tensor inf_data = Tensor::zeros({1, 2}, Dtype::F32);
    inf_data.set(0, std::numeric_limits<double>::infinity());
    std::vector<std::byte> bytes;
    inf_data.append_bytes(bytes);
    std::string line = std::string(R"({"t_ms":0,"kind":"slice","payload":{"mode":"features","data":")") +
                       base64_encode(bytes) + R"(","shape":[1,2]}})";
    std::string bad3 = write_line(line);
    CHECK_THROWS(read_scenario(bad3));
    std::filesystem::remove(bad3);
  }
  // Byte length disagreeing with the declared shape.
  {
    std::vector<std::byte> four(4, std::byte{0});
    std::string line = std::string(R"({"t_ms":0,"kind":"slice","payload":{"mode":"features","data":")") +
                       base64_encode(four) + R"(","shape":[1,2]}})";
    std::string bad4 = write_line(line);
    CHECK_THROWS(read_scenario(bad4));
    std::filesystem::remove(bad4);
  }
}

// ============================================================================
// Duplex config
// ============================================================================

TEST_CASE("token budget per tick and config validation") {
  DuplexConfig cfg;
  CHECK(cfg.tick_ms == 200);
  CHECK(cfg.tokens_per_sec == 20);
  CHECK(cfg.tokens_per_tick() == 4);  // 20 tok/s * 0.2 s

  DuplexConfig slow = cfg;
  slow.tokens_per_sec = 1;
  slow.tick_ms = 100;
  CHECK(slow.tokens_per_tick() == 1);  // floor would be 0; clamped to 1

  DuplexConfig back = DuplexConfig::from_json(cfg.to_json());
  CHECK(back.tick_ms == cfg.tick_ms);
  CHECK(back.slice_ms == cfg.slice_ms);
  CHECK(back.tokens_per_sec == cfg.tokens_per_sec);
  CHECK(back.max_response_tokens == cfg.max_response_tokens);

  DuplexConfig bad = cfg;
  bad.tick_ms = 0;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.tokens_per_sec = -5;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.max_response_tokens = 0;
  CHECK_THROWS(bad.validate());
}

// ============================================================================
// Stub decoder
// ============================================================================

TEST_CASE("stub classifies utterances by terminator and background marker") {
  StubConfig cfg;
  cfg.responses = {"yes."};
  StubDecoder dec(cfg);
  Vocab vocab;

  auto classify = [&](const std::string& utterance) {
    auto state = dec.make_state();
    std::vector<int64_t> tokens = {Vocab::kUser, Vocab::kBeginOfSpeech};
    for (char c : utterance) tokens.push_back(static_cast<unsigned char>(c));
    tokens.push_back(Vocab::kEndOfSpeech);
    Tensor logits = dec.feed(*state, tokens);
    return select_next(logits, Vocab::state_token_ids());
  };
  CHECK(classify("what time is it.") == Vocab::kResponse);       // terminated
  CHECK(classify("what time") == Vocab::kIncomplete);            // no terminator
  CHECK(classify("#tv noise in the back.") == Vocab::kIgnore);   // bg-marked
  CHECK(classify("#tv noise") == Vocab::kIgnore);                // bg wins either way

  // The terminator anywhere before end counts once seen.
  CHECK(classify("done. and then") == Vocab::kResponse);
}

TEST_CASE("stub replays its scripted responses and cycles per reply") {
  StubConfig cfg;
  cfg.responses = {"ab.", "z."};
  StubDecoder dec(cfg);
  auto state = dec.make_state();

  auto feed1 = [&](int64_t tok) { return dec.feed(*state, std::vector<int64_t>{tok}); };

  // First reply: after <|assistant|> the stub spells "ab." then eos.
  feed1(Vocab::kUser);
  feed1(Vocab::kEndOfUser);
  Tensor logits = feed1(Vocab::kAssistant);
  CHECK(select_next(logits) == 'a');
  logits = feed1('a');
  CHECK(select_next(logits) == 'b');
  logits = feed1('b');
  CHECK(select_next(logits) == '.');
  logits = feed1('.');
  CHECK(select_next(logits) == Vocab::kEos);
  feed1(Vocab::kEos);

  // Second reply cycles to "z.".
  logits = feed1(Vocab::kAssistant);
  CHECK(select_next(logits) == 'z');
  logits = feed1('z');
  CHECK(select_next(logits) == '.');

  // Third reply wraps around to "ab." again.
  feed1('.');
  feed1(Vocab::kEos);
  logits = feed1(Vocab::kAssistant);
  CHECK(select_next(logits) == 'a');
}

TEST_CASE("stub state clones are independent and serialize to fixed bytes") {
  StubDecoder dec;
  auto a = dec.make_state();
  dec.feed(*a, std::vector<int64_t>{Vocab::kUser, 'h', 'i'});
  auto b = a->clone();
  CHECK(a->checksum() == b->checksum());
  CHECK(a->serialize() == b->serialize());
  CHECK(a->byte_size() == 64);  // 8 registers, 8 bytes each
  CHECK(a->serialize().size() == 64);

  dec.feed(*b, std::vector<int64_t>{'!', '?'});
  CHECK(a->checksum() != b->checksum());
  CHECK(a->position() + 2 == b->position());

  // Token-only: the speech path must refuse loudly, not misbehave.
  CHECK_THROWS(dec.feed_speech(*a, Tensor::zeros({2, 4}, Dtype::F32)));
  CHECK_THROWS(dec.encode_slice(Tensor::zeros({8, 5}, Dtype::F32)));
  CHECK(!dec.has_speech_path());
  CHECK(dec.vocab_size() == Vocab::kSize);

  StubConfig bad;
  bad.responses = {};
  CHECK_THROWS(StubDecoder{bad});
  bad.responses = {"ok."};
  bad.terminator = Vocab::kUser;  // must be a plain byte
  CHECK_THROWS(StubDecoder{bad});
}

// ============================================================================
// Session protocol
// ============================================================================

TEST_CASE("a response that hits the budget cap is cut with reason budget") {
  StubConfig stub;
  stub.responses = {"this reply runs much longer than the cap allows."};
  StubDecoder dec(stub);
  DuplexConfig cfg;
  cfg.max_response_tokens = 6;
  Session session(dec, cfg);

  Scenario s;
  s.events.push_back(token_slice(0, "go."));
  const std::vector<TraceEvent>& trace = session.run_scenario(s);
  validate_trace(trace);

  bool saw_budget = false;
  int64_t text_tokens = 0;
  for (const auto& e : trace) {
    if (e.kind == TraceKind::TextToken) ++text_tokens;
    if (e.kind == TraceKind::ResponseEnd) {
      CHECK(e.detail == "budget");
      saw_budget = true;
    }
  }
  CHECK(saw_budget);
  CHECK(text_tokens == 6);  // exactly the cap, never one more
}

TEST_CASE("session misuse is rejected") {
  StubDecoder dec;
  DuplexConfig cfg;
  Session session(dec, cfg);
  CHECK_THROWS(session.tick(200));  // tick before start

  Session s2(dec, cfg);
  s2.start();
  CHECK_THROWS(s2.start());  // double start
  s2.enqueue(token_slice(400, "hi."));
  CHECK_THROWS(s2.enqueue(token_slice(100, "early.")));  // time went backwards
  s2.tick(400);
  CHECK_THROWS(s2.tick(200));  // clock must not rewind

  Session s3(dec, cfg);
  Scenario sc;
  sc.events.push_back(token_slice(0, "hi."));
  s3.run_scenario(sc);
  CHECK_THROWS(s3.run_scenario(sc));  // a session runs exactly one scenario
}

TEST_CASE("identical scenarios produce byte-identical traces") {
  const LibraryScenario& lib = library_scenario("interruption");
  std::string path_a = temp_path("trace-a");
  std::string path_b = temp_path("trace-b");
  {
    StubDecoder dec(lib.stub);
    Session session(dec, lib.duplex);
    write_trace(path_a, session.run_scenario(lib.scenario));
  }
  {
    StubDecoder dec(lib.stub);
    Session session(dec, lib.duplex);
    write_trace(path_b, session.run_scenario(lib.scenario));
  }
  CHECK(read_file(path_a) == read_file(path_b));
  std::filesystem::remove(path_a);
  std::filesystem::remove(path_b);
}

// ============================================================================
// Golden traces
// ============================================================================

TEST_CASE("library scenarios reproduce their recorded traces byte for byte") {
  // The files under the golden directory are the protocol's contract: any
  // byte-level drift in event content, ordering, tick timing, or JSON
  // formatting fails here.
  for (const LibraryScenario& lib : scenario_library()) {
    CAPTURE(lib.name);
    StubDecoder dec(lib.stub);
    Session session(dec, lib.duplex);
    const std::vector<TraceEvent>& trace = session.run_scenario(lib.scenario);
    validate_trace(trace);
    check_skeleton(trace, lib.skeleton);

    const std::string fresh = temp_path("golden-check");
    write_trace(fresh, trace);
    CHECK(read_file(fresh) ==
          read_file(golden_dir() + "/" + lib.name + ".trace.jsonl"));
    std::filesystem::remove(fresh);
  }
}

TEST_CASE("recorded scenario files equal the in-code library definitions") {
  for (const LibraryScenario& lib : scenario_library()) {
    CAPTURE(lib.name);
    Scenario disk = read_scenario(golden_dir() + "/" + lib.name + ".scenario.jsonl");
    REQUIRE(disk.events.size() == lib.scenario.events.size());
    for (size_t i = 0; i < disk.events.size(); ++i) {
      CHECK(disk.events[i].t_ms == lib.scenario.events[i].t_ms);
      CHECK(disk.events[i].payload.mode == lib.scenario.events[i].payload.mode);
      CHECK(disk.events[i].payload.tokens == lib.scenario.events[i].payload.tokens);
      CHECK(disk.events[i].note == lib.scenario.events[i].note);
    }
  }
}

// ============================================================================
// Real decoder end to end
// ============================================================================

TEST_CASE("an untrained real model still yields a valid deterministic trace") {
  LmConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 24;
  cfg.d_state = 4;
  ModelWeights weights = init_lm_only(cfg, /*seed=*/2024, Dtype::F32);
  RealDecoder dec(std::move(weights));
  CHECK(!dec.has_speech_path());
  CHECK(dec.vocab_size() == Vocab::kSize);

  DuplexConfig dcfg;
  dcfg.max_response_tokens = 12;  // untrained babble; keep the reply short

  Scenario s;
  s.events.push_back(token_slice(0, "hello there."));
  s.events.push_back(token_slice(3000, "a second utterance arrives later."));

  Session first(dec, dcfg);
  const std::vector<TraceEvent> trace_a = first.run_scenario(s);
  validate_trace(trace_a);

  Session second(dec, dcfg);
  const std::vector<TraceEvent> trace_b = second.run_scenario(s);
  REQUIRE(trace_a.size() == trace_b.size());
  for (size_t i = 0; i < trace_a.size(); ++i) {
    CHECK(trace_a[i].t_ms == trace_b[i].t_ms);
    CHECK(trace_a[i].seq == trace_b[i].seq);
    CHECK(trace_a[i].kind == trace_b[i].kind);
    CHECK(trace_a[i].branch == trace_b[i].branch);
    CHECK(trace_a[i].detail == trace_b[i].detail);
  }

  // The state fed through the Decoder interface matches the plain LM path.
  auto st = dec.make_state();
  const std::vector<int64_t> toks = {Vocab::kUser, 'h', 'i'};
  Tensor via_decoder = dec.feed(*st, toks);
  ModelState direct = ModelState::zeros(cfg, Dtype::F32);
  Tensor via_lm = decode_rows(direct, embed_tokens(dec.weights().lm, toks),
                              dec.weights().lm);
  CHECK(bitwise_equal(via_decoder, via_lm));
  CHECK(st->checksum() == direct.checksum());
}

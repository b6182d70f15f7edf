#include "dssm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload layout assumes a little-endian host");

namespace dssm {

// ============================================================================
// Container I/O
// ============================================================================

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  nlohmann::json header = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    check(t != nullptr, "save_checkpoint: null tensor for " + name);
    check(!header.contains(name), "save_checkpoint: duplicate tensor name " + name);
    header[name] = {{"dtype", dtype_name(t->dtype())},
                    {"shape", t->shape()},
                    {"offset", offset},
                    {"length", t->byte_size()}};
    offset += t->byte_size();
  }
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(out.good(), "save_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : tensors) {
    std::vector<std::byte> bytes;
    t->append_bytes(bytes);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  check(out.good(), "save_checkpoint: write failed for " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  check(in.gcount() == 8 && std::memcmp(magic, kCheckpointMagic, 8) == 0,
        "load_checkpoint: bad magic (not a checkpoint file)");
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  check(in.good() && header_len > 0 && header_len < (1ull << 31),
        "load_checkpoint: implausible header length");
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  check(in.good(), "load_checkpoint: truncated header");
  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: malformed header: ") + e.what());
  }
  check(header.is_object(), "load_checkpoint: header must be a JSON object");

  std::map<std::string, Tensor> out;
  for (const auto& [name, entry] : header.items()) {
    const Dtype dt = dtype_from_name(entry.at("dtype").get<std::string>());
    const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const uint64_t length = entry.at("length").get<uint64_t>();
    Tensor t(shape, dt);
    check(length == t.byte_size(), "load_checkpoint: length/shape mismatch for " + name);
    check(offset + length <= payload.size(),
          "load_checkpoint: payload range out of bounds for " + name);
    if (length > 0) {
      void* dst = dt == Dtype::F32 ? static_cast<void*>(t.ptr<float>())
                                   : static_cast<void*>(t.ptr<double>());
      std::memcpy(dst, payload.data() + offset, length);
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

// ============================================================================
// Named parameters
// ============================================================================

static void add_ssm(ParamMap& m, const std::string& p, SsmParams& s) {
  m.emplace_back(p + ".a_log", &s.a_log);
  m.emplace_back(p + ".delta_w", &s.delta_w);
  m.emplace_back(p + ".delta_b", &s.delta_b);
  m.emplace_back(p + ".b_w", &s.b_w);
  m.emplace_back(p + ".c_w", &s.c_w);
  m.emplace_back(p + ".d_skip", &s.d_skip);
}

static void add_inner(ParamMap& m, const std::string& p, MambaInnerWeights& w) {
  m.emplace_back(p + ".in_proj", &w.in_proj);
  m.emplace_back(p + ".conv_w", &w.conv_w);
  m.emplace_back(p + ".conv_b", &w.conv_b);
  add_ssm(m, p + ".ssm", w.ssm);
  m.emplace_back(p + ".out_proj", &w.out_proj);
}

static void add_ffn(ParamMap& m, const std::string& p, FeedForwardWeights& w) {
  m.emplace_back(p + ".norm_gamma", &w.norm_gamma);
  m.emplace_back(p + ".norm_beta", &w.norm_beta);
  m.emplace_back(p + ".w1", &w.w1);
  m.emplace_back(p + ".b1", &w.b1);
  m.emplace_back(p + ".w2", &w.w2);
  m.emplace_back(p + ".b2", &w.b2);
}

ParamMap ModelWeights::named_params() {
  ParamMap m;
  m.emplace_back("lm.embedding", &lm.embedding);
  for (size_t i = 0; i < lm.layers.size(); ++i) {
    const std::string p = "lm.layers." + std::to_string(i);
    m.emplace_back(p + ".norm_gamma", &lm.layers[i].norm_gamma);
    add_inner(m, p + ".inner", lm.layers[i].inner);
  }
  m.emplace_back("lm.final_norm_gamma", &lm.final_norm_gamma);
  m.emplace_back("lm.head", &lm.head);

  if (encoder.has_value()) {
    EncoderWeights& e = *encoder;
    m.emplace_back("encoder.frontend.conv1_w", &e.frontend.conv1_w);
    m.emplace_back("encoder.frontend.conv1_b", &e.frontend.conv1_b);
    m.emplace_back("encoder.frontend.conv2_w", &e.frontend.conv2_w);
    m.emplace_back("encoder.frontend.conv2_b", &e.frontend.conv2_b);
    m.emplace_back("encoder.frontend.proj_w", &e.frontend.proj_w);
    m.emplace_back("encoder.frontend.proj_b", &e.frontend.proj_b);
    for (size_t i = 0; i < e.layers.size(); ++i) {
      const std::string p = "encoder.layers." + std::to_string(i);
      ConMambaBlockWeights& b = e.layers[i];
      add_ffn(m, p + ".ffn1", b.ffn1);
      m.emplace_back(p + ".bidir_norm_gamma", &b.bidir_norm_gamma);
      m.emplace_back(p + ".bidir_norm_beta", &b.bidir_norm_beta);
      add_inner(m, p + ".fwd", b.fwd);
      add_inner(m, p + ".bwd", b.bwd);
      m.emplace_back(p + ".conv.norm_gamma", &b.conv.norm_gamma);
      m.emplace_back(p + ".conv.norm_beta", &b.conv.norm_beta);
      m.emplace_back(p + ".conv.pw1", &b.conv.pw1);
      m.emplace_back(p + ".conv.pw1_b", &b.conv.pw1_b);
      m.emplace_back(p + ".conv.dw", &b.conv.dw);
      m.emplace_back(p + ".conv.dw_b", &b.conv.dw_b);
      m.emplace_back(p + ".conv.pw2", &b.conv.pw2);
      m.emplace_back(p + ".conv.pw2_b", &b.conv.pw2_b);
      add_ffn(m, p + ".ffn2", b.ffn2);
      m.emplace_back(p + ".final_norm_gamma", &b.final_norm_gamma);
      m.emplace_back(p + ".final_norm_beta", &b.final_norm_beta);
    }
  }
  if (adapter.has_value()) {
    m.emplace_back("adapter.w1", &adapter->w1);
    m.emplace_back("adapter.w2", &adapter->w2);
  }
  return m;
}

std::vector<std::pair<std::string, const Tensor*>> ModelWeights::named_params_const() const {
  // The non-const traversal is the single source of naming truth.
  ParamMap m = const_cast<ModelWeights*>(this)->named_params();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(m.size());
  for (auto& [name, t] : m) out.emplace_back(name, t);
  return out;
}

// ============================================================================
// Bundle init / save / load
// ============================================================================

ModelWeights init_lm_only(const LmConfig& cfg, uint64_t seed, Dtype dt) {
  Rng rng(seed);
  ModelWeights m;
  m.lm_cfg = cfg;
  m.lm = LmWeights::init(cfg, rng, dt);
  return m;
}

ModelWeights init_full(const LmConfig& lm_cfg, const EncoderConfig& enc_cfg,
                       int64_t adapter_k, int64_t adapter_hidden, uint64_t seed, Dtype dt) {
  Rng rng(seed);
  ModelWeights m;
  m.lm_cfg = lm_cfg;
  m.lm = LmWeights::init(lm_cfg, rng, dt);
  m.enc_cfg = enc_cfg;
  m.encoder = EncoderWeights::init(enc_cfg, rng, dt);
  m.adapter = AdapterWeights::init(adapter_k, enc_cfg.d_model, lm_cfg.d_model,
                                   adapter_hidden, rng, dt);
  return m;
}

void save_model(const std::string& path, const ModelWeights& model) {
  auto tensors = model.named_params_const();
  // Non-inferable config scalars travel as meta tensors inside the container.
  Tensor meta_d_feat;
  if (model.enc_cfg.has_value()) {
    meta_d_feat = Tensor::scalar(static_cast<double>(model.enc_cfg->d_feat), Dtype::F64);
    tensors.emplace_back("meta.encoder.d_feat", &meta_d_feat);
  }
  save_checkpoint(path, tensors);
}

static int64_t count_layers(const std::map<std::string, Tensor>& t, const std::string& prefix) {
  int64_t n = 0;
  while (t.count(prefix + std::to_string(n) + ".norm_gamma") ||
         t.count(prefix + std::to_string(n) + ".ffn1.norm_gamma")) {
    ++n;
  }
  return n;
}

static const Tensor& need(const std::map<std::string, Tensor>& t, const std::string& name) {
  auto it = t.find(name);
  check(it != t.end(), "load_model: missing tensor " + name);
  return it->second;
}

ModelWeights load_model(const std::string& path) {
  std::map<std::string, Tensor> t = load_checkpoint(path);
  check(t.count("lm.embedding") == 1, "load_model: checkpoint has no lm.embedding");

  // --- infer the LM config from shapes ---
  LmConfig lm_cfg;
  const Tensor& emb = need(t, "lm.embedding");
  lm_cfg.vocab_size = emb.dim(0);
  lm_cfg.d_model = emb.dim(1);
  lm_cfg.n_layers = count_layers(t, "lm.layers.");
  check(lm_cfg.n_layers >= 1, "load_model: no lm layers found");
  const Tensor& in_proj0 = need(t, "lm.layers.0.inner.in_proj");
  const int64_t d_inner = in_proj0.dim(0) / 2;
  check(d_inner % lm_cfg.d_model == 0, "load_model: d_inner is not a multiple of d_model");
  lm_cfg.expand = d_inner / lm_cfg.d_model;
  lm_cfg.conv_kernel = need(t, "lm.layers.0.inner.conv_w").dim(0);
  lm_cfg.d_state = need(t, "lm.layers.0.inner.ssm.a_log").dim(1);
  lm_cfg.validate();

  const Dtype dt = emb.dtype();
  ModelWeights model;
  model.lm_cfg = lm_cfg;
  {
    Rng rng(0);  // shapes only; every tensor is overwritten below
    model.lm = LmWeights::init(lm_cfg, rng, dt);
  }

  const bool has_encoder = t.count("encoder.frontend.proj_w") > 0;
  if (has_encoder) {
    EncoderConfig ec;
    ec.n_layers = count_layers(t, "encoder.layers.");
    ec.d_model = need(t, "encoder.frontend.proj_w").dim(0);
    ec.frontend_c1 = need(t, "encoder.frontend.conv1_w").dim(0);
    ec.frontend_c2 = need(t, "encoder.frontend.conv2_w").dim(0);
    ec.d_feat = static_cast<int64_t>(need(t, "meta.encoder.d_feat").item());
    if (ec.n_layers > 0) {
      const Tensor& fwd_in = need(t, "encoder.layers.0.fwd.in_proj");
      const int64_t enc_inner = fwd_in.dim(0) / 2;
      check(enc_inner % ec.d_model == 0, "load_model: encoder d_inner mismatch");
      ec.expand = enc_inner / ec.d_model;
      ec.ssm_conv_kernel = need(t, "encoder.layers.0.fwd.conv_w").dim(0);
      ec.d_state = need(t, "encoder.layers.0.fwd.ssm.a_log").dim(1);
      ec.conv_kernel = need(t, "encoder.layers.0.conv.dw").dim(0);
      ec.ffn_mult = need(t, "encoder.layers.0.ffn1.w1").dim(0) / ec.d_model;
    }
    ec.validate();
    model.enc_cfg = ec;
    Rng rng(0);
    model.encoder = EncoderWeights::init(ec, rng, dt);
  }

  if (t.count("adapter.w1")) {
    check(has_encoder, "load_model: adapter present without encoder");
    const Tensor& w1 = need(t, "adapter.w1");
    const Tensor& w2 = need(t, "adapter.w2");
    const int64_t enc_d = model.enc_cfg->d_model;
    check(w1.dim(1) % enc_d == 0, "load_model: adapter fan-in mismatch");
    AdapterWeights a;
    a.k = w1.dim(1) / enc_d;
    a.w1 = w1;
    a.w2 = w2;
    a.validate();
    check(a.d_lm() == lm_cfg.d_model, "load_model: adapter output width mismatch");
    model.adapter = a;
  }

  // --- fill every parameter from the container, strictly ---
  size_t used = 0;
  for (auto& [name, slot] : model.named_params()) {
    const Tensor& src = need(t, name);
    check(src.shape() == slot->shape(),
          "load_model: shape mismatch for " + name);
    check(src.dtype() == dt, "load_model: mixed dtypes in checkpoint at " + name);
    *slot = src;
    ++used;
  }
  size_t meta = t.count("meta.encoder.d_feat");
  check(used + meta == t.size(), "load_model: checkpoint holds unknown tensors");
  return model;
}

void validate_model_against_config(const ModelWeights& model, const LmConfig& cfg) {
  cfg.validate();
  check(model.lm_cfg.d_state == cfg.d_state,
        "config mismatch: d_state disagrees with checkpoint");
  check(model.lm_cfg.n_layers == cfg.n_layers,
        "config mismatch: n_layers disagrees with checkpoint");
  check(model.lm_cfg.d_model == cfg.d_model,
        "config mismatch: d_model disagrees with checkpoint");
  check(model.lm_cfg.vocab_size == cfg.vocab_size,
        "config mismatch: vocab_size disagrees with checkpoint");
  model.lm.validate(cfg);
}

}  // namespace dssm

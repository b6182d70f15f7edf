#include "dssm/training.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace dssm {

// ============================================================================
// Losses
// ============================================================================

Tensor response_loss(const Tensor& logits, std::span<const int64_t> targets,
                     int64_t prompt_len, GradTape* tape) {
  check(logits.rank() == 2, "response_loss: logits must be [T, vocab]");
  check(!targets.empty(), "response_loss: empty response");
  check(prompt_len >= 1, "response_loss: prompt_len must be at least 1");
  const int64_t n = static_cast<int64_t>(targets.size());
  check(prompt_len - 1 + n <= logits.rows(),
        "response_loss: response span runs past the logits");
  Tensor span = slice_rows(logits, prompt_len - 1, prompt_len - 1 + n, tape);
  std::vector<int64_t> tv(targets.begin(), targets.end());
  return cross_entropy_mean(span, tv, tape);
}

LossBreakdown duplex_loss(const Tensor& logits, int64_t j, int64_t state_target,
                          std::span<const int64_t> targets, int64_t prompt_len,
                          GradTape* tape) {
  check(logits.rank() == 2, "duplex_loss: logits must be [T, vocab]");
  check(j >= 1 && j <= logits.rows(), "duplex_loss: state-token position out of range");
  check(state_target >= 0 && state_target < logits.cols(),
        "duplex_loss: state target outside the vocabulary");

  LossBreakdown out;
  out.j = j;
  Tensor row = reshape(slice_rows(logits, j - 1, j, tape), {logits.cols()}, tape);
  out.l1 = cross_entropy(row, state_target, tape);
  if (targets.empty()) {
    out.l2 = Tensor::scalar(0.0, logits.dtype());
    out.total = out.l1;
  } else {
    out.l2 = response_loss(logits, targets, prompt_len, tape);
    out.total = add(out.l1, out.l2, tape);
  }
  return out;
}

LossBreakdown duplex_loss_from_hidden(const Tensor& hidden, const LmWeights& w,
                                      int64_t j, int64_t state_target,
                                      std::span<const int64_t> targets,
                                      int64_t prompt_len, GradTape* tape) {
  check(hidden.rank() == 2, "duplex_loss_from_hidden: hidden must be [T, d_model]");
  check(j >= 1 && j <= hidden.rows(),
        "duplex_loss_from_hidden: state-token position out of range");

  LossBreakdown out;
  out.j = j;
  {
    std::vector<int64_t> pos{j - 1};
    Tensor logits = lm_logits_at(hidden, w, pos, tape);
    Tensor row = reshape(logits, {logits.cols()}, tape);
    out.l1 = cross_entropy(row, state_target, tape);
  }
  if (targets.empty()) {
    out.l2 = Tensor::scalar(0.0, hidden.dtype());
    out.total = out.l1;
  } else {
    const int64_t n = static_cast<int64_t>(targets.size());
    check(prompt_len >= 1, "duplex_loss_from_hidden: prompt_len must be at least 1");
    check(prompt_len - 1 + n <= hidden.rows(),
          "duplex_loss_from_hidden: response span runs past the hidden rows");
    std::vector<int64_t> pos(n);
    for (int64_t i = 0; i < n; ++i) pos[i] = prompt_len - 1 + i;
    Tensor logits = lm_logits_at(hidden, w, pos, tape);
    std::vector<int64_t> tv(targets.begin(), targets.end());
    out.l2 = cross_entropy_mean(logits, tv, tape);
    out.total = add(out.l1, out.l2, tape);
  }
  return out;
}

// ============================================================================
// Freeze schedule
// ============================================================================

std::set<std::string> trainable_components(int stage) {
  switch (stage) {
    case 1: return {"encoder", "adapter"};
    case 2: return {"lm", "adapter"};
    case 3: return {"lm", "adapter"};
    case 4: return {"encoder", "adapter"};
    default: throw std::runtime_error("unknown training stage " + std::to_string(stage));
  }
}

std::string component_of(const std::string& param_name) {
  const size_t dot = param_name.find('.');
  check(dot != std::string::npos && dot > 0,
        "parameter name has no component prefix: " + param_name);
  return param_name.substr(0, dot);
}

bool is_trainable(const std::string& param_name, int stage) {
  return trainable_components(stage).count(component_of(param_name)) > 0;
}

void apply_freeze(const ParamMap& params, std::vector<Tensor>& grads, int stage,
                  const std::set<std::string>& override_components) {
  check(params.size() == grads.size(), "apply_freeze: params/grads size mismatch");
  const std::set<std::string> active =
      override_components.empty() ? trainable_components(stage) : override_components;
  for (size_t i = 0; i < params.size(); ++i) {
    if (!active.count(component_of(params[i].first))) {
      grads[i] = Tensor::zeros(grads[i].shape(), grads[i].dtype());
    }
  }
}

// ============================================================================
// Optimizer
// ============================================================================

double noam_factor(int64_t step, int64_t warmup) {
  check(step >= 1, "noam_factor: step must be at least 1");
  check(warmup >= 1, "noam_factor: warmup must be at least 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::sqrt(w) * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

Adam::Adam(ParamMap params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  check(cfg_.lr > 0, "adam: lr must be positive");
  check(cfg_.beta1 >= 0 && cfg_.beta1 < 1 && cfg_.beta2 >= 0 && cfg_.beta2 < 1,
        "adam: betas must lie in [0, 1)");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& [name, p] : params_) {
    check(p != nullptr, "adam: null parameter " + name);
    m_.push_back(Tensor::zeros(p->shape(), p->dtype()));
    v_.push_back(Tensor::zeros(p->shape(), p->dtype()));
  }
}

void Adam::step(const std::vector<Tensor>& grads) {
  check(grads.size() == params_.size(), "adam: gradient count mismatch");
  ++t_;
  double lr = cfg_.lr;
  if (cfg_.noam_warmup > 0) lr *= noam_factor(t_, cfg_.noam_warmup);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i].second;
    const Tensor& g = grads[i];
    check(g.shape() == p.shape(), "adam: gradient shape mismatch for " + params_[i].first);
    check(g.all_finite(), "adam: non-finite gradient for " + params_[i].first);
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const int64_t n = p.numel();
    for (int64_t e = 0; e < n; ++e) {
      const double ge = g.get(e);
      const double me = cfg_.beta1 * m.get(e) + (1.0 - cfg_.beta1) * ge;
      const double ve = cfg_.beta2 * v.get(e) + (1.0 - cfg_.beta2) * ge * ge;
      m.set(e, me);
      v.set(e, ve);
      const double update = lr * (me / bc1) / (std::sqrt(ve / bc2) + cfg_.eps);
      p.set(e, p.get(e) - update);
    }
  }
}

std::vector<Tensor> collect_grads(const GradTape& tape, const ParamMap& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) out.push_back(tape.grad(*p));
  return out;
}

// ============================================================================
// Training config
// ============================================================================

void TrainConfig::validate() const {
  trainable_components(stage);  // throws on a bad stage
  check(lr > 0, "train config: lr must be positive");
  check(steps >= 1, "train config: steps must be at least 1");
  check(noam_warmup >= 0, "train config: noam_warmup must be non-negative");
  for (const auto& c : trainable_override) {
    check(c == "encoder" || c == "adapter" || c == "lm",
          "train config: unknown component '" + c + "'");
  }
}

std::string TrainConfig::to_json() const {
  nlohmann::json j = {{"stage", stage},
                      {"lr", lr},
                      {"steps", steps},
                      {"seed", seed},
                      {"noam_warmup", noam_warmup}};
  if (!trainable_override.empty()) {
    j["trainable"] = std::vector<std::string>(trainable_override.begin(),
                                              trainable_override.end());
  }
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainConfig c;
  if (j.contains("stage")) c.stage = j.at("stage").get<int>();
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("steps")) c.steps = j.at("steps").get<int64_t>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("noam_warmup")) c.noam_warmup = j.at("noam_warmup").get<int64_t>();
  if (j.contains("trainable")) {
    for (const auto& s : j.at("trainable").get<std::vector<std::string>>()) {
      c.trainable_override.insert(s);
    }
  }
  c.validate();
  return c;
}

}  // namespace dssm

#include "proxbundle/train/model.hpp"

namespace proxbundle::train {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::FixedProx: return "fixed-prox";
    case Variant::LearnableProx: return "learnable-prox";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::Baseline;
  if (s == "fixed-prox") return Variant::FixedProx;
  if (s == "learnable-prox") return Variant::LearnableProx;
  throw ConfigError("variant: expected baseline, fixed-prox or learnable-prox, got '" + s + "'");
}

std::string to_string(W0Init w) { return w == W0Init::Zero ? "zero" : "identity"; }

W0Init parse_w0(const std::string& s) {
  if (s == "zero") return W0Init::Zero;
  if (s == "identity") return W0Init::Identity;
  throw ConfigError("prox.w0: expected zero or identity, got '" + s + "'");
}

std::string to_string(GammaScale g) { return g == GammaScale::Absolute ? "absolute" : "spectral"; }

GammaScale parse_gamma_scale(const std::string& s) {
  if (s == "absolute") return GammaScale::Absolute;
  if (s == "spectral") return GammaScale::Spectral;
  throw ConfigError("prox.gamma_scale: expected absolute or spectral, got '" + s + "'");
}

void ModelConfig::validate() const {
  vit.validate();
  if (num_classes < 2) throw ConfigError("num_classes: need at least 2");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (prox.variant == Variant::Baseline && !prox.blocks.empty()) {
    throw ConfigError("prox.blocks: the baseline variant takes no placements");
  }
  for (Index b : prox.blocks) {
    if (b < 1 || b > vit.num_layers) {
      throw ConfigError("prox.blocks: block " + std::to_string(b) + " outside [1, " +
                        std::to_string(vit.num_layers) + "]");
    }
  }
  if (!(prox.lambda >= 0.0)) throw ConfigError("prox.lambda: must be >= 0");
  if (prox.k_max < 0) throw ConfigError("prox.k_max: must be >= 0");
  if (!(prox.gamma_init >= prox::kGammaMin && prox.gamma_init <= prox::kGammaMax)) {
    throw ConfigError("prox.gamma_init: must lie in [1e-6, 10]");
  }
  if (prox.active() && batch_size < 2) {
    throw ConfigError("batch_size: must be >= 2 when a prox placement is active");
  }
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  Rng vit_rng = root.split(1);
  Rng head_rng = root.split(2);
  Model m;
  m.config = cfg;
  m.vit = vit::VitParams::init(cfg.vit, vit_rng);
  m.classifier.resize(cfg.vit.embed_dim(), cfg.num_classes);
  for (Index i = 0; i < m.classifier.size(); ++i) m.classifier(i) = head_rng.truncated_normal(vit::kInitStddev);
  m.bias = Matrix::Zero(1, cfg.num_classes);
  if (cfg.prox.variant == Variant::LearnableProx) {
    for (Index b : cfg.prox.blocks) {
      PlacementParams& p = m.prox[b];
      for (Index k = 0; k < cfg.prox.k_max; ++k) {
        p.gammas.push_back(Matrix::Constant(1, 1, cfg.prox.gamma_init));
        p.preconditioners.push_back(Matrix::Identity(cfg.batch_size, cfg.batch_size));
      }
    }
  }
  return m;
}

std::vector<std::pair<std::string, Matrix*>> Model::named_tensors() {
  auto out = vit.named_tensors();
  out.emplace_back("classifier.weight", &classifier);
  out.emplace_back("classifier.bias", &bias);
  for (auto& [b, p] : prox) {
    const std::string base = "prox.block" + std::to_string(b) + ".";
    for (std::size_t k = 0; k < p.gammas.size(); ++k) {
      out.emplace_back(base + "gamma" + std::to_string(k), &p.gammas[k]);
      out.emplace_back(base + "R" + std::to_string(k), &p.preconditioners[k]);
    }
  }
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> Model::named_tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, ptr] : const_cast<Model*>(this)->named_tensors()) out.emplace_back(name, ptr);
  return out;
}

ModelVars bind(ad::Tape& tape, const Model& model, bool trainable, std::vector<ad::Var>* leaves) {
  auto reg = [&](const Matrix& m) {
    ad::Var v = trainable ? tape.leaf(m) : tape.constant(m);
    if (leaves) leaves->push_back(v);
    return v;
  };
  ModelVars vars;
  vars.vit = vit::bind(tape, model.vit, trainable, leaves);
  vars.classifier = reg(model.classifier);
  vars.bias = reg(model.bias);
  for (const auto& [b, p] : model.prox) {
    for (std::size_t k = 0; k < p.gammas.size(); ++k) {
      vars.gammas[b].push_back(reg(p.gammas[k]));
      vars.preconditioners[b].push_back(reg(p.preconditioners[k]));
    }
  }
  return vars;
}

namespace {

PlacementOutput run_placement(ad::Tape& tape, const Model& model, const ModelVars& vars, Index block,
                              const ad::Var& z) {
  const ProxSettings& ps = model.config.prox;
  const Index m = z.cols();
  PlacementOutput out;
  out.z = z;
  prox::DiffSchedule schedule;
  schedule.lambda = ps.lambda;
  schedule.zero_diagonal = ps.zero_diagonal;
  if (ps.variant == Variant::FixedProx) {
    out.gamma_fixed = prox::default_step(z.value());
    const ad::Var gamma = tape.constant(Matrix::Constant(1, 1, out.gamma_fixed));
    schedule.gammas.assign(static_cast<std::size_t>(ps.k_max), gamma);
  } else {
    if (const auto it = vars.gammas.find(block); it != vars.gammas.end()) schedule.gammas = it->second;
    if (ps.gamma_scale == GammaScale::Spectral && !schedule.gammas.empty()) {
      out.gamma_fixed = prox::default_step(z.value());
      for (ad::Var& g : schedule.gammas) g = ad::scale(g, out.gamma_fixed);
    }
    if (const auto it = vars.preconditioners.find(block); it != vars.preconditioners.end()) {
      for (const ad::Var& r : it->second)
        schedule.preconditioners.push_back(r.rows() == m ? r : prox::conform_preconditioner(r, m));
    }
  }
  const Matrix w0 = ps.w0 == W0Init::Zero ? Matrix(Matrix::Zero(m, m)) : Matrix(Matrix::Identity(m, m));
  prox::DiffSelfRepresentation rep = prox::unroll(z, schedule, tape.constant(w0));
  out.z_hat = rep.z_hat;
  out.w = rep.w_final;
  out.objective_trace = std::move(rep.objective_trace);
  return out;
}

}  // namespace

ForwardOutput forward(ad::Tape& tape, const Model& model, const ModelVars& vars,
                      std::span<const Image> batch) {
  const ModelConfig& cfg = model.config;
  const bool prox_on = cfg.prox.active();
  if (batch.empty()) throw UsageError("forward: empty batch");
  if (prox_on && batch.size() < 2) {
    throw ConfigError("forward: a batch of size 1 cannot drive the self-expressive prox");
  }
  std::vector<ad::Var> seqs;
  seqs.reserve(batch.size());
  for (const Image& img : batch) seqs.push_back(vit::embed_patches(tape, img, cfg.vit.patch, vars.vit));

  ForwardOutput out;
  const Index layers = cfg.vit.num_layers;
  for (Index l = 1; l <= layers; ++l) {
    for (ad::Var& s : seqs) {
      s = vit::transformer_block(s, vars.vit.blocks[static_cast<std::size_t>(l - 1)], cfg.vit.num_heads);
    }
    if (prox_on && cfg.prox.blocks.contains(l)) {
      PlacementOutput p = run_placement(tape, model, vars, l, vit::class_tokens(seqs));
      if (l < layers) vit::replace_class_tokens(seqs, p.z_hat);
      else out.features = p.z_hat;
      out.placements.emplace(l, std::move(p));
    }
  }
  if (!out.features.valid()) out.features = vit::class_tokens(seqs);
  out.logits = ad::add_row_broadcast(ad::transpose(out.features) * vars.classifier, vars.bias);
  return out;
}

Matrix forward_classify(const Model& model, std::span<const Image> batch) {
  ad::Tape tape;
  tape.set_recording(false);
  const ModelVars vars = bind(tape, model, false);
  return forward(tape, model, vars, batch).logits.value();
}

}  // namespace proxbundle::train

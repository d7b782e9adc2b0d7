#pragma once

// ViT encoder → optional proximal self-expression after chosen blocks → linear classifier.

#include "proxbundle/prox/prox.hpp"
#include "proxbundle/vit/vit.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace proxbundle::train {

enum class Variant { Baseline, FixedProx, LearnableProx };
enum class W0Init { Zero, Identity };
/// How a learnable γ_k enters the step: as is, or as a multiple of the batch's 1/σ_max(Z)².
enum class GammaScale { Absolute, Spectral };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);  // "baseline" | "fixed-prox" | "learnable-prox"
std::string to_string(W0Init w);
W0Init parse_w0(const std::string& s);        // "zero" | "identity"
std::string to_string(GammaScale g);
GammaScale parse_gamma_scale(const std::string& s);  // "absolute" | "spectral"

struct ProxSettings {
  Variant variant = Variant::Baseline;
  std::set<Index> blocks;  // layer indices in [1, L] after which the unroll runs
  double lambda = prox::kDefaultLambda;
  Index k_max = 5;
  bool zero_diagonal = false;
  W0Init w0 = W0Init::Zero;
  GammaScale gamma_scale = GammaScale::Absolute;
  double gamma_init = prox::kLearnableGammaInit;

  bool active() const { return variant != Variant::Baseline && !blocks.empty(); }
};

struct ModelConfig {
  vit::VitConfig vit;
  int num_classes = 3;
  ProxSettings prox;
  Index batch_size = 32;  // size of the learnable R_k

  /// ConfigError naming the offending field.
  void validate() const;
};

/// Learnable per-placement parameters: γ_k as 1×1 matrices and R_k as batch_size² matrices.
struct PlacementParams {
  std::vector<Matrix> gammas;
  std::vector<Matrix> preconditioners;
};

struct Model {
  ModelConfig config;
  vit::VitParams vit;
  Matrix classifier;  // d × C
  Matrix bias;        // 1 × C
  std::map<Index, PlacementParams> prox;  // learnable variant only

  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  /// Encoder tensors, then "classifier.weight", "classifier.bias", then
  /// "prox.block<b>.gamma<k>" / "prox.block<b>.R<k>".
  std::vector<std::pair<std::string, Matrix*>> named_tensors();
  std::vector<std::pair<std::string, const Matrix*>> named_tensors() const;
};

struct ModelVars {
  vit::VitVars vit;
  ad::Var classifier, bias;
  std::map<Index, std::vector<ad::Var>> gammas, preconditioners;
};

/// Registers every tensor in named_tensors() order; `leaves` receives them in that order.
ModelVars bind(ad::Tape& tape, const Model& model, bool trainable,
               std::vector<ad::Var>* leaves = nullptr);

struct PlacementOutput {
  ad::Var z;        // class tokens entering the unroll, d × m
  ad::Var z_hat;    // Z · W
  ad::Var w;        // m × m
  double gamma_fixed = 0.0;  // 1/σ_max(Z)², when used
  std::vector<double> objective_trace;
};

struct ForwardOutput {
  ad::Var logits;          // m × C
  ad::Var features;        // classifier input, d × m
  std::map<Index, PlacementOutput> placements;
};

/// Throws ConfigError when prox is active and the batch has fewer than 2 samples.
ForwardOutput forward(ad::Tape& tape, const Model& model, const ModelVars& vars,
                      std::span<const Image> batch);

/// Logits on a non-recording tape.
Matrix forward_classify(const Model& model, std::span<const Image> batch);

}  // namespace proxbundle::train

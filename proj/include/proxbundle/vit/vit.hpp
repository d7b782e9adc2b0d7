#pragma once

// Desk-scale Vision Transformer encoder.
//
// Tokens are rows: a sample is an (n+1)×d matrix whose row 0 is the class token. Each
// block applies
//
//     Z'   = Z + [H_1 … H_h] W_o,          H_j = softmax(Q_j K_jᵀ / √d_k) V_j
//     Ẑ    = LayerNorm(Z')
//     Z⁺   = Z' + GELU(Ẑ W_1 + b_1) W_2 + b_2
//
// i.e. a single normalization between the attention residual and the FFN.

#include "proxbundle/core/image.hpp"
#include "proxbundle/core/matrix.hpp"
#include "proxbundle/core/random.hpp"
#include "proxbundle/core/tape.hpp"

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace proxbundle::vit {

inline constexpr double kInitStddev = 0.02;

struct PatchEmbedConfig {
  Index image_height = 16;
  Index image_width = 16;
  Index channels = 1;
  Index patch_size = 4;
  Index embed_dim = 32;

  Index num_patches() const { return (image_height / patch_size) * (image_width / patch_size); }
  Index patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
};

struct VitConfig {
  Index num_layers = 2;
  Index num_heads = 4;
  Index head_dim = 0;  // 0 means embed_dim / num_heads
  Index ffn_dim = 64;
  PatchEmbedConfig patch;
  bool positional_embedding = true;

  Index embed_dim() const { return patch.embed_dim; }
  Index effective_head_dim() const { return head_dim > 0 ? head_dim : patch.embed_dim / num_heads; }
  void validate() const;
};

/// Per-layer weights. Q/K/V are fused: head j owns columns [j·d_k, (j+1)·d_k).
struct TransformerBlockParams {
  Matrix w_q, w_k, w_v;      // d × h·d_k
  Matrix w_o;                // h·d_k × d
  Matrix w_1, b_1;           // d × ffn, 1 × ffn
  Matrix w_2, b_2;           // ffn × d, 1 × d
  Matrix ln_scale, ln_shift; // 1 × d

  static TransformerBlockParams init(const VitConfig& cfg, Rng& rng);
  static TransformerBlockParams zeros(const VitConfig& cfg);
};

struct VitParams {
  Matrix embedding;    // d × p  (z_i = E x_i)
  Matrix class_token;  // 1 × d
  Matrix positional;   // (n+1) × d, empty when disabled
  std::vector<TransformerBlockParams> blocks;

  static VitParams init(const VitConfig& cfg, Rng& rng);

  /// Every tensor in a fixed order, with stable names (used by checkpoints and optimizers).
  std::vector<std::pair<std::string, Matrix*>> named_tensors();
  std::vector<std::pair<std::string, const Matrix*>> named_tensors() const;

  /// Throws ConfigError when shapes disagree with `cfg`.
  void validate(const VitConfig& cfg) const;
};

// -- plain evaluation ----------------------------------------------------------------------

/// n × p matrix of non-overlapping patches in row-major patch order. Within a patch the
/// vector runs over rows, then columns, then channels.
Matrix flatten_patches(const Image& image, const PatchEmbedConfig& cfg);

/// (n+1) × d token sequence: class token, then E·x_i for every patch, plus positional
/// embeddings when given.
Matrix embed_patches(const Image& image, const PatchEmbedConfig& cfg, const Matrix& embedding,
                     const Matrix& class_token, const std::optional<Matrix>& positional = {});

struct AttentionOutput {
  Matrix attention;  // A, rows sum to one
  Matrix output;     // H = A V
};

/// Single-head scaled dot-product attention with per-head d × d_k projections.
AttentionOutput attention_head(const Matrix& tokens, const Matrix& w_q, const Matrix& w_k,
                               const Matrix& w_v);

Matrix transformer_block(const Matrix& tokens, const TransformerBlockParams& params,
                         Index num_heads);

struct EncodeResult {
  Matrix features;              // d × m final-layer class tokens
  std::map<Index, Matrix> taps; // layer index → d × m class tokens after that layer
};

/// Encodes a batch. Tap 0 is the embedding layer, tap L the final layer.
EncodeResult encode(std::span<const Image> images, const VitConfig& cfg, const VitParams& params,
                    const std::set<Index>& tap_points = {});

// -- recorded evaluation -------------------------------------------------------------------

struct BlockVars {
  ad::Var w_q, w_k, w_v, w_o, w_1, b_1, w_2, b_2, ln_scale, ln_shift;
};

struct VitVars {
  ad::Var embedding, class_token, positional;  // positional unbound when disabled
  std::vector<BlockVars> blocks;
};

/// Registers every parameter as a leaf (or as constants when `trainable` is false), in the
/// order of VitParams::named_tensors. `leaves` receives them in that order.
VitVars bind(ad::Tape& tape, const VitParams& params, bool trainable = true,
             std::vector<ad::Var>* leaves = nullptr);

ad::Var embed_patches(ad::Tape& tape, const Image& image, const PatchEmbedConfig& cfg,
                      const VitVars& vars);
ad::Var attention_head(const ad::Var& tokens, const ad::Var& w_q, const ad::Var& w_k,
                       const ad::Var& w_v);
ad::Var transformer_block(const ad::Var& tokens, const BlockVars& block, Index num_heads);

/// d × m matrix whose column j is row 0 of `sequences[j]`.
ad::Var class_tokens(std::span<const ad::Var> sequences);
/// Replaces row 0 of every sequence with the matching column of `tokens` (d × m).
void replace_class_tokens(std::span<ad::Var> sequences, const ad::Var& tokens);

}  // namespace proxbundle::vit

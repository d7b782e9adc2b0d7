#include "proxbundle/vit/vit.hpp"

#include <cmath>
#include <string>

namespace proxbundle::vit {

namespace {

Matrix trunc_normal(Rng& rng, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.truncated_normal(kInitStddev);
  return m;
}

void expect_shape(const Matrix& m, Index rows, Index cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ConfigError(name + " is " + shape_of(m) + ", expected " + shape_of(rows, cols));
  }
}

}  // namespace

void PatchEmbedConfig::validate() const {
  if (image_height <= 0 || image_width <= 0 || channels <= 0 || patch_size <= 0 || embed_dim <= 0) {
    throw ConfigError("patch config: all sizes must be positive");
  }
  if (image_height % patch_size != 0 || image_width % patch_size != 0) {
    throw ConfigError("patch config: image " + shape_of(image_height, image_width) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  }
}

void VitConfig::validate() const {
  patch.validate();
  if (num_layers < 1) throw ConfigError("vit: num_layers must be >= 1");
  if (num_heads < 1) throw ConfigError("vit: num_heads must be >= 1");
  if (effective_head_dim() < 1) {
    throw ConfigError("vit: head_dim must be >= 1 (embed_dim " + std::to_string(embed_dim()) +
                      " / num_heads " + std::to_string(num_heads) + ")");
  }
  if (ffn_dim < 1) throw ConfigError("vit: ffn_dim must be >= 1");
}

TransformerBlockParams TransformerBlockParams::init(const VitConfig& cfg, Rng& rng) {
  const Index d = cfg.embed_dim();
  const Index hk = cfg.num_heads * cfg.effective_head_dim();
  TransformerBlockParams p;
  p.w_q = trunc_normal(rng, d, hk);
  p.w_k = trunc_normal(rng, d, hk);
  p.w_v = trunc_normal(rng, d, hk);
  p.w_o = trunc_normal(rng, hk, d);
  p.w_1 = trunc_normal(rng, d, cfg.ffn_dim);
  p.b_1 = Matrix::Zero(1, cfg.ffn_dim);
  p.w_2 = trunc_normal(rng, cfg.ffn_dim, d);
  p.b_2 = Matrix::Zero(1, d);
  p.ln_scale = Matrix::Ones(1, d);
  p.ln_shift = Matrix::Zero(1, d);
  return p;
}

TransformerBlockParams TransformerBlockParams::zeros(const VitConfig& cfg) {
  const Index d = cfg.embed_dim();
  const Index hk = cfg.num_heads * cfg.effective_head_dim();
  TransformerBlockParams p;
  p.w_q = p.w_k = p.w_v = Matrix::Zero(d, hk);
  p.w_o = Matrix::Zero(hk, d);
  p.w_1 = Matrix::Zero(d, cfg.ffn_dim);
  p.b_1 = Matrix::Zero(1, cfg.ffn_dim);
  p.w_2 = Matrix::Zero(cfg.ffn_dim, d);
  p.b_2 = Matrix::Zero(1, d);
  p.ln_scale = Matrix::Ones(1, d);
  p.ln_shift = Matrix::Zero(1, d);
  return p;
}

VitParams VitParams::init(const VitConfig& cfg, Rng& rng) {
  cfg.validate();
  VitParams p;
  p.embedding = trunc_normal(rng, cfg.embed_dim(), cfg.patch.patch_dim());
  p.class_token = trunc_normal(rng, 1, cfg.embed_dim());
  if (cfg.positional_embedding) {
    p.positional = Matrix::Zero(cfg.patch.num_patches() + 1, cfg.embed_dim());
  }
  for (Index l = 0; l < cfg.num_layers; ++l) p.blocks.push_back(TransformerBlockParams::init(cfg, rng));
  return p;
}

std::vector<std::pair<std::string, Matrix*>> VitParams::named_tensors() {
  std::vector<std::pair<std::string, Matrix*>> out = {{"embedding", &embedding},
                                                      {"class_token", &class_token}};
  if (positional.size() != 0) out.emplace_back("positional", &positional);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    auto& p = blocks[l];
    out.emplace_back(b + "w_q", &p.w_q);
    out.emplace_back(b + "w_k", &p.w_k);
    out.emplace_back(b + "w_v", &p.w_v);
    out.emplace_back(b + "w_o", &p.w_o);
    out.emplace_back(b + "w_1", &p.w_1);
    out.emplace_back(b + "b_1", &p.b_1);
    out.emplace_back(b + "w_2", &p.w_2);
    out.emplace_back(b + "b_2", &p.b_2);
    out.emplace_back(b + "ln_scale", &p.ln_scale);
    out.emplace_back(b + "ln_shift", &p.ln_shift);
  }
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> VitParams::named_tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, ptr] : const_cast<VitParams*>(this)->named_tensors()) out.emplace_back(name, ptr);
  return out;
}

void VitParams::validate(const VitConfig& cfg) const {
  cfg.validate();
  const Index d = cfg.embed_dim();
  const Index hk = cfg.num_heads * cfg.effective_head_dim();
  expect_shape(embedding, d, cfg.patch.patch_dim(), "embedding");
  expect_shape(class_token, 1, d, "class_token");
  if (cfg.positional_embedding) {
    expect_shape(positional, cfg.patch.num_patches() + 1, d, "positional");
  } else if (positional.size() != 0) {
    throw ConfigError("positional embeddings present but disabled in config");
  }
  if (static_cast<Index>(blocks.size()) != cfg.num_layers) {
    throw ConfigError("vit: " + std::to_string(blocks.size()) + " blocks for num_layers " +
                      std::to_string(cfg.num_layers));
  }
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    const auto& p = blocks[l];
    expect_shape(p.w_q, d, hk, b + "w_q");
    expect_shape(p.w_k, d, hk, b + "w_k");
    expect_shape(p.w_v, d, hk, b + "w_v");
    expect_shape(p.w_o, hk, d, b + "w_o");
    expect_shape(p.w_1, d, cfg.ffn_dim, b + "w_1");
    expect_shape(p.b_1, 1, cfg.ffn_dim, b + "b_1");
    expect_shape(p.w_2, cfg.ffn_dim, d, b + "w_2");
    expect_shape(p.b_2, 1, d, b + "b_2");
    expect_shape(p.ln_scale, 1, d, b + "ln_scale");
    expect_shape(p.ln_shift, 1, d, b + "ln_shift");
  }
}

Matrix flatten_patches(const Image& image, const PatchEmbedConfig& cfg) {
  cfg.validate();
  if (image.height != cfg.image_height || image.width != cfg.image_width ||
      image.channels != cfg.channels) {
    throw ConfigError("image is " + shape_of(image.height, image.width) + "x" +
                      std::to_string(image.channels) + ", config expects " +
                      shape_of(cfg.image_height, cfg.image_width) + "x" +
                      std::to_string(cfg.channels));
  }
  const Index ps = cfg.patch_size;
  const Index per_row = cfg.image_width / ps;
  Matrix out(cfg.num_patches(), cfg.patch_dim());
  for (Index p = 0; p < out.rows(); ++p) {
    const Index r0 = (p / per_row) * ps;
    const Index c0 = (p % per_row) * ps;
    Index k = 0;
    for (Index r = 0; r < ps; ++r)
      for (Index c = 0; c < ps; ++c)
        for (Index ch = 0; ch < cfg.channels; ++ch) out(p, k++) = image.at(r0 + r, c0 + c, ch);
  }
  return out;
}

// -- recorded --------------------------------------------------------------------------------

VitVars bind(ad::Tape& tape, const VitParams& params, bool trainable,
             std::vector<ad::Var>* leaves) {
  auto reg = [&](const Matrix& m) {
    ad::Var v = trainable ? tape.leaf(m) : tape.constant(m);
    if (leaves) leaves->push_back(v);
    return v;
  };
  VitVars v;
  v.embedding = reg(params.embedding);
  v.class_token = reg(params.class_token);
  if (params.positional.size() != 0) v.positional = reg(params.positional);
  for (const auto& p : params.blocks) {
    BlockVars b;
    b.w_q = reg(p.w_q);
    b.w_k = reg(p.w_k);
    b.w_v = reg(p.w_v);
    b.w_o = reg(p.w_o);
    b.w_1 = reg(p.w_1);
    b.b_1 = reg(p.b_1);
    b.w_2 = reg(p.w_2);
    b.b_2 = reg(p.b_2);
    b.ln_scale = reg(p.ln_scale);
    b.ln_shift = reg(p.ln_shift);
    v.blocks.push_back(b);
  }
  return v;
}

ad::Var embed_patches(ad::Tape& tape, const Image& image, const PatchEmbedConfig& cfg,
                      const VitVars& vars) {
  const ad::Var patches = tape.constant(flatten_patches(image, cfg));
  if (vars.embedding.rows() != cfg.embed_dim || vars.embedding.cols() != cfg.patch_dim()) {
    throw ConfigError("embedding is " + shape_of(vars.embedding.value()) + ", expected " +
                      shape_of(cfg.embed_dim, cfg.patch_dim()));
  }
  const ad::Var tokens = patches * ad::transpose(vars.embedding);  // row i = (E x_i)ᵀ
  const ad::Var parts[] = {vars.class_token, tokens};
  ad::Var seq = ad::vcat(parts);
  if (vars.positional.valid()) seq = seq + vars.positional;
  return seq;
}

ad::Var attention_head(const ad::Var& tokens, const ad::Var& w_q, const ad::Var& w_k,
                       const ad::Var& w_v) {
  const ad::Var q = tokens * w_q;
  const ad::Var k = tokens * w_k;
  const ad::Var v = tokens * w_v;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(w_q.cols()));
  const ad::Var a = ad::softmax_rows(ad::scale(q * ad::transpose(k), inv_sqrt_dk));
  return a * v;
}

ad::Var transformer_block(const ad::Var& tokens, const BlockVars& b, Index num_heads) {
  const Index hk = b.w_q.cols();
  if (num_heads < 1 || hk % num_heads != 0) {
    throw ConfigError("transformer_block: " + std::to_string(hk) + " projection columns for " +
                      std::to_string(num_heads) + " heads");
  }
  const Index dk = hk / num_heads;
  std::vector<ad::Var> heads;
  heads.reserve(static_cast<std::size_t>(num_heads));
  for (Index j = 0; j < num_heads; ++j) {
    heads.push_back(attention_head(tokens, ad::cols(b.w_q, j * dk, dk), ad::cols(b.w_k, j * dk, dk),
                                   ad::cols(b.w_v, j * dk, dk)));
  }
  const ad::Var multi = ad::hcat(heads) * b.w_o;
  const ad::Var resid = tokens + multi;
  const ad::Var normed = ad::layer_norm_rows(resid, b.ln_scale, b.ln_shift);
  const ad::Var hidden = ad::gelu(ad::add_row_broadcast(normed * b.w_1, b.b_1));
  const ad::Var ffn = ad::add_row_broadcast(hidden * b.w_2, b.b_2);
  return resid + ffn;
}

ad::Var class_tokens(std::span<const ad::Var> sequences) {
  std::vector<ad::Var> columns;
  columns.reserve(sequences.size());
  for (const ad::Var& s : sequences) columns.push_back(ad::transpose(ad::row(s, 0)));
  return ad::hcat(columns);
}

void replace_class_tokens(std::span<ad::Var> sequences, const ad::Var& tokens) {
  if (tokens.cols() != static_cast<Index>(sequences.size())) {
    throw DimensionError("replace_class_tokens: " + std::to_string(tokens.cols()) +
                         " tokens for " + std::to_string(sequences.size()) + " sequences");
  }
  for (std::size_t j = 0; j < sequences.size(); ++j) {
    ad::Var& s = sequences[j];
    const ad::Var parts[] = {ad::transpose(ad::col(tokens, static_cast<Index>(j))),
                             ad::rows(s, 1, s.rows() - 1)};
    s = ad::vcat(parts);
  }
}

// -- plain wrappers --------------------------------------------------------------------------

Matrix embed_patches(const Image& image, const PatchEmbedConfig& cfg, const Matrix& embedding,
                     const Matrix& class_token, const std::optional<Matrix>& positional) {
  ad::Tape tape;
  tape.set_recording(false);
  VitVars v;
  v.embedding = tape.constant(embedding);
  v.class_token = tape.constant(class_token);
  if (class_token.rows() != 1 || class_token.cols() != cfg.embed_dim) {
    throw ConfigError("class token is " + shape_of(class_token) + ", expected " +
                      shape_of(1, cfg.embed_dim));
  }
  if (positional) {
    if (positional->rows() != cfg.num_patches() + 1 || positional->cols() != cfg.embed_dim) {
      throw ConfigError("positional embedding is " + shape_of(*positional) + ", expected " +
                        shape_of(cfg.num_patches() + 1, cfg.embed_dim));
    }
    v.positional = tape.constant(*positional);
  }
  return embed_patches(tape, image, cfg, v).value();
}

AttentionOutput attention_head(const Matrix& tokens, const Matrix& w_q, const Matrix& w_k,
                               const Matrix& w_v) {
  require_product(tokens, w_q, "attention_head (Q)");
  require_product(tokens, w_k, "attention_head (K)");
  require_product(tokens, w_v, "attention_head (V)");
  require_same_shape(w_q, w_k, "attention_head (W_q vs W_k)");
  ad::Tape tape;
  tape.set_recording(false);
  const ad::Var z = tape.constant(tokens);
  const ad::Var q = z * tape.constant(w_q);
  const ad::Var k = z * tape.constant(w_k);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(w_q.cols()));
  AttentionOutput out;
  out.attention = softmax_rows(ad::scale(q * ad::transpose(k), inv_sqrt_dk)).value();
  out.output = attention_head(z, tape.constant(w_q), tape.constant(w_k), tape.constant(w_v)).value();
  return out;
}

Matrix transformer_block(const Matrix& tokens, const TransformerBlockParams& params,
                         Index num_heads) {
  ad::Tape tape;
  tape.set_recording(false);
  BlockVars b{tape.constant(params.w_q), tape.constant(params.w_k),      tape.constant(params.w_v),
              tape.constant(params.w_o), tape.constant(params.w_1),      tape.constant(params.b_1),
              tape.constant(params.w_2), tape.constant(params.b_2),      tape.constant(params.ln_scale),
              tape.constant(params.ln_shift)};
  return transformer_block(tape.constant(tokens), b, num_heads).value();
}

EncodeResult encode(std::span<const Image> images, const VitConfig& cfg, const VitParams& params,
                    const std::set<Index>& tap_points) {
  params.validate(cfg);
  for (Index t : tap_points) {
    if (t < 0 || t > cfg.num_layers) {
      throw ConfigError("tap point " + std::to_string(t) + " outside [0, " +
                        std::to_string(cfg.num_layers) + "]");
    }
  }
  if (images.empty()) throw UsageError("encode: empty batch");
  ad::Tape tape;
  tape.set_recording(false);
  const VitVars vars = bind(tape, params, false);
  std::vector<ad::Var> seqs;
  seqs.reserve(images.size());
  for (const Image& img : images) seqs.push_back(embed_patches(tape, img, cfg.patch, vars));
  EncodeResult out;
  if (tap_points.contains(0)) out.taps[0] = class_tokens(seqs).value();
  for (Index l = 0; l < cfg.num_layers; ++l) {
    for (ad::Var& s : seqs) s = transformer_block(s, vars.blocks[static_cast<std::size_t>(l)], cfg.num_heads);
    if (tap_points.contains(l + 1)) out.taps[l + 1] = class_tokens(seqs).value();
  }
  out.features = class_tokens(seqs).value();
  return out;
}

}  // namespace proxbundle::vit

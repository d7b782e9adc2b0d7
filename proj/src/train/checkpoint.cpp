#include "proxbundle/train/checkpoint.hpp"

#include "proxbundle/core/file_io.hpp"
#include "proxbundle/core/json_fields.hpp"
#include "proxbundle/core/pxb1.hpp"

namespace proxbundle::train {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "proxbundle-checkpoint";
constexpr int kVersion = 1;

std::string file_name(const std::string& tensor) { return tensor + ".pxb"; }

}  // namespace

nlohmann::ordered_json model_config_json(const ModelConfig& cfg) {
  const vit::VitConfig& v = cfg.vit;
  nlohmann::ordered_json j;
  j["image_height"] = v.patch.image_height;
  j["image_width"] = v.patch.image_width;
  j["channels"] = v.patch.channels;
  j["patch_size"] = v.patch.patch_size;
  j["embed_dim"] = v.patch.embed_dim;
  j["num_layers"] = v.num_layers;
  j["num_heads"] = v.num_heads;
  j["head_dim"] = v.head_dim;
  j["ffn_dim"] = v.ffn_dim;
  j["positional_embedding"] = v.positional_embedding;
  j["num_classes"] = cfg.num_classes;
  j["batch_size"] = cfg.batch_size;
  nlohmann::ordered_json p;
  p["variant"] = to_string(cfg.prox.variant);
  p["blocks"] = std::vector<Index>(cfg.prox.blocks.begin(), cfg.prox.blocks.end());
  p["lambda"] = cfg.prox.lambda;
  p["k_max"] = cfg.prox.k_max;
  p["zero_diagonal"] = cfg.prox.zero_diagonal;
  p["w0"] = to_string(cfg.prox.w0);
  p["gamma_scale"] = to_string(cfg.prox.gamma_scale);
  p["gamma_init"] = cfg.prox.gamma_init;
  j["prox"] = p;
  return j;
}

ModelConfig parse_model_config(const nlohmann::json& j, const std::string& path) {
  ModelConfig cfg;
  JsonFields f(j, path);
  vit::VitConfig& v = cfg.vit;
  f.get("image_height", v.patch.image_height, true);
  f.get("image_width", v.patch.image_width, true);
  f.get("channels", v.patch.channels, true);
  f.get("patch_size", v.patch.patch_size, true);
  f.get("embed_dim", v.patch.embed_dim, true);
  f.get("num_layers", v.num_layers, true);
  f.get("num_heads", v.num_heads, true);
  f.get("head_dim", v.head_dim, true);
  f.get("ffn_dim", v.ffn_dim, true);
  f.get("positional_embedding", v.positional_embedding, true);
  f.get("num_classes", cfg.num_classes, true);
  f.get("batch_size", cfg.batch_size, true);
  JsonFields p = f.object("prox", true);
  std::string variant, w0, gamma_scale;
  std::vector<Index> blocks;
  p.get("variant", variant, true);
  p.get("blocks", blocks, true);
  p.get("lambda", cfg.prox.lambda, true);
  p.get("k_max", cfg.prox.k_max, true);
  p.get("zero_diagonal", cfg.prox.zero_diagonal, true);
  p.get("w0", w0, true);
  p.get("gamma_scale", gamma_scale, true);
  p.get("gamma_init", cfg.prox.gamma_init, true);
  p.finish();
  f.finish();
  try {
    cfg.prox.variant = parse_variant(variant);
  } catch (const std::exception&) {
    throw ConfigError(p.field("variant") + ": unknown variant '" + variant + "'");
  }
  try {
    cfg.prox.w0 = parse_w0(w0);
  } catch (const std::exception&) {
    throw ConfigError(p.field("w0") + ": unknown initialization '" + w0 + "'");
  }
  try {
    cfg.prox.gamma_scale = parse_gamma_scale(gamma_scale);
  } catch (const std::exception&) {
    throw ConfigError(p.field("gamma_scale") + ": unknown scale '" + gamma_scale + "'");
  }
  cfg.prox.blocks = std::set<Index>(blocks.begin(), blocks.end());
  cfg.validate();
  return cfg;
}

void save_checkpoint(const Model& model, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["num_layers"] = model.config.vit.num_layers;
  manifest["embed_dim"] = model.config.vit.embed_dim();
  manifest["config"] = model_config_json(model.config);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
  for (const auto& [name, m] : model.named_tensors()) {
    pxb1::write(dir / file_name(name), *m);
    tensors[name] = file_name(name);
  }
  manifest["tensors"] = tensors;
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Model load_checkpoint(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  try {
    JsonFields f(manifest, "");
    std::string format;
    int version = 0;
    Index layers = 0, dim = 0;
    f.get("format", format, true);
    f.get("version", version, true);
    f.get("num_layers", layers, true);
    f.get("embed_dim", dim, true);
    if (format != kFormat) throw ConfigError("format: expected '" + std::string(kFormat) + "'");
    if (version != kVersion) throw ConfigError("version: unsupported " + std::to_string(version));
    f.object("config", true);
    const ModelConfig cfg = parse_model_config(manifest["config"], "config");
    if (layers != cfg.vit.num_layers || dim != cfg.vit.embed_dim()) {
      throw ConfigError("num_layers/embed_dim: disagree with config");
    }
    JsonFields t = f.object("tensors", true);
    f.finish();

    Model model = Model::init(cfg, 0);
    for (auto& [name, m] : model.named_tensors()) {
      std::string file;
      t.get(name, file, true);
      if (fs::path(file).has_parent_path()) throw ConfigError(t.field(name) + ": must be a bare file name");
      const Matrix loaded = pxb1::read(dir / file);
      if (loaded.rows() != m->rows() || loaded.cols() != m->cols()) {
        throw FormatError(name + ": shape " + shape_of(loaded) + ", expected " + shape_of(*m));
      }
      *m = loaded;
    }
    t.finish();
    return model;
  } catch (const ConfigError& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
}

}  // namespace proxbundle::train

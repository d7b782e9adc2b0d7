#include "experiment.hpp"

#include "proxbundle/core/file_io.hpp"
#include "proxbundle/core/json_fields.hpp"
#include "proxbundle/data/idx.hpp"
#include "proxbundle/data/synthetic.hpp"
#include "proxbundle/train/checkpoint.hpp"

#include <algorithm>
#include <charconv>

namespace proxbundle::cli {

namespace fs = std::filesystem;

namespace {

void parse_data(JsonFields f, DataSpec& d, const fs::path& base) {
  f.get("source", d.source, true);
  if (d.source == "synthetic") {
    f.get("classes", d.classes);
    f.get("samples_per_class", d.samples_per_class);
    f.get("height", d.height);
    f.get("width", d.width);
    f.get("noise", d.noise);
    f.get("max_shift", d.max_shift);
  } else if (d.source == "idx") {
    std::string images, labels;
    f.get("images", images, true);
    f.get("labels", labels, true);
    d.images = base / images;
    d.labels = base / labels;
  } else {
    throw ConfigError(f.field("source") + ": expected \"synthetic\" or \"idx\", got \"" + d.source + "\"");
  }
  f.get("test_fraction", d.test_fraction);
  if (f.has("seed")) {
    std::uint64_t s = 0;
    f.get("seed", s);
    d.seed = s;
  }
  f.finish();
  if (!(d.test_fraction > 0.0 && d.test_fraction < 1.0)) throw ConfigError("data.test_fraction: must lie in (0, 1)");
  if (d.source == "synthetic") {
    data::SyntheticImageSpec spec;
    spec.classes = d.classes;
    spec.samples_per_class = d.samples_per_class;
    spec.height = d.height;
    spec.width = d.width;
    spec.noise = d.noise;
    spec.max_shift = d.max_shift;
    try {
      spec.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("data: ") + e.what());
    }
  }
}

void parse_model(JsonFields f, train::ModelConfig& m) {
  vit::VitConfig& v = m.vit;
  f.get("num_layers", v.num_layers, true);
  f.get("embed_dim", v.patch.embed_dim, true);
  f.get("num_heads", v.num_heads);
  f.get("head_dim", v.head_dim);
  f.get("ffn_dim", v.ffn_dim);
  f.get("patch_size", v.patch.patch_size);
  f.get("positional_embedding", v.positional_embedding);
  f.finish();
}

void parse_prox(JsonFields f, train::ProxSettings& p) {
  std::string variant = train::to_string(p.variant), w0 = train::to_string(p.w0);
  std::string gamma_scale = train::to_string(p.gamma_scale);
  std::vector<Index> blocks;
  f.get("variant", variant);
  f.get("blocks", blocks);
  f.get("lambda", p.lambda);
  f.get("k_max", p.k_max);
  f.get("zero_diagonal", p.zero_diagonal);
  f.get("w0", w0);
  f.get("gamma_scale", gamma_scale);
  f.get("gamma_init", p.gamma_init);
  f.finish();
  try {
    p.variant = train::parse_variant(variant);
  } catch (const std::exception&) {
    throw ConfigError(f.field("variant") + ": expected baseline, fixed-prox or learnable-prox");
  }
  try {
    p.w0 = train::parse_w0(w0);
  } catch (const std::exception&) {
    throw ConfigError(f.field("w0") + ": expected zero or identity");
  }
  try {
    p.gamma_scale = train::parse_gamma_scale(gamma_scale);
  } catch (const std::exception&) {
    throw ConfigError(f.field("gamma_scale") + ": expected absolute or spectral");
  }
  p.blocks = std::set<Index>(blocks.begin(), blocks.end());
  if (!(p.lambda >= 0.0)) throw ConfigError(f.field("lambda") + ": must be >= 0");
  if (p.k_max < 0) throw ConfigError(f.field("k_max") + ": must be >= 0");
}

void parse_train(JsonFields f, train::TrainConfig& t, Index& batch_size) {
  f.get("epochs", t.epochs, true);
  f.get("pretrain_epochs", t.pretrain_epochs);
  f.get("batch_size", batch_size);
  f.get("learning_rate", t.learning_rate);
  f.get("prox_lr_multiplier", t.prox_lr_multiplier);
  f.get("beta1", t.beta1);
  f.get("beta2", t.beta2);
  f.get("epsilon", t.epsilon);
  f.get("merge_singleton", t.merge_singleton);
  f.finish();
}

Index parse_block(const std::string& token, Index layers) {
  if (token == "L") return layers;
  if (token == "L/2") return std::max<Index>(1, layers / 2);
  Index v = 0;
  const auto [end, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc() || end != token.data() + token.size()) {
    throw ConfigError("placements: cannot read block \"" + token + "\"");
  }
  return v;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split_on(const std::string& s, const std::string& seps) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (seps.find(c) != std::string::npos) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

void validate(const ExperimentConfig& cfg) {
  cfg.train.validate();
  train::ModelConfig m = cfg.model;
  m.vit.patch.image_height = cfg.data.height;
  m.vit.patch.image_width = cfg.data.width;
  // image geometry of IDX data is only known after loading
  if (cfg.data.source == "idx") m.vit.patch.image_height = m.vit.patch.image_width = m.vit.patch.patch_size;
  m.validate();
}

}  // namespace

ExperimentConfig load_experiment(const fs::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": not valid JSON (" + e.what() + ")");
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  ExperimentConfig cfg;
  JsonFields f(doc, "");
  f.get("seed", cfg.seed);
  std::string out;
  f.get("output_dir", out);
  if (!out.empty()) cfg.output_dir = out;
  parse_data(f.object("data", true), cfg.data, path.parent_path());
  parse_model(f.object("model", true), cfg.model);
  parse_prox(f.object("prox"), cfg.model.prox);
  parse_train(f.object("train", true), cfg.train, cfg.model.batch_size);
  JsonFields sweep = f.object("sweep");
  sweep.get("placements", cfg.placements);
  sweep.finish();
  f.finish();
  cfg.model.num_classes = cfg.data.classes;
  cfg.train.seed = cfg.seed;
  validate(cfg);
  return cfg;
}

void apply_overrides(ExperimentConfig& cfg, std::optional<std::uint64_t> seed, const std::optional<fs::path>& out) {
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_dir = *out;
  cfg.train.seed = cfg.seed;
  validate(cfg);
}

data::DatasetSplit load_dataset(ExperimentConfig& cfg) {
  const std::uint64_t seed = cfg.data.seed.value_or(cfg.seed);
  data::DatasetSplit split;
  if (cfg.data.source == "synthetic") {
    data::SyntheticImageSpec spec;
    spec.classes = cfg.data.classes;
    spec.samples_per_class = cfg.data.samples_per_class;
    spec.height = cfg.data.height;
    spec.width = cfg.data.width;
    spec.noise = cfg.data.noise;
    spec.max_shift = cfg.data.max_shift;
    spec.test_fraction = cfg.data.test_fraction;
    spec.seed = seed;
    split = data::gen_images(spec);
  } else {
    split = data::idx::load_idx(cfg.data.images, cfg.data.labels, cfg.data.test_fraction, seed);
    cfg.model.num_classes = split.num_classes();
  }
  if (split.images.empty()) throw UsageError("data: no images");
  const Image& first = split.images.front();
  cfg.model.vit.patch.image_height = first.height;
  cfg.model.vit.patch.image_width = first.width;
  cfg.model.vit.patch.channels = first.channels;
  cfg.model.validate();
  return split;
}

std::vector<std::set<Index>> parse_placements(const std::string& text, Index num_layers) {
  std::vector<std::set<Index>> out;
  for (const std::string& raw : split_on(text, ";")) {
    const std::string item = trim(raw);
    std::set<Index> blocks;
    if (!(item.empty() || item == "none" || item == "∅" || item == "{}")) {
      for (const std::string& tok : split_on(item, "+,")) {
        const Index b = parse_block(trim(tok), num_layers);
        if (b < 1 || b > num_layers) {
          throw ConfigError("placements: block " + std::to_string(b) + " outside [1, " +
                            std::to_string(num_layers) + "]");
        }
        blocks.insert(b);
      }
    }
    out.push_back(blocks);
  }
  return out;
}

std::string experiment_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  nlohmann::ordered_json d;
  d["source"] = cfg.data.source;
  if (cfg.data.source == "synthetic") {
    d["classes"] = cfg.data.classes;
    d["samples_per_class"] = cfg.data.samples_per_class;
    d["height"] = cfg.data.height;
    d["width"] = cfg.data.width;
    d["noise"] = cfg.data.noise;
    d["max_shift"] = cfg.data.max_shift;
  } else {
    d["images"] = cfg.data.images.string();
    d["labels"] = cfg.data.labels.string();
  }
  d["test_fraction"] = cfg.data.test_fraction;
  d["seed"] = cfg.data.seed.value_or(cfg.seed);
  j["data"] = d;
  j["model"] = train::model_config_json(cfg.model);
  const train::TrainConfig& t = cfg.train;
  j["train"] = {{"epochs", t.epochs},
                {"pretrain_epochs", t.pretrain_epochs},
                {"batch_size", cfg.model.batch_size},
                {"learning_rate", t.learning_rate},
                {"prox_lr_multiplier", t.prox_lr_multiplier},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"epsilon", t.epsilon},
                {"merge_singleton", t.merge_singleton}};
  if (!cfg.placements.empty()) j["sweep"] = {{"placements", cfg.placements}};
  return j.dump(2) + "\n";
}

}  // namespace proxbundle::cli

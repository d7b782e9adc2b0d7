#include "proxbundle/train/trainer.hpp"

#include "proxbundle/core/parallel.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace proxbundle::train {

namespace {

constexpr std::uint64_t kEvalStream = 0xe7a1;

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<Image> gather(const data::DatasetSplit& split, std::span<const Index> idx) {
  std::vector<Image> out;
  out.reserve(idx.size());
  for (Index i : idx) out.push_back(split.images[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<int> gather_labels(const data::DatasetSplit& split, std::span<const Index> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (Index i : idx) out.push_back(split.labels[static_cast<std::size_t>(i)]);
  return out;
}

int argmax_row(const Matrix& logits, Index i) {
  Index best = 0;
  logits.row(i).maxCoeff(&best);
  return static_cast<int>(best);
}

bool is_prox_tensor(const std::string& name) { return name.starts_with("prox."); }

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs: must be >= 0");
  if (pretrain_epochs < 0) throw ConfigError("train.pretrain_epochs: must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be > 0");
  if (!(prox_lr_multiplier >= 0.0)) throw ConfigError("train.prox_lr_multiplier: must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1/beta2: must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("train.epsilon: must be > 0");
}

Adam::Adam(const std::vector<Matrix*>& params, const TrainConfig& cfg, std::vector<double> lr_scale)
    : params_(params), scale_(std::move(lr_scale)), lr_(cfg.learning_rate), beta1_(cfg.beta1),
      beta2_(cfg.beta2), eps_(cfg.epsilon) {
  if (scale_.empty()) scale_.assign(params_.size(), 1.0);
  if (scale_.size() != params_.size()) throw UsageError("Adam: one learning-rate scale per parameter");
  for (const Matrix* p : params_) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

void Adam::step(const std::vector<Matrix>& grads) {
  if (grads.size() != params_.size()) throw UsageError("Adam: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    require_same_shape(*params_[i], grads[i], "Adam::step");
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
    const double lr = lr_ * scale_[i];
    *params_[i] -= (lr * (m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + eps_)).matrix();
  }
}

void clamp_gammas(Model& model) {
  for (auto& [b, p] : model.prox)
    for (Matrix& g : p.gammas) g(0, 0) = std::clamp(g(0, 0), prox::kGammaMin, prox::kGammaMax);
}

std::string RunReport::to_json() const {
  nlohmann::ordered_json doc;
  doc["seed"] = seed;
  doc["variant"] = to_string(variant);
  doc["blocks"] = std::vector<Index>(blocks.begin(), blocks.end());
  doc["pretrain_epochs"] = pretrain_epochs;
  nlohmann::ordered_json ep = nlohmann::ordered_json::array();
  for (const EpochRecord& e : epochs) {
    ep.push_back({{"epoch", e.epoch},
                  {"train_loss", e.train_loss},
                  {"train_accuracy", e.train_accuracy},
                  {"test_accuracy", e.test_accuracy}});
  }
  doc["epochs"] = ep;
  doc["final_train_accuracy"] = final_train_accuracy;
  doc["final_test_accuracy"] = final_test_accuracy;
  nlohmann::ordered_json traces = nlohmann::ordered_json::object();
  for (const auto& [b, t] : objective_traces) traces[std::to_string(b)] = t;
  doc["objective_traces"] = traces;
  doc["data_order"] = hex64(data_order);
  return doc.dump(2) + "\n";
}

std::string RunReport::to_csv() const {
  std::ostringstream out;
  out << "epoch,train_loss,train_accuracy,test_accuracy\n";
  for (const EpochRecord& e : epochs) {
    out << e.epoch << "," << fmt(e.train_loss) << "," << fmt(e.train_accuracy) << ","
        << fmt(e.test_accuracy) << "\n";
  }
  return out.str();
}

std::string StepLog::to_json_line() const {
  nlohmann::ordered_json doc;
  doc["phase"] = phase;
  doc["step"] = step;
  doc["epoch"] = epoch;
  doc["loss"] = loss;
  doc["accuracy"] = accuracy;
  doc["batch_hash"] = hex64(batch_hash);
  return doc.dump();
}

Evaluation evaluate(const Model& model, const data::DatasetSplit& split, std::span<const Index> indices,
                    Index batch_size, std::uint64_t seed) {
  const bool prox_on = model.config.prox.active();
  const Index n = static_cast<Index>(indices.size());
  if (n == 0) throw UsageError("evaluate: no samples");
  std::vector<Index> positions(indices.size());
  for (std::size_t k = 0; k < positions.size(); ++k) positions[k] = static_cast<Index>(k);
  Rng rng = Rng(seed).split(kEvalStream);
  Evaluation ev;
  ev.batches = data::batches(positions, batch_size, rng, prox_on);
  if (prox_on && ev.batches.size() == 1 && ev.batches[0].size() < 2) {
    throw ConfigError("evaluate: a single sample cannot drive the self-expressive prox");
  }
  const Index d = model.config.vit.embed_dim();
  ev.predictions.assign(indices.size(), -1);
  ev.pre.features.resize(d, n);
  ev.post.features.resize(d, n);
  ev.pre.labels = gather_labels(split, indices);
  ev.post.labels = ev.pre.labels;
  if (prox_on) {
    ev.placement = *model.config.prox.blocks.rbegin();
    ev.w = Matrix::Zero(n, n);
  }
  Index correct = 0;
  for (std::size_t b = 0; b < ev.batches.size(); ++b) {
    const auto& pos = ev.batches[b];
    std::vector<Index> idx;
    for (Index p : pos) idx.push_back(indices[static_cast<std::size_t>(p)]);
    const std::vector<Image> images = gather(split, idx);

    ad::Tape tape;
    tape.set_recording(false);
    const ModelVars vars = train::bind(tape, model, false);
    const ForwardOutput out = forward(tape, model, vars, images);
    const Matrix& logits = out.logits.value();
    const Matrix* pre = &out.features.value();
    const Matrix* post = pre;
    if (prox_on) {
      const PlacementOutput& p = out.placements.at(ev.placement);
      pre = &p.z.value();
      post = &p.z_hat.value();
      for (std::size_t i = 0; i < pos.size(); ++i)
        for (std::size_t j = 0; j < pos.size(); ++j)
          ev.w(pos[i], pos[j]) = p.w.value()(static_cast<Index>(i), static_cast<Index>(j));
      if (b == 0)
        for (const auto& [blk, po] : out.placements) ev.objective_traces[blk] = po.objective_trace;
    }
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const int pred = argmax_row(logits, static_cast<Index>(i));
      ev.predictions[static_cast<std::size_t>(pos[i])] = pred;
      correct += pred == ev.pre.labels[static_cast<std::size_t>(pos[i])];
      ev.pre.features.col(pos[i]) = pre->col(static_cast<Index>(i));
      ev.post.features.col(pos[i]) = post->col(static_cast<Index>(i));
    }
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return ev;
}

Model pretrain_backbone(const ModelConfig& model_cfg, const TrainConfig& cfg, const data::DatasetSplit& split,
                        const LogSink& log) {
  Model model = Model::init(model_cfg, cfg.seed);
  if (cfg.pretrain_epochs == 0) return model;
  ModelConfig base_cfg = model_cfg;
  base_cfg.prox.variant = Variant::Baseline;
  base_cfg.prox.blocks.clear();
  TrainConfig pre = cfg;
  pre.epochs = cfg.pretrain_epochs;
  pre.pretrain_epochs = 0;
  pre.merge_singleton = true;
  LogSink tagged;
  if (log) {
    tagged = [&log](const StepLog& s) {
      StepLog t = s;
      t.phase = "pretrain";
      log(t);
    };
  }
  TrainResult base = train(Model::init(base_cfg, cfg.seed), pre, split, tagged);
  model.vit = std::move(base.model.vit);
  model.classifier = std::move(base.model.classifier);
  model.bias = std::move(base.model.bias);
  return model;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const data::DatasetSplit& split,
                  const LogSink& log) {
  return train(pretrain_backbone(model_cfg, cfg, split, log), cfg, split, log);
}

TrainResult train(Model model, const TrainConfig& cfg, const data::DatasetSplit& split,
                  const LogSink& log) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();
  model.config.validate();
  if (split.train.empty() || split.test.empty()) throw UsageError("train: empty dataset");
  split.validate();
  for (int l : split.labels) {
    if (l >= model.config.num_classes) {
      throw UsageError("train: label " + std::to_string(l) + " outside " +
                       std::to_string(model.config.num_classes) + " classes");
    }
  }
  const bool prox_on = model.config.prox.active();
  const bool merge = prox_on || cfg.merge_singleton || cfg.pretrain_epochs > 0;

  auto named = model.named_tensors();
  std::vector<Matrix*> params;
  std::vector<double> scale;
  for (auto& [name, ptr] : named) {
    params.push_back(ptr);
    scale.push_back(is_prox_tensor(name) ? cfg.prox_lr_multiplier : 1.0);
  }
  Adam adam(params, cfg, scale);

  RunReport report;
  report.seed = cfg.seed;
  report.variant = model.config.prox.variant;
  report.blocks = model.config.prox.blocks;
  report.pretrain_epochs = cfg.pretrain_epochs;
  std::uint64_t order = 0xcbf29ce484222325ULL;
  Index step = 0;
  Rng order_rng(cfg.seed);
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = order_rng.split(static_cast<std::uint64_t>(cfg.pretrain_epochs + epoch) + 1);
    const auto batches = data::batches(split.train, model.config.batch_size, epoch_rng, merge);
    double loss_sum = 0.0;
    Index correct = 0, seen = 0;
    for (const auto& batch : batches) {
      const std::vector<Image> images = gather(split, batch);
      const std::vector<int> labels = gather_labels(split, batch);
      ad::Tape tape;
      std::vector<ad::Var> leaves;
      const ModelVars vars = train::bind(tape, model, true, &leaves);
      const ForwardOutput out = forward(tape, model, vars, images);
      const ad::Var loss = ad::cross_entropy(out.logits, labels);
      const ad::GradientMap grads = ad::backward(tape, loss);
      std::vector<Matrix> g;
      g.reserve(leaves.size());
      for (const ad::Var& leaf : leaves) g.push_back(grads[leaf]);
      adam.step(g);
      clamp_gammas(model);

      Index batch_correct = 0;
      for (std::size_t i = 0; i < batch.size(); ++i)
        batch_correct += argmax_row(out.logits.value(), static_cast<Index>(i)) == labels[i];
      const double batch_loss = loss.scalar();
      loss_sum += batch_loss * static_cast<double>(batch.size());
      correct += batch_correct;
      seen += static_cast<Index>(batch.size());
      const std::uint64_t h = data::batch_hash(batch);
      order = (order ^ h) * 0x100000001b3ULL;
      if (log) {
        log({step, cfg.pretrain_epochs + epoch, batch_loss,
             static_cast<double>(batch_correct) / static_cast<double>(batch.size()), h});
      }
      ++step;
    }
    const Evaluation ev = evaluate(model, split, split.test, model.config.batch_size, cfg.seed);
    report.epochs.push_back({epoch, loss_sum / static_cast<double>(seen),
                             static_cast<double>(correct) / static_cast<double>(seen), ev.accuracy});
    report.objective_traces = ev.objective_traces;
  }
  if (!report.epochs.empty()) {
    report.final_train_accuracy = report.epochs.back().train_accuracy;
    report.final_test_accuracy = report.epochs.back().test_accuracy;
  } else {
    const Evaluation ev = evaluate(model, split, split.test, model.config.batch_size, cfg.seed);
    report.final_test_accuracy = ev.accuracy;
    report.objective_traces = ev.objective_traces;
  }
  report.data_order = order;
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(report)};
}

std::string blocks_label(const std::set<Index>& blocks) {
  if (blocks.empty()) return "none";
  std::string out;
  for (Index b : blocks) out += (out.empty() ? "" : "+") + std::to_string(b);
  return out;
}

std::vector<SweepRow> placement_sweep(const ModelConfig& base, const TrainConfig& cfg,
                                      const data::DatasetSplit& split,
                                      const std::vector<std::set<Index>>& placements,
                                      const LogSink& log) {
  if (placements.empty()) throw ConfigError("sweep: no placements given");
  const Variant prox_variant =
      base.prox.variant == Variant::Baseline ? Variant::LearnableProx : base.prox.variant;
  TrainConfig arm_cfg = cfg;
  arm_cfg.merge_singleton = true;
  std::vector<ModelConfig> arms;
  for (const auto& blocks : placements) {
    ModelConfig mc = base;
    mc.prox.blocks = blocks;
    mc.prox.variant = blocks.empty() ? Variant::Baseline : prox_variant;
    mc.validate();
    arms.push_back(mc);
  }
  std::vector<SweepRow> rows(arms.size());
  std::vector<std::vector<StepLog>> logs(arms.size());
  parallel_for(arms.size(), [&](std::size_t i) {
    LogSink sink;
    if (log) sink = [&logs, i](const StepLog& s) { logs[i].push_back(s); };
    const TrainResult r = train(arms[i], arm_cfg, split, sink);
    rows[i] = {blocks_label(arms[i].prox.blocks), r.report.final_test_accuracy, cfg.seed, r.report.data_order};
  });
  if (log)
    for (const auto& arm_log : logs)
      for (const StepLog& s : arm_log) log(s);
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "blocks,accuracy,seed,data_order\n";
  for (const SweepRow& r : rows) out << r.blocks << "," << fmt(r.accuracy) << "," << r.seed << "," << hex64(r.data_order) << "\n";
  return out.str();
}

}  // namespace proxbundle::train

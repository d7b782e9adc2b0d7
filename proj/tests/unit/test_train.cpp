#include "doctest.h"

#include "proxbundle/core/random.hpp"
#include "proxbundle/data/synthetic.hpp"
#include "proxbundle/train/checkpoint.hpp"
#include "proxbundle/train/trainer.hpp"

#include <cmath>
#include <filesystem>

using namespace proxbundle;
using namespace proxbundle::train;

namespace {

ModelConfig micro(Index layers, Index dim, Index heads, int classes = 3) {
  ModelConfig cfg;
  cfg.vit.patch.image_height = 8;
  cfg.vit.patch.image_width = 8;
  cfg.vit.patch.patch_size = 4;
  cfg.vit.patch.embed_dim = dim;
  cfg.vit.num_layers = layers;
  cfg.vit.num_heads = heads;
  cfg.vit.ffn_dim = 2 * dim;
  cfg.num_classes = classes;
  cfg.batch_size = 8;
  return cfg;
}

data::DatasetSplit tiny_split(int classes, Index per_class, std::uint64_t seed) {
  data::SyntheticImageSpec spec;
  spec.height = 8;
  spec.width = 8;
  spec.classes = classes;
  spec.samples_per_class = per_class;
  spec.noise = 0.3;
  spec.seed = seed;
  return data::gen_images(spec);
}

std::vector<Image> first_images(const data::DatasetSplit& s, std::size_t n) {
  return {s.images.begin(), s.images.begin() + static_cast<std::ptrdiff_t>(n)};
}

// Scrambles every tensor so nothing is at its initial, symmetric value.
void perturb(Model& model, std::uint64_t seed, double sd = 0.3) {
  Rng rng(seed);
  for (auto& [name, m] : model.named_tensors()) {
    if (name.find(".gamma") != std::string::npos) {
      (*m)(0, 0) = rng.uniform(0.05, 0.3);
    } else {
      *m += rng.normal_matrix(m->rows(), m->cols(), sd);
    }
  }
}

double mean_cross_entropy(const Matrix& logits, std::span<const int> labels) {
  double total = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    double z = 0.0;
    for (Index j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j) - mx);
    total += mx + std::log(z) - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

// Straight-line evaluation: plain ViT pieces, plain unroll, linear map.
Matrix reference_logits(const Model& model, std::span<const Image> batch) {
  const ModelConfig& cfg = model.config;
  std::vector<Matrix> seqs;
  for (const Image& img : batch) {
    std::optional<Matrix> pos;
    if (cfg.vit.positional_embedding) pos = model.vit.positional;
    seqs.push_back(vit::embed_patches(img, cfg.vit.patch, model.vit.embedding, model.vit.class_token, pos));
  }
  const Index m = static_cast<Index>(batch.size());
  Matrix features;
  for (Index l = 1; l <= cfg.vit.num_layers; ++l) {
    for (Matrix& s : seqs) s = vit::transformer_block(s, model.vit.blocks[static_cast<std::size_t>(l - 1)], cfg.vit.num_heads);
    Matrix z(cfg.vit.embed_dim(), m);
    for (Index j = 0; j < m; ++j) z.col(j) = seqs[static_cast<std::size_t>(j)].row(0).transpose();
    features = z;
    if (!cfg.prox.active() || !cfg.prox.blocks.contains(l)) continue;
    prox::ProxSchedule schedule;
    schedule.lambda = cfg.prox.lambda;
    schedule.zero_diagonal = cfg.prox.zero_diagonal;
    if (cfg.prox.variant == Variant::FixedProx) {
      schedule = prox::ProxSchedule::fixed(z, static_cast<std::size_t>(cfg.prox.k_max), cfg.prox.lambda,
                                           cfg.prox.zero_diagonal);
    } else {
      std::vector<Matrix> rs;
      for (std::size_t k = 0; k < static_cast<std::size_t>(cfg.prox.k_max); ++k) {
        const double g = model.prox.at(l).gammas[k](0, 0);
        schedule.gammas.push_back(cfg.prox.gamma_scale == GammaScale::Spectral ? g * prox::default_step(z) : g);
        rs.push_back(prox::conform_preconditioner(model.prox.at(l).preconditioners[k], m));
      }
      schedule.preconditioners = rs;
    }
    const Matrix w0 = cfg.prox.w0 == W0Init::Zero ? Matrix(Matrix::Zero(m, m)) : Matrix(Matrix::Identity(m, m));
    features = prox::unroll(z, schedule, w0).z_hat;
    for (Index j = 0; j < m; ++j) seqs[static_cast<std::size_t>(j)].row(0) = features.col(j).transpose();
  }
  return (features.transpose() * model.classifier).rowwise() + model.bias.row(0);
}

}  // namespace

TEST_CASE("forward: baseline equivalence") {
  const data::DatasetSplit split = tiny_split(3, 6, 1);
  const std::vector<Image> batch = first_images(split, 5);
  Model base = Model::init(micro(2, 8, 2), 4);
  perturb(base, 5);
  const Matrix plain = forward_classify(base, batch);
  CHECK((plain - reference_logits(base, batch)).cwiseAbs().maxCoeff() <= 1e-12);

  for (Variant v : {Variant::FixedProx, Variant::LearnableProx}) {
    for (Index block : {Index(1), Index(2)}) {
      ModelConfig cfg = base.config;
      cfg.prox.variant = v;
      cfg.prox.blocks = {block};
      cfg.prox.k_max = 0;
      cfg.prox.w0 = W0Init::Identity;
      Model prox_model = Model::init(cfg, 4);
      prox_model.vit = base.vit;
      prox_model.classifier = base.classifier;
      prox_model.bias = base.bias;
      CHECK(forward_classify(prox_model, batch) == plain);
    }
  }
  // a prox setting without blocks is the baseline as well
  ModelConfig none = base.config;
  none.prox.variant = Variant::LearnableProx;
  Model idle = base;
  idle.config = none;
  CHECK(forward_classify(idle, batch) == plain);
}

TEST_CASE("forward: composition oracle") {
  const data::DatasetSplit split = tiny_split(3, 6, 2);
  const std::vector<Image> batch = first_images(split, 6);
  for (Variant v : {Variant::FixedProx, Variant::LearnableProx}) {
    for (const std::set<Index>& blocks : {std::set<Index>{2}, std::set<Index>{1}, std::set<Index>{1, 2}}) {
      ModelConfig cfg = micro(2, 8, 2);
      cfg.prox.variant = v;
      cfg.prox.blocks = blocks;
      cfg.prox.k_max = 2;
      cfg.prox.lambda = 0.02;
      Model model = Model::init(cfg, 7);
      perturb(model, 8, 0.2);
      const Matrix logits = forward_classify(model, batch);
      CHECK((logits - reference_logits(model, batch)).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
}

TEST_CASE("forward: spectral step scale") {
  const data::DatasetSplit split = tiny_split(3, 6, 12);
  const std::vector<Image> batch = first_images(split, 8);
  ModelConfig cfg = micro(2, 8, 2);
  cfg.prox.variant = Variant::FixedProx;
  cfg.prox.blocks = {2};
  cfg.prox.k_max = 3;
  cfg.prox.lambda = 0.01;
  Model fixed = Model::init(cfg, 13);
  perturb(fixed, 14, 0.2);
  cfg.prox.variant = Variant::LearnableProx;
  cfg.prox.gamma_scale = GammaScale::Spectral;
  cfg.prox.gamma_init = 1.0;
  Model learnable = Model::init(cfg, 13);
  learnable.vit = fixed.vit;
  learnable.classifier = fixed.classifier;
  learnable.bias = fixed.bias;
  // unit multiples of 1/σ² with R = I reproduce the fixed variant exactly
  CHECK(forward_classify(learnable, batch) == forward_classify(fixed, batch));
  perturb(learnable, 15, 0.05);
  CHECK((forward_classify(learnable, batch) - reference_logits(learnable, batch)).cwiseAbs().maxCoeff() <= 1e-10);
  cfg.prox.gamma_init = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("forward: batch requirements") {
  const data::DatasetSplit split = tiny_split(3, 4, 3);
  ModelConfig cfg = micro(1, 8, 2);
  cfg.prox.variant = Variant::FixedProx;
  cfg.prox.blocks = {1};
  const Model model = Model::init(cfg, 1);
  CHECK_THROWS_AS(forward_classify(model, first_images(split, 1)), ConfigError);
  CHECK_THROWS_AS(forward_classify(model, std::vector<Image>{}), UsageError);
  // the preconditioner is conformed to batches larger than the configured size
  cfg.prox.variant = Variant::LearnableProx;
  cfg.batch_size = 3;
  const Model small = Model::init(cfg, 1);
  const std::vector<Image> batch = first_images(split, 7);
  CHECK((forward_classify(small, batch) - reference_logits(small, batch)).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("ModelConfig::validate") {
  ModelConfig cfg = micro(2, 8, 2);
  CHECK_NOTHROW(cfg.validate());
  cfg.prox.blocks = {1};
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("prox.blocks"), ConfigError);
  cfg.prox.variant = Variant::FixedProx;
  CHECK_NOTHROW(cfg.validate());
  cfg.prox.blocks = {3};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.prox.blocks = {0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.prox.blocks = {2};
  cfg.batch_size = 1;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("batch_size"), ConfigError);
  CHECK(parse_variant(to_string(Variant::LearnableProx)) == Variant::LearnableProx);
  CHECK_THROWS(parse_variant("prox"));
}

TEST_CASE("classifier-only training separates two classes") {
  Rng rng(21);
  const Index d = 5, m = 40;
  const Vector normal = rng.normal_matrix(d, 1);
  Matrix x = rng.normal_matrix(d, m);
  std::vector<int> labels;
  for (Index j = 0; j < m; ++j) {
    const double side = normal.dot(x.col(j));
    x.col(j) += (side >= 0 ? 0.5 : -0.5) * normal.normalized();  // margin
    labels.push_back(side >= 0 ? 1 : 0);
  }
  Matrix weight = Matrix::Zero(d, 2), bias = Matrix::Zero(1, 2);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  Adam adam({&weight, &bias}, cfg);
  int reached = -1;
  for (int step = 0; step < 200 && reached < 0; ++step) {
    ad::Tape tape;
    const ad::Var w = tape.leaf(weight), b = tape.leaf(bias);
    const ad::Var logits = ad::add_row_broadcast(ad::transpose(tape.constant(x)) * w, b);
    const auto grads = ad::backward(tape, ad::cross_entropy(logits, labels));
    Index correct = 0;
    for (Index j = 0; j < m; ++j) {
      Index arg = 0;
      logits.value().row(j).maxCoeff(&arg);
      correct += arg == labels[static_cast<std::size_t>(j)];
    }
    if (correct == m) reached = step;
    adam.step({grads[w], grads[b]});
  }
  MESSAGE("100% train accuracy after " << reached << " steps");
  CHECK(reached >= 0);
}

TEST_CASE("one optimizer step on a frozen batch decreases the loss") {
  const data::DatasetSplit split = tiny_split(3, 6, 4);
  const std::vector<Image> batch = first_images(split, 8);
  const std::vector<int> labels(split.labels.begin(), split.labels.begin() + 8);
  for (Variant v : {Variant::Baseline, Variant::FixedProx, Variant::LearnableProx}) {
    ModelConfig cfg = micro(2, 8, 2);
    cfg.prox.variant = v;
    if (v != Variant::Baseline) cfg.prox.blocks = {2};
    cfg.prox.lambda = 0.02;
    const Model start = Model::init(cfg, 9);
    const double before = mean_cross_entropy(forward_classify(start, batch), labels);
    int decreased = 0;
    for (double lr : {1e-2, 1e-3, 1e-4}) {
      Model model = start;
      ad::Tape tape;
      std::vector<ad::Var> leaves;
      const ModelVars vars = train::bind(tape, model, true, &leaves);
      const auto grads = ad::backward(tape, ad::cross_entropy(forward(tape, model, vars, batch).logits, labels));
      std::vector<Matrix*> params;
      std::vector<Matrix> g;
      for (auto& [name, p] : model.named_tensors()) params.push_back(p);
      for (const ad::Var& leaf : leaves) g.push_back(grads[leaf]);
      TrainConfig tc;
      tc.learning_rate = lr;
      Adam adam(params, tc);
      adam.step(g);
      clamp_gammas(model);
      decreased += mean_cross_entropy(forward_classify(model, batch), labels) < before;
    }
    CHECK(decreased >= 1);
  }
}

TEST_CASE("end-to-end gradient matches finite differences") {
  const data::DatasetSplit split = tiny_split(3, 4, 5);
  const std::vector<Image> batch = first_images(split, 3);
  const std::vector<int> labels(split.labels.begin(), split.labels.begin() + 3);
  ModelConfig cfg = micro(1, 6, 2);
  cfg.batch_size = 3;
  cfg.prox.variant = Variant::LearnableProx;
  cfg.prox.blocks = {1};
  cfg.prox.k_max = 1;
  cfg.prox.lambda = 0.01;
  cfg.prox.w0 = W0Init::Identity;
  Model model = Model::init(cfg, 11);
  perturb(model, 12);

  ad::Tape tape;
  std::vector<ad::Var> leaves;
  const ModelVars vars = train::bind(tape, model, true, &leaves);
  const auto grads = ad::backward(tape, ad::cross_entropy(forward(tape, model, vars, batch).logits, labels));
  auto named = model.named_tensors();
  REQUIRE(named.size() == leaves.size());
  const double h = 1e-6;
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t t = 0; t < named.size(); ++t) {
    Matrix& p = *named[t].second;
    const Matrix analytic = grads[leaves[t]];
    for (Index i = 0; i < p.rows(); ++i) {
      for (Index j = 0; j < p.cols(); ++j) {
        const double keep = p(i, j);
        p(i, j) = keep + h;
        const double up = mean_cross_entropy(forward_classify(model, batch), labels);
        p(i, j) = keep - h;
        const double down = mean_cross_entropy(forward_classify(model, batch), labels);
        p(i, j) = keep;
        const double numeric = (up - down) / (2 * h);
        const double err = std::abs(numeric - analytic(i, j)) / std::max(1e-7 / 1e-4, std::abs(numeric));
        if (err > worst) {
          worst = err;
          worst_name = named[t].first;
        }
      }
    }
  }
  MESSAGE("worst relative error " << worst << " in " << worst_name);
  CHECK(worst <= 1e-4);
}

TEST_CASE("train: determinism and reporting") {
  const data::DatasetSplit split = tiny_split(3, 10, 6);
  ModelConfig cfg = micro(1, 8, 2);
  cfg.prox.variant = Variant::LearnableProx;
  cfg.prox.blocks = {1};
  cfg.prox.k_max = 2;
  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 3;
  std::vector<std::string> log_a, log_b;
  const TrainResult a = train::train(cfg, tc, split, [&](const StepLog& s) { log_a.push_back(s.to_json_line()); });
  const TrainResult b = train::train(cfg, tc, split, [&](const StepLog& s) { log_b.push_back(s.to_json_line()); });
  CHECK(a.report.to_json() == b.report.to_json());
  CHECK(a.report.to_csv() == b.report.to_csv());
  CHECK(log_a == log_b);
  CHECK(a.report.to_json().find("wall") == std::string::npos);
  REQUIRE(a.report.epochs.size() == 2);
  for (const EpochRecord& e : a.report.epochs) {
    CHECK(e.train_accuracy >= 0.0);
    CHECK(e.train_accuracy <= 1.0);
    CHECK(e.test_accuracy >= 0.0);
    CHECK(e.test_accuracy <= 1.0);
  }
  REQUIRE(a.report.objective_traces.count(1) == 1);
  CHECK(a.report.objective_traces.at(1).size() == 3);
  // 24 training samples in batches of 8: three steps per epoch
  CHECK(log_a.size() == 6);
  CHECK(log_a.front().find("\"batch_hash\"") != std::string::npos);

  tc.seed = 4;
  CHECK(train::train(cfg, tc, split).report.data_order != a.report.data_order);
}

TEST_CASE("train: errors") {
  data::DatasetSplit split = tiny_split(3, 4, 7);
  const ModelConfig cfg = micro(1, 8, 2);
  TrainConfig tc;
  tc.epochs = 1;
  data::DatasetSplit empty;
  CHECK_THROWS_AS(train::train(cfg, tc, empty), UsageError);
  ModelConfig two = cfg;
  two.num_classes = 2;
  CHECK_THROWS_AS(train::train(two, tc, split), UsageError);
  tc.learning_rate = -1;
  CHECK_THROWS_AS(train::train(cfg, tc, split), ConfigError);
}

TEST_CASE("evaluate") {
  const data::DatasetSplit split = tiny_split(4, 5, 8);
  SUBCASE("constant predictor on a balanced split") {
    Model model = Model::init(micro(1, 8, 2, 4), 1);
    model.classifier.setZero();
    model.bias << 1, 0, 0, 0;
    std::vector<Index> all(split.images.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
    const Evaluation ev = evaluate(model, split, all, 8, 0);
    CHECK(ev.accuracy == 0.25);
    CHECK(ev.w.size() == 0);
    CHECK(ev.pre.features == ev.post.features);
  }
  SUBCASE("prox exports satisfy Z_hat = Z W") {
    ModelConfig cfg = micro(2, 8, 2, 4);
    cfg.prox.variant = Variant::LearnableProx;
    cfg.prox.blocks = {1, 2};
    cfg.prox.lambda = 0.02;
    Model model = Model::init(cfg, 2);
    perturb(model, 3, 0.2);
    const Evaluation ev = evaluate(model, split, split.test, 3, 5);
    CHECK(ev.placement == 2);
    const Index n = static_cast<Index>(split.test.size());
    REQUIRE(ev.w.rows() == n);
    CHECK((ev.post.features - ev.pre.features * ev.w).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(ev.w.minCoeff() >= 0.0);
    // predictions agree with the per-batch logits
    for (const auto& b : ev.batches) {
      CHECK(b.size() >= 2);
      std::vector<Image> imgs;
      for (Index p : b) imgs.push_back(split.images[static_cast<std::size_t>(split.test[static_cast<std::size_t>(p)])]);
      const Matrix logits = forward_classify(model, imgs);
      for (std::size_t i = 0; i < b.size(); ++i) {
        Index arg = 0;
        logits.row(static_cast<Index>(i)).maxCoeff(&arg);
        CHECK(ev.predictions[static_cast<std::size_t>(b[i])] == arg);
      }
    }
    CHECK(evaluate(model, split, split.test, 3, 5).post.features == ev.post.features);
  }
}

TEST_CASE("placement_sweep") {
  const data::DatasetSplit split = tiny_split(3, 8, 9);
  ModelConfig base = micro(2, 8, 2);
  base.prox.k_max = 2;
  TrainConfig tc;
  tc.epochs = 1;
  tc.seed = 2;
  const auto one = placement_sweep(base, tc, split, {{}});
  REQUIRE(one.size() == 1);
  CHECK(one[0].blocks == "none");

  std::vector<std::vector<std::uint64_t>> hashes(2);
  std::size_t arm = 0;
  Index last_step = -1;
  const auto rows = placement_sweep(base, tc, split, {{}, {2}}, [&](const StepLog& s) {
    if (s.step <= last_step) ++arm;
    last_step = s.step;
    hashes[arm].push_back(s.batch_hash);
  });
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].blocks == "2");
  CHECK(rows[0].data_order == rows[1].data_order);
  CHECK(rows[0].seed == 2);
  CHECK(hashes[0] == hashes[1]);
  CHECK(blocks_label({1, 2}) == "1+2");
  const std::string csv = sweep_csv(rows);
  CHECK(csv.rfind("blocks,accuracy,seed", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK_THROWS_AS(placement_sweep(base, tc, split, {{3}}), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "proxbundle_test_checkpoint";
  fs::remove_all(dir);
  ModelConfig cfg = micro(2, 8, 2);
  cfg.prox.variant = Variant::LearnableProx;
  cfg.prox.blocks = {1, 2};
  cfg.prox.k_max = 2;
  Model model = Model::init(cfg, 3);
  perturb(model, 4);
  save_checkpoint(model, dir);
  const Model loaded = load_checkpoint(dir);
  CHECK(model_config_json(loaded.config) == model_config_json(model.config));
  const auto a = model.named_tensors();
  const auto b = loaded.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(*a[i].second == *b[i].second);
  }
  const data::DatasetSplit split = tiny_split(3, 4, 10);
  CHECK(forward_classify(loaded, first_images(split, 4)) == forward_classify(model, first_images(split, 4)));

  fs::remove(dir / "classifier.weight.pxb");
  CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), FormatError);
  fs::remove_all(dir);
}

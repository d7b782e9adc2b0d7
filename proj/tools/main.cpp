#include "experiment.hpp"

#include "proxbundle/core/file_io.hpp"
#include "proxbundle/core/json_fields.hpp"
#include "proxbundle/core/pxb1.hpp"
#include "proxbundle/geometry/geometry.hpp"
#include "proxbundle/prox/prox.hpp"
#include "proxbundle/train/checkpoint.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace proxbundle;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "configuration document (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "seed, overrides the document");
  cmd->add_option("--out", c.out, "output directory, overrides the document");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json read_document(const std::string& path) {
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": not valid JSON (" + e.what() + ")");
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

cli::ExperimentConfig experiment(const Common& c) {
  cli::ExperimentConfig cfg = cli::load_experiment(c.config);
  std::optional<fs::path> out;
  if (c.out) out = *c.out;
  cli::apply_overrides(cfg, c.seed, out);
  return cfg;
}

// -- train -----------------------------------------------------------------------------

int cmd_train(const Common& c) {
  cli::ExperimentConfig cfg = experiment(c);
  const data::DatasetSplit split = cli::load_dataset(cfg);
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  io::write_text(out / "config.json", cli::experiment_json(cfg));

  std::ofstream log(out / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (out / "train_log.jsonl").string());
  const train::TrainResult result =
      train::train(cfg.model, cfg.train, split, [&](const train::StepLog& s) { log << s.to_json_line() << "\n"; });
  log.close();
  if (!log) throw std::runtime_error("write failed: " + (out / "train_log.jsonl").string());

  io::write_text(out / "report.json", result.report.to_json());
  io::write_text(out / "report.csv", result.report.to_csv());
  train::save_checkpoint(result.model, out / "checkpoint");

  const train::Evaluation ev =
      train::evaluate(result.model, split, split.test, cfg.model.batch_size, cfg.seed);
  pxb1::write(out / "features_pre.pxb", ev.pre.features);
  pxb1::write(out / "features_post.pxb", ev.post.features);
  data::write_labels_json(out / "labels.json", ev.pre.labels);
  if (ev.w.size() > 0) pxb1::write(out / "coefficients.pxb", ev.w);

  nlohmann::ordered_json timing;
  timing["wall_clock_seconds"] = result.report.wall_clock_seconds;
  io::write_text(out / "timing.json", timing.dump(2) + "\n");
  std::cout << "test accuracy " << fmt(result.report.final_test_accuracy) << ", outputs in " << out.string() << "\n";
  return kOk;
}

// -- sweep -----------------------------------------------------------------------------

int cmd_sweep(const Common& c, const std::optional<std::string>& placements_flag) {
  cli::ExperimentConfig cfg = experiment(c);
  if (placements_flag) cfg.placements = *placements_flag;
  if (cfg.placements.empty()) throw ConfigError("sweep.placements: required (document or --placements)");
  const auto placements = cli::parse_placements(cfg.placements, cfg.model.vit.num_layers);
  const data::DatasetSplit split = cli::load_dataset(cfg);
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  io::write_text(out / "config.json", cli::experiment_json(cfg));
  const auto rows = train::placement_sweep(cfg.model, cfg.train, split, placements);
  io::write_text(out / "sweep.csv", train::sweep_csv(rows));
  for (const auto& r : rows) std::cout << r.blocks << " " << fmt(r.accuracy) << "\n";
  return kOk;
}

// -- geometry --------------------------------------------------------------------------

struct GeometryArgs {
  std::string features, labels;
  std::optional<std::string> post;
  bool tsne = false;
  std::optional<double> perplexity, learning_rate;
  std::optional<Index> iterations;
};

geometry::TsneConfig tsne_config(const Common& c, const GeometryArgs& g) {
  geometry::TsneConfig t;
  if (!c.config.empty()) {
    const nlohmann::json doc = read_document(c.config);
    JsonFields f(doc, "");
    f.get("seed", t.seed);
    JsonFields s = f.object("tsne");
    s.get("perplexity", t.perplexity);
    s.get("iterations", t.iterations);
    s.get("learning_rate", t.learning_rate);
    s.get("exaggeration", t.exaggeration);
    s.get("exaggeration_iterations", t.exaggeration_iterations);
    s.get("momentum_initial", t.momentum_initial);
    s.get("momentum_final", t.momentum_final);
    s.get("momentum_switch", t.momentum_switch);
    s.get("init_stddev", t.init_stddev);
    s.finish();
    f.finish();
  }
  if (c.seed) t.seed = *c.seed;
  if (g.perplexity) t.perplexity = *g.perplexity;
  if (g.iterations) t.iterations = *g.iterations;
  if (g.learning_rate) t.learning_rate = *g.learning_rate;
  if (t.iterations < 1) throw ConfigError("tsne.iterations: must be >= 1");
  if (!(t.learning_rate > 0)) throw ConfigError("tsne.learning_rate: must be > 0");
  return t;
}

void write_tsne(const fs::path& out, const std::string& stem, const data::LabeledFeatures& lf,
                const geometry::TsneConfig& cfg) {
  const geometry::TsneResult r = geometry::tsne_embed(lf.features, cfg);
  std::ostringstream coords, kl;
  coords << "x,y,label\n";
  for (Index i = 0; i < r.embedding.rows(); ++i)
    coords << fmt(r.embedding(i, 0)) << "," << fmt(r.embedding(i, 1)) << "," << lf.labels[static_cast<std::size_t>(i)] << "\n";
  kl << "iteration,kl\n";
  for (std::size_t t = 0; t < r.kl.size(); ++t) kl << t + 1 << "," << fmt(r.kl[t]) << "\n";
  io::write_text(out / (stem + ".csv"), coords.str());
  io::write_text(out / (stem + "_kl.csv"), kl.str());
}

int cmd_geometry(const Common& c, const GeometryArgs& g) {
  const geometry::TsneConfig tcfg = tsne_config(c, g);
  const data::LabeledFeatures pre = data::import_features(g.features, g.labels);
  const data::LabeledFeatures post = g.post ? data::import_features(*g.post, g.labels) : pre;
  const fs::path out = c.out.value_or("out");
  fs::create_directories(out);

  const geometry::SeparabilityReport report = geometry::separability_report(pre, post);
  std::vector<std::string> header;
  for (Index k = 0; k < report.distances_pre.rows(); ++k) header.push_back("class" + std::to_string(k));
  io::write_text(out / "distances.csv", geometry::matrix_csv(report.distances_pre, header));
  if (g.post) io::write_text(out / "distances_post.csv", geometry::matrix_csv(report.distances_post, header));
  io::write_text(out / "separability.json", report.to_json());
  if (g.tsne) {
    write_tsne(out, "tsne", pre, tcfg);
    if (g.post) write_tsne(out, "tsne_post", post, tcfg);
  }
  std::cout << "mean inter-class W1 " << fmt(report.inter_pre);
  if (g.post) std::cout << " -> " << fmt(report.inter_post);
  std::cout << "\n";
  return kOk;
}

// -- prox-bench ------------------------------------------------------------------------

struct BenchArgs {
  std::string features;
  std::optional<Index> k_max;
  std::optional<double> lambda;
  bool zero_diagonal = false;
  std::optional<std::string> w0;
  std::optional<std::string> checkpoint;
  std::optional<Index> block;
};

int cmd_prox_bench(const Common& c, const BenchArgs& b) {
  train::ProxSettings settings;
  settings.variant = train::Variant::FixedProx;
  if (!c.config.empty()) {
    const nlohmann::json doc = read_document(c.config);
    JsonFields f(doc, "");
    std::uint64_t unused = 0;
    f.get("seed", unused);
    JsonFields p = f.object("prox");
    std::string w0 = train::to_string(settings.w0);
    p.get("lambda", settings.lambda);
    p.get("k_max", settings.k_max);
    p.get("zero_diagonal", settings.zero_diagonal);
    p.get("w0", w0);
    p.finish();
    f.finish();
    settings.w0 = train::parse_w0(w0);
  }

  std::optional<train::Model> model;
  if (b.checkpoint) {
    if (b.k_max || b.lambda || b.zero_diagonal) {
      throw UsageError("prox-bench: --k-max, --lambda and --zero-diagonal come from the checkpoint");
    }
    model = train::load_checkpoint(*b.checkpoint);
    const train::ProxSettings& ps = model->config.prox;
    if (!ps.active()) throw UsageError("prox-bench: checkpoint has no prox placement");
    const Index block = b.block.value_or(*ps.blocks.rbegin());
    if (!ps.blocks.contains(block)) throw UsageError("prox-bench: block " + std::to_string(block) + " has no placement");
    settings = ps;
    settings.blocks = {block};
  } else if (b.block) {
    throw UsageError("prox-bench: --block needs --checkpoint");
  }
  if (b.k_max) settings.k_max = *b.k_max;
  if (b.lambda) settings.lambda = *b.lambda;
  if (b.zero_diagonal) settings.zero_diagonal = true;
  if (b.w0) {
    try {
      settings.w0 = train::parse_w0(*b.w0);
    } catch (const std::exception&) {
      throw UsageError("--w0: expected zero or identity");
    }
  }
  if (settings.k_max < 0) throw UsageError("--k-max: must be >= 0");
  if (!(settings.lambda >= 0)) throw UsageError("--lambda: must be >= 0");

  const Matrix z = pxb1::read(b.features);
  const Index m = z.cols();
  if (m < 2) throw UsageError("prox-bench: need at least 2 columns, got " + std::to_string(m));
  if (!all_finite(z)) throw UsageError("prox-bench: features contain non-finite values");

  prox::ProxSchedule schedule;
  if (settings.variant == train::Variant::LearnableProx) {
    const train::PlacementParams& pp = model->prox.at(*settings.blocks.begin());
    std::vector<Matrix> rs;
    schedule.lambda = settings.lambda;
    schedule.zero_diagonal = settings.zero_diagonal;
    const double unit = settings.gamma_scale == train::GammaScale::Spectral ? prox::default_step(z) : 1.0;
    for (std::size_t k = 0; k < pp.gammas.size(); ++k) {
      schedule.gammas.push_back(pp.gammas[k](0, 0) * unit);
      rs.push_back(prox::conform_preconditioner(pp.preconditioners[k], m));
    }
    schedule.preconditioners = std::move(rs);
  } else {
    schedule = prox::ProxSchedule::fixed(z, static_cast<std::size_t>(settings.k_max), settings.lambda,
                                         settings.zero_diagonal);
  }
  const Matrix w0 = settings.w0 == train::W0Init::Zero ? Matrix(Matrix::Zero(m, m)) : Matrix(Matrix::Identity(m, m));
  const prox::SelfRepresentation rep = prox::unroll(z, schedule, w0);

  const fs::path out = c.out.value_or("out");
  fs::create_directories(out);
  std::ostringstream trace;
  trace << "iteration,objective\n";
  for (std::size_t k = 0; k < rep.objective_trace.size(); ++k) trace << k << "," << fmt(rep.objective_trace[k]) << "\n";
  io::write_text(out / "trace.csv", trace.str());
  pxb1::write(out / "w.pxb", rep.w_final);
  std::cout << "F(W) " << fmt(rep.objective_trace.front()) << " -> " << fmt(rep.objective_trace.back()) << "\n";
  return kOk;
}

void check_thread_env() {
  const char* env = std::getenv("PROXBUNDLE_THREADS");
  if (!env) return;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*env == '\0' || *end != '\0' || v < 1) {
    throw UsageError(std::string("PROXBUNDLE_THREADS: expected a positive integer, got \"") + env + "\"");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Proximal self-expression on a toy vision transformer"};
  app.require_subcommand(1);

  Common train_c, sweep_c, geo_c, bench_c;
  auto* train_cmd = app.add_subcommand("train", "train one model and export its report, log and checkpoint");
  add_common(train_cmd, train_c, true);

  auto* sweep_cmd = app.add_subcommand("sweep", "train one model per placement");
  add_common(sweep_cmd, sweep_c, true);
  std::optional<std::string> placements;
  sweep_cmd->add_option("--placements", placements, "e.g. \"none;2;L\"");

  auto* geo_cmd = app.add_subcommand("geometry", "class-wise Wasserstein distances and t-SNE");
  add_common(geo_cmd, geo_c, false);
  GeometryArgs geo;
  geo_cmd->add_option("--features", geo.features, "PXB1 feature matrix, one column per sample")->required();
  geo_cmd->add_option("--labels", geo.labels, "JSON labels")->required();
  geo_cmd->add_option("--post", geo.post, "PXB1 features after the prox, same labels");
  geo_cmd->add_flag("--tsne", geo.tsne, "also write t-SNE coordinates and the KL trace");
  geo_cmd->add_option("--perplexity", geo.perplexity);
  geo_cmd->add_option("--tsne-iterations", geo.iterations);
  geo_cmd->add_option("--tsne-lr", geo.learning_rate);

  auto* bench_cmd = app.add_subcommand("prox-bench", "run the proximal unroll on a feature matrix");
  add_common(bench_cmd, bench_c, false);
  BenchArgs bench;
  bench_cmd->add_option("--features", bench.features, "PXB1 feature matrix Z (d x m)")->required();
  bench_cmd->add_option("--k-max", bench.k_max);
  bench_cmd->add_option("--lambda", bench.lambda);
  bench_cmd->add_flag("--zero-diagonal", bench.zero_diagonal);
  bench_cmd->add_option("--w0", bench.w0, "zero | identity");
  bench_cmd->add_option("--checkpoint", bench.checkpoint, "use the learned schedule of a checkpoint");
  bench_cmd->add_option("--block", bench.block, "placement block inside the checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    check_thread_env();
    if (*train_cmd) return cmd_train(train_c);
    if (*sweep_cmd) return cmd_sweep(sweep_c, placements);
    if (*geo_cmd) return cmd_geometry(geo_c, geo);
    if (*bench_cmd) return cmd_prox_bench(bench_c, bench);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

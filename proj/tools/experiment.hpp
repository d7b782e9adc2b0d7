#pragma once

// The experiment document shared by `train` and `sweep`.

#include "proxbundle/data/dataset.hpp"
#include "proxbundle/train/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace proxbundle::cli {

struct DataSpec {
  std::string source;  // "synthetic" | "idx"
  int classes = 3;
  Index samples_per_class = 60;
  Index height = 16;
  Index width = 16;
  double noise = 0.5;
  Index max_shift = 1;
  double test_fraction = 0.2;
  std::optional<std::uint64_t> seed;  // defaults to the run seed
  std::filesystem::path images, labels;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  DataSpec data;
  train::ModelConfig model;
  train::TrainConfig train;
  std::string placements;  // sweep only; empty when absent
};

/// Parses and validates the document at `path`; relative data paths resolve against its
/// directory. ConfigError names the offending field.
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Applies --seed / --out style overrides and re-validates.
void apply_overrides(ExperimentConfig& cfg, std::optional<std::uint64_t> seed,
                     const std::optional<std::filesystem::path>& out);

/// Loads or generates the dataset and completes the image geometry of cfg.model.
data::DatasetSplit load_dataset(ExperimentConfig& cfg);

/// "∅;2;L" style list: placements separated by ';', blocks within one by '+' or ',';
/// "∅", "none" or an empty item for the baseline, "L" and "L/2" relative to num_layers.
std::vector<std::set<Index>> parse_placements(const std::string& text, Index num_layers);

/// The effective configuration, for writing next to outputs.
std::string experiment_json(const ExperimentConfig& cfg);

}  // namespace proxbundle::cli

#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ecgnat/model.hpp"

// Run-level configuration: architecture plus training and plumbing keys,
// materialized from defaults, an optional key=value file (# comments), and
// key=value overrides that win over the file. The resolved config serializes
// to JSON for checkpoint and log headers.

namespace ecgnat {

struct RunConfig {
  ModelConfig model;

  // optimization
  double lr = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 4e-4;
  int64_t batch_size = 32;
  int64_t epochs = 10;
  int64_t checkpoint_every = 5;

  // fine-tuning protocol
  std::string mode = "full_finetune";  // full_finetune | linear_eval
  double label_fraction = 1.0;
  double train_frac = 0.8;
  int64_t split_repeats = 5;
  std::string ablation;  // "" | zero-mask

  // plumbing
  uint64_t seed = 0;
  int64_t threads = 1;
  std::string precision = "f32";  // f32 | f64
  std::string data_dir;
  std::string manifest;
  std::string out_dir = ".";
  std::string init_checkpoint;

  // every violated constraint, architecture and run keys alike
  std::vector<std::string> collect_errors() const;
  // throws ConfigError listing all collected errors at once
  void validate() const;
  // fully materialized flat JSON object (single line)
  std::string to_json() const;
};

// assign one key=value pair; unknown keys and unparsable values are reported
// through errs instead of throwing
void apply_kv(RunConfig& rc, const std::string& key, const std::string& value, std::vector<std::string>& errs);

// defaults -> file (optional, "" to skip) -> overrides ("key=value" each).
// When no source sets `seed`, the ECGNAT_SEED environment variable fills it.
// Throws ConfigError listing every parse and validation problem.
RunConfig make_run_config(const std::string& config_path, const std::vector<std::string>& overrides);

// append-only CSV log: on a fresh file writes `# <header_json>` then the
// column row; on an existing file just appends
class CsvLogger {
 public:
  CsvLogger(const std::string& path, const std::string& header_json, const std::string& columns);
  void row(const std::string& line);

 private:
  std::ofstream out_;
  std::string path_;
};

}  // namespace ecgnat

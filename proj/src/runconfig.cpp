#include "ecgnat/runconfig.hpp"

#include <cstdlib>
#include <filesystem>

#include <json.hpp>

namespace ecgnat {

namespace {

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_i64(const std::string& v, int64_t& out) {
  try {
    size_t used = 0;
    out = std::stoll(v, &used);
    return used == v.size();
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_u64(const std::string& v, uint64_t& out) {
  if (!v.empty() && v[0] == '-') return false;
  try {
    size_t used = 0;
    out = std::stoull(v, &used);
    return used == v.size();
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_f64(const std::string& v, double& out) {
  try {
    size_t used = 0;
    out = std::stod(v, &used);
    return used == v.size();
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_heads(const std::string& v, std::array<int64_t, 4>& out) {
  std::array<int64_t, 4> tmp{};
  size_t start = 0;
  for (int i = 0; i < 4; ++i) {
    const size_t comma = v.find(',', start);
    const bool last = i == 3;
    if (last != (comma == std::string::npos)) return false;
    const std::string part = trim(last ? v.substr(start) : v.substr(start, comma - start));
    if (!parse_i64(part, tmp[size_t(i)])) return false;
    start = comma + 1;
  }
  out = tmp;
  return true;
}

}  // namespace

void apply_kv(RunConfig& rc, const std::string& key, const std::string& value, std::vector<std::string>& errs) {
  const auto bad = [&](const char* want) {
    errs.push_back("key `" + key + "`: cannot parse `" + value + "` as " + want);
  };

  if (key == "n_leads") { if (!parse_i64(value, rc.model.n_leads)) bad("integer"); return; }
  if (key == "input_len") { if (!parse_i64(value, rc.model.input_len)) bad("integer"); return; }
  if (key == "embed_dim") { if (!parse_i64(value, rc.model.embed_dim)) bad("integer"); return; }
  if (key == "stage_heads") { if (!parse_heads(value, rc.model.stage_heads)) bad("4 comma-separated integers"); return; }
  if (key == "mlp_ratio") { if (!parse_f64(value, rc.model.mlp_ratio)) bad("real"); return; }
  if (key == "window_k") { if (!parse_i64(value, rc.model.window_k)) bad("integer"); return; }
  if (key == "blocks_per_stage") { if (!parse_i64(value, rc.model.blocks_per_stage)) bad("integer"); return; }
  if (key == "n_classes") { if (!parse_i64(value, rc.model.n_classes)) bad("integer"); return; }
  if (key == "noise_std") { if (!parse_f64(value, rc.model.noise_std)) bad("real"); return; }
  if (key == "mask_ratio") { if (!parse_f64(value, rc.model.mask_ratio)) bad("real"); return; }
  if (key == "tau") { if (!parse_f64(value, rc.model.tau)) bad("real"); return; }
  if (key == "alpha") { if (!parse_f64(value, rc.model.alpha)) bad("real"); return; }

  if (key == "lr") { if (!parse_f64(value, rc.lr)) bad("real"); return; }
  if (key == "lr_min") { if (!parse_f64(value, rc.lr_min)) bad("real"); return; }
  if (key == "weight_decay") { if (!parse_f64(value, rc.weight_decay)) bad("real"); return; }
  if (key == "batch_size") { if (!parse_i64(value, rc.batch_size)) bad("integer"); return; }
  if (key == "epochs") { if (!parse_i64(value, rc.epochs)) bad("integer"); return; }
  if (key == "checkpoint_every") { if (!parse_i64(value, rc.checkpoint_every)) bad("integer"); return; }

  if (key == "mode") { rc.mode = value; return; }
  if (key == "label_fraction") { if (!parse_f64(value, rc.label_fraction)) bad("real"); return; }
  if (key == "train_frac") { if (!parse_f64(value, rc.train_frac)) bad("real"); return; }
  if (key == "split_repeats") { if (!parse_i64(value, rc.split_repeats)) bad("integer"); return; }
  if (key == "ablation") { rc.ablation = value; return; }

  if (key == "seed") { if (!parse_u64(value, rc.seed)) bad("unsigned integer"); return; }
  if (key == "threads") { if (!parse_i64(value, rc.threads)) bad("integer"); return; }
  if (key == "precision") { rc.precision = value; return; }
  if (key == "data_dir") { rc.data_dir = value; return; }
  if (key == "manifest") { rc.manifest = value; return; }
  if (key == "out_dir") { rc.out_dir = value; return; }
  if (key == "init_checkpoint") { rc.init_checkpoint = value; return; }

  errs.push_back("unknown key `" + key + "`");
}

std::vector<std::string> RunConfig::collect_errors() const {
  std::vector<std::string> errs;
  model.collect_errors(errs);
  if (!(lr > 0)) errs.push_back("lr must be positive");
  if (lr_min < 0) errs.push_back("lr_min must be >= 0");
  if (lr > 0 && lr_min > lr) errs.push_back("lr_min must not exceed lr");
  if (weight_decay < 0) errs.push_back("weight_decay must be >= 0");
  if (batch_size < 1) errs.push_back("batch_size must be >= 1");
  if (epochs < 1) errs.push_back("epochs must be >= 1");
  if (checkpoint_every < 1) errs.push_back("checkpoint_every must be >= 1");
  if (mode != "full_finetune" && mode != "linear_eval")
    errs.push_back("mode must be full_finetune or linear_eval, got `" + mode + "`");
  if (!(label_fraction > 0 && label_fraction <= 1)) errs.push_back("label_fraction must be in (0,1]");
  if (!(train_frac > 0 && train_frac < 1)) errs.push_back("train_frac must be in (0,1)");
  if (split_repeats < 1) errs.push_back("split_repeats must be >= 1");
  if (!ablation.empty() && ablation != "zero-mask")
    errs.push_back("ablation must be empty or zero-mask, got `" + ablation + "`");
  if (threads < 1) errs.push_back("threads must be >= 1");
  if (precision != "f32" && precision != "f64")
    errs.push_back("precision must be f32 or f64, got `" + precision + "`");
  return errs;
}

void RunConfig::validate() const {
  const std::vector<std::string> errs = collect_errors();
  if (errs.empty()) return;
  std::string msg = "invalid configuration (" + std::to_string(errs.size()) + " problem" +
                    (errs.size() == 1 ? "" : "s") + "):";
  for (const std::string& e : errs) msg += "\n  - " + e;
  throw ConfigError(msg);
}

std::string RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["n_leads"] = model.n_leads;
  j["input_len"] = model.input_len;
  j["embed_dim"] = model.embed_dim;
  j["stage_heads"] = model.stage_heads;
  j["mlp_ratio"] = model.mlp_ratio;
  j["window_k"] = model.window_k;
  j["blocks_per_stage"] = model.blocks_per_stage;
  j["n_classes"] = model.n_classes;
  j["noise_std"] = model.noise_std;
  j["mask_ratio"] = model.mask_ratio;
  j["tau"] = model.tau;
  j["alpha"] = model.alpha;
  j["lr"] = lr;
  j["lr_min"] = lr_min;
  j["weight_decay"] = weight_decay;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["checkpoint_every"] = checkpoint_every;
  j["mode"] = mode;
  j["label_fraction"] = label_fraction;
  j["train_frac"] = train_frac;
  j["split_repeats"] = split_repeats;
  j["ablation"] = ablation;
  j["seed"] = seed;
  j["threads"] = threads;
  j["precision"] = precision;
  j["data_dir"] = data_dir;
  j["manifest"] = manifest;
  j["out_dir"] = out_dir;
  j["init_checkpoint"] = init_checkpoint;
  return j.dump();
}

RunConfig make_run_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig rc;
  std::vector<std::string> errs;
  bool seed_set = false;

  const auto assign = [&](const std::string& key, const std::string& value) {
    apply_kv(rc, key, value, errs);
    if (key == "seed") seed_set = true;
  };

  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw IoError("config: cannot open " + config_path);
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const size_t eq = t.find('=');
      if (eq == std::string::npos) {
        errs.push_back(config_path + ":" + std::to_string(line_no) + ": expected key=value, got `" + t + "`");
        continue;
      }
      assign(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
  }

  for (const std::string& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos) {
      errs.push_back("override `" + ov + "` is not key=value");
      continue;
    }
    assign(trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
  }

  if (!seed_set) {
    if (const char* env = std::getenv("ECGNAT_SEED")) {
      uint64_t s = 0;
      if (parse_u64(trim(env), s))
        rc.seed = s;
      else
        errs.push_back("ECGNAT_SEED `" + std::string(env) + "` is not an unsigned integer");
    }
  }

  for (const std::string& e : rc.collect_errors()) errs.push_back(e);
  if (!errs.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(errs.size()) + " problem" +
                      (errs.size() == 1 ? "" : "s") + "):";
    for (const std::string& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return rc;
}

CsvLogger::CsvLogger(const std::string& path, const std::string& header_json, const std::string& columns)
    : path_(path) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  if (const auto dir = std::filesystem::path(path).parent_path(); !dir.empty())
    std::filesystem::create_directories(dir);
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("log: cannot open " + path);
  if (fresh) {
    out_ << "# " << header_json << "\n" << columns << "\n";
    out_.flush();
  }
}

void CsvLogger::row(const std::string& line) {
  out_ << line << "\n";
  out_.flush();
  if (!out_) throw IoError("log: short write to " + path_);
}

}  // namespace ecgnat

// Command-line front end: synthetic corpus generation, masked-autoencoder
// pretraining, dual-loss fine-tuning, evaluation, kernel benchmarking, and
// build self-verification, all driven by one key=value run configuration.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure,
// 3 verification failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "ecgnat/checkpoint.hpp"
#include "ecgnat/data.hpp"
#include "ecgnat/metrics.hpp"
#include "ecgnat/natten.hpp"
#include "ecgnat/runconfig.hpp"
#include "ecgnat/train.hpp"
#include "ecgnat/verify.hpp"

namespace fs = std::filesystem;
using ecgnat::Checkpoint;
using ecgnat::ConfigError;
using ecgnat::Dataset;
using ecgnat::RunConfig;
using ecgnat::Tensor;
using ecgnat::TrainState;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string fmt_g(double v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// manifest rows -> preprocessed in-memory dataset. Relative record paths
// resolve against data_dir when set, else against the manifest's own
// directory (a corpus is self-contained); a manifest label overrides the
// sidecar's (the manifest is the labeling document).
Dataset load_manifest_dataset(const std::string& manifest, const std::string& data_dir) {
  const std::vector<ecgnat::ManifestEntry> entries = ecgnat::read_manifest(manifest);
  if (entries.empty()) throw ConfigError("manifest " + manifest + " lists no records");
  const fs::path base = data_dir.empty() ? fs::path(manifest).parent_path() : fs::path(data_dir);
  std::vector<ecgnat::SignalRecord> raw;
  raw.reserve(entries.size());
  for (const auto& e : entries) {
    fs::path path(e.path);
    if (!path.is_absolute()) path = base / path;
    ecgnat::SignalRecord rec = ecgnat::read_record(path.string());
    if (e.label >= 0) rec.label = e.label;
    raw.push_back(std::move(rec));
  }
  return ecgnat::make_dataset(raw);
}

void require_labels(const Dataset& ds, const std::string& manifest) {
  for (size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] < 0)
      throw ConfigError("record " + std::to_string(i) + " of " + manifest +
                        " has no label; labeled data is required here");
}

int64_t label_span(const Dataset& ds) {
  int64_t hi = -1;
  for (int64_t l : ds.labels) hi = std::max(hi, l);
  return hi + 1;
}

// shape-determining fields only: a pretrained encoder may be fine-tuned
// under different loss knobs (alpha, tau, masking), but never a different
// architecture. Returns "" when compatible, else the first mismatch.
std::string arch_mismatch(const ecgnat::ModelConfig& a, const ecgnat::ModelConfig& b) {
  auto diff = [](const char* name, auto x, auto y) {
    std::ostringstream os;
    os << name << " " << x << " vs " << y;
    return os.str();
  };
  if (a.n_leads != b.n_leads) return diff("n_leads", a.n_leads, b.n_leads);
  if (a.input_len != b.input_len) return diff("input_len", a.input_len, b.input_len);
  if (a.embed_dim != b.embed_dim) return diff("embed_dim", a.embed_dim, b.embed_dim);
  for (size_t s = 0; s < a.stage_heads.size(); ++s)
    if (a.stage_heads[s] != b.stage_heads[s])
      return diff(("stage_heads[" + std::to_string(s) + "]").c_str(), a.stage_heads[s], b.stage_heads[s]);
  if (a.mlp_ratio != b.mlp_ratio) return diff("mlp_ratio", a.mlp_ratio, b.mlp_ratio);
  if (a.window_k != b.window_k) return diff("window_k", a.window_k, b.window_k);
  if (a.blocks_per_stage != b.blocks_per_stage)
    return diff("blocks_per_stage", a.blocks_per_stage, b.blocks_per_stage);
  if (a.n_classes != b.n_classes) return diff("n_classes", a.n_classes, b.n_classes);
  return "";
}

std::vector<int64_t> labels_at(const Dataset& ds, const std::vector<size_t>& idx) {
  std::vector<int64_t> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(ds.labels[i]);
  return out;
}

void save_train_checkpoint(const TrainState& st, const RunConfig& rc, const std::string& path) {
  Checkpoint ck = ecgnat::to_checkpoint(st);
  ck.run_json = rc.to_json();
  ecgnat::save_checkpoint(path, ck);
}

struct MeanStd {
  double mean = 0, sd = 0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= double(xs.size());
  if (xs.size() > 1) {
    double acc = 0;
    for (double x : xs) acc += (x - m.mean) * (x - m.mean);
    m.sd = std::sqrt(acc / double(xs.size() - 1));
  }
  return m;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& rc, int64_t n_per_class) {
  ecgnat::ThreadPool::configure(int(rc.threads));
  const std::vector<ecgnat::SignalRecord> records = ecgnat::synth_corpus(n_per_class, rc.seed);

  const std::string rec_dir = rc.out_dir + "/records";
  fs::create_directories(rec_dir);
  std::vector<ecgnat::ManifestEntry> entries;
  entries.reserve(records.size());
  for (const auto& rec : records) {
    ecgnat::ManifestEntry e;
    // store paths relative to the manifest so the corpus directory is
    // relocatable and same-seed reruns are byte-identical anywhere
    const std::string written = ecgnat::write_record(rec_dir, rec);
    e.path = "records/" + fs::path(written).filename().string();
    e.label = rec.label;
    entries.push_back(std::move(e));
  }
  const std::string manifest = rc.out_dir + "/manifest.csv";
  ecgnat::write_manifest(manifest, entries);
  std::printf("wrote %zu records (%lld per class) and %s\n", records.size(),
              static_cast<long long>(n_per_class), manifest.c_str());
  return 0;
}

int cmd_pretrain(const RunConfig& rc) {
  ecgnat::ThreadPool::configure(int(rc.threads));
  if (rc.manifest.empty()) throw ConfigError("pretrain: --manifest is required");

  std::vector<Dataset> owned;
  for (const std::string& m : split_commas(rc.manifest))
    owned.push_back(load_manifest_dataset(m, rc.data_dir));
  std::vector<const Dataset*> data;
  int64_t steps_per_epoch = 0;
  for (const Dataset& d : owned) {
    data.push_back(&d);
    steps_per_epoch += (int64_t(d.size()) + rc.batch_size - 1) / rc.batch_size;
  }

  TrainState st = ecgnat::make_train_state(rc, uint64_t(rc.epochs) * uint64_t(steps_per_epoch), false);
  if (!rc.init_checkpoint.empty()) {
    ecgnat::restore_train_state(st, ecgnat::load_checkpoint(rc.init_checkpoint));
    std::printf("resumed from %s at epoch %" PRIu64 "\n", rc.init_checkpoint.c_str(), st.epoch);
  }

  fs::create_directories(rc.out_dir);
  ecgnat::CsvLogger log(rc.out_dir + "/pretrain_log.csv", rc.to_json(), "epoch,step,recon_loss,lr");

  // fresh runs log the untrained model's masked reconstruction loss as the
  // epoch-0 baseline; resumed runs already have one in their original log
  if (st.epoch == 0) {
    const double base =
        ecgnat::eval_recon_loss(st.model, data, rc, ecgnat::Rng(ecgnat::mix_seed(rc.seed, 0xeba5e)));
    log.row("0,0," + fmt_g(base) + "," + fmt_g(st.sched.lr()));
    std::printf("epoch 0/%lld  recon_loss %.6f (baseline)\n", static_cast<long long>(rc.epochs), base);
  }

  while (st.epoch < uint64_t(rc.epochs)) {
    const auto stats = ecgnat::pretrain_epoch(st, data, rc);
    log.row(std::to_string(st.epoch) + "," + std::to_string(st.step) + "," + fmt_g(stats.mean_recon) +
            "," + fmt_g(st.sched.lr()));
    std::printf("epoch %" PRIu64 "/%lld  recon_loss %.6f\n", st.epoch,
                static_cast<long long>(rc.epochs), stats.mean_recon);
    std::fflush(stdout);
    if (int64_t(st.epoch) % rc.checkpoint_every == 0 && int64_t(st.epoch) < rc.epochs)
      save_train_checkpoint(st, rc, rc.out_dir + "/pretrain_epoch" + std::to_string(st.epoch) + ".ckpt");
  }
  save_train_checkpoint(st, rc, rc.out_dir + "/pretrain_final.ckpt");
  std::printf("wrote %s/pretrain_final.ckpt\n", rc.out_dir.c_str());
  return 0;
}

int cmd_finetune(const RunConfig& rc) {
  ecgnat::ThreadPool::configure(int(rc.threads));
  if (rc.manifest.empty()) throw ConfigError("finetune: --manifest is required");
  if (rc.manifest.find(',') != std::string::npos)
    throw ConfigError("finetune: takes a single manifest");

  const Dataset ds = load_manifest_dataset(rc.manifest, rc.data_dir);
  require_labels(ds, rc.manifest);
  const int64_t span = label_span(ds);
  if (span > rc.model.n_classes)
    throw ConfigError("finetune: configured for " + std::to_string(rc.model.n_classes) +
                      " classes but the manifest labels span " + std::to_string(span));

  const bool linear = rc.mode == "linear_eval";
  const auto splits = ecgnat::make_splits(ds.size(), rc.train_frac, rc.seed, int(rc.split_repeats));

  fs::create_directories(rc.out_dir);
  ecgnat::CsvLogger log(rc.out_dir + "/finetune_log.csv", rc.to_json(),
                        "epoch,total_loss,supcon,ce,train_acc,test_acc");

  std::vector<double> accs, f1s, aurocs;
  ordered_json repeats_json = ordered_json::array();

  for (size_t r = 0; r < splits.size(); ++r) {
    RunConfig rcr = rc;  // repeats draw independent init and shuffles
    rcr.seed = ecgnat::mix_seed(rc.seed, 0xf17e0000ull + r);

    std::vector<size_t> train_idx = splits[r].train;
    if (rc.label_fraction < 1.0) {
      const std::vector<int64_t> tl = labels_at(ds, train_idx);
      std::vector<size_t> keep = ecgnat::stratified_fraction(tl, rc.label_fraction, rcr.seed);
      std::vector<size_t> sub;
      sub.reserve(keep.size());
      for (size_t j : keep) sub.push_back(train_idx[j]);
      train_idx = std::move(sub);
    }
    const std::vector<size_t>& test_idx = splits[r].test;
    const std::vector<int64_t> test_labels = labels_at(ds, test_idx);

    const uint64_t steps_per_epoch =
        uint64_t((int64_t(train_idx.size()) + rc.batch_size - 1) / rc.batch_size);
    TrainState st = ecgnat::make_train_state(rcr, uint64_t(rc.epochs) * steps_per_epoch, linear);

    if (!rc.init_checkpoint.empty()) {
      const Checkpoint ck = ecgnat::load_checkpoint(rc.init_checkpoint);
      const std::string why = arch_mismatch(ck.config, rc.model);
      if (!why.empty())
        throw ConfigError("finetune: checkpoint architecture does not match the configured model (" +
                          why + ")");
      ecgnat::load_model_params(st.model, ck);
    }

    // frozen encoder: latents are computed once and reused every epoch
    std::vector<Tensor<float>> latents;
    const std::vector<Tensor<float>>* cache = nullptr;
    if (linear) {
      latents = ecgnat::encode_all(st.model, ds, rc.batch_size);
      cache = &latents;
    }

    Tensor<float> test_logits;
    for (int64_t e = 0; e < rc.epochs; ++e) {
      const auto stats = ecgnat::finetune_epoch(st, ds, train_idx, rcr, cache);
      test_logits = linear ? ecgnat::predict_logits_cached(st.model, latents, test_idx, rc.batch_size)
                           : ecgnat::predict_logits(st.model, ds, test_idx, rc.batch_size);
      const double test_acc =
          ecgnat::accuracy(ecgnat::argmax_rows(test_logits), test_labels);
      log.row(std::to_string(e + 1) + "," + fmt_g(stats.total) + "," + fmt_g(stats.supcon) + "," +
              fmt_g(stats.ce) + "," + fmt_g(stats.train_acc) + "," + fmt_g(test_acc));
      std::printf("repeat %zu epoch %lld/%lld  total %.4f  supcon %.4f  ce %.4f  train_acc %.3f  "
                  "test_acc %.3f\n",
                  r, static_cast<long long>(e + 1), static_cast<long long>(rc.epochs), stats.total,
                  stats.supcon, stats.ce, stats.train_acc, test_acc);
      std::fflush(stdout);
    }

    const ecgnat::EvalResult er = ecgnat::evaluate(test_logits, test_labels);
    repeats_json.push_back(ordered_json::parse(er.to_json()));
    accs.push_back(er.accuracy);
    f1s.push_back(er.macro_f1);
    aurocs.push_back(er.auroc);

    save_train_checkpoint(st, rcr, rc.out_dir + "/finetune_repeat" + std::to_string(r) + ".ckpt");
    if (r == 0) save_train_checkpoint(st, rcr, rc.out_dir + "/finetune_final.ckpt");
  }

  const MeanStd a = mean_std(accs), f = mean_std(f1s), u = mean_std(aurocs);
  ordered_json out;
  out["repeats"] = repeats_json;
  out["aggregate"] = {{"accuracy", {{"mean", a.mean}, {"std", a.sd}}},
                      {"macro_f1", {{"mean", f.mean}, {"std", f.sd}}},
                      {"auroc", {{"mean", u.mean}, {"std", u.sd}}}};
  std::printf("%s\n", out.dump().c_str());

  ecgnat::CsvLogger summary(rc.out_dir + "/eval_summary.csv", rc.to_json(), "metric,mean,std");
  summary.row("accuracy," + fmt_g(a.mean) + "," + fmt_g(a.sd));
  summary.row("macro_f1," + fmt_g(f.mean) + "," + fmt_g(f.sd));
  summary.row("auroc," + fmt_g(u.mean) + "," + fmt_g(u.sd));
  return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& ckpt_path, const std::string& dump_path) {
  ecgnat::ThreadPool::configure(int(rc.threads));
  if (rc.manifest.empty()) throw ConfigError("eval: --manifest is required");

  const Checkpoint ck = ecgnat::load_checkpoint(ckpt_path);
  const Dataset ds = load_manifest_dataset(rc.manifest, rc.data_dir);
  require_labels(ds, rc.manifest);
  const int64_t span = label_span(ds);
  if (span > ck.config.n_classes)
    throw ConfigError("eval: checkpoint classifies " + std::to_string(ck.config.n_classes) +
                      " classes but the manifest labels span " + std::to_string(span));

  ecgnat::EcgNat<float> model(ck.config, 0);
  ecgnat::load_model_params(model, ck);

  std::vector<size_t> idx(ds.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Tensor<float> logits = ecgnat::predict_logits(model, ds, idx, rc.batch_size);
  const ecgnat::EvalResult er = ecgnat::evaluate(logits, labels_at(ds, idx));
  std::printf("%s\n", er.to_json().c_str());

  if (!dump_path.empty()) {
    const Tensor<float> emb = ecgnat::embed_dataset(model, ds, idx, rc.batch_size);
    std::ofstream f(dump_path);
    if (!f) throw ecgnat::IoError("eval: cannot write " + dump_path);
    f << std::setprecision(9);
    const int64_t E = emb.dim(1);
    for (int64_t i = 0; i < emb.dim(0); ++i) {
      f << ds.labels[size_t(i)];
      for (int64_t j = 0; j < E; ++j) f << "," << emb.data()[i * E + j];
      f << "\n";
    }
    if (!f.good()) throw ecgnat::IoError("eval: write failed for " + dump_path);
  }
  return 0;
}

struct BenchArgs {
  int64_t k = 7, d = 32, heads = 4;
  std::string lengths = "512,1024,2048,4096";
  int repeats = 10;
};

int cmd_bench(const RunConfig& rc, const BenchArgs& ba) {
  ecgnat::ThreadPool::configure(int(rc.threads));
  std::printf("parameters: %lld\n", static_cast<long long>(ecgnat::count_params(rc.model)));

  std::vector<int64_t> lengths;
  for (const std::string& s : split_commas(ba.lengths)) lengths.push_back(std::stoll(s));
  const auto rows = ecgnat::bench_scaling(ba.k, lengths, ba.d, ba.heads, ba.repeats, rc.seed);

  std::printf("%8s  %-12s  %14s  %12s  %12s  %12s\n", "n", "impl", "flops_est", "median_ms",
              "mean_ms", "std_ms");
  for (const auto& row : rows)
    std::printf("%8lld  %-12s  %14.0f  %12.4f  %12.4f  %12.4f\n", static_cast<long long>(row.n),
                row.impl.c_str(), row.flops_est, row.median_ms, row.mean_ms, row.std_ms);

  fs::create_directories(rc.out_dir);
  const std::string csv = rc.out_dir + "/bench.csv";
  ecgnat::write_bench_csv(csv, rows);
  std::printf("wrote %s\n", csv.c_str());
  return 0;
}

int cmd_verify(const RunConfig& rc, const std::string& level) {
  ecgnat::ThreadPool::configure(int(rc.threads));
  const auto suites = ecgnat::run_verification(level, rc.seed);
  std::printf("%s", ecgnat::format_report(suites).c_str());
  return ecgnat::all_ok(suites) ? 0 : 3;
}

// ---------------------------------------------------------------------------
// flag wiring
// ---------------------------------------------------------------------------

struct SubArgs {
  std::string config_path;
  std::vector<std::string> overrides;  // "key=value", flag order
};

// every run-configuration key is addressable as a flag; flags win over the
// config file, which wins over defaults
std::shared_ptr<SubArgs> add_config_flags(CLI::App* sub) {
  auto args = std::make_shared<SubArgs>();
  sub->add_option("--config", args->config_path, "key=value configuration file");

  static const std::pair<const char*, const char*> keys[] = {
      {"--n-leads", "n_leads"},
      {"--input-len", "input_len"},
      {"--embed-dim", "embed_dim"},
      {"--stage-heads", "stage_heads"},
      {"--mlp-ratio", "mlp_ratio"},
      {"--window-k", "window_k"},
      {"--blocks-per-stage", "blocks_per_stage"},
      {"--n-classes", "n_classes"},
      {"--noise-std", "noise_std"},
      {"--mask-ratio", "mask_ratio"},
      {"--tau", "tau"},
      {"--alpha", "alpha"},
      {"--lr", "lr"},
      {"--lr-min", "lr_min"},
      {"--weight-decay", "weight_decay"},
      {"--batch-size", "batch_size"},
      {"--epochs", "epochs"},
      {"--checkpoint-every", "checkpoint_every"},
      {"--mode", "mode"},
      {"--label-fraction", "label_fraction"},
      {"--train-frac", "train_frac"},
      {"--split-repeats", "split_repeats"},
      {"--ablation", "ablation"},
      {"--seed", "seed"},
      {"--threads", "threads"},
      {"--precision", "precision"},
      {"--data-dir", "data_dir"},
      {"--manifest", "manifest"},
      {"--out-dir", "out_dir"},
      {"--init-checkpoint", "init_checkpoint"},
  };
  for (const auto& [flag, key] : keys) {
    const std::string key_s = key;
    sub->add_option_function<std::string>(
        flag, [args, key_s](const std::string& v) { args->overrides.push_back(key_s + "=" + v); },
        std::string("sets ") + key_s);
  }
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"1D neighborhood-attention transformer for multi-lead ECG: synthesis, pretraining, "
               "fine-tuning, evaluation, benchmarking, verification"};
  app.require_subcommand(1);

  CLI::App* synth = app.add_subcommand("synth", "generate the synthetic labeled corpus");
  auto synth_args = add_config_flags(synth);
  int64_t n_per_class = 400;
  synth->add_option("--n-per-class", n_per_class, "records per class (default 400)");

  CLI::App* pretrain = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
  auto pretrain_args = add_config_flags(pretrain);

  CLI::App* finetune = app.add_subcommand("finetune", "supervised fine-tuning with the dual loss");
  auto finetune_args = add_config_flags(finetune);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a labeled manifest");
  auto eval_args = add_config_flags(eval_cmd);
  std::string ckpt_path, dump_path;
  eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--dump-embeddings", dump_path, "write one CSV row per sample: label + embedding");

  CLI::App* bench = app.add_subcommand("bench", "attention kernel scaling benchmark");
  auto bench_args = add_config_flags(bench);
  BenchArgs ba;
  bench->add_option("--bench-k", ba.k, "window size (default 7)");
  bench->add_option("--bench-d", ba.d, "head dim (default 32)");
  bench->add_option("--bench-heads", ba.heads, "heads (default 4)");
  bench->add_option("--bench-lengths", ba.lengths, "comma list of sequence lengths");
  bench->add_option("--bench-repeats", ba.repeats, "timing repeats per length (default 10)");

  CLI::App* verify = app.add_subcommand("verify", "run the build's self-verification suites");
  auto verify_args = add_config_flags(verify);
  std::string level = "full";
  verify->add_option("--level", level, "quick | full (default full)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad flags are validation errors
  }

  try {
    const SubArgs* args = synth->parsed()      ? synth_args.get()
                          : pretrain->parsed() ? pretrain_args.get()
                          : finetune->parsed() ? finetune_args.get()
                          : eval_cmd->parsed() ? eval_args.get()
                          : bench->parsed()    ? bench_args.get()
                                               : verify_args.get();
    const RunConfig rc = ecgnat::make_run_config(args->config_path, args->overrides);

    if (synth->parsed()) return cmd_synth(rc, n_per_class);
    if (pretrain->parsed()) return cmd_pretrain(rc);
    if (finetune->parsed()) return cmd_finetune(rc);
    if (eval_cmd->parsed()) return cmd_eval(rc, ckpt_path, dump_path);
    if (bench->parsed()) return cmd_bench(rc, ba);
    return cmd_verify(rc, level);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

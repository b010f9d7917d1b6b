#pragma once

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "ecgnat/checkpoint.hpp"
#include "ecgnat/data.hpp"
#include "ecgnat/losses.hpp"
#include "ecgnat/metrics.hpp"
#include "ecgnat/model.hpp"
#include "ecgnat/optim.hpp"
#include "ecgnat/rng.hpp"
#include "ecgnat/runconfig.hpp"

// Training loops: masked-autoencoder pretraining over one or more unlabeled
// datasets, and dual-loss fine-tuning (contrastive + cross-entropy) in full
// or frozen-encoder (linear-eval) mode. All randomness flows through the
// state's RNG in a fixed order, so runs are bitwise reproducible and a
// checkpointed run continues exactly where it left off.

namespace ecgnat {

struct TrainState {
  EcgNat<float> model;
  AdamW<float> optim;
  CosineSchedule sched;
  Rng rng;
  uint64_t epoch = 0;
  uint64_t step = 0;
  bool classifier_only = false;
};

// the parameter subset the optimizer owns; in linear-eval mode only the
// classification head trains
inline std::vector<std::pair<std::string, Tensor<float>>> select_trainable(EcgNat<float>& model,
                                                                           bool classifier_only) {
  if (!classifier_only) return model.params();
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (auto& [name, t] : model.params())
    if (name.rfind("classifier.", 0) == 0) out.push_back({name, t});
  return out;
}

inline TrainState make_train_state(const RunConfig& rc, uint64_t total_steps, bool classifier_only) {
  rc.validate();
  EcgNat<float> model(rc.model, rc.seed);
  AdamWConfig oc;
  oc.lr = rc.lr;
  oc.weight_decay = rc.weight_decay;
  AdamW<float> optim(select_trainable(model, classifier_only), oc);

  // gradients stop exactly at the trainable boundary: frozen tensors never
  // record onto the tape, so linear-eval backward ends at the classifier
  model.set_requires_grad(false);
  for (auto& [name, t] : select_trainable(model, classifier_only)) {
    (void)name;
    t.set_requires_grad(true);
  }

  return TrainState{std::move(model), std::move(optim),
                    CosineSchedule(rc.lr, rc.lr_min, int64_t(total_steps)),
                    Rng(mix_seed(rc.seed, 0x7261696eull)), 0, 0, classifier_only};
}

// --- persistence -------------------------------------------------------------

inline Checkpoint to_checkpoint(const TrainState& st) {
  Checkpoint ck;
  ck.config = st.model.config();
  for (const auto& [name, t] : st.model.params()) ck.tensors.emplace_back(name, t);
  const auto& names = st.optim.names();
  const auto& m = st.optim.first_moments();
  const auto& v = st.optim.second_moments();
  for (size_t i = 0; i < names.size(); ++i) {
    Tensor<float> mt({int64_t(m[i].size())});
    std::memcpy(mt.data(), m[i].data(), m[i].size() * sizeof(float));
    ck.tensors.emplace_back("optim.m." + names[i], mt);
    Tensor<float> vt({int64_t(v[i].size())});
    std::memcpy(vt.data(), v[i].data(), v[i].size() * sizeof(float));
    ck.tensors.emplace_back("optim.v." + names[i], vt);
  }
  ck.counters["epoch"] = st.epoch;
  ck.counters["step"] = st.step;
  ck.counters["optim_step"] = uint64_t(st.optim.step_count());
  ck.counters["classifier_only"] = st.classifier_only ? 1 : 0;
  ck.rng_state = st.rng.state();
  return ck;
}

// copy matching tensors into the model; every model parameter must be present
// with its exact shape
inline void load_model_params(EcgNat<float>& model, const Checkpoint& ck) {
  for (auto& [name, t] : model.params()) {
    const Tensor<float>& src = ck.tensor(name);
    check_shape(src.shape() == t.shape(), "checkpoint: tensor " + name + " has shape " + shape_str(src.shape()) +
                                              ", model expects " + shape_str(t.shape()));
    std::memcpy(t.data(), src.data(), size_t(t.numel()) * sizeof(float));
  }
}

// full resume: parameters, optimizer moments, counters, and RNG state
inline void restore_train_state(TrainState& st, const Checkpoint& ck) {
  check(config_to_json(ck.config) == config_to_json(st.model.config()),
        "checkpoint: architecture does not match the configured model");
  load_model_params(st.model, ck);
  const auto& names = st.optim.names();
  std::vector<std::vector<float>> m(names.size()), v(names.size());
  for (size_t i = 0; i < names.size(); ++i) {
    const Tensor<float>& mt = ck.tensor("optim.m." + names[i]);
    const Tensor<float>& vt = ck.tensor("optim.v." + names[i]);
    m[i].assign(mt.data(), mt.data() + mt.numel());
    v[i].assign(vt.data(), vt.data() + vt.numel());
  }
  st.optim.set_state(std::move(m), std::move(v), int64_t(ck.counter("optim_step")));
  st.epoch = ck.counter("epoch");
  st.step = ck.counter("step");
  st.sched.set_step(int64_t(st.step));
  st.rng.set_state(ck.rng_state);
}

// --- batching ----------------------------------------------------------------

namespace detail {

// contiguous slices of a shuffled index list; grouping is a pure function of
// (size, batch) so resumed runs see identical batches
inline std::vector<std::vector<size_t>> make_batches(std::vector<size_t> idx, int64_t batch) {
  std::vector<std::vector<size_t>> out;
  for (size_t at = 0; at < idx.size(); at += size_t(batch)) {
    const size_t end = std::min(idx.size(), at + size_t(batch));
    out.emplace_back(idx.begin() + long(at), idx.begin() + long(end));
  }
  return out;
}

inline std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
  std::vector<int64_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = int64_t(i);
  rng.shuffle(idx);
  return std::vector<size_t>(idx.begin(), idx.end());
}

}  // namespace detail

// --- masked-autoencoder pretraining -------------------------------------------

struct PretrainEpochStats {
  double mean_recon = 0;
  uint64_t batches = 0;
};

// one pass over every dataset, round-robin interleaved with per-dataset
// shuffling: tokenize -> mask -> encode -> decode -> masked reconstruction
// loss -> AdamW step -> scheduler step
inline PretrainEpochStats pretrain_epoch(TrainState& st, const std::vector<const Dataset*>& datasets,
                                         const RunConfig& rc) {
  if (datasets.empty()) throw ConfigError("pretrain: no datasets given");
  for (const Dataset* d : datasets)
    if (d == nullptr || d->size() == 0) throw ConfigError("pretrain: empty dataset");

  const int64_t n_tokens = rc.model.token_len();
  std::vector<std::vector<std::vector<size_t>>> batches;
  size_t rounds = 0;
  for (const Dataset* d : datasets) {
    batches.push_back(detail::make_batches(detail::shuffled_indices(d->size(), st.rng), rc.batch_size));
    rounds = std::max(rounds, batches.back().size());
  }

  double loss_sum = 0;
  uint64_t n_batches = 0;
  for (size_t r = 0; r < rounds; ++r) {
    for (size_t d = 0; d < datasets.size(); ++d) {
      if (r >= batches[d].size()) continue;
      const std::vector<size_t>& bidx = batches[d][r];
      const Tensor<float> x = stack_batch(*datasets[d], bidx);

      std::vector<MaskPlan> plans;
      plans.reserve(bidx.size());
      for (size_t b = 0; b < bidx.size(); ++b)
        plans.push_back(make_mask_plan(n_tokens, rc.model.mask_ratio, rc.model.noise_std, st.rng));

      st.optim.zero_grads();
      Graph<float> g;
      {
        GraphScope<float> scope(g);
        Tensor<float> tok = st.model.tokenize(x);
        Tensor<float> corrupted = (rc.ablation == "zero-mask") ? zero_mask_variant(tok, plans)
                                                               : apply_mask(tok, plans, st.rng);
        Tensor<float> z = st.model.encode_tokens(corrupted);
        Tensor<float> x_hat = st.model.decode(z);
        Tensor<float> loss = recon_loss(x, x_hat, plans);
        loss_sum += double(loss.item());
        g.backward(loss);
      }
      st.optim.step(st.sched.lr());
      st.sched.advance();
      ++st.step;
      ++n_batches;
    }
  }
  ++st.epoch;
  return PretrainEpochStats{loss_sum / double(n_batches), n_batches};
}

// masked reconstruction MSE without touching model or optimizer state; used
// for the before/after comparison around a pretraining run. Pass the RNG by
// value so evaluation masking never perturbs the training stream.
inline double eval_recon_loss(const EcgNat<float>& model, const std::vector<const Dataset*>& datasets,
                              const RunConfig& rc, Rng rng) {
  if (datasets.empty()) throw ConfigError("eval_recon: no datasets given");
  const int64_t n_tokens = rc.model.token_len();
  double loss_sum = 0;
  uint64_t n_batches = 0;
  for (const Dataset* d : datasets) {
    if (d == nullptr || d->size() == 0) throw ConfigError("eval_recon: empty dataset");
    std::vector<size_t> idx(d->size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (const std::vector<size_t>& bidx : detail::make_batches(idx, rc.batch_size)) {
      const Tensor<float> x = stack_batch(*d, bidx);
      std::vector<MaskPlan> plans;
      for (size_t b = 0; b < bidx.size(); ++b)
        plans.push_back(make_mask_plan(n_tokens, rc.model.mask_ratio, rc.model.noise_std, rng));
      Tensor<float> tok = model.tokenize(x);
      Tensor<float> corrupted = (rc.ablation == "zero-mask") ? zero_mask_variant(tok, plans)
                                                             : apply_mask(tok, plans, rng);
      Tensor<float> x_hat = model.decode(model.encode_tokens(corrupted));
      loss_sum += double(recon_loss(x, x_hat, plans).item());
      ++n_batches;
    }
  }
  return loss_sum / double(n_batches);
}

// --- dual-loss fine-tuning -----------------------------------------------------

struct FinetuneEpochStats {
  double total = 0, supcon = 0, ce = 0;  // batch means
  double train_acc = 0;
  uint64_t batches = 0;
  bool anchorless_batches = false;  // some batch had no positive pairs at all
};

// tape-free encoder pass over the whole dataset; per-sample latents feed the
// frozen-encoder path so linear eval never recomputes the encoder
inline std::vector<Tensor<float>> encode_all(const EcgNat<float>& model, const Dataset& ds, int64_t batch_size) {
  std::vector<Tensor<float>> out(ds.size());
  std::vector<size_t> idx(ds.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (const std::vector<size_t>& bidx : detail::make_batches(idx, batch_size)) {
    const Tensor<float> z = model.encode(stack_batch(ds, bidx));
    const int64_t per = z.numel() / int64_t(bidx.size());
    for (size_t b = 0; b < bidx.size(); ++b) {
      Tensor<float> zi({z.dim(1), z.dim(2)});
      std::memcpy(zi.data(), z.data() + int64_t(b) * per, size_t(per) * sizeof(float));
      out[bidx[b]] = zi;
    }
  }
  return out;
}

namespace detail {

inline Tensor<float> stack_latents(const std::vector<Tensor<float>>& cache, const std::vector<size_t>& idx) {
  check(!idx.empty(), "stack_latents: empty index list");
  const Tensor<float>& first = cache.at(idx[0]);
  Tensor<float> out({int64_t(idx.size()), first.dim(0), first.dim(1)});
  for (size_t b = 0; b < idx.size(); ++b) {
    const Tensor<float>& zi = cache.at(idx[b]);
    std::memcpy(out.data() + int64_t(b) * zi.numel(), zi.data(), size_t(zi.numel()) * sizeof(float));
  }
  return out;
}

}  // namespace detail

// one shuffled pass over train_idx: encode -> pooled embedding + logits ->
// alpha-weighted contrastive + cross-entropy -> AdamW step. Batches that
// shrink to a single sample are skipped (the contrastive term needs pairs).
// latent_cache, when given, replaces the encoder forward (frozen encoder).
inline FinetuneEpochStats finetune_epoch(TrainState& st, const Dataset& ds, const std::vector<size_t>& train_idx,
                                         const RunConfig& rc,
                                         const std::vector<Tensor<float>>* latent_cache = nullptr) {
  if (train_idx.empty()) throw ConfigError("finetune: empty training split");
  for (size_t i : train_idx) {
    check(i < ds.size(), "finetune: index out of range");
    if (ds.labels[i] < 0) throw ConfigError("finetune: record " + std::to_string(i) + " has no label");
    check(ds.labels[i] < rc.model.n_classes, "finetune: label out of range for configured n_classes");
  }

  std::vector<size_t> order = train_idx;
  {
    std::vector<int64_t> tmp(order.begin(), order.end());
    st.rng.shuffle(tmp);
    order.assign(tmp.begin(), tmp.end());
  }

  const float alpha = float(rc.model.alpha);
  FinetuneEpochStats stats;
  int64_t seen = 0, correct = 0;
  for (const std::vector<size_t>& bidx : detail::make_batches(order, rc.batch_size)) {
    if (bidx.size() < 2) continue;
    std::vector<int64_t> labels(bidx.size());
    for (size_t b = 0; b < bidx.size(); ++b) labels[b] = ds.labels[bidx[b]];

    st.optim.zero_grads();
    Graph<float> g;
    {
      GraphScope<float> scope(g);
      Tensor<float> z = latent_cache ? detail::stack_latents(*latent_cache, bidx)
                                     : st.model.encode(stack_batch(ds, bidx));
      Tensor<float> pooled = st.model.embed(z);
      Tensor<float> logits = st.model.classify(z);

      bool anchorless = false;
      Tensor<float> sup = supcon_loss(pooled, labels, float(rc.model.tau), &anchorless);
      Tensor<float> ce = ce_loss(logits, labels);
      Tensor<float> loss = (alpha == 0.0f)   ? ce
                           : (alpha == 1.0f) ? sup
                                             : add(scalar_mul(sup, alpha), scalar_mul(ce, 1.0f - alpha));
      stats.supcon += double(sup.item());
      stats.ce += double(ce.item());
      stats.total += double(loss.item());
      stats.anchorless_batches = stats.anchorless_batches || anchorless;

      for (int64_t i = 0; i < int64_t(bidx.size()); ++i) {
        const float* row = logits.data() + i * rc.model.n_classes;
        int64_t best = 0;
        for (int64_t j = 1; j < rc.model.n_classes; ++j)
          if (row[j] > row[best]) best = j;
        correct += (best == labels[size_t(i)]);
        ++seen;
      }
      g.backward(loss);
    }
    st.optim.step(st.sched.lr());
    st.sched.advance();
    ++st.step;
    ++stats.batches;
  }
  if (stats.batches == 0) throw ConfigError("finetune: every batch degenerated below 2 samples");
  stats.total /= double(stats.batches);
  stats.supcon /= double(stats.batches);
  stats.ce /= double(stats.batches);
  stats.train_acc = double(correct) / double(seen);
  ++st.epoch;
  return stats;
}

// --- inference ----------------------------------------------------------------

// tape-free logits for the given rows, in row order: [|idx| x n_classes]
inline Tensor<float> predict_logits(const EcgNat<float>& model, const Dataset& ds, const std::vector<size_t>& idx,
                                    int64_t batch_size) {
  check(!idx.empty(), "predict: empty index list");
  const int64_t n_classes = model.config().n_classes;
  Tensor<float> out({int64_t(idx.size()), n_classes});
  size_t at = 0;
  for (const std::vector<size_t>& bidx : detail::make_batches(idx, batch_size)) {
    const Tensor<float> logits = model.classify(model.encode(stack_batch(ds, bidx)));
    std::memcpy(out.data() + int64_t(at) * n_classes, logits.data(),
                size_t(logits.numel()) * sizeof(float));
    at += bidx.size();
  }
  return out;
}

// same, but from cached latents (frozen-encoder path)
inline Tensor<float> predict_logits_cached(const EcgNat<float>& model, const std::vector<Tensor<float>>& cache,
                                           const std::vector<size_t>& idx, int64_t batch_size) {
  check(!idx.empty(), "predict: empty index list");
  const int64_t n_classes = model.config().n_classes;
  Tensor<float> out({int64_t(idx.size()), n_classes});
  size_t at = 0;
  for (const std::vector<size_t>& bidx : detail::make_batches(idx, batch_size)) {
    const Tensor<float> logits = model.classify(detail::stack_latents(cache, bidx));
    std::memcpy(out.data() + int64_t(at) * n_classes, logits.data(),
                size_t(logits.numel()) * sizeof(float));
    at += bidx.size();
  }
  return out;
}

// mean-pooled embeddings for the given rows: [|idx| x top-stage width]
inline Tensor<float> embed_dataset(const EcgNat<float>& model, const Dataset& ds, const std::vector<size_t>& idx,
                                   int64_t batch_size) {
  check(!idx.empty(), "embed: empty index list");
  const int64_t width = model.config().stage_width(3);
  Tensor<float> out({int64_t(idx.size()), width});
  size_t at = 0;
  for (const std::vector<size_t>& bidx : detail::make_batches(idx, batch_size)) {
    const Tensor<float> e = model.embed(model.encode(stack_batch(ds, bidx)));
    std::memcpy(out.data() + int64_t(at) * width, e.data(), size_t(e.numel()) * sizeof(float));
    at += bidx.size();
  }
  return out;
}

// accuracy over the given rows against dataset labels
inline double split_accuracy(const EcgNat<float>& model, const Dataset& ds, const std::vector<size_t>& idx,
                             int64_t batch_size) {
  const Tensor<float> logits = predict_logits(model, ds, idx, batch_size);
  std::vector<int64_t> labels(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) labels[i] = ds.labels[idx[i]];
  return accuracy(argmax_rows(logits), labels);
}

}  // namespace ecgnat

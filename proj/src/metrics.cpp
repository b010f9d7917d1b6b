#include "ecgnat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace ecgnat {

namespace {

void check_paired(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels) {
  check(!labels.empty(), "metrics: empty input");
  check(preds.size() == labels.size(), "metrics: preds and labels differ in length");
}

}  // namespace

double accuracy(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels) {
  check_paired(preds, labels);
  int64_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += (preds[i] == labels[i]);
  return double(hits) / double(labels.size());
}

double macro_f1(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels, int64_t n_classes,
                bool* warned) {
  check_paired(preds, labels);
  check(n_classes >= 2, "macro_f1: need at least 2 classes");
  for (size_t i = 0; i < labels.size(); ++i) {
    check(labels[i] >= 0 && labels[i] < n_classes, "macro_f1: label out of range");
    check(preds[i] >= 0 && preds[i] < n_classes, "macro_f1: prediction out of range");
  }
  if (warned) *warned = false;

  double total = 0;
  for (int64_t c = 0; c < n_classes; ++c) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      const bool p = preds[i] == c, t = labels[i] == c;
      tp += (p && t);
      fp += (p && !t);
      fn += (!p && t);
    }
    if (tp + fp + fn == 0 && warned) *warned = true;  // class never seen
    const double prec = (tp + fp > 0) ? double(tp) / double(tp + fp) : 0.0;
    const double rec = (tp + fn > 0) ? double(tp) / double(tp + fn) : 0.0;
    total += (prec + rec > 0) ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  return total / double(n_classes);
}

// ---------------------------------------------------------------------------

double auroc_binary(const std::vector<double>& scores, const std::vector<int>& positive) {
  check(scores.size() == positive.size(), "auroc: scores and labels differ in length");
  check(scores.size() >= 2, "auroc: need at least 2 samples");
  const size_t n = scores.size();

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // midranks: every member of a tied run gets the run's average 1-based rank.
  // All ranks are multiples of 1/2, so the rank sum below is exact in double.
  int64_t n_pos = 0, n_neg = 0;
  double pos_rank_sum = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = double(i + 1 + j) / 2.0;
    for (size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        pos_rank_sum += midrank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  check(n_pos > 0 && n_neg > 0, "auroc: need both a positive and a negative sample");
  const double num = pos_rank_sum - double(n_pos) * double(n_pos + 1) / 2.0;
  return num / (double(n_pos) * double(n_neg));
}

double auroc(const Tensor<float>& scores, const std::vector<int64_t>& labels, bool* warned) {
  check_shape(scores.ndim() == 2, "auroc: scores must be [N x n_classes]");
  const int64_t n = scores.shape()[0], n_classes = scores.shape()[1];
  check(size_t(n) == labels.size(), "auroc: scores and labels differ in length");
  check(n >= 2, "auroc: need at least 2 samples");
  for (int64_t l : labels) check(l >= 0 && l < n_classes, "auroc: label out of range");
  if (warned) *warned = false;

  double total = 0;
  int64_t kept = 0;
  std::vector<double> col(static_cast<size_t>(n));
  std::vector<int> pos(static_cast<size_t>(n));
  for (int64_t c = 0; c < n_classes; ++c) {
    int64_t n_pos = 0;
    for (int64_t i = 0; i < n; ++i) {
      col[size_t(i)] = double(scores.data()[i * n_classes + c]);
      pos[size_t(i)] = labels[size_t(i)] == c;
      n_pos += pos[size_t(i)];
    }
    if (n_pos == 0 || n_pos == n) {
      if (warned) *warned = true;  // single-sided class carries no ranking signal
      continue;
    }
    total += auroc_binary(col, pos);
    ++kept;
  }
  if (kept == 0) throw ContractError("auroc: every class is single-sided; result undefined");
  return total / double(kept);
}

// ---------------------------------------------------------------------------

Tensor<float> softmax_rows(const Tensor<float>& logits) {
  check_shape(logits.ndim() == 2, "softmax_rows: input must be 2-d");
  const int64_t n = logits.shape()[0], c = logits.shape()[1];
  Tensor<float> out(logits.shape());
  for (int64_t i = 0; i < n; ++i) {
    const float* row = logits.data() + i * c;
    float* dst = out.data() + i * c;
    float mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double den = 0;
    for (int64_t j = 0; j < c; ++j) den += std::exp(double(row[j] - mx));
    for (int64_t j = 0; j < c; ++j) dst[j] = float(std::exp(double(row[j] - mx)) / den);
  }
  return out;
}

std::vector<int64_t> argmax_rows(const Tensor<float>& scores) {
  check_shape(scores.ndim() == 2, "argmax_rows: input must be 2-d");
  const int64_t n = scores.shape()[0], c = scores.shape()[1];
  std::vector<int64_t> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const float* row = scores.data() + i * c;
    int64_t best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[size_t(i)] = best;
  }
  return out;
}

EvalResult evaluate(const Tensor<float>& logits, const std::vector<int64_t>& labels) {
  check_shape(logits.ndim() == 2, "evaluate: logits must be [N x n_classes]");
  const int64_t n = logits.shape()[0], n_classes = logits.shape()[1];
  check(size_t(n) == labels.size(), "evaluate: logits and labels differ in length");

  EvalResult r;
  const std::vector<int64_t> preds = argmax_rows(logits);
  r.accuracy = accuracy(preds, labels);
  r.macro_f1 = macro_f1(preds, labels, n_classes, &r.f1_warning);
  r.auroc = auroc(softmax_rows(logits), labels, &r.auroc_warning);

  r.per_class.resize(size_t(n_classes));
  for (int64_t c = 0; c < n_classes; ++c) {
    ClassStats& s = r.per_class[size_t(c)];
    s.cls = c;
    for (int64_t i = 0; i < n; ++i) {
      const bool p = preds[size_t(i)] == c, t = labels[size_t(i)] == c;
      s.tp += (p && t);
      s.fp += (p && !t);
      s.fn += (!p && t);
      s.tn += (!p && !t);
    }
    s.precision = (s.tp + s.fp > 0) ? double(s.tp) / double(s.tp + s.fp) : 0.0;
    s.recall = (s.tp + s.fn > 0) ? double(s.tp) / double(s.tp + s.fn) : 0.0;
    s.f1 = (s.precision + s.recall > 0) ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  }
  return r;
}

std::string EvalResult::to_json() const {
  nlohmann::ordered_json j;
  j["accuracy"] = accuracy;
  j["macro_f1"] = macro_f1;
  j["auroc"] = auroc;
  j["per_class"] = nlohmann::ordered_json::array();
  for (const ClassStats& s : per_class) {
    nlohmann::ordered_json c;
    c["class"] = s.cls;
    c["tp"] = s.tp;
    c["tn"] = s.tn;
    c["fp"] = s.fp;
    c["fn"] = s.fn;
    c["precision"] = s.precision;
    c["recall"] = s.recall;
    c["f1"] = s.f1;
    j["per_class"].push_back(c);
  }
  if (f1_warning) j["f1_warning"] = true;
  if (auroc_warning) j["auroc_warning"] = true;
  return j.dump();
}

}  // namespace ecgnat

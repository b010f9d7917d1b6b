#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecgnat/tensor.hpp"

// Classification metrics: accuracy, macro F1, and one-vs-rest AUROC with the
// rank-statistic estimator (tied pairs get half credit).

namespace ecgnat {

// fraction of exact matches; empty input is a contract error
double accuracy(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels);

// unweighted mean of per-class one-vs-rest F1 over classes 0..n_classes-1.
// Zero-division (precision + recall = 0) contributes 0; a class absent from
// both preds and labels also contributes 0 and sets *warned.
double macro_f1(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels, int64_t n_classes,
                bool* warned = nullptr);

// binary AUROC of one score column: probability a positive outranks a
// negative, ties counted 1/2 (rank-sum form, exact). Requires at least one
// positive and one negative.
double auroc_binary(const std::vector<double>& scores, const std::vector<int>& positive);

// macro one-vs-rest AUROC over score columns. Classes missing a positive or
// a negative are skipped and set *warned; every class skipped is an error.
double auroc(const Tensor<float>& scores, const std::vector<int64_t>& labels, bool* warned = nullptr);

// numerically stable row-wise softmax of plain (non-recorded) logits, for
// turning classifier outputs into AUROC scores
Tensor<float> softmax_rows(const Tensor<float>& logits);

// per-class argmax with ties resolved to the lowest class index
std::vector<int64_t> argmax_rows(const Tensor<float>& scores);

struct ClassStats {
  int64_t cls = 0;
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;  // one-vs-rest counts, sum to N
  double precision = 0, recall = 0, f1 = 0;
};

struct EvalResult {
  double accuracy = 0;
  double macro_f1 = 0;
  double auroc = 0;
  std::vector<ClassStats> per_class;
  bool f1_warning = false;     // some class absent from preds and labels
  bool auroc_warning = false;  // some class skipped as single-sided

  std::string to_json() const;
};

// full evaluation from classifier scores ([N x n_classes], softmax applied
// internally) and integer labels
EvalResult evaluate(const Tensor<float>& logits, const std::vector<int64_t>& labels);

}  // namespace ecgnat

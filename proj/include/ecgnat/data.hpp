#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ecgnat/tensor.hpp"

// Signal ingestion and preparation: the fixed preprocessing pipeline
// (band-pass -> per-lead z-score -> 2:1 decimation -> length fixing), the
// on-disk record/manifest formats, dataset splitting, and a synthetic
// three-class ECG generator for desk-scale runs.

namespace ecgnat {

struct SignalRecord {
  std::string record_id;
  double fs = 0;        // Hz
  int64_t leads = 0;    // rows
  int64_t samples = 0;  // columns
  std::vector<float> data;  // leads-major, leads * samples
  int64_t label = -1;       // -1 = unlabeled
  bool primary = true;      // first window of a segmented record

  void validate() const;
  float* lead(int64_t l) { return data.data() + l * samples; }
  const float* lead(int64_t l) const { return data.data() + l * samples; }
};

// --- preprocessing ---------------------------------------------------------

// zero-phase 4th-order Butterworth band-pass (high-pass at lo, low-pass at
// hi, biquad cascades run forward-backward per lead)
SignalRecord bandpass(const SignalRecord& rec, double lo = 0.5, double hi = 40.0);

// per-lead z-score; a constant lead maps to zeros (std floor 1e-8)
SignalRecord normalize(const SignalRecord& rec);

// keep every second sample, halve fs; odd input drops its last sample and
// sets *warned_odd. The 40 Hz low-pass upstream is the anti-alias filter.
SignalRecord resample_half(const SignalRecord& rec, bool* warned_odd = nullptr);

// shorter records are right-padded with zeros to target; longer ones split
// into non-overlapping target-length windows (sub-target remainder dropped),
// the first window marked primary
std::vector<SignalRecord> fix_length(const SignalRecord& rec, int64_t target = 2500);

// bandpass -> normalize -> resample_half -> fix_length, in that order
std::vector<SignalRecord> preprocess(const SignalRecord& rec, int64_t target = 2500);

// --- on-disk formats -------------------------------------------------------

// <dir>/<record_id>.f32 (raw little-endian float32, leads-major) plus
// <dir>/<record_id>.json sidecar; returns the sidecar path
std::string write_record(const std::string& dir, const SignalRecord& rec);
SignalRecord read_record(const std::string& sidecar_path);

struct ManifestEntry {
  std::string path;  // sidecar path
  int64_t label = -1;
  std::string split;  // "train" / "test" / ""
};

// CSV with header `path,label,split`
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

// --- splits and subsampling ------------------------------------------------

struct SplitIndices {
  std::vector<size_t> train, test;
};

// record-level random splits; repeat r is seeded independently from (seed, r)
std::vector<SplitIndices> make_splits(size_t n, double train_frac, uint64_t seed, int repeats = 5);

// per-class random subset of round(fraction * class_count) records, at least
// one per class present; returns ascending indices
std::vector<size_t> stratified_fraction(const std::vector<int64_t>& labels, double fraction, uint64_t seed);

// --- synthetic corpus ------------------------------------------------------

// three separable 12-lead classes, 10 s at 500 Hz: 0 = regular 60 bpm
// Gaussian-bump PQRST, 1 = the same shape at 150 bpm, 2 = regular 60 bpm with
// a widened low-amplitude QRS and an inverted T (conduction-defect
// morphology) — classes 0 and 2 share identical rhythm statistics, so only
// waveform shape separates them. Per-lead amplitude scale U(0.5, 1.5) and
// additive noise (std 0.05). Class-major record order; the optional
// out-params collect each record's inter-beat intervals and its
// (qrs_width, qrs_amp, t_amp) morphology draw for generator-statistics
// checks.
std::vector<SignalRecord> synth_corpus(int64_t n_per_class, uint64_t seed,
                                       std::vector<std::vector<double>>* intervals = nullptr,
                                       std::vector<std::array<double, 3>>* morphology = nullptr);

// --- in-memory training view -----------------------------------------------

struct Dataset {
  std::vector<Tensor<float>> signals;  // each [12 x 2500]
  std::vector<int64_t> labels;         // -1 where unlabeled

  size_t size() const { return signals.size(); }
};

// run the full pipeline over raw records and keep the primary windows
Dataset make_dataset(const std::vector<SignalRecord>& raw);

// gather rows into one [B x 12 x 2500] batch
Tensor<float> stack_batch(const Dataset& ds, const std::vector<size_t>& idx);

}  // namespace ecgnat

#include "ecgnat/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ecgnat/rng.hpp"
#include "ecgnat/threadpool.hpp"

namespace ecgnat {

void SignalRecord::validate() const {
  check(fs > 0, "record " + record_id + ": fs must be positive");
  check(leads >= 1 && leads <= 12, "record " + record_id + ": leads must be in 1..12");
  check(samples > 0, "record " + record_id + ": samples must be positive");
  check(int64_t(data.size()) == leads * samples,
        "record " + record_id + ": buffer holds " + std::to_string(data.size()) + " values, expected " +
            std::to_string(leads * samples));
}

// ---------------------------------------------------------------------------
// Butterworth band-pass, zero-phase
// ---------------------------------------------------------------------------

namespace {

struct Biquad {
  double b0, b1, b2, a1, a2;  // a0 normalized to 1
};

// 4th-order Butterworth = two cascaded biquads with pole-pair Q of
// 1/(2 cos(pi/8)) and 1/(2 cos(3pi/8)); bilinear-transform coefficients
constexpr double kPi = 3.14159265358979323846;

std::array<Biquad, 2> butter_pair(double f, double fs, bool highpass) {
  const std::array<double, 2> q{1.0 / (2.0 * std::cos(kPi / 8.0)), 1.0 / (2.0 * std::cos(3.0 * kPi / 8.0))};
  const double w0 = 2.0 * kPi * f / fs;
  const double cw = std::cos(w0), sw = std::sin(w0);
  std::array<Biquad, 2> out{};
  for (size_t i = 0; i < 2; ++i) {
    const double alpha = sw / (2.0 * q[i]);
    const double a0 = 1.0 + alpha;
    Biquad bq{};
    if (highpass) {
      bq.b0 = (1.0 + cw) / 2.0 / a0;
      bq.b1 = -(1.0 + cw) / a0;
      bq.b2 = bq.b0;
    } else {
      bq.b0 = (1.0 - cw) / 2.0 / a0;
      bq.b1 = (1.0 - cw) / a0;
      bq.b2 = bq.b0;
    }
    bq.a1 = (-2.0 * cw) / a0;
    bq.a2 = (1.0 - alpha) / a0;
    out[i] = bq;
  }
  return out;
}

// direct form II transposed, state seeded so a constant input produces the
// filter's DC response from sample 0 (no startup transient)
void filter_forward(std::vector<double>& x, const Biquad& q) {
  const double dc = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
  const double z2i = q.b2 - q.a2 * dc;
  const double z1i = q.b1 - q.a1 * dc + z2i;
  double z1 = z1i * x[0], z2 = z2i * x[0];
  for (double& v : x) {
    const double y = q.b0 * v + z1;
    z1 = q.b1 * v - q.a1 * y + z2;
    z2 = q.b2 * v - q.a2 * y;
    v = y;
  }
}

// forward-backward pass over an odd-extension padding of length pad
void filtfilt(std::vector<double>& x, const Biquad& q, size_t pad) {
  const size_t n = x.size();
  pad = std::min(pad, n - 1);
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);
  filter_forward(ext, q);
  std::reverse(ext.begin(), ext.end());
  filter_forward(ext, q);
  std::reverse(ext.begin(), ext.end());
  std::copy(ext.begin() + long(pad), ext.begin() + long(pad + n), x.begin());
}

}  // namespace

SignalRecord bandpass(const SignalRecord& rec, double lo, double hi) {
  rec.validate();
  check(lo > 0 && hi > lo, "bandpass: need 0 < lo < hi");
  if (rec.fs <= 2.0 * hi)
    throw ConfigError("bandpass: fs " + std::to_string(rec.fs) + " Hz cannot represent " +
                      std::to_string(hi) + " Hz (need fs > 2*hi)");
  const auto hp = butter_pair(lo, rec.fs, true);
  const auto lp = butter_pair(hi, rec.fs, false);
  // the slow edge dominates the transient; cover three of its time constants
  const size_t pad = size_t(std::min(double(rec.samples - 1), 3.0 * rec.fs / (2.0 * kPi * lo)));

  SignalRecord out = rec;
  ThreadPool::parallel_for(rec.leads, [&](int64_t s, int64_t e) {
    for (int64_t l = s; l < e; ++l) {
      std::vector<double> buf(rec.lead(l), rec.lead(l) + rec.samples);
      for (const Biquad& q : hp) filtfilt(buf, q, pad);
      for (const Biquad& q : lp) filtfilt(buf, q, pad);
      for (int64_t i = 0; i < rec.samples; ++i) out.lead(l)[i] = float(buf[size_t(i)]);
    }
  });
  return out;
}

SignalRecord normalize(const SignalRecord& rec) {
  rec.validate();
  SignalRecord out = rec;
  for (int64_t l = 0; l < rec.leads; ++l) {
    double mean = 0;
    for (int64_t i = 0; i < rec.samples; ++i) mean += rec.lead(l)[i];
    mean /= double(rec.samples);
    double var = 0;
    for (int64_t i = 0; i < rec.samples; ++i) {
      const double d = rec.lead(l)[i] - mean;
      var += d * d;
    }
    const double std = std::max(std::sqrt(var / double(rec.samples)), 1e-8);
    for (int64_t i = 0; i < rec.samples; ++i) out.lead(l)[i] = float((rec.lead(l)[i] - mean) / std);
  }
  return out;
}

SignalRecord resample_half(const SignalRecord& rec, bool* warned_odd) {
  rec.validate();
  if (warned_odd) *warned_odd = false;
  int64_t n = rec.samples;
  if (n % 2 != 0) {
    if (warned_odd) *warned_odd = true;
    --n;
  }
  check(n >= 2, "resample_half: too few samples");
  SignalRecord out;
  out.record_id = rec.record_id;
  out.fs = rec.fs / 2.0;
  out.leads = rec.leads;
  out.samples = n / 2;
  out.label = rec.label;
  out.primary = rec.primary;
  out.data.resize(size_t(out.leads * out.samples));
  for (int64_t l = 0; l < rec.leads; ++l)
    for (int64_t i = 0; i < out.samples; ++i) out.lead(l)[i] = rec.lead(l)[2 * i];
  return out;
}

std::vector<SignalRecord> fix_length(const SignalRecord& rec, int64_t target) {
  rec.validate();
  check(target >= 1, "fix_length: target must be positive");
  std::vector<SignalRecord> out;
  if (rec.samples == target) {
    out.push_back(rec);
    out.back().primary = true;
    return out;
  }
  if (rec.samples < target) {
    SignalRecord padded = rec;
    padded.samples = target;
    padded.data.assign(size_t(rec.leads * target), 0.0f);
    for (int64_t l = 0; l < rec.leads; ++l)
      std::copy(rec.lead(l), rec.lead(l) + rec.samples, padded.lead(l));
    padded.primary = true;
    out.push_back(std::move(padded));
    return out;
  }
  const int64_t windows = rec.samples / target;  // sub-target remainder dropped
  for (int64_t w = 0; w < windows; ++w) {
    SignalRecord win;
    win.record_id = rec.record_id + "_w" + std::to_string(w);
    win.fs = rec.fs;
    win.leads = rec.leads;
    win.samples = target;
    win.label = rec.label;
    win.primary = (w == 0);
    win.data.resize(size_t(rec.leads * target));
    for (int64_t l = 0; l < rec.leads; ++l)
      std::copy(rec.lead(l) + w * target, rec.lead(l) + (w + 1) * target, win.lead(l));
    out.push_back(std::move(win));
  }
  return out;
}

std::vector<SignalRecord> preprocess(const SignalRecord& rec, int64_t target) {
  return fix_length(resample_half(normalize(bandpass(rec))), target);
}

// ---------------------------------------------------------------------------
// record and manifest IO
// ---------------------------------------------------------------------------

std::string write_record(const std::string& dir, const SignalRecord& rec) {
  rec.validate();
  std::filesystem::create_directories(dir);
  const std::string base = dir + "/" + rec.record_id;
  {
    std::ofstream f(base + ".f32", std::ios::binary);
    if (!f) throw IoError("write_record: cannot open " + base + ".f32");
    f.write(reinterpret_cast<const char*>(rec.data.data()), std::streamsize(rec.data.size() * sizeof(float)));
    if (!f) throw IoError("write_record: short write to " + base + ".f32");
  }
  nlohmann::ordered_json j;
  j["record_id"] = rec.record_id;
  j["fs"] = rec.fs;
  j["leads"] = rec.leads;
  j["samples"] = rec.samples;
  j["label"] = rec.label;
  std::ofstream f(base + ".json");
  if (!f) throw IoError("write_record: cannot open " + base + ".json");
  f << j.dump(2) << "\n";
  if (!f) throw IoError("write_record: short write to " + base + ".json");
  return base + ".json";
}

SignalRecord read_record(const std::string& sidecar_path) {
  std::ifstream f(sidecar_path);
  if (!f) throw IoError("read_record: cannot open " + sidecar_path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("read_record: bad sidecar " + sidecar_path + ": " + e.what());
  }
  SignalRecord rec;
  try {
    rec.record_id = j.at("record_id").get<std::string>();
    rec.fs = j.at("fs").get<double>();
    rec.leads = j.at("leads").get<int64_t>();
    rec.samples = j.at("samples").get<int64_t>();
    rec.label = j.value("label", int64_t(-1));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("read_record: sidecar " + sidecar_path + " missing fields: " + e.what());
  }
  std::string bin = sidecar_path;
  const size_t dot = bin.rfind(".json");
  check(dot != std::string::npos, "read_record: sidecar path must end in .json");
  bin.replace(dot, 5, ".f32");
  std::ifstream b(bin, std::ios::binary);
  if (!b) throw IoError("read_record: cannot open " + bin);
  rec.data.resize(size_t(rec.leads * rec.samples));
  b.read(reinterpret_cast<char*>(rec.data.data()), std::streamsize(rec.data.size() * sizeof(float)));
  if (b.gcount() != std::streamsize(rec.data.size() * sizeof(float)))
    throw IoError("read_record: " + bin + " truncated");
  rec.validate();
  return rec;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path);
  if (!f) throw IoError("write_manifest: cannot open " + path);
  f << "path,label,split\n";
  for (const ManifestEntry& e : entries) f << e.path << "," << e.label << "," << e.split << "\n";
  if (!f) throw IoError("write_manifest: short write to " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("read_manifest: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "path,label,split")
    throw IoError("read_manifest: " + path + " missing `path,label,split` header");
  std::vector<ManifestEntry> out;
  size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw IoError("read_manifest: " + path + " line " + std::to_string(line_no) + " is not `path,label,split`");
    ManifestEntry e;
    e.path = line.substr(0, c1);
    try {
      e.label = std::stoll(line.substr(c1 + 1, c2 - c1 - 1));
    } catch (const std::exception&) {
      throw IoError("read_manifest: " + path + " line " + std::to_string(line_no) + " has a non-numeric label");
    }
    e.split = line.substr(c2 + 1);
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// splits and subsampling
// ---------------------------------------------------------------------------

std::vector<SplitIndices> make_splits(size_t n, double train_frac, uint64_t seed, int repeats) {
  check(train_frac > 0 && train_frac < 1, "make_splits: train_frac must be in (0,1)");
  check(n >= 2, "make_splits: need at least 2 records");
  check(repeats >= 1, "make_splits: repeats must be >= 1");
  const size_t n_train = size_t(std::llround(train_frac * double(n)));
  check(n_train >= 1 && n_train < n, "make_splits: split leaves an empty side");
  std::vector<SplitIndices> out;
  for (int r = 0; r < repeats; ++r) {
    std::vector<int64_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = int64_t(i);
    Rng rng(mix_seed(seed, uint64_t(r)));
    rng.shuffle(idx);
    SplitIndices s;
    for (size_t i = 0; i < n; ++i)
      (i < n_train ? s.train : s.test).push_back(size_t(idx[i]));
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<size_t> stratified_fraction(const std::vector<int64_t>& labels, double fraction, uint64_t seed) {
  check(fraction > 0 && fraction <= 1, "stratified_fraction: fraction must be in (0,1]");
  std::vector<int64_t> classes;
  for (int64_t l : labels) {
    check(l >= 0, "stratified_fraction: all records must be labeled");
    if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
  }
  std::sort(classes.begin(), classes.end());
  std::vector<size_t> out;
  Rng rng(mix_seed(seed, 0x5f5f));
  for (int64_t c : classes) {
    std::vector<int64_t> members;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) members.push_back(int64_t(i));
    const int64_t want = std::max<int64_t>(1, std::llround(fraction * double(members.size())));
    rng.shuffle(members);
    for (int64_t i = 0; i < want; ++i) out.push_back(size_t(members[size_t(i)]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

namespace {

struct Bump {
  double amp, center, width;  // seconds relative to the R peak
};

// Gaussian-bump PQRST composite
constexpr std::array<Bump, 5> kBeatShape{{{0.12, -0.200, 0.040},
                                          {-0.10, -0.045, 0.012},
                                          {1.00, 0.000, 0.018},
                                          {-0.18, 0.040, 0.014},
                                          {0.25, 0.250, 0.060}}};

}  // namespace

std::vector<SignalRecord> synth_corpus(int64_t n_per_class, uint64_t seed,
                                       std::vector<std::vector<double>>* intervals,
                                       std::vector<std::array<double, 3>>* morphology) {
  check(n_per_class >= 1, "synth_corpus: n_per_class must be >= 1");
  const double fs = 500.0;
  const int64_t n = 5000;  // 10 s
  const int64_t leads = 12;
  if (intervals) intervals->assign(size_t(3 * n_per_class), {});
  if (morphology) morphology->assign(size_t(3 * n_per_class), {});

  std::vector<SignalRecord> out(size_t(3 * n_per_class));
  ThreadPool::parallel_for(3 * n_per_class, [&](int64_t lo_i, int64_t hi_i) {
    for (int64_t r = lo_i; r < hi_i; ++r) {
      const int64_t cls = r / n_per_class;
      Rng rng(mix_seed(seed, uint64_t(r) + 1));

      // class 1 is the fast rhythm; 0 and 2 share the same regular rate and
      // differ in beat morphology only, so rate statistics cannot separate
      // them — any classifier has to read waveform shape
      const double period = (cls == 1) ? 0.4 : 1.0;
      std::vector<double> beats;
      std::vector<double> ivals;
      double t = rng.uniform(0.05, 0.05 + period);
      while (t < 10.0 + 0.5) {
        beats.push_back(t);
        ivals.push_back(period);
        t += period;
      }
      if (!ivals.empty()) ivals.pop_back();  // last gap exits the window

      // per-record morphology parameters: class 2 renders a widened,
      // lower-amplitude QRS with an inverted T (conduction-defect shape);
      // the other classes stay in a tight normal band. The class intervals
      // are disjoint by many times their widths.
      const bool defect = cls == 2;
      const double qrs_w = defect ? rng.uniform(1.5, 1.7) : rng.uniform(0.95, 1.05);
      const double qrs_a = defect ? rng.uniform(0.65, 0.80) : rng.uniform(0.95, 1.05);
      const double t_a = defect ? rng.uniform(-1.1, -0.9) : rng.uniform(0.9, 1.1);

      SignalRecord rec;
      rec.record_id = "synth_c" + std::to_string(cls) + "_" + std::to_string(r % n_per_class);
      rec.fs = fs;
      rec.leads = leads;
      rec.samples = n;
      rec.label = cls;
      rec.data.resize(size_t(leads * n));

      std::vector<double> clean(size_t(n), 0.0);
      for (double bt : beats)
        for (size_t j = 0; j < kBeatShape.size(); ++j) {
          const Bump& b = kBeatShape[j];
          const bool qrs = j >= 1 && j <= 3;  // Q, R, S
          const double amp = b.amp * (qrs ? qrs_a : j == 4 ? t_a : 1.0);
          const double width = b.width * (qrs ? qrs_w : 1.0);
          const int64_t i0 = std::max<int64_t>(0, int64_t((bt + b.center - 5 * width) * fs));
          const int64_t i1 = std::min<int64_t>(n, int64_t((bt + b.center + 5 * width) * fs) + 1);
          for (int64_t i = i0; i < i1; ++i) {
            const double dt = double(i) / fs - (bt + b.center);
            clean[size_t(i)] += amp * std::exp(-0.5 * (dt / width) * (dt / width));
          }
        }

      for (int64_t l = 0; l < leads; ++l) {
        const double scale = rng.uniform(0.5, 1.5);
        for (int64_t i = 0; i < n; ++i)
          rec.lead(l)[i] = float(scale * clean[size_t(i)] + rng.gaussian(0.0, 0.05));
      }
      if (intervals) (*intervals)[size_t(r)] = std::move(ivals);
      if (morphology) (*morphology)[size_t(r)] = {qrs_w, qrs_a, t_a};
      out[size_t(r)] = std::move(rec);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// training view
// ---------------------------------------------------------------------------

Dataset make_dataset(const std::vector<SignalRecord>& raw) {
  Dataset ds;
  ds.signals.resize(raw.size());
  ds.labels.resize(raw.size());
  ThreadPool::parallel_for(int64_t(raw.size()), [&](int64_t s, int64_t e) {
    for (int64_t i = s; i < e; ++i) {
      const std::vector<SignalRecord> ready = preprocess(raw[size_t(i)]);
      check(!ready.empty(), "make_dataset: record " + raw[size_t(i)].record_id + " produced no windows");
      const SignalRecord& rec = ready.front();  // primary window
      check(rec.leads == 12 && rec.samples == 2500,
            "make_dataset: record " + rec.record_id + " is not 12 x 2500 after preprocessing");
      Tensor<float> t({12, 2500});
      std::copy(rec.data.begin(), rec.data.end(), t.data());
      ds.signals[size_t(i)] = t;
      ds.labels[size_t(i)] = rec.label;
    }
  });
  return ds;
}

Tensor<float> stack_batch(const Dataset& ds, const std::vector<size_t>& idx) {
  check(!idx.empty(), "stack_batch: empty index list");
  check(idx[0] < ds.size(), "stack_batch: index out of range");
  const Shape& shape = ds.signals[idx[0]].shape();
  check_shape(shape.size() == 2, "stack_batch: signals must be [leads x samples]");
  Tensor<float> out({int64_t(idx.size()), shape[0], shape[1]});
  const int64_t per = shape[0] * shape[1];
  for (size_t b = 0; b < idx.size(); ++b) {
    check(idx[b] < ds.size(), "stack_batch: index out of range");
    const Tensor<float>& s = ds.signals[idx[b]];
    check_shape(s.shape() == shape, "stack_batch: mixed signal shapes");
    std::copy(s.data(), s.data() + s.numel(), out.data() + int64_t(b) * per);
  }
  return out;
}

}  // namespace ecgnat

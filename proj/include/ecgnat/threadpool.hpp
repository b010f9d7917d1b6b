#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ecgnat {

// Fixed-size worker pool used by the tensor kernels. Work is split into one
// static contiguous range per thread, so every output element is written by
// exactly one task in a fixed arithmetic order: results are bitwise
// reproducible for a given thread count.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  // takes effect for every later parallel_for; results are reproducible for
  // a fixed setting
  static void configure(int threads) {
    instance().set_threads(threads);
  }

  static int threads() { return instance().n_threads_; }

  // fn(begin, end) over [0, total) split into at most n_threads_ ranges
  template <typename Fn>
  static void parallel_for(int64_t total, const Fn& fn) {
    ThreadPool& p = instance();
    if (total <= 0) return;
    const int nt = p.n_threads_;
    if (nt <= 1 || total == 1) {
      fn(int64_t{0}, total);
      return;
    }
    const int64_t chunks = std::min<int64_t>(nt, total);
    const int64_t base = total / chunks;
    const int64_t rem = total % chunks;
    std::vector<std::thread> helpers;
    helpers.reserve(size_t(chunks - 1));
    int64_t begin = 0;
    std::vector<std::pair<int64_t, int64_t>> ranges;
    for (int64_t c = 0; c < chunks; ++c) {
      const int64_t len = base + (c < rem ? 1 : 0);
      ranges.emplace_back(begin, begin + len);
      begin += len;
    }
    for (int64_t c = 1; c < chunks; ++c) {
      helpers.emplace_back([&fn, r = ranges[size_t(c)]] { fn(r.first, r.second); });
    }
    fn(ranges[0].first, ranges[0].second);
    for (auto& t : helpers) t.join();
  }

 private:
  ThreadPool() = default;

  void set_threads(int threads) {
    if (threads < 1) threads = 1;
    n_threads_ = threads;
  }

  int n_threads_ = 1;
};

}  // namespace ecgnat

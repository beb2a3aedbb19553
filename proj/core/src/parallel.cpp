#include "fvlab/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace fvlab {

namespace {
std::atomic<int> g_override{0};
}

void set_thread_cap(int cap) { g_override.store(cap < 0 ? 0 : cap); }

int thread_cap() {
  const int ov = g_override.load();
  if (ov > 0) return ov;
  if (const char* env = std::getenv("FVLAB_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  const int nthreads = std::min(thread_cap(), n);
  if (nthreads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  // contiguous chunks; chunk t covers [t*q + min(t,r), ...) as usual
  const int q = n / nthreads;
  const int r = n % nthreads;
  for (int t = 0; t < nthreads; ++t) {
    const int begin = t * q + std::min(t, r);
    const int end = begin + q + (t < r ? 1 : 0);
    pool.emplace_back([begin, end, &fn] {
      for (int i = begin; i < end; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace fvlab

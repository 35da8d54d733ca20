#pragma once

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace scorewatch {

inline int resolve_jobs(int jobs) {
  if (jobs > 0) return jobs;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

/// Runs fn(worker_index, begin, end) over contiguous chunks of [0, count).
/// The first raised exception is rethrown after all workers join.
inline void parallel_chunks(int count, int jobs,
                            const std::function<void(int, int, int)>& fn) {
  jobs = std::min(resolve_jobs(jobs), std::max(count, 1));
  if (count <= 0) return;
  if (jobs <= 1) {
    fn(0, 0, count);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
  const int base = count / jobs;
  const int extra = count % jobs;
  int begin = 0;
  for (int w = 0; w < jobs; ++w) {
    const int len = base + (w < extra ? 1 : 0);
    const int end = begin + len;
    threads.emplace_back([&, w, begin, end] {
      try {
        fn(w, begin, end);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
    begin = end;
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace scorewatch

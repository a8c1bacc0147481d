#pragma once

// Seeded random sub-streams, stable string hashing and a deterministic parallel_for.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <string_view>
#include <thread>
#include <vector>

namespace autoirt {

using Rng = std::mt19937_64;

inline constexpr std::uint64_t fnv1a(std::string_view s,
                                     std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Independent generator for (master seed, tag, index); never depends on call order.
inline Rng substream(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
  std::uint64_t s = splitmix64(master ^ fnv1a(tag));
  s = splitmix64(s ^ splitmix64(index + 0x632be59bd9b4e019ull));
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
  return Rng(seq);
}

inline Rng substream(std::uint64_t master, std::string_view tag, std::string_view key) {
  return substream(master, tag, fnv1a(key));
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

namespace detail {
inline std::size_t& worker_slot() {
  static std::size_t workers = [] {
    if (const char* env = std::getenv("AUTOIRT_WORKERS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v > 0) return static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<std::size_t>(hw == 0 ? 1 : hw);
  }();
  return workers;
}
}  // namespace detail

inline std::size_t worker_count() { return detail::worker_slot(); }
inline void set_worker_count(std::size_t n) { detail::worker_slot() = std::max<std::size_t>(1, n); }

/// Runs body(i) for i in [0, n). Each index must write only its own output slot, so the
/// result does not depend on the number of workers.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace autoirt

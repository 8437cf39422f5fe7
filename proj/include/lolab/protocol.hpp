#pragma once

#include <atomic>
#include <string>

#include "lolab/tensor.hpp"

namespace lolab::protocol {

/// Raised when a regularizer path runs inside a meta-test scope.
class ViolationError : public Error {
 public:
  using Error::Error;
};

struct Counters {
  std::atomic<long> regularizer_calls{0};
  std::atomic<long> meta_test_steps{0};
  std::atomic<long> violations{0};
};

inline Counters& counters() {
  static Counters c;
  return c;
}

inline bool& in_meta_test() {
  thread_local bool flag = false;
  return flag;
}

/// Marks the current thread as running a meta-test. Nestable.
class MetaTestScope {
 public:
  MetaTestScope() : prev_(in_meta_test()) { in_meta_test() = true; }
  ~MetaTestScope() { in_meta_test() = prev_; }
  MetaTestScope(const MetaTestScope&) = delete;
  MetaTestScope& operator=(const MetaTestScope&) = delete;

 private:
  bool prev_;
};

/// Every SAM/GSAM/GAM/smoothing/L2 meta-loss entry point calls this first.
inline void regularizer_entry(const char* which) {
  if (in_meta_test()) {
    counters().violations.fetch_add(1);
    throw ViolationError(std::string("regularizer '") + which + "' reached during meta-test");
  }
  counters().regularizer_calls.fetch_add(1);
}

inline void meta_test_step() { counters().meta_test_steps.fetch_add(1); }

}  // namespace lolab::protocol

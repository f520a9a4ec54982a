#pragma once

#include <atomic>
#include <cstdint>

namespace dp {

// Global floating-point operation counter. Only GEMM calls are instrumented
// (2*m*n*k per call), which matches the analytic estimates used in reports:
// elementwise work is excluded from both sides of that comparison.
class FlopCounter {
public:
    static std::atomic<uint64_t>& counter() {
        static std::atomic<uint64_t> c{0};
        return c;
    }
    static std::atomic<bool>& enabled() {
        static std::atomic<bool> e{false};
        return e;
    }
    static void add(uint64_t f) {
        if (enabled().load(std::memory_order_relaxed))
            counter().fetch_add(f, std::memory_order_relaxed);
    }
    static void reset() { counter().store(0, std::memory_order_relaxed); }
    static uint64_t value() { return counter().load(std::memory_order_relaxed); }
};

// Enables counting for a scope and restores the previous state on exit.
class FlopScope {
public:
    FlopScope() : prev_(FlopCounter::enabled().exchange(true)), start_(FlopCounter::value()) {}
    ~FlopScope() { FlopCounter::enabled().store(prev_); }
    uint64_t flops() const { return FlopCounter::value() - start_; }

private:
    bool prev_;
    uint64_t start_;
};

}  // namespace dp

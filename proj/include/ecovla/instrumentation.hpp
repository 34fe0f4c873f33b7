#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace ecovla {

// Thread-local counters behind the observable performance claims:
//   x_traversals        full sweeps over the activation input per linear kernel
//   kernel_invocations  fused-metric kernel launches (batched path counts 1)
//   flop_ops            elementary float ops spent in pruning-metric updates
//                       (mul/add/sub/div/sqrt = 1, fma = 2; comparisons and
//                       index shuffles are not FLOPs and are not counted)
struct KernelCounters {
    std::uint64_t x_traversals = 0;
    std::uint64_t kernel_invocations = 0;
    std::uint64_t flop_ops = 0;

    void reset() { *this = KernelCounters{}; }
};

inline KernelCounters& counters() {
    thread_local KernelCounters c;
    return c;
}

// Records the dimensions of every Matrix buffer allocated while armed.
// Used to show that fused kernels never materialize full-width intermediates.
class AllocationProbe {
  public:
    struct Record {
        std::size_t rows;
        std::size_t cols;
    };

    AllocationProbe() { active_ = this; }
    ~AllocationProbe() { active_ = nullptr; }

    AllocationProbe(const AllocationProbe&) = delete;
    AllocationProbe& operator=(const AllocationProbe&) = delete;

    const std::vector<Record>& records() const { return records_; }

    static void note(std::size_t rows, std::size_t cols) {
        if (active_ != nullptr) active_->records_.push_back({rows, cols});
    }

  private:
    static thread_local AllocationProbe* active_;
    std::vector<Record> records_;
};

inline thread_local AllocationProbe* AllocationProbe::active_ = nullptr;

}  // namespace ecovla

#pragma once

#include <cstddef>
#include <exception>
#include <vector>

namespace tg {

/// Execution policy for the data-parallel paths. `serial` is the reference
/// implementation; `parallel` distributes independent work items with OpenMP
/// and must produce bit-identical results.
enum class Exec { serial, parallel };

/// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

/// Calls f(i) for i in [0, n). Under Exec::parallel the items run on the
/// OpenMP team; the first exception (lowest index) is rethrown afterwards.
template <class F>
void for_each_index(std::size_t n, Exec exec, F&& f) {
    if (exec == Exec::serial || n < 2) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < count; ++i) {
        try {
            f(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace tg

#pragma once

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cpreach {

// Execution mode for the data-parallel kernels. Every kernel has a serial
// path that produces bit-identical results to the OpenMP path; the serial
// path is the reference implementation used by the consistency tests.
enum class Exec { Serial, OpenMP };

template <typename F>
void par_for(std::size_t count, Exec mode, F&& body) {
    if (mode == Exec::OpenMP) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(count); ++i)
            body(static_cast<std::size_t>(i));
        return;
#endif
    }
    for (std::size_t i = 0; i < count; ++i) body(i);
}

// Deterministic parallel reduction: items are grouped into fixed-size chunks,
// chunk partials are computed in parallel and combined serially in chunk
// order. The result does not depend on the thread count.
//
// Acc must be default-constructible; accumulate(acc, i) folds item i into a
// chunk partial; combine(total, acc) folds a chunk partial into the total.
template <typename Acc, typename Accumulate, typename Combine>
Acc chunked_reduce(std::size_t count, Exec mode, Accumulate&& accumulate, Combine&& combine,
                   std::size_t chunk = 32) {
    if (chunk == 0) chunk = 1;
    const std::size_t nchunks = (count + chunk - 1) / chunk;
    std::vector<Acc> partials(nchunks);
    par_for(nchunks, mode, [&](std::size_t c) {
        const std::size_t lo = c * chunk;
        const std::size_t hi = std::min(count, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) accumulate(partials[c], i);
    });
    Acc total{};
    for (std::size_t c = 0; c < nchunks; ++c) combine(total, partials[c]);
    return total;
}

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

} // namespace cpreach

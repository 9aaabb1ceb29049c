#pragma once

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cfsg {

/// Worker count used by the parallel kernels. Capped by the CFSG_THREADS
/// environment variable when set. Results never depend on this value: every
/// output cell is reduced in a fixed sequential order by exactly one worker.
inline int worker_count() {
    static const int n = [] {
#ifdef _OPENMP
        int max = omp_get_max_threads();
#else
        int max = 1;
#endif
        if (const char* env = std::getenv("CFSG_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1 && cap < max) max = cap;
        }
        return max < 1 ? 1 : max;
    }();
    return n;
}

} // namespace cfsg

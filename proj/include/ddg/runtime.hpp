#pragma once

// Process-level knobs for long training runs.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ddg {

/// Keeps large activation buffers on the heap instead of fresh mmap pages,
/// which otherwise cost a page-fault storm on every training step.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
#endif
}

} // namespace ddg

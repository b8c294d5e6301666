// Process-wide allocator settings.

#pragma once

namespace rtdlab {

// Training allocates and frees many buffers of a few megabytes per step.
// With glibc defaults those go straight back to the kernel and every step
// pays page faults again; this keeps them in the heap. No-op elsewhere.
void tune_allocator();

}  // namespace rtdlab

#pragma once

namespace eas {

/// Keeps large tensor buffers inside the heap instead of returning them to
/// the OS after every op. Training allocates and frees megabyte-sized
/// activations each step; without this every allocation pays fresh page
/// faults. Safe to call more than once.
void tune_allocator();

}  // namespace eas

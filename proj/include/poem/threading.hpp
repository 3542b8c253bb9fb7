#pragma once

namespace poem {

// Caps the number of worker threads used by the BLAS backend.
// set_num_threads(1) gives fully single-lane reductions (the
// --deterministic contract); 0 means "use all hardware threads".
void set_num_threads(int n);
int num_threads();

} // namespace poem

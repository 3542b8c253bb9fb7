#include "poem/threading.hpp"

#include <thread>

extern "C" void openblas_set_num_threads(int);

namespace poem {

namespace {
int g_threads = 0;
}

void set_num_threads(int n) {
  g_threads = n;
  int eff = n > 0 ? n : static_cast<int>(std::thread::hardware_concurrency());
  if (eff < 1) eff = 1;
  openblas_set_num_threads(eff);
}

int num_threads() { return g_threads; }

} // namespace poem

#include "morphgen/signal/fft.hpp"

#include <fftw3.h>

#include <cstring>
#include <mutex>

namespace morphgen::signal {

namespace {
std::mutex planner_mutex;  // the FFTW planner is not thread-safe
}

void dft3d(const std::complex<double>* in, Shape3 shape, std::complex<double>* out, bool inverse) {
  const std::size_t n = static_cast<std::size_t>(shape.cells());
  // fftw_malloc keeps the buffer alignment constant so ESTIMATE always picks
  // the same plan; heap-vector alignment varies run to run and would make
  // the rounding nondeterministic.
  fftw_complex* buf_in = fftw_alloc_complex(n);
  fftw_complex* buf_out = fftw_alloc_complex(n);
  std::memcpy(buf_in, in, n * sizeof(std::complex<double>));

  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(planner_mutex);
    plan = fftw_plan_dft_3d(static_cast<int>(shape.x), static_cast<int>(shape.y),
                            static_cast<int>(shape.z), buf_in, buf_out,
                            inverse ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(planner_mutex);
    fftw_destroy_plan(plan);
  }
  std::memcpy(out, buf_out, n * sizeof(std::complex<double>));
  fftw_free(buf_in);
  fftw_free(buf_out);
}

}  // namespace morphgen::signal

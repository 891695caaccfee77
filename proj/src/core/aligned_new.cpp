// Global 64-byte-aligned allocation. Vectorized reductions peel loop heads
// based on runtime pointer alignment, so heap alignment that varies from run
// to run changes summation order and breaks bitwise reproducibility. Pinning
// every allocation to one alignment keeps those code paths identical.

#include <cstdlib>
#include <new>

namespace {

constexpr std::size_t kAlign = 64;

void* aligned_new(std::size_t size) {
  if (size == 0) size = 1;
  const std::size_t rounded = (size + kAlign - 1) / kAlign * kAlign;
  void* p = std::aligned_alloc(kAlign, rounded);
  if (!p) throw std::bad_alloc();
  return p;
}

}  // namespace

void* operator new(std::size_t size) { return aligned_new(size); }
void* operator new[](std::size_t size) { return aligned_new(size); }
void* operator new(std::size_t size, const std::nothrow_t&) noexcept {
  if (size == 0) size = 1;
  const std::size_t rounded = (size + kAlign - 1) / kAlign * kAlign;
  return std::aligned_alloc(kAlign, rounded);
}
void* operator new[](std::size_t size, const std::nothrow_t&) noexcept {
  return operator new(size, std::nothrow);
}

void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }

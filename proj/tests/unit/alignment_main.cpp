// Separate binary: it replaces global operator new so that every allocation
// lands at a different 16-byte offset, which would expose any kernel whose
// rounding depends on buffer alignment.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <cstring>
#include <new>

#include "doctest.h"
#include "thoraxdiff/diffusion.hpp"
#include "thoraxdiff/phantom.hpp"
#include "thoraxdiff/trainer.hpp"

using namespace thoraxdiff;

namespace {
unsigned g_state = 1;
}

void* operator new(std::size_t n) {
  g_state = g_state * 1103515245u + 12345u;
  const std::size_t off = 16 * (1 + ((g_state >> 16) % 4));
  char* base = static_cast<char*>(std::malloc(n + 80));
  if (!base) throw std::bad_alloc();
  char* p = base + off;
  std::memcpy(p - sizeof base, &base, sizeof base);
  return p;
}
void operator delete(void* p) noexcept {
  if (!p) return;
  char* base = nullptr;
  std::memcpy(&base, static_cast<char*>(p) - sizeof base, sizeof base);
  std::free(base);
}
void operator delete(void* p, std::size_t) noexcept { operator delete(p); }

TEST_CASE("denoiser forward and backward do not depend on buffer alignment") {
  const DenoiserConfig cfg;  // desk size, attention included
  const auto net = Denoiser<float>::initialized(cfg, 3, true);
  const Phantom p = generate_phantom(1);
  const Tensor<float> input =
      build_condition(p.volume.values, layout_to_channels(p.layout, Conditioning::LungAndNodule));

  Tensor<float> ref_out;
  std::vector<float> ref_grad;
  for (int it = 0; it < 4; ++it) {
    UNetModel model(net.shared_net());
    const Tensor<float> in = input;
    const std::vector<float> params(net.params());
    Tensor<float> out;
    model.forward(params, in, 17, {}, out);
    Tensor<float> d(1, out.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(i % 7) * 1e-3f - 3e-3f;
    std::vector<float> grad(params.size(), 0.0f);
    model.backward(params, d, grad);
    if (it == 0) {
      ref_out = out;
      ref_grad = grad;
    } else {
      CHECK(out == ref_out);
      CHECK(grad == ref_grad);
    }
  }
}

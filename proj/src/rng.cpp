#include "mvtsg/rng.hpp"

#include <cmath>

#include "mvtsg/errors.hpp"

namespace mvtsg {

double Rng::next_exponential() { return -std::log(next_positive_double()); }

int Rng::next_weighted(const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw NumericalError("next_weighted: negative or NaN weight");
    total += w;
  }
  if (!(total > 0.0)) throw NumericalError("next_weighted: weights sum to zero");
  double u = next_double() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size() - 1);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  // splitmix-style finalizer over the concatenated words; stable across
  // platforms, so substreams never depend on container iteration order.
  auto mix = [](std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base + 0x9e3779b97f4a7c15ULL);
  h = mix(h ^ (a + 0x9e3779b97f4a7c15ULL));
  h = mix(h ^ (b + 0x632be59bd9b4e019ULL));
  return h;
}

}  // namespace mvtsg

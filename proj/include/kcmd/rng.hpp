#pragma once

#include <cstdint>
#include <initializer_list>

namespace kcmd {

// splitmix64 finalizer; used to derive independent stream seeds from a base
// seed and a list of integer tags.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = mix64(base);
  for (auto t : tags) s = mix64(s ^ mix64(t + 0x5851f42d4c957f2dULL));
  return s;
}

}  // namespace kcmd

#pragma once

#include <cstdint>
#include <random>

namespace icl {

// Independent generator per (stream, index); stable across platforms.
std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

}  // namespace icl

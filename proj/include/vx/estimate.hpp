#pragma once

#include <string>
#include <vector>

#include "vx/model.hpp"

namespace vx {

struct MemoryStage {
  std::string name;
  std::size_t scalars = 0;
  std::size_t bytes() const { return scalars * sizeof(double); }
};

struct MemoryEstimate {
  std::vector<MemoryStage> stages;
  std::size_t peak_scalars = 0;
  std::size_t peak_bytes() const { return peak_scalars * sizeof(double); }
};

// Closed-form peak live activation scalars per pipeline stage for an
// inference forward pass at sequence length n (class token included in n)
// and the given batch size. Parameters and other resident state are
// excluded: this models the growth above the pre-forward baseline, which is
// what the allocation meter measures around a forward call.
MemoryEstimate estimate_activation_memory(const ModelConfig& cfg, std::size_t n,
                                          std::size_t batch);

struct FlopSection {
  std::string name;
  std::size_t macs = 0;
};

struct FlopEstimate {
  std::vector<FlopSection> sections;
  std::size_t total_macs = 0;
};

// Multiply-accumulate counts per forward pass at batch 1 and length n.
FlopEstimate estimate_flops(const ModelConfig& cfg, std::size_t n);

// Stage formulas for one mixer invocation alone (the benchmark measures
// mix() on raw [1,n,d] inputs, without the encoder around it).
std::size_t estimate_mixer_scalars(const MixerConfig& mixer, std::size_t n,
                                   std::size_t batch);
std::size_t estimate_mixer_macs(const MixerConfig& mixer, std::size_t n);

}  // namespace vx

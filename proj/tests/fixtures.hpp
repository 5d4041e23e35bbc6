#pragma once

#include <cstdint>

#include "protoclip/training.hpp"

namespace protoclip::testing {

// Narrow encoders so whole training runs take milliseconds.
inline ModelConfig small_model() {
  ModelConfig mc;
  mc.image.hidden_dims = {16};
  mc.label.hidden_dims = {8};
  mc.tabular.hidden_dims = {16};
  mc.image.projection_dim = mc.label.projection_dim = mc.tabular.projection_dim = 16;
  return mc;
}

inline SynthConfig small_synth(std::uint64_t seed, std::size_t n = 120, double noise = 0.1) {
  SynthConfig sc;
  sc.n = n;
  sc.image_dim = 12;
  sc.noise = noise;
  sc.seed = seed;
  sc.modalities = {{"biomarkers", "bio_", 6, 2, true}, {"cognitive", "cog_", 5, 2, false}};
  return sc;
}

inline DatasetTable small_table(std::uint64_t seed, std::size_t n = 120, double noise = 0.1) {
  return make_splits(synth_generate(small_synth(seed, n, noise)).table, seed);
}

inline TrainConfig quick(std::size_t epochs, std::uint64_t seed = 1) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 16;
  tc.lr = 1e-3;
  tc.seed = seed;
  return tc;
}

}  // namespace protoclip::testing

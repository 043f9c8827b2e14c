#pragma once

#include <string>

#include "safe/io/config.hpp"
#include "safe/pretrain/pretrain.hpp"

namespace safe::testing {

/// Smallest model that still exercises every code path quickly.
inline io::RunConfig micro_config() {
  return io::parse_config(
      "seed=3\n"
      "encoder.token_size=8\nencoder.embed_dim=8\nencoder.depth=1\nencoder.heads=2\nencoder.mlp_ratio=2\n"
      "head.layers=2\nhead.hidden=16\nhead.out_dim=8\nobjective.prototypes=16\n"
      "train.batch_size=3\ntrain.epochs=2\ntrain.warmup_epochs=1\ntrain.checkpoint_every=1\n");
}

inline pretrain::Dataset micro_dataset(std::size_t per_class = 2) {
  pretrain::SyntheticSpec spec;
  spec.per_class = per_class;
  return pretrain::synthesize_dataset(spec, SeedStream(21));
}

}  // namespace safe::testing

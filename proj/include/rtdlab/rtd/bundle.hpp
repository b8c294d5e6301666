// Parameters of one generator/discriminator pair under a sharing mode.

#pragma once

#include <cstddef>
#include <vector>

#include "rtdlab/model/encoder.hpp"
#include "rtdlab/rtd/config.hpp"

namespace rtdlab::rtd {

template <typename T>
struct ModelBundle {
  SharingMode mode = SharingMode::kGDES;
  std::size_t vocab_size = 0;
  model::EncoderConfig gen_config;
  model::EncoderConfig disc_config;

  ad::Tensor<T> E_G;      // generator table; the only table under ES
  ad::Tensor<T> E_D;      // NES only
  ad::Tensor<T> E_delta;  // GDES only, zero at initialization
  model::EncoderParams<T> gen_body;
  model::EncoderParams<T> disc_body;
  model::MlmHead<T> mlm;
  model::RtdHead<T> rtd;

  // Parameters moved by L_MLM: E_G, generator body and MLM head.
  model::ParamList<T> generator_params() const;
  // Discriminator body and RTD head, plus E_D (NES) or E_delta (GDES).
  model::ParamList<T> discriminator_params() const;
  // Union of both groups with E_G listed once.
  model::ParamList<T> all_params() const;

  // Table the discriminator embeds through, as a graph value:
  // ES -> E_G, NES -> E_D, GDES -> stop_gradient(E_G) + E_delta.
  ad::Tensor<T> discriminator_table() const;
  // Same table with the GDES sum written out as plain values (E_G + E_delta).
  std::vector<T> materialized_discriminator_table() const;
};

// Deep copy: fresh storage for every tensor, gradients included.
template <typename T>
ModelBundle<T> clone_bundle(const ModelBundle<T>& bundle);

// Generator state (E_G, body, MLM head) is drawn from its own stream and the
// discriminator state from another, so two bundles with the same seed share
// their generator exactly regardless of mode.
template <typename T>
ModelBundle<T> init_bundle(const TrainConfig& config, std::size_t vocab_size);

}  // namespace rtdlab::rtd

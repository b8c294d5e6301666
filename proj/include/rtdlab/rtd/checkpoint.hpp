// Binary checkpoint container. Layout (all integers little-endian):
//
//   magic        8 bytes  "RTDLCKPT"
//   version      u32      kCheckpointVersion
//   step         u64
//   header_len   u32      then header_len bytes of "key=value\n" lines
//                         (the flat TrainConfig plus vocab_size)
//   n_records    u32
//   n_records x  { name_len u32, name bytes, dtype u8 (0 = f32, 1 = f64),
//                  rank u8, rank x u64 extents, row-major payload }
//   end marker   8 bytes  "RTDLEND."
//
// The exported discriminator table is always stored under
// "discriminator.embeddings": E_G under ES, E_D under NES and E_G + E_delta
// under GDES, where E_delta is also kept as "discriminator.embedding_delta".

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "rtdlab/rtd/bundle.hpp"

namespace rtdlab::rtd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Malformed or truncated file contents.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1 };

struct CheckpointRecord {
  std::string name;
  Dtype dtype = Dtype::kF32;
  ad::Shape shape;
  std::vector<double> values;  // widened; f32 payloads convert back exactly
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t step = 0;
  FlatConfig header;
  TrainConfig config;
  std::size_t vocab_size = 0;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord& record(std::string_view name) const;  // throws CheckpointError
  bool has(std::string_view name) const;
};

template <typename T>
Checkpoint make_checkpoint(const ModelBundle<T>& bundle, const TrainConfig& config, std::uint64_t step);

// Throws std::ios_base::failure when the file cannot be written.
void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
// Throws std::ios_base::failure when the file cannot be opened and
// CheckpointError for bad contents, naming the record that is cut short.
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
void save_checkpoint(const ModelBundle<T>& bundle, const TrainConfig& config, std::uint64_t step,
                     const std::filesystem::path& path) {
  write_checkpoint(make_checkpoint(bundle, config, step), path);
}

// Writes the full training checkpoint, whose "discriminator.embeddings"
// record is the exported table described above.
template <typename T>
void export_discriminator(const ModelBundle<T>& bundle, const TrainConfig& config, std::uint64_t step,
                          const std::filesystem::path& path) {
  save_checkpoint(bundle, config, step, path);
}

// The same container restricted to what fine-tuning needs: the header and
// the discriminator records, without the residual table.
Checkpoint discriminator_only(const Checkpoint& checkpoint);

// Rebuilds a trainable bundle in the checkpoint's mode.
template <typename T>
ModelBundle<T> bundle_from_checkpoint(const Checkpoint& checkpoint);

// The exported discriminator alone, as used for fine-tuning.
template <typename T>
struct Discriminator {
  model::EncoderConfig config;
  ad::Tensor<T> embeddings;
  model::EncoderParams<T> body;
  model::RtdHead<T> rtd;

  model::ParamList<T> named() const;
};

template <typename T>
Discriminator<T> load_discriminator(const Checkpoint& checkpoint);

}  // namespace rtdlab::rtd

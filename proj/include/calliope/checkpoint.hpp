#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calliope/tensor.hpp"

namespace calliope {

/// Payload element type of a checkpoint entry.
enum class DType : std::uint32_t {
  f32 = 0,
  f64 = 1,
  u32 = 2,
  u64 = 3,
  u16 = 4,
  u8 = 5,
};

std::size_t dtype_size(DType dt);

/// One named tensor in a checkpoint file. bytes holds the little-endian
/// payload; dims gives the logical shape (scalars use a single dim of 1).
struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;

  std::uint64_t numel() const;
};

CheckpointEntry make_entry_f32(const std::string& name, const Tensor& t);
CheckpointEntry make_entry_u64(const std::string& name, std::uint64_t value);
CheckpointEntry make_entry_u32_list(const std::string& name,
                                    const std::vector<std::uint32_t>& values);

Tensor entry_as_f32(const CheckpointEntry& e);
std::uint64_t entry_as_u64(const CheckpointEntry& e);
std::vector<std::uint32_t> entry_as_u32_list(const CheckpointEntry& e);

/// Binary container: magic "CLLP", u32 version, u32 entry count, then per
/// entry: u32 name length, name bytes, u32 dtype, u32 rank, u32 dims[rank],
/// raw payload. All integers and payloads little-endian. Writes go through
/// a temp file and rename so a crash never leaves a half-written file.
void write_checkpoint(const std::string& path,
                      const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

/// FNV-1a over a file's bytes; used to fingerprint corpora in run manifests.
std::uint64_t fnv1a_file(const std::string& path);

}  // namespace calliope

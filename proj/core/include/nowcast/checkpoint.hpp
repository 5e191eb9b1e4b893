#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nowcast/blocks.hpp"
#include "nowcast/model.hpp"

namespace nowcast {

/// Binary layout: "SQMU" | u32 version | u32 count | per tensor
/// (u16 name length, name bytes, u8 rank, u32 dims[rank], f32 LE payload),
/// tensors sorted by name.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

void write_checkpoint(const std::filesystem::path& path, std::vector<CheckpointEntry> entries);
/// FormatError on bad magic, version or truncation; IoError when unreadable.
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Registry<T>& registry);

/// All-or-nothing: the registry is only written to after every entry has
/// been read and matched by name and dims. FormatError otherwise.
template <class T>
void load_checkpoint(const std::filesystem::path& path, const Registry<T>& registry);

/// Variant implied by the tensor names in a checkpoint, or nullopt when the
/// names match no known layout.
std::optional<Variant> infer_variant(const std::vector<CheckpointEntry>& entries);

template <class T>
void save_checkpoint(const std::filesystem::path& path, const UNet<T>& model) {
  save_checkpoint(path, model.registry());
}
/// VariantMismatchError when the file holds a different variant, FormatError
/// for any other registry mismatch.
template <class T>
void load_checkpoint(const std::filesystem::path& path, UNet<T>& model);

}  // namespace nowcast

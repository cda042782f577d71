#pragma once

// Binary checkpoints:
//   "FALN" | u32 version | u64 length + canonical JSON architecture |
//   u64 count + parameter tensors | Adam settings, step and moments | u32 CRC-32
// Each tensor is u32 rank, u64 extents, then little-endian float64 values.

#include "featalign/model.hpp"

#include <filesystem>
#include <stdexcept>

namespace featalign {

inline constexpr std::uint32_t checkpoint_version = 1;

class checkpoint_error : public std::runtime_error {
public:
    enum class kind { io, bad_magic, version_mismatch, truncated, checksum, shape_mismatch };
    checkpoint_error(kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
    kind code() const noexcept { return kind_; }

private:
    kind kind_;
};

struct checkpoint {
    nlohmann::json architecture;
    std::vector<tensor> parameters;
    adam_state adam;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& architecture,
                     std::span<const tensor* const> parameters, const adam_state& adam);
void save_checkpoint(const std::filesystem::path& path, const network& net, const adam_state& adam);

checkpoint read_checkpoint(const std::filesystem::path& path);

/// Restores parameters and optimizer state into an existing model whose
/// architecture must equal the stored one.
void load_checkpoint_into(const std::filesystem::path& path, const nlohmann::json& architecture,
                          std::span<tensor* const> parameters, adam_state& adam);

struct loaded_network {
    network net;
    adam_state adam;
};
/// Rebuilds the network from the stored architecture.
loaded_network load_checkpoint(const std::filesystem::path& path);

} // namespace featalign

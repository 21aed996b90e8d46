#pragma once

#include <filesystem>

#include "avg/numerics/parameters.hpp"

namespace avg::numerics {

inline constexpr uint32_t kCheckpointVersion = 1;

/// Writes params as an "AVGW" checkpoint (rank-2 entries, f32 payload).
void write_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params);

/// Reads an "AVGW" checkpoint; rank-1 entries load as 1 x n rows.
ParameterSet<float> read_checkpoint(const std::filesystem::path& path);

}  // namespace avg::numerics

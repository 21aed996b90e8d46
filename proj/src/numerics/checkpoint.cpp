#include "avg/numerics/checkpoint.hpp"

#include "avg/io/binary.hpp"

namespace avg::numerics {

void write_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params) {
  io::BinaryWriter w(path);
  w.magic("AVGW");
  w.put<uint32_t>(kCheckpointVersion);
  w.put<uint32_t>(static_cast<uint32_t>(params.size()));
  for (const auto& [name, m] : params) {
    if (name.size() > 0xFFFF) throw UsageError("parameter name too long: " + name.substr(0, 32));
    w.put<uint16_t>(static_cast<uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<uint8_t>(2);
    w.put<uint32_t>(static_cast<uint32_t>(m.rows()));
    w.put<uint32_t>(static_cast<uint32_t>(m.cols()));
    w.bytes(m.data(), sizeof(float) * static_cast<size_t>(m.size()));
  }
  w.close();
}

ParameterSet<float> read_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("AVGW");
  const auto version = r.get<uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("'" + path.string() + "': unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<uint32_t>();
  ParameterSet<float> params;
  for (uint32_t e = 0; e < count; ++e) {
    const auto len = r.get<uint16_t>();
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    const auto rank = r.get<uint8_t>();
    if (rank < 1 || rank > 2) throw FormatError("'" + path.string() + "': entry '" + name + "' has rank " + std::to_string(rank));
    Index rows = 1, cols = 0;
    if (rank == 1) {
      cols = r.get<uint32_t>();
    } else {
      rows = r.get<uint32_t>();
      cols = r.get<uint32_t>();
    }
    MatrixF m(rows, cols);
    r.bytes(m.data(), sizeof(float) * static_cast<size_t>(m.size()));
    if (!m.allFinite()) throw FormatError("'" + path.string() + "': entry '" + name + "' has non-finite values");
    params.add(name, std::move(m));
  }
  if (!r.at_end()) throw FormatError("'" + path.string() + "': trailing bytes after last entry");
  return params;
}

}  // namespace avg::numerics

#include "ulsa/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include "json.hpp"

#include "ulsa/error.hpp"

namespace ulsa {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'U', 'L', 'S', 'A', 'C', 'K', 'P', 'T'};
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  nlohmann::json header;
  header["format"] = "ulsa-checkpoint";
  header["version"] = 1;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const std::uint64_t nbytes = t.tensor.size() * sizeof(double);
    header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.tensor.data().data()),
              static_cast<std::streamsize>(t.tensor.size() * sizeof(double)));
  if (!out) throw IoError("short write on checkpoint " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError(path.string() + " is not a ulsa checkpoint");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  const auto payload_start = in.tellg();

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  if (header.value("version", 0) != 1) throw IoError("unsupported checkpoint version in " + path.string());

  std::vector<NamedTensor> result;
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_size(shape) * sizeof(double))
      throw IoError("checkpoint entry " + entry.at("name").get<std::string>() + " has inconsistent size");
    std::vector<double> data(shape_size(shape));
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError("truncated checkpoint payload in " + path.string());
    result.push_back({entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))});
  }
  return result;
}

}  // namespace ulsa

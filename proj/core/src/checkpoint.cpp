#include "kvec/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>

#include "kvec/error.hpp"

namespace kvec {
namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), b.size());
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  if (!is) throw ValidationError("checkpoint truncated in header length");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

void put_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 3; i >= 0; --i) u = (u << 8) | p[i];
  return std::bit_cast<float>(u);
}

}  // namespace

const CheckpointTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                      const std::vector<NamedStore>& stores) {
  nlohmann::json header;
  header["format"] = "kvec-checkpoint";
  header["version"] = 1;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();

  std::string payload;
  for (const auto& [prefix, store] : stores) {
    for (const auto& p : store->params()) {
      const std::size_t offset = payload.size();
      for (double v : p.value.data()) put_f32(payload, static_cast<float>(v));
      header["tensors"].push_back({{"name", prefix + "/" + p.name},
                                   {"shape", {p.value.rows(), p.value.cols()}},
                                   {"dtype", "f32"},
                                   {"offset", offset},
                                   {"nbytes", payload.size() - offset}});
    }
  }

  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("cannot open checkpoint for writing: " + path.string());
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw ValidationError("failed writing checkpoint: " + path.string());
}

namespace {

Checkpoint decode_tensors(const nlohmann::json& header, const std::string& payload) {
  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
  for (const auto& t : header.at("tensors")) {
    CheckpointTensor ct;
    ct.name = t.at("name").get<std::string>();
    ct.rows = t.at("shape").at(0).get<std::size_t>();
    ct.cols = t.at("shape").at(1).get<std::size_t>();
    if (t.at("dtype").get<std::string>() != "f32")
      throw ValidationError("unsupported dtype for tensor '" + ct.name + "'");
    const auto offset = t.at("offset").get<std::size_t>();
    const auto nbytes = t.at("nbytes").get<std::size_t>();
    if (nbytes != ct.rows * ct.cols * 4 || offset + nbytes > payload.size())
      throw ValidationError("tensor '" + ct.name + "' has inconsistent extent");
    ct.data.resize(ct.rows * ct.cols);
    for (std::size_t i = 0; i < ct.data.size(); ++i) ct.data[i] = get_f32(bytes + offset + 4 * i);
    ckpt.tensors.push_back(std::move(ct));
  }
  return ckpt;
}

}  // namespace

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint: " + path.string());
  is.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(is.tellg());
  is.seekg(0);
  if (file_size < 8) throw ValidationError("checkpoint too short: " + path.string());
  const std::uint64_t n = get_u64(is);
  if (n > file_size - 8) throw ValidationError("not a kvec checkpoint: " + path.string());
  std::string text(n, '\0');
  is.read(text.data(), static_cast<std::streamsize>(n));
  if (!is) throw ValidationError("checkpoint truncated in header");
  const std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || header.value("format", "") != "kvec-checkpoint")
    throw ValidationError("not a kvec checkpoint: " + path.string());

  try {
    return decode_tensors(header, payload);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
  }
}

void load_parameters(ParameterStore& store, const Checkpoint& ckpt, std::string_view prefix) {
  for (auto& p : store.params()) {
    const std::string name = std::string(prefix) + "/" + p.name;
    const auto* t = ckpt.find(name);
    if (!t) throw ValidationError("checkpoint is missing tensor '" + name + "'");
    if (t->rows != p.value.rows() || t->cols != p.value.cols())
      throw ValidationError("shape mismatch for tensor '" + name + "'");
    for (std::size_t i = 0; i < t->data.size(); ++i) p.value[i] = t->data[i];
  }
}

}  // namespace kvec

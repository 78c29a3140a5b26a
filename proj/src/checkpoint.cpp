#include "msg/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "msg/error.hpp"

namespace msg::model {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::filesystem::path& path) : bytes_(bytes), path_(path) {}

  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint " + path_.string() + ": truncated file");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }

 private:
  const std::string& bytes_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json tensors = json::array();
  for (const auto& t : ckpt.tensors) {
    if (t.values.size() != ad::numel(t.shape)) {
      detail::contract_fail("save_checkpoint: tensor " + t.name + " has " + std::to_string(t.values.size()) +
                            " values for shape " + ad::shape_string(t.shape));
    }
    tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  }
  const json header = {{"meta", ckpt.meta}, {"tensors", tensors}, {"exact_plane", "float64"}};
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& t : ckpt.tensors) {
    for (double v : t.values) put<float>(out, static_cast<float>(v));
  }
  for (const auto& t : ckpt.tensors) {
    for (double v : t.values) put<double>(out, v);
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so an interrupted save never clobbers the last good file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint " + path.string() + ": cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("checkpoint " + path.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint " + path.string() + ": cannot open");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path);
  if (std::memcmp(r.take(4), kCheckpointMagic, 4) != 0) {
    throw IoError("checkpoint " + path.string() + ": bad magic (not an MSGC file)");
  }
  const std::uint32_t version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t header_len = r.get<std::uint32_t>();
  json header;
  try {
    header = json::parse(std::string(r.take(header_len), header_len));
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + ": corrupt header: " + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
      TensorRecord rec;
      rec.name = t.at("name").get<std::string>();
      rec.shape = t.at("shape").get<ad::Shape>();
      rec.values.resize(ad::numel(rec.shape));
      ckpt.tensors.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + ": corrupt header: " + e.what());
  }
  for (auto& t : ckpt.tensors) {
    for (double& v : t.values) v = static_cast<double>(r.get<float>());
  }
  if (header.value("exact_plane", std::string()) == "float64") {
    for (auto& t : ckpt.tensors) {
      for (double& v : t.values) v = r.get<double>();
    }
  }
  return ckpt;
}

void append_parameters(Checkpoint& ckpt, const ParameterList& params) {
  for (const auto& p : params) {
    const auto v = p.value.values();
    ckpt.tensors.push_back({p.name, p.value.shape(), std::vector<double>(v.begin(), v.end())});
  }
}

void restore_parameters(const Checkpoint& ckpt, const ParameterList& params) {
  for (const auto& p : params) {
    const TensorRecord* t = ckpt.find(p.name);
    if (t == nullptr) detail::contract_fail("restore_parameters: checkpoint has no tensor " + p.name);
    if (t->shape != p.value.shape()) {
      detail::contract_fail("restore_parameters: " + p.name + " has shape " + ad::shape_string(t->shape) +
                            " in checkpoint, model expects " + ad::shape_string(p.value.shape()));
    }
    auto dst = p.value;
    std::copy(t->values.begin(), t->values.end(), dst.mutable_values().begin());
  }
}

}  // namespace msg::model

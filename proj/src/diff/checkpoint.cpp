#include "dyad/diff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dyad/binio.hpp"
#include "dyad/errors.hpp"

namespace dyad::diff {

namespace {

constexpr char kMagic[8] = {'D', 'Y', 'A', 'D', 'C', 'K', 'P', 'T'};

}  // namespace

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void Checkpoint::put(TensorRecord record) {
  for (auto& t : tensors)
    if (t.name == record.name) {
      t = std::move(record);
      return;
    }
  tensors.push_back(std::move(record));
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  binio::Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  const std::string meta = ckpt.meta.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    std::uint64_t n = 1;
    for (auto d : t.shape) {
      w.u64(d);
      n *= d;
    }
    if (n != t.data.size()) throw ShapeError("checkpoint tensor " + t.name + ": payload does not match shape");
    for (float v : t.data) w.f32(v);
  }
  binio::write_file_atomic(path, w.buffer());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(binio::read_file(path), "checkpoint");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError(path.string() + " is not a checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint version " + std::to_string(version) + " unsupported");
  Checkpoint ckpt;
  std::string meta(r.u32(), '\0');
  r.bytes(meta.data(), meta.size());
  try {
    ckpt.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    TensorRecord t;
    t.name.resize(r.u32());
    r.bytes(t.name.data(), t.name.size());
    const auto ndim = r.u32();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(r.u64());
      n *= t.shape.back();
    }
    r.need(n * 4);
    t.data.resize(n);
    for (auto& v : t.data) v = r.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return ckpt;
}

template <typename T>
TensorRecord to_record(const std::string& name, const NdArray<T>& a) {
  TensorRecord r{name, {a.rows(), a.cols()}, {}};
  r.data.reserve(a.size());
  for (T v : a.values()) r.data.push_back(static_cast<float>(v));
  return r;
}

template <typename T>
NdArray<T> from_record(const TensorRecord& r) {
  if (r.shape.size() != 2) throw ShapeError("tensor " + r.name + " is not rank 2");
  NdArray<T> a(r.shape[0], r.shape[1]);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<T>(r.data[i]);
  return a;
}

template <typename T>
void export_params(const ParamStore<T>& store, Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& p : store.all()) ckpt.put(to_record(prefix + p->name, p->value));
}

template <typename T>
void import_params(const Checkpoint& ckpt, ParamStore<T>& store, const std::string& prefix) {
  for (const auto& p : store.all()) {
    const TensorRecord* r = ckpt.find(prefix + p->name);
    if (!r) throw FormatError("checkpoint is missing parameter " + prefix + p->name);
    NdArray<T> v = from_record<T>(*r);
    if (!v.same_shape(p->value)) throw ShapeError("checkpoint parameter " + p->name + " has wrong shape");
    p->value = std::move(v);
  }
}

template TensorRecord to_record<float>(const std::string&, const NdArray<float>&);
template TensorRecord to_record<double>(const std::string&, const NdArray<double>&);
template NdArray<float> from_record<float>(const TensorRecord&);
template NdArray<double> from_record<double>(const TensorRecord&);
template void export_params<float>(const ParamStore<float>&, Checkpoint&, const std::string&);
template void export_params<double>(const ParamStore<double>&, Checkpoint&, const std::string&);
template void import_params<float>(const Checkpoint&, ParamStore<float>&, const std::string&);
template void import_params<double>(const Checkpoint&, ParamStore<double>&, const std::string&);

}  // namespace dyad::diff

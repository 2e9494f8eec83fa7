#include "advtrain/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace advtrain {

static constexpr char kMagic[8] = {'A', 'T', 'A', 'R', '0', '0', '0', '1'};

namespace {

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

void write_str(std::ostream& os, const std::string& s) {
  uint32_t n = static_cast<uint32_t>(s.size());
  os.write(reinterpret_cast<const char*>(&n), 4);
  os.write(s.data(), n);
}

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
int64_t read_i64(std::istream& is) {
  int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string read_str(std::istream& is) {
  uint32_t n = 0;
  is.read(reinterpret_cast<char*>(&n), 4);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

}  // namespace

void TensorArchive::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os.write(kMagic, 8);
  write_u64(os, meta_str.size());
  for (auto& [k, v] : meta_str) {
    write_str(os, k);
    write_str(os, v);
  }
  write_u64(os, meta_num.size());
  for (auto& [k, v] : meta_num) {
    write_str(os, k);
    write_f64(os, v);
  }
  write_u64(os, tensors.size());
  for (auto& [name, t] : tensors) {
    write_str(os, name);
    write_u64(os, t.shape.size());
    for (int64_t d : t.shape) write_i64(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

TensorArchive TensorArchive::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("bad checkpoint magic in " + path);
  TensorArchive ar;
  uint64_t n = read_u64(is);
  for (uint64_t i = 0; i < n; ++i) {
    std::string k = read_str(is);
    ar.meta_str[k] = read_str(is);
  }
  n = read_u64(is);
  for (uint64_t i = 0; i < n; ++i) {
    std::string k = read_str(is);
    ar.meta_num[k] = read_f64(is);
  }
  n = read_u64(is);
  for (uint64_t i = 0; i < n; ++i) {
    std::string name = read_str(is);
    uint64_t rank = read_u64(is);
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = read_i64(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    ar.tensors.emplace(std::move(name), std::move(t));
  }
  if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  return ar;
}

double TensorArchive::num(const std::string& key) const {
  auto it = meta_num.find(key);
  if (it == meta_num.end()) throw std::runtime_error("missing checkpoint field: " + key);
  return it->second;
}

const std::string& TensorArchive::str(const std::string& key) const {
  auto it = meta_str.find(key);
  if (it == meta_str.end()) throw std::runtime_error("missing checkpoint field: " + key);
  return it->second;
}

void pack_model(TensorArchive& ar, ModelState& model) {
  ar.meta_str["architecture"] = model.architecture;
  ar.meta_num["num_classes"] = static_cast<double>(model.num_classes);
  for (auto& p : model.parameters()) ar.tensors["param/" + p.name] = *p.value;
  for (auto& b : model.buffers()) ar.tensors["buffer/" + b.name] = *b.value;
}

ModelState unpack_model(const TensorArchive& ar) {
  ModelState model = build_model(ar.str("architecture"),
                                 static_cast<int64_t>(ar.num("num_classes")), 0);
  for (auto& p : model.parameters()) {
    auto it = ar.tensors.find("param/" + p.name);
    if (it == ar.tensors.end()) throw std::runtime_error("checkpoint missing param " + p.name);
    if (it->second.shape != p.value->shape)
      throw std::runtime_error("checkpoint shape mismatch for " + p.name);
    *p.value = it->second;
  }
  for (auto& b : model.buffers()) {
    auto it = ar.tensors.find("buffer/" + b.name);
    if (it == ar.tensors.end()) throw std::runtime_error("checkpoint missing buffer " + b.name);
    *b.value = it->second;
  }
  return model;
}

void save_model_checkpoint(const std::string& path, ModelState& model, int64_t epoch) {
  TensorArchive ar;
  pack_model(ar, model);
  ar.meta_num["epoch"] = static_cast<double>(epoch);
  ar.save(path);
}

}  // namespace advtrain

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "advtrain/model.hpp"
#include "advtrain/tensor.hpp"

namespace advtrain {

// Named-tensor container with string and numeric metadata. Numbers round-trip
// bit-exactly (raw IEEE-754 doubles). Format: see README "Checkpoint format".
struct TensorArchive {
  std::map<std::string, std::string> meta_str;
  std::map<std::string, double> meta_num;
  std::map<std::string, Tensor> tensors;

  void save(const std::string& path) const;
  static TensorArchive load(const std::string& path);

  double num(const std::string& key) const;
  const std::string& str(const std::string& key) const;
};

// Model <-> archive embedding. Parameters live under "param/", batch-norm
// statistics under "buffer/".
void pack_model(TensorArchive& ar, ModelState& model);
ModelState unpack_model(const TensorArchive& ar);

void save_model_checkpoint(const std::string& path, ModelState& model, int64_t epoch);

}  // namespace advtrain

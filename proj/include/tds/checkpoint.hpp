#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tds/tensor.hpp"

namespace tds {

// Ordered, named parameter registry for one model. Names are unique; the
// registration order defines checkpoint layout and optimizer state order.
class ParamSet {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> init, bool trainable);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor> trainable() const;
  std::vector<Tensor> frozen() const;

  std::int64_t trainable_count() const;
  std::int64_t frozen_count() const;

  // Order-sensitive FNV-1a digest over raw little-endian bytes.
  std::uint64_t checksum() const;
  std::uint64_t checksum_frozen() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Binary checkpoint: magic "TDSC", version u32, count u32, then per parameter
// name length u16, name bytes, rank u8, extents u32 x rank, f64 data.
void save_checkpoint(const std::string& path, const ParamSet& params);

// Loads values into an already-built ParamSet; every stored name must exist
// with a matching shape.
void load_checkpoint(const std::string& path, ParamSet& params);

std::vector<std::uint8_t> checkpoint_bytes(const ParamSet& params);

}  // namespace tds

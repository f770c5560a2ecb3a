#include "tds/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tds {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'S', 'C'};
constexpr std::uint32_t kVersion = 1;

static_assert(sizeof(double) == 8);

template <class T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

void append_f64(std::vector<std::uint8_t>& out, double value) {
  std::uint64_t bits;
  std::memcpy(&bits, &value, 8);
  append_le(out, bits);
}

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  template <class T>
  T read_le() {
    if (pos_ + sizeof(T) > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  double read_f64() {
    const std::uint64_t bits = read_le<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string read_string(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

}  // namespace

Tensor ParamSet::add(const std::string& name, Shape shape, std::vector<double> init,
                     bool trainable) {
  if (has(name)) throw std::invalid_argument("param set: duplicate name " + name);
  Tensor t = Tensor::from_data(std::move(shape), std::move(init));
  t.set_requires_grad(trainable);
  t.mark_param();
  items_.emplace_back(name, t);
  return t;
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw std::out_of_range("param set: no parameter named " + name);
}

bool ParamSet::has(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return true;
  }
  return false;
}

std::vector<Tensor> ParamSet::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [n, t] : items_) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

std::vector<Tensor> ParamSet::frozen() const {
  std::vector<Tensor> out;
  for (const auto& [n, t] : items_) {
    if (!t.requires_grad()) out.push_back(t);
  }
  return out;
}

std::int64_t ParamSet::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items_) {
    if (t.requires_grad()) n += t.numel();
  }
  return n;
}

std::int64_t ParamSet::frozen_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items_) {
    if (!t.requires_grad()) n += t.numel();
  }
  return n;
}

namespace {

std::uint64_t fnv1a_f64(std::uint64_t hash, const std::vector<double>& values) {
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) {
      hash ^= (bits >> (8 * i)) & 0xff;
      hash *= 0x100000001b3ull;
    }
  }
  return hash;
}

}  // namespace

std::uint64_t ParamSet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : items_) h = fnv1a_f64(h, t.values());
  return h;
}

std::uint64_t ParamSet::checksum_frozen() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : items_) {
    if (!t.requires_grad()) h = fnv1a_f64(h, t.values());
  }
  return h;
}

std::vector<std::uint8_t> checkpoint_bytes(const ParamSet& params) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  append_le(out, kVersion);
  append_le(out, static_cast<std::uint32_t>(params.items().size()));
  for (const auto& [name, t] : params.items()) {
    append_le(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) append_le(out, static_cast<std::uint32_t>(t.dim(i)));
    for (double v : t.values()) append_f64(out, v);
  }
  return out;
}

void save_checkpoint(const std::string& path, const ParamSet& params) {
  const auto bytes = checkpoint_bytes(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void load_checkpoint(const std::string& path, ParamSet& params) {
  Reader r(read_file(path));
  const std::string magic = r.read_string(4);
  if (magic != std::string(kMagic, 4)) {
    throw std::runtime_error("checkpoint: bad magic '" + magic + "' in " + path);
  }
  const auto version = r.read_le<std::uint32_t>();
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unknown version " + std::to_string(version));
  }
  const auto count = r.read_le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.read_le<std::uint16_t>();
    const std::string name = r.read_string(name_len);
    const auto rank = r.read_le<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<int>(r.read_le<std::uint32_t>());
    if (!params.has(name)) throw std::runtime_error("checkpoint: unexpected parameter " + name);
    Tensor t = params.get(name);
    if (t.shape() != shape) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": stored " +
                               shape_str(shape) + " vs model " + shape_str(t.shape()));
    }
    auto& dst = t.mutable_values();
    for (double& v : dst) v = r.read_f64();
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
}

}  // namespace tds

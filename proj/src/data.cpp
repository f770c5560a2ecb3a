#include "tds/data.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "tds/rng.hpp"

namespace tds {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'S', 'D'};
constexpr std::uint32_t kVersion = 1;

// 8 drift directions, cycled for larger class counts.
constexpr int kDirs[8][2] = {{1, 0}, {-1, 0}, {0, -1}, {0, 1},
                             {1, -1}, {-1, -1}, {1, 1}, {-1, 1}};

int mod(int a, int m) {
  const int r = a % m;
  return r < 0 ? r + m : r;
}

// Smooth per-clip random field: bilinear upsampling of a coarse random grid.
// Low-frequency content keeps frame differences dominated by the sprite edges
// rather than by pixel noise.
std::vector<double> smooth_field(int h, int w, int cells, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> grid(static_cast<std::size_t>(3) * cells * cells);
  for (double& v : grid) v = unit(gen);
  std::vector<double> out(static_cast<std::size_t>(3) * h * w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      const double gy = (h == 1) ? 0.0 : static_cast<double>(y) * (cells - 1) / (h - 1);
      const int y0 = std::min(static_cast<int>(gy), cells - 2);
      const double fy = gy - y0;
      for (int x = 0; x < w; ++x) {
        const double gx = (w == 1) ? 0.0 : static_cast<double>(x) * (cells - 1) / (w - 1);
        const int x0 = std::min(static_cast<int>(gx), cells - 2);
        const double fx = gx - x0;
        const auto at = [&](int yy, int xx) {
          return grid[(static_cast<std::size_t>(c) * cells + yy) * cells + xx];
        };
        out[(static_cast<std::size_t>(c) * h + y) * w + x] =
            (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
            fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      }
    }
  }
  return out;
}

}  // namespace

void DatasetSpec::displacement(int label, int* dx, int* dy) const {
  if (include_static && label == classes - 1) {
    *dx = 0;
    *dy = 0;
    return;
  }
  const int* dir = kDirs[label % 8];
  *dx = dir[0] * speed;
  *dy = dir[1] * speed;
}

int DatasetSpec::hflip_label(int label) const {
  int dx = 0, dy = 0;
  displacement(label, &dx, &dy);
  for (int c = 0; c < classes; ++c) {
    int cx = 0, cy = 0;
    displacement(c, &cx, &cy);
    if (cx == -dx && cy == dy) return c;
  }
  return label;
}

VideoClip gen_clip(int label, std::uint64_t seed, const DatasetSpec& spec, ClipMotion* motion) {
  if (label < 0 || label >= spec.classes) {
    throw std::invalid_argument("gen_clip: label " + std::to_string(label) + " out of range");
  }
  const int t = spec.raw_frames, h = spec.height, w = spec.width, sp = spec.sprite;
  std::mt19937_64 gen(mix_seed(seed, static_cast<std::uint64_t>(label), 0xDA7Aull));

  std::vector<double> background = smooth_field(h, w, 4, gen);
  std::vector<double> texture = smooth_field(sp, sp, 3, gen);

  std::uniform_int_distribution<int> sx(0, w - 1), sy(0, h - 1);
  ClipMotion m;
  m.start_x = sx(gen);
  m.start_y = sy(gen);
  spec.displacement(label, &m.dx, &m.dy);
  if (motion) *motion = m;

  std::vector<double> pixels(static_cast<std::size_t>(3) * t * h * w);
  for (int ti = 0; ti < t; ++ti) {
    const int ox = m.start_x + ti * m.dx;
    const int oy = m.start_y + ti * m.dy;
    for (int c = 0; c < 3; ++c) {
      double* frame = pixels.data() + (static_cast<std::size_t>(c) * t + ti) * h * w;
      std::memcpy(frame, background.data() + static_cast<std::size_t>(c) * h * w,
                  sizeof(double) * h * w);
      for (int i = 0; i < sp; ++i) {
        for (int j = 0; j < sp; ++j) {
          frame[mod(oy + i, h) * w + mod(ox + j, w)] =
              texture[(static_cast<std::size_t>(c) * sp + i) * sp + j];
        }
      }
    }
  }

  VideoClip clip;
  clip.frames = Tensor::from_data({3, t, h, w}, std::move(pixels));
  clip.label = label;
  clip.id = "c" + std::to_string(label) + "_s" + std::to_string(seed);
  return clip;
}

std::vector<VideoClip> make_dataset(const DatasetSpec& spec, int clips_per_class,
                                    std::uint64_t seed) {
  std::vector<VideoClip> clips;
  clips.reserve(static_cast<std::size_t>(spec.classes) * clips_per_class);
  for (int c = 0; c < spec.classes; ++c) {
    for (int i = 0; i < clips_per_class; ++i) {
      clips.push_back(gen_clip(c, mix_seed(seed, static_cast<std::uint64_t>(i), 0xC11Bull), spec));
    }
  }
  return clips;
}

VideoClip hflip_clip(const VideoClip& clip, const DatasetSpec& spec) {
  const int t = clip.frames.dim(1), h = clip.frames.dim(2), w = clip.frames.dim(3);
  const auto& src = clip.frames.values();
  std::vector<double> flipped(src.size());
  for (int c = 0; c < 3; ++c) {
    for (int ti = 0; ti < t; ++ti) {
      for (int y = 0; y < h; ++y) {
        const std::size_t row = ((static_cast<std::size_t>(c) * t + ti) * h + y) * w;
        for (int x = 0; x < w; ++x) flipped[row + x] = src[row + (w - 1 - x)];
      }
    }
  }
  VideoClip out;
  out.frames = Tensor::from_data(clip.frames.shape(), std::move(flipped));
  out.label = spec.hflip_label(clip.label);
  out.id = clip.id + "_hflip";
  return out;
}

std::vector<int> sparse_sample(int raw_frames, int frames, bool jitter, std::uint64_t seed) {
  if (frames < 1 || frames > raw_frames) {
    throw std::invalid_argument("sparse_sample: need 1 <= T <= T_raw, got T=" +
                                std::to_string(frames) + " T_raw=" + std::to_string(raw_frames));
  }
  std::vector<int> indices(static_cast<std::size_t>(frames));
  std::mt19937_64 gen(seed);
  for (int i = 0; i < frames; ++i) {
    const int lo = (i * raw_frames) / frames;
    const int hi = ((i + 1) * raw_frames) / frames;
    if (jitter) {
      std::uniform_int_distribution<int> dist(lo, hi - 1);
      indices[static_cast<std::size_t>(i)] = dist(gen);
    } else {
      indices[static_cast<std::size_t>(i)] = lo + (hi - lo) / 2;
    }
  }
  return indices;
}

namespace {

template <class T>
void write_le(std::ofstream& out, T value) {
  std::uint8_t bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class FileReader {
 public:
  explicit FileReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("dataset: cannot open " + path);
  }

  template <class T>
  T read_le() {
    std::uint8_t bytes[sizeof(T)];
    in_.read(reinterpret_cast<char*>(bytes), sizeof(T));
    if (!in_) throw std::runtime_error("dataset: truncated file " + path_);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return static_cast<T>(v);
  }

  double read_f64() {
    const std::uint64_t bits = read_le<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string read_string(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) throw std::runtime_error("dataset: truncated file " + path_);
    return s;
  }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void write_dataset(const std::string& path, const std::vector<VideoClip>& clips) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("dataset: cannot write " + path);
  out.write(kMagic, 4);
  write_le(out, kVersion);
  write_le(out, static_cast<std::uint32_t>(clips.size()));
  for (const VideoClip& clip : clips) {
    const int t = clip.frames.dim(1), h = clip.frames.dim(2), w = clip.frames.dim(3);
    write_le(out, static_cast<std::uint16_t>(clip.id.size()));
    out.write(clip.id.data(), static_cast<std::streamsize>(clip.id.size()));
    write_le(out, static_cast<std::uint32_t>(clip.label));
    write_le(out, static_cast<std::uint32_t>(t));
    write_le(out, static_cast<std::uint32_t>(h));
    write_le(out, static_cast<std::uint32_t>(w));
    const auto& v = clip.frames.values();
    // frame-major, CHW within a frame
    for (int ti = 0; ti < t; ++ti) {
      for (int c = 0; c < 3; ++c) {
        const double* plane = v.data() + (static_cast<std::size_t>(c) * t + ti) * h * w;
        for (int i = 0; i < h * w; ++i) {
          std::uint64_t bits;
          std::memcpy(&bits, plane + i, 8);
          write_le(out, bits);
        }
      }
    }
  }
  if (!out) throw std::runtime_error("dataset: write failed for " + path);
}

std::vector<VideoClip> read_dataset(const std::string& path) {
  FileReader r(path);
  const std::string magic = r.read_string(4);
  if (magic != std::string(kMagic, 4)) {
    throw std::runtime_error("dataset: bad magic '" + magic + "' in " + path);
  }
  const auto version = r.read_le<std::uint32_t>();
  if (version != kVersion) {
    throw std::runtime_error("dataset: unknown version " + std::to_string(version));
  }
  const auto count = r.read_le<std::uint32_t>();
  std::vector<VideoClip> clips;
  clips.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    VideoClip clip;
    const auto id_len = r.read_le<std::uint16_t>();
    clip.id = r.read_string(id_len);
    clip.label = static_cast<int>(r.read_le<std::uint32_t>());
    const int t = static_cast<int>(r.read_le<std::uint32_t>());
    const int h = static_cast<int>(r.read_le<std::uint32_t>());
    const int w = static_cast<int>(r.read_le<std::uint32_t>());
    std::vector<double> pixels(static_cast<std::size_t>(3) * t * h * w);
    for (int ti = 0; ti < t; ++ti) {
      for (int c = 0; c < 3; ++c) {
        double* plane = pixels.data() + (static_cast<std::size_t>(c) * t + ti) * h * w;
        for (int j = 0; j < h * w; ++j) plane[j] = r.read_f64();
      }
    }
    clip.frames = Tensor::from_data({3, t, h, w}, std::move(pixels));
    clips.push_back(std::move(clip));
  }
  return clips;
}

}  // namespace tds

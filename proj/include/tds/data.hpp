#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tds/tensor.hpp"

namespace tds {

struct VideoClip {
  Tensor frames;  // [3, T_raw, H, W], values in [0,1]
  int label = 0;
  std::string id;
};

// Motion-only synthetic classes: a textured sprite drifting over a static
// random background; appearance alone carries no label information.
struct DatasetSpec {
  int classes = 4;           // right, left, up, down (then static if enabled)
  int raw_frames = 16;
  int height = 32, width = 32;
  int sprite = 8;            // sprite edge length in pixels
  int speed = 2;             // pixels per frame along the class direction
  bool include_static = false;  // class classes-1 becomes "no motion"

  void displacement(int label, int* dx, int* dy) const;
  int hflip_label(int label) const;  // left<->right under horizontal flip
};

struct ClipMotion {
  int start_x = 0, start_y = 0;
  int dx = 0, dy = 0;
};

VideoClip gen_clip(int label, std::uint64_t seed, const DatasetSpec& spec,
                   ClipMotion* motion = nullptr);

std::vector<VideoClip> make_dataset(const DatasetSpec& spec, int clips_per_class,
                                    std::uint64_t seed);

// Mirrors frames on the x axis and remaps direction-sensitive labels.
VideoClip hflip_clip(const VideoClip& clip, const DatasetSpec& spec);

// T_raw split into T equal segments, one index per segment: the segment centre
// without jitter, uniform within the segment otherwise. Strictly increasing.
std::vector<int> sparse_sample(int raw_frames, int frames, bool jitter, std::uint64_t seed);

// Binary dataset file: magic "TDSD", version u32, clip count u32; per clip
// id length u16 + bytes, label u32, T/H/W u32, f64 pixels frame-major CHW.
void write_dataset(const std::string& path, const std::vector<VideoClip>& clips);
std::vector<VideoClip> read_dataset(const std::string& path);

}  // namespace tds

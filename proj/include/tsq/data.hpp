#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tsq/ts_layer.hpp"

namespace tsq {

// One video: the full frame sequence (length >= 1) plus its class label.
template <class T>
struct VideoRecord {
  ClipTensor<T> frames;  // L x H x W x C
  int label = 0;
  std::string id;
};

// Synthetic moving-square dataset. Class layout:
//   0: square sweeps left -> right
//   1: class 0 with the frame order exactly reversed (right -> left)
//   2: square sweeps the main diagonal, top-left -> bottom-right
//   3: class 2 reversed
// Classes 0/1 (and 2/3) share their per-video appearance draws, so at
// noise_std = 0 a class-1 video is the frame-reversal of its class-0 twin;
// the temporal mean cannot tell them apart by construction.
struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t frames_per_video = 16;
  std::size_t h = 16, w = 16, c = 1;
  double noise_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
};

template <class T>
std::vector<VideoRecord<T>> generate(const SyntheticSpec& spec,
                                     std::size_t n_per_class);

// Training-time sampling: start index uniform over the valid range.
template <class T>
ClipTensor<T> sample_clip_random(const VideoRecord<T>& v, std::size_t k,
                                 std::mt19937_64& rng);

// Evaluation-time sampling: the i-th of n evenly spaced start indices,
// floor((len - K) * i / (n - 1)); a single clip starts at 0.
template <class T>
ClipTensor<T> sample_clip_uniform(const VideoRecord<T>& v, std::size_t k,
                                  std::size_t i, std::size_t n);

// Loads either a TSQ1 tensor file holding a K x H x W x C stack, or a
// directory of equally sized .png/.pgm frames in lexicographic order,
// scaled to [0,1].
template <class T>
ClipTensor<T> load_frames(const std::string& path);

// Writes every squeezed frame twice: raw TSQ1 coefficients, and an 8-bit
// PNG after per-frame min-max normalization. The min/max used per frame
// land in <dir>/normalization.txt; a zero range maps the frame to 0.
template <class T>
void save_squeezed(const SqueezedClip<T>& squeezed, const std::string& dir);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest's directory
  int label = 0;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path,
                    const std::vector<ManifestEntry>& entries);

// Reads every video a manifest points at (paths resolved against the
// manifest's own directory).
template <class T>
std::vector<VideoRecord<T>> load_manifest_videos(const std::string& path);

// Renders a [0,1] frame stack to <dir>/<id>/frame_%05d.png.
template <class T>
void save_video_frames(const Tensor<T>& frames, const std::string& dir);

}  // namespace tsq

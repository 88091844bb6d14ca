#include "tsq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tsq/image_io.hpp"

namespace fs = std::filesystem;

namespace tsq {

void SyntheticSpec::validate() const {
  if (num_classes < 1 || num_classes > 4) {
    throw ConfigError("synthetic generator defines classes 0..3; "
                      "num_classes must be 1..4");
  }
  if (frames_per_video < 1) throw ConfigError("frames_per_video must be >= 1");
  if (h < 4 || w < 4) throw ConfigError("frames must be at least 4x4");
  if (c < 1) throw ConfigError("channel count must be >= 1");
  if (noise_std < 0) throw ConfigError("noise_std must be non-negative");
}

namespace {

std::mt19937_64 stream_for(std::uint64_t seed, std::uint32_t a,
                           std::uint32_t b, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32), a, b, salt};
  return std::mt19937_64(seq);
}

}  // namespace

template <class T>
std::vector<VideoRecord<T>> generate(const SyntheticSpec& spec,
                                     std::size_t n_per_class) {
  spec.validate();
  const std::size_t f = spec.frames_per_video, h = spec.h, w = spec.w,
                    c = spec.c;
  const std::size_t side = std::max<std::size_t>(2, std::min(h, w) / 4);
  std::vector<VideoRecord<T>> out;
  out.reserve(spec.num_classes * n_per_class);

  for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
    const bool reversed = (cls == 1 || cls == 3);
    const std::size_t base = reversed ? cls - 1 : cls;
    const bool diagonal = (base == 2);
    for (std::size_t vid = 0; vid < n_per_class; ++vid) {
      // Appearance is drawn per (base class, video index): each reversed
      // video is the exact frame-reversal of its forward twin at zero noise.
      auto jitter = stream_for(spec.seed, static_cast<std::uint32_t>(base),
                               static_cast<std::uint32_t>(vid), 1);
      const double amp =
          std::uniform_real_distribution<double>(0.7, 1.0)(jitter);
      std::size_t y0 = 0;
      if (!diagonal) {
        y0 = std::uniform_int_distribution<std::size_t>(0, h - side)(jitter);
      }

      Tensor<T> frames({f, h, w, c});
      for (std::size_t t = 0; t < f; ++t) {
        const double progress =
            f > 1 ? static_cast<double>(t) / static_cast<double>(f - 1) : 0.0;
        const std::size_t x = static_cast<std::size_t>(
            std::lround(progress * static_cast<double>(w - side)));
        const std::size_t y =
            diagonal ? static_cast<std::size_t>(std::lround(
                           progress * static_cast<double>(h - side)))
                     : y0;
        const std::size_t dst = reversed ? f - 1 - t : t;
        for (std::size_t yy = y; yy < y + side; ++yy) {
          for (std::size_t xx = x; xx < x + side; ++xx) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              frames(dst, yy, xx, ch) = static_cast<T>(amp);
            }
          }
        }
      }

      if (spec.noise_std > 0.0) {
        auto noise = stream_for(spec.seed, static_cast<std::uint32_t>(cls),
                                static_cast<std::uint32_t>(vid), 2);
        std::normal_distribution<double> dist(0.0, spec.noise_std);
        for (std::size_t i = 0; i < frames.size(); ++i) {
          const double v = static_cast<double>(frames[i]) + dist(noise);
          frames[i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
        }
      }

      VideoRecord<T> rec;
      rec.frames = ClipTensor<T>(std::move(frames));
      rec.label = static_cast<int>(cls);
      char id[64];
      std::snprintf(id, sizeof(id), "class%zu_video%05zu", cls, vid);
      rec.id = id;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

namespace {

template <class T>
ClipTensor<T> slice_clip(const VideoRecord<T>& v, std::size_t k,
                         std::size_t start) {
  const std::size_t p = v.frames.pixels();
  Tensor<T> clip({k, v.frames.h(), v.frames.w(), v.frames.c()});
  const T* src = v.frames.frames.data() + start * p;
  std::copy(src, src + k * p, clip.data());
  return ClipTensor<T>(std::move(clip));
}

}  // namespace

template <class T>
ClipTensor<T> sample_clip_random(const VideoRecord<T>& v, std::size_t k,
                                 std::mt19937_64& rng) {
  const std::size_t len = v.frames.k();
  if (len < k) {
    throw DataError("video " + v.id + " has " + std::to_string(len) +
                    " frames, need " + std::to_string(k));
  }
  const std::size_t start =
      std::uniform_int_distribution<std::size_t>(0, len - k)(rng);
  return slice_clip(v, k, start);
}

template <class T>
ClipTensor<T> sample_clip_uniform(const VideoRecord<T>& v, std::size_t k,
                                  std::size_t i, std::size_t n) {
  const std::size_t len = v.frames.k();
  if (len < k) {
    throw DataError("video " + v.id + " has " + std::to_string(len) +
                    " frames, need " + std::to_string(k));
  }
  if (n < 1 || i >= n) throw DataError("clip index out of range");
  const std::size_t start = n > 1 ? (len - k) * i / (n - 1) : 0;
  return slice_clip(v, k, start);
}

template <class T>
ClipTensor<T> load_frames(const std::string& path) {
  if (fs::is_regular_file(path)) {
    Tensor<T> t = read_tsq1<T>(path);
    if (t.rank() != 4) {
      throw IoError("tensor file " + path +
                    " does not hold a rank-4 frame stack");
    }
    return ClipTensor<T>(std::move(t));
  }
  if (!fs::is_directory(path)) {
    throw IoError("no such frame source: " + path);
  }

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".png" || ext == ".pgm") files.push_back(entry.path());
  }
  if (files.empty()) throw IoError("no frames in " + path);
  std::sort(files.begin(), files.end());

  Tensor<T> stack;
  std::size_t h = 0, w = 0, c = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const std::string frame_path = files[f].string();
    Image img = files[f].extension() == ".pgm" ? read_pgm(frame_path)
                                               : read_png(frame_path);
    if (f == 0) {
      h = img.h;
      w = img.w;
      c = img.c;
      stack = Tensor<T>({files.size(), h, w, c});
    } else if (img.h != h || img.w != w || img.c != c) {
      throw IoError("frame size mismatch at " + frame_path);
    }
    T* dst = stack.data() + f * h * w * c;
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      dst[i] = static_cast<T>(img.data[i]) / T(255);
    }
  }
  return ClipTensor<T>(std::move(stack));
}

namespace {

std::uint8_t to_byte(double v) {
  const long b = std::lround(v * 255.0);
  return static_cast<std::uint8_t>(std::clamp(b, 0l, 255l));
}

}  // namespace

template <class T>
void save_squeezed(const SqueezedClip<T>& squeezed, const std::string& dir) {
  const std::size_t d = squeezed.y.dim(0), h = squeezed.y.dim(1),
                    w = squeezed.y.dim(2), c = squeezed.y.dim(3);
  fs::create_directories(dir);
  std::ofstream sidecar(fs::path(dir) / "normalization.txt");
  if (!sidecar) throw IoError("cannot write normalization sidecar in " + dir);

  const std::size_t plane = h * w * c;
  for (std::size_t f = 0; f < d; ++f) {
    const T* src = squeezed.y.data() + f * plane;
    char name[64];

    std::snprintf(name, sizeof(name), "squeezed_%05zu.tsq", f);
    Tensor<T> frame({h, w, c});
    std::copy(src, src + plane, frame.data());
    write_tsq1((fs::path(dir) / name).string(), frame);

    double lo = static_cast<double>(src[0]), hi = lo;
    for (std::size_t i = 1; i < plane; ++i) {
      lo = std::min(lo, static_cast<double>(src[i]));
      hi = std::max(hi, static_cast<double>(src[i]));
    }
    const double range = hi - lo;
    Image img;
    img.h = h;
    img.w = w;
    img.c = c;
    img.data.resize(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      const double v =
          range > 0.0 ? (static_cast<double>(src[i]) - lo) / range : 0.0;
      img.data[i] = to_byte(v);
    }
    std::snprintf(name, sizeof(name), "squeezed_%05zu.png", f);
    write_png((fs::path(dir) / name).string(), img);

    char line[128];
    std::snprintf(line, sizeof(line), "%05zu %.17g %.17g\n", f, lo, hi);
    sidecar << line;
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(buf.str());
    if (!doc.is_array()) throw DataError("manifest must be a JSON list");
    std::vector<ManifestEntry> entries;
    for (const auto& item : doc) {
      ManifestEntry e;
      e.id = item.at("id").get<std::string>();
      e.path = item.at("path").get<std::string>();
      e.label = item.at("label").get<int>();
      if (e.label < 0) throw DataError("negative label for video " + e.id);
      entries.push_back(std::move(e));
    }
    return entries;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path + ": " + e.what());
  }
}

void write_manifest(const std::string& path,
                    const std::vector<ManifestEntry>& entries) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& e : entries) {
    doc.push_back({{"id", e.id}, {"path", e.path}, {"label", e.label}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  out << doc.dump(2) << "\n";
}

template <class T>
std::vector<VideoRecord<T>> load_manifest_videos(const std::string& path) {
  const fs::path base = fs::path(path).parent_path();
  std::vector<VideoRecord<T>> videos;
  for (const auto& entry : read_manifest(path)) {
    fs::path vp(entry.path);
    if (vp.is_relative()) vp = base / vp;
    VideoRecord<T> rec;
    rec.frames = load_frames<T>(vp.string());
    rec.label = entry.label;
    rec.id = entry.id;
    videos.push_back(std::move(rec));
  }
  return videos;
}

template <class T>
void save_video_frames(const Tensor<T>& frames, const std::string& dir) {
  if (frames.rank() != 4) {
    throw ShapeError("frame stack must be rank-4 (L x H x W x C)");
  }
  fs::create_directories(dir);
  const std::size_t l = frames.dim(0), h = frames.dim(1), w = frames.dim(2),
                    c = frames.dim(3);
  const std::size_t plane = h * w * c;
  Image img;
  img.h = h;
  img.w = w;
  img.c = c;
  img.data.resize(plane);
  for (std::size_t f = 0; f < l; ++f) {
    const T* src = frames.data() + f * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      img.data[i] = to_byte(static_cast<double>(src[i]));
    }
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05zu.png", f);
    write_png((fs::path(dir) / name).string(), img);
  }
}

#define TSQ_DATA_INSTANTIATE(T)                                              \
  template std::vector<VideoRecord<T>> generate(const SyntheticSpec&,        \
                                                std::size_t);                \
  template ClipTensor<T> sample_clip_random(const VideoRecord<T>&,           \
                                            std::size_t, std::mt19937_64&);  \
  template ClipTensor<T> sample_clip_uniform(const VideoRecord<T>&,          \
                                             std::size_t, std::size_t,       \
                                             std::size_t);                   \
  template ClipTensor<T> load_frames(const std::string&);                    \
  template void save_squeezed(const SqueezedClip<T>&, const std::string&);   \
  template std::vector<VideoRecord<T>> load_manifest_videos(                 \
      const std::string&);                                                   \
  template void save_video_frames(const Tensor<T>&, const std::string&)

TSQ_DATA_INSTANTIATE(float);
TSQ_DATA_INSTANTIATE(double);

}  // namespace tsq

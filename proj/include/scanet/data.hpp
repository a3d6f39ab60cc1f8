#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "scanet/labels.hpp"
#include "scanet/tensor.hpp"

namespace scanet {

namespace fs = std::filesystem;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- raster IO ----

/// 8-bit interleaved raster, 1 (gray) or 3 (RGB) or 4 (RGBA) channels.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(std::size_t(w) * h * c, fill) {}
  std::uint8_t& at(int y, int x, int c = 0) { return pixels[(std::size_t(y) * width + x) * channels + c]; }
  std::uint8_t at(int y, int x, int c = 0) const { return pixels[(std::size_t(y) * width + x) * channels + c]; }
};

namespace detail {
inline png_uint_32 png_format_for(int channels) {
  switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 3: return PNG_FORMAT_RGB;
    case 4: return PNG_FORMAT_RGBA;
    default: throw DataError("unsupported channel count " + std::to_string(channels));
  }
}
}  // namespace detail

/// Decodes a PNG. `channels` 3 converts to RGB; 1 requires a gray file, or a
/// colour file whose three channels agree everywhere (no colour conversion of
/// label values).
inline Raster read_png(const fs::path& path, int channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw DataError("cannot decode " + path.string() + ": " + img.message);
  const bool colour = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  const int read_channels = channels == 1 && colour ? 3 : channels;
  img.format = detail::png_format_for(read_channels);
  Raster r(int(img.width), int(img.height), read_channels);
  if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode " + path.string() + ": " + img.message);
  }
  if (read_channels == channels) return r;
  Raster gray(r.width, r.height, 1);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      const auto v = r.at(y, x, 0);
      if (r.at(y, x, 1) != v || r.at(y, x, 2) != v)
        throw DataError(path.string() + ": label raster has distinct colour channels at (" + std::to_string(y) + ", " +
                        std::to_string(x) + ")");
      gray.at(y, x) = v;
    }
  return gray;
}

inline void write_png(const fs::path& path, const Raster& r) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(r.width);
  img.height = png_uint_32(r.height);
  img.format = detail::png_format_for(r.channels);
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, r.pixels.data(), 0, nullptr))
    throw DataError("cannot write " + path.string() + ": " + img.message);
}

// ---- samples ----

/// Planar float image [c, h, w] with values in [0, 1].
struct Image {
  int c = 0, h = 0, w = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c_, int h_, int w_, float fill = 0.f) : c(c_), h(h_), w(w_), data(std::size_t(c_) * h_ * w_, fill) {}
  float& at(int ch, int y, int x) { return data[(std::size_t(ch) * h + y) * w + x]; }
  float at(int ch, int y, int x) const { return data[(std::size_t(ch) * h + y) * w + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

inline Image image_from_raster(const Raster& r) {
  Image img(r.channels, r.height, r.width);
  for (int ch = 0; ch < r.channels; ++ch)
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x) img.at(ch, y, x) = float(r.at(y, x, ch)) / 255.f;
  return img;
}

inline Raster raster_from_image(const Image& img) {
  Raster r(img.w, img.h, img.c);
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        r.at(y, x, ch) = std::uint8_t(std::lround(std::clamp(img.at(ch, y, x), 0.f, 1.f) * 255.f));
  return r;
}

struct BitemporalSample {
  Image image_a;
  Image image_b;
  LabelMap mask;  // n = 1
  std::string id;

  int height() const { return mask.h; }
  int width() const { return mask.w; }

  /// Throws when images and mask are not congruent or labels leave [0, K).
  void validate(int num_classes) const {
    if (mask.n != 1) throw DataError(id + ": mask must hold a single image");
    for (const Image* img : {&image_a, &image_b})
      if (img->h != mask.h || img->w != mask.w || img->c != 3)
        throw DataError(id + ": images and mask are not spatially congruent");
    check_labels(mask, num_classes, id.c_str());
  }
};

/// Per-channel standardisation applied when batching; identity by default.
struct Normalization {
  std::array<float, 3> mean{0.f, 0.f, 0.f};
  std::array<float, 3> std{1.f, 1.f, 1.f};
};

/// Stacks images into an [n, c, h, w] tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<const Image*>& images, const Normalization& norm = {}) {
  if (images.empty()) throw DataError("stack_images: empty batch");
  const Image& first = *images.front();
  Tensor<T> out({int(images.size()), first.c, first.h, first.w});
  std::size_t k = 0;
  for (const Image* img : images) {
    if (img->c != first.c || img->h != first.h || img->w != first.w)
      throw ShapeError("stack_images: images in a batch differ in shape");
    for (int ch = 0; ch < img->c; ++ch) {
      const float m = ch < 3 ? norm.mean[ch] : 0.f, s = ch < 3 ? norm.std[ch] : 1.f;
      for (std::size_t i = 0; i < std::size_t(img->h) * img->w; ++i)
        out.values()[k++] = T((img->data[std::size_t(ch) * img->h * img->w + i] - m) / s);
    }
  }
  return out;
}

inline LabelMap stack_masks(const std::vector<const LabelMap*>& masks) {
  if (masks.empty()) throw DataError("stack_masks: empty batch");
  LabelMap out(int(masks.size()), masks.front()->h, masks.front()->w);
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b]->h != out.h || masks[b]->w != out.w) throw ShapeError("stack_masks: masks in a batch differ in shape");
    std::copy(masks[b]->labels.begin(), masks[b]->labels.end(), out.labels.begin() + std::ptrdiff_t(b * out.plane()));
  }
  return out;
}

// ---- dataset layout ----

/// Raw label pixel value -> class index.
using RemapTable = std::map<int, int>;

/// Gray levels the synthetic generator writes, and the default remap.
inline RemapTable default_remap() { return {{0, 0}, {128, 1}, {255, 2}}; }

/// Parses "0:0,128:1,255:2".
inline RemapTable parse_remap(const std::string& text) {
  RemapTable out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(pos, end - pos);
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos) throw DataError("remap entry '" + item + "' is not raw:class");
    try {
      out[std::stoi(item.substr(0, colon))] = std::stoi(item.substr(colon + 1));
    } catch (const std::logic_error&) {
      throw DataError("remap entry '" + item + "' is not raw:class");
    }
    pos = end + 1;
  }
  return out;
}

inline std::string format_remap(const RemapTable& r) {
  std::string s;
  for (const auto& [raw, cls] : r) s += (s.empty() ? "" : ",") + std::to_string(raw) + ":" + std::to_string(cls);
  return s;
}

struct DatasetManifest {
  fs::path root;
  std::string split;
  std::vector<std::string> ids;
  RemapTable remap;
  std::vector<std::string> warnings;

  fs::path dir(const char* kind) const { return root / split / kind; }
};

namespace detail {
inline std::set<std::string> png_stems(const fs::path& dir) {
  std::set<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.insert(e.path().stem().string());
  return out;
}
}  // namespace detail

/// Lists {root}/{split}/{A,B,label}/*.png and keeps the names present in all
/// three; every orphan becomes a warning.
inline DatasetManifest scan_dataset(const fs::path& root, const std::string& split, RemapTable remap = default_remap()) {
  DatasetManifest m{root, split, {}, std::move(remap), {}};
  std::set<int> targets;
  for (const auto& [raw, cls] : m.remap)
    if (!targets.insert(cls).second) m.warnings.push_back("remap sends several raw values to class " + std::to_string(cls));
  const char* kinds[3] = {"A", "B", "label"};
  std::set<std::string> names[3];
  for (int k = 0; k < 3; ++k) {
    const fs::path d = m.dir(kinds[k]);
    if (!fs::is_directory(d)) throw DataError("missing directory " + d.string());
    names[k] = detail::png_stems(d);
  }
  for (const auto& n : names[0])
    if (names[1].count(n) && names[2].count(n)) m.ids.push_back(n);
  for (int k = 0; k < 3; ++k)
    for (const auto& n : names[k])
      if (!(names[0].count(n) && names[1].count(n) && names[2].count(n)))
        m.warnings.push_back("orphan " + (m.dir(kinds[k]) / (n + ".png")).string() + " has no match in every folder");
  if (m.ids.empty()) throw DataError("no matched samples under " + (root / split).string());
  return m;
}

inline BitemporalSample load_sample(const DatasetManifest& m, const std::string& id) {
  if (std::find(m.ids.begin(), m.ids.end(), id) == m.ids.end())
    throw DataError("sample '" + id + "' is not in the manifest");
  BitemporalSample s;
  s.id = id;
  s.image_a = image_from_raster(read_png(m.dir("A") / (id + ".png"), 3));
  s.image_b = image_from_raster(read_png(m.dir("B") / (id + ".png"), 3));
  const fs::path label_path = m.dir("label") / (id + ".png");
  const Raster lab = read_png(label_path, 1);
  s.mask = LabelMap(1, lab.height, lab.width);
  for (std::size_t i = 0; i < lab.pixels.size(); ++i) {
    const auto it = m.remap.find(lab.pixels[i]);
    if (it == m.remap.end())
      throw DataError("raw label value " + std::to_string(int(lab.pixels[i])) + " in " + label_path.string() +
                      " has no remap entry");
    s.mask.labels[i] = it->second;
  }
  if (s.image_a.h != s.mask.h || s.image_a.w != s.mask.w || s.image_b.h != s.mask.h || s.image_b.w != s.mask.w)
    throw DataError(id + ": A, B and label rasters differ in size");
  return s;
}

inline std::vector<BitemporalSample> load_all(const DatasetManifest& m, int num_classes) {
  std::vector<BitemporalSample> out;
  for (const auto& id : m.ids) {
    out.push_back(load_sample(m, id));
    out.back().validate(num_classes);
  }
  return out;
}

inline void save_sample(const fs::path& root, const std::string& split, const BitemporalSample& s,
                        const RemapTable& remap = default_remap()) {
  std::map<int, int> inverse;
  for (const auto& [raw, cls] : remap) inverse.emplace(cls, raw);
  for (const char* k : {"A", "B", "label"}) fs::create_directories(root / split / k);
  write_png(root / split / "A" / (s.id + ".png"), raster_from_image(s.image_a));
  write_png(root / split / "B" / (s.id + ".png"), raster_from_image(s.image_b));
  Raster lab(s.mask.w, s.mask.h, 1);
  for (std::size_t i = 0; i < s.mask.labels.size(); ++i) {
    const auto it = inverse.find(s.mask.labels[i]);
    if (it == inverse.end()) throw DataError("class " + std::to_string(s.mask.labels[i]) + " has no raw label value");
    lab.pixels[i] = std::uint8_t(it->second);
  }
  write_png(root / split / "label" / (s.id + ".png"), lab);
}

// ---- synthetic generator ----

struct SyntheticParams {
  int size = 64;
  int count = 16;
  std::string split = "train";
  int val_count = 0;               // extra samples written to the "val" split
  int min_buildings = 2;
  int max_buildings = 4;
  double small_fraction = 0.5;     // share of buildings drawn below 400 px
  double rotated_fraction = 0.3;
  int min_roads = 0;
  int max_roads = 2;
  int min_road_width = 2;
  int max_road_width = 6;
  double jitter = 0.1;             // brightness/contrast amplitude per image
};

enum class ShapeKind { building, road };

/// One drawn change: an oriented rectangle (roads are long thin ones).
struct ChangeShape {
  ShapeKind kind;
  double cy, cx;           // centre
  double half_h, half_w;   // half extents along the rotated axes
  double angle;            // radians
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = std::cos(angle) * dx + std::sin(angle) * dy;
    const double v = -std::sin(angle) * dx + std::cos(angle) * dy;
    return std::abs(u) <= half_w && std::abs(v) <= half_h;
  }
};

struct SyntheticSample {
  BitemporalSample sample;
  std::vector<ChangeShape> shapes;
};

namespace detail {

/// Smooth textured background, identical for both dates before jitter.
inline Image render_background(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(3, size, size);
  double base[3];
  for (double& b : base) b = 0.35 + 0.2 * u(rng);
  struct Wave {
    double fy, fx, phase, amp[3];
  };
  std::vector<Wave> waves(4);
  for (auto& wv : waves) {
    wv.fy = (u(rng) - 0.5) * 0.5;
    wv.fx = (u(rng) - 0.5) * 0.5;
    wv.phase = u(rng) * 6.283185307179586;
    for (double& a : wv.amp) a = 0.04 * u(rng);
  }
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + noise(rng);
        for (const auto& wv : waves) v += wv.amp[c] * std::sin(wv.fy * y + wv.fx * x + wv.phase);
        img.at(c, y, x) = float(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

inline void jitter_image(Image& img, double amplitude, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  const double brightness = u(rng), contrast = 1.0 + u(rng);
  for (float& v : img.data) v = float(std::clamp((v - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0));
}

}  // namespace detail

/// One synthetic pair: B = A's background plus new buildings and roads;
/// the mask labels exactly the drawn shapes (roads 1, buildings 2).
inline SyntheticSample synthesize_sample(const SyntheticParams& p, std::mt19937_64& rng, const std::string& id) {
  if (p.size <= 0 || p.size % 32 != 0) throw DataError("size must be divisible by 32");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const int n = p.size;
  SyntheticSample out;
  out.sample.id = id;
  const Image background = detail::render_background(n, rng);
  Image b = background;
  LabelMap mask(1, n, n, 0);

  auto paint = [&](const ChangeShape& s, const float colour[3], int cls, std::vector<char>* footprint) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (s.contains(y + 0.5, x + 0.5)) {
          for (int c = 0; c < 3; ++c) b.at(c, y, x) = colour[c];
          mask.at(y, x) = cls;
          if (footprint) (*footprint)[std::size_t(y) * n + x] = 1;
        }
  };

  // Roads: long strips across the tile, dark asphalt.
  const int roads = uniform_int(p.min_roads, p.max_roads);
  for (int r = 0; r < roads; ++r) {
    const int width = uniform_int(p.min_road_width, p.max_road_width);
    const double angle = u(rng) < 0.5 ? 0.0 : 1.5707963267948966;
    ChangeShape s{ShapeKind::road, 4 + u(rng) * (n - 8), 4 + u(rng) * (n - 8), width / 2.0, n * 0.75, angle};
    const float grey = float(0.12 + 0.08 * u(rng));
    const float colour[3] = {grey, grey, float(grey + 0.03)};
    paint(s, colour, 1, nullptr);
    out.shapes.push_back(s);
  }

  // Buildings: non-touching rectangles, some rotated, bright roofs.
  std::vector<char> occupied(std::size_t(n) * n, 0);
  const int buildings = uniform_int(p.min_buildings, p.max_buildings);
  for (int k = 0; k < buildings; ++k) {
    const bool small = u(rng) < p.small_fraction;
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double side_h = small ? 5 + u(rng) * 9 : 24 + u(rng) * 10;
      const double side_w = small ? 5 + u(rng) * 9 : 24 + u(rng) * 10;
      const double angle = u(rng) < p.rotated_fraction ? (u(rng) - 0.5) * 1.2 : 0.0;
      const double reach = 0.5 * std::hypot(side_h, side_w) + 1;
      if (2 * reach >= n) continue;
      ChangeShape s{ShapeKind::building, reach + u(rng) * (n - 2 * reach), reach + u(rng) * (n - 2 * reach),
                    side_h / 2, side_w / 2, angle};
      // Keep a one-pixel gap to earlier buildings so components stay separate.
      bool clash = false;
      for (int y = 0; y < n && !clash; ++y)
        for (int x = 0; x < n && !clash; ++x)
          if (s.contains(y + 0.5, x + 0.5))
            for (int dy = -2; dy <= 2 && !clash; ++dy)
              for (int dx = -2; dx <= 2 && !clash; ++dx) {
                const int yy = y + dy, xx = x + dx;
                clash = yy >= 0 && yy < n && xx >= 0 && xx < n && occupied[std::size_t(yy) * n + xx];
              }
      if (clash) continue;
      const float colour[3] = {float(0.75 + 0.2 * u(rng)), float(0.45 + 0.2 * u(rng)), float(0.35 + 0.15 * u(rng))};
      paint(s, colour, 2, &occupied);
      out.shapes.push_back(s);
      break;
    }
  }

  Image a = background;
  detail::jitter_image(a, p.jitter, rng);
  detail::jitter_image(b, p.jitter, rng);
  out.sample.image_a = std::move(a);
  out.sample.image_b = std::move(b);
  out.sample.mask = std::move(mask);
  return out;
}

inline std::string sample_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", i);
  return buf;
}

/// Writes {root}/{split}/{A,B,label}/NNNN.png (plus a val split when
/// requested) and a synthetic.json sidecar with the seed and parameters.
inline void generate_synthetic(const fs::path& root, std::uint64_t seed, const SyntheticParams& p) {
  if (p.size <= 0 || p.size % 32 != 0) throw DataError("size must be divisible by 32");
  if (p.count < 1) throw DataError("count must be at least 1");
  std::mt19937_64 rng(seed);
  for (int i = 0; i < p.count; ++i) save_sample(root, p.split, synthesize_sample(p, rng, sample_id(i)).sample);
  for (int i = 0; i < p.val_count; ++i) save_sample(root, "val", synthesize_sample(p, rng, sample_id(i)).sample);
  nlohmann::ordered_json side;
  side["schema_version"] = 1;
  side["seed"] = seed;
  side["size"] = p.size;
  side["count"] = p.count;
  side["split"] = p.split;
  side["val_count"] = p.val_count;
  side["buildings"] = {p.min_buildings, p.max_buildings};
  side["small_fraction"] = p.small_fraction;
  side["rotated_fraction"] = p.rotated_fraction;
  side["roads"] = {p.min_roads, p.max_roads};
  side["road_width"] = {p.min_road_width, p.max_road_width};
  side["jitter"] = p.jitter;
  side["remap"] = format_remap(default_remap());
  std::ofstream(root / "synthetic.json") << side.dump(2) << "\n";
}

}  // namespace scanet

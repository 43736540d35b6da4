#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cbvila/image.hpp"
#include "cbvila/rng.hpp"
#include "cbvila/tokenizer.hpp"

namespace cbvila {

// Scene vocabulary of the synthetic generator.
inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v = {"circle", "square", "triangle", "cross"};
  return v;
}

inline const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v = {"red",    "green",  "blue", "yellow",
                                             "orange", "purple", "cyan", "white"};
  return v;
}

inline const std::vector<std::array<double, 3>>& color_values() {
  static const std::vector<std::array<double, 3>> v = {
      {1.0, 0.15, 0.15}, {0.1, 0.8, 0.2},  {0.15, 0.3, 1.0}, {1.0, 0.9, 0.1},
      {1.0, 0.55, 0.1},  {0.6, 0.2, 0.85}, {0.1, 0.85, 0.9}, {1.0, 1.0, 1.0}};
  return v;
}

inline const std::vector<std::string>& size_names() {
  static const std::vector<std::string> v = {"small", "large"};
  return v;
}

inline const std::vector<std::string>& relation_names() {
  static const std::vector<std::string> v = {"above", "below", "left of", "right of"};
  return v;
}

inline Vocab synthetic_vocab() {
  std::vector<std::string> words = {"a"};
  for (const auto& w : size_names()) words.push_back(w);
  for (const auto& w : color_names()) words.push_back(w);
  for (const auto& w : shape_names()) words.push_back(w);
  words.insert(words.end(), {"above", "below", "left", "right", "of"});
  return Vocab::from_words(words);
}

struct SceneShape {
  int shape = 0;  // index into shape_names
  int color = 0;  // index into color_names
  int size = 0;   // 0 small, 1 large
  int cx = 0, cy = 0;
};

struct Scene {
  std::vector<SceneShape> shapes;
  int relation = -1;  // index into relation_names; -1 for single-shape scenes
};

inline std::string caption_for(const Scene& scene) {
  auto part = [](const SceneShape& s) {
    return "a " + size_names()[static_cast<std::size_t>(s.size)] + " " +
           color_names()[static_cast<std::size_t>(s.color)] + " " +
           shape_names()[static_cast<std::size_t>(s.shape)];
  };
  if (scene.shapes.size() == 1) return part(scene.shapes[0]);
  return part(scene.shapes[0]) + " " + relation_names()[static_cast<std::size_t>(scene.relation)] +
         " " + part(scene.shapes[1]);
}

namespace detail {

inline int shape_radius(int size) { return size == 0 ? 3 : 6; }

template <typename S>
void paint_shape(Image<S>& img, const SceneShape& s) {
  const auto& rgb = color_values()[static_cast<std::size_t>(s.color)];
  const int r = shape_radius(s.size);
  for (int y = s.cy - r; y <= s.cy + r; ++y) {
    for (int x = s.cx - r; x <= s.cx + r; ++x) {
      if (y < 0 || y >= img.height || x < 0 || x >= img.width) continue;
      const int dx = x - s.cx;
      const int dy = y - s.cy;
      bool inside = false;
      switch (s.shape) {
        case 0:  // circle
          inside = dx * dx + dy * dy <= r * r;
          break;
        case 1:  // square
          inside = std::abs(dx) <= r && std::abs(dy) <= r;
          break;
        case 2: {  // upward triangle
          const double half = static_cast<double>(r) * (dy + r) / (2.0 * r);
          inside = dy >= -r && dy <= r && std::abs(dx) <= half;
          break;
        }
        case 3: {  // cross
          const int arm = std::max(1, r / 2);
          inside = (std::abs(dx) <= arm && std::abs(dy) <= r) ||
                   (std::abs(dy) <= arm && std::abs(dx) <= r);
          break;
        }
        default:
          break;
      }
      if (inside)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<S>(rgb[static_cast<std::size_t>(c)]);
    }
  }
}

}  // namespace detail

template <typename S>
struct Sample {
  Image<S> image;
  std::string caption;
  Scene scene;
};

/// One deterministic synthetic pair: 1-2 colored shapes on a gray background
/// with a grammar caption generated from the same scene record. Pixels are
/// quantized onto the 8-bit grid, so the rendered image round-trips PPM
/// files exactly.
template <typename S>
Sample<S> generate_sample(std::uint64_t item_seed, int image_size = 32) {
  Rng rng(item_seed);
  Sample<S> out;
  out.image = Image<S>::zeros(image_size, image_size, 3);
  for (auto& v : out.image.data) v = S(0.5);

  const bool two = rng.uniform() < 0.6;
  auto random_shape = [&rng]() {
    SceneShape s;
    s.shape = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(shape_names().size())));
    s.color = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(color_names().size())));
    s.size = static_cast<int>(rng.uniform_int(2));
    return s;
  };
  const int mid = image_size / 2;
  auto jitter = [&rng](int amount) {
    return static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(2 * amount + 1))) - amount;
  };

  if (!two) {
    SceneShape s = random_shape();
    s.cx = mid + jitter(4);
    s.cy = mid + jitter(4);
    out.scene.shapes.push_back(s);
  } else {
    SceneShape first = random_shape();
    SceneShape second = random_shape();
    const int rel = static_cast<int>(rng.uniform_int(4));
    out.scene.relation = rel;
    const int near = image_size / 4;        // 8 for 32x32
    const int far = image_size - near;      // 24
    switch (rel) {
      case 0:  // first above second
        first.cy = near + jitter(1);
        second.cy = far + jitter(1);
        first.cx = mid + jitter(4);
        second.cx = mid + jitter(4);
        break;
      case 1:  // first below second
        first.cy = far + jitter(1);
        second.cy = near + jitter(1);
        first.cx = mid + jitter(4);
        second.cx = mid + jitter(4);
        break;
      case 2:  // first left of second
        first.cx = near + jitter(1);
        second.cx = far + jitter(1);
        first.cy = mid + jitter(4);
        second.cy = mid + jitter(4);
        break;
      default:  // first right of second
        first.cx = far + jitter(1);
        second.cx = near + jitter(1);
        first.cy = mid + jitter(4);
        second.cy = mid + jitter(4);
        break;
    }
    out.scene.shapes.push_back(first);
    out.scene.shapes.push_back(second);
  }

  for (const auto& s : out.scene.shapes) detail::paint_shape(out.image, s);
  out.image.quantize_to_8bit();
  out.caption = caption_for(out.scene);
  return out;
}

template <typename S>
struct Dataset {
  std::vector<Image<S>> images;
  std::vector<std::string> captions;
  std::vector<Scene> scenes;  // available for generated datasets
  Vocab vocab;

  int size() const { return static_cast<int>(images.size()); }
};

/// Deterministic paired dataset. Item i draws from the stream
/// (seed, data_item, index_offset + i), so disjoint offset ranges give
/// disjoint splits under one seed.
template <typename S>
Dataset<S> generate_synthetic_dataset(int n_pairs, std::uint64_t seed, int image_size = 32,
                                      int index_offset = 0) {
  require_config(n_pairs >= 2, "generate_synthetic_dataset: need at least 2 pairs");
  Dataset<S> ds;
  ds.vocab = synthetic_vocab();
  ds.images.reserve(static_cast<std::size_t>(n_pairs));
  ds.captions.reserve(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    auto sample = generate_sample<S>(
        derive_seed(seed, RngStream::data_item, {static_cast<std::uint64_t>(index_offset + i)}),
        image_size);
    ds.images.push_back(std::move(sample.image));
    ds.captions.push_back(std::move(sample.caption));
    ds.scenes.push_back(sample.scene);
  }
  return ds;
}

/// On-disk layout: images/img_%05d.ppm + captions.jsonl + vocab.txt.
template <typename S>
void save_dataset(const std::string& dir, const Dataset<S>& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream cap(fs::path(dir) / "captions.jsonl");
  if (!cap) throw InputError("save_dataset: cannot write captions in " + dir);
  for (int i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.ppm", i);
    const std::string rel = std::string("images/") + name;
    write_ppm((fs::path(dir) / rel).string(), ds.images[static_cast<std::size_t>(i)]);
    nlohmann::json rec;
    rec["id"] = i;
    rec["image"] = rel;
    rec["caption"] = ds.captions[static_cast<std::size_t>(i)];
    cap << rec.dump() << "\n";
  }
  ds.vocab.save((fs::path(dir) / "vocab.txt").string());
}

template <typename S>
Dataset<S> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::exists(root / "captions.jsonl"))
    throw InputError("load_dataset: no captions.jsonl under " + dir);
  Dataset<S> ds;
  ds.vocab = Vocab::load((root / "vocab.txt").string());
  std::ifstream cap(root / "captions.jsonl");
  std::string line;
  while (std::getline(cap, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    ds.images.push_back(read_ppm<S>((root / rec.at("image").get<std::string>()).string()));
    ds.captions.push_back(rec.at("caption").get<std::string>());
  }
  require_input(ds.size() >= 2, "load_dataset: dataset has fewer than 2 pairs");
  return ds;
}

}  // namespace cbvila

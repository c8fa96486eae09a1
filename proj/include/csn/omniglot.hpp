#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <png.h>

#include "csn/episodes.hpp"
#include "csn/error.hpp"

// Omniglot ingestion: alphabet/character/sample PNG tree -> Dataset.
// Linking against libpng is required by any target including this header.

namespace csn {

struct OmniglotOptions {
  std::int64_t image_size = 28;     // bilinear resize target
  std::int64_t samples_per_class = 20;
  std::int64_t train_base = 1200;   // leading base characters (sorted order)
  std::int64_t val_carveout = 100;  // validation classes carved from train_base
  std::uint64_t val_seed = 7;
};

namespace detail_omniglot {

inline std::vector<double> read_gray_png(const std::string& path, std::int64_t& width,
                                         std::int64_t& height) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    png_image_free(&image);
    throw IngestError("unreadable PNG: " + path);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IngestError("corrupt PNG: " + path);
  }
  width = image.width;
  height = image.height;
  std::vector<double> gray(buffer.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) gray[i] = buffer[i] / 255.0;
  return gray;
}

inline std::vector<float> resize_bilinear(const std::vector<double>& src, std::int64_t h,
                                          std::int64_t w, std::int64_t size) {
  std::vector<float> dst(static_cast<std::size_t>(size * size));
  const double sy = static_cast<double>(h) / size;
  const double sx = static_cast<double>(w) / size;
  for (std::int64_t y = 0; y < size; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const std::int64_t y0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(fy)), 0, h - 1);
    const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, h - 1);
    const double wy = std::clamp(fy - y0, 0.0, 1.0);
    for (std::int64_t x = 0; x < size; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const std::int64_t x0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(fx)), 0, w - 1);
      const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, w - 1);
      const double wx = std::clamp(fx - x0, 0.0, 1.0);
      const double top = src[y0 * w + x0] * (1 - wx) + src[y0 * w + x1] * wx;
      const double bot = src[y1 * w + x0] * (1 - wx) + src[y1 * w + x1] * wx;
      dst[static_cast<std::size_t>(y * size + x)] = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  }
  return dst;
}

// Exact 90-degree clockwise rotation of a square image.
inline std::vector<float> rotate90(const std::vector<float>& img, std::int64_t size) {
  std::vector<float> out(img.size());
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x)
      out[static_cast<std::size_t>(y * size + x)] =
          img[static_cast<std::size_t>((size - 1 - x) * size + y)];
  return out;
}

}  // namespace detail_omniglot

// Loads the alphabet/character/sample tree under `root`. Every character is
// one class with exactly `samples_per_class` images, resized to
// image_size x image_size grayscale in [0,1]. Rotation augmentation turns
// each class into four (0/90/180/270 degrees). Base characters are ordered
// by path; the first `train_base` go to train with a seeded validation
// carve-out, the rest to test. Augmented classes inherit their base split.
inline Dataset load_omniglot(const std::string& root, bool augment_rotations = true,
                             const OmniglotOptions& options = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IngestError("omniglot root is not a directory: " + root);
  if (options.train_base < 1 || options.val_carveout < 0 ||
      options.val_carveout >= options.train_base) {
    throw ConfigError("omniglot: need 0 <= val carve-out < train base count");
  }

  std::vector<fs::path> character_dirs;
  std::vector<fs::path> alphabets;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) alphabets.push_back(entry.path());
  }
  std::sort(alphabets.begin(), alphabets.end());
  for (const auto& alphabet : alphabets) {
    std::vector<fs::path> chars;
    for (const auto& entry : fs::directory_iterator(alphabet)) {
      if (entry.is_directory()) chars.push_back(entry.path());
    }
    std::sort(chars.begin(), chars.end());
    character_dirs.insert(character_dirs.end(), chars.begin(), chars.end());
  }
  if (character_dirs.empty()) throw IngestError("no character directories under " + root);

  const std::int64_t base_count = static_cast<std::int64_t>(character_dirs.size());
  if (base_count < options.train_base) {
    throw IntegrityError("omniglot: found " + std::to_string(base_count) +
                         " characters, need at least " + std::to_string(options.train_base) +
                         " for the train/test split");
  }

  // Seeded validation carve-out from the leading train_base characters.
  std::vector<std::int64_t> split_of(static_cast<std::size_t>(base_count));
  for (std::int64_t i = 0; i < base_count; ++i) {
    split_of[static_cast<std::size_t>(i)] = i < options.train_base ? 0 : 2;
  }
  {
    std::mt19937_64 rng(options.val_seed);
    const auto picks = detail_episodes::draw_without_replacement(options.train_base,
                                                                 options.val_carveout, rng);
    for (auto p : picks) split_of[static_cast<std::size_t>(p)] = 1;
  }

  Dataset ds;
  ds.sample_shape = {1, options.image_size, options.image_size};
  std::vector<std::string> bad_paths;
  std::int64_t next_id = 0;

  for (std::int64_t ci = 0; ci < base_count; ++ci) {
    const fs::path& dir = character_dirs[static_cast<std::size_t>(ci)];
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    std::vector<std::vector<float>> images;
    for (const auto& file : files) {
      try {
        std::int64_t w = 0, h = 0;
        const auto gray = detail_omniglot::read_gray_png(file.string(), w, h);
        images.push_back(detail_omniglot::resize_bilinear(gray, h, w, options.image_size));
      } catch (const IngestError&) {
        bad_paths.push_back(file.string());
      }
    }
    if (!bad_paths.empty()) continue;  // keep scanning to report all offenders

    if (static_cast<std::int64_t>(images.size()) != options.samples_per_class) {
      throw IntegrityError("character " + dir.string() + " has " +
                           std::to_string(images.size()) + " samples, expected " +
                           std::to_string(options.samples_per_class));
    }

    const Split split = static_cast<Split>(split_of[static_cast<std::size_t>(ci)]);
    const int rotations = augment_rotations ? 4 : 1;
    std::vector<std::vector<float>> rotated = images;
    for (int r = 0; r < rotations; ++r) {
      if (r > 0) {
        for (auto& img : rotated) img = detail_omniglot::rotate90(img, options.image_size);
      }
      ClassRecord rec;
      rec.global_id = next_id++;
      rec.split = split;
      rec.samples = rotated;
      ds.classes.push_back(std::move(rec));
    }
  }

  if (!bad_paths.empty()) {
    std::string msg = "omniglot: " + std::to_string(bad_paths.size()) + " unreadable file(s):";
    const std::size_t shown = std::min<std::size_t>(bad_paths.size(), 8);
    for (std::size_t i = 0; i < shown; ++i) msg += " " + bad_paths[i];
    if (bad_paths.size() > shown) msg += " ...";
    throw IngestError(msg);
  }
  return ds;
}

}  // namespace csn

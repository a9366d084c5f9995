// Dataset protocol: patch tiling, JSONL manifests, stratified splitting and
// image/mask pair loading.
#pragma once

#include "solarformer/image.hpp"
#include "solarformer/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sf {

enum class Split { train, val, test, unassigned };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "unassigned";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw FormatError("unknown split name: " + s);
}

struct ManifestEntry {
  std::string image;  // relative to the manifest root
  std::string mask;
  bool has_pv = false;
  Split split = Split::unassigned;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory manifest paths are relative to
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> in_split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(&e);
    return out;
  }
};

struct SplitSpec {
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;
  bool stratify_positive = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(train_frac > 0 && train_frac < 1) || !(val_frac > 0 && val_frac < 1) ||
        !(test_frac > 0 && test_frac < 1))
      throw FormatError("split fractions must lie in (0,1)");
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
      throw FormatError("split fractions must sum to 1");
  }
};

// ---- manifest I/O (JSON Lines) ----------------------------------------------

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& e : m.entries) {
    nlohmann::json j{{"image", e.image}, {"mask", e.mask}, {"has_pv", e.has_pv},
                     {"split", split_name(e.split)}};
    out << j.dump() << "\n";
  }
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
    ManifestEntry e;
    e.image = j.at("image").get<std::string>();
    e.mask = j.at("mask").get<std::string>();
    e.has_pv = j.at("has_pv").get<bool>();
    e.split = split_from_name(j.value("split", "unassigned"));
    m.entries.push_back(std::move(e));
  }
  return m;
}

// ---- tiling ------------------------------------------------------------------

// Cuts co-located (patch_size x patch_size) windows at the given stride, in
// row-major order. Border remainders smaller than a full patch are dropped.
inline std::vector<std::pair<ImagePatch, MaskPatch>> tile_raster(const ImagePatch& raster,
                                                                 const MaskPatch& mask,
                                                                 int patch_size, int stride) {
  if (raster.width != mask.width || raster.height != mask.height)
    throw ShapeError("raster " + std::to_string(raster.width) + "x" +
                     std::to_string(raster.height) + " vs mask " + std::to_string(mask.width) +
                     "x" + std::to_string(mask.height));
  if (patch_size < 1 || stride < 1) throw FormatError("patch_size and stride must be >= 1");
  if (raster.width < patch_size || raster.height < patch_size)
    throw ShapeError("raster smaller than patch size");

  std::vector<std::pair<ImagePatch, MaskPatch>> out;
  for (int oy = 0; oy + patch_size <= raster.height; oy += stride) {
    for (int ox = 0; ox + patch_size <= raster.width; ox += stride) {
      ImagePatch ip;
      ip.width = ip.height = patch_size;
      ip.data.resize(static_cast<std::size_t>(patch_size) * patch_size * 3);
      MaskPatch mp;
      mp.width = mp.height = patch_size;
      mp.data.resize(static_cast<std::size_t>(patch_size) * patch_size);
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) {
          for (int c = 0; c < 3; ++c) ip.at(y, x, c) = raster.at(oy + y, ox + x, c);
          mp.at(y, x) = mask.at(oy + y, ox + x);
        }
      }
      out.emplace_back(std::move(ip), std::move(mp));
    }
  }
  return out;
}

// ---- stratified splitting -----------------------------------------------------

// Largest-remainder apportionment of n into three buckets.
inline std::array<std::int64_t, 3> largest_remainder_counts(std::int64_t n, double f0, double f1,
                                                            double f2) {
  const double fr[3] = {f0, f1, f2};
  std::array<std::int64_t, 3> base{};
  std::array<double, 3> rem{};
  std::int64_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fr[i] * static_cast<double>(n);
    base[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(std::floor(exact + 1e-12));
    rem[static_cast<std::size_t>(i)] = exact - static_cast<double>(base[static_cast<std::size_t>(i)]);
    used += base[static_cast<std::size_t>(i)];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return rem[static_cast<std::size_t>(a)] > rem[static_cast<std::size_t>(b)];
  });
  for (std::int64_t k = 0; k < n - used; ++k)
    ++base[static_cast<std::size_t>(order[static_cast<std::size_t>(k % 3)])];
  return base;
}

// Assigns splits per stratum (has_pv true/false) with largest-remainder
// counts. Membership is a function of (seed, image path) only, so it is
// stable under any reordering of the manifest.
inline void split_dataset(DatasetManifest& manifest, const SplitSpec& spec,
                          std::vector<std::string>* warnings = nullptr) {
  spec.validate();
  if (manifest.entries.empty()) throw FormatError("cannot split an empty manifest");

  std::vector<std::size_t> strata[2];
  for (std::size_t i = 0; i < manifest.entries.size(); ++i)
    strata[spec.stratify_positive && manifest.entries[i].has_pv ? 1 : 0].push_back(i);

  for (auto& stratum : strata) {
    if (stratum.empty()) continue;
    const std::int64_t n = static_cast<std::int64_t>(stratum.size());
    const auto counts = largest_remainder_counts(n, spec.train_frac, spec.val_frac, spec.test_frac);
    if (warnings && n < 3)
      warnings->push_back("stratum with " + std::to_string(n) +
                          " entries cannot populate all three splits");
    // identity-stable deterministic order
    std::stable_sort(stratum.begin(), stratum.end(), [&](std::size_t a, std::size_t b) {
      const auto ha = hash_bytes(spec.seed, manifest.entries[a].image);
      const auto hb = hash_bytes(spec.seed, manifest.entries[b].image);
      if (ha != hb) return ha < hb;
      return manifest.entries[a].image < manifest.entries[b].image;
    });
    std::int64_t k = 0;
    for (std::size_t idx : stratum) {
      Split s = k < counts[0] ? Split::train
                              : (k < counts[0] + counts[1] ? Split::val : Split::test);
      manifest.entries[idx].split = s;
      ++k;
    }
  }
}

// ---- loading -------------------------------------------------------------------

// Loads an image/mask pair: image scaled by 1/255 into [0,1]; 8-bit masks
// thresholded at >127.
inline std::pair<ImagePatch, MaskPatch> load_patch_pair(const std::filesystem::path& image_path,
                                                        const std::filesystem::path& mask_path) {
  Png8 img = read_png8(image_path.string());
  if (img.channels != 3)
    throw FormatError("image " + image_path.string() + " has " + std::to_string(img.channels) +
                      " channels, expected 3");
  Png8 msk = read_png8(mask_path.string());
  if (msk.channels != 1)
    throw FormatError("mask " + mask_path.string() + " has " + std::to_string(msk.channels) +
                      " channels, expected 1");
  if (img.width != msk.width || img.height != msk.height)
    throw ShapeError("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     " vs mask " + std::to_string(msk.width) + "x" + std::to_string(msk.height));

  ImagePatch ip;
  ip.width = img.width;
  ip.height = img.height;
  ip.data.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i)
    ip.data[i] = static_cast<float>(img.data[i]) / 255.0f;

  MaskPatch mp;
  mp.width = msk.width;
  mp.height = msk.height;
  mp.data.resize(msk.data.size());
  for (std::size_t i = 0; i < msk.data.size(); ++i) mp.data[i] = msk.data[i] > 127 ? 1 : 0;
  return {std::move(ip), std::move(mp)};
}

inline std::pair<ImagePatch, MaskPatch> load_entry(const DatasetManifest& m,
                                                   const ManifestEntry& e) {
  return load_patch_pair(m.root / e.image, m.root / e.mask);
}

}  // namespace sf

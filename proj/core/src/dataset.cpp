#include "sparseloc/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace sparseloc {

void write_dataset_manifest(const std::string& path, const std::vector<DatasetItem>& items) {
  std::ostringstream os;
  os << "seed,image_path,mask_path,variant\n";
  for (const DatasetItem& item : items) {
    os << item.seed << "," << item.image_path << "," << item.mask_path << "," << item.variant
       << "\n";
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("write_dataset_manifest: cannot open " + tmp);
    out << os.str();
  }
  std::filesystem::rename(tmp, path);
}

std::vector<DatasetItem> read_dataset_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_dataset_manifest: cannot open " + path);
  const std::string dir = std::filesystem::path(path).parent_path().string();
  std::vector<DatasetItem> items;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::istringstream row(line);
    DatasetItem item;
    std::string seed_text, image, mask;
    if (!std::getline(row, seed_text, ',') || !std::getline(row, image, ',') ||
        !std::getline(row, mask, ',')) {
      throw IoError("read_dataset_manifest: malformed row '" + line + "'");
    }
    std::getline(row, item.variant, ',');
    item.seed = std::strtoull(seed_text.c_str(), nullptr, 10);
    item.image_path = dir.empty() ? image : dir + "/" + image;
    item.mask_path = dir.empty() ? mask : dir + "/" + mask;
    items.push_back(std::move(item));
  }
  return items;
}

SceneSpec scene_for_index(const SynthesisParams& params, std::uint64_t root_seed,
                          std::int64_t global_index) {
  SceneSpec spec;
  spec.seed = root_seed + static_cast<std::uint64_t>(global_index);
  spec.size = params.size;
  spec.family = static_cast<TextureFamily>(global_index % 3);
  spec.splice.shape = (global_index / 3) % 2 == 0 ? RegionShape::Rectangle : RegionShape::Ellipse;
  spec.splice.area_min = params.area_min;
  spec.splice.area_max = params.area_max;

  Rng rng = substream(spec.seed, "synth/params");
  spec.host.noise_sigma = rng.uniform(params.host_sigma_min, params.host_sigma_max);
  spec.host.pattern_amplitude = rng.uniform(params.host_amp_min, params.host_amp_max);
  spec.splice.donor.noise_sigma = spec.host.noise_sigma + params.donor_sigma_gap;
  spec.splice.donor.pattern_amplitude = spec.host.pattern_amplitude + params.donor_amp_gap;
  spec.hard_negative = params.hard_negative;
  return spec;
}

DatasetPaths synthesize_dataset(const std::string& out_dir, const SynthesisParams& params,
                                std::uint64_t seed) {
  DatasetPaths paths;
  const std::array<std::pair<const char*, int>, 3> splits{
      std::pair{"train", params.train_count}, {"val", params.val_count},
      {"test", params.test_count}};

  std::int64_t global = 0;
  for (const auto& [split, count] : splits) {
    const std::string split_dir = out_dir + "/" + split;
    std::filesystem::create_directories(split_dir);
    std::vector<DatasetItem> items;
    for (int i = 0; i < count; ++i, ++global) {
      const SceneSpec spec = scene_for_index(params, seed, global);
      const Sample sample = generate(spec);
      char name[32];
      std::snprintf(name, sizeof(name), "%06d", i);
      const std::string image_file = std::string("img_") + name + ".ppm";
      const std::string mask_file = std::string("mask_") + name + ".pgm";
      write_ppm(split_dir + "/" + image_file, sample.image);
      write_pgm(split_dir + "/" + mask_file, sample.mask, sample.image.height,
                sample.image.width);
      items.push_back({spec.seed, image_file, mask_file,
                       params.hard_negative ? "hard_negative" : "spliced"});
    }
    write_dataset_manifest(split_dir + "/manifest.csv", items);
    const std::string manifest = split_dir + "/manifest.csv";
    if (std::string(split) == "train") {
      paths.train_manifest = manifest;
    } else if (std::string(split) == "val") {
      paths.val_manifest = manifest;
    } else {
      paths.test_manifest = manifest;
    }
  }
  return paths;
}

CompactSample load_compact_sample(const DatasetItem& item) {
  const Image image = read_ppm(item.image_path);
  int mh = 0, mw = 0;
  std::vector<std::uint8_t> mask = read_pgm(item.mask_path, mh, mw);
  if (mh != image.height || mw != image.width) {
    throw IoError("dataset: image/mask extents disagree for " + item.image_path);
  }
  CompactSample sample;
  sample.height = image.height;
  sample.width = image.width;
  sample.rgb.resize(image.rgb.size());
  for (std::size_t i = 0; i < image.rgb.size(); ++i) {
    sample.rgb[i] = static_cast<std::uint8_t>(std::lround(image.rgb[i] * 255.0));
  }
  sample.mask = std::move(mask);
  return sample;
}

Tensor batch_images(std::span<const CompactSample> samples, std::span<const int> indices) {
  if (indices.empty()) throw ShapeError("batch_images: empty batch");
  const int h = samples[indices[0]].height;
  const int w = samples[indices[0]].width;
  std::vector<double> data;
  data.reserve(indices.size() * 3ULL * h * w);
  for (const int idx : indices) {
    const CompactSample& s = samples[idx];
    if (s.height != h || s.width != w) throw ShapeError("batch_images: mixed extents");
    for (const std::uint8_t b : s.rgb) data.push_back(b / 255.0);
  }
  return Tensor::from_data({static_cast<int>(indices.size()), 3, h, w}, std::move(data));
}

Tensor batch_masks(std::span<const CompactSample> samples, std::span<const int> indices) {
  if (indices.empty()) throw ShapeError("batch_masks: empty batch");
  const int h = samples[indices[0]].height;
  const int w = samples[indices[0]].width;
  std::vector<double> data;
  data.reserve(indices.size() * 1ULL * h * w);
  for (const int idx : indices) {
    const CompactSample& s = samples[idx];
    for (const std::uint8_t m : s.mask) data.push_back(m ? 1.0 : 0.0);
  }
  return Tensor::from_data({static_cast<int>(indices.size()), 1, h, w}, std::move(data));
}

}  // namespace sparseloc

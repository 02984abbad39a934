#include "sparseloc/checkpoint.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "sparseloc/tensor_io.hpp"

namespace sparseloc {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_checkpoint(const std::string& dir, const TrainState& state, std::uint64_t config_hash) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "# checkpoint manifest\n";
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016" PRIx64, config_hash);
  manifest << "config_hash " << hex << "\n";
  manifest << "step " << state.step << "\n";
  manifest << "total_steps " << state.total_steps << "\n";
  manifest << "lr_max " << format_double(state.lr_max) << "\n";
  manifest << "lr_min " << format_double(state.lr_min) << "\n";

  for (const auto& [name, tensor] : state.model.named_params()) {
    const std::string file = name + ".sten";
    save_tensor(dir + "/" + file, tensor);
    manifest << "param " << name << " " << file << "\n";

    const AdamMoments& mom = state.moments.at(name);
    const Shape& shape = tensor.shape();
    save_tensor(dir + "/" + name + ".m.sten", Tensor::from_data(shape, mom.m));
    save_tensor(dir + "/" + name + ".v.sten", Tensor::from_data(shape, mom.v));
    manifest << "moment " << name << " " << name << ".m.sten " << name << ".v.sten\n";
  }

  const std::string tmp = dir + "/manifest.txt.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + tmp);
    out << manifest.str();
  }
  std::filesystem::rename(tmp, dir + "/manifest.txt");
}

namespace {

struct ManifestData {
  CheckpointMeta meta;
  std::map<std::string, std::string> param_files;
  std::map<std::string, std::pair<std::string, std::string>> moment_files;
};

ManifestData read_manifest(const std::string& dir) {
  std::ifstream in(dir + "/manifest.txt");
  if (!in) throw IoError("checkpoint: cannot open " + dir + "/manifest.txt");
  ManifestData data;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    std::string key;
    row >> key;
    if (key == "config_hash") {
      std::string hex;
      row >> hex;
      data.meta.config_hash = std::strtoull(hex.c_str(), nullptr, 16);
    } else if (key == "step") {
      row >> data.meta.step;
    } else if (key == "total_steps") {
      row >> data.meta.total_steps;
    } else if (key == "lr_max") {
      row >> data.meta.lr_max;
    } else if (key == "lr_min") {
      row >> data.meta.lr_min;
    } else if (key == "param") {
      std::string name, file;
      row >> name >> file;
      data.param_files[name] = file;
    } else if (key == "moment") {
      std::string name, mfile, vfile;
      row >> name >> mfile >> vfile;
      data.moment_files[name] = {mfile, vfile};
    }
  }
  return data;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::string& dir) { return read_manifest(dir).meta; }

TrainState load_checkpoint(const std::string& dir, const ModelConfig& cfg) {
  const ManifestData data = read_manifest(dir);
  Model model = Model::init(cfg, /*seed=*/0);
  TrainState state = TrainState::init(std::move(model), data.meta.total_steps, data.meta.lr_max,
                                      data.meta.lr_min);
  state.step = data.meta.step;

  for (auto& [name, tensor] : state.model.named_params()) {
    const auto it = data.param_files.find(name);
    if (it == data.param_files.end()) {
      throw IoError("checkpoint: parameter " + name + " missing from manifest");
    }
    const Tensor loaded = load_tensor(dir + "/" + it->second);
    if (loaded.shape() != tensor.shape()) {
      throw IoError("checkpoint: parameter " + name + " has shape " + shape_str(loaded.shape()) +
                    ", model expects " + shape_str(tensor.shape()));
    }
    Tensor dst = tensor;
    auto out = dst.mutable_data();
    const auto src = loaded.data();
    std::copy(src.begin(), src.end(), out.begin());

    const auto mit = data.moment_files.find(name);
    if (mit != data.moment_files.end()) {
      const Tensor m = load_tensor(dir + "/" + mit->second.first);
      const Tensor v = load_tensor(dir + "/" + mit->second.second);
      if (m.size() != tensor.size() || v.size() != tensor.size()) {
        throw IoError("checkpoint: moment size mismatch for " + name);
      }
      AdamMoments& mom = state.moments.at(name);
      mom.m.assign(m.data().begin(), m.data().end());
      mom.v.assign(v.data().begin(), v.data().end());
    }
  }
  return state;
}

}  // namespace sparseloc

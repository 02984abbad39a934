#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparseloc/common.hpp"
#include "sparseloc/rng.hpp"

namespace sparseloc {

// Plain planar float image in [0,1], channel-major [3,H,W].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> rgb;

  double& at(int c, int i, int j) { return rgb[(static_cast<std::size_t>(c) * height + i) * width + j]; }
  double at(int c, int i, int j) const {
    return rgb[(static_cast<std::size_t>(c) * height + i) * width + j];
  }
};

enum class TextureFamily { Gradient, BandNoise, Checker };
enum class RegionShape { Rectangle, Ellipse };

// The camera fingerprint stamped uniformly on a rendered image: iid Gaussian
// sensor-like noise plus a 2x2 periodic demosaic-like pattern. Semantically
// invisible, statistically detectable.
struct Fingerprint {
  double noise_sigma = 0.015;
  double pattern_amplitude = 0.01;
};

struct SpliceSpec {
  RegionShape shape = RegionShape::Rectangle;
  double area_min = 0.05;  // mask area as a fraction of the image
  double area_max = 0.35;
  Fingerprint donor{0.06, 0.03};
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int size = 256;
  TextureFamily family = TextureFamily::BandNoise;
  Fingerprint host;
  SpliceSpec splice;
  // Hard negative: the donor is stamped with the host fingerprint, so the
  // composite carries no statistical seam.
  bool hard_negative = false;

  void validate() const;
  std::uint64_t hash() const;
};

struct Sample {
  Image image;
  std::vector<std::uint8_t> mask;  // H*W, hard 0/1
  std::uint64_t provenance = 0;    // SceneSpec hash
};

// Host texture with host fingerprint; donor patch with identical semantic
// texture but donor fingerprint, composited over the sampled region. The mask
// marks composited pixels exactly. Degenerate regions retry with a fresh
// substream, erroring after 10 attempts.
Sample generate(const SceneSpec& spec);

// Blockwise 8x8 DCT quantization against the standard luminance table scaled
// by `quality` in [10,100]; q=100 scales the table to all ones.
Image perturb_jpeg_like(const Image& image, int quality);

// Separable normalized Gaussian, reflect padding; `kernel` must be odd.
Image perturb_gaussian_blur(const Image& image, int kernel, double sigma);

// Adds N(0, sigma^2), clips to [0,1]; deterministic per seed.
Image perturb_gaussian_noise(const Image& image, double sigma, std::uint64_t seed);

// Binary PPM (P6, maxval 255) for images; binary PGM (P5, 0/255) for masks.
void write_ppm(const std::string& path, const Image& image);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& mask, int height, int width);
std::vector<std::uint8_t> read_pgm(const std::string& path, int& height, int& width);

}  // namespace sparseloc

#include "sparseloc/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace sparseloc {

void SceneSpec::validate() const {
  if (size < 8) throw ConfigError("scene: size must be >= 8");
  if (host.noise_sigma < 0 || splice.donor.noise_sigma < 0 || host.pattern_amplitude < 0 ||
      splice.donor.pattern_amplitude < 0) {
    throw ConfigError("scene: fingerprint parameters must be >= 0");
  }
  if (!(splice.area_min >= 0.0 && splice.area_max <= 1.0 && splice.area_min <= splice.area_max)) {
    throw ConfigError("scene: splice area bounds must satisfy 0 <= min <= max <= 1");
  }
  if (!hard_negative && host.noise_sigma == splice.donor.noise_sigma &&
      host.pattern_amplitude == splice.donor.pattern_amplitude) {
    throw ConfigError("scene: donor fingerprint must differ from host (or set hard_negative)");
  }
}

std::uint64_t SceneSpec::hash() const {
  std::ostringstream os;
  os << seed << "|" << size << "|" << static_cast<int>(family) << "|" << host.noise_sigma << "|"
     << host.pattern_amplitude << "|" << static_cast<int>(splice.shape) << "|" << splice.area_min
     << "|" << splice.area_max << "|" << splice.donor.noise_sigma << "|"
     << splice.donor.pattern_amplitude << "|" << hard_negative;
  return fnv1a(os.str());
}

namespace {

Image blank(int size) {
  Image img;
  img.height = size;
  img.width = size;
  img.rgb.assign(static_cast<std::size_t>(3) * size * size, 0.0);
  return img;
}

void render_texture(Image& img, TextureFamily family, Rng& rng) {
  const int n = img.height;
  switch (family) {
    case TextureFamily::Gradient: {
      std::array<double, 3> c0, c1;
      for (int ch = 0; ch < 3; ++ch) {
        c0[ch] = rng.uniform(0.15, 0.85);
        c1[ch] = rng.uniform(0.15, 0.85);
      }
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double dx = std::cos(angle), dy = std::sin(angle);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          const double proj = (i * dy + j * dx) / n;           // in [-1, 1]
          const double t = std::clamp(0.5 + 0.5 * proj, 0.0, 1.0);
          for (int ch = 0; ch < 3; ++ch) img.at(ch, i, j) = c0[ch] + t * (c1[ch] - c0[ch]);
        }
      }
      break;
    }
    case TextureFamily::BandNoise: {
      // Low-frequency plane waves shared across channels with per-channel
      // tints; band limit keeps the semantic layer smooth against the
      // fingerprint noise.
      constexpr int kWaves = 6;
      std::array<double, kWaves> fx, fy, phase, amp;
      for (int k = 0; k < kWaves; ++k) {
        const double freq = rng.uniform(1.0, 6.0);
        const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        fx[k] = freq * std::cos(theta);
        fy[k] = freq * std::sin(theta);
        phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        amp[k] = rng.uniform(0.4, 1.0) / kWaves;
      }
      std::array<double, 3> base, spread;
      for (int ch = 0; ch < 3; ++ch) {
        base[ch] = rng.uniform(0.35, 0.65);
        spread[ch] = rng.uniform(0.1, 0.3);
      }
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          double field = 0.0;
          for (int k = 0; k < kWaves; ++k) {
            field += amp[k] * std::sin(2.0 * std::numbers::pi *
                                           (fx[k] * j / n + fy[k] * i / n) + phase[k]);
          }
          for (int ch = 0; ch < 3; ++ch) {
            img.at(ch, i, j) = std::clamp(base[ch] + spread[ch] * field, 0.0, 1.0);
          }
        }
      }
      break;
    }
    case TextureFamily::Checker: {
      const int cell = static_cast<int>(rng.uniform_int(8, 48));
      const int oi = static_cast<int>(rng.uniform_int(0, cell - 1));
      const int oj = static_cast<int>(rng.uniform_int(0, cell - 1));
      std::array<double, 3> c0, c1;
      for (int ch = 0; ch < 3; ++ch) {
        c0[ch] = rng.uniform(0.2, 0.8);
        c1[ch] = rng.uniform(0.2, 0.8);
      }
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          const bool odd = (((i + oi) / cell) + ((j + oj) / cell)) % 2 != 0;
          for (int ch = 0; ch < 3; ++ch) img.at(ch, i, j) = odd ? c1[ch] : c0[ch];
        }
      }
      break;
    }
  }
}

// 2x2 demosaic-like checker pattern, equal in all channels.
constexpr double kPattern[2][2] = {{1.0, -1.0}, {-1.0, 1.0}};

void stamp_fingerprint(Image& img, const Fingerprint& fp, Rng& rng) {
  const int n = img.height;
  for (int ch = 0; ch < 3; ++ch) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double noise = fp.noise_sigma * rng.normal();
        img.at(ch, i, j) += noise + fp.pattern_amplitude * kPattern[i % 2][j % 2];
      }
    }
  }
}

struct Region {
  std::vector<std::uint8_t> mask;
  std::int64_t area = 0;
};

Region sample_region(int n, const SpliceSpec& splice, Rng& rng) {
  Region region;
  region.mask.assign(static_cast<std::size_t>(n) * n, 0);
  const double target = rng.uniform(splice.area_min, splice.area_max) * n * n;
  if (target < 1.0) return region;  // degenerate request; caller retries/errors
  const double aspect = rng.uniform(0.6, 1.6);

  if (splice.shape == RegionShape::Rectangle) {
    int rh = std::clamp(static_cast<int>(std::lround(std::sqrt(target * aspect))), 1, n);
    int rw = std::clamp(static_cast<int>(std::lround(target / rh)), 1, n);
    rh = std::min(rh, n);
    const int i0 = static_cast<int>(rng.uniform_int(0, n - rh));
    const int j0 = static_cast<int>(rng.uniform_int(0, n - rw));
    for (int i = i0; i < i0 + rh; ++i) {
      for (int j = j0; j < j0 + rw; ++j) region.mask[static_cast<std::size_t>(i) * n + j] = 1;
    }
  } else {
    // Semi-axes from area = pi*a*b.
    const double a = std::sqrt(target * aspect / std::numbers::pi);
    const double bsemi = target / std::numbers::pi / a;
    const int ra = std::clamp(static_cast<int>(std::ceil(a)), 1, n / 2 - 1);
    const int rb = std::clamp(static_cast<int>(std::ceil(bsemi)), 1, n / 2 - 1);
    const int ci = static_cast<int>(rng.uniform_int(ra, n - 1 - ra));
    const int cj = static_cast<int>(rng.uniform_int(rb, n - 1 - rb));
    for (int i = ci - ra; i <= ci + ra; ++i) {
      for (int j = cj - rb; j <= cj + rb; ++j) {
        const double di = (i - ci) / a;
        const double dj = (j - cj) / bsemi;
        if (di * di + dj * dj <= 1.0) region.mask[static_cast<std::size_t>(i) * n + j] = 1;
      }
    }
  }
  for (const std::uint8_t m : region.mask) region.area += m;
  return region;
}

void clip01(Image& img) {
  for (double& v : img.rgb) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

Sample generate(const SceneSpec& spec) {
  spec.validate();
  const int n = spec.size;
  const double lo = std::max(spec.splice.area_min * 0.5, 1.0 / (n * n));
  const double hi = std::min(spec.splice.area_max * 1.5, 1.0);

  for (int attempt = 0; attempt < 10; ++attempt) {
    const std::uint64_t attempt_seed = splitmix64(spec.seed + 0x9E37 * attempt);
    Rng texture_rng = substream(attempt_seed, "synth/texture");
    Rng region_rng = substream(attempt_seed, "synth/region");
    Rng host_rng = substream(attempt_seed, "synth/host_noise");
    Rng donor_rng = substream(attempt_seed, "synth/donor_noise");

    Image host = blank(n);
    render_texture(host, spec.family, texture_rng);
    Image donor = host;  // same semantic content

    stamp_fingerprint(host, spec.host, host_rng);
    stamp_fingerprint(donor, spec.hard_negative ? spec.host : spec.splice.donor, donor_rng);

    const Region region = sample_region(n, spec.splice, region_rng);
    const double fraction = static_cast<double>(region.area) / (static_cast<double>(n) * n);
    if (region.area == 0 || fraction < lo || fraction > hi) continue;

    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (!region.mask[static_cast<std::size_t>(i) * n + j]) continue;
        for (int ch = 0; ch < 3; ++ch) host.at(ch, i, j) = donor.at(ch, i, j);
      }
    }
    clip01(host);

    Sample sample;
    sample.image = std::move(host);
    sample.mask = region.mask;
    sample.provenance = spec.hash();
    return sample;
  }
  throw ConfigError("generate: no valid splice region after 10 attempts (seed " +
                    std::to_string(spec.seed) + ", area bounds [" +
                    std::to_string(spec.splice.area_min) + "," +
                    std::to_string(spec.splice.area_max) + "])");
}

// ---- JPEG-like blockwise DCT quantization ----

namespace {

// JPEG Annex K luminance quantization table.
constexpr int kLuminanceTable[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

struct DctBasis {
  double c[8][8];
  DctBasis() {
    for (int u = 0; u < 8; ++u) {
      const double norm = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) {
        c[u][x] = norm * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
    }
  }
};

const DctBasis& dct_basis() {
  static const DctBasis basis;
  return basis;
}

}  // namespace

Image perturb_jpeg_like(const Image& image, int quality) {
  if (quality < 10 || quality > 100) {
    throw ConfigError("perturb_jpeg_like: quality must lie in [10,100], got " +
                      std::to_string(quality));
  }
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  int table[64];
  for (int i = 0; i < 64; ++i) {
    table[i] = std::clamp((kLuminanceTable[i] * scale + 50) / 100, 1, 255);
  }

  const DctBasis& basis = dct_basis();
  const int h = image.height, w = image.width;
  const int ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  Image out = image;

  std::array<std::array<double, 8>, 8> block, coef, tmp;
  for (int ch = 0; ch < 3; ++ch) {
    for (int bi = 0; bi < ph; bi += 8) {
      for (int bj = 0; bj < pw; bj += 8) {
        // Edge-replicated block in the JPEG working range.
        for (int i = 0; i < 8; ++i) {
          for (int j = 0; j < 8; ++j) {
            const int si = std::min(bi + i, h - 1);
            const int sj = std::min(bj + j, w - 1);
            block[i][j] = image.at(ch, si, sj) * 255.0 - 128.0;
          }
        }
        // coef = C * block * C^T
        for (int u = 0; u < 8; ++u) {
          for (int j = 0; j < 8; ++j) {
            double acc = 0.0;
            for (int x = 0; x < 8; ++x) acc += basis.c[u][x] * block[x][j];
            tmp[u][j] = acc;
          }
        }
        for (int u = 0; u < 8; ++u) {
          for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int y = 0; y < 8; ++y) acc += tmp[u][y] * basis.c[v][y];
            coef[u][v] = std::round(acc / table[u * 8 + v]) * table[u * 8 + v];
          }
        }
        // block = C^T * coef * C
        for (int x = 0; x < 8; ++x) {
          for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int u = 0; u < 8; ++u) acc += basis.c[u][x] * coef[u][v];
            tmp[x][v] = acc;
          }
        }
        for (int x = 0; x < 8; ++x) {
          for (int y = 0; y < 8; ++y) {
            double acc = 0.0;
            for (int v = 0; v < 8; ++v) acc += tmp[x][v] * basis.c[v][y];
            const int di = bi + x, dj = bj + y;
            if (di < h && dj < w) {
              out.at(ch, di, dj) = std::clamp((acc + 128.0) / 255.0, 0.0, 1.0);
            }
          }
        }
      }
    }
  }
  return out;
}

Image perturb_gaussian_blur(const Image& image, int kernel, double sigma) {
  if (kernel < 1 || kernel % 2 == 0) {
    throw ConfigError("perturb_gaussian_blur: kernel must be odd, got " + std::to_string(kernel));
  }
  const int h = image.height, w = image.width;
  if (kernel > 2 * std::min(h, w) - 1) {
    throw ConfigError("perturb_gaussian_blur: kernel too large for image");
  }
  const int half = kernel / 2;
  std::vector<double> taps(kernel);
  if (sigma <= 0.0) {
    std::fill(taps.begin(), taps.end(), 0.0);
    taps[half] = 1.0;
  } else {
    double total = 0.0;
    for (int i = 0; i < kernel; ++i) {
      taps[i] = std::exp(-0.5 * (i - half) * (i - half) / (sigma * sigma));
      total += taps[i];
    }
    for (double& t : taps) t /= total;
  }
  const auto reflect = [](int idx, int n) {
    if (idx < 0) idx = -idx;
    if (idx >= n) idx = 2 * n - 2 - idx;
    return idx;
  };

  Image mid = image;
  for (int ch = 0; ch < 3; ++ch) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int t = -half; t <= half; ++t) acc += taps[t + half] * image.at(ch, i, reflect(j + t, w));
        mid.at(ch, i, j) = acc;
      }
    }
  }
  Image out = mid;
  for (int ch = 0; ch < 3; ++ch) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int t = -half; t <= half; ++t) acc += taps[t + half] * mid.at(ch, reflect(i + t, h), j);
        out.at(ch, i, j) = acc;
      }
    }
  }
  return out;
}

Image perturb_gaussian_noise(const Image& image, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ConfigError("perturb_gaussian_noise: sigma must be >= 0");
  Image out = image;
  if (sigma == 0.0) return out;
  Rng rng = substream(seed, "synth/perturb_noise");
  for (double& v : out.rgb) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
  return out;
}

// ---- PPM / PGM ----

namespace {

std::uint8_t to_byte(double v) {
  const long r = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(std::clamp(r, 0L, 255L));
}

void write_binary_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename to " + path + " failed: " + ec.message());
}

// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return tok;
  }
  throw IoError("unexpected end of netpbm header");
}

}  // namespace

void write_ppm(const std::string& path, const Image& image) {
  std::string bytes = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                      "\n255\n";
  bytes.reserve(bytes.size() + static_cast<std::size_t>(3) * image.height * image.width);
  for (int i = 0; i < image.height; ++i) {
    for (int j = 0; j < image.width; ++j) {
      for (int ch = 0; ch < 3; ++ch) bytes.push_back(static_cast<char>(to_byte(image.at(ch, i, j))));
    }
  }
  write_binary_atomic(path, bytes);
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_ppm: cannot open " + path);
  if (next_token(in) != "P6") throw IoError("read_ppm: " + path + " is not binary PPM");
  const int w = std::stoi(next_token(in));
  const int h = std::stoi(next_token(in));
  const int maxval = std::stoi(next_token(in));
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError("read_ppm: unsupported header in " + path);
  in.get();  // single whitespace after maxval
  std::vector<char> raw(static_cast<std::size_t>(3) * h * w);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw IoError("read_ppm: truncated payload in " + path);
  }
  Image img;
  img.height = h;
  img.width = w;
  img.rgb.resize(raw.size());
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int ch = 0; ch < 3; ++ch) {
        img.at(ch, i, j) =
            static_cast<unsigned char>(raw[(static_cast<std::size_t>(i) * w + j) * 3 + ch]) / 255.0;
      }
    }
  }
  return img;
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& mask, int height,
               int width) {
  if (static_cast<std::int64_t>(mask.size()) != static_cast<std::int64_t>(height) * width) {
    throw ShapeError("write_pgm: mask size does not match extents");
  }
  std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  bytes.reserve(bytes.size() + mask.size());
  for (const std::uint8_t m : mask) bytes.push_back(static_cast<char>(m ? 255 : 0));
  write_binary_atomic(path, bytes);
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& height, int& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_pgm: cannot open " + path);
  if (next_token(in) != "P5") throw IoError("read_pgm: " + path + " is not binary PGM");
  width = std::stoi(next_token(in));
  height = std::stoi(next_token(in));
  const int maxval = std::stoi(next_token(in));
  if (width <= 0 || height <= 0 || maxval != 255) {
    throw IoError("read_pgm: unsupported header in " + path);
  }
  in.get();
  std::vector<char> raw(static_cast<std::size_t>(height) * width);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw IoError("read_pgm: truncated payload in " + path);
  }
  std::vector<std::uint8_t> mask(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    mask[i] = static_cast<unsigned char>(raw[i]) >= 128 ? 1 : 0;
  }
  return mask;
}

}  // namespace sparseloc

#include "westar/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "westar/error.hpp"

namespace westar {

namespace {

namespace fs = std::filesystem;

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot read " + path.string());
  return is;
}

// Netpbm header token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& is, const fs::path& path) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw Error(ErrorKind::Data, "truncated header in " + path.string());
  return tok;
}

std::size_t pnm_number(std::istream& is, const fs::path& path) {
  const auto tok = pnm_token(is, path);
  try {
    std::size_t used = 0;
    const auto v = std::stoull(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw Error(ErrorKind::Data, "bad header field '" + tok + "' in " + path.string());
  }
}

void read_exact(std::istream& is, char* dst, std::size_t n, const fs::path& path) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw Error(ErrorKind::Data, "truncated data in " + path.string());
}

}  // namespace

void write_ppm(const fs::path& path, const Tensor& rgb) {
  if (rgb.dim() != 3 || rgb.shape()[2] != 3) throw Error(ErrorKind::Shape, "write_ppm needs H x W x 3");
  auto os = open_out(path);
  os << "P6\n" << rgb.shape()[1] << ' ' << rgb.shape()[0] << "\n255\n";
  std::string bytes(rgb.numel(), '\0');
  for (std::size_t i = 0; i < rgb.numel(); ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(rgb[i], 0.0, 1.0) * 255.0)));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_ppm(const fs::path& path) {
  auto is = open_in(path);
  if (pnm_token(is, path) != "P6") throw Error(ErrorKind::Data, path.string() + " is not a binary PPM");
  const std::size_t w = pnm_number(is, path), h = pnm_number(is, path), maxval = pnm_number(is, path);
  if (maxval != 255) throw Error(ErrorKind::Data, "only 8-bit PPM is supported: " + path.string());
  std::string bytes(h * w * 3, '\0');
  read_exact(is, bytes.data(), bytes.size(), path);
  std::vector<double> v(bytes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  return Tensor({h, w, 3}, std::move(v));
}

void write_pfm(const fs::path& path, const Tensor& map) {
  if (map.dim() != 2) throw Error(ErrorKind::Shape, "write_pfm needs H x W");
  const std::size_t h = map.shape()[0], w = map.shape()[1];
  auto os = open_out(path);
  os << "Pf\n" << w << ' ' << h << "\n-1.0\n";
  for (std::size_t r = h; r-- > 0;)
    for (std::size_t c = 0; c < w; ++c) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(map[r * w + c]));
      char le[4];
      for (int i = 0; i < 4; ++i) le[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
      os.write(le, 4);
    }
}

Tensor read_pfm(const fs::path& path) {
  auto is = open_in(path);
  if (pnm_token(is, path) != "Pf") throw Error(ErrorKind::Data, path.string() + " is not a grayscale PFM");
  const std::size_t w = pnm_number(is, path), h = pnm_number(is, path);
  const auto scale_tok = pnm_token(is, path);
  double scale = 0.0;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    throw Error(ErrorKind::Data, "bad PFM scale in " + path.string());
  }
  if (scale >= 0) throw Error(ErrorKind::Data, "big-endian PFM is not supported: " + path.string());
  std::string bytes(h * w * 4, '\0');
  read_exact(is, bytes.data(), bytes.size(), path);
  std::vector<double> v(h * w);
  for (std::size_t k = 0; k < h * w; ++k) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[k * 4 + i])) << (8 * i);
    const std::size_t r = h - 1 - k / w, c = k % w;
    v[r * w + c] = std::bit_cast<float>(bits);
  }
  return Tensor({h, w}, std::move(v));
}

void write_pgm16(const fs::path& path, std::size_t h, std::size_t w, const std::vector<std::uint16_t>& values) {
  if (values.size() != h * w) throw Error(ErrorKind::Shape, "write_pgm16 size mismatch");
  auto os = open_out(path);
  os << "P5\n" << w << ' ' << h << "\n65535\n";
  std::string bytes(values.size() * 2, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    bytes[2 * i] = static_cast<char>(values[i] >> 8);
    bytes[2 * i + 1] = static_cast<char>(values[i] & 0xff);
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint16_t> read_pgm16(const fs::path& path, std::size_t& h, std::size_t& w) {
  auto is = open_in(path);
  if (pnm_token(is, path) != "P5") throw Error(ErrorKind::Data, path.string() + " is not a binary PGM");
  w = pnm_number(is, path);
  h = pnm_number(is, path);
  if (pnm_number(is, path) != 65535) throw Error(ErrorKind::Data, "mask PGM must be 16-bit: " + path.string());
  std::string bytes(h * w * 2, '\0');
  read_exact(is, bytes.data(), bytes.size(), path);
  std::vector<std::uint16_t> v(h * w);
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<std::uint16_t>((static_cast<unsigned char>(bytes[2 * i]) << 8) |
                                      static_cast<unsigned char>(bytes[2 * i + 1]));
  return v;
}

void write_weak_labels(const fs::path& path, std::size_t h, std::size_t w, const std::vector<WeakLabel>& labels) {
  auto os = open_out(path);
  os << "WEAK1 " << h << ' ' << w << '\n';
  for (const auto& l : labels) os << l.p_plus << ' ' << l.p_minus << ' ' << l.l << '\n';
}

std::vector<WeakLabel> read_weak_labels(const fs::path& path, std::size_t h, std::size_t w) {
  auto is = open_in(path);
  std::string magic;
  std::size_t fh = 0, fw = 0;
  if (!(is >> magic >> fh >> fw) || magic != "WEAK1") {
    throw Error(ErrorKind::Data, path.string() + " lacks a WEAK1 header");
  }
  if (fh != h || fw != w) {
    throw Error(ErrorKind::Data, path.string() + " is for a " + std::to_string(fh) + " x " + std::to_string(fw) +
                                     " map, expected " + std::to_string(h) + " x " + std::to_string(w));
  }
  std::vector<WeakLabel> out;
  std::string line;
  std::getline(is, line);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    long long a, b;
    int l;
    std::string extra;
    if (!(ls >> a >> b >> l) || (ls >> extra) || a < 0 || b < 0) {
      throw Error(ErrorKind::Data, path.string() + ":" + std::to_string(lineno) + ": malformed label line");
    }
    if (l < -1 || l > 1) {
      throw Error(ErrorKind::Data, path.string() + ":" + std::to_string(lineno) + ": label must be -1, 0 or 1");
    }
    const WeakLabel wl{static_cast<std::size_t>(a), static_cast<std::size_t>(b), l};
    if (wl.p_plus >= h * w || wl.p_minus >= h * w) {
      throw Error(ErrorKind::Index, path.string() + ":" + std::to_string(lineno) + ": pixel index out of range");
    }
    out.push_back(wl);
  }
  return out;
}

void write_scene(const fs::path& dir, const Scene& scene, const std::vector<WeakLabel>* labels) {
  fs::create_directories(dir);
  write_ppm(dir / "rgb.ppm", scene.rgb);
  write_pfm(dir / "depth.pfm", scene.depth);
  write_pgm16(dir / "masks.pgm", scene.height(), scene.width(), scene.masks.label_map());
  if (labels) write_weak_labels(dir / "weak.txt", scene.height(), scene.width(), *labels);
}

Scene read_scene(const fs::path& dir, std::vector<WeakLabel>* labels) {
  Scene s;
  s.rgb = read_ppm(dir / "rgb.ppm");
  s.depth = read_pfm(dir / "depth.pfm");
  std::size_t h = 0, w = 0;
  const auto ids = read_pgm16(dir / "masks.pgm", h, w);
  if (s.rgb.shape()[0] != s.depth.shape()[0] || s.rgb.shape()[1] != s.depth.shape()[1] || h != s.height() ||
      w != s.width()) {
    throw Error(ErrorKind::Data, "scene files in " + dir.string() + " disagree on size");
  }
  s.masks = InstanceMaskSet::from_label_map(h, w, ids);
  s.valid.resize(h * w);
  for (std::size_t p = 0; p < h * w; ++p) s.valid[p] = std::isfinite(s.depth[p]) && s.depth[p] > 0;
  if (labels) {
    labels->clear();
    if (fs::exists(dir / "weak.txt")) *labels = read_weak_labels(dir / "weak.txt", h, w);
  }
  return s;
}

}  // namespace westar

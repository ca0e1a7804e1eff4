#include "kflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>

#include "kflow/error.hpp"

namespace kflow::data {

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.x = x.gather(rows);
  std::vector<double> ys;
  ys.reserve(rows.size() * y.cols());
  for (std::size_t r : rows) {
    if (r >= size()) throw Error(ErrorKind::IndexOutOfRange, "subset row " + std::to_string(r));
    auto row = y.row(r);
    ys.insert(ys.end(), row.begin(), row.end());
  }
  out.y = linalg::Matrix(rows.size(), y.cols(), std::move(ys));
  if (categorical()) {
    std::vector<int> cls;
    cls.reserve(rows.size());
    for (std::size_t r : rows) cls.push_back(classes[r]);
    index_classes(out, std::move(cls), num_classes());
  }
  return out;
}

Tensor Dataset::labels(std::span<const std::size_t> rows) const {
  Tensor out({rows.size(), y.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw Error(ErrorKind::IndexOutOfRange, "label row " + std::to_string(rows[i]));
    auto row = y.row(rows[i]);
    std::copy(row.begin(), row.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * y.cols()));
  }
  return out;
}

void index_classes(Dataset& d, std::vector<int> classes, std::size_t num_classes) {
  d.class_index.assign(num_classes, {});
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const int c = classes[i];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
      throw Error(ErrorKind::InvalidRange, "class " + std::to_string(c) + " outside [0," + std::to_string(num_classes) + ")");
    d.class_index[static_cast<std::size_t>(c)].push_back(i);
  }
  d.classes = std::move(classes);
}

linalg::Matrix one_hot(std::span<const int> labels, std::size_t num_classes) {
  linalg::Matrix y(labels.size(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw Error(ErrorKind::InvalidRange, "label " + std::to_string(labels[i]));
    y(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return y;
}

Dataset swissroll(std::size_t n_per_class, double turns, double noise_std, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> param(std::numbers::pi / 2.0, turns * 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t n = 2 * n_per_class;
  Tensor x({n, 2});
  std::vector<double> y(n);
  std::vector<int> cls(n);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    const double t = param(rng);
    const double px = t * std::cos(t), py = t * std::sin(t);
    for (int side = 0; side < 2; ++side) {
      const std::size_t row = 2 * i + static_cast<std::size_t>(side);
      const double sign = side == 0 ? 1.0 : -1.0;
      x.data[2 * row] = sign * px;
      x.data[2 * row + 1] = sign * py;
      if (noise_std > 0.0) {
        x.data[2 * row] += noise_std * noise(rng);
        x.data[2 * row + 1] += noise_std * noise(rng);
      }
      y[row] = sign;
      cls[row] = side;
    }
  }
  Dataset d;
  d.x = std::move(x);
  d.y = linalg::Matrix(n, 1, std::move(y));
  index_classes(d, std::move(cls), 2);
  return d;
}

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::filesystem::path& path) {
  if (buf.size() < offset + 4) throw Error(ErrorKind::TruncatedFile, path.string() + ": header cut short");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void put32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;
constexpr std::size_t kIdxClasses = 10;

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_all(images);
  const auto lab = read_all(labels);
  if (be32(img, 0, images) != kImageMagic) throw Error(ErrorKind::BadMagic, images.string());
  if (be32(lab, 0, labels) != kLabelMagic) throw Error(ErrorKind::BadMagic, labels.string());
  const std::size_t n = be32(img, 4, images);
  const std::size_t rows = be32(img, 8, images);
  const std::size_t cols = be32(img, 12, images);
  const std::size_t n_labels = be32(lab, 4, labels);
  if (n != n_labels)
    throw Error(ErrorKind::CountMismatch, std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  if (img.size() < 16 + n * rows * cols) throw Error(ErrorKind::TruncatedFile, images.string());
  if (lab.size() < 8 + n) throw Error(ErrorKind::TruncatedFile, labels.string());

  Dataset d;
  d.x = Tensor({n, rows, cols, 1});
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.x.data[i] = static_cast<double>(img[16 + i]) / 255.0;
  std::vector<int> cls(n);
  for (std::size_t i = 0; i < n; ++i) cls[i] = lab[8 + i];
  d.y = one_hot(cls, kIdxClasses);
  index_classes(d, std::move(cls), kIdxClasses);
  return d;
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& d) {
  if (d.x.rank() != 4 || d.x.shape[3] != 1 || !d.categorical())
    throw Error(ErrorKind::ShapeMismatch, "write_idx needs (N,H,W,1) images with class labels");
  const std::size_t n = d.x.shape[0];
  std::ofstream img(images, std::ios::binary);
  std::ofstream lab(labels, std::ios::binary);
  if (!img || !lab) throw Error(ErrorKind::Io, "cannot write IDX pair");
  put32(img, kImageMagic);
  put32(img, static_cast<std::uint32_t>(n));
  put32(img, static_cast<std::uint32_t>(d.x.shape[1]));
  put32(img, static_cast<std::uint32_t>(d.x.shape[2]));
  for (double v : d.x.data) img.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  put32(lab, kLabelMagic);
  put32(lab, static_cast<std::uint32_t>(n));
  for (int c : d.classes) lab.put(static_cast<char>(c));
}

void AugmentPolicy::validate() const {
  if (p_identity < 0.0 || p_affine < 0.0 || std::abs(p_identity + p_affine - 1.0) > 1e-12)
    throw Error(ErrorKind::InvalidProbability, "augmentation probabilities must be nonnegative and sum to 1");
  if (max_translation < 0.0 || max_rotation_deg < 0.0 || max_shear < 0.0)
    throw Error(ErrorKind::InvalidConfig, "augmentation ranges must be nonnegative");
}

namespace {

void affine_one(const double* src, double* dst, std::size_t h, std::size_t w, const AffineParams& p) {
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  // forward A = R * S with S = [[1, shear], [0, 1]] acting on (x, y) = (col, row)
  const double a00 = c, a01 = c * p.shear - s;
  const double a10 = s, a11 = s * p.shear + c;
  const double det = a00 * a11 - a01 * a10;
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;

  auto at = [&](long r, long col) {
    if (r < 0 || col < 0 || r >= static_cast<long>(h) || col >= static_cast<long>(w)) return 0.0;
    return src[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(col)];
  };
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      const double ux = static_cast<double>(col) - cx - p.dx;
      const double uy = static_cast<double>(r) - cy - p.dy;
      const double sx = i00 * ux + i01 * uy + cx;
      const double sy = i10 * ux + i11 * uy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double tx = sx - fx, ty = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      dst[r * w + col] = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                         ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
    }
  }
}

void require_images(const Tensor& images) {
  if (images.rank() != 4 || images.shape[3] != 1)
    throw Error(ErrorKind::ShapeMismatch, "augmentation needs (N,H,W,1) images, got " + shape_string(images.shape));
}

}  // namespace

Tensor affine_transform(const Tensor& images, const AffineParams& params) {
  require_images(images);
  const std::size_t n = images.shape[0], h = images.shape[1], w = images.shape[2];
  Tensor out(images.shape);
  for (std::size_t i = 0; i < n; ++i) affine_one(images.data.data() + i * h * w, out.data.data() + i * h * w, h, w, params);
  return out;
}

Tensor augment(const Tensor& images, const AugmentPolicy& policy, std::mt19937_64& rng) {
  policy.validate();
  require_images(images);
  const std::size_t n = images.shape[0], h = images.shape[1], w = images.shape[2];
  Tensor out = images;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (unit(rng) < policy.p_identity) continue;
    AffineParams p;
    p.dx = policy.max_translation * sym(rng);
    p.dy = policy.max_translation * sym(rng);
    p.rotation_deg = policy.max_rotation_deg * sym(rng);
    p.shear = policy.max_shear * sym(rng);
    affine_one(images.data.data() + i * h * w, out.data.data() + i * h * w, h, w, p);
  }
  return out;
}

}  // namespace kflow::data

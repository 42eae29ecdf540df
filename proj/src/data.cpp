#include "nodedrop/data.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace nodedrop {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off, const char* what) {
  if (off + 4 > b.size())
    throw FormatError(std::string(what) + ": truncated header at offset " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

constexpr std::size_t kCifarRecord = 3073;
constexpr std::size_t kCifarSide = 32;

}  // namespace

void validate(const Dataset& ds) {
  if (ds.images.rank() != 4 || ds.images.dim(0) != ds.labels.size())
    throw FormatError("dataset images " + shape_str(ds.images.shape()) + " do not match " +
                      std::to_string(ds.labels.size()) + " labels");
  for (float p : ds.images.values())
    if (!(p >= 0.0f && p <= 1.0f)) throw FormatError("dataset pixel outside [0,1]");
  for (int l : ds.labels)
    if (l < 0 || l >= ds.num_classes)
      throw FormatError("label " + std::to_string(l) + " outside [0," +
                        std::to_string(ds.num_classes) + ")");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

Dataset parse_mnist_idx(std::span<const std::uint8_t> images,
                        std::span<const std::uint8_t> labels) {
  const std::uint32_t im_magic = read_be32(images, 0, "IDX images");
  if (im_magic != 0x00000803)
    throw FormatError("IDX images: bad magic " + hex32(im_magic) + " at offset 0, expected 0x00000803");
  const std::size_t n = read_be32(images, 4, "IDX images");
  const std::size_t rows = read_be32(images, 8, "IDX images");
  const std::size_t cols = read_be32(images, 12, "IDX images");
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX images: zero dimension in header");
  const std::size_t payload = n * rows * cols;
  if (images.size() < 16 + payload)
    throw FormatError("IDX images: truncated, expected " + std::to_string(16 + payload) +
                      " bytes, file has " + std::to_string(images.size()));

  const std::uint32_t lb_magic = read_be32(labels, 0, "IDX labels");
  if (lb_magic != 0x00000801)
    throw FormatError("IDX labels: bad magic " + hex32(lb_magic) + " at offset 0, expected 0x00000801");
  const std::size_t nl = read_be32(labels, 4, "IDX labels");
  if (labels.size() < 8 + nl)
    throw FormatError("IDX labels: truncated, expected " + std::to_string(8 + nl) +
                      " bytes, file has " + std::to_string(labels.size()));
  if (nl != n)
    throw FormatError("IDX image count " + std::to_string(n) + " != label count " +
                      std::to_string(nl));

  Dataset ds;
  ds.images = Tensor<float>({n, 1, rows, cols});
  for (std::size_t i = 0; i < payload; ++i)
    ds.images[i] = static_cast<float>(images[16 + i] / 255.0);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = labels[8 + i];
  validate(ds);
  return ds;
}

Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  const auto im = read_file(images_path);
  const auto lb = read_file(labels_path);
  return parse_mnist_idx(im, lb);
}

Dataset parse_cifar10(std::span<const std::uint8_t> bytes) {
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw FormatError("CIFAR-10: length " + std::to_string(bytes.size()) +
                      " is not a positive multiple of 3073");
  const std::size_t n = bytes.size() / kCifarRecord;
  const std::size_t pixels = 3 * kCifarSide * kCifarSide;
  Dataset ds;
  ds.images = Tensor<float>({n, 3, kCifarSide, kCifarSide});
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    ds.labels[r] = rec[0];
    float* dst = ds.images.data() + r * pixels;
    for (std::size_t i = 0; i < pixels; ++i) dst[i] = static_cast<float>(rec[1 + i] / 255.0);
  }
  validate(ds);
  return ds;
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& batch_paths) {
  std::vector<std::uint8_t> all;
  for (const auto& p : batch_paths) {
    const auto b = read_file(p);
    if (b.size() % kCifarRecord != 0)
      throw FormatError("CIFAR-10: " + p.string() + " length " + std::to_string(b.size()) +
                        " is not a multiple of 3073");
    all.insert(all.end(), b.begin(), b.end());
  }
  return parse_cifar10(all);
}

template <typename T>
Tensor<T> gather_images(const Dataset& ds, std::span<const std::size_t> indices) {
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  Tensor<T> out(shape);
  const std::size_t stride = ds.images.size() / ds.images.dim(0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const float* src = ds.images.data() + indices[i] * stride;
    T* dst = out.data() + i * stride;
    for (std::size_t k = 0; k < stride; ++k) dst[k] = static_cast<T>(src[k]);
  }
  return out;
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = ds.labels.at(indices[i]);
  return out;
}

Dataset subset(const Dataset& ds, std::size_t first, std::size_t count) {
  if (first + count > ds.size() || count == 0)
    throw ContractError("subset out of range");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  Dataset out;
  out.images = gather_images<float>(ds, idx);
  out.labels = gather_labels(ds, idx);
  out.num_classes = ds.num_classes;
  return out;
}

template <typename T>
void shift_flip(const T* src, T* dst, std::size_t c, std::size_t h, std::size_t w, int dy,
                int dx, bool flip) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* s = src + ch * h * w;
    T* d = dst + ch * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t xo = flip ? w - 1 - x : x;
        const long sy = static_cast<long>(y) + dy;
        const long sx = static_cast<long>(xo) + dx;
        const bool inside =
            sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w);
        d[y * w + x] = inside ? s[sy * static_cast<long>(w) + sx] : T(0);
      }
    }
  }
}

template <typename T>
Tensor<T> augment(const Tensor<T>& batch, Rng& rng) {
  if (batch.rank() != 4) throw DimensionError("augment expects N x C x H x W");
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t stride = c * h * w;
  Tensor<T> out(batch.shape());
  for (std::size_t i = 0; i < n; ++i) {
    // Crop offset into the 4-padded image, so the shift is offset - 4.
    const int dy = static_cast<int>(rng.below(9)) - 4;
    const int dx = static_cast<int>(rng.below(9)) - 4;
    const bool flip = rng.bernoulli(0.5);
    shift_flip(batch.data() + i * stride, out.data() + i * stride, c, h, w, dy, dx, flip);
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 bool shuffle, Rng& rng, BatchMode mode) {
  if (batch_size == 0) throw ContractError("batch_size must be >= 1");
  std::vector<std::size_t> order;
  if (shuffle) {
    order = rng.permutation(n);
  } else {
    order.resize(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < batch_size && mode == BatchMode::train) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

template Tensor<float> gather_images<float>(const Dataset&, std::span<const std::size_t>);
template Tensor<double> gather_images<double>(const Dataset&, std::span<const std::size_t>);
template void shift_flip(const float*, float*, std::size_t, std::size_t, std::size_t, int, int,
                         bool);
template void shift_flip(const double*, double*, std::size_t, std::size_t, std::size_t, int, int,
                         bool);
template Tensor<float> augment(const Tensor<float>&, Rng&);
template Tensor<double> augment(const Tensor<double>&, Rng&);

}  // namespace nodedrop

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nodedrop/rng.hpp"
#include "nodedrop/tensor.hpp"

namespace nodedrop {

// Images are N x C x H x W with every pixel in [0, 1].
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  int num_classes = 10;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
};

// Checks pixel range and label range; throws FormatError.
void validate(const Dataset& ds);

// IDX: big-endian magic 0x00000803 (images, dims N, rows, cols) and
// 0x00000801 (labels, dim N), followed by unsigned bytes. Pixels are /255.
Dataset parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);
Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path);

// CIFAR-10 binary batches: 3073-byte records, 1 label byte then 3072 pixel
// bytes in channel-planar R, G, B order.
Dataset parse_cifar10(std::span<const std::uint8_t> bytes);
Dataset load_cifar10(const std::vector<std::filesystem::path>& batch_paths);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Copies the given samples into a batch tensor.
template <typename T>
Tensor<T> gather_images(const Dataset& ds, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices);

Dataset subset(const Dataset& ds, std::size_t first, std::size_t count);

// Shift one C x H x W image by (dy, dx) with zero fill, then optionally mirror
// it horizontally. A shift of (dy, dx) reads source pixel (y + dy, x + dx).
template <typename T>
void shift_flip(const T* src, T* dst, std::size_t c, std::size_t h, std::size_t w, int dy,
                int dx, bool flip);

// Per image: pad 4 zeros on each side, take a random crop of the original
// size and mirror horizontally with probability 0.5.
template <typename T>
Tensor<T> augment(const Tensor<T>& batch, Rng& rng);

enum class BatchMode { train, eval };

// Index lists for one pass over `n` samples. Train mode drops the short final
// batch so every training batch has exactly `batch_size` samples.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 bool shuffle, Rng& rng,
                                                 BatchMode mode = BatchMode::train);

}  // namespace nodedrop

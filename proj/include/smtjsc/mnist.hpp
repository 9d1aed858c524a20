#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "smtjsc/network.hpp"

// IDX containers (plain or gzip) holding MNIST-style images and labels.
namespace smtjsc::mnist {

/// Parse failure; `offset` is the byte position in the (decompressed) stream.
class IdxError : public std::runtime_error {
 public:
  IdxError(const std::string& path, std::uint64_t offset, const std::string& what);
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

inline constexpr std::uint32_t kImageMagic = 0x00000803;
inline constexpr std::uint32_t kLabelMagic = 0x00000801;

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major
};

/// Reads an image file; .gz is detected from the content, not the name.
/// Throws IdxError on a missing file, wrong magic or a truncated body.
IdxImages read_images(const std::string& path);
std::vector<std::uint8_t> read_labels(const std::string& path);

/// Images scaled by 1/255 and zero-padded symmetrically to pad_to x pad_to
/// (no padding when pad_to equals the stored size). Throws IdxError when the
/// counts differ or a label exceeds 9, std::invalid_argument when pad_to is
/// smaller than the images.
net::LabeledImages load(const std::string& images_path, const std::string& labels_path, int pad_to = 32);

/// Standard file names under `dir` for the "train" or "t10k" split.
std::string images_file(const std::string& dir, const std::string& split);
std::string labels_file(const std::string& dir, const std::string& split);

}  // namespace smtjsc::mnist

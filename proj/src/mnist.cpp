#include "smtjsc/mnist.hpp"

#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <memory>

namespace smtjsc::mnist {

namespace {

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

// gzread passes plain files through unchanged.
class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), file_(gzopen(path.c_str(), "rb"), &gzclose) {
    if (!std::filesystem::exists(path) || !file_) throw IdxError(path, 0, "cannot open file");
  }

  void read(void* out, std::size_t n, const char* what) {
    std::size_t got = 0;
    auto* p = static_cast<unsigned char*>(out);
    while (got < n) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n - got, 1u << 30));
      const int r = gzread(file_.get(), p + got, chunk);
      if (r < 0) {
        int err = 0;
        throw IdxError(path_, offset_ + got, std::string("decompression failed: ") + gzerror(file_.get(), &err));
      }
      if (r == 0) {
        throw IdxError(path_, offset_ + got,
                       std::string("truncated ") + what + ": expected " + std::to_string(n) + " bytes, found " +
                           std::to_string(got));
      }
      got += static_cast<std::size_t>(r);
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
  }

  std::uint64_t offset() const noexcept { return offset_; }
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
  std::unique_ptr<gzFile_s, int (*)(gzFile)> file_;
  std::uint64_t offset_ = 0;
};

void expect_magic(Reader& r, std::uint32_t expected) {
  const std::uint32_t found = r.u32("header");
  if (found != expected) throw IdxError(r.path(), 0, "bad magic: expected " + hex32(expected) + ", found " + hex32(found));
}

}  // namespace

IdxError::IdxError(const std::string& path, std::uint64_t offset, const std::string& what)
    : std::runtime_error(path + ": byte " + std::to_string(offset) + ": " + what), offset_(offset) {}

IdxImages read_images(const std::string& path) {
  Reader r(path);
  expect_magic(r, kImageMagic);
  IdxImages im;
  im.count = r.u32("header");
  const std::uint64_t dims_at = r.offset();
  im.rows = r.u32("header");
  im.cols = r.u32("header");
  if (im.rows == 0 || im.cols == 0 || im.rows > 4096 || im.cols > 4096) {
    throw IdxError(path, dims_at,
                   "implausible image size " + std::to_string(im.rows) + "x" + std::to_string(im.cols));
  }
  im.pixels.resize(static_cast<std::size_t>(im.count) * im.rows * im.cols);
  r.read(im.pixels.data(), im.pixels.size(), "image data");
  return im;
}

std::vector<std::uint8_t> read_labels(const std::string& path) {
  Reader r(path);
  expect_magic(r, kLabelMagic);
  const std::uint32_t count = r.u32("header");
  std::vector<std::uint8_t> labels(count);
  r.read(labels.data(), labels.size(), "label data");
  return labels;
}

net::LabeledImages load(const std::string& images_path, const std::string& labels_path, int pad_to) {
  const IdxImages im = read_images(images_path);
  const auto labels = read_labels(labels_path);
  if (labels.size() != im.count) {
    throw IdxError(labels_path, 4,
                   std::to_string(labels.size()) + " labels for " + std::to_string(im.count) + " images");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 9) throw IdxError(labels_path, 8 + i, "label " + std::to_string(labels[i]) + " is not a digit");
  }
  const int rows = static_cast<int>(im.rows), cols = static_cast<int>(im.cols);
  if (pad_to < rows || pad_to < cols) {
    throw std::invalid_argument("cannot pad " + std::to_string(rows) + "x" + std::to_string(cols) + " images to " +
                                std::to_string(pad_to));
  }
  net::LabeledImages out;
  out.shape = {1, pad_to, pad_to};
  out.labels = labels;
  out.pixels.assign(static_cast<std::size_t>(im.count) * out.shape.size(), 0.0);
  const int top = (pad_to - rows) / 2, left = (pad_to - cols) / 2;
  for (std::size_t i = 0; i < im.count; ++i) {
    const std::uint8_t* src = &im.pixels[i * im.rows * im.cols];
    double* dst = &out.pixels[i * out.shape.size()];
    for (int y = 0; y < rows; ++y) {
      for (int x = 0; x < cols; ++x) dst[(y + top) * pad_to + x + left] = src[y * cols + x] / 255.0;
    }
  }
  return out;
}

std::string images_file(const std::string& dir, const std::string& split) {
  const auto base = std::filesystem::path(dir) / (split + "-images-idx3-ubyte");
  if (std::filesystem::exists(base)) return base.string();
  return base.string() + ".gz";
}

std::string labels_file(const std::string& dir, const std::string& split) {
  const auto base = std::filesystem::path(dir) / (split + "-labels-idx1-ubyte");
  if (std::filesystem::exists(base)) return base.string();
  return base.string() + ".gz";
}

}  // namespace smtjsc::mnist

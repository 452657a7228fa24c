#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "gfv/error.hpp"
#include "gfv/imaging.hpp"

namespace gfv {

inline bool is_supported_raster(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff";
}

/// Loads an 8-bit grayscale or colour raster. Colour is collapsed with
/// luma weights 0.299 R + 0.587 G + 0.114 B; alpha is ignored.
inline GrayImage load_grayscale(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) fail(ErrorCode::FileNotFound, path.string());
  if (!is_supported_raster(path)) fail(ErrorCode::UnsupportedFormat, path.string());

  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) fail(ErrorCode::CorruptImage, path.string());
  if (m.depth() != CV_8U) fail(ErrorCode::UnsupportedFormat, path.string() + " is not 8-bit");
  const int ch = m.channels();
  if (ch != 1 && ch != 3 && ch != 4) fail(ErrorCode::UnsupportedFormat, path.string() + " has unsupported channel count");

  std::vector<double> px(static_cast<std::size_t>(m.rows) * static_cast<std::size_t>(m.cols));
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < m.cols; ++x) {
      double v = 0.0;
      if (ch == 1) {
        v = row[x] / 255.0;
      } else {
        // OpenCV stores colour as BGR(A).
        const unsigned char* p = row + static_cast<std::ptrdiff_t>(x) * ch;
        v = (0.299 * p[2] + 0.587 * p[1] + 0.114 * p[0]) / 255.0;
      }
      px[static_cast<std::size_t>(y) * static_cast<std::size_t>(m.cols) + static_cast<std::size_t>(x)] =
          std::clamp(v, 0.0, 1.0);
    }
  }
  return GrayImage(m.cols, m.rows, std::move(px));
}

inline unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes an 8-bit single-channel PNG. Same pixels give the same bytes.
inline void save_png(const GrayImage& img, const std::filesystem::path& path) {
  cv::Mat m(img.height(), img.width(), CV_8UC1);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < img.width(); ++x) row[x] = quantize(img.at(x, y));
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m, params);
  } catch (const cv::Exception& e) {
    fail(ErrorCode::IoError, path.string() + ": " + e.what());
  }
  if (!ok) fail(ErrorCode::IoError, "could not write " + path.string());
}

}  // namespace gfv

// SPDX-License-Identifier: Apache-2.0

#include "dqa/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dqa/error.hpp"
#include "dqa/random.hpp"

namespace dqa {

Shape Dataset::sample_shape() const {
  return Shape(features.shape().begin() + 1, features.shape().end());
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t d = feature_count();
  Shape shape = features.shape();
  shape[0] = indices.size();
  std::vector<double> out(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = features.data().subspan(indices[i] * d, d);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return Tensor(std::move(shape), std::move(out));
}

std::vector<std::size_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
  return out;
}

void Dataset::validate() const {
  if (labels.empty()) throw ValidationError("dataset is empty");
  if (features.rank() < 2 || features.dim(0) != labels.size())
    throw DimensionError("dataset has " + std::to_string(labels.size()) + " labels for features " +
                         shape_str(features.shape()));
  for (auto l : labels)
    if (l >= classes)
      throw ValidationError("label " + std::to_string(l) + " outside [0, " +
                            std::to_string(classes) + ")");
}

std::string to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::TwoMoons: return "two_moons";
    case SyntheticKind::Blobs: return "blobs";
    case SyntheticKind::XorRings: return "xor_rings";
  }
  return "?";
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "two_moons") return SyntheticKind::TwoMoons;
  if (name == "blobs") return SyntheticKind::Blobs;
  if (name == "xor_rings") return SyntheticKind::XorRings;
  throw ValidationError("unknown synthetic dataset '" + name + "'");
}

DatasetSplit gen_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed) {
  if (n < 4) throw ValidationError("synthetic dataset needs n >= 4");
  if (!(noise >= 0.0)) throw ValidationError("noise must be non-negative");
  Rng rng(stream_seed(seed, 0xda7a));
  Dataset all;
  all.features = Tensor({n, 2});
  all.labels.resize(n);
  all.classes = 2;
  const std::size_t first = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i < first ? 0 : 1;
    double x = 0.0, y = 0.0;
    switch (kind) {
      case SyntheticKind::TwoMoons: {
        const double t = std::numbers::pi * rng.uniform();
        if (label == 0) {
          x = std::cos(t);
          y = std::sin(t);
        } else {
          x = 1.0 - std::cos(t);
          y = 0.5 - std::sin(t);
        }
        x += noise * rng.normal();
        y += noise * rng.normal();
        break;
      }
      case SyntheticKind::Blobs: {
        x = (label == 0 ? -2.0 : 2.0) + noise * rng.normal();
        y = noise * rng.normal();
        break;
      }
      case SyntheticKind::XorRings: {
        const double t = 2.0 * std::numbers::pi * rng.uniform();
        const double r = (label == 0 ? 1.0 : 2.0) + noise * rng.normal();
        x = r * std::cos(t);
        y = r * std::sin(t);
        break;
      }
    }
    all.features.at(i, 0) = x;
    all.features.at(i, 1) = y;
    all.labels[i] = label;
  }
  auto out = split_dataset(all, 0.2, seed);
  standardize(out);
  return out;
}

DatasetSplit split_dataset(const Dataset& all, double val_fraction, std::uint64_t seed) {
  all.validate();
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ValidationError("validation fraction must be in (0, 1)");
  const std::size_t n = all.size();
  const std::size_t n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
  if (n_val >= n) throw ValidationError("dataset too small to split");
  Rng rng(stream_seed(seed, 0x5b11));
  const auto perm = rng.permutation(n);
  std::vector<std::size_t> train_idx(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> val_idx(perm.end() - static_cast<std::ptrdiff_t>(n_val), perm.end());
  DatasetSplit out;
  out.train = {all.batch(train_idx), all.batch_labels(train_idx), all.classes, Split::Train, {}};
  out.val = {all.batch(val_idx), all.batch_labels(val_idx), all.classes, Split::Val, {}};
  return out;
}

NormStats compute_stats(const Dataset& train) {
  if (train.split != Split::Train)
    throw ValidationError("normalization statistics must come from the train split");
  const std::size_t n = train.size(), d = train.feature_count();
  NormStats s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0), Split::Train};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += train.features[i * d + j];
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double e = train.features[i * d + j] - s.mean[j];
      s.sd[j] += e * e;
    }
  for (auto& v : s.sd) {
    v = std::sqrt(v / static_cast<double>(n));
    if (v < 1e-12) v = 1.0;
  }
  return s;
}

void apply_stats(Dataset& data, const NormStats& stats) {
  if (stats.source != Split::Train)
    throw ValidationError("refusing statistics not computed on the train split");
  const std::size_t n = data.size(), d = data.feature_count();
  if (stats.mean.size() != d) throw DimensionError("normalization statistics have wrong width");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      auto& v = data.features[i * d + j];
      v = (v - stats.mean[j]) / stats.sd[j];
    }
  data.stats = stats;
}

void standardize(DatasetSplit& data) {
  const auto stats = compute_stats(data.train);
  apply_stats(data.train, stats);
  apply_stats(data.val, stats);
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::string& field, const std::filesystem::path& path) {
  if (offset + 4 > buf.size())
    throw FormatError(path.string() + ": truncated before field '" + field + "'");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  const auto img_magic = read_be32(img, 0, "magic", images);
  if (img_magic != 0x00000803)
    throw FormatError(images.string() + ": field 'magic' is " + std::to_string(img_magic) +
                      ", expected 2051 (0x00000803)");
  const auto lab_magic = read_be32(lab, 0, "magic", labels);
  if (lab_magic != 0x00000801)
    throw FormatError(labels.string() + ": field 'magic' is " + std::to_string(lab_magic) +
                      ", expected 2049 (0x00000801)");
  const std::size_t n = read_be32(img, 4, "count", images);
  const std::size_t rows = read_be32(img, 8, "rows", images);
  const std::size_t cols = read_be32(img, 12, "cols", images);
  const std::size_t n_labels = read_be32(lab, 4, "count", labels);
  if (n_labels != n)
    throw FormatError(labels.string() + ": field 'count' is " + std::to_string(n_labels) +
                      " but the image file holds " + std::to_string(n));
  if (n == 0 || rows == 0 || cols == 0)
    throw FormatError(images.string() + ": zero-sized field 'count', 'rows' or 'cols'");
  if (img.size() != 16 + n * rows * cols)
    throw FormatError(images.string() + ": pixel data is " + std::to_string(img.size() - 16) +
                      " bytes, header promises " + std::to_string(n * rows * cols));
  if (lab.size() != 8 + n)
    throw FormatError(labels.string() + ": label data is " + std::to_string(lab.size() - 8) +
                      " bytes, header promises " + std::to_string(n));
  Dataset d;
  d.features = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.features[i] = img[16 + i] / 255.0;
  d.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = max_label + 1;
  return d;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header row");
  const auto header = split_csv(line);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end())
    throw ValidationError(path.string() + ": no label column named '" + label_column + "'");
  const std::size_t label_pos = static_cast<std::size_t>(label_it - header.begin());
  const std::size_t d = header.size() - 1;
  if (d == 0) throw FormatError(path.string() + ": no feature columns");

  std::vector<double> features;
  std::vector<std::size_t> labels;
  std::size_t row = 1;
  std::size_t max_label = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw FormatError(path.string() + ": row " + std::to_string(row) + " has " +
                        std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(header.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto& cell = cells[c];
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      if (c == label_pos) {
        std::size_t v = 0;
        auto [p, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || p != last || cell.empty())
          throw FormatError(path.string() + ": row " + std::to_string(row) + ", column '" +
                            header[c] + "': label '" + cell + "' is not a non-negative integer");
        labels.push_back(v);
        max_label = std::max(max_label, v);
      } else {
        double v = 0.0;
        auto [p, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || p != last || cell.empty())
          throw FormatError(path.string() + ": row " + std::to_string(row) + ", column '" +
                            header[c] + "': '" + cell + "' is not numeric");
        features.push_back(v);
      }
    }
  }
  if (labels.empty()) throw FormatError(path.string() + ": no data rows");
  Dataset out;
  const std::size_t n = labels.size();
  out.features = Tensor({n, d}, std::move(features));
  out.labels = std::move(labels);
  out.classes = max_label + 1;
  return out;
}

void save_csv(const Dataset& data, const std::filesystem::path& path, const std::string& label_column) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  const std::size_t d = data.feature_count();
  for (std::size_t j = 0; j < d; ++j) out << 'f' << j << ',';
  out << label_column << '\n';
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", data.features[i * d + j]);
      out << buf << ',';
    }
    out << data.labels[i] << '\n';
  }
}

}  // namespace dqa

// SPDX-License-Identifier: Apache-2.0

#include "dqa/persistence.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dqa/error.hpp"

namespace dqa {

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw std::runtime_error("cannot open " + tmp + ": " + std::strerror(errno));
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      ::close(fd);
      throw std::runtime_error("write failed on " + tmp + ": " + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0)
    throw std::runtime_error("cannot flush " + tmp + ": " + std::strerror(errno));
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* magic) { buf_.insert(buf_.end(), magic, magic + 4); }
  void doubles(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void shape(const Shape& s) {
    u64(s.size());
    for (auto d : s) u64(d);
  }
  void tensor(const Tensor& t) {
    shape(t.shape());
    for (double x : t.data()) f64(x);
  }
  void spec(const QuantizerSpec& q) {
    u8(static_cast<std::uint8_t>(q.kind));
    u32(static_cast<std::uint32_t>(q.bits));
    u8(q.calibration ? 1 : 0);
    const Calibration c = q.calibration.value_or(Calibration{});
    f64(c.low);
    f64(c.high);
    f64(c.beta);
    f64(c.delta);
  }
  std::vector<unsigned char> finish() {
    const auto crc = crc32(buf_);
    u32(crc);
    return std::move(buf_);
  }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  Reader(std::vector<unsigned char> bytes, std::string name, const char* magic, std::uint8_t version)
      : buf_(std::move(bytes)), name_(std::move(name)) {
    if (buf_.size() < 9 || std::memcmp(buf_.data(), magic, 4) != 0)
      throw LoadError(name_ + ": not a " + std::string(magic, 4) + " file (bad magic)");
    const std::uint32_t stored = static_cast<std::uint32_t>(buf_[buf_.size() - 4]) |
                                 static_cast<std::uint32_t>(buf_[buf_.size() - 3]) << 8 |
                                 static_cast<std::uint32_t>(buf_[buf_.size() - 2]) << 16 |
                                 static_cast<std::uint32_t>(buf_[buf_.size() - 1]) << 24;
    end_ = buf_.size() - 4;
    if (crc32(std::span(buf_.data(), end_)) != stored) throw LoadError(name_ + ": checksum mismatch");
    pos_ = 4;
    const auto v = u8();
    if (v != version)
      throw LoadError(name_ + ": format version " + std::to_string(v) + ", expected " +
                      std::to_string(version));
  }

  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = count(1);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    const auto n = count(8);
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  Shape shape() {
    const auto n = count(8);
    Shape s(n);
    for (auto& d : s) d = u64();
    return s;
  }
  Tensor tensor() {
    Shape s = shape();
    std::vector<double> data(shape_numel(s));
    need(8 * data.size());
    for (auto& x : data) x = f64();
    return Tensor(std::move(s), std::move(data));
  }
  QuantizerSpec spec() {
    QuantizerSpec q;
    const auto kind = u8();
    if (kind > 3) throw LoadError(name_ + ": unknown quantizer kind " + std::to_string(kind));
    q.kind = static_cast<QuantizerKind>(kind);
    q.bits = static_cast<int>(u32());
    const bool has = u8() != 0;
    Calibration c{f64(), f64(), f64(), f64()};
    if (has) q.calibration = c;
    return q;
  }
  /// Element count prefix, bounded by the bytes left.
  std::size_t count(std::size_t elem_bytes) {
    const auto n = u64();
    if (n > (end_ - pos_) / elem_bytes) throw FormatError(name_ + ": truncated payload");
    return static_cast<std::size_t>(n);
  }
  void need(std::size_t n) {
    if (pos_ + n > end_) throw FormatError(name_ + ": truncated payload");
  }
  void done() {
    if (pos_ != end_) throw FormatError(name_ + ": trailing bytes after payload");
  }

 private:
  std::vector<unsigned char> buf_;
  std::string name_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_layer_header(Writer& w, LayerKind kind, std::size_t in, std::size_t out, std::size_t kernel,
                        Activation act) {
  w.u8(static_cast<std::uint8_t>(kind));
  w.u64(in);
  w.u64(out);
  w.u64(kernel);
  w.u8(static_cast<std::uint8_t>(act));
}

template <typename L>
void read_layer_header(Reader& r, L& l) {
  const auto kind = r.u8();
  if (kind > 1) throw LoadError("unknown layer kind " + std::to_string(kind));
  l.kind = static_cast<LayerKind>(kind);
  l.in = r.u64();
  l.out = r.u64();
  l.kernel = r.u64();
  const auto act = r.u8();
  if (act > 1) throw LoadError("unknown activation " + std::to_string(act));
  l.activation = static_cast<Activation>(act);
}

void write_network(Writer& w, const Network& net) {
  w.shape(net.input_shape);
  w.u64(net.classes);
  w.f64(net.temperature);
  w.u32(static_cast<std::uint32_t>(net.sawb_grid));
  w.u64(net.layers.size());
  for (const auto& l : net.layers) {
    write_layer_header(w, l.kind, l.in, l.out, l.kernel, l.activation);
    w.tensor(l.weights);
    w.tensor(l.bias);
    w.u8(static_cast<std::uint8_t>(l.mode.index()));
    if (const auto* f = std::get_if<FixedQuantizer>(&l.mode)) {
      w.spec(f->spec);
    } else if (const auto* d = std::get_if<DqaMixture>(&l.mode)) {
      w.u64(d->specs.size());
      for (const auto& s : d->specs) w.spec(s);
      w.tensor(d->attention.alpha);
      w.doubles(d->attention.penalties);
      w.f64(d->attention.lambda);
      w.u64(d->attention.total_weights);
      w.u64(d->attention.bits.size());
      for (int b : d->attention.bits) w.u32(static_cast<std::uint32_t>(b));
      w.doubles(d->frozen_attention);
    } else if (const auto* br = std::get_if<BinaryRelax>(&l.mode)) {
      w.u64(br->specs.size());
      for (const auto& s : br->specs) w.spec(s);
      w.f64(br->omega);
    }
  }
}

Network read_network(Reader& r) {
  Network net;
  net.input_shape = r.shape();
  net.classes = r.u64();
  net.temperature = r.f64();
  net.sawb_grid = static_cast<int>(r.u32());
  const auto n = r.count(1);
  for (std::size_t i = 0; i < n; ++i) {
    QuantizedLayer l;
    read_layer_header(r, l);
    l.weights = r.tensor();
    l.bias = r.tensor();
    switch (r.u8()) {
      case 0: l.mode = FullPrecision{}; break;
      case 1: l.mode = FixedQuantizer{r.spec()}; break;
      case 2: {
        DqaMixture d;
        const auto k = r.count(1);
        for (std::size_t j = 0; j < k; ++j) d.specs.push_back(r.spec());
        d.attention.alpha = r.tensor();
        d.attention.penalties = r.doubles();
        d.attention.lambda = r.f64();
        d.attention.total_weights = r.u64();
        const auto nb = r.count(4);
        for (std::size_t j = 0; j < nb; ++j) d.attention.bits.push_back(static_cast<int>(r.u32()));
        d.frozen_attention = r.doubles();
        d.attention.validate();
        l.mode = std::move(d);
        break;
      }
      case 3: {
        BinaryRelax br;
        const auto k = r.count(1);
        for (std::size_t j = 0; j < k; ++j) br.specs.push_back(r.spec());
        br.omega = r.f64();
        l.mode = std::move(br);
        break;
      }
      default: throw LoadError("unknown weight mode");
    }
    net.layers.push_back(std::move(l));
  }
  return net;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  Writer w;
  w.raw("DQAC");
  w.u8(kCheckpointVersion);
  w.str(ck.config_text);
  w.u64(ck.seed);
  w.u64(static_cast<std::uint64_t>(ck.progress.epochs_done));
  w.u64(ck.progress.batches_done);
  w.f64(ck.progress.sgd.lr);
  w.f64(ck.progress.sgd.momentum);
  w.u64(ck.progress.sgd.velocity.size());
  for (const auto& v : ck.progress.sgd.velocity) w.tensor(v);
  write_network(w, ck.network);
  const auto bytes = w.finish();
  write_file_atomic(path, bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(slurp(path), path.string(), "DQAC", kCheckpointVersion);
  Checkpoint ck;
  ck.config_text = r.str();
  ck.seed = r.u64();
  ck.progress.epochs_done = static_cast<int>(r.u64());
  ck.progress.batches_done = r.u64();
  ck.progress.sgd.lr = r.f64();
  ck.progress.sgd.momentum = r.f64();
  const auto nv = r.count(8);
  for (std::size_t i = 0; i < nv; ++i) ck.progress.sgd.velocity.push_back(r.tensor());
  ck.network = read_network(r);
  r.done();
  return ck;
}

void save_model(const HardModel& model, const std::filesystem::path& path) {
  Writer w;
  w.raw("DQAM");
  w.u8(kModelVersion);
  w.shape(model.input_shape);
  w.u64(model.classes);
  w.u64(model.layers.size());
  for (const auto& l : model.layers) {
    write_layer_header(w, l.kind, l.in, l.out, l.kernel, l.activation);
    w.shape(l.weight_shape);
    w.u8(l.quantized ? 1 : 0);
    if (l.quantized) {
      w.spec(l.spec);
      w.doubles(l.levels);
      const std::size_t width = (static_cast<std::size_t>(l.spec.bits) + 7) / 8;
      w.u64(l.codes.size());
      w.u8(static_cast<std::uint8_t>(width));
      for (auto code : l.codes)
        for (std::size_t b = 0; b < width; ++b) w.u8(static_cast<std::uint8_t>(code >> (8 * b)));
    } else {
      w.doubles(l.raw_weights);
    }
    w.tensor(l.bias);
  }
  write_file_atomic(path, w.finish());
}

HardModel load_model(const std::filesystem::path& path) {
  Reader r(slurp(path), path.string(), "DQAM", kModelVersion);
  HardModel m;
  m.input_shape = r.shape();
  m.classes = r.u64();
  const auto n = r.count(1);
  for (std::size_t i = 0; i < n; ++i) {
    HardLayer l;
    read_layer_header(r, l);
    l.weight_shape = r.shape();
    l.quantized = r.u8() != 0;
    if (l.quantized) {
      l.spec = r.spec();
      l.levels = r.doubles();
      const auto count = r.count(1);
      const std::size_t width = r.u8();
      if (width != (static_cast<std::size_t>(l.spec.bits) + 7) / 8)
        throw LoadError(path.string() + ": code width disagrees with bitwidth");
      r.need(count * width);
      l.codes.resize(count);
      for (auto& code : l.codes) {
        std::uint32_t v = 0;
        for (std::size_t b = 0; b < width; ++b) v |= static_cast<std::uint32_t>(r.u8()) << (8 * b);
        if (v >= l.levels.size()) throw LoadError(path.string() + ": code outside level table");
        code = v;
      }
    } else {
      l.raw_weights = r.doubles();
    }
    l.bias = r.tensor();
    m.layers.push_back(std::move(l));
  }
  r.done();
  return m;
}

namespace {

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (!cells.empty() && !cells.back().empty() && cells.back().back() == '\r') cells.back().pop_back();
  return cells;
}

template <typename T>
T parse_cell(const std::string& cell, const std::string& file, std::size_t row, const std::string& col) {
  T v{};
  auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (cell.empty() || ec != std::errc() || p != cell.data() + cell.size())
    throw FormatError(file + ": row " + std::to_string(row) + ", column '" + col + "': bad value '" +
                      cell + "'");
  return v;
}

std::ofstream open_out(const std::filesystem::path& path, bool append) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

std::string metrics_header(std::size_t k) {
  std::string h = "epoch,batch,loss,reg,train_acc,val_acc,temperature,layer";
  for (std::size_t i = 1; i <= k; ++i) h += ",a_" + std::to_string(i);
  return h + ",argmax_k,omega";
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRecord> records,
                       bool append) {
  std::size_t k = 0;
  for (const auto& r : records)
    for (const auto& a : r.attention) k = std::max(k, a.size());
  const bool fresh = !append || !std::filesystem::exists(path);
  auto out = open_out(path, !fresh);
  if (fresh) out << metrics_header(k) << '\n';
  for (const auto& r : records) {
    const bool any_attention = std::any_of(r.attention.begin(), r.attention.end(),
                                           [](const auto& a) { return !a.empty(); });
    for (std::size_t layer = 0; layer < r.attention.size(); ++layer) {
      const auto& a = r.attention[layer];
      out << r.epoch << ',' << r.batch << ',' << g9(r.loss) << ',' << g9(r.reg) << ','
          << g9(r.train_acc) << ',' << g9(r.val_acc) << ',';
      if (any_attention) out << g9(r.temperature);
      out << ',' << layer;
      for (std::size_t i = 0; i < k; ++i) {
        out << ',';
        if (i < a.size()) out << g9(a[i]);
      }
      out << ',';
      if (!a.empty()) out << r.argmax[layer];
      out << ',';
      if (r.omega) out << g9(*r.omega);
      out << '\n';
    }
  }
}

MetricsTable read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty metrics file");
  const auto header = split_row(line);
  const std::vector<std::string> lead{"epoch", "batch", "loss", "reg", "train_acc", "val_acc",
                                      "temperature", "layer"};
  if (header.size() < lead.size() + 2 || !std::equal(lead.begin(), lead.end(), header.begin()) ||
      header[header.size() - 2] != "argmax_k" || header.back() != "omega")
    throw FormatError(path.string() + ": header does not match the metrics schema");
  MetricsTable t;
  t.k = header.size() - lead.size() - 2;
  for (std::size_t i = 0; i < t.k; ++i)
    if (header[lead.size() + i] != "a_" + std::to_string(i + 1))
      throw FormatError(path.string() + ": unexpected column '" + header[lead.size() + i] + "'");
  const auto file = path.string();
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto c = split_row(line);
    if (c.size() != header.size())
      throw FormatError(file + ": row " + std::to_string(row) + " has " + std::to_string(c.size()) +
                        " cells, header has " + std::to_string(header.size()));
    MetricsRow m;
    m.epoch = parse_cell<int>(c[0], file, row, "epoch");
    m.batch = parse_cell<std::uint64_t>(c[1], file, row, "batch");
    m.loss = parse_cell<double>(c[2], file, row, "loss");
    m.reg = parse_cell<double>(c[3], file, row, "reg");
    m.train_acc = parse_cell<double>(c[4], file, row, "train_acc");
    m.val_acc = parse_cell<double>(c[5], file, row, "val_acc");
    if (!c[6].empty()) m.temperature = parse_cell<double>(c[6], file, row, "temperature");
    m.layer = parse_cell<std::size_t>(c[7], file, row, "layer");
    for (std::size_t i = 0; i < t.k; ++i) {
      const auto& cell = c[lead.size() + i];
      if (!cell.empty()) m.attention.push_back(parse_cell<double>(cell, file, row, header[lead.size() + i]));
    }
    const auto& am = c[header.size() - 2];
    if (!am.empty()) m.argmax = parse_cell<int>(am, file, row, "argmax_k");
    if (!c.back().empty()) m.omega = parse_cell<double>(c.back(), file, row, "omega");
    t.rows.push_back(std::move(m));
  }
  return t;
}

void write_calibration_csv(const std::filesystem::path& path, std::span<const CalibrationRecord> records,
                           bool append) {
  const bool fresh = !append || !std::filesystem::exists(path);
  auto out = open_out(path, !fresh);
  if (fresh) out << "epoch,layer,k,quantizer,low,high,beta,delta,weight,w_min,w_max\n";
  for (const auto& r : records) {
    const auto c = r.spec.calibration.value_or(Calibration{});
    out << r.epoch << ',' << r.layer << ',' << r.index << ',' << r.spec.label() << ',' << g17(c.low)
        << ',' << g17(c.high) << ',' << g17(c.beta) << ',' << g17(c.delta) << ',' << g17(r.weight)
        << ',' << g17(r.w_min) << ',' << g17(r.w_max) << '\n';
  }
}

std::vector<CalibrationRecord> read_calibration_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("epoch,layer,k,quantizer,", 0) != 0)
    throw FormatError(path.string() + ": not a calibration file");
  const auto file = path.string();
  std::vector<CalibrationRecord> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto c = split_row(line);
    if (c.size() != 11) throw FormatError(file + ": row " + std::to_string(row) + " has wrong width");
    CalibrationRecord r;
    r.epoch = parse_cell<int>(c[0], file, row, "epoch");
    r.layer = parse_cell<std::size_t>(c[1], file, row, "layer");
    r.index = parse_cell<std::size_t>(c[2], file, row, "k");
    r.spec = QuantizerSpec::parse(c[3]);
    r.spec.calibration = Calibration{parse_cell<double>(c[4], file, row, "low"),
                                     parse_cell<double>(c[5], file, row, "high"),
                                     parse_cell<double>(c[6], file, row, "beta"),
                                     parse_cell<double>(c[7], file, row, "delta")};
    r.weight = parse_cell<double>(c[8], file, row, "weight");
    r.w_min = parse_cell<double>(c[9], file, row, "w_min");
    r.w_max = parse_cell<double>(c[10], file, row, "w_max");
    out.push_back(r);
  }
  return out;
}

void write_summary(const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, std::string>>& entries) {
  std::string text;
  for (const auto& [k, v] : entries) text += k + " = " + v + "\n";
  write_text_atomic(path, text);
}

std::map<std::string, std::string> read_summary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

}  // namespace dqa

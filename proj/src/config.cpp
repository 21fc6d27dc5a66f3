// SPDX-License-Identifier: Apache-2.0

#include "dqa/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>

#include "dqa/error.hpp"
#include "dqa/random.hpp"

namespace dqa {

namespace {

using Problem = std::optional<std::string>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [p, ec] = std::from_chars(first, last, out);
  return !s.empty() && ec == std::errc() && p == last;
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += f(v[i]);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<Problem(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

Problem type_error(const std::string& key, const std::string& value, const char* expected) {
  return key + ": '" + value + "' is not " + expected;
}

#define DQA_FIELD_UINT(KEY, EXPR)                                                   \
  Field {                                                                           \
    KEY,                                                                            \
        [](ExperimentConfig& c, const std::string& v) -> Problem {                  \
          std::uint64_t x = 0;                                                      \
          if (!parse_number(v, x)) return type_error(KEY, v, "a non-negative integer"); \
          c.EXPR = static_cast<decltype(c.EXPR)>(x);                                \
          return std::nullopt;                                                      \
        },                                                                          \
        [](const ExperimentConfig& c) { return std::to_string(c.EXPR); }            \
  }

#define DQA_FIELD_INT(KEY, EXPR)                                                    \
  Field {                                                                           \
    KEY,                                                                            \
        [](ExperimentConfig& c, const std::string& v) -> Problem {                  \
          long long x = 0;                                                          \
          if (!parse_number(v, x)) return type_error(KEY, v, "an integer");         \
          c.EXPR = static_cast<decltype(c.EXPR)>(x);                                \
          return std::nullopt;                                                      \
        },                                                                          \
        [](const ExperimentConfig& c) { return std::to_string(c.EXPR); }            \
  }

#define DQA_FIELD_DOUBLE(KEY, EXPR)                                                 \
  Field {                                                                           \
    KEY,                                                                            \
        [](ExperimentConfig& c, const std::string& v) -> Problem {                  \
          double x = 0;                                                             \
          if (!parse_number(v, x)) return type_error(KEY, v, "a number");           \
          c.EXPR = x;                                                               \
          return std::nullopt;                                                      \
        },                                                                          \
        [](const ExperimentConfig& c) { return format_double(c.EXPR); }             \
  }

#define DQA_FIELD_STRING(KEY, EXPR)                                                 \
  Field {                                                                           \
    KEY,                                                                            \
        [](ExperimentConfig& c, const std::string& v) -> Problem {                  \
          c.EXPR = v;                                                               \
          return std::nullopt;                                                      \
        },                                                                          \
        [](const ExperimentConfig& c) { return c.EXPR; }                            \
  }

Problem parse_size_list(const std::string& key, const std::string& v, std::vector<std::size_t>& out) {
  out.clear();
  for (const auto& item : split_list(v)) {
    std::size_t x = 0;
    if (!parse_number(item, x) || x == 0) return type_error(key, item, "a positive integer");
    out.push_back(x);
  }
  return std::nullopt;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      DQA_FIELD_STRING("name", name),
      Field{"seed",
            [](ExperimentConfig& c, const std::string& v) -> Problem {
              std::uint64_t x = 0;
              if (!parse_number(v, x)) return type_error("seed", v, "an unsigned 64-bit integer");
              c.seed = x;
              c.train.seed = x;
              return std::nullopt;
            },
            [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      DQA_FIELD_STRING("output.dir", output_dir),
      DQA_FIELD_STRING("data.kind", data.kind),
      DQA_FIELD_UINT("data.n", data.n),
      DQA_FIELD_DOUBLE("data.noise", data.noise),
      DQA_FIELD_STRING("data.images", data.images),
      DQA_FIELD_STRING("data.labels", data.labels),
      DQA_FIELD_STRING("data.path", data.path),
      DQA_FIELD_STRING("data.label_column", data.label_column),
      DQA_FIELD_DOUBLE("data.val_fraction", data.val_fraction),
      Field{"model.hidden",
            [](ExperimentConfig& c, const std::string& v) {
              return parse_size_list("model.hidden", v, c.model.hidden);
            },
            [](const ExperimentConfig& c) {
              return join<std::size_t>(c.model.hidden, [](const std::size_t& x) { return std::to_string(x); });
            }},
      Field{"model.conv_channels",
            [](ExperimentConfig& c, const std::string& v) {
              return parse_size_list("model.conv_channels", v, c.model.conv_channels);
            },
            [](const ExperimentConfig& c) {
              return join<std::size_t>(c.model.conv_channels,
                                       [](const std::size_t& x) { return std::to_string(x); });
            }},
      DQA_FIELD_UINT("model.conv_kernel", model.conv_kernel),
      Field{"model.exempt_first_last",
            [](ExperimentConfig& c, const std::string& v) -> Problem {
              if (v == "true") c.model.exempt_first_last = true;
              else if (v == "false") c.model.exempt_first_last = false;
              else return type_error("model.exempt_first_last", v, "true or false");
              return std::nullopt;
            },
            [](const ExperimentConfig& c) { return std::string(c.model.exempt_first_last ? "true" : "false"); }},
      Field{"quantizers.list",
            [](ExperimentConfig& c, const std::string& v) -> Problem {
              c.quantizers.list.clear();
              for (const auto& item : split_list(v)) {
                try {
                  c.quantizers.list.push_back(QuantizerSpec::parse(item));
                } catch (const std::exception& e) {
                  return std::string("quantizers.list: ") + e.what();
                }
              }
              return std::nullopt;
            },
            [](const ExperimentConfig& c) {
              return join<QuantizerSpec>(c.quantizers.list, [](const QuantizerSpec& q) { return q.label(); });
            }},
      Field{"quantizers.penalties",
            [](ExperimentConfig& c, const std::string& v) -> Problem {
              c.quantizers.penalties.clear();
              for (const auto& item : split_list(v)) {
                double x = 0;
                if (!parse_number(item, x)) return type_error("quantizers.penalties", item, "a number");
                c.quantizers.penalties.push_back(x);
              }
              return std::nullopt;
            },
            [](const ExperimentConfig& c) {
              return join<double>(c.quantizers.penalties, [](const double& x) { return format_double(x); });
            }},
      DQA_FIELD_INT("quantizers.sawb_grid", quantizers.sawb_grid),
      Field{"train.method",
            [](ExperimentConfig& c, const std::string& v) -> Problem {
              try {
                c.train.method = parse_method(v);
              } catch (const std::exception& e) {
                return std::string("train.method: ") + e.what();
              }
              return std::nullopt;
            },
            [](const ExperimentConfig& c) { return to_string(c.train.method); }},
      DQA_FIELD_INT("train.epochs", train.epochs),
      DQA_FIELD_INT("train.batch_size", train.batch_size),
      DQA_FIELD_DOUBLE("train.lr", train.lr.initial),
      DQA_FIELD_DOUBLE("train.lr_drop", train.lr.drop),
      DQA_FIELD_INT("train.lr_period", train.lr.period),
      DQA_FIELD_DOUBLE("train.momentum", train.momentum),
      DQA_FIELD_DOUBLE("train.lambda", train.lambda),
      DQA_FIELD_DOUBLE("train.t_initial", train.t_initial),
      DQA_FIELD_DOUBLE("train.t_final", train.t_final),
      DQA_FIELD_INT("train.log_every", train.log_every),
  };
  return table;
}

#undef DQA_FIELD_UINT
#undef DQA_FIELD_INT
#undef DQA_FIELD_DOUBLE
#undef DQA_FIELD_STRING

void check(std::vector<std::string>& problems, bool ok, std::string message) {
  if (!ok) problems.push_back(std::move(message));
}

}  // namespace

std::vector<double> ExperimentConfig::effective_penalties() const {
  return quantizers.penalties.empty() ? default_penalties(quantizers.list.size()) : quantizers.penalties;
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  return serialize_config(*this) == serialize_config(o);
}

void validate_config(const ExperimentConfig& c) {
  std::vector<std::string> p;
  const auto& d = c.data;
  const bool synthetic = d.kind == "two_moons" || d.kind == "blobs" || d.kind == "xor_rings";
  check(p, synthetic || d.kind == "idx" || d.kind == "csv",
        "data.kind: unknown dataset '" + d.kind + "'");
  if (synthetic) {
    check(p, d.n >= 4, "data.n: need at least 4 samples");
    check(p, d.noise >= 0.0, "data.noise: must be non-negative");
  }
  if (d.kind == "idx") check(p, !d.images.empty() && !d.labels.empty(), "data: idx needs data.images and data.labels");
  if (d.kind == "csv") check(p, !d.path.empty(), "data.path: csv needs a path");
  check(p, d.val_fraction > 0.0 && d.val_fraction < 1.0, "data.val_fraction: must be in (0, 1)");
  check(p, !c.model.conv_channels.size() || c.model.conv_kernel >= 1, "model.conv_kernel: must be positive");

  const auto& q = c.quantizers.list;
  for (std::size_t k = 1; k < q.size(); ++k)
    if (q[k].bits <= q[k - 1].bits) {
      p.push_back("quantizers.list: bitwidths must be strictly ascending, got " +
                  join<QuantizerSpec>(q, [](const QuantizerSpec& s) { return s.label(); }));
      break;
    }
  if (!c.quantizers.penalties.empty()) {
    check(p, c.quantizers.penalties.size() == q.size(),
          "quantizers.penalties: " + std::to_string(c.quantizers.penalties.size()) + " values for " +
              std::to_string(q.size()) + " quantizers");
    for (double g : c.quantizers.penalties) check(p, g >= 0.0, "quantizers.penalties: must be non-negative");
  }
  check(p, c.quantizers.sawb_grid >= 2, "quantizers.sawb_grid: need at least 2 grid points");
  if (c.train.method != Method::FullPrecision)
    check(p, !q.empty(), "quantizers.list: " + to_string(c.train.method) + " needs quantizers");
  if (c.train.method == Method::BinaryRelax)
    check(p, q.size() >= 2, "quantizers.list: br needs at least two quantizers");

  const auto& t = c.train;
  check(p, t.epochs >= 1, "train.epochs: must be positive");
  check(p, t.batch_size >= 1, "train.batch_size: must be positive");
  check(p, t.lr.initial > 0.0, "train.lr: must be positive");
  check(p, t.lr.drop > 0.0, "train.lr_drop: must be positive");
  check(p, t.lr.period >= 1, "train.lr_period: must be positive");
  check(p, t.momentum >= 0.0 && t.momentum < 1.0, "train.momentum: must be in [0, 1)");
  check(p, t.lambda >= 0.0, "train.lambda: must be non-negative");
  check(p, t.t_initial > 0.0 && t.t_final > 0.0, "train.t_initial/t_final: must be positive");
  check(p, t.t_final < t.t_initial, "train.t_final: must be below train.t_initial (cooling schedule)");
  check(p, t.log_every >= 1, "train.log_every: must be positive");
  if (!p.empty()) throw ConfigError(std::move(p));
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::vector<std::string> problems;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back("line " + std::to_string(lineno) + ": expected 'key = value'");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) {
      problems.push_back("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      continue;
    }
    if (std::find(seen.begin(), seen.end(), key) != seen.end())
      problems.push_back("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen.push_back(key);
    if (auto err = it->set(c, value)) problems.push_back("line " + std::to_string(lineno) + ": " + *err);
  }
  try {
    validate_config(c);
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file " + path.string()});
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize_config(const ExperimentConfig& c) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

DatasetSplit load_dataset(const ExperimentConfig& c) {
  const auto& d = c.data;
  if (d.kind == "idx" || d.kind == "csv") {
    Dataset all = d.kind == "idx" ? load_idx(d.images, d.labels) : load_csv(d.path, d.label_column);
    auto split = split_dataset(all, d.val_fraction, c.seed);
    standardize(split);
    return split;
  }
  return gen_synthetic(parse_synthetic_kind(d.kind), d.n, d.noise, c.seed);
}

Network build_network(const ExperimentConfig& c, const Shape& sample_shape, std::size_t classes) {
  Network net;
  net.input_shape = sample_shape;
  net.classes = classes;
  net.sawb_grid = c.quantizers.sawb_grid;
  Rng rng(stream_seed(c.seed, 0x1417));
  Shape cur = sample_shape;
  if (!c.model.conv_channels.empty() && cur.size() != 3)
    throw ConfigError({"model.conv_channels: convolution needs image input [C×H×W], got " + shape_str(cur)});
  for (std::size_t ch : c.model.conv_channels) {
    const std::size_t k = c.model.conv_kernel;
    if (cur[1] < k || cur[2] < k)
      throw ConfigError({"model.conv_kernel: kernel " + std::to_string(k) + " larger than feature map " +
                         shape_str(cur)});
    net.layers.push_back(QuantizedLayer::conv2d(cur[0], ch, k, Activation::Relu, rng));
    cur = {ch, cur[1] - k + 1, cur[2] - k + 1};
  }
  std::size_t width = shape_numel(cur);
  for (std::size_t h : c.model.hidden) {
    net.layers.push_back(QuantizedLayer::dense(width, h, Activation::Relu, rng));
    width = h;
  }
  net.layers.push_back(QuantizedLayer::dense(width, classes, Activation::None, rng));

  std::vector<bool> exempt(net.layers.size(), false);
  if (c.model.exempt_first_last) {
    exempt.front() = true;
    exempt.back() = true;
  }
  assign_modes(net, c.train.method, c.quantizers.list, c.effective_penalties(), c.train.lambda, exempt);
  return net;
}

bool same_topology(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.data == b.data && a.model.hidden == b.model.hidden &&
         a.model.conv_channels == b.model.conv_channels &&
         (a.model.conv_channels.empty() || a.model.conv_kernel == b.model.conv_kernel);
}

}  // namespace dqa

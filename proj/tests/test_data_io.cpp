// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>

#include "dqa/config.hpp"
#include "dqa/error.hpp"
#include "dqa/persistence.hpp"
#include "support.hpp"

using namespace dqa;
namespace fs = std::filesystem;

namespace {

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

const char* kSourceDir = DQA_SOURCE_DIR;

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("synthetic generators") {
    const auto a = gen_synthetic(SyntheticKind::TwoMoons, 100, 0.2, 5);
    const auto b = gen_synthetic(SyntheticKind::TwoMoons, 100, 0.2, 5);
    CHECK(a.train.features == b.train.features);
    CHECK(a.val.features == b.val.features);
    CHECK(a.train.labels == b.train.labels);
    CHECK(a.train.size() == 80);
    CHECK(a.val.size() == 20);
    std::size_t ones = 0;
    for (auto l : a.train.labels) ones += l;
    for (auto l : a.val.labels) ones += l;
    CHECK(ones == 50);
    CHECK(a.train.stats.source == Split::Train);
    CHECK(a.val.stats == a.train.stats);
    CHECK_THROWS_AS(gen_synthetic(SyntheticKind::Blobs, 3, 0.1, 1), ValidationError);
    CHECK_THROWS_AS(gen_synthetic(SyntheticKind::Blobs, 10, -0.1, 1), ValidationError);
    CHECK_THROWS_AS(parse_synthetic_kind("spirals"), ValidationError);
    CHECK_NOTHROW(gen_synthetic(SyntheticKind::XorRings, 40, 0.05, 1));
  }

  TEST_CASE("statistics come from the train split only") {
    auto d = gen_synthetic(SyntheticKind::Blobs, 40, 0.3, 2);
    NormStats bogus = d.train.stats;
    bogus.source = Split::Val;
    CHECK_THROWS_AS(apply_stats(d.val, bogus), ValidationError);
    CHECK_THROWS_AS(compute_stats(d.val), ValidationError);
    const auto s = compute_stats(d.train);
    CHECK(std::abs(s.mean[0]) < 1e-12);  // already standardized
  }

  TEST_CASE("two-moons full-precision baseline") {
    ExperimentConfig c;
    c.train.method = Method::FullPrecision;
    c.model.hidden = {16};
    const auto data = load_dataset(c);
    auto net = build_network(c, data.train.sample_shape(), data.train.classes);
    train(net, data, c.train);
    CHECK(evaluate(net, data.val).accuracy >= 0.95);
  }

  TEST_CASE("idx loader") {
    const auto dir = dqa::test::scratch_dir("idx");
    std::vector<unsigned char> img, lab;
    put_be32(img, 0x803);
    put_be32(img, 2);
    put_be32(img, 2);
    put_be32(img, 2);
    for (unsigned char v : {0, 51, 102, 255, 255, 0, 204, 153}) img.push_back(v);
    put_be32(lab, 0x801);
    put_be32(lab, 2);
    lab.push_back(3);
    lab.push_back(7);
    write_bytes(dir / "img", img);
    write_bytes(dir / "lab", lab);
    const auto d = load_idx(dir / "img", dir / "lab");
    CHECK(d.features.shape() == Shape{2, 1, 2, 2});
    CHECK(d.features == Tensor({2, 1, 2, 2}, std::vector<double>{0, 0.2, 0.4, 1, 1, 0, 0.8, 0.6}));
    CHECK(d.labels == std::vector<std::size_t>{3, 7});

    auto truncated = img;
    truncated.pop_back();
    write_bytes(dir / "short", truncated);
    CHECK_THROWS_AS(load_idx(dir / "short", dir / "lab"), FormatError);

    auto badcount = lab;
    badcount[7] = 3;
    badcount.push_back(1);
    write_bytes(dir / "lab3", badcount);
    CHECK_THROWS_WITH_AS(load_idx(dir / "img", dir / "lab3"), doctest::Contains("count"), FormatError);

    auto badmagic = img;
    badmagic[3] = 0x01;
    write_bytes(dir / "magic", badmagic);
    CHECK_THROWS_WITH_AS(load_idx(dir / "magic", dir / "lab"), doctest::Contains("magic"), FormatError);
  }

  TEST_CASE("csv loader") {
    const auto dir = dqa::test::scratch_dir("csv");
    write_text(dir / "ok.csv", "x,label,y\n1,0,2\n3.5,1,-4\n0,1,0.25\n");
    const auto d = load_csv(dir / "ok.csv", "label");
    CHECK(d.features == Tensor({3, 2}, std::vector<double>{1, 2, 3.5, -4, 0, 0.25}));
    CHECK(d.labels == std::vector<std::size_t>{0, 1, 1});
    CHECK_THROWS_AS(load_csv(dir / "ok.csv", "class"), ValidationError);

    write_text(dir / "ragged.csv", "x,label\n1,0\n2\n");
    CHECK_THROWS_WITH_AS(load_csv(dir / "ragged.csv", "label"), doctest::Contains("row 3"), FormatError);
    write_text(dir / "nan.csv", "x,label\n1,0\nabc,1\n");
    CHECK_THROWS_WITH_AS(load_csv(dir / "nan.csv", "label"), doctest::Contains("row 3"), FormatError);

    Rng rng(4);
    Dataset big;
    big.features = dqa::test::random_tensor({10000, 3}, rng, -1e3, 1e3);
    for (std::size_t i = 0; i < 10000; ++i) big.labels.push_back(rng.below(4));
    big.classes = 4;
    save_csv(big, dir / "big.csv");
    const auto back = load_csv(dir / "big.csv", "label");
    CHECK(back.features == big.features);
    CHECK(back.labels == big.labels);
  }

  TEST_CASE("config parsing") {
    const auto c = parse_config_text("data.kind = two_moons\ntrain.method = fp\n");
    ExperimentConfig defaults;
    defaults.train.method = Method::FullPrecision;
    CHECK(c == defaults);
    CHECK(c.train.epochs == 60);
    CHECK(c.train.batch_size == 32);
    CHECK(c.train.lr.initial == 0.05);
    CHECK(c.train.momentum == 0.9);
    CHECK(c.train.lambda == 5.0);
    CHECK(c.effective_penalties() == std::vector<double>{1, 4, 16});

    CHECK_THROWS_AS(parse_config_text("quantizers.list = minmax:8, minmax:4, minmax:2\n"), ConfigError);
    try {
      parse_config_text("train.bogus = 1\ntrain.epochs = many\nquantizers.penalties = 1, 2\n");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.problems().size() >= 3);
      CHECK(std::string(e.what()).find("train.bogus") != std::string::npos);
      CHECK(std::string(e.what()).find("train.epochs") != std::string::npos);
    }
  }

  TEST_CASE("bundled config") {
    const auto c = parse_config(fs::path(kSourceDir) / "configs" / "dqa_minmax_248.cfg");
    CHECK(c.quantizers.list.size() == 3);
    CHECK(c.effective_penalties() == std::vector<double>{1, 4, 16});
    CHECK(c.train.t_initial == 100.0);
    CHECK(c.train.t_final == 0.03);
    CHECK(c.train.method == Method::Dqa);
  }

  TEST_CASE("config round trip") {
    ExperimentConfig c;
    c.name = "rt";
    c.seed = 1234567890123ULL;
    c.data.kind = "csv";
    c.data.path = "some/file.csv";
    c.model.hidden = {7, 3};
    c.quantizers.list = {QuantizerSpec::bwn(), QuantizerSpec::twn(), QuantizerSpec::sawb(4)};
    c.quantizers.penalties = {0.5, 2, 9.25};
    c.train.lambda = 0.1;
    c.train.t_final = 0.07;
    c.train.method = Method::BinaryRelax;
    const auto text = serialize_config(c);
    CHECK(parse_config_text(text) == c);
    CHECK(serialize_config(parse_config_text(text)) == text);
  }
}

TEST_SUITE("persistence") {
  TEST_CASE("checkpoint round trip, corruption and version") {
    const auto dir = dqa::test::scratch_dir("ckpt");
    ExperimentConfig c;
    c.data.n = 100;
    c.train.epochs = 2;
    const auto data = load_dataset(c);
    auto net = build_network(c, data.train.sample_shape(), data.train.classes);
    const auto r = train(net, data, c.train);
    Checkpoint ck{serialize_config(c), net, r.progress, c.seed};
    save_checkpoint(ck, dir / "a.bin");
    const auto back = load_checkpoint(dir / "a.bin");
    CHECK(back.config_text == ck.config_text);
    CHECK(back.progress.epochs_done == 2);
    CHECK(back.progress.batches_done == r.progress.batches_done);
    REQUIRE(back.network.layers.size() == net.layers.size());
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      CHECK(back.network.layers[i].weights == net.layers[i].weights);
      CHECK(back.network.layers[i].bias == net.layers[i].bias);
      CHECK(std::get<DqaMixture>(back.network.layers[i].mode).attention.alpha ==
            std::get<DqaMixture>(net.layers[i].mode).attention.alpha);
    }
    REQUIRE(back.progress.sgd.velocity.size() == r.progress.sgd.velocity.size());
    for (std::size_t i = 0; i < back.progress.sgd.velocity.size(); ++i)
      CHECK(back.progress.sgd.velocity[i] == r.progress.sgd.velocity[i]);
    CHECK(back.network.predict(data.val.features) == net.predict(data.val.features));

    auto bytes = read_bytes(dir / "a.bin");
    auto corrupt = bytes;
    corrupt[corrupt.size() / 2] ^= 0x10;
    write_bytes(dir / "b.bin", corrupt);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "b.bin"), doctest::Contains("checksum"), LoadError);

    auto version = bytes;
    version[4] = 99;
    const auto crc = crc32(std::span(version.data(), version.size() - 4));
    for (int i = 0; i < 4; ++i) version[version.size() - 4 + i] = static_cast<unsigned char>(crc >> (8 * i));
    write_bytes(dir / "c.bin", version);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "c.bin"), doctest::Contains("version"), LoadError);

    write_bytes(dir / "d.bin", {'D', 'Q', 'A', 'M', 1, 0, 0, 0, 0});
    CHECK_THROWS_AS(load_checkpoint(dir / "d.bin"), LoadError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), LoadError);
  }

  TEST_CASE("resume reproduces the straight run") {
    ExperimentConfig c;
    c.data.n = 200;
    c.train.epochs = 20;
    c.model.hidden = {8};
    const auto data = load_dataset(c);
    auto straight = build_network(c, data.train.sample_shape(), data.train.classes);
    const auto full = train(straight, data, c.train);

    const auto dir = dqa::test::scratch_dir("resume");
    auto first = build_network(c, data.train.sample_shape(), data.train.classes);
    TrainOptions stop;
    stop.stop_after_epoch = 10;
    const auto part = train(first, data, c.train, nullptr, stop);
    save_checkpoint({serialize_config(c), first, part.progress, c.seed}, dir / "mid.bin");
    auto ck = load_checkpoint(dir / "mid.bin");
    const auto rest = train(ck.network, data, c.train, &ck.progress);

    auto stitched = part.metrics;
    stitched.insert(stitched.end(), rest.metrics.begin(), rest.metrics.end());
    CHECK(stitched == full.metrics);
    CHECK(rest.metrics.back().loss == full.metrics.back().loss);
  }

  TEST_CASE("model artifact round trip") {
    const auto dir = dqa::test::scratch_dir("model");
    ExperimentConfig c;
    c.data.n = 100;
    c.train.epochs = 3;
    c.quantizers.list = {QuantizerSpec::minmax(2), QuantizerSpec::minmax(4), QuantizerSpec::minmax(12)};
    const auto data = load_dataset(c);
    auto net = build_network(c, data.train.sample_shape(), data.train.classes);
    train(net, data, c.train);
    for (auto& l : net.layers) std::get<DqaMixture>(l.mode).frozen_attention = {0, 0, 1};
    const auto hard = export_hard(net);
    CHECK(hard.bitwidths() == std::vector<int>{12, 12});
    save_model(hard, dir / "m.bin");
    const auto back = load_model(dir / "m.bin");
    CHECK(back == hard);
    CHECK(back.to_network().predict(data.val.features) == hard.to_network().predict(data.val.features));
    auto bytes = read_bytes(dir / "m.bin");
    bytes[10] ^= 1;
    write_bytes(dir / "bad.bin", bytes);
    CHECK_THROWS_AS(load_model(dir / "bad.bin"), LoadError);
  }

  TEST_CASE("metrics and calibration csv") {
    const auto dir = dqa::test::scratch_dir("metrics");
    MetricsRecord r;
    r.epoch = 1;
    r.batch = 30;
    r.loss = 0.123456789123;
    r.reg = 0.01;
    r.train_acc = 0.5;
    r.val_acc = 0.75;
    r.temperature = 1.5;
    r.attention = {{0.7, 0.2, 0.1}, {0.6, 0.3, 0.1}};
    r.argmax = {1, 1};
    const std::vector<MetricsRecord> rs{r};
    write_metrics_csv(dir / "m.csv", rs);
    std::ifstream in(dir / "m.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "epoch,batch,loss,reg,train_acc,val_acc,temperature,layer,a_1,a_2,a_3,argmax_k,omega");
    CHECK(row == "1,30,0.123456789,0.01,0.5,0.75,1.5,0,0.7,0.2,0.1,1,");
    const auto t = read_metrics_csv(dir / "m.csv");
    CHECK(t.k == 3);
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[1].layer == 1);
    CHECK(t.rows[1].attention == std::vector<double>{0.6, 0.3, 0.1});
    CHECK_FALSE(t.rows[0].omega.has_value());

    MetricsRecord fp = r;
    fp.attention = {{}, {}};
    fp.argmax = {0, 0};
    const std::vector<MetricsRecord> fps{fp};
    write_metrics_csv(dir / "fp.csv", fps);
    const auto tf = read_metrics_csv(dir / "fp.csv");
    CHECK(tf.k == 0);
    CHECK_FALSE(tf.rows[0].temperature.has_value());

    write_text(dir / "bad.csv", "epoch,batch\n1,2\n");
    CHECK_THROWS_AS(read_metrics_csv(dir / "bad.csv"), FormatError);

    CalibrationRecord cr;
    cr.epoch = 3;
    cr.layer = 1;
    cr.index = 2;
    cr.spec = QuantizerSpec::minmax(4);
    cr.spec.calibration = Calibration{-0.1234567890123456789, 0.3, 0, 0};
    cr.weight = 1.0 / 3;
    cr.w_min = -0.5;
    cr.w_max = 0.5;
    const std::vector<CalibrationRecord> crs{cr};
    write_calibration_csv(dir / "q.csv", crs);
    CHECK(read_calibration_csv(dir / "q.csv") == crs);

    write_summary(dir / "s.txt", {{"a", "1"}, {"b.c", "x y"}});
    const auto s = read_summary(dir / "s.txt");
    CHECK(s.at("a") == "1");
    CHECK(s.at("b.c") == "x y");
  }

  TEST_CASE("atomic writes leave no temporary file") {
    const auto dir = dqa::test::scratch_dir("atomic");
    write_text_atomic(dir / "f.txt", "hello");
    CHECK(fs::exists(dir / "f.txt"));
    CHECK_FALSE(fs::exists(dir / "f.txt.tmp"));
  }
}

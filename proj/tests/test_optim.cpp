#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "ncamorph/optim.hpp"
#include "ncamorph/synth.hpp"
#include "test_util.hpp"

using namespace ncam;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("ncam_opt_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
  static inline int counter = 0;
};

ArchConfig small_arch() {
  ArchConfig cfg;
  cfg.channels = 8;
  cfg.hidden = 16;
  cfg.kernels = {3, 3};
  cfg.steps = {2, 2};
  cfg.downsample_factor = 4;
  cfg.fire_rate = 0.5;
  return cfg;
}

std::vector<LoadedPair> synth_dataset(int n, Shape3 size, double amplitude,
                                      std::uint64_t seed) {
  std::vector<LoadedPair> out;
  for (int i = 0; i < n; ++i) {
    SynthConfig cfg;
    cfg.size = size;
    cfg.amplitude = amplitude;
    cfg.smoothness = 8.0;
    cfg.blobs = 5;
    cfg.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    SynthPair p = synth_pair(cfg);
    LoadedPair lp;
    lp.fixed = p.fixed.grid();
    lp.moving = p.moving.grid();
    lp.fixed_seg = p.fixed_seg;
    lp.moving_seg = p.moving_seg;
    out.push_back(std::move(lp));
  }
  return out;
}

}  // namespace

TEST_CASE("adam leaves parameters unchanged under zero gradients") {
  NcaModel m = init_model<float>(1, small_arch());
  NcaModel before = m;
  NcaModel zeros = zero_grads_like(m);
  AdamState st;
  auto pv = param_views(m);
  auto gv = param_views(zeros);
  std::vector<std::span<const float>> gc(gv.begin(), gv.end());
  adam_step(pv, gc, st, AdamConfig{});
  for (std::size_t l = 0; l < m.levels.size(); ++l) {
    CHECK(m.levels[l].perception.w == before.levels[l].perception.w);
    CHECK(m.levels[l].fc1.w == before.levels[l].fc1.w);
    CHECK(m.levels[l].fc2.w == before.levels[l].fc2.w);
  }
  CHECK(st.t == 1);
}

TEST_CASE("adam single-scalar hand-evaluated update") {
  std::vector<float> p = {0.0f};
  std::vector<float> g = {1.0f};
  AdamState st;
  adam_step({std::span<float>(p)}, {std::span<const float>(g)}, st,
            AdamConfig{});
  // m_hat = 1, v_hat = 1, p -= lr / (1 + eps)
  CHECK(p[0] == doctest::Approx(-9.99999e-5).epsilon(1e-6));
}

TEST_CASE("training is bit-deterministic for a fixed seed") {
  auto data = synth_dataset(2, {16, 16, 16}, 1.5, 21);
  TrainConfig cfg;
  cfg.iterations = 4;
  cfg.seed = 77;
  NcaModel m1 = init_model<float>(5, small_arch());
  NcaModel m2 = init_model<float>(5, small_arch());
  AdamState s1, s2;
  auto log1 = train(data, m1, s1, cfg);
  auto log2 = train(data, m2, s2, cfg);
  REQUIRE(log1.size() == log2.size());
  for (std::size_t i = 0; i < log1.size(); ++i) {
    CHECK(log1[i].total == log2[i].total);
    CHECK(log1[i].sim == log2[i].sim);
  }
  for (std::size_t l = 0; l < m1.levels.size(); ++l) {
    CHECK(m1.levels[l].perception.w == m2.levels[l].perception.w);
    CHECK(m1.levels[l].fc1.w == m2.levels[l].fc1.w);
    CHECK(m1.levels[l].fc2.w == m2.levels[l].fc2.w);
  }
}

TEST_CASE("identical fixed/moving pairs keep the loss at its optimum") {
  auto data = synth_dataset(2, {16, 16, 16}, 0.0, 33);  // fixed == moving
  TrainConfig cfg;
  cfg.iterations = 100;
  cfg.seed = 5;
  NcaModel m = init_model<float>(9, small_arch());
  AdamState st;
  auto log = train(data, m, st, cfg);
  REQUIRE(log.size() == 100);
  CHECK(log.front().total == doctest::Approx(0.0).epsilon(1e-9));
  for (const auto& row : log) CHECK(row.total <= log.front().total + 1e-3);

  // flow stays near zero at full resolution
  Rng rng(1);
  FlowField flow =
      register_pair(data[0].fixed, data[0].moving, m, 1.0, rng);
  float linf = 0.0f;
  for (float v : flow.data) linf = std::max(linf, std::abs(v));
  CHECK(linf < 0.1f);
}

TEST_CASE("training aborts on an empty dataset") {
  TrainConfig cfg;
  NcaModel m = init_model<float>(1, small_arch());
  AdamState st;
  std::vector<LoadedPair> empty;
  CHECK_THROWS_AS(train(empty, m, st, cfg), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is byte-exact") {
  TempDir tmp;
  auto data = synth_dataset(1, {16, 16, 16}, 1.5, 41);
  TrainConfig cfg;
  cfg.iterations = 2;
  cfg.seed = 3;
  NcaModel m = init_model<float>(13, small_arch());
  AdamState st;
  train(data, m, st, cfg);

  const std::string p1 = tmp.file("a.nca");
  const std::string p2 = tmp.file("b.nca");
  save_checkpoint(m, &st, p1);
  AdamState st2;
  NcaModel r = load_checkpoint(p1, &st2);
  save_checkpoint(r, &st2, p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(st2.t == st.t);
  CHECK(st2.m == st.m);
  CHECK(r.config.channels == m.config.channels);
}

TEST_CASE("default-architecture checkpoint stays under 1 MB") {
  TempDir tmp;
  NcaModel m = init_model<float>(1, ArchConfig{});
  const std::string p = tmp.file("default.nca");
  save_checkpoint(m, nullptr, p);
  CHECK(fs::file_size(p) < 1000000);
  // 80256 params * 4 bytes + header
  CHECK(fs::file_size(p) > 80256 * 4);
}

TEST_CASE("checkpoint loader rejects corrupt and truncated files") {
  TempDir tmp;
  NcaModel m = init_model<float>(1, small_arch());
  const std::string p = tmp.file("ok.nca");
  save_checkpoint(m, nullptr, p);

  std::ifstream in(p, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  in.close();

  {
    auto bad = bytes;
    bad[0] = 'X';
    std::ofstream o(tmp.file("magic.nca"), std::ios::binary);
    o.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("magic.nca")),
                       doctest::Contains("bad magic"), std::runtime_error);

  {
    auto bad = bytes;
    bad.resize(bad.size() / 2);
    std::ofstream o(tmp.file("short.nca"), std::ios::binary);
    o.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("short.nca")),
                       doctest::Contains("truncated"), std::runtime_error);

  {
    auto bad = bytes;
    bad[4] = 9;  // version
    std::ofstream o(tmp.file("ver.nca"), std::ios::binary);
    o.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("ver.nca")),
                       doctest::Contains("unsupported version"),
                       std::runtime_error);
}

TEST_CASE("resume with optimizer state matches an uninterrupted run") {
  TempDir tmp;
  auto data = synth_dataset(2, {16, 16, 16}, 1.5, 55);
  const std::uint64_t seed = 99;

  // uninterrupted: 6 iterations
  NcaModel full = init_model<float>(21, small_arch());
  AdamState full_st;
  TrainConfig cfg;
  cfg.iterations = 6;
  cfg.seed = seed;
  train(data, full, full_st, cfg);

  // split: 3 iterations, checkpoint, reload, 3 more
  NcaModel part = init_model<float>(21, small_arch());
  AdamState part_st;
  TrainConfig half = cfg;
  half.iterations = 3;
  train(data, part, part_st, half);
  const std::string ck = tmp.file("resume.nca");
  save_checkpoint(part, &part_st, ck);

  AdamState resumed_st;
  NcaModel resumed = load_checkpoint(ck, &resumed_st);
  CHECK(resumed_st.t == 3);
  train(data, resumed, resumed_st, cfg);  // continues at iteration 3

  for (std::size_t l = 0; l < full.levels.size(); ++l) {
    CHECK(resumed.levels[l].perception.w == full.levels[l].perception.w);
    CHECK(resumed.levels[l].fc1.w == full.levels[l].fc1.w);
    CHECK(resumed.levels[l].fc2.w == full.levels[l].fc2.w);
    CHECK(resumed.levels[l].fc2.b == full.levels[l].fc2.b);
  }
  CHECK(resumed_st.m == full_st.m);
  CHECK(resumed_st.v == full_st.v);
}

TEST_CASE("loss csv format") {
  TempDir tmp;
  std::vector<LossRow> log = {{0, 1.5, 1.0, 0.25, 0.25}, {1, 1.25, 1.0, 0.125, 0.125}};
  const std::string p = tmp.file("loss.csv");
  write_loss_csv(log, p);
  std::ifstream f(p);
  std::string header;
  std::getline(f, header);
  CHECK(header == "iteration,total,sim,smooth,seg");
  std::string row;
  std::getline(f, row);
  CHECK(row.substr(0, 2) == "0,");
}

TEST_CASE("arch config text round trips") {
  ArchConfig cfg = small_arch();
  cfg.fire_rate = 0.375;
  cfg.flow_mode = FlowMode::conv_head;
  ArchConfig r = parse_arch_config_text(arch_config_text(cfg));
  CHECK(r.channels == cfg.channels);
  CHECK(r.hidden == cfg.hidden);
  CHECK(r.kernels == cfg.kernels);
  CHECK(r.steps == cfg.steps);
  CHECK(r.fire_rate == cfg.fire_rate);
  CHECK(r.downsample_factor == cfg.downsample_factor);
  CHECK(r.flow_mode == cfg.flow_mode);
  CHECK_THROWS(parse_arch_config_text("nonsense=1\n"));
}

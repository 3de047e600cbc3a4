// Acceptance suite. Each criterion prints exactly one PASS/FAIL line and the
// binary exits nonzero if the selected criterion fails.
//
//   acceptance --criterion N --cli /path/to/ncamorph --workdir DIR
//
// Criterion 4 trains the shared synthetic fixture into WORKDIR; criteria 5
// and 7 reuse it (wired as ctest fixtures).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ncamorph/gradcheck.hpp"
#include "ncamorph/metrics.hpp"
#include "ncamorph/model.hpp"
#include "ncamorph/optim.hpp"
#include "ncamorph/synth.hpp"
#include "ncamorph/volume_io.hpp"
#include "nca_fixtures.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace ncam;
using testutil::dot;
using testutil::random_flow;
using testutil::random_grid;
using testutil::rel_diff;
using testutil::smooth_grid;

namespace {

std::string g_cli;
fs::path g_work;

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

int run_cli(const std::string& args, bool echo = false) {
  const std::string log = (g_work / "cli_log.txt").string();
  const std::string cmd = "'" + g_cli + "' " + args + " >> '" + log +
                          "' 2>&1";
  if (echo) std::fprintf(stderr, "  $ ncamorph %s\n", args.c_str());
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// mean dice of baseline/model rows in an eval CSV
struct EvalMeans {
  double baseline = 0.0, model = 0.0;
  int pairs = 0;
};

EvalMeans parse_eval_csv(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("missing eval csv: " + p.string());
  std::string line;
  std::getline(f, line);
  if (line != "pair_id,dice_mean,ssim,neg_jac,seconds")
    throw std::runtime_error("unexpected eval csv header: " + line);
  EvalMeans m;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, dice;
    std::getline(ss, id, ',');
    std::getline(ss, dice, ',');
    if (id.find("_baseline") != std::string::npos) {
      m.baseline += std::stod(dice);
      ++m.pairs;
    } else {
      m.model += std::stod(dice);
    }
  }
  if (m.pairs == 0) throw std::runtime_error("eval csv has no rows");
  m.baseline /= m.pairs;
  m.model /= m.pairs;
  return m;
}

struct Check {
  bool ok = true;
  std::string detail;
  void fail(const std::string& why) {
    ok = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }
  void require(bool cond, const std::string& why) {
    if (!cond) fail(why);
  }
};

// ---------------------------------------------------------------------------
// shared fixture paths (created by criterion 4)

fs::path fixture_dir() { return g_work / "fixture"; }
fs::path fixture_ckpt() { return fixture_dir() / "trained.nca"; }
fs::path fixture_train_tsv() { return fixture_dir() / "train.tsv"; }
fs::path fixture_eval_tsv() { return fixture_dir() / "eval.tsv"; }

// Fixture protocol: 72 seeded pairs at 48^3 (64 train, 8 held out), default
// two-level 32/128 model with 3x3 kernels and 5 steps, 200 optimizer steps.
const char* kSynthArgs =
    "--pairs 72 --size 48 --seed 42 --amplitude 7 --smoothness 16 --blobs 7 "
    "--labels 5";
const char* kTrainArgs =
    "--iterations 200 --seed 11 --lr 2e-3 --batch 4 --similarity ncc "
    "--aux-coarse-weight 1.0";

void build_fixture_manifests(const fs::path& data_dir) {
  std::ifstream in(data_dir / "manifest.tsv");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  if (lines.size() != 72) throw std::runtime_error("fixture: expected 72 pairs");
  std::ofstream tr(fixture_train_tsv());
  std::ofstream ev(fixture_eval_tsv());
  for (std::size_t i = 0; i < lines.size(); ++i)
    (i < 64 ? tr : ev) << "data/" << lines[i] << "\n";
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference gradient checks

Check criterion1() {
  Check c;
  const double t0 = now_s();
  const double eps = 1e-4, tol = 1e-3;
  double worst = 0.0;
  std::string worst_op = "none";
  auto note = [&](const char* op, const GradCheckReport& rep) {
    if (rep.max_rel_err > worst) {
      worst = rep.max_rel_err;
      worst_op = op;
    }
    if (!rep.pass) c.fail(std::string(op) + " rel err " +
                          std::to_string(rep.max_rel_err));
  };

  for (int inst = 0; inst < 10; ++inst) {
    Rng rng(1000 + inst);
    Rng crng(2000 + inst);

    {  // conv3d: input, weights, bias
      Grid<double> in = random_grid<double>(2, {5, 5, 5}, rng);
      ConvKernel3<double> ker(3, 2, 3);
      for (auto& v : ker.w) v = rng.uniform(-0.5, 0.5);
      for (auto& v : ker.b) v = rng.uniform(-0.5, 0.5);
      Grid<double> dir = random_grid<double>(3, in.shape, rng);
      Grid<double> g_in(2, in.shape);
      ConvKernel3<double> g_ker(3, 2, 3);
      conv3d_backward(in, ker, dir, &g_in, &g_ker);
      auto obj = [&]() { return dot(conv3d(in, ker).data, dir.data); };
      note("conv3d/input", grad_check({in.data}, {g_in.data}, obj, eps, tol,
                                      crng, 100));
      note("conv3d/weights",
           grad_check({ker.w}, {g_ker.w}, obj, eps, tol, crng, 100));
      note("conv3d/bias",
           grad_check({ker.b}, {g_ker.b}, obj, eps, tol, crng, 100));
    }
    {  // dense
      DenseLayer<double> L(12, 8);
      for (auto& v : L.w) v = rng.uniform(-1, 1);
      for (auto& v : L.b) v = rng.uniform(-1, 1);
      std::vector<double> in(8), dir(12);
      for (auto& v : in) v = rng.uniform(-1, 1);
      for (auto& v : dir) v = rng.uniform(-1, 1);
      std::vector<double> g_in(8, 0.0);
      DenseLayer<double> g_L(12, 8);
      dense_backward(std::span<const double>(in), L,
                     std::span<const double>(dir), std::span<double>(g_in),
                     &g_L);
      auto obj = [&]() {
        return dot(dense(std::span<const double>(in), L), dir);
      };
      note("dense/input",
           grad_check({in}, {g_in}, obj, eps, tol, crng, 100));
      note("dense/weights",
           grad_check({L.w}, {g_L.w}, obj, eps, tol, crng, 100));
    }
    {  // relu, clear of the kink
      Grid<double> in = random_grid<double>(1, {5, 5, 5}, rng);
      for (auto& v : in.data)
        if (std::abs(v) <= 1e-3) v = 0.5;
      Grid<double> dir = random_grid<double>(1, in.shape, rng);
      Grid<double> g_in(1, in.shape);
      relu_backward(in, dir, g_in);
      auto obj = [&]() { return dot(relu(in).data, dir.data); };
      note("relu", grad_check({in.data}, {g_in.data}, obj, eps, tol, crng,
                              100));
    }
    {  // trilinear_resize
      Grid<double> in = random_grid<double>(1, {4, 4, 4}, rng);
      Grid<double> dir = random_grid<double>(1, {7, 9, 6}, rng);
      Grid<double> g_in(1, in.shape);
      trilinear_resize_backward(dir, in.shape, g_in);
      auto obj = [&]() {
        return dot(trilinear_resize(in, {7, 9, 6}).data, dir.data);
      };
      note("trilinear_resize",
           grad_check({in.data}, {g_in.data}, obj, eps, tol, crng, 100));
    }
    {  // crop_patch
      Grid<double> in = random_grid<double>(2, {6, 6, 6}, rng);
      PatchBox box{1, 2, 0, {3, 3, 4}};
      Grid<double> dir = random_grid<double>(2, box.size, rng);
      Grid<double> g_in(2, in.shape);
      crop_patch_backward(dir, box, g_in);
      auto obj = [&]() { return dot(crop_patch(in, box).data, dir.data); };
      note("crop_patch",
           grad_check({in.data}, {g_in.data}, obj, eps, tol, crng, 100));
    }
    {  // warp: volume and flow arguments, smooth volume, interior fractions
      Grid<double> vol = smooth_grid<double>(1, {7, 7, 7}, rng);
      FlowT<double> flow = random_flow<double>(vol.shape, rng, 0.2, 0.45);
      Grid<double> dir = random_grid<double>(1, vol.shape, rng);
      Grid<double> g_vol(1, vol.shape);
      FlowT<double> g_flow(vol.shape);
      warp_trilinear_backward(vol, flow, dir, &g_vol, &g_flow);
      auto obj = [&]() {
        return dot(warp_trilinear(vol, flow).data, dir.data);
      };
      note("warp/volume",
           grad_check({vol.data}, {g_vol.data}, obj, eps, tol, crng, 100));
      note("warp/flow",
           grad_check({flow.data}, {g_flow.data}, obj, eps, tol, crng, 100));
    }
    {  // losses
      Grid<double> a = random_grid<double>(1, {6, 6, 6}, rng, 0, 1);
      Grid<double> b = random_grid<double>(1, {6, 6, 6}, rng, 0, 1);
      Grid<double> ga(1, a.shape), gb(1, a.shape);
      mse_loss_backward(a, b, 1.0, &ga, &gb);
      note("mse", grad_check({a.data}, {ga.data},
                             [&]() { return mse_loss(a, b); }, eps, tol, crng,
                             100));
      Grid<double> gna(1, a.shape);
      ncc_loss_backward(a, b, 3, 1e-5, 1.0, &gna,
                        static_cast<Grid<double>*>(nullptr));
      note("ncc", grad_check({a.data}, {gna.data},
                             [&]() { return ncc_loss(a, b, 3); }, 1e-5, tol,
                             crng, 100));
      FlowT<double> flow = random_flow<double>({5, 5, 5}, rng, -1, 1);
      FlowT<double> gf(flow.shape);
      smoothness_loss_backward(flow, 1.0, gf);
      note("smoothness",
           grad_check({flow.data}, {gf.data},
                      [&]() { return smoothness_loss(flow); }, eps, tol, crng,
                      100));
      Grid<double> p = random_grid<double>(3, {5, 5, 5}, rng, 0.05, 0.95);
      Grid<double> q = random_grid<double>(3, {5, 5, 5}, rng, 0.05, 0.95);
      Grid<double> gp(3, p.shape);
      soft_dice_loss_backward(p, q, 1e-5, 1.0, &gp,
                              static_cast<Grid<double>*>(nullptr));
      note("soft_dice",
           grad_check({p.data}, {gp.data},
                      [&]() { return soft_dice_loss(p, q); }, 1e-5, tol, crng,
                      100));
    }
    {  // the full two-level registration on a 16^3 instance, fire rate 1
      ArchConfig cfg;
      cfg.channels = 8;
      cfg.hidden = 16;
      cfg.kernels = {3, 3};
      cfg.steps = {2, 3};
      cfg.fire_rate = 1.0;
      NcaModelT<double> m = init_model<double>(300 + inst, cfg).cast<double>();
      testutil::margined_model_params(m, rng);
      Grid<double> fixed = smooth_grid<double>(1, {16, 16, 16}, rng);
      Grid<double> moving = smooth_grid<double>(1, {16, 16, 16}, rng);
      PatchBox patch{static_cast<int>(rng.below(8)),
                     static_cast<int>(rng.below(8)),
                     static_cast<int>(rng.below(8)),
                     {8, 8, 8}};
      LossWeights w;
      w.lambda_smooth = 0.05;
      auto obj = [&]() {
        Rng r(0);
        RegTrace<double> t =
            register_forward(fixed, moving, m, 1.0, r, &patch);
        Grid<double> fp = crop_patch(fixed, patch);
        Grid<double> mp = crop_patch(moving, patch);
        return total_loss(fp, mp, t.level_flows.back(),
                          static_cast<const Grid<double>*>(nullptr),
                          static_cast<const Grid<double>*>(nullptr), w)
            .total;
      };
      Rng r(0);
      RegTrace<double> trace = register_forward(fixed, moving, m, 1.0, r,
                                                &patch);
      c.require(testutil::min_preactivation(trace) > 0.05,
                "register fixture lost its kink margin");
      Grid<double> fp = crop_patch(fixed, patch);
      Grid<double> mp = crop_patch(moving, patch);
      FlowT<double> g_flow(trace.level_flows.back().shape);
      total_loss_backward(fp, mp, trace.level_flows.back(),
                          static_cast<const Grid<double>*>(nullptr),
                          static_cast<const Grid<double>*>(nullptr), w,
                          g_flow);
      NcaModelT<double> grads = zero_grads_like(m);
      register_backward(m, trace, g_flow,
                        static_cast<FlowT<double>*>(nullptr), grads);
      for (std::size_t lvl = 0; lvl < m.levels.size(); ++lvl) {
        auto& L = m.levels[lvl];
        auto& G = grads.levels[lvl];
        std::vector<std::pair<std::span<double>, std::span<double>>> pairs = {
            {L.perception.w, G.perception.w},
            {L.perception.b, G.perception.b},
            {L.fc1.w, G.fc1.w},
            {L.fc1.b, G.fc1.b},
            {L.fc2.w, G.fc2.w},
            {L.fc2.b, G.fc2.b}};
        for (auto& [p, g] : pairs)
          note("register_pair/params",
               grad_check(p, std::span<const double>(g.data(), g.size()), obj,
                          eps, tol, crng, 25));
      }
    }
  }

  const double dt = now_s() - t0;
  c.require(dt < 300.0, "runtime " + std::to_string(dt) + " s exceeds 5 min");
  c.detail = "worst rel err " + std::to_string(worst) + " (" + worst_op +
             "), " + std::to_string(dt) + " s";
  return c;
}

// ---------------------------------------------------------------------------
// criterion 2: identity invariants

Check criterion2() {
  Check c;
  Rng rng(7);
  Grid<float> vol = random_grid<float>(2, {8, 8, 8}, rng, 0, 1);
  FlowField zero(vol.shape);
  c.require(warp_trilinear(vol, zero).data == vol.data,
            "zero flow warp not bitwise identical");

  NcaModel model = init_model<float>(5, ArchConfig{});
  Grid<float> fixed = random_grid<float>(1, {16, 16, 16}, rng, 0, 1);
  Grid<float> moving = random_grid<float>(1, {16, 16, 16}, rng, 0, 1);
  Rng reg(1);
  FlowField flow = register_pair(fixed, moving, model, 0.5, reg);
  bool all_zero = true;
  for (float v : flow.data) all_zero = all_zero && v == 0.0f;
  c.require(all_zero, "untrained model emitted nonzero flow");
  c.require(warp_trilinear(moving, flow).data == moving.data,
            "untrained warp changed the moving image");

  c.require(count_nonpositive_jacobian(zero) == 0,
            "zero flow has nonpositive jacobians");

  LabelMap seg({8, 8, 8}, 3);
  seg.at(2, 2, 2) = 1;
  seg.at(3, 3, 3) = 2;
  c.require(dice_score(seg, seg).mean == 1.0, "self dice not exactly 1");
  Grid<float> img = random_grid<float>(1, {9, 9, 9}, rng, 0, 1);
  c.require(ssim3d(img, img) == 1.0, "self ssim not exactly 1");
  c.detail = "bitwise identity, zero init flow, exact self metrics";
  return c;
}

// ---------------------------------------------------------------------------
// criterion 3: oracle equivalence (independent brute-force re-implementations)

Check criterion3() {
  Check c;
  Rng rng(11);

  {  // conv3d vs direct zero-padded sums
    Grid<double> in = random_grid<double>(2, {6, 6, 6}, rng);
    ConvKernel3<double> ker(2, 2, 3);
    for (auto& v : ker.w) v = rng.uniform(-1, 1);
    for (auto& v : ker.b) v = rng.uniform(-1, 1);
    Grid<double> got = conv3d(in, ker);
    double err = 0.0;
    const int r = 1;
    for (int oc = 0; oc < 2; ++oc)
      for (int z = 0; z < 6; ++z)
        for (int y = 0; y < 6; ++y)
          for (int x = 0; x < 6; ++x) {
            double acc = ker.b[oc];
            for (int ic = 0; ic < 2; ++ic)
              for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                  for (int kx = 0; kx < 3; ++kx) {
                    const int zz = z + kz - r, yy = y + ky - r,
                              xx = x + kx - r;
                    if (zz < 0 || zz >= 6 || yy < 0 || yy >= 6 || xx < 0 ||
                        xx >= 6)
                      continue;
                    acc += in.at(ic, zz, yy, xx) *
                           ker.w[ker.widx(oc, ic, kz, ky, kx)];
                  }
            err = std::max(err, rel_diff(got.at(oc, z, y, x), acc));
          }
    c.require(err < 1e-10, "conv3d oracle mismatch " + std::to_string(err));
  }
  {  // warp vs per-voxel sampling oracle
    Grid<float> vol = random_grid<float>(1, {8, 8, 8}, rng);
    FlowField flow = random_flow<float>(vol.shape, rng, -2.5, 2.5);
    Grid<float> got = warp_trilinear(vol, flow);
    double err = 0.0;
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const std::size_t p = (static_cast<std::size_t>(z) * 8 + y) * 8 + x;
          auto cl = [](double v, int n) {
            return std::min(std::max(v, 0.0), double(n - 1));
          };
          const double sx = cl(x + double(flow.comp(0)[p]), 8);
          const double sy = cl(y + double(flow.comp(1)[p]), 8);
          const double sz = cl(z + double(flow.comp(2)[p]), 8);
          const int x0 = std::min(int(sx), 7), y0 = std::min(int(sy), 7),
                    z0 = std::min(int(sz), 7);
          const int x1 = std::min(x0 + 1, 7), y1 = std::min(y0 + 1, 7),
                    z1 = std::min(z0 + 1, 7);
          const double tx = sx - x0, ty = sy - y0, tz = sz - z0;
          double acc = 0.0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                acc += (dz ? tz : 1 - tz) * (dy ? ty : 1 - ty) *
                       (dx ? tx : 1 - tx) *
                       vol.at(0, dz ? z1 : z0, dy ? y1 : y0, dx ? x1 : x0);
          err = std::max(err, std::abs(double(got.at(0, z, y, x)) - acc));
        }
    c.require(err <= 1e-5, "warp oracle mismatch " + std::to_string(err));
  }
  {  // ssim3d vs per-window oracle
    Grid<float> a = random_grid<float>(1, {12, 12, 12}, rng, 0, 1);
    Grid<float> b = random_grid<float>(1, {12, 12, 12}, rng, 0, 1);
    double lo = 1e300, hi = -1e300;
    for (float v : a.data) { lo = std::min(lo, double(v)); hi = std::max(hi, double(v)); }
    for (float v : b.data) { lo = std::min(lo, double(v)); hi = std::max(hi, double(v)); }
    const double L = hi - lo;
    const double c1 = 0.0001 * L * L, c2 = 0.0009 * L * L;
    const double n = 343.0;
    double acc = 0.0;
    std::size_t cnt = 0;
    for (int z = 3; z < 9; ++z)
      for (int y = 3; y < 9; ++y)
        for (int x = 3; x < 9; ++x) {
          double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
          for (int dz = -3; dz <= 3; ++dz)
            for (int dy = -3; dy <= 3; ++dy)
              for (int dx = -3; dx <= 3; ++dx) {
                const double va = a.at(0, z + dz, y + dy, x + dx);
                const double vb = b.at(0, z + dz, y + dy, x + dx);
                sa += va; sb += vb;
                saa += va * va; sbb += vb * vb; sab += va * vb;
              }
          const double ma = sa / n, mb = sb / n;
          const double va = (saa - n * ma * ma) / (n - 1);
          const double vb = (sbb - n * mb * mb) / (n - 1);
          const double cov = (sab - n * ma * mb) / (n - 1);
          acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++cnt;
        }
    const double want = acc / cnt;
    c.require(std::abs(ssim3d(a, b) - want) <= 1e-6,
              "ssim oracle mismatch");
  }
  {  // ncc vs brute-force window statistics (valid-count normalization)
    Grid<float> a = random_grid<float>(1, {8, 8, 8}, rng, 0, 1);
    Grid<float> b = random_grid<float>(1, {8, 8, 8}, rng, 0, 1);
    double acc = 0.0;
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          double s1 = 0, s2 = 0, s11 = 0, s22 = 0, s12 = 0, n = 0;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int zz = z + dz, yy = y + dy, xx = x + dx;
                if (zz < 0 || zz >= 8 || yy < 0 || yy >= 8 || xx < 0 ||
                    xx >= 8)
                  continue;
                const double va = a.at(0, zz, yy, xx);
                const double vb = b.at(0, zz, yy, xx);
                n += 1; s1 += va; s2 += vb;
                s11 += va * va; s22 += vb * vb; s12 += va * vb;
              }
          const double cross = s12 - s1 * s2 / n;
          const double va = s11 - s1 * s1 / n;
          const double vb = s22 - s2 * s2 / n;
          acc += cross * cross / (va * vb + 1e-5);
        }
    const double want = 1.0 - acc / 512.0;
    c.require(std::abs(ncc_loss(a, b, 3) - want) <= 1e-4,
              "ncc oracle mismatch");
  }
  {  // jacobian determinant vs direct finite differences
    FlowT<double> flow({6, 6, 6});
    Grid<double> bumps = smooth_grid<double>(3, {6, 6, 6}, rng, 3);
    for (std::size_t i = 0; i < flow.data.size(); ++i)
      flow.data[i] = 0.4 * bumps.data[i];
    Grid<double> det = jacobian_det_map(flow);
    double err = 0.0;
    auto d1 = [&](int comp, int axis, int z, int y, int x) {
      auto f = [&](int zz, int yy, int xx) {
        return flow.at(comp, zz, yy, xx);
      };
      const int n = axis == 0 ? 6 : (axis == 1 ? 6 : 6);
      const int i = axis == 0 ? x : (axis == 1 ? y : z);
      auto sh = [&](int di) {
        return axis == 0 ? f(z, y, x + di)
                         : (axis == 1 ? f(z, y + di, x) : f(z + di, y, x));
      };
      if (i == 0) return sh(1) - sh(0);
      if (i == n - 1) return sh(0) - sh(-1);
      return (sh(1) - sh(-1)) / 2.0;
    };
    for (int z = 0; z < 6; ++z)
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
          double J[3][3];
          for (int comp = 0; comp < 3; ++comp)
            for (int ax = 0; ax < 3; ++ax)
              J[comp][ax] = d1(comp, ax, z, y, x) + (comp == ax ? 1.0 : 0.0);
          const double want =
              J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
              J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
              J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
          err = std::max(err, rel_diff(det.at(0, z, y, x), want));
        }
    c.require(err < 1e-5, "jacobian oracle mismatch " + std::to_string(err));
  }
  c.detail = "conv3d, warp, ssim3d, ncc, jacobian match brute force";
  return c;
}

// ---------------------------------------------------------------------------
// criterion 4: end-to-end learning on the shared synthetic fixture

Check criterion4() {
  Check c;
  const double t0 = now_s();
  fs::remove_all(fixture_dir());
  fs::create_directories(fixture_dir());
  const std::string dir = fixture_dir().string();

  int rc = run_cli("synth --out '" + dir + "/data' " + kSynthArgs, true);
  c.require(rc == 0, "synth failed");
  if (!c.ok) return c;
  build_fixture_manifests(fixture_dir() / "data");

  rc = run_cli("train --data '" + dir + "/train.tsv' --out '" + dir +
                   "/trained.nca' " + kTrainArgs + " --loss-log '" + dir +
                   "/loss.csv'",
               true);
  c.require(rc == 0, "train failed");
  if (!c.ok) return c;

  rc = run_cli("eval --ckpt '" + dir + "/trained.nca' --data '" + dir +
                   "/eval.tsv' --out '" + dir + "/eval.csv' --seed 1",
               true);
  c.require(rc == 0, "eval failed");
  if (!c.ok) return c;

  EvalMeans m = parse_eval_csv(fixture_dir() / "eval.csv");
  const double gain = m.model - m.baseline;
  c.require(gain >= 0.15,
            "held-out dice gain " + std::to_string(gain) + " < 0.15");

  // the loss log must show improvement too
  std::ifstream loss(fixture_dir() / "loss.csv");
  std::string line;
  std::getline(loss, line);
  double first = -1, last = -1;
  while (std::getline(loss, line)) {
    if (line.empty()) continue;
    const double v = std::stod(line.substr(line.find(',') + 1));
    if (first < 0) first = v;
    last = v;
  }
  c.require(first > 0 && last < first, "training loss did not decrease");

  const double dt = now_s() - t0;
  c.require(dt < 1800.0,
            "runtime " + std::to_string(dt) + " s exceeds 30 min");
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "held-out dice %.4f -> %.4f (+%.1f points), %.0f s",
                m.baseline, m.model, 100.0 * gain, dt);
  c.detail = buf;
  return c;
}

// ---------------------------------------------------------------------------
// criterion 5: fire-rate behavior on the trained fixture

Check criterion5() {
  Check c;
  if (!fs::exists(fixture_ckpt())) {
    c.fail("missing trained fixture (run criterion 4 first)");
    return c;
  }
  const std::string dir = fixture_dir().string();
  const std::string fixed = dir + "/data/pair_0064_fixed.nii";
  const std::string moving = dir + "/data/pair_0064_moving.nii";

  // fire 1.0 bit-determinism across distinct seeds
  for (int i = 0; i < 2; ++i) {
    const int rc = run_cli(
        "register --ckpt '" + dir + "/trained.nca' --fixed '" + fixed +
        "' --moving '" + moving + "' --out-flow '" + dir + "/det" +
        std::to_string(i) + ".nii' --fire-rate 1.0 --seed " +
        std::to_string(100 + 37 * i) + " --force");
    c.require(rc == 0, "register failed");
  }
  c.require(slurp(dir + "/det0.nii") == slurp(dir + "/det1.nii"),
            "fire 1.0 outputs differ across seeds");

  // fire 0.0 is a no-op step
  {
    NcaModel model = load_checkpoint(fixture_ckpt().string());
    Rng rng(3);
    Grid<float> state = random_grid<float>(model.config.channels, {6, 6, 6},
                                           rng);
    Grid<float> before = state;
    auto mask = make_fire_mask(state.voxels(), 0.0, rng);
    nca_step(state, model.levels[0], mask,
             static_cast<StepRecord<float>*>(nullptr));
    c.require(state.data == before.data, "fire 0 modified the state");
  }

  // sweep: complete CSVs, dice(0.5) >= dice(1.0)
  std::map<std::string, double> dice;
  for (const std::string rate : {"0.25", "0.5", "0.75", "1.0"}) {
    const std::string out = dir + "/sweep_" + rate + ".csv";
    const int rc = run_cli("eval --ckpt '" + dir + "/trained.nca' --data '" +
                           dir + "/eval.tsv' --out '" + out +
                           "' --fire-rate " + rate + " --seed 9 --force");
    c.require(rc == 0, "sweep eval failed at rate " + rate);
    if (rc == 0) dice[rate] = parse_eval_csv(out).model;
  }
  if (dice.size() == 4) {
    c.require(dice["0.5"] >= dice["1.0"],
              "dice at fire 0.5 (" + std::to_string(dice["0.5"]) +
                  ") below fire 1.0 (" + std::to_string(dice["1.0"]) + ")");
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "dice by rate: 0.25=%.4f 0.5=%.4f 0.75=%.4f 1.0=%.4f",
                  dice["0.25"], dice["0.5"], dice["0.75"], dice["1.0"]);
    c.detail = buf;
  }
  return c;
}

// ---------------------------------------------------------------------------
// criterion 6: parameter economy

Check criterion6() {
  Check c;
  ArchConfig cfg;  // default direct-mode model
  NcaModel model = init_model<float>(1, cfg);
  const std::size_t count = model.param_count();
  std::fprintf(stderr, "  default model trainable parameters: %zu\n", count);
  c.require(count == expected_param_count(cfg),
            "count disagrees with the closed-form formula");
  c.require(count == 80256, "expected 80256 default parameters");
  c.require(count < 150000, "count exceeds 150000");
  c.require(double(count) < 0.46 * 327331.0,
            "not under 46% of the 327331 reference");

  const fs::path ck = g_work / "economy.nca";
  save_checkpoint(model, nullptr, ck.string());
  const auto bytes = fs::file_size(ck);
  c.require(bytes < 1000000, "checkpoint " + std::to_string(bytes) +
                                 " bytes exceeds 1 MB");
  char buf[120];
  std::snprintf(buf, sizeof(buf), "%zu params (24.5%% of 327331), %ju-byte checkpoint",
                count, static_cast<std::uintmax_t>(bytes));
  c.detail = buf;
  return c;
}

// ---------------------------------------------------------------------------
// criterion 7: stability probe on the trained fixture

Check criterion7() {
  Check c;
  if (!fs::exists(fixture_ckpt())) {
    c.fail("missing trained fixture (run criterion 4 first)");
    return c;
  }
  NcaModel model = load_checkpoint(fixture_ckpt().string());
  const std::string dir = fixture_dir().string();
  Grid<float> fixed = read_volume(dir + "/data/pair_0065_fixed.nii").grid();
  Grid<float> moving = read_volume(dir + "/data/pair_0065_moving.nii").grid();
  LabelMap seg = read_labels(dir + "/data/pair_0065_moving_seg.nii");

  StabilityResult half =
      stability_probe(fixed, moving, &seg, model, 10, 2024, 0.5);
  bool finite = true;
  for (float v : half.flow_std.data) finite = finite && std::isfinite(v);
  for (float v : half.seg_std.data) finite = finite && std::isfinite(v);
  c.require(finite, "std maps contain non-finite values");

  StabilityResult full =
      stability_probe(fixed, moving, &seg, model, 10, 2024, 1.0);
  bool zero = true;
  for (float v : full.flow_std.data) zero = zero && v == 0.0f;
  for (float v : full.seg_std.data) zero = zero && v == 0.0f;
  c.require(zero, "fire 1.0 std maps are not identically zero");

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "fire 0.5 flow std mean %.4g max %.4g; fire 1.0 std == 0",
                half.flow_std_mean, half.flow_std_max);
  c.detail = buf;
  return c;
}

// ---------------------------------------------------------------------------
// criterion 8: format round trips

Check criterion8() {
  Check c;
  Rng rng(13);
  const fs::path dir = g_work / "roundtrip";
  fs::create_directories(dir);

  Volume v({7, 6, 5});
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(-5, 5));
  write_nifti(v, (dir / "v.nii").string());
  Volume r = read_volume((dir / "v.nii").string());
  c.require(std::memcmp(r.data.data(), v.data.data(),
                        v.data.size() * sizeof(float)) == 0,
            "nifti volume payload not bit-exact");

  NcaModel model = init_model<float>(3, ArchConfig{});
  AdamState st;
  st.m.assign(model.param_count(), 0.25f);
  st.v.assign(model.param_count(), 0.5f);
  st.t = 17;
  save_checkpoint(model, &st, (dir / "a.nca").string());
  AdamState st2;
  NcaModel m2 = load_checkpoint((dir / "a.nca").string(), &st2);
  save_checkpoint(m2, &st2, (dir / "b.nca").string());
  c.require(slurp(dir / "a.nca") == slurp(dir / "b.nca"),
            "checkpoint round trip not byte-exact");

  PairDataset ds;
  ds.pairs.push_back({(dir / "f.nii").string(), (dir / "fs.nii").string(),
                      (dir / "m.nii").string(), std::nullopt});
  ds.pairs.push_back({(dir / "f2.nii").string(), std::nullopt,
                      (dir / "m2.nii").string(), std::nullopt});
  write_manifest(ds, (dir / "man.tsv").string());
  PairDataset rd = read_manifest((dir / "man.tsv").string());
  bool same = rd.pairs.size() == 2;
  if (same)
    same = fs::path(rd.pairs[0].fixed_img) == fs::path(ds.pairs[0].fixed_img) &&
           rd.pairs[0].fixed_seg.has_value() &&
           !rd.pairs[1].fixed_seg.has_value() &&
           fs::path(rd.pairs[1].moving_img) ==
               fs::path(ds.pairs[1].moving_img);
  c.require(same, "manifest did not re-parse to the same pairs");
  c.detail = "nifti, checkpoint and manifest round trips exact";
  return c;
}

// ---------------------------------------------------------------------------
// criterion 9: benchmark harness

Check criterion9() {
  Check c;
  const fs::path out = g_work / "bench.csv";
  const int rc = run_cli("bench --sizes 32,64,96,128 --repeats 5 --seed 4 "
                         "--out '" +
                             out.string() + "' --force",
                         true);
  c.require(rc == 0, "bench failed");
  if (!c.ok) return c;
  std::ifstream csv(out);
  std::string line;
  std::getline(csv, line);
  c.require(line == "size,mean_seconds,std_seconds,peak_rss_mb",
            "unexpected bench csv header");
  std::vector<double> means;
  std::string row_summary;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string size, mean;
    std::getline(ss, size, ',');
    std::getline(ss, mean, ',');
    means.push_back(std::stod(mean));
    row_summary += size + ":" + mean + "s ";
  }
  c.require(means.size() == 4, "expected 4 bench rows");
  for (double m : means) c.require(std::isfinite(m) && m > 0, "bad timing");
  for (std::size_t i = 1; i < means.size(); ++i)
    if (means[i] < means[i - 1])
      std::fprintf(stderr,
                   "  warning: mean time not monotone at row %zu (soft)\n", i);
  c.detail = row_summary;
  return c;
}

// ---------------------------------------------------------------------------
// criterion 10: seeded commands are byte-deterministic

Check criterion10() {
  Check c;
  const fs::path dir = g_work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();
  const std::string small =
      "--pairs 2 --size 16 --seed 5 --amplitude 2 --smoothness 6 --blobs 4";

  auto tree_equal = [&](const fs::path& a, const fs::path& b) {
    std::vector<fs::path> fa;
    for (auto& e : fs::recursive_directory_iterator(a))
      if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
    std::sort(fa.begin(), fa.end());
    for (const auto& rel : fa)
      if (slurp(a / rel) != slurp(b / rel)) return false;
    return !fa.empty();
  };

  c.require(run_cli("synth --out '" + d + "/s1' " + small) == 0 &&
                run_cli("synth --out '" + d + "/s2' " + small) == 0,
            "synth failed");
  c.require(tree_equal(dir / "s1", dir / "s2"), "synth trees differ");

  const std::string train_args =
      "--data '" + d + "/s1/manifest.tsv' --iterations 10 --seed 3 "
      "--channels 6 --hidden 8 --save-optimizer --loss-log ";
  c.require(run_cli("train " + train_args + "'" + d + "/l1.csv' --out '" + d +
                    "/t1.nca'") == 0 &&
                run_cli("train " + train_args + "'" + d + "/l2.csv' --out '" +
                        d + "/t2.nca'") == 0,
            "train failed");
  c.require(slurp(dir / "t1.nca") == slurp(dir / "t2.nca"),
            "checkpoints differ");
  c.require(slurp(dir / "l1.csv") == slurp(dir / "l2.csv"),
            "loss logs differ");

  const std::string reg_args = "register --ckpt '" + d +
                               "/t1.nca' --fixed '" + d +
                               "/s1/pair_0000_fixed.nii' --moving '" + d +
                               "/s1/pair_0000_moving.nii' --seed 8 ";
  c.require(run_cli(reg_args + "--out-flow '" + d + "/r1.nii' --out-warped '" +
                    d + "/w1.nii'") == 0 &&
                run_cli(reg_args + "--out-flow '" + d +
                        "/r2.nii' --out-warped '" + d + "/w2.nii'") == 0,
            "register failed");
  c.require(slurp(dir / "r1.nii") == slurp(dir / "r2.nii") &&
                slurp(dir / "w1.nii") == slurp(dir / "w2.nii"),
            "register outputs differ");

  const std::string ev = "eval --ckpt '" + d + "/t1.nca' --data '" + d +
                         "/s1/manifest.tsv' --seed 2 --no-time --out ";
  c.require(run_cli(ev + "'" + d + "/e1.csv'") == 0 &&
                run_cli(ev + "'" + d + "/e2.csv'") == 0,
            "eval failed");
  c.require(slurp(dir / "e1.csv") == slurp(dir / "e2.csv"),
            "eval outputs differ");

  c.require(run_cli("stability --ckpt '" + d + "/t1.nca' --fixed '" + d +
                    "/s1/pair_0000_fixed.nii' --moving '" + d +
                    "/s1/pair_0000_moving.nii' --runs 3 --seed 6 --out '" +
                    d + "/st1'") == 0 &&
                run_cli("stability --ckpt '" + d + "/t1.nca' --fixed '" + d +
                        "/s1/pair_0000_fixed.nii' --moving '" + d +
                        "/s1/pair_0000_moving.nii' --runs 3 --seed 6 --out '" +
                        d + "/st2'") == 0,
            "stability failed");
  c.require(tree_equal(dir / "st1", dir / "st2"), "stability maps differ");

  c.detail = "synth, train, register, eval, stability byte-identical";
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  int criterion = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) criterion = std::atoi(argv[++i]);
    else if (a == "--cli" && i + 1 < argc) g_cli = argv[++i];
    else if (a == "--workdir" && i + 1 < argc) g_work = argv[++i];
  }
  if (criterion < 1 || criterion > 10 || g_work.empty()) {
    std::fprintf(stderr,
                 "usage: acceptance --criterion N --cli PATH --workdir DIR\n");
    return 2;
  }
  fs::create_directories(g_work);

  static const std::function<Check()> table[10] = {
      criterion1, criterion2, criterion3, criterion4, criterion5,
      criterion6, criterion7, criterion8, criterion9, criterion10};
  static const char* names[10] = {
      "gradient correctness",  "identity invariants", "oracle equivalence",
      "end-to-end learning",   "fire-rate behavior",  "parameter economy",
      "stability probe",       "format round trips",  "benchmark harness",
      "determinism"};

  Check c;
  try {
    c = table[criterion - 1]();
  } catch (const std::exception& e) {
    c.ok = false;
    c.detail = std::string("exception: ") + e.what();
  }
  std::printf("criterion %d (%s): %s%s%s\n", criterion, names[criterion - 1],
              c.ok ? "PASS" : "FAIL", c.detail.empty() ? "" : " - ",
              c.detail.c_str());
  std::fflush(stdout);
  return c.ok ? 0 : 1;
}

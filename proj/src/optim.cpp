#include "ncamorph/optim.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ncam {

namespace {

void append_views(NcaModel& m, std::vector<std::span<float>>& out) {
  for (auto& L : m.levels) {
    out.emplace_back(L.perception.w);
    out.emplace_back(L.perception.b);
    out.emplace_back(L.fc1.w);
    out.emplace_back(L.fc1.b);
    out.emplace_back(L.fc2.w);
    out.emplace_back(L.fc2.b);
    if (L.flow_head) {
      out.emplace_back(L.flow_head->w);
      out.emplace_back(L.flow_head->b);
    }
  }
}

LabelMap crop_labels(const LabelMap& labels, const PatchBox& box) {
  LabelMap out(box.size, labels.num_labels);
  for (int z = 0; z < box.size.d; ++z)
    for (int y = 0; y < box.size.h; ++y)
      for (int x = 0; x < box.size.w; ++x)
        out.at(z, y, x) = labels.at(box.z + z, box.y + y, box.x + x);
  return out;
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, const float* p, std::size_t n) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  buf.append(reinterpret_cast<const char*>(p), n * sizeof(float));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i]))
           << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i]))
           << (8 * i);
    pos += 8;
    return v;
  }
  void f32(float* p, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(p, buf.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
  }
};

}  // namespace

std::vector<std::span<float>> param_views(NcaModel& model) {
  std::vector<std::span<float>> out;
  append_views(model, out);
  return out;
}

void adam_step(std::vector<std::span<float>> params,
               std::vector<std::span<const float>> grads, AdamState& state,
               const AdamConfig& cfg) {
  std::size_t total = 0;
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: param/grad view mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size())
      throw std::invalid_argument("adam_step: buffer shape mismatch");
    total += params[i].size();
  }
  if (state.m.empty()) {
    state.m.assign(total, 0.0f);
    state.v.assign(total, 0.0f);
  } else if (state.m.size() != total || state.v.size() != total) {
    throw std::invalid_argument("adam_step: optimizer state size mismatch");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  std::size_t off = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].data();
    const float* g = grads[i].data();
    float* m = state.m.data() + off;
    float* v = state.v.data() + off;
    const std::size_t n = params[i].size();
    for (std::size_t k = 0; k < n; ++k) {
      const double gk = g[k];
      const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      p[k] = static_cast<float>(p[k] -
                                cfg.lr * (mk / bc1) /
                                    (std::sqrt(vk / bc2) + cfg.eps));
    }
    off += n;
  }
}

void TrainConfig::validate() const {
  if (adam.lr <= 0) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1)
    throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
  if (iterations < 0) throw std::invalid_argument("TrainConfig: iterations < 0");
  if (batch < 1) throw std::invalid_argument("TrainConfig: batch < 1");
  loss.validate();
}

LossRow train_step(const std::vector<LoadedPair>& dataset, NcaModel& model,
                   AdamState& state, const TrainConfig& cfg,
                   std::int64_t iteration) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(iteration)));
  NcaModel grads = zero_grads_like(model);
  LossRow row;
  row.iteration = iteration;

  for (int b = 0; b < cfg.batch; ++b) {
    const LoadedPair& pair = dataset[rng.below(dataset.size())];
    const Shape3 shape = pair.fixed.shape;
    const int f = model.config.downsample_factor;
    auto side = [&](int dim) {
      int s = cfg.patch_side > 0 ? cfg.patch_side : dim / f;
      return std::clamp(s, 2, dim);
    };
    PatchBox box;
    box.size = Shape3{side(shape.d), side(shape.h), side(shape.w)};
    box.z = static_cast<int>(rng.below(shape.d - box.size.d + 1));
    box.y = static_cast<int>(rng.below(shape.h - box.size.h + 1));
    box.x = static_cast<int>(rng.below(shape.w - box.size.w + 1));

    RegTrace<float> trace = register_forward(
        pair.fixed, pair.moving, model, model.config.fire_rate, rng, &box);
    const FlowT<float>& phi = trace.level_flows.back();

    Grid<float> fixed_patch = crop_patch(pair.fixed, box);
    Grid<float> moving_patch = crop_patch(pair.moving, box);
    Grid<float> fixed_oh, moving_oh;
    const Grid<float>* fixed_oh_p = nullptr;
    const Grid<float>* moving_oh_p = nullptr;
    if (pair.fixed_seg && pair.moving_seg && cfg.loss.lambda_seg > 0) {
      fixed_oh = one_hot<float>(crop_labels(*pair.fixed_seg, box));
      moving_oh = one_hot<float>(crop_labels(*pair.moving_seg, box));
      fixed_oh_p = &fixed_oh;
      moving_oh_p = &moving_oh;
    }

    FlowT<float> g_flow(phi.shape);
    LossParts parts = total_loss_backward(fixed_patch, moving_patch, phi,
                                          fixed_oh_p, moving_oh_p, cfg.loss,
                                          g_flow);

    FlowT<float> g_coarse;
    const FlowT<float>* g_coarse_p = nullptr;
    if (cfg.loss.aux_coarse_weight > 0 && model.config.levels() > 1) {
      const int scale = model.config.level_scale(0);
      Grid<float> cf = avg_downsample(pair.fixed, scale);
      Grid<float> cm = avg_downsample(pair.moving, scale);
      const FlowT<float>& cflow = trace.level_flows.front();
      Grid<float> cwarp = warp_trilinear(cm, cflow);
      g_coarse = FlowT<float>(cflow.shape);
      Grid<float> g_cwarp(1, cf.shape);
      if (cfg.loss.similarity == Similarity::mse) {
        parts.total += cfg.loss.aux_coarse_weight * mse_loss(cf, cwarp);
        mse_loss_backward(cf, cwarp, cfg.loss.aux_coarse_weight,
                          static_cast<Grid<float>*>(nullptr), &g_cwarp);
      } else {
        parts.total += cfg.loss.aux_coarse_weight *
                       ncc_loss(cf, cwarp, cfg.loss.ncc_window,
                                cfg.loss.epsilon);
        ncc_loss_backward(cf, cwarp, cfg.loss.ncc_window, cfg.loss.epsilon,
                          cfg.loss.aux_coarse_weight,
                          static_cast<Grid<float>*>(nullptr), &g_cwarp);
      }
      warp_trilinear_backward(cm, cflow, g_cwarp,
                              static_cast<Grid<float>*>(nullptr), &g_coarse);
      g_coarse_p = &g_coarse;
    }

    register_backward(model, trace, g_flow, g_coarse_p, grads);

    row.total += parts.total;
    row.sim += parts.sim;
    row.smooth += parts.smooth;
    row.seg += parts.seg;
  }

  if (cfg.batch > 1) {
    const float inv = 1.0f / static_cast<float>(cfg.batch);
    for (auto view : param_views(grads))
      for (float& g : view) g *= inv;
    row.total /= cfg.batch;
    row.sim /= cfg.batch;
    row.smooth /= cfg.batch;
    row.seg /= cfg.batch;
  }
  if (!std::isfinite(row.total))
    throw std::runtime_error("train: non-finite loss at iteration " +
                             std::to_string(iteration));

  auto pv = param_views(model);
  auto gv = param_views(grads);
  std::vector<std::span<const float>> gc(gv.begin(), gv.end());
  adam_step(pv, gc, state, cfg.adam);
  return row;
}

std::vector<LossRow> train(const std::vector<LoadedPair>& dataset,
                           NcaModel& model, AdamState& state,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& p : dataset)
    if (!(p.fixed.shape == dataset.front().fixed.shape))
      throw std::invalid_argument("train: pairs must share a shape");
  std::vector<LossRow> log;
  for (std::int64_t it = state.t; it < cfg.iterations; ++it) {
    log.push_back(train_step(dataset, model, state, cfg, it));
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
        (it + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(model, &state, cfg.checkpoint_path);
  }
  return log;
}

void write_loss_csv(const std::vector<LossRow>& log, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open loss log: " + path);
  f << "iteration,total,sim,smooth,seg\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(r.iteration), r.total, r.sim,
                  r.smooth, r.seg);
    f << buf;
  }
  if (!f) throw std::runtime_error("loss log write failed: " + path);
}

std::string arch_config_text(const ArchConfig& cfg) {
  std::ostringstream ss;
  ss << "channels=" << cfg.channels << "\n";
  ss << "hidden=" << cfg.hidden << "\n";
  ss << "kernels=";
  for (std::size_t i = 0; i < cfg.kernels.size(); ++i)
    ss << (i ? "," : "") << cfg.kernels[i];
  ss << "\nsteps=";
  for (std::size_t i = 0; i < cfg.steps.size(); ++i)
    ss << (i ? "," : "") << cfg.steps[i];
  char fr[64];
  std::snprintf(fr, sizeof(fr), "%.17g", cfg.fire_rate);
  ss << "\nfire_rate=" << fr << "\n";
  ss << "downsample_factor=" << cfg.downsample_factor << "\n";
  ss << "flow_mode="
     << (cfg.flow_mode == FlowMode::direct ? "direct" : "conv_head") << "\n";
  return ss.str();
}

ArchConfig parse_arch_config_text(const std::string& text) {
  ArchConfig cfg;
  cfg.kernels.clear();
  cfg.steps.clear();
  std::istringstream ss(text);
  std::string line;
  auto parse_ints = [](const std::string& v) {
    std::vector<int> out;
    std::stringstream s(v);
    std::string tok;
    while (std::getline(s, tok, ',')) out.push_back(std::stoi(tok));
    return out;
  };
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("checkpoint config: malformed line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "channels") cfg.channels = std::stoi(val);
    else if (key == "hidden") cfg.hidden = std::stoi(val);
    else if (key == "kernels") cfg.kernels = parse_ints(val);
    else if (key == "steps") cfg.steps = parse_ints(val);
    else if (key == "fire_rate") cfg.fire_rate = std::stod(val);
    else if (key == "downsample_factor") cfg.downsample_factor = std::stoi(val);
    else if (key == "flow_mode") {
      if (val == "direct") cfg.flow_mode = FlowMode::direct;
      else if (val == "conv_head") cfg.flow_mode = FlowMode::conv_head;
      else throw std::runtime_error("checkpoint config: bad flow_mode " + val);
    } else {
      throw std::runtime_error("checkpoint config: unknown key " + key);
    }
  }
  cfg.validate();
  return cfg;
}

void save_checkpoint(const NcaModel& model, const AdamState* opt,
                     const std::string& path) {
  std::string buf;
  buf.append("NCAM", 4);
  put_u32(buf, 1);  // version
  const std::string cfg = arch_config_text(model.config);
  put_u32(buf, static_cast<std::uint32_t>(cfg.size()));
  buf.append(cfg);
  NcaModel& m = const_cast<NcaModel&>(model);  // views only read
  auto views = param_views(m);
  std::uint64_t count = 0;
  for (const auto& v : views) count += v.size();
  put_u64(buf, count);
  for (const auto& v : views) put_f32(buf, v.data(), v.size());
  if (opt && !opt->m.empty()) {
    if (opt->m.size() != count || opt->v.size() != count)
      throw std::invalid_argument("save_checkpoint: optimizer size mismatch");
    buf.push_back(1);
    put_u64(buf, static_cast<std::uint64_t>(opt->t));
    put_f32(buf, opt->m.data(), opt->m.size());
    put_f32(buf, opt->v.data(), opt->v.size());
  } else {
    buf.push_back(0);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

NcaModel load_checkpoint(const std::string& path, AdamState* opt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  Reader r(buf);
  r.need(4);
  if (std::memcmp(buf.data(), "NCAM", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic: " + path);
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  const std::uint32_t cfg_len = r.u32();
  r.need(cfg_len);
  const std::string cfg_text = buf.substr(r.pos, cfg_len);
  r.pos += cfg_len;
  const ArchConfig cfg = parse_arch_config_text(cfg_text);
  const std::uint64_t count = r.u64();
  if (count != expected_param_count(cfg))
    throw std::runtime_error(
        "checkpoint: parameter count disagrees with declared config");
  NcaModel model = init_model<float>(0, cfg);
  for (auto view : param_views(model)) r.f32(view.data(), view.size());
  r.need(1);
  const bool has_opt = buf[r.pos++] != 0;
  if (has_opt) {
    AdamState st;
    st.t = static_cast<std::int64_t>(r.u64());
    st.m.resize(count);
    st.v.resize(count);
    r.f32(st.m.data(), count);
    r.f32(st.v.data(), count);
    if (opt) *opt = std::move(st);
  } else if (opt) {
    *opt = AdamState{};
  }
  return model;
}

}  // namespace ncam

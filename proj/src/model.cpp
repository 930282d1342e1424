#include "occstep/model.hpp"

#include <cmath>
#include <random>

#include "occstep/common.hpp"

namespace occstep {

void ModelConfig::validate() const {
  grid.validate();
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (embed_channels < 1 || pe_bands < 1 || state_channels < 1)
    throw ConfigError("channel widths must be positive");
  if (heads < 1) throw ConfigError("heads must be >= 1");
  if (input_width() % heads != 0 || state_channels % heads != 0)
    throw ConfigError("heads must divide the embed+PE width and the state width");
  if (srd_widths[0] < 1 ||
      !(srd_widths[0] < srd_widths[1] && srd_widths[1] < srd_widths[2]))
    throw ConfigError("srd widths must be positive and strictly increasing");
  if (grid.h() % 4 != 0 || grid.w() % 4 != 0)
    throw ConfigError("grid H and W must be divisible by 4 (two planar halvings)");
  if (tile < 1) throw ConfigError("tile must be >= 1");
}

GridGeometry desk_grid() {
  GridGeometry g;
  g.dims = {16, 32, 32};
  g.x_min = -8;
  g.x_max = 8;
  g.y_min = -8;
  g.y_max = 8;
  g.z_min = 0;
  g.z_max = 4;
  return g;
}

Tensor ssm_block(const SsmParams& p, const Tensor& seq) {
  if (seq.shape().size() != 2 || seq.shape()[0] != p.width)
    throw ShapeError("ssm_block: sequence width mismatch");
  Tensor dt = softplus(linear(seq, p.w_dt, p.b_dt));       // (heads, L)
  Tensor dt_full = repeat_rows(dt, p.width / p.heads);     // (width, L)
  Tensor alpha = exp(neg(channel_scale(dt_full, softplus(p.a_raw))));
  Tensor u = linear(seq, p.w_u, p.b_u);
  Tensor drive = mul(affine(alpha, -1.0f, 1.0f), u);
  Tensor h = scan(alpha, drive);
  Tensor z = silu(linear(seq, p.w_z, p.b_z));
  return add(linear(mul(h, z), p.w_o, p.b_o), seq);
}

Tensor fusion_alpha(const FusionParams& p) {
  return exp(neg(mul(softplus(p.a_raw), softplus(p.dt_raw))));
}

FusionOut fusion_step(const FusionParams& p, const Tensor& g_pre,
                      const Tensor& state, const PoseSE3& rel,
                      const GridGeometry& geom) {
  const std::int64_t n = geom.size();
  if (g_pre.shape().size() != 2 || g_pre.shape()[0] != p.in_width ||
      g_pre.shape()[1] != n)
    throw ShapeError("fusion_step: input grid shape mismatch");
  if (state.shape().size() != 4 || state.shape()[0] != p.state_width)
    throw ShapeError("fusion_step: state shape mismatch");

  // rel maps new-frame coordinates into the stored frame, so the content of
  // the new frame's voxel p lives at rel*p in the state; warp_trilinear
  // samples at t^-1*p, hence the inverse.
  Tensor warped = warp_trilinear(state, inverse(rel), geom);
  Tensor warped_flat = reshape(warped, {p.state_width, int(n)});

  Tensor alpha = fusion_alpha(p);  // (state_width), per channel in (0,1)
  Tensor xh = linear(g_pre, p.w_in, p.b_in);
  Tensor gate = sigmoid(linear(g_pre, p.w_g, p.b_g));
  Tensor skip = linear(g_pre, p.w_skip, p.b_skip);

  Tensor beta = mul(affine(alpha, -1.0f, 1.0f), p.b_mix);
  Tensor s_next = add(channel_scale(warped_flat, alpha), channel_scale(xh, beta));
  Tensor yc = channel_scale(s_next, p.c_out);
  Tensor y = add(mul(linear(yc, p.w_out, p.b_out), gate),
                 mul(skip, affine(gate, -1.0f, 1.0f)));

  FusionOut out;
  out.y = y;
  out.state = reshape(s_next, state.shape());
  return out;
}

SrdOut srd_forward(const SrdParams& p, const Tensor& f) {
  if (f.shape().size() != 4 || f.shape()[0] != p.in_width)
    throw ShapeError("srd_forward: feature grid shape mismatch");
  const int dd = f.shape()[1], hh = f.shape()[2], ww = f.shape()[3];
  if (hh % 4 != 0 || ww % 4 != 0)
    throw ConfigError("srd_forward: H and W must be divisible by 4");

  Tensor e1 = silu(conv3(f, p.enc1_k, p.enc1_b, false));
  Tensor e2 = silu(conv3(e1, p.enc2_k, p.enc2_b, true));
  Tensor e3 = silu(conv3(e2, p.enc3_k, p.enc3_b, true));
  Tensor m = silu(conv3(e3, p.mid_k, p.mid_b, false));
  Tensor u2 = silu(conv3(concat_channel(upsample_planar2(m), e2), p.dec2_k,
                         p.dec2_b, false));
  Tensor u1 = silu(conv3(concat_channel(upsample_planar2(u2), e1), p.dec1_k,
                         p.dec1_b, false));

  const int n = dd * hh * ww;
  Tensor u1f = reshape(u1, {p.widths[0], n});
  Tensor logits = reshape(linear(u1f, p.sem_w, p.sem_b),
                          {p.num_classes, dd, hh, ww});
  Tensor pooled = reshape(spatial_mean(u1f), {p.widths[0], 1});
  Tensor hidden = silu(linear(pooled, p.ego_w1, p.ego_b1));
  Tensor ego = linear(hidden, p.ego_w2, p.ego_b2);
  return {logits, ego};
}

Tensor make_positional_encoding(const GridGeometry& g, int bands) {
  const int cp = 6 * bands;
  const std::int64_t n = g.size();
  std::vector<float> buf(std::size_t(cp) * n);
  std::int64_t s = 0;
  for (int d = 0; d < g.d(); ++d)
    for (int h = 0; h < g.h(); ++h)
      for (int w = 0; w < g.w(); ++w, ++s) {
        const double axes[3] = {double(d) / g.d(), double(h) / g.h(),
                                double(w) / g.w()};
        int c = 0;
        for (int b = 0; b < bands; ++b) {
          const double f = M_PI * double(1 << b);
          for (double u : axes) {
            buf[std::size_t(c++) * n + s] = float(std::sin(f * u));
            buf[std::size_t(c++) * n + s] = float(std::cos(f * u));
          }
        }
      }
  return Tensor::from({cp, int(n)}, buf, false);
}

Tensor embed_grid(const SemanticOccGrid& o, const Tensor& table,
                  const Tensor& pe) {
  if (table.shape().size() != 2 || table.shape()[0] != o.num_classes)
    throw ShapeError("embed_grid: table rows must equal num_classes");
  if (pe.shape().size() != 2 || pe.shape()[1] != std::int64_t(o.labels.size()))
    throw ShapeError("embed_grid: positional buffer length mismatch");
  return concat_channel(embed_lookup(o.labels, table), pe);
}

namespace {

// softplus(a) * softplus(0) = 0.5: decay half-life of a few steps at init.
float init_decay_raw() {
  const double target = 0.5 / std::log(2.0);
  return float(std::log(std::exp(target) - 1.0));
}

}  // namespace

WorldModel::WorldModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);

  auto uniform_param = [&](const std::string& name, Shape shape, int fan_in) {
    const float bound = 1.0f / std::sqrt(float(fan_in));
    std::uniform_real_distribution<float> u(-bound, bound);
    std::vector<float> v(shape_numel(shape));
    for (float& x : v) x = u(rng);
    Tensor t = Tensor::from(std::move(shape), v, true);
    params_.emplace_back(name, t);
    return t;
  };
  auto const_param = [&](const std::string& name, Shape shape, float value) {
    std::vector<float> v(shape_numel(shape), value);
    Tensor t = Tensor::from(std::move(shape), v, true);
    params_.emplace_back(name, t);
    return t;
  };

  const int cw = cfg_.input_width();
  const int ch = cfg_.state_channels;
  embed_table = uniform_param("embed", {cfg_.num_classes, cfg_.embed_channels},
                              cfg_.embed_channels);

  auto init_ssm = [&](SsmParams& p, const std::string& prefix, int width) {
    p.width = width;
    p.heads = cfg_.heads;
    p.w_dt = uniform_param(prefix + ".w_dt", {cfg_.heads, width}, width);
    p.b_dt = const_param(prefix + ".b_dt", {cfg_.heads}, 0.0f);
    p.a_raw = const_param(prefix + ".a", {width}, init_decay_raw());
    p.w_u = uniform_param(prefix + ".w_u", {width, width}, width);
    p.b_u = const_param(prefix + ".b_u", {width}, 0.0f);
    p.w_z = uniform_param(prefix + ".w_z", {width, width}, width);
    p.b_z = const_param(prefix + ".b_z", {width}, 0.0f);
    p.w_o = uniform_param(prefix + ".w_o", {width, width}, width);
    p.b_o = const_param(prefix + ".b_o", {width}, 0.0f);
  };
  init_ssm(pre_block, "pre", cw);

  fusion.in_width = cw;
  fusion.state_width = ch;
  fusion.a_raw = const_param("fusion.a", {ch}, init_decay_raw());
  fusion.b_mix = const_param("fusion.b", {ch}, 1.0f);
  fusion.c_out = const_param("fusion.c", {ch}, 1.0f);
  fusion.dt_raw = const_param("fusion.dt", {ch}, 0.0f);
  fusion.w_in = uniform_param("fusion.w_in", {ch, cw}, cw);
  fusion.b_in = const_param("fusion.b_in", {ch}, 0.0f);
  fusion.w_g = uniform_param("fusion.w_g", {ch, cw}, cw);
  fusion.b_g = const_param("fusion.b_g", {ch}, 0.0f);
  fusion.w_skip = uniform_param("fusion.w_skip", {ch, cw}, cw);
  fusion.b_skip = const_param("fusion.b_skip", {ch}, 0.0f);
  fusion.w_out = uniform_param("fusion.w_out", {ch, ch}, ch);
  fusion.b_out = const_param("fusion.b_out", {ch}, 0.0f);

  init_ssm(post_block, "post", ch);

  const int w1 = cfg_.srd_widths[0], w2 = cfg_.srd_widths[1],
            w3 = cfg_.srd_widths[2];
  srd.in_width = ch;
  srd.num_classes = cfg_.num_classes;
  srd.widths = cfg_.srd_widths;
  srd.enc1_k = uniform_param("srd.enc1_k", {w1, ch, 3, 3, 3}, ch * 27);
  srd.enc1_b = const_param("srd.enc1_b", {w1}, 0.0f);
  srd.enc2_k = uniform_param("srd.enc2_k", {w2, w1, 3, 3, 3}, w1 * 27);
  srd.enc2_b = const_param("srd.enc2_b", {w2}, 0.0f);
  srd.enc3_k = uniform_param("srd.enc3_k", {w3, w2, 3, 3, 3}, w2 * 27);
  srd.enc3_b = const_param("srd.enc3_b", {w3}, 0.0f);
  srd.mid_k = uniform_param("srd.mid_k", {w3, w3, 3, 3, 3}, w3 * 27);
  srd.mid_b = const_param("srd.mid_b", {w3}, 0.0f);
  srd.dec2_k = uniform_param("srd.dec2_k", {w2, w3 + w2, 3, 3, 3}, (w3 + w2) * 27);
  srd.dec2_b = const_param("srd.dec2_b", {w2}, 0.0f);
  srd.dec1_k = uniform_param("srd.dec1_k", {w1, w2 + w1, 3, 3, 3}, (w2 + w1) * 27);
  srd.dec1_b = const_param("srd.dec1_b", {w1}, 0.0f);
  srd.sem_w = uniform_param("srd.sem_w", {cfg_.num_classes, w1}, w1);
  srd.sem_b = const_param("srd.sem_b", {cfg_.num_classes}, 0.0f);
  srd.ego_w1 = uniform_param("srd.ego_w1", {2 * w1, w1}, w1);
  srd.ego_b1 = const_param("srd.ego_b1", {2 * w1}, 0.0f);
  srd.ego_w2 = uniform_param("srd.ego_w2", {3, 2 * w1}, 2 * w1);
  srd.ego_b2 = const_param("srd.ego_b2", {3}, 0.0f);

  perm = build_tiled_morton(cfg_.grid.dims, cfg_.tile);
  pe = make_positional_encoding(cfg_.grid, cfg_.pe_bands);
}

Tensor WorldModel::initial_state() const {
  return Tensor::zeros({cfg_.state_channels, cfg_.grid.d(), cfg_.grid.h(),
                        cfg_.grid.w()});
}

StepOut WorldModel::step(const SemanticOccGrid& obs, const Tensor& state,
                         const PoseSE3& rel) const {
  if (!(obs.geom == cfg_.grid))
    throw ShapeError("step: observation geometry does not match the model");
  if (obs.num_classes != cfg_.num_classes)
    throw ShapeError("step: observation class count mismatch");
  Tensor x = embed_grid(obs, embed_table, pe);
  Tensor xs = gather_positions(x, perm.forward);
  Tensor pre = ssm_block(pre_block, xs);
  Tensor gpre = gather_positions(pre, perm.inverse);
  FusionOut fo = fusion_step(fusion, gpre, state, rel, cfg_.grid);
  Tensor ys = gather_positions(fo.y, perm.forward);
  Tensor post = ssm_block(post_block, ys);
  Tensor fgrid = reshape(gather_positions(post, perm.inverse),
                         {cfg_.state_channels, cfg_.grid.d(), cfg_.grid.h(),
                          cfg_.grid.w()});
  SrdOut so = srd_forward(srd, fgrid);
  return {so.logits, so.ego, fo.state};
}

Tensor WorldModel::find_param(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw ArgumentError("unknown parameter: " + name);
}

}  // namespace occstep

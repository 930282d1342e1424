#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "occstep/geometry.hpp"
#include "occstep/grid.hpp"
#include "occstep/tensor.hpp"

namespace occstep {

struct ModelConfig {
  int num_classes = 8;
  int embed_channels = 8;    // per-class embedding width
  int pe_bands = 4;          // positional encoding: 6 channels per band
  int state_channels = 32;   // recurrent voxel-state width
  int heads = 4;             // SSM head count (per-head time constants)
  std::array<int, 3> srd_widths{16, 32, 64};
  int tile = 8;              // Morton brick edge
  GridGeometry grid;

  int pe_channels() const { return 6 * pe_bands; }
  int input_width() const { return embed_channels + pe_channels(); }
  void validate() const;
};

// Builds the default desk-scale geometry: 16x32x32 voxels over
// x,y in (-8,8), z in (0,4) meters.
GridGeometry desk_grid();

// Gated diagonal state-space layer over a Morton-ordered sequence.
// Per head: dt = softplus(W_dt x + b_dt); per channel c with head h(c):
// decay = exp(-softplus(a[c]) * dt[h(c)]), drive = (1-decay) * (W_u x + b_u);
// the scan output is gated by silu(W_z x + b_z), projected by W_o, and added
// back to the input (residual).
struct SsmParams {
  int width = 0;
  int heads = 1;
  Tensor w_dt, b_dt;  // (heads, width), (heads)
  Tensor a_raw;       // (width)
  Tensor w_u, b_u;    // (width, width), (width)
  Tensor w_z, b_z;
  Tensor w_o, b_o;
};

Tensor ssm_block(const SsmParams& p, const Tensor& seq);  // seq: (width, L)

// Recurrent voxel-state fusion. The state is first resampled into the
// incoming frame (rel maps new-frame coordinates into the stored frame, so
// the warp samples at rel * p), then blended per channel:
//   alpha = exp(-softplus(a) * softplus(dt)),  in (0,1)
//   s' = alpha * s_warped + (1-alpha) * b_mix * (W_in g)
//   y  = W_out(c_out * s') * gate + (W_skip g) * (1 - gate),
// gate = sigmoid(W_g g). All of gate/skip/hidden come from the input grid g.
struct FusionParams {
  int in_width = 0;
  int state_width = 0;
  Tensor a_raw, b_mix, c_out, dt_raw;  // per-channel (state_width)
  Tensor w_in, b_in;                   // (state_width, in_width), (state_width)
  Tensor w_g, b_g;
  Tensor w_skip, b_skip;
  Tensor w_out, b_out;                 // (state_width, state_width)
};

struct FusionOut {
  Tensor y;      // (state_width, D*H*W)
  Tensor state;  // (state_width, D, H, W)
};

// g_pre: (in_width, D*H*W); state: (state_width, D, H, W); rel maps
// new-frame coordinates into the frame the state was last updated in.
FusionOut fusion_step(const FusionParams& p, const Tensor& g_pre,
                      const Tensor& state, const PoseSE3& rel,
                      const GridGeometry& geom);

// Per-channel decay vector alpha = exp(-softplus(a_raw) * softplus(dt_raw)).
Tensor fusion_alpha(const FusionParams& p);

// 3-level UNet that downsamples only in-plane (H,W; depth D preserved),
// with skip concatenation, a 1x1x1 class-logit head, and an ego head
// (global average pool + two-layer perceptron -> [d_x, d_y, d_psi]).
struct SrdParams {
  int in_width = 0;
  int num_classes = 0;
  std::array<int, 3> widths{};
  Tensor enc1_k, enc1_b;
  Tensor enc2_k, enc2_b;  // planar stride 2
  Tensor enc3_k, enc3_b;  // planar stride 2
  Tensor mid_k, mid_b;
  Tensor dec2_k, dec2_b;
  Tensor dec1_k, dec1_b;
  Tensor sem_w, sem_b;    // (num_classes, widths[0])
  Tensor ego_w1, ego_b1;  // (2*widths[0], widths[0])
  Tensor ego_w2, ego_b2;  // (3, 2*widths[0])
};

struct SrdOut {
  Tensor logits;  // (num_classes, D, H, W)
  Tensor ego;     // (3, 1)
};

SrdOut srd_forward(const SrdParams& p, const Tensor& f);  // f: (C, D, H, W)

// Class-embedding rows concatenated with a fixed Fourier positional code:
// per axis and band b, sin and cos of pi * 2^b * (index / dim). Ignore
// labels (-1) take embedding row 0; they are excluded later in the loss.
Tensor embed_grid(const SemanticOccGrid& o, const Tensor& table,
                  const Tensor& pe);

// Fixed positional-encoding buffer, shape (6*bands, D*H*W).
Tensor make_positional_encoding(const GridGeometry& g, int bands);

struct StepOut {
  Tensor logits;  // (K, D, H, W)
  Tensor ego;     // (3, 1): estimated motion of this very step
  Tensor state;   // (state_width, D, H, W)
};

// One-frame forecasting interface shared by the real model and test stubs.
// `rel` maps the incoming frame's coordinates into the previous frame.
struct StepModel {
  virtual ~StepModel() = default;
  virtual const ModelConfig& config() const = 0;
  virtual Tensor initial_state() const = 0;
  virtual StepOut step(const SemanticOccGrid& obs, const Tensor& state,
                       const PoseSE3& rel) const = 0;
};

// Full pipeline: embed -> permute -> pre SSM block -> unpermute -> fusion ->
// permute -> post SSM block -> unpermute -> decoder. Linear in D*H*W per
// step; the returned state is the only cross-frame memory.
class WorldModel : public StepModel {
 public:
  WorldModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const override { return cfg_; }
  Tensor initial_state() const override;
  StepOut step(const SemanticOccGrid& obs, const Tensor& state,
               const PoseSE3& rel) const override;

  // Named parameters in fixed registration order (checkpoint layout).
  const std::vector<std::pair<std::string, Tensor>>& parameters() const {
    return params_;
  }
  Tensor find_param(const std::string& name) const;

  Tensor embed_table;  // (K, embed_channels)
  SsmParams pre_block, post_block;
  FusionParams fusion;
  SrdParams srd;
  Permutation perm;
  Tensor pe;  // fixed buffer, not a parameter

 private:
  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace occstep

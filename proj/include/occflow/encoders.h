// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "occflow/core/nn.h"
#include "occflow/raster.h"

namespace occflow {

// Multi-scale features C1..C5 at strides 2,4,8,16,32 of the input raster.
using Pyramid = std::vector<ag::NodeP>;

struct CnnConfig {
  std::vector<int> widths{16, 24, 32, 40, 48};
  int blocks = 1;  // residual blocks per stage beyond the downsampling one
};

struct AttnConfig {
  int patch = 2;
  int window = 16;
  int dim = 24;  // C1 width; doubles at every merge
  int heads = 2;
  std::vector<int> depths{1, 1, 1, 1};
  real mlp_ratio = 2.0;
};

struct St3dConfig {
  std::vector<int> widths{8, 12, 16, 20, 24};
};

struct EncoderConfig {
  bool cnn = true;
  bool attention = false;
  bool st3d = false;
  CnnConfig cnn_cfg;
  AttnConfig attn_cfg;
  St3dConfig st3d_cfg;
  int fused_width = 48;

  void validate() const;
};

// Largest group count <= 8 dividing the channel width.
int norm_groups(int channels);

class CnnEncoder {
 public:
  CnnEncoder() = default;
  CnnEncoder(ParamStore& ps, const std::string& name, int cin, const CnnConfig& cfg, Rng& rng);

  Pyramid fwd(ag::Graph& g, const ag::NodeP& x);
  const std::vector<int>& widths() const { return widths_; }

 private:
  struct Block {
    Conv2d c1, c2, proj;
    GroupNorm n1, n2;
    bool down = false;
  };
  Conv2d stem_;
  GroupNorm stem_norm_;
  std::vector<std::vector<Block>> stages_;
  std::vector<int> widths_;
};

// One pre-norm windowed-attention block operating on a [C, H, W] map. The
// window grid is non-shifted; a learned relative-position bias is added per
// head. Exposed standalone so tests can pin its semantics.
class WindowAttentionBlock {
 public:
  WindowAttentionBlock() = default;
  WindowAttentionBlock(ParamStore& ps, const std::string& name, int dim, int heads, int window,
                       real mlp_ratio, Rng& rng);

  ag::NodeP fwd(ag::Graph& g, const ag::NodeP& x);

  Param& bias_table() { return bias_; }

 private:
  int dim_ = 0, heads_ = 0, window_ = 0;
  LayerNorm ln1_, ln2_;
  Linear qkv_, proj_, fc1_, fc2_;
  Param bias_;               // [(2w-1)^2, heads]
  std::vector<int> bias_idx_;  // [N*N] rows into the table
};

class AttentionEncoder {
 public:
  AttentionEncoder() = default;
  AttentionEncoder(ParamStore& ps, const std::string& name, int cin, const AttnConfig& cfg,
                   Rng& rng);

  Pyramid fwd(ag::Graph& g, const ag::NodeP& x);
  const std::vector<int>& widths() const { return widths_; }

 private:
  AttnConfig cfg_;
  Conv2d embed_;
  LayerNorm embed_norm_;
  std::vector<Linear> merge_;
  std::vector<LayerNorm> merge_norm_;
  std::vector<std::vector<WindowAttentionBlock>> stages_;
  std::vector<int> widths_;
};

// Dense masked realization of the sparse spatio-temporal encoder: regular
// strided layers grow the active set by their receptive field, submanifold
// layers keep it fixed. Stage outputs fold the temporal extent into channels.
class St3dEncoder {
 public:
  St3dEncoder() = default;
  St3dEncoder(ParamStore& ps, const std::string& name, const St3dConfig& cfg, Rng& rng);

  Pyramid fwd(ag::Graph& g, const SparseInput& sp);
  const std::vector<int>& widths() const { return folded_widths_; }
  static const std::array<int, 5>& stage_t();  // (11, 11, 6, 6, 3)

 private:
  std::vector<Conv3d> down_, sub_;
  std::vector<int> folded_widths_;
};

// Per-level channel concatenation of several pyramids followed by a 1x1
// projection to the fused width.
class FeatureFuser {
 public:
  FeatureFuser() = default;
  FeatureFuser(ParamStore& ps, const std::string& name, const std::vector<int>& cat_channels,
               int fused_width, Rng& rng);

  Pyramid fwd(ag::Graph& g, const std::vector<Pyramid>& pyramids);

  std::vector<Conv2d>& projections() { return proj_; }

 private:
  std::vector<Conv2d> proj_;
};

}  // namespace occflow

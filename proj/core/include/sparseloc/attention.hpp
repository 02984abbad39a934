#pragma once

#include "sparseloc/rng.hpp"
#include "sparseloc/tensor.hpp"

namespace sparseloc {

// Attention sparsity rate S: the token grid splits into S*S groups of
// HW/S^2 tokens and attention is confined within groups. Token (i,j) joins
// group (i mod S, j mod S), so each group samples the whole image at stride S
// and adjacent tokens land in different groups.
class SparsityRate {
 public:
  explicit SparsityRate(int s);
  int value() const { return s_; }

 private:
  int s_;
};

// Strided partition of an HxWxC token grid: groups tensor has shape
// [S*S, (H/S)*(W/S), C], token (i,j) sits in group (i mod S)*S + (j mod S) at
// intra-group index (i div S)*(W/S) + (j div S).
struct GroupedTokens {
  Tensor groups;
  int height = 0;
  int width = 0;
  int channels = 0;
  SparsityRate rate{1};
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // [C,C]
  int heads = 1;

  int channels() const { return wq.shape()[0]; }
  int head_dim() const { return channels() / heads; }
  void validate() const;

  static AttentionParams init(int channels, int heads, Rng& rng, bool requires_grad = true);
};

// ---- single-grid surface ----
GroupedTokens partition_strided(const Tensor& x, SparsityRate s);  // x [H,W,C]
Tensor unpartition(const GroupedTokens& g);

// Multi-head scaled-dot-product attention applied independently per group.
GroupedTokens grouped_attention(const GroupedTokens& g, const AttentionParams& p);

// partition -> grouped attention -> unpartition.
Tensor sparse_attention_layer(const Tensor& x, SparsityRate s, const AttentionParams& p);

// ---- batched operators used by the encoder ----
// x: [B,H,W,C] or [H,W,C]; result [B*S*S, T, C] (batch folded into groups).
Tensor partition_grid(const Tensor& x, int s);
// Inverse of partition_grid; `like` gives back the original rank/extents.
Tensor unpartition_grid(const Tensor& groups, const Shape& like, int s);
// tokens: [G, T, C] batched over G independent groups.
Tensor multi_head_attention(const Tensor& tokens, const AttentionParams& p);
Tensor sparse_attention_batched(const Tensor& x, int s, const AttentionParams& p);

}  // namespace sparseloc

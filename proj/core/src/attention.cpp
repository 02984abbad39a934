#include "sparseloc/attention.hpp"

#include <cmath>

namespace sparseloc {

SparsityRate::SparsityRate(int s) : s_(s) {
  if (s < 1 || (s & (s - 1)) != 0) {
    throw ConfigError("sparsity rate must be a power of two >= 1, got " + std::to_string(s));
  }
}

void AttentionParams::validate() const {
  const int c = channels();
  for (const Tensor* w : {&wq, &wk, &wv, &wo}) {
    if (w->rank() != 2 || w->shape()[0] != c || w->shape()[1] != c) {
      throw ShapeError("attention weights must all be [C,C], got " + shape_str(w->shape()));
    }
  }
  if (heads < 1 || c % heads != 0) {
    throw ConfigError("heads (" + std::to_string(heads) + ") must divide channels (" +
                      std::to_string(c) + ")");
  }
}

AttentionParams AttentionParams::init(int channels, int heads, Rng& rng, bool requires_grad) {
  AttentionParams p;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(channels));
  p.wq = Tensor::randn({channels, channels}, rng, stddev, requires_grad);
  p.wk = Tensor::randn({channels, channels}, rng, stddev, requires_grad);
  p.wv = Tensor::randn({channels, channels}, rng, stddev, requires_grad);
  p.wo = Tensor::randn({channels, channels}, rng, stddev, requires_grad);
  p.heads = heads;
  p.validate();
  return p;
}

namespace {

struct GridDims {
  std::int64_t batch, h, w, c;
  bool squeeze;
};

GridDims grid_dims(const Shape& s, int rate, const char* op) {
  GridDims d{};
  if (s.size() == 3) {
    d = {1, s[0], s[1], s[2], true};
  } else if (s.size() == 4) {
    d = {s[0], s[1], s[2], s[3], false};
  } else {
    throw ShapeError(std::string(op) + ": expected [H,W,C] or [B,H,W,C], got " + shape_str(s));
  }
  if (d.h % rate != 0 || d.w % rate != 0) {
    throw ConfigError(std::string(op) + ": sparsity rate " + std::to_string(rate) +
                      " must divide grid extents H=" + std::to_string(d.h) +
                      ", W=" + std::to_string(d.w));
  }
  return d;
}

}  // namespace

Tensor partition_grid(const Tensor& x, int s) {
  const SparsityRate rate(s);
  const GridDims d = grid_dims(x.shape(), s, "partition_strided");
  const std::int64_t gh = d.h / s, gw = d.w / s;
  const std::int64_t tokens = gh * gw;
  const std::int64_t groups = static_cast<std::int64_t>(s) * s;

  std::vector<std::int64_t> row_map(static_cast<std::size_t>(d.batch * groups * tokens));
  std::int64_t r = 0;
  for (std::int64_t b = 0; b < d.batch; ++b) {
    for (std::int64_t gi = 0; gi < s; ++gi) {
      for (std::int64_t gj = 0; gj < s; ++gj) {
        for (std::int64_t ti = 0; ti < gh; ++ti) {
          for (std::int64_t tj = 0; tj < gw; ++tj) {
            const std::int64_t i = ti * s + gi;
            const std::int64_t j = tj * s + gj;
            row_map[r++] = (b * d.h + i) * d.w + j;
          }
        }
      }
    }
  }
  return gather_rows(x, d.c, std::move(row_map),
                     {static_cast<int>(d.batch * groups), static_cast<int>(tokens),
                      static_cast<int>(d.c)});
}

Tensor unpartition_grid(const Tensor& groups_t, const Shape& like, int s) {
  const GridDims d = grid_dims(like, s, "unpartition");
  const std::int64_t gh = d.h / s, gw = d.w / s;
  const std::int64_t tokens = gh * gw;
  const std::int64_t group_count = static_cast<std::int64_t>(s) * s;
  if (groups_t.size() != d.batch * d.h * d.w * d.c) {
    throw ShapeError("unpartition: grouped tensor " + shape_str(groups_t.shape()) +
                     " does not match grid " + shape_str(like));
  }

  std::vector<std::int64_t> row_map(static_cast<std::size_t>(d.batch * d.h * d.w));
  std::int64_t r = 0;
  for (std::int64_t b = 0; b < d.batch; ++b) {
    for (std::int64_t i = 0; i < d.h; ++i) {
      for (std::int64_t j = 0; j < d.w; ++j) {
        const std::int64_t g = (i % s) * s + (j % s);
        const std::int64_t t = (i / s) * gw + (j / s);
        row_map[r++] = (b * group_count + g) * tokens + t;
      }
    }
  }
  return gather_rows(groups_t, d.c, std::move(row_map), like);
}

GroupedTokens partition_strided(const Tensor& x, SparsityRate s) {
  if (x.rank() != 3) {
    throw ShapeError("partition_strided: expected [H,W,C], got " + shape_str(x.shape()));
  }
  GroupedTokens g{partition_grid(x, s.value()), x.shape()[0], x.shape()[1], x.shape()[2], s};
  return g;
}

Tensor unpartition(const GroupedTokens& g) {
  return unpartition_grid(g.groups, {g.height, g.width, g.channels}, g.rate.value());
}

Tensor multi_head_attention(const Tensor& tokens, const AttentionParams& p) {
  p.validate();
  if (tokens.rank() != 3 || tokens.shape()[2] != p.channels()) {
    throw ShapeError("multi_head_attention: expected [G,T,C] with C=" +
                     std::to_string(p.channels()) + ", got " + shape_str(tokens.shape()));
  }
  const int g = tokens.shape()[0];
  const int t = tokens.shape()[1];
  const int c = tokens.shape()[2];
  const int h = p.heads;
  const int d = p.head_dim();

  const Tensor q = matmul(tokens, p.wq);
  const Tensor k = matmul(tokens, p.wk);
  const Tensor v = matmul(tokens, p.wv);

  const Tensor qh = permute(reshape(q, {g, t, h, d}), {0, 2, 1, 3});   // [G,h,T,d]
  const Tensor kht = permute(reshape(k, {g, t, h, d}), {0, 2, 3, 1});  // [G,h,d,T]
  const Tensor vh = permute(reshape(v, {g, t, h, d}), {0, 2, 1, 3});

  const Tensor scores = scale(matmul(qh, kht), 1.0 / std::sqrt(static_cast<double>(d)));
  const Tensor weights = softmax(scores, -1);
  const Tensor ctx = matmul(weights, vh);  // [G,h,T,d]
  const Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {g, t, c});
  return matmul(merged, p.wo);
}

GroupedTokens grouped_attention(const GroupedTokens& g, const AttentionParams& p) {
  if (g.channels != p.channels()) {
    throw ShapeError("grouped_attention: token channels " + std::to_string(g.channels) +
                     " vs weight channels " + std::to_string(p.channels()));
  }
  GroupedTokens out = g;
  out.groups = multi_head_attention(g.groups, p);
  return out;
}

Tensor sparse_attention_batched(const Tensor& x, int s, const AttentionParams& p) {
  const Tensor grouped = partition_grid(x, s);
  const Tensor attended = multi_head_attention(grouped, p);
  return unpartition_grid(attended, x.shape(), s);
}

Tensor sparse_attention_layer(const Tensor& x, SparsityRate s, const AttentionParams& p) {
  if (x.rank() != 3) {
    throw ShapeError("sparse_attention_layer: expected [H,W,C], got " + shape_str(x.shape()));
  }
  return sparse_attention_batched(x, s.value(), p);
}

}  // namespace sparseloc

// Copyright (c) 2026 msunet contributors
// SPDX-License-Identifier: Apache-2.0
#include "msunet/ops.hpp"

#include <sstream>

namespace msunet::maps {

namespace {
int64_t mod(int64_t a, int64_t m) { return ((a % m) + m) % m; }

std::string key(const char* tag, std::initializer_list<int64_t> vals) {
  std::ostringstream os;
  os << tag;
  for (int64_t v : vals) os << ':' << v;
  return os.str();
}
}  // namespace

IndexMapPtr roll(int64_t B, int64_t H, int64_t W, int64_t C, int64_t dy, int64_t dx) {
  return MapCache::get(key("roll", {B, H, W, C, dy, dx}), [=] {
    IndexMap m;
    m.out_shape = {B, H, W, C};
    m.in_numel = B * H * W * C;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < H; ++y) {
        const int64_t sy = mod(y + dy, H);
        for (int64_t x = 0; x < W; ++x) {
          const int64_t sx = mod(x + dx, W);
          const int64_t base = ((b * H + sy) * W + sx) * C;
          for (int64_t c = 0; c < C; ++c) m.src[static_cast<size_t>(o++)] = base + c;
        }
      }
    return m;
  });
}

IndexMapPtr window_partition(int64_t B, int64_t H, int64_t W, int64_t C, int64_t ws) {
  return MapCache::get(key("wpart", {B, H, W, C, ws}), [=] {
    MSUNET_CHECK(H % ws == 0 && W % ws == 0,
                 "window size " << ws << " must divide grid " << H << "x" << W);
    const int64_t nh = H / ws, nw = W / ws;
    IndexMap m;
    m.out_shape = {B * nh * nw, ws * ws, C};
    m.in_numel = B * H * W * C;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t wy = 0; wy < nh; ++wy)
        for (int64_t wx = 0; wx < nw; ++wx)
          for (int64_t iy = 0; iy < ws; ++iy)
            for (int64_t ix = 0; ix < ws; ++ix) {
              const int64_t y = wy * ws + iy, x = wx * ws + ix;
              const int64_t base = ((b * H + y) * W + x) * C;
              for (int64_t c = 0; c < C; ++c) m.src[static_cast<size_t>(o++)] = base + c;
            }
    return m;
  });
}

IndexMapPtr window_reverse(int64_t B, int64_t H, int64_t W, int64_t C, int64_t ws) {
  return MapCache::get(key("wrev", {B, H, W, C, ws}), [=] {
    const int64_t nh = H / ws, nw = W / ws;
    IndexMap m;
    m.out_shape = {B, H, W, C};
    m.in_numel = B * H * W * C;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          const int64_t wy = y / ws, wx = x / ws, iy = y % ws, ix = x % ws;
          const int64_t win = (b * nh + wy) * nw + wx;
          const int64_t base = (win * ws * ws + iy * ws + ix) * C;
          for (int64_t c = 0; c < C; ++c) m.src[static_cast<size_t>(o++)] = base + c;
        }
    return m;
  });
}

IndexMapPtr merge2x2(int64_t B, int64_t H, int64_t W, int64_t C) {
  return MapCache::get(key("merge", {B, H, W, C}), [=] {
    MSUNET_CHECK(H % 2 == 0 && W % 2 == 0,
                 "patch merge needs even grid, got " << H << "x" << W);
    IndexMap m;
    m.out_shape = {B, H / 2, W / 2, 4 * C};
    m.in_numel = B * H * W * C;
    m.src.resize(static_cast<size_t>(m.in_numel));
    // Quadrant order (dy, dx) = (0,0), (1,0), (0,1), (1,1).
    const int64_t offs[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    int64_t o = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < H / 2; ++y)
        for (int64_t x = 0; x < W / 2; ++x)
          for (const auto& d : offs) {
            const int64_t base = ((b * H + 2 * y + d[0]) * W + 2 * x + d[1]) * C;
            for (int64_t c = 0; c < C; ++c) m.src[static_cast<size_t>(o++)] = base + c;
          }
    return m;
  });
}

IndexMapPtr expand_rearrange(int64_t B, int64_t H, int64_t W, int64_t C, int64_t p) {
  return MapCache::get(key("expand", {B, H, W, C, p}), [=] {
    MSUNET_CHECK(C % (p * p) == 0, "expand_rearrange channels " << C << " not divisible by "
                                                                << p * p);
    const int64_t Co = C / (p * p);
    IndexMap m;
    m.out_shape = {B, H * p, W * p, Co};
    m.in_numel = B * H * W * C;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < H * p; ++y) {
        const int64_t h = y / p, i = y % p;
        for (int64_t x = 0; x < W * p; ++x) {
          const int64_t w = x / p, j = x % p;
          const int64_t base = ((b * H + h) * W + w) * C + (i * p + j) * Co;
          for (int64_t c = 0; c < Co; ++c) m.src[static_cast<size_t>(o++)] = base + c;
        }
      }
    return m;
  });
}

IndexMapPtr patchify(int64_t B, int64_t Cin, int64_t H, int64_t W, int64_t p) {
  return MapCache::get(key("patchify", {B, Cin, H, W, p}), [=] {
    MSUNET_CHECK(H % p == 0 && W % p == 0,
                 "image " << H << "x" << W << " not divisible by patch size " << p);
    const int64_t h = H / p, w = W / p;
    IndexMap m;
    m.out_shape = {B, h, w, p * p * Cin};
    m.in_numel = B * Cin * H * W;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ty = 0; ty < h; ++ty)
        for (int64_t tx = 0; tx < w; ++tx)
          for (int64_t i = 0; i < p; ++i)
            for (int64_t j = 0; j < p; ++j)
              for (int64_t c = 0; c < Cin; ++c)
                m.src[static_cast<size_t>(o++)] =
                    ((b * Cin + c) * H + ty * p + i) * W + tx * p + j;
    return m;
  });
}

IndexMapPtr split_heads(int64_t BW, int64_t S, int64_t heads, int64_t dh) {
  return MapCache::get(key("split_heads", {BW, S, heads, dh}), [=] {
    IndexMap m;
    m.out_shape = {BW, heads, S, dh};
    m.in_numel = BW * S * heads * dh;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < BW; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t s = 0; s < S; ++s)
          for (int64_t d = 0; d < dh; ++d)
            m.src[static_cast<size_t>(o++)] = (b * S + s) * heads * dh + h * dh + d;
    return m;
  });
}

IndexMapPtr merge_heads(int64_t BW, int64_t S, int64_t heads, int64_t dh) {
  return MapCache::get(key("merge_heads", {BW, S, heads, dh}), [=] {
    IndexMap m;
    m.out_shape = {BW, S, heads * dh};
    m.in_numel = BW * S * heads * dh;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < BW; ++b)
      for (int64_t s = 0; s < S; ++s)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t d = 0; d < dh; ++d)
            m.src[static_cast<size_t>(o++)] = ((b * heads + h) * S + s) * dh + d;
    return m;
  });
}

IndexMapPtr bhwc_to_bchw(int64_t B, int64_t H, int64_t W, int64_t C) {
  return MapCache::get(key("bhwc2bchw", {B, H, W, C}), [=] {
    IndexMap m;
    m.out_shape = {B, C, H, W};
    m.in_numel = B * H * W * C;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x)
            m.src[static_cast<size_t>(o++)] = ((b * H + y) * W + x) * C + c;
    return m;
  });
}

IndexMapPtr relative_bias(int64_t window, int64_t heads) {
  return MapCache::get(key("relbias", {window, heads}), [=] {
    const int64_t S = window * window;
    const int64_t span = 2 * window - 1;
    IndexMap m;
    m.out_shape = {heads, S, S};
    m.in_numel = span * span * heads;
    m.src.resize(static_cast<size_t>(heads * S * S));
    int64_t o = 0;
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < S; ++i)
        for (int64_t j = 0; j < S; ++j) {
          const int64_t dy = (i / window) - (j / window) + window - 1;
          const int64_t dx = (i % window) - (j % window) + window - 1;
          m.src[static_cast<size_t>(o++)] = (dy * span + dx) * heads + h;
        }
    return m;
  });
}

IndexMapPtr shift_replicate(int64_t B, int64_t H, int64_t W, int64_t dy, int64_t dx) {
  return MapCache::get(key("shiftrep", {B, H, W, dy, dx}), [=] {
    IndexMap m;
    m.out_shape = {B, H, W};
    m.in_numel = B * H * W;
    m.src.resize(static_cast<size_t>(m.in_numel));
    int64_t o = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t y = 0; y < H; ++y) {
        const int64_t sy = std::clamp<int64_t>(y + dy, 0, H - 1);
        for (int64_t x = 0; x < W; ++x) {
          const int64_t sx = std::clamp<int64_t>(x + dx, 0, W - 1);
          m.src[static_cast<size_t>(o++)] = (b * H + sy) * W + sx;
        }
      }
    return m;
  });
}

}  // namespace msunet::maps

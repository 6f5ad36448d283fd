// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <numeric>

#include "helpers.h"
#include "occflow/core/kernels.h"
#include "occflow/core/nn.h"
#include "occflow/core/reference.h"
#include "occflow/core/serialize.h"

using namespace occflow;
using tst::max_abs_diff;
using tst::randn;

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.dim(1) == 3);
  t.at({1, 2, 3}) = 7;
  CHECK(t[23] == 7);
  CHECK_THROWS_AS((void)t.reshaped({5, 5}), ShapeError);
  CHECK(t.reshaped({6, 4}).dim(0) == 6);
  CHECK_THROWS_AS(Tensor({2, -1}), ShapeError);
}

TEST_CASE("rng determinism and stream independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  Rng d = c.fork(1), e = c.fork(2);
  CHECK(d.next_u64() != e.next_u64());
  Rng f(7);
  double mean = 0;
  for (int i = 0; i < 10000; ++i) {
    double u = f.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mean += u;
  }
  CHECK(std::abs(mean / 10000 - 0.5) < 0.02);
}

TEST_CASE("gemm against hand loop") {
  Rng rng(3);
  const int m = 5, n = 7, k = 4;
  Tensor a = randn({m, k}, rng), b = randn({k, n}, rng);
  Tensor c({m, n});
  kern::gemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, c.data(), n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      real acc = 0;
      for (int l = 0; l < k; ++l) acc += a.at({i, l}) * b.at({l, j});
      CHECK(std::abs(c.at({i, j}) - acc) < 1e-12);
    }
  // transposed variant
  Tensor at = randn({k, m}, rng);
  kern::gemm(true, false, m, n, k, 1.0, at.data(), m, b.data(), n, 0.0, c.data(), n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      real acc = 0;
      for (int l = 0; l < k; ++l) acc += at.at({l, i}) * b.at({l, j});
      CHECK(std::abs(c.at({i, j}) - acc) < 1e-12);
    }
}

TEST_CASE("im2col/col2im are adjoint") {
  Rng rng(11);
  kern::Conv2dGeom g;
  g.cin = 3;
  g.h = 7;
  g.w = 6;
  g.kh = 3;
  g.kw = 2;
  g.sh = 2;
  g.sw = 1;
  g.ph = 1;
  g.pw = 0;
  g.dh = 1;
  g.dw = 2;
  const int64_t cl = static_cast<int64_t>(g.cin) * g.kh * g.kw * g.hout() * g.wout();
  Tensor x = randn({g.cin, g.h, g.w}, rng);
  Tensor c = randn({static_cast<int>(cl)}, rng);
  Tensor cx({static_cast<int>(cl)});
  kern::im2col(x.data(), g, cx.data());
  Tensor xc = Tensor::zeros({g.cin, g.h, g.w});
  kern::col2im(c.data(), g, xc.data());
  const real lhs = kern::det_dot(cx.data(), c.data(), cl);
  const real rhs = kern::det_dot(x.data(), xc.data(), x.numel());
  CHECK(std::abs(lhs - rhs) < 1e-9 * std::max<real>(1, std::abs(lhs)));
}

TEST_CASE("vol2col/col2vol are adjoint") {
  Rng rng(12);
  kern::Conv3dGeom g;
  g.cin = 2;
  g.t = 5;
  g.h = 6;
  g.w = 4;
  g.kt = 2;
  g.kh = 3;
  g.kw = 3;
  g.st = 2;
  g.sh = 1;
  g.sw = 1;
  g.pt = 1;
  g.ph = 1;
  g.pw = 1;
  const int64_t cl =
      static_cast<int64_t>(g.cin) * g.kt * g.kh * g.kw * g.tout() * g.hout() * g.wout();
  Tensor x = randn({g.cin, g.t, g.h, g.w}, rng);
  Tensor c = randn({static_cast<int>(cl)}, rng);
  Tensor cx({static_cast<int>(cl)});
  kern::vol2col(x.data(), g, cx.data());
  Tensor xc = Tensor::zeros({g.cin, g.t, g.h, g.w});
  kern::col2vol(c.data(), g, xc.data());
  const real lhs = kern::det_dot(cx.data(), c.data(), cl);
  const real rhs = kern::det_dot(x.data(), xc.data(), x.numel());
  CHECK(std::abs(lhs - rhs) < 1e-9 * std::max<real>(1, std::abs(lhs)));
}

TEST_CASE("conv2d matches the serial reference across geometries") {
  Rng rng(21);
  struct Cfg {
    int cin, cout, h, w, kh, kw, sh, sw, ph, pw, dh, dw, groups;
  };
  const Cfg cfgs[] = {
      {3, 5, 9, 8, 3, 3, 1, 1, 1, 1, 1, 1, 1},
      {4, 6, 10, 7, 3, 2, 2, 1, 0, 1, 1, 1, 2},
      {2, 4, 8, 8, 5, 5, 1, 1, 2, 2, 2, 2, 1},
      {6, 6, 6, 6, 3, 3, 2, 2, 1, 1, 1, 1, 6},
      {1, 3, 12, 5, 1, 1, 1, 1, 0, 0, 1, 1, 1},
  };
  for (const auto& c : cfgs) {
    CAPTURE(c.cin);
    CAPTURE(c.groups);
    Tensor x = randn({c.cin, c.h, c.w}, rng);
    Tensor w = randn({c.cout, c.cin / c.groups, c.kh, c.kw}, rng);
    Tensor b = randn({c.cout}, rng);
    Tensor want =
        ref::conv2d_direct(x, w, b, c.sh, c.sw, c.ph, c.pw, c.dh, c.dw, c.groups);
    ag::Graph g(false);
    ag::ConvSpec sp{c.sh, c.sw, c.ph, c.pw, c.dh, c.dw, c.groups};
    ag::NodeP y = ag::conv2d(g, g.constant(x), g.constant(w), g.constant(b), sp);
    CHECK(y->val.same_shape(want));
    CHECK(max_abs_diff(y->val, want) < 1e-10);
  }
}

TEST_CASE("conv3d matches the serial reference") {
  Rng rng(22);
  struct Cfg {
    int cin, cout, t, h, w, kt, kh, kw, st, sh, sw, pt, ph, pw, dt, dh, dw, groups;
  };
  const Cfg cfgs[] = {
      {2, 4, 5, 6, 6, 3, 3, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1},
      {4, 4, 6, 5, 5, 2, 3, 3, 2, 2, 2, 0, 1, 1, 1, 1, 1, 2},
      {3, 5, 7, 4, 4, 3, 1, 1, 1, 1, 1, 2, 0, 0, 2, 1, 1, 1},
  };
  for (const auto& c : cfgs) {
    CAPTURE(c.kt);
    Tensor x = randn({c.cin, c.t, c.h, c.w}, rng);
    Tensor w = randn({c.cout, c.cin / c.groups, c.kt, c.kh, c.kw}, rng);
    Tensor b = randn({c.cout}, rng);
    Tensor want = ref::conv3d_direct(x, w, b, c.st, c.sh, c.sw, c.pt, c.ph, c.pw, c.dt, c.dh,
                                     c.dw, c.groups);
    ag::Graph g(false);
    ag::Conv3Spec sp{c.st, c.sh, c.sw, c.pt, c.ph, c.pw, c.dt, c.dh, c.dw, c.groups};
    ag::NodeP y = ag::conv3d(g, g.constant(x), g.constant(w), g.constant(b), sp);
    CHECK(y->val.same_shape(want));
    CHECK(max_abs_diff(y->val, want) < 1e-10);
  }
}

TEST_CASE("tconv3d matches the serial reference") {
  Rng rng(23);
  struct Cfg {
    int cin, cout, t, h, w, kt, kh, kw, st, sh, sw, pt, ph, pw, groups;
  };
  const Cfg cfgs[] = {
      {3, 4, 3, 4, 4, 2, 2, 2, 2, 2, 2, 0, 0, 0, 1},
      {4, 6, 2, 3, 5, 3, 3, 3, 1, 2, 1, 1, 1, 0, 2},
      {2, 2, 4, 3, 3, 1, 3, 3, 1, 1, 1, 0, 1, 1, 1},
  };
  for (const auto& c : cfgs) {
    CAPTURE(c.st);
    Tensor x = randn({c.cin, c.t, c.h, c.w}, rng);
    Tensor w = randn({c.cin, c.cout / c.groups, c.kt, c.kh, c.kw}, rng);
    Tensor b = randn({c.cout}, rng);
    Tensor want = ref::tconv3d_direct(x, w, b, c.st, c.sh, c.sw, c.pt, c.ph, c.pw, 1, 1, 1,
                                      c.groups);
    ag::Graph g(false);
    ag::Conv3Spec sp{c.st, c.sh, c.sw, c.pt, c.ph, c.pw, 1, 1, 1, c.groups};
    ag::NodeP y = ag::tconv3d(g, g.constant(x), g.constant(w), g.constant(b), sp);
    CHECK(y->val.same_shape(want));
    CHECK(max_abs_diff(y->val, want) < 1e-10);
  }
}

TEST_CASE("bilinear warp semantics") {
  Rng rng(31);
  const int c = 2, h = 6, w = 7;
  Tensor src = randn({c, h, w}, rng);

  SUBCASE("zero flow is identity") {
    Tensor flow = Tensor::zeros({2, h, w});
    Tensor out({c, h, w});
    kern::warp_bilinear(src.data(), flow.data(), out.data(), c, h, w);
    CHECK(max_abs_diff(out, src) == 0);
  }
  SUBCASE("integer flow shifts, outside reads zero") {
    Tensor flow({2, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        flow.at({0, y, x}) = 2;   // sample two columns to the right
        flow.at({1, y, x}) = -1;  // one row up
      }
    Tensor out({c, h, w});
    kern::warp_bilinear(src.data(), flow.data(), out.data(), c, h, w);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sx = x + 2, sy = y - 1;
          const real want =
              (sx >= 0 && sx < w && sy >= 0 && sy < h) ? src.at({ch, sy, sx}) : real(0);
          CHECK(out.at({ch, y, x}) == doctest::Approx(want).epsilon(1e-12));
        }
  }
  SUBCASE("fractional flow matches the serial reference") {
    Tensor flow = randn({2, h, w}, rng, 1.7);
    Tensor out({c, h, w});
    kern::warp_bilinear(src.data(), flow.data(), out.data(), c, h, w);
    Tensor want = ref::warp_direct(src, flow);
    CHECK(max_abs_diff(out, want) < 1e-12);
  }
  SUBCASE("fractional interpolation at a known point") {
    Tensor flow = Tensor::zeros({2, h, w});
    flow.at({0, 2, 3}) = 0.25;
    flow.at({1, 2, 3}) = 0.5;
    Tensor out({c, h, w});
    kern::warp_bilinear(src.data(), flow.data(), out.data(), c, h, w);
    const real want = 0.5 * (0.75 * src.at({0, 2, 3}) + 0.25 * src.at({0, 2, 4})) +
                      0.5 * (0.75 * src.at({0, 3, 3}) + 0.25 * src.at({0, 3, 4}));
    CHECK(out.at({0, 2, 3}) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("sparse reference convs agree with dense masked computation") {
  Rng rng(41);
  ref::SparseGrid grid;
  grid.t = 4;
  grid.h = 6;
  grid.w = 6;
  grid.channels = 3;
  for (int i = 0; i < 14; ++i) {
    int t = static_cast<int>(rng.uniform_int(0, grid.t - 1));
    int y = static_cast<int>(rng.uniform_int(0, grid.h - 1));
    int x = static_cast<int>(rng.uniform_int(0, grid.w - 1));
    std::vector<real> f(3);
    for (auto& v : f) v = rng.normal();
    grid.sites[{t, y, x}] = f;
  }
  const int cout = 4;
  Tensor w = randn({cout, 3, 3, 3, 3}, rng);
  Tensor b = randn({cout}, rng);

  SUBCASE("submanifold: dense conv then mask, active set preserved") {
    ref::SparseGrid out = ref::sparse_submanifold_conv(grid, w, b, false);
    CHECK(out.sites.size() == grid.sites.size());
    Tensor dense = ref::conv3d_direct(grid.densify(), w, b, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1);
    Tensor got = out.densify();
    for (const auto& [key, feat] : out.sites) {
      const auto [t, y, x] = key;
      for (int co = 0; co < cout; ++co)
        CHECK(got.at({co, t, y, x}) == doctest::Approx(dense.at({co, t, y, x})).epsilon(1e-10));
    }
  }
  SUBCASE("strided: active set dilates by the receptive field") {
    ref::SparseGrid out = ref::sparse_strided_conv(grid, w, b, 2, 2, 2, 1, 1, 1, false);
    CHECK(out.t == 2);
    CHECK(out.h == 3);
    CHECK(out.w == 3);
    Tensor dense = ref::conv3d_direct(grid.densify(), w, b, 2, 2, 2, 1, 1, 1, 1, 1, 1, 1);
    // every active output matches the dense value; inactive outputs have no site
    for (const auto& [key, feat] : out.sites) {
      const auto [t, y, x] = key;
      for (int co = 0; co < cout; ++co)
        CHECK(feat[static_cast<size_t>(co)] ==
              doctest::Approx(dense.at({co, t, y, x})).epsilon(1e-10));
    }
    // an output site is active iff some input site falls in its receptive field
    for (int t = 0; t < out.t; ++t)
      for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
          bool any = false;
          for (const auto& [key, feat] : grid.sites) {
            const auto [it, iy, ix] = key;
            if (it >= t * 2 - 1 && it <= t * 2 + 1 && iy >= y * 2 - 1 && iy <= y * 2 + 1 &&
                ix >= x * 2 - 1 && ix <= x * 2 + 1)
              any = true;
          }
          CHECK(any == (out.sites.count({t, y, x}) > 0));
        }
  }
}

TEST_CASE("adamw semantics") {
  nn::ParamStore ps;
  ag::Param w, b;
  w.init_zeros({3});
  w.value[0] = 1.0;
  w.value[1] = -2.0;
  w.value[2] = 0.5;
  b.init_zeros({2});
  b.value[0] = 4.0;
  b.value[1] = -1.0;
  ps.reg(w, "w", true);
  ps.reg(b, "b", false);

  SUBCASE("zero grads shrink decayed params by exactly lr*wd*theta") {
    nn::AdamW opt(0.01);
    const real lr = 0.1;
    Tensor w0 = w.value, b0 = b.value;
    opt.step(ps, lr);
    for (int i = 0; i < 3; ++i)
      CHECK(w.value[i] == doctest::Approx(w0[i] * (1 - lr * 0.01)).epsilon(1e-14));
    for (int i = 0; i < 2; ++i) CHECK(b.value[i] == b0[i]);  // decay-exempt, bitwise
  }
  SUBCASE("first step with unit grad moves by about lr") {
    nn::AdamW opt(0.0);
    w.grad[0] = 1.0;
    w.grad[1] = 1.0;
    w.grad[2] = 1.0;
    Tensor w0 = w.value;
    opt.step(ps, 0.05);
    // mhat = g, vhat = g^2, update = g/(|g|+eps) ~= 1
    for (int i = 0; i < 3; ++i) CHECK(w.value[i] == doctest::Approx(w0[i] - 0.05).epsilon(1e-6));
  }
  SUBCASE("grads are zeroed after the step") {
    nn::AdamW opt(0.0);
    w.grad[1] = 3.0;
    opt.step(ps, 0.01);
    CHECK(w.grad[1] == 0.0);
  }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  const real lr0 = 2.5e-4, lrmin = 1e-6;
  CHECK(nn::cosine_lr(0, 1000, lr0, lrmin) == doctest::Approx(lr0).epsilon(1e-12));
  CHECK(nn::cosine_lr(1000, 1000, lr0, lrmin) == doctest::Approx(lrmin).epsilon(1e-12));
  CHECK(nn::cosine_lr(500, 1000, lr0, lrmin) ==
        doctest::Approx((lr0 + lrmin) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(nn::cosine_lr(0, 0, lr0, lrmin), ConfigError);
  CHECK_THROWS_AS(nn::cosine_lr(5, 4, lr0, lrmin), ConfigError);
}

TEST_CASE("archive round trip, compression, corruption detection") {
  Rng rng(51);
  ser::Archive a;
  a.meta["step"] = 123;
  a.meta["note"] = "fixture";
  a.add("alpha", randn({4, 5}, rng));
  Tensor big = Tensor::zeros({64, 64});  // compressible
  for (int i = 0; i < 64; ++i) big[i * 64 + i] = 1.0;
  a.add("eye", big);
  const char* path = "archive_test.bin";

  SUBCASE("compressed round trip is bitwise") {
    a.save(path, true);
    ser::Archive b = ser::Archive::load(path);
    CHECK(b.meta["step"] == 123);
    REQUIRE(b.arrays.size() == 2);
    CHECK(b.arrays[0].first == "alpha");
    CHECK(max_abs_diff(b.arrays[0].second, a.arrays[0].second) == 0);
    CHECK(max_abs_diff(*b.find("eye"), big) == 0);
    std::remove(path);
  }
  SUBCASE("uncompressed round trip is bitwise") {
    a.save(path, false);
    ser::Archive b = ser::Archive::load(path);
    CHECK(max_abs_diff(*b.find("alpha"), a.arrays[0].second) == 0);
    std::remove(path);
  }
  SUBCASE("flipping a byte is detected") {
    a.save(path, true);
    {
      std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(30);
      char c;
      f.seekg(30);
      f.get(c);
      f.seekp(30);
      c = static_cast<char>(c ^ 0x40);
      f.put(c);
    }
    CHECK_THROWS_AS(ser::Archive::load(path), DataError);
    std::remove(path);
  }
  SUBCASE("missing file is a data error") {
    CHECK_THROWS_AS(ser::Archive::load("no_such_file.bin"), DataError);
  }
}

TEST_CASE("deterministic reductions are insensitive to content order pathologies") {
  // det_sum uses fixed-size blocks; check against long-double accumulation.
  Rng rng(61);
  const int64_t n = 10007;
  std::vector<real> xs(static_cast<size_t>(n));
  long double acc = 0;
  for (auto& v : xs) {
    v = rng.normal() * 1e6;
    acc += v;
  }
  const real got = kern::det_sum(xs.data(), n);
  CHECK(std::abs(got - static_cast<real>(acc)) < 1e-4);
  // repeated calls are bitwise identical
  CHECK(kern::det_sum(xs.data(), n) == got);
}

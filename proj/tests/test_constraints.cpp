#include "fb/constraints.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "fb/rng.hpp"
#include "fb/tensor.hpp"

namespace {

using fb::CropRegion;
using fb::ImageTensor;
using fb::Rng;
using fb::Tensor3;

// Independent elementwise oracle for both clamp-style kernels.
double clamp_oracle(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

Tensor3 random_tensor(int h, int w, int c, Rng& rng, double lo, double hi) {
  Tensor3 t(h, w, c);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

ImageTensor random_image(int h, int w, int c, Rng& rng) {
  Tensor3 t(h, w, c);
  for (double& v : t.data()) v = rng.uniform01();
  return ImageTensor(std::move(t));
}

TEST(ProjectLinf, SaturatesToRadius) {
  Tensor3 delta(3, 3, 3, 0.5);
  const double eps = 8.0 / 255.0;
  Tensor3 out = fb::project_linf(delta, eps);
  for (double v : out.data()) EXPECT_EQ(v, eps);
}

TEST(ProjectLinf, InteriorPointUnchangedBitwise) {
  Rng rng(7);
  Tensor3 delta = random_tensor(4, 5, 3, rng, -0.01, 0.01);
  Tensor3 out = fb::project_linf(delta, 0.05);
  EXPECT_EQ(out, delta);
}

TEST(ProjectLinf, MixedSignsClampedToBall) {
  Tensor3 delta(1, 3, 1);
  delta(0, 0, 0) = -0.1;
  delta(0, 1, 0) = 0.0;
  delta(0, 2, 0) = 0.1;
  Tensor3 out = fb::project_linf(delta, 0.05);
  EXPECT_EQ(out(0, 0, 0), -0.05);
  EXPECT_EQ(out(0, 1, 0), 0.0);
  EXPECT_EQ(out(0, 2, 0), 0.05);
}

TEST(ProjectLinf, MatchesClampOracle) {
  Rng rng(11);
  Tensor3 delta = random_tensor(6, 7, 3, rng, -0.4, 0.4);
  const double eps = 0.1;
  Tensor3 out = fb::project_linf(delta, eps);
  for (std::size_t i = 0; i < delta.data().size(); ++i) {
    EXPECT_EQ(out.data()[i], clamp_oracle(delta.data()[i], -eps, eps));
  }
}

TEST(ProjectLinf, NegativeEpsilonRejected) {
  Tensor3 delta(2, 2, 1, 0.0);
  EXPECT_THROW(fb::project_linf(delta, -1e-9), std::invalid_argument);
}

TEST(ProjectLinf, ZeroEpsilonGivesZero) {
  Rng rng(3);
  Tensor3 delta = random_tensor(3, 3, 1, rng, -1.0, 1.0);
  Tensor3 out = fb::project_linf(delta, 0.0);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(ClipToImageBox, UpperFace) {
  ImageTensor x(Tensor3(1, 1, 1, 0.9));
  Tensor3 delta(1, 1, 1, 0.2);
  Tensor3 out = fb::clip_to_image_box(x, delta);
  EXPECT_NEAR(out(0, 0, 0), 0.1, 1e-15);
  EXPECT_LE(x.tensor()(0, 0, 0) + out(0, 0, 0), 1.0);
}

TEST(ClipToImageBox, LowerFace) {
  ImageTensor x(Tensor3(1, 1, 1, 0.0));
  Tensor3 delta(1, 1, 1, -0.3);
  Tensor3 out = fb::clip_to_image_box(x, delta);
  EXPECT_EQ(out(0, 0, 0), 0.0);
}

TEST(ClipToImageBox, MatchesClampOracleAndStaysInBox) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    ImageTensor x = random_image(5, 4, 3, rng);
    Tensor3 delta = random_tensor(5, 4, 3, rng, -1.5, 1.5);
    Tensor3 out = fb::clip_to_image_box(x, delta);
    for (std::size_t i = 0; i < delta.data().size(); ++i) {
      const double xi = x.tensor().data()[i];
      const double expected =
          clamp_oracle(xi + delta.data()[i], 0.0, 1.0) - xi;
      EXPECT_NEAR(out.data()[i], expected, 1e-12);
      const double applied = xi + out.data()[i];
      EXPECT_GE(applied, 0.0);
      EXPECT_LE(applied, 1.0);
    }
  }
}

TEST(ClipToImageBox, ShapeMismatchRejected) {
  ImageTensor x(Tensor3(2, 2, 1, 0.5));
  Tensor3 delta(2, 3, 1, 0.0);
  EXPECT_THROW(fb::clip_to_image_box(x, delta), std::invalid_argument);
}

TEST(ClipToImageBox, IdempotentBitwise) {
  Rng rng(17);
  ImageTensor x = random_image(6, 6, 3, rng);
  Tensor3 delta = random_tensor(6, 6, 3, rng, -2.0, 2.0);
  Tensor3 once = fb::clip_to_image_box(x, delta);
  Tensor3 twice = fb::clip_to_image_box(x, once);
  EXPECT_EQ(once, twice);
}

TEST(Composition, BothConstraintsHoldSimultaneously) {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const double eps = rng.uniform(0.0, 0.3);
    ImageTensor x = random_image(4, 4, 3, rng);
    Tensor3 delta = random_tensor(4, 4, 3, rng, -1.0, 1.0);
    Tensor3 out = fb::clip_to_image_box(x, fb::project_linf(delta, eps));
    for (std::size_t i = 0; i < out.data().size(); ++i) {
      EXPECT_LE(std::fabs(out.data()[i]), eps);
      const double applied = x.tensor().data()[i] + out.data()[i];
      EXPECT_GE(applied, 0.0);
      EXPECT_LE(applied, 1.0);
    }
    // Projection is idempotent.
    EXPECT_EQ(fb::project_linf(out, eps), out);
  }
}

TEST(Kernels, ElementwiseMonotone) {
  Rng rng(59);
  for (int trial = 0; trial < 100; ++trial) {
    const double eps = rng.uniform(0.0, 0.4);
    ImageTensor x = random_image(3, 3, 1, rng);
    Tensor3 lo = random_tensor(3, 3, 1, rng, -1.0, 1.0);
    Tensor3 hi = lo;
    for (double& v : hi.data()) v += rng.uniform(0.0, 0.5);
    const Tensor3 plo = fb::project_linf(lo, eps);
    const Tensor3 phi = fb::project_linf(hi, eps);
    const Tensor3 clo = fb::clip_to_image_box(x, lo);
    const Tensor3 chi = fb::clip_to_image_box(x, hi);
    for (std::size_t i = 0; i < lo.data().size(); ++i) {
      EXPECT_LE(plo.data()[i], phi.data()[i]);
      EXPECT_LE(clo.data()[i], chi.data()[i]);
    }
  }
}

TEST(Kernels, SinglePrecisionPathAgrees) {
  Rng rng(23);
  std::vector<double> xd(60), dd(60);
  for (auto& v : xd) v = rng.uniform01();
  for (auto& v : dd) v = rng.uniform(-0.5, 0.5);
  std::vector<float> xf(xd.begin(), xd.end());
  std::vector<float> df(dd.begin(), dd.end());

  const auto pd = fb::project_linf(dd, 0.1);
  const auto pf = fb::project_linf(df, 0.1f);
  for (std::size_t i = 0; i < pd.size(); ++i) {
    EXPECT_NEAR(pd[i], static_cast<double>(pf[i]), 1e-6);
  }
  const auto cd = fb::clip_to_image_box(xd, dd);
  const auto cf = fb::clip_to_image_box(xf, df);
  for (std::size_t i = 0; i < cd.size(); ++i) {
    EXPECT_NEAR(cd[i], static_cast<double>(cf[i]), 1e-6);
  }
}

TEST(NearestResize, IntegerUpscaleReplicatesBlocks) {
  Tensor3 in(2, 2, 1);
  in(0, 0, 0) = 1.0;
  in(0, 1, 0) = 2.0;
  in(1, 0, 0) = 3.0;
  in(1, 1, 0) = 4.0;
  Tensor3 out = fb::nearest_resize(in, 4, 4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      EXPECT_EQ(out(i, j, 0), in(i / 2, j / 2, 0));
    }
  }
}

TEST(NearestResize, IdentityIsBitIdentical) {
  Rng rng(29);
  Tensor3 in = random_tensor(5, 7, 3, rng, -1.0, 1.0);
  EXPECT_EQ(fb::nearest_resize(in, 5, 7), in);
}

TEST(NearestResize, DownscaleMatchesIndexOracle) {
  Rng rng(31);
  Tensor3 in = random_tensor(3, 3, 2, rng, -1.0, 1.0);
  Tensor3 out = fb::nearest_resize(in, 2, 2);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const int si = static_cast<int>(std::floor(i * 3.0 / 2.0));
      const int sj = static_cast<int>(std::floor(j * 3.0 / 2.0));
      for (int c = 0; c < 2; ++c) {
        EXPECT_EQ(out(i, j, c), in(si, sj, c));
      }
    }
  }
}

TEST(NearestResize, ArbitraryShapesMatchIndexOracle) {
  Rng rng(37);
  Tensor3 in = random_tensor(7, 5, 3, rng, -1.0, 1.0);
  for (auto [oh, ow] : {std::pair{13, 11}, {4, 9}, {1, 1}, {7, 5}}) {
    Tensor3 out = fb::nearest_resize(in, oh, ow);
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const int si = static_cast<int>(std::floor(i * 7.0 / oh));
        const int sj = static_cast<int>(std::floor(j * 5.0 / ow));
        for (int c = 0; c < 3; ++c) {
          EXPECT_EQ(out(i, j, c), in(si, sj, c));
        }
      }
    }
  }
}

TEST(NearestResize, NeverIntroducesNewValues) {
  Rng rng(41);
  Tensor3 in = random_tensor(6, 4, 1, rng, -1.0, 1.0);
  std::set<double> source(in.data().begin(), in.data().end());
  Tensor3 out = fb::nearest_resize(in, 17, 9);
  for (double v : out.data()) EXPECT_TRUE(source.count(v));
  EXPECT_LE(out.max_abs(), in.max_abs());
}

TEST(NearestResize, NonPositiveTargetRejected) {
  Tensor3 in(2, 2, 1, 0.0);
  EXPECT_THROW(fb::nearest_resize(in, 0, 4), std::invalid_argument);
  EXPECT_THROW(fb::nearest_resize(in, 4, -1), std::invalid_argument);
}

TEST(NearestResizeAdjoint, DotProductIdentity) {
  Rng rng(43);
  for (auto [nh, nw, oh, ow] :
       {std::tuple{4, 4, 9, 7}, {5, 3, 2, 2}, {6, 6, 6, 6}, {2, 7, 13, 5}}) {
    Tensor3 delta = random_tensor(nh, nw, 3, rng, -1.0, 1.0);
    Tensor3 y = random_tensor(oh, ow, 3, rng, -1.0, 1.0);
    Tensor3 fwd = fb::nearest_resize(delta, oh, ow);
    Tensor3 adj = fb::nearest_resize_adjoint(y, nh, nw);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < fwd.data().size(); ++i) {
      lhs += fwd.data()[i] * y.data()[i];
    }
    for (std::size_t i = 0; i < adj.data().size(); ++i) {
      rhs += delta.data()[i] * adj.data()[i];
    }
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(SampleCropRegion, FullFractionForcesWholeImage) {
  Rng rng(47);
  CropRegion r = fb::sample_crop_region(20, 30, 1.0, 1.0, rng);
  EXPECT_EQ(r, (CropRegion{0, 0, 20, 30}));
}

TEST(SampleCropRegion, DeterministicUnderSeed) {
  Rng a(123), b(123);
  for (int i = 0; i < 20; ++i) {
    CropRegion ra = fb::sample_crop_region(50, 40, 0.3, 0.9, a);
    CropRegion rb = fb::sample_crop_region(50, 40, 0.3, 0.9, b);
    EXPECT_EQ(ra, rb);
  }
}

TEST(SampleCropRegion, TinyImageRejected) {
  Rng rng(1);
  EXPECT_THROW(fb::sample_crop_region(1, 10, 0.3, 0.9, rng),
               std::invalid_argument);
  EXPECT_THROW(fb::sample_crop_region(10, 1, 0.3, 0.9, rng),
               std::invalid_argument);
}

TEST(SampleCropRegion, BadFractionsRejected) {
  Rng rng(1);
  EXPECT_THROW(fb::sample_crop_region(10, 10, 0.0, 0.9, rng),
               std::invalid_argument);
  EXPECT_THROW(fb::sample_crop_region(10, 10, 0.9, 0.3, rng),
               std::invalid_argument);
  EXPECT_THROW(fb::sample_crop_region(10, 10, 0.3, 1.1, rng),
               std::invalid_argument);
}

// Monte-Carlo uniformity of crop sizes against a counting oracle: sizes land
// in [round(0.3*100), round(0.9*100)] and each bin's count stays near the
// uniform expectation (chi-square on 61 bins).
TEST(SampleCropRegion, SizeDistributionUniform) {
  Rng rng(2026);
  const int n = 10000;
  std::vector<int> h_counts(101, 0), w_counts(101, 0);
  for (int i = 0; i < n; ++i) {
    CropRegion r = fb::sample_crop_region(100, 100, 0.3, 0.9, rng);
    ASSERT_GE(r.crop_height, 30);
    ASSERT_LE(r.crop_height, 90);
    ASSERT_GE(r.crop_width, 30);
    ASSERT_LE(r.crop_width, 90);
    ASSERT_GE(r.top, 0);
    ASSERT_LE(r.top + r.crop_height, 100);
    ASSERT_GE(r.left, 0);
    ASSERT_LE(r.left + r.crop_width, 100);
    ++h_counts[r.crop_height];
    ++w_counts[r.crop_width];
  }
  auto chi_square = [&](const std::vector<int>& counts) {
    const double expected = static_cast<double>(n) / 61.0;
    double stat = 0.0;
    for (int s = 30; s <= 90; ++s) {
      const double d = counts[s] - expected;
      stat += d * d / expected;
    }
    return stat;
  };
  // 99.9th percentile of chi-square with 60 dof is ~99.6.
  EXPECT_LT(chi_square(h_counts), 110.0);
  EXPECT_LT(chi_square(w_counts), 110.0);
}

TEST(Crop, ExtractsRegion) {
  Rng rng(53);
  Tensor3 t = random_tensor(6, 8, 3, rng, 0.0, 1.0);
  CropRegion r{2, 3, 3, 4};
  Tensor3 c = fb::crop(t, r);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      for (int ch = 0; ch < 3; ++ch) {
        EXPECT_EQ(c(i, j, ch), t(2 + i, 3 + j, ch));
      }
    }
  }
  EXPECT_THROW(fb::crop(t, CropRegion{5, 0, 3, 3}), std::invalid_argument);
}

TEST(Perturbation, ValidatesBallAndShape) {
  fb::Perturbation p;
  p.delta = Tensor3(2, 2, 1, 0.1);
  p.epsilon = 0.1;
  p.native_height = 2;
  p.native_width = 2;
  EXPECT_NO_THROW(p.validate());
  p.delta(0, 0, 0) = 0.11;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.delta(0, 0, 0) = 0.1;
  p.native_width = 3;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

}  // namespace

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "equirl/group.hpp"

using namespace equirl;

TEST(GroupElement, ComposeInverseIdentity) {
  for (int n : {1, 2, 4, 8, 12}) {
    for (int a = 0; a < n; ++a) {
      GroupElement g(n, a);
      EXPECT_TRUE(g.compose(g.inverse()).is_identity());
      EXPECT_TRUE(g.inverse().compose(g).is_identity());
      for (int b = 0; b < n; ++b) {
        GroupElement h(n, b);
        EXPECT_EQ(g.compose(h).index, (a + b) % n);
      }
    }
  }
}

TEST(GroupElement, NegativeIndexNormalizes) {
  GroupElement g(4, -1);
  EXPECT_EQ(g.index, 3);
  EXPECT_THROW(GroupElement(0, 0), std::invalid_argument);
}

TEST(Representation, Dimensions) {
  EXPECT_EQ(Representation::trivial(4).dim(), 1u);
  EXPECT_EQ(Representation::standard(4).dim(), 2u);
  EXPECT_EQ(Representation::regular(4).dim(), 4u);
  EXPECT_EQ(Representation::regular(8).dim(), 8u);
  auto sum = Representation::direct_sum(
      {Representation::trivial(4), Representation::standard(4), Representation::regular(4)});
  EXPECT_EQ(sum.dim(), 7u);
}

TEST(Representation, StandardQuarterTurnIsExact) {
  Mat m = rep_matrix(Representation::standard(4), GroupElement(4, 1));
  EXPECT_EQ(m(0, 0), 0.0);
  EXPECT_EQ(m(0, 1), -1.0);
  EXPECT_EQ(m(1, 0), 1.0);
  EXPECT_EQ(m(1, 1), 0.0);
  // n=8, index 2 is also a quarter turn
  Mat m8 = rep_matrix(Representation::standard(8), GroupElement(8, 2));
  EXPECT_EQ(m8(0, 0), 0.0);
  EXPECT_EQ(m8(1, 0), 1.0);
}

TEST(Representation, HomomorphismProperty) {
  for (int n : {4, 8}) {
    for (auto rep : {Representation::standard(n), Representation::regular(n),
                     Representation::direct_sum({Representation::trivial(n),
                                                 Representation::standard(n),
                                                 Representation::regular(n)})}) {
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
          Mat lhs = rep_matrix(rep, GroupElement(n, a).compose(GroupElement(n, b)));
          Mat rhs = rep_matrix(rep, GroupElement(n, a)).mul(rep_matrix(rep, GroupElement(n, b)));
          for (std::size_t i = 0; i < lhs.rows; ++i)
            for (std::size_t j = 0; j < lhs.cols; ++j)
              EXPECT_NEAR(lhs(i, j), rhs(i, j), 1e-12);
        }
    }
  }
}

TEST(ActOnVector, StandardRotatesPlane) {
  FieldType f(4, {Representation::standard(4)});
  std::vector<double> v{1.0, 0.0};
  auto w = act_on_vector(f, GroupElement(4, 1), v);
  EXPECT_EQ(w[0], 0.0);
  EXPECT_EQ(w[1], 1.0);
}

TEST(ActOnVector, RegularCyclesCoordinates) {
  FieldType f(4, {Representation::regular(4)});
  std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  auto w = act_on_vector(f, GroupElement(4, 1), v);
  EXPECT_EQ(w, (std::vector<double>{4.0, 1.0, 2.0, 3.0}));
}

TEST(ActOnVector, TrivialFixesEverything) {
  FieldType f(8, {Representation::trivial(8)});
  auto w = act_on_vector(f, GroupElement(8, 3), std::vector<double>{0.7});
  EXPECT_EQ(w[0], 0.7);
}

TEST(ActOnVector, MixedFieldActsBlockwise) {
  FieldType f(4, {Representation::trivial(4), Representation::standard(4),
                  Representation::regular(4)});
  std::vector<double> v{5.0, 1.0, 0.0, 1.0, 2.0, 3.0, 4.0};
  auto w = act_on_vector(f, GroupElement(4, 1), v);
  EXPECT_EQ(w, (std::vector<double>{5.0, 0.0, 1.0, 4.0, 1.0, 2.0, 3.0}));
}

TEST(FeatureMapAction, QuarterTurnPermutesPixels) {
  FieldType f = FieldType::trivials(4, 1);
  FeatureMap<double> m(f, 2, 2);
  m.at(0, 0, 0) = 1;
  m.at(0, 0, 1) = 2;
  m.at(0, 1, 0) = 3;
  m.at(0, 1, 1) = 4;
  auto r = act_on_feature_map(f, GroupElement(4, 1), m);
  EXPECT_EQ(r.at(0, 0, 0), 2.0);
  EXPECT_EQ(r.at(0, 0, 1), 4.0);
  EXPECT_EQ(r.at(0, 1, 0), 1.0);
  EXPECT_EQ(r.at(0, 1, 1), 3.0);
}

TEST(FeatureMapAction, NonSquareRejected) {
  FieldType f = FieldType::trivials(4, 1);
  FeatureMap<double> m(f, 2, 3);
  EXPECT_THROW(act_on_feature_map(f, GroupElement(4, 1), m), std::invalid_argument);
}

TEST(FeatureMapAction, ComposedActionIsExactForQuarterTurns) {
  std::mt19937_64 rng(7);
  FieldType f(4, {Representation::trivial(4), Representation::standard(4),
                  Representation::regular(4), Representation::trivial(4)});
  FeatureMap<double> m(f, 8, 8);
  for (auto& x : m.data) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) {
      GroupElement g1(4, a), g2(4, b);
      auto lhs = act_on_feature_map(f, g1, act_on_feature_map(f, g2, m));
      auto rhs = act_on_feature_map(f, g1.compose(g2), m);
      for (std::size_t i = 0; i < lhs.data.size(); ++i) EXPECT_EQ(lhs.data[i], rhs.data[i]);
    }
}

TEST(FeatureMapAction, IdentityIsExact) {
  std::mt19937_64 rng(11);
  FieldType f = FieldType::regulars(8, 2);
  FeatureMap<double> m(f, 7, 7);
  for (auto& x : m.data) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto r = act_on_feature_map(f, GroupElement::identity(8), m);
  EXPECT_EQ(r.data, m.data);
}

TEST(FeatureMapAction, QuarterTurnPreservesNorm) {
  std::mt19937_64 rng(3);
  FieldType f(4, {Representation::standard(4), Representation::regular(4)});
  FeatureMap<double> m(f, 9, 9);
  for (auto& x : m.data) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto r = act_on_feature_map(f, GroupElement(4, 1), m);
  double n0 = 0, n1 = 0;
  for (double x : m.data) n0 += x * x;
  for (double x : r.data) n1 += x * x;
  EXPECT_NEAR(n0, n1, 1e-12);
}

TEST(FeatureMapAction, EighthTurnChannelsPermuteExactly) {
  // C_8 regular channels permute exactly even though pixels interpolate.
  FieldType f = FieldType::regulars(8, 1);
  FeatureMap<double> m(f, 1, 1);
  for (int i = 0; i < 8; ++i) m.at(i, 0, 0) = i + 1;
  auto r = act_on_feature_map(f, GroupElement(8, 1), m);
  EXPECT_EQ(r.at(0, 0, 0), 8.0);
  EXPECT_EQ(r.at(1, 0, 0), 1.0);
  EXPECT_EQ(r.at(7, 0, 0), 7.0);
}

TEST(RotatePixels, BilinearAgreesWithExactAtQuarterTurn) {
  std::mt19937_64 rng(5);
  FieldType f = FieldType::trivials(4, 1);
  FeatureMap<double> m(f, 16, 16);
  for (auto& x : m.data) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto exact = rotate_pixels_quarter(m, 1);
  auto interp = rotate_pixels(m, kPi / 2.0);
  EXPECT_EQ(exact.data, interp.data);
}

TEST(RotatePixels, SmallAngleRoundTripIsClose) {
  // Bilinear resampling is lossy; a rotate/unrotate round trip should still
  // reproduce a smooth map closely away from the border.
  FieldType f = FieldType::trivials(8, 1);
  std::size_t n = 33;
  FeatureMap<double> m(f, n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double x = (double(j) - 16.0) / 16.0, y = (16.0 - double(i)) / 16.0;
      m.at(0, i, j) = std::exp(-2.0 * (x * x + y * y));
    }
  auto r = rotate_pixels(rotate_pixels(m, kPi / 4.0), -kPi / 4.0);
  for (std::size_t i = 10; i < n - 10; ++i)
    for (std::size_t j = 10; j < n - 10; ++j)
      EXPECT_NEAR(r.at(0, i, j), m.at(0, i, j), 2e-2);
}

TEST(RotatePixels, BackgroundFillsCorners) {
  FieldType f = FieldType::trivials(8, 1);
  FeatureMap<double> m(f, 9, 9);
  for (auto& x : m.data) x = 1.0;
  auto r = rotate_pixels(m, kPi / 4.0, 0.5);
  // corner pixel leaves the source square under an eighth turn
  EXPECT_NEAR(r.at(0, 0, 0), 0.5, 1e-12);
  EXPECT_NEAR(r.at(0, 4, 4), 1.0, 1e-12);
}

TEST(RotateFeatureMap, ContinuousAngleRotatesStandardChannels) {
  FieldType f(4, {Representation::standard(4)});
  FeatureMap<double> m(f, 1, 1);
  m.at(0, 0, 0) = 1.0;
  m.at(1, 0, 0) = 0.0;
  double th = 0.3;
  auto r = rotate_feature_map(th, m);
  EXPECT_NEAR(r.at(0, 0, 0), std::cos(th), 1e-12);
  EXPECT_NEAR(r.at(1, 0, 0), std::sin(th), 1e-12);
}

TEST(RotateXY, QuarterTurnExact) {
  double x = 1.0, y = 0.0;
  rotate_xy(kPi / 2.0, x, y);
  EXPECT_EQ(x, 0.0);
  EXPECT_EQ(y, 1.0);
  rotate_xy(-kPi / 2.0, x, y);
  EXPECT_EQ(x, 1.0);
  EXPECT_EQ(y, 0.0);
}

// Uncertainty (heatmap STD), masking and the mask-weighted distance.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "handssl/pseudolabel.hpp"

using namespace handssl;

namespace {

// Independent oracle for the heatmap STD, looping columns first.
double std_oracle(const Tensor& hhat, int i, int j, double u, double v) {
  double acc = 0;
  for (int x = 0; x < hhat.w; ++x)
    for (int y = 0; y < hhat.h; ++y) {
      const double du = u - x, dv = v - y;
      acc += hhat.at(i, j, y, x) * (du * du + dv * dv);
    }
  return std::sqrt(acc);
}

Tensor gaussian_map(int size, double cu, double cv, double sigma) {
  Tensor t(1, 1, size, size);
  double sum = 0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double d2 = (x - cu) * (x - cu) + (y - cv) * (y - cv);
      t.at(0, 0, y, x) = std::exp(-d2 / (2 * sigma * sigma));
      sum += t.at(0, 0, y, x);
    }
  for (auto& v : t.v) v /= sum;
  return t;
}

}  // namespace

TEST_CASE("heatmap_std") {
  SECTION("point mass has zero spread") {
    Tensor t(1, 1, 8, 8);
    t.at(0, 0, 5, 3) = 1.0;
    REQUIRE(heatmap_std(t.plane(0, 0), 8, 8, 3.0, 5.0) == 0.0);
  }

  SECTION("two half masses two pixels apart give exactly 1") {
    Tensor t(1, 1, 3, 3);
    t.at(0, 0, 0, 0) = 0.5;
    t.at(0, 0, 2, 0) = 0.5;
    REQUIRE(heatmap_std(t.plane(0, 0), 3, 3, 0.0, 1.0) == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("uniform map matches the loop oracle to 1e-9") {
    for (int n : {3, 5, 9}) {
      Tensor t(1, 1, n, n);
      t.fill(1.0 / (n * n));
      const double c = 0.5 * (n - 1);
      REQUIRE(heatmap_std(t.plane(0, 0), n, n, c, c) ==
              Catch::Approx(std_oracle(t, 0, 0, c, c)).margin(1e-9));
    }
  }

  SECTION("random maps match the loop oracle") {
    RngStream rng(3);
    Tensor raw(2, 3, 6, 7);
    for (auto& v : raw.v) v = rng.uniform(-1, 1);
    const Tensor hhat = spatial_softmax(raw);
    const auto grid = decode_grid(hhat, Tensor(2, 3, 6, 7));
    const auto unc = heatmap_std_batch(hhat, grid);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j)
        REQUIRE(unc[size_t(i)].c[size_t(j)] ==
                Catch::Approx(std_oracle(hhat, i, j, grid[size_t(i)][size_t(j)][0],
                                         grid[size_t(i)][size_t(j)][1]))
                    .margin(1e-9));
  }

  SECTION("unnormalized input is a contract error") {
    Tensor t(1, 1, 4, 4);
    t.fill(0.25);  // sums to 4
    REQUIRE_THROWS_AS(heatmap_std(t.plane(0, 0), 4, 4, 1.5, 1.5), std::invalid_argument);
  }

  SECTION("whole-pixel translation leaves the spread unchanged") {
    const Tensor g = gaussian_map(15, 5.0, 6.0, 1.3);
    const Tensor g2 = gaussian_map(15, 8.0, 9.0, 1.3);
    const double a = heatmap_std(g.plane(0, 0), 15, 15, 5.0, 6.0);
    const double b = heatmap_std(g2.plane(0, 0), 15, 15, 8.0, 9.0);
    REQUIRE(a == Catch::Approx(b).margin(1e-9));
  }

  SECTION("broader Gaussians have larger spread") {
    double prev = -1;
    for (double sigma : {0.5, 1.0, 2.0, 4.0}) {
      const Tensor g = gaussian_map(33, 16.0, 16.0, sigma);
      const double c = heatmap_std(g.plane(0, 0), 33, 33, 16.0, 16.0);
      REQUIRE(c > prev);
      prev = c;
    }
  }
}

TEST_CASE("make_mask") {
  SECTION("strict inequality: a tie rejects") {
    const auto r = make_mask({0.5}, {0.5}, 1.0, 0.1);
    REQUIRE(r.accept[0] == 0);
    REQUIRE(r.mask.m[0] == 0.1);
  }

  SECTION("m_a=1, m_r=0 reproduces binary masking") {
    const auto r = make_mask({0.2, 0.9}, {0.5, 0.5}, 1.0, 0.0);
    REQUIRE(r.mask.m == std::vector<double>{1.0, 0.0});
    REQUIRE(r.accept == std::vector<uint8_t>{1, 0});
  }

  SECTION("all certain joints accepted") {
    const auto r = make_mask({0.1, 0.2, 0.3}, {1.0, 1.0, 1.0}, 1.0, 0.1);
    for (double m : r.mask.m) REQUIRE(m == 1.0);
  }
}

TEST_CASE("weighted_distance") {
  const std::vector<Vec3> a{{1, 2, 3}, {4, 5, 6}};

  SECTION("identical sets give zero") {
    REQUIRE(weighted_distance(a, a, {1.0, 1.0}) == 0.0);
  }

  SECTION("all-ones mask reduces to the plain mean element-wise L1") {
    const std::vector<Vec3> b{{2, 4, 0}, {3, 5, 7}};
    const double expect = (1 + 2 + 3 + 1 + 0 + 1) / 6.0;
    REQUIRE(weighted_distance(a, b, {1.0, 1.0}) == Catch::Approx(expect).margin(1e-12));
    REQUIRE(mean_l1_distance(a, b) == Catch::Approx(expect).margin(1e-12));
  }

  SECTION("hand-computed Eq-7 value with a rejected joint") {
    const std::vector<Vec3> b{{2, 4, 6}, {13, 14, 15}};
    // gaps (1,2,3) on joint 0 and (9,9,9) on joint 1, mask (1,0): (1+2+3)/3.
    REQUIRE(weighted_distance(a, b, {1.0, 0.0}) == Catch::Approx(2.0).margin(1e-12));
  }

  SECTION("zero total weight is an error the caller must handle") {
    REQUIRE_THROWS_AS(weighted_distance(a, a, {0.0, 0.0}), std::invalid_argument);
  }

  SECTION("with m_r = 0 a rejected joint's coordinates are ignored exactly") {
    std::vector<Vec3> b = a;
    b[1] = {100, -50, 7};
    const double d1 = weighted_distance(a, b, {1.0, 0.0});
    b[1] = {-3, 99, 1e6};
    const double d2 = weighted_distance(a, b, {1.0, 0.0});
    REQUIRE(d1 == d2);
  }

  SECTION("symmetric and nonnegative") {
    RngStream rng(8);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<Vec3> x(3), y(3);
      std::vector<double> m(3);
      for (int j = 0; j < 3; ++j) {
        for (int k = 0; k < 3; ++k) {
          x[size_t(j)][k] = rng.uniform(-5, 5);
          y[size_t(j)][k] = rng.uniform(-5, 5);
        }
        m[size_t(j)] = rng.uniform01() < 0.5 ? 1.0 : 0.1;
      }
      const double d = weighted_distance(x, y, m);
      REQUIRE(d >= 0.0);
      REQUIRE(d == weighted_distance(y, x, m));
    }
  }

  SECTION("frame mismatch rejected on the JointSet overload") {
    JointSet ja{{Vec3{0, 0, 0}}, JointFrame::CameraMM};
    JointSet jb{{Vec3{0, 0, 0}}, JointFrame::CropUVZ};
    MaskVector m{{1.0}, 1.0, 0.1};
    REQUIRE_THROWS_AS(weighted_distance(ja, jb, m), std::invalid_argument);
  }
}

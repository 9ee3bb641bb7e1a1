#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "drr/errors.hpp"
#include "drr/model.hpp"
#include "drr/rng.hpp"

using namespace drr;

namespace {

Spectrum make_spectrum(const Vector& v) { return {v, 800.0, 0.6}; }

Vector random_vector(Eigen::Index n, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

// straightforward loop re-implementation of the layer arithmetic, kept
// independent of the tape
Vector oracle_forward(const ModelParams& m, const Vector& x) {
  std::vector<Vector> acts;  // flattened (channels, length) row-major
  std::vector<ActExtent> plan = activation_plan(m.layers, m.input_length);
  acts.push_back(x);
  for (size_t li = 0; li < m.layers.size(); ++li) {
    const LayerSpec& l = m.layers[li];
    const ActExtent in = plan[li];
    const ActExtent out = plan[li + 1];
    const Vector& a = acts.back();
    Vector y = Vector::Zero(out.flat());
    switch (l.kind) {
      case LayerKind::Conv: {
        const int pad = (l.width - 1) / 2;
        for (int o = 0; o < out.channels; ++o)
          for (int t = 0; t < out.length; ++t) {
            double acc = m.biases[li][o];
            for (int i = 0; i < in.channels; ++i)
              for (int u = 0; u < l.width; ++u) {
                const int p = t + u - pad;
                if (p < 0 || p >= in.length) continue;
                acc += m.weights[li][(o * in.channels + i) * l.width + u] * a(i * in.length + p);
              }
            y(o * out.length + t) = acc;
          }
        break;
      }
      case LayerKind::LocallyConnected: {
        const int pad = (l.width - 1) / 2;
        for (int o = 0; o < out.channels; ++o)
          for (int j = 0; j < out.length; ++j) {
            double acc = m.biases[li][o * out.length + j];
            for (int i = 0; i < in.channels; ++i)
              for (int u = 0; u < l.width; ++u) {
                const int p = j * l.stride + u - pad;
                if (p < 0 || p >= in.length) continue;
                acc += m.weights[li][((o * out.length + j) * in.channels + i) * l.width + u] *
                       a(i * in.length + p);
              }
            y(o * out.length + j) = acc;
          }
        break;
      }
      case LayerKind::Dense: {
        for (int o = 0; o < l.filters; ++o) {
          double acc = m.biases[li][o];
          for (Eigen::Index i = 0; i < a.size(); ++i) acc += m.weights[li][o * a.size() + i] * a(i);
          y(o) = acc;
        }
        break;
      }
      case LayerKind::Relu:
        y = a.cwiseMax(0.0);
        break;
      case LayerKind::Softmax: {
        const double mx = a.maxCoeff();
        y = (a.array() - mx).exp().matrix();
        y /= y.sum();
        break;
      }
      case LayerKind::ResidualAdd:
        y = a + acts[li + 1 - l.skip];
        break;
    }
    acts.push_back(y);
  }
  return acts.back();
}

}  // namespace

TEST_CASE("all-zero parameters give zero logits") {
  ModelParams m = build_isotopenet_lite(512, 2, 0.6, 1);
  for (Array& w : m.weights) w.setZero();
  const Vector z = predict_logits(m, make_spectrum(random_vector(512, 2)));
  CHECK(z.size() == 2);
  CHECK(z(0) == 0.0);
  CHECK(z(1) == 0.0);
}

TEST_CASE("a single dense layer picks out matrix columns") {
  std::vector<LayerSpec> layers{{LayerKind::Dense, 0, 3, 1, 1}};
  ModelParams m = init_params(layers, 4, 3, 7);
  Vector x = Vector::Zero(4);
  x(2) = 1.0;
  const Vector z = predict_logits(m, make_spectrum(x));
  for (int c = 0; c < 3; ++c)
    CHECK(z(c) == doctest::Approx(m.weights[0][c * 4 + 2]).epsilon(1e-15));
}

TEST_CASE("tape forward agrees with an independent loop re-implementation") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    ModelParams m = build_isotopenet_lite(256, 2, 0.6, seed);
    const Vector x = random_vector(256, seed + 100);
    const Vector z = predict_logits(m, make_spectrum(x));
    const Vector z_oracle = oracle_forward(m, x);
    REQUIRE(z.size() == z_oracle.size());
    for (Eigen::Index i = 0; i < z.size(); ++i)
      CHECK(z(i) == doctest::Approx(z_oracle(i)).epsilon(1e-12));
  }
}

TEST_CASE("residual layers add the saved activation") {
  std::vector<LayerSpec> layers;
  layers.push_back({LayerKind::Conv, 3, 1, 1, 1});
  layers.push_back({LayerKind::Relu});
  layers.push_back({LayerKind::ResidualAdd, 0, 0, 1, 2});  // taps the conv input
  ModelParams m = init_params(layers, 16, 2, 3);
  const Vector x = random_vector(16, 9, -1.0, 1.0);
  ad::Tape t;
  const TapedSample s = append_sample(t, m, x);
  const Vector got = t.value(s.logits).matrix();
  const Vector expect = oracle_forward(m, x);
  REQUIRE(got.size() == expect.size());
  for (Eigen::Index i = 0; i < got.size(); ++i)
    CHECK(got(i) == doctest::Approx(expect(i)).epsilon(1e-13));
}

TEST_CASE("classify breaks ties toward the lower index") {
  Vector z(2);
  z << 2.0, 1.0;
  CHECK(argmax_lowest(z) == 0);
  z << 0.0, 0.0;
  CHECK(argmax_lowest(z) == 0);
  Vector z3(3);
  z3 << 1.0, 5.0, 5.0;
  CHECK(argmax_lowest(z3) == 1);
}

TEST_CASE("softmax and logits agree on the argmax") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Vector z(4);
    for (int i = 0; i < 4; ++i) z(i) = rng.uniform(-5, 5);
    CHECK(argmax_lowest(z) == argmax_lowest(softmax(z)));
  }
}

TEST_CASE("softmax hand values and shift invariance") {
  Vector z(2);
  z << std::log(3.0), 0.0;
  const Vector p = softmax(z);
  CHECK(p(0) == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(p(1) == doctest::Approx(0.25).epsilon(1e-14));

  Vector big(2);
  big << 1000.0, 0.0;
  const Vector pb = softmax(big);
  CHECK(pb(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isfinite(pb(1)));

  Rng rng(4);
  Vector r(3), shifted(3);
  for (int i = 0; i < 3; ++i) r(i) = rng.uniform(-2, 2);
  shifted = r.array() + 17.5;
  const Vector pr = softmax(r), ps = softmax(shifted);
  for (int i = 0; i < 3; ++i) CHECK(pr(i) == doctest::Approx(ps(i)).epsilon(1e-12));
}

TEST_CASE("lite builder covers the isotopic receptive field") {
  SUBCASE("0.6 Da bins need a 9-bin field") {
    ModelParams m = build_isotopenet_lite(2000, 2, 0.6, 1);
    int rf = 1;
    for (const LayerSpec& l : m.layers)
      if (l.kind == LayerKind::Conv) rf += l.width - 1;
    CHECK(rf >= 9);
  }
  SUBCASE("two classes mean two logits") {
    ModelParams m = build_isotopenet_lite(512, 2, 0.6, 1);
    CHECK(m.layers.back().kind == LayerKind::Dense);
    CHECK(m.layers.back().filters == 2);
  }
  SUBCASE("zero spectrum gives finite logits") {
    ModelParams m = build_isotopenet_lite(512, 2, 0.6, 1);
    const Vector z = predict_logits(m, make_spectrum(Vector::Zero(512)));
    CHECK(z.allFinite());
  }
  SUBCASE("too-short inputs refuse") {
    CHECK_THROWS_AS(build_isotopenet_lite(100, 2, 0.6, 1), ConfigError);
  }
}

TEST_CASE("tic normalization") {
  Vector v(2);
  v << 2.0, 2.0;
  const Spectrum s = tic_normalize(make_spectrum(v));
  CHECK(s.intensities(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.intensities.sum() == doctest::Approx(1.0).epsilon(1e-12));

  SUBCASE("idempotent") {
    const Spectrum again = tic_normalize(s);
    for (int i = 0; i < 2; ++i)
      CHECK(again.intensities(i) == doctest::Approx(s.intensities(i)).epsilon(1e-12));
  }
  SUBCASE("scale invariant") {
    Vector w = random_vector(8, 21, 0.1, 3.0);
    const Spectrum a = tic_normalize(make_spectrum(w));
    const Spectrum b = tic_normalize(make_spectrum(3.7 * w));
    for (int i = 0; i < 8; ++i)
      CHECK(a.intensities(i) == doctest::Approx(b.intensities(i)).epsilon(1e-12));
  }
  SUBCASE("zero sum errors") {
    CHECK_THROWS_AS(tic_normalize(make_spectrum(Vector::Zero(4))), DataError);
  }
}

TEST_CASE("length mismatches error") {
  ModelParams m = build_isotopenet_lite(512, 2, 0.6, 1);
  CHECK_THROWS_AS(predict_logits(m, make_spectrum(Vector::Zero(100))), ShapeError);
}

TEST_CASE("output lengths match a brute-force index count") {
  for (int len : {7, 16, 33}) {
    for (int stride : {1, 2, 8}) {
      int count = 0;
      for (int j = 0;; ++j) {
        if (j * stride >= len) break;
        ++count;
      }
      std::vector<LayerSpec> layers{{LayerKind::LocallyConnected, 3, 2, stride, 1}};
      const auto plan = activation_plan(layers, len);
      CHECK(plan[1].length == count);
    }
  }
}

TEST_CASE("even kernel widths are rejected") {
  std::vector<LayerSpec> layers{{LayerKind::Conv, 4, 2, 1, 1}};
  CHECK_THROWS_AS(activation_plan(layers, 64), ShapeError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ModelParams m = build_isotopenet_lite(256, 2, 0.6, 77);
  // salt in awkward values
  m.weights[0][0] = 0.1;
  m.weights[0][1] = 1e-300;
  m.weights[0][2] = -3.0000000000000004;
  const auto path = std::filesystem::temp_directory_path() / "drr_ckpt_test.json";
  save_checkpoint(m, path, "{\"note\":\"unit\"}");
  const ModelParams back = load_checkpoint(path);
  REQUIRE(back.layers.size() == m.layers.size());
  CHECK(back.input_length == m.input_length);
  CHECK(back.init_seed == m.init_seed);
  for (size_t li = 0; li < m.layers.size(); ++li) {
    REQUIRE(back.weights[li].size() == m.weights[li].size());
    for (Eigen::Index i = 0; i < m.weights[li].size(); ++i)
      CHECK(back.weights[li][i] == m.weights[li][i]);
    for (Eigen::Index i = 0; i < m.biases[li].size(); ++i)
      CHECK(back.biases[li][i] == m.biases[li][i]);
  }
  std::filesystem::remove(path);
}

#include <doctest.h>

#include <cmath>
#include <vector>

#include "drr/attribution.hpp"
#include "drr/errors.hpp"
#include "drr/rng.hpp"
#include "drr/training.hpp"

using namespace drr;

namespace {

// linearly separable two-class toy: class 0 lights up bins 14..18,
// class 1 lights up bins 40..44
struct ToyData {
  std::vector<Spectrum> spectra;
  std::vector<Example> examples;

  explicit ToyData(int per_class, uint64_t seed, int n = 64) {
    Rng rng(seed);
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < per_class; ++i) {
        Vector v = Vector::Zero(n);
        for (int b = 0; b < n; ++b) v(b) = 0.02 + 0.01 * rng.uniform01();
        const int base = c == 0 ? 14 : 40;
        for (int b = base; b < base + 5; ++b) v(b) += 0.8 + 0.2 * rng.uniform01();
        spectra.push_back(tic_normalize({v, 800.0, 0.6}));
      }
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < per_class; ++i)
        examples.push_back({&spectra[static_cast<size_t>(c * per_class + i)], c});
  }
};

ModelParams toy_model(uint64_t seed, int n = 64) {
  std::vector<LayerSpec> layers;
  layers.push_back({LayerKind::Conv, 5, 4, 1, 1});
  layers.push_back({LayerKind::Relu});
  layers.push_back({LayerKind::LocallyConnected, 5, 2, 8, 1});
  layers.push_back({LayerKind::Relu});
  layers.push_back({LayerKind::Dense, 0, 2, 1, 1});
  return init_params(layers, n, 2, seed);
}

}  // namespace

TEST_CASE("class weights") {
  SUBCASE("balanced classes give unit weights") {
    const std::vector<int> labels{0, 0, 1, 1};
    const Vector w = class_weight_vector(labels, 2);
    CHECK(w(0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(w(1) == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("25/75 split") {
    std::vector<int> labels(100, 1);
    for (int i = 0; i < 25; ++i) labels[static_cast<size_t>(i)] = 0;
    const Vector w = class_weight_vector(labels, 2);
    CHECK(w(0) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(w(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  }
  SUBCASE("counts times weights recover the total") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<int> labels;
      const int n0 = static_cast<int>(rng.uniform_int(1, 30));
      const int n1 = static_cast<int>(rng.uniform_int(1, 30));
      labels.insert(labels.end(), static_cast<size_t>(n0), 0);
      labels.insert(labels.end(), static_cast<size_t>(n1), 1);
      const Vector w = class_weight_vector(labels, 2);
      CHECK(n0 * w(0) + n1 * w(1) == doctest::Approx(n0 + n1).epsilon(1e-12));
    }
  }
  SUBCASE("a missing class errors") {
    const std::vector<int> labels{0, 0, 0};
    CHECK_THROWS_AS(class_weight_vector(labels, 2), DataError);
  }
}

TEST_CASE("negative log-likelihood") {
  Vector p(2);
  p << 1.0, 0.0;
  CHECK(nll_loss(p, 0) == 0.0);
  p << 0.5, 0.5;
  CHECK(nll_loss(p, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  SUBCASE("decreasing in the assigned probability") {
    double last = 1e9;
    for (double q : {0.1, 0.3, 0.5, 0.9, 0.99}) {
      Vector pp(2);
      pp << q, 1.0 - q;
      const double loss = nll_loss(pp, 0);
      CHECK(loss < last);
      last = loss;
    }
  }
  SUBCASE("zero probability clamps instead of diverging") {
    Vector pp(2);
    pp << 0.0, 1.0;
    CHECK(nll_loss(pp, 0) == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
  }
}

TEST_CASE("elastic relevance penalty") {
  Vector rho(2);
  rho << 1.0, -2.0;
  CHECK(drr_penalty(rho, 0.0, 0.0) == 0.0);
  CHECK(drr_penalty(rho, 0.1, 0.01) == doctest::Approx(0.35).epsilon(1e-14));

  SUBCASE("a zero mask entry removes the bin") {
    Vector mask(2);
    mask << 1.0, 0.0;
    CHECK(drr_penalty(rho, 0.1, 0.01, &mask) == doctest::Approx(0.1 * 1.0 + 0.01 * 1.0).epsilon(1e-14));
  }
  SUBCASE("non-decreasing in both weights") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      Vector r(5);
      for (int i = 0; i < 5; ++i) r(i) = rng.uniform(-2, 2);
      const double l1a = rng.uniform(0, 1), l1b = l1a + rng.uniform(0, 1);
      const double l2a = rng.uniform(0, 1), l2b = l2a + rng.uniform(0, 1);
      CHECK(drr_penalty(r, l1a, l2a) <= drr_penalty(r, l1b, l2a));
      CHECK(drr_penalty(r, l1a, l2a) <= drr_penalty(r, l1a, l2b));
    }
  }
}

TEST_CASE("batch objective") {
  ToyData data(4, 5);
  ModelParams m = toy_model(11);

  SUBCASE("unregularized and balanced reduces to the mean nll") {
    TrainConfig cfg;
    ad::Tape t;
    const auto obj = total_objective(t, m, data.examples, cfg, Vector::Ones(2));
    CHECK(obj.l1_term == ad::kNoNode);
    double expect = 0.0;
    for (const Example& ex : data.examples)
      expect += nll_loss(softmax(predict_logits(m, *ex.x)), ex.y);
    expect /= static_cast<double>(data.examples.size());
    CHECK(t.value(obj.total)[0] == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("a nonzero penalty strictly increases the loss") {
    TrainConfig cfg;
    ad::Tape t0;
    const auto plain = total_objective(t0, m, data.examples, cfg, Vector::Ones(2));
    cfg.lambda1 = 0.1;
    ad::Tape t1;
    const auto pen = total_objective(t1, m, data.examples, cfg, Vector::Ones(2));
    CHECK(t1.value(pen.total)[0] > t0.value(plain.total)[0]);
  }

  SUBCASE("matches an independent recomputation on a three-sample batch") {
    TrainConfig cfg;
    cfg.lambda1 = 0.05;
    cfg.lambda2 = 0.02;
    std::vector<Example> batch(data.examples.begin(), data.examples.begin() + 3);
    batch[2].y = 1;
    const std::vector<int> labels{batch[0].y, batch[1].y, batch[2].y};
    const Vector cw = class_weight_vector(labels, 2);

    ad::Tape t;
    const auto obj = total_objective(t, m, batch, cfg, cw);

    double expect = 0.0;
    for (const Example& ex : batch) {
      const double nll = cw(ex.y) * nll_loss(softmax(predict_logits(m, *ex.x)), ex.y);
      const Vector rho = lrp_z(m, *ex.x, ex.y).values;
      expect += nll + drr_penalty(rho, cfg.lambda1, cfg.lambda2);
    }
    expect /= 3.0;
    CHECK(t.value(obj.total)[0] == doctest::Approx(expect).epsilon(1e-12));

    const double parts =
        t.value(obj.nll_term)[0] + t.value(obj.l1_term)[0] + t.value(obj.l2_term)[0];
    CHECK(t.value(obj.total)[0] == doctest::Approx(parts).epsilon(1e-15));
  }

  SUBCASE("objective gradient matches finite differences") {
    TrainConfig cfg;
    cfg.lambda1 = 1e-3;
    cfg.lambda2 = 1e-3;
    std::vector<Example> batch(data.examples.begin(), data.examples.begin() + 2);
    batch[1].y = 1;
    const Vector cw = Vector::Ones(2);

    ad::Tape t;
    const auto obj = total_objective(t, m, batch, cfg, cw);
    std::vector<ad::NodeId> wrt;
    std::vector<const Array*> theta;
    for (size_t li = 0; li < m.layers.size(); ++li)
      if (obj.leaves.weights[li] != ad::kNoNode) {
        wrt.push_back(obj.leaves.weights[li]);
        theta.push_back(&m.weights[li]);
        wrt.push_back(obj.leaves.biases[li]);
        theta.push_back(&m.biases[li]);
      }
    const auto grads = t.gradient(obj.total, wrt);
    int bad = 0, checked = 0;
    for (size_t b = 0; b < wrt.size(); ++b) {
      const Vector analytic = t.value(grads[b]).matrix();
      const auto f = [&](const Vector& v) {
        std::vector<std::pair<ad::NodeId, Array>> binds{{wrt[b], v.array()}};
        t.forward(binds);
        return t.value(obj.total)[0];
      };
      const auto rep = ad::finite_difference_check(f, analytic, theta[b]->matrix(), 1e-5);
      checked += rep.checked;
      for (double re : rep.rel_errors)
        if (!std::isnan(re) && re >= 1e-4) ++bad;
      std::vector<std::pair<ad::NodeId, Array>> restore{{wrt[b], *theta[b]}};
      t.forward(restore);
    }
    CHECK(checked > 100);
    CHECK(bad == 0);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradients leave parameters untouched") {
    Array p = Array::Constant(3, 1.5);
    const Array g = Array::Zero(3);
    AdamState st;
    adam_step({&p}, {&g}, st, 0.1);
    for (int i = 0; i < 3; ++i) CHECK(p[i] == 1.5);
  }
  SUBCASE("the first step moves by roughly -lr * sign(gradient)") {
    Array p = Array::Zero(4);
    Array g(4);
    g << 0.5, -2.0, 1e-3, -1e-4;
    AdamState st;
    adam_step({&p}, {&g}, st, 0.01);
    for (int i = 0; i < 4; ++i) {
      const double expect = -0.01 * g[i] / (std::abs(g[i]) + 1e-8);
      CHECK(p[i] == doctest::Approx(expect).epsilon(1e-9));
    }
  }
  SUBCASE("identical calls from identical state agree bitwise") {
    Array g(3);
    g << 0.3, -0.7, 2.0;
    Array p1 = Array::Constant(3, 0.5), p2 = Array::Constant(3, 0.5);
    AdamState s1, s2;
    for (int step = 0; step < 5; ++step) {
      adam_step({&p1}, {&g}, s1, 0.05);
      adam_step({&p2}, {&g}, s2, 0.05);
    }
    for (int i = 0; i < 3; ++i) CHECK(p1[i] == p2[i]);
  }
  SUBCASE("non-finite gradients abort") {
    Array p = Array::Zero(2);
    Array g(2);
    g << 1.0, std::numeric_limits<double>::quiet_NaN();
    AdamState st;
    CHECK_THROWS_AS(adam_step({&p}, {&g}, st, 0.1), NumericError);
  }
}

TEST_CASE("training on a separable toy") {
  ToyData data(16, 4);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.lr = 5e-3;
  cfg.seed = 42;

  const ModelParams init = toy_model(4);
  auto [model, report] = train(init, data.examples, cfg);

  SUBCASE("loss decreases over the first epochs") {
    REQUIRE(report.epochs.size() == 8);
    for (int e = 1; e < 5; ++e)
      CHECK(report.epochs[static_cast<size_t>(e)].total <
            report.epochs[static_cast<size_t>(e - 1)].total);
  }
  SUBCASE("the training set is fully separated") {
    int correct = 0;
    for (const Example& ex : data.examples)
      if (classify(model, *ex.x) == ex.y) ++correct;
    CHECK(correct == static_cast<int>(data.examples.size()));
  }
  SUBCASE("loss components sum to the recorded total") {
    for (const EpochStats& s : report.epochs)
      CHECK(s.total == doctest::Approx(s.nll + s.l1 + s.l2).epsilon(1e-9));
  }
}

TEST_CASE("a heavy penalty produces sparser relevance than none") {
  // heavy = 200x the default tuning-grid maximum; far larger values collapse
  // the toy classifier to a constant, whose near-zero map is pure noise
  ToyData data(16, 9);
  const ModelParams init = toy_model(21);
  TrainConfig plain;
  plain.epochs = 30;
  plain.batch_size = 8;
  plain.lr = 5e-3;
  plain.seed = 7;
  TrainConfig heavy = plain;
  heavy.lambda1 = 2.0;
  heavy.lambda2 = 2.0;

  const ModelParams m_plain = train(init, data.examples, plain).first;
  const ModelParams m_heavy = train(init, data.examples, heavy).first;

  const auto mean_sparsity = [&](const ModelParams& m) {
    double acc = 0.0;
    for (int c = 0; c < 2; ++c) {
      std::vector<Spectrum> sub;
      for (const Example& ex : data.examples)
        if (ex.y == c) sub.push_back(*ex.x);
      acc += relevance_sparsity(mean_relevance(m, sub, c).values);
    }
    return acc / 2.0;
  };
  int heavy_correct = 0;
  for (const Example& ex : data.examples)
    if (classify(m_heavy, *ex.x) == ex.y) ++heavy_correct;
  CHECK(heavy_correct == static_cast<int>(data.examples.size()));
  CHECK(mean_sparsity(m_heavy) < mean_sparsity(m_plain));
}

TEST_CASE("training is bit-reproducible from the seed") {
  ToyData data(8, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.lambda1 = 1e-3;
  cfg.lambda2 = 1e-3;
  cfg.seed = 77;
  const ModelParams init = toy_model(2);

  auto [m1, r1] = train(init, data.examples, cfg);
  auto [m2, r2] = train(init, data.examples, cfg);
  REQUIRE(r1.epochs.size() == r2.epochs.size());
  for (size_t e = 0; e < r1.epochs.size(); ++e) {
    CHECK(r1.epochs[e].total == r2.epochs[e].total);
    CHECK(r1.epochs[e].nll == r2.epochs[e].nll);
    CHECK(r1.epochs[e].l1 == r2.epochs[e].l1);
    CHECK(r1.epochs[e].l2 == r2.epochs[e].l2);
  }
  for (size_t li = 0; li < m1.layers.size(); ++li)
    for (Eigen::Index i = 0; i < m1.weights[li].size(); ++i)
      CHECK(m1.weights[li][i] == m2.weights[li][i]);
}

TEST_CASE("lambda zero never builds penalty nodes: trajectory matches a bare loop") {
  ToyData data(8, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 13;
  const ModelParams init = toy_model(6);
  const auto [trained, report] = train(init, data.examples, cfg);

  // independent loop that only ever records data-term nodes
  ModelParams model = init;
  std::vector<int> labels;
  for (const Example& ex : data.examples) labels.push_back(ex.y);
  const Vector cw = class_weight_vector(labels, 2);
  std::vector<size_t> plis;
  for (size_t li = 0; li < model.layers.size(); ++li)
    if (model.weights[li].size() > 0) plis.push_back(li);

  AdamState adam;
  Rng shuffle(mix_seed(cfg.seed, kShuffleStreamTag));
  std::vector<size_t> order(data.examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle.shuffle(order);
    size_t pos = 0;
    while (pos < order.size()) {
      const size_t bsz = std::min<size_t>(cfg.batch_size, order.size() - pos);
      ad::Tape t;
      const ModelLeaves leaves = append_params(t, model);
      ad::NodeId acc = ad::kNoNode;
      for (size_t i = 0; i < bsz; ++i) {
        const Example& ex = data.examples[order[pos + i]];
        const ad::NodeId input = t.input(ex.x->intensities.array(),
                                         ad::Shape::vec(model.input_length), "x");
        const ad::NodeId logits = append_forward(t, model, leaves, input);
        const ad::NodeId nll =
            t.neg(t.log(t.clamp_min(t.index(t.softmax(logits), ex.y), 1e-12)));
        const ad::NodeId weighted = t.scale(nll, cw(ex.y));
        acc = acc == ad::kNoNode ? weighted : t.add(acc, weighted);
      }
      pos += bsz;
      const ad::NodeId total = t.scale(acc, 1.0 / static_cast<double>(bsz));
      std::vector<ad::NodeId> wrt;
      for (size_t li : plis) {
        wrt.push_back(leaves.weights[li]);
        wrt.push_back(leaves.biases[li]);
      }
      const auto grads = t.gradient(total, wrt);
      std::vector<Array*> ps;
      std::vector<const Array*> gs;
      size_t gi = 0;
      for (size_t li : plis) {
        ps.push_back(&model.weights[li]);
        gs.push_back(&t.value(grads[gi++]));
        ps.push_back(&model.biases[li]);
        gs.push_back(&t.value(grads[gi++]));
      }
      adam_step(ps, gs, adam, cfg.lr);
    }
  }

  for (size_t li = 0; li < model.layers.size(); ++li) {
    for (Eigen::Index i = 0; i < model.weights[li].size(); ++i)
      CHECK(model.weights[li][i] == trained.weights[li][i]);
    for (Eigen::Index i = 0; i < model.biases[li].size(); ++i)
      CHECK(model.biases[li][i] == trained.biases[li][i]);
  }
}

TEST_CASE("train rejects empty data and bad labels") {
  TrainConfig cfg;
  const ModelParams m = toy_model(1);
  std::vector<Example> none;
  CHECK_THROWS_AS(train(m, none, cfg), DataError);
}

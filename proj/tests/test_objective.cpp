#include <doctest.h>

#include "palot/objective.hpp"
#include "palot/ot.hpp"
#include "palot/toydata.hpp"
#include "support.hpp"

using namespace palot;
using doctest::Approx;

namespace {

ToyModel small_model() {
  toy::DataConfig d;
  return ToyModel(toy::model_config_for(d));
}

TripletBatch first_batch(bool synthetic = true) {
  toy::DataConfig d;
  d.samples = 4;
  d.batch_size = 4;
  auto data = toy::make_dataset(d, toy::model_config_for(d));
  if (!synthetic) data = toy::strip_synthetic(data);
  return data.front();
}

Gradients grads_for(const ToyModel& model, const TripletBatch& batch, const RunConfig& cfg) {
  ad::Tape tape;
  const auto pass = joint_loss(tape, batch, cfg, model);
  return backward(tape, pass);
}

RunConfig weights(double l, double a, double b) {
  RunConfig c;
  c.lambda_pal = l;
  c.alpha = a;
  c.beta = b;
  return c;
}

}  // namespace

TEST_CASE("tape gradient of a quadratic") {
  ad::Tape tape;
  Eigen::MatrixXd x(1, 3);
  x << 1, 2, 3;
  const auto v = tape.leaf(x, true);
  tape.backward(ad::sum(ad::mul(v, v)));
  CHECK(v.grad()(0) == 2.0);
  CHECK(v.grad()(1) == 4.0);
  CHECK(v.grad()(2) == 6.0);
  CHECK_THROWS_AS(tape.backward(ad::sum(v)), DomainError);
}

TEST_CASE("backward visits each node at most once") {
  ad::Tape tape;
  const auto a = tape.leaf(testing::randn(2, 3), true);
  const auto b = tape.constant(testing::randn(3, 2));
  const auto loss = ad::sum(ad::matmul(ad::tanh(a), b));
  const auto before = tape.size();
  tape.backward(loss);
  CHECK(tape.backward_visits() <= before);
  CHECK(tape.consumed());
}

TEST_CASE("finite differences are exact on linear functions") {
  const Eigen::VectorXd c = testing::randv(6);
  DifferentiableFn fn{[c](const Eigen::VectorXd& x) { return c.dot(x) + 3.0; },
                      [c](const Eigen::VectorXd&) { return c; }};
  // Exact for any step; a wide one keeps rounding out of the comparison.
  CHECK(grad_check(fn, testing::randv(6), 0.5).max_rel_error < 1e-10);

  DifferentiableFn bad{[](const Eigen::VectorXd&) { return NAN; }, [](const Eigen::VectorXd& x) { return x; }};
  CHECK_THROWS_AS(grad_check(bad, testing::randv(2)), NumericError);
}

TEST_CASE("per-term gradients match finite differences") {
  std::mt19937_64 g(99);
  for (int p = 0; p < 5; ++p) {
    CHECK(grad_check(checks::pal_wrt_r(testing::randv(5, g)), testing::randv(5, g)).max_rel_error < 1e-5);
    CHECK(grad_check(checks::infonce_wrt_inputs(3, 5, 0.07), testing::randv(30, g)).max_rel_error < 1e-5);

    std::vector<std::vector<int>> targets{{1, 2, 3, 4}, {0, 6, 5, 5}};
    std::vector<std::vector<bool>> valid{{true, true, true, false}, {true, true, false, false}};
    CHECK(grad_check(checks::masked_ce_wrt_logits(targets, valid, 7), testing::randv(2 * 4 * 7, g)).max_rel_error <
          1e-5);

    const auto fn = checks::ot_wrt_patches(testing::randn(6, 5, g), testing::rand_simplex(6, g),
                                           testing::rand_simplex(6, g), 0.05, 30);
    CHECK(grad_check(fn, testing::randv(30, g)).max_rel_error < 1e-3);
  }
}

TEST_CASE("top-rho pooling gradient away from the retention boundary") {
  std::mt19937_64 g(7);
  int checked = 0;
  for (int p = 0; p < 20; ++p) {
    const Eigen::VectorXd x = testing::randv(6 + 6 * 5, g);
    if (!checks::away_from_retention_boundary(x.head(6), 1.0, 0.5, 1e-4)) continue;
    ++checked;
    CHECK(grad_check(checks::topk_pool_wrt_inputs(6, testing::randv(5, g), 1.0, 0.5), x).max_rel_error < 1e-5);
  }
  CHECK(checked > 10);

  Eigen::VectorXd tie(4);
  tie << 0, 0, 0, 0;
  CHECK_FALSE(checks::away_from_retention_boundary(tie, 1.0, 0.5, 1e-4));
}

TEST_CASE("unrolled OT gradient depends on the iteration budget") {
  std::mt19937_64 g(13);
  const Eigen::MatrixXd es = testing::randn(4, 3, g);
  const Eigen::VectorXd a = testing::rand_simplex(4, g), b = testing::rand_simplex(4, g);
  const Eigen::VectorXd x = testing::randv(12, g);
  const auto g10 = checks::ot_wrt_patches(es, a, b, 0.05, 10).gradient(x);
  const auto g30 = checks::ot_wrt_patches(es, a, b, 0.05, 30).gradient(x);
  CHECK(g10 == checks::ot_wrt_patches(es, a, b, 0.05, 10).gradient(x));
  CHECK((g10 - g30).norm() > 0);
  CHECK(checks::ot_wrt_patches(es, a, b, 0.05, 10).value(x) ==
        Approx(sinkhorn(cosine_cost(Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(x.data(), 4, 3)
                                        .eval(),
                                    es),
                        a, b, SinkhornOptions{0.05, 10})
                   .cost)
            .epsilon(1e-12));
}

TEST_CASE("mixing rule") {
  const RunConfig cfg;
  const auto b = combine_terms(1.0, Eigen::Vector3d(0.2, 0.3, 0.4), cfg);
  CHECK(b.total == Approx(1.39).epsilon(1e-15));
  CHECK(b.synthetic_present);
  const auto none = combine_terms(1.0, std::nullopt, cfg);
  CHECK(none.total == 1.0);
  CHECK(none.pal == 0.0);
  CHECK(none.nce == 0.0);
  CHECK(none.ot == 0.0);
  CHECK_FALSE(none.synthetic_present);
  CHECK(combine_terms(0.7, Eigen::Vector3d(0.2, 0.3, 0.4), weights(0, 0, 0)).total == 0.7);
}

TEST_CASE("joint loss on the toy model") {
  const auto model = small_model();
  const auto batch = first_batch();
  const RunConfig cfg;
  const auto b = joint_loss(batch, cfg, model);
  CHECK(b.synthetic_present);
  CHECK(b.pal >= 0);
  CHECK(b.pal <= 2);
  CHECK(b.ot >= 0);
  CHECK(b.total == Approx(b.ce + 0.5 * b.pal + 0.3 * b.nce + 0.5 * b.ot).epsilon(1e-12));

  const auto zero = joint_loss(batch, weights(0, 0, 0), model);
  CHECK(zero.total == zero.ce);
  CHECK(zero.ce == b.ce);

  const auto plain = joint_loss(first_batch(false), cfg, model);
  CHECK_FALSE(plain.synthetic_present);
  CHECK(plain.total == plain.ce);
  CHECK(plain.ce == b.ce);
}

TEST_CASE("total gradient is the weighted sum of term gradients") {
  const auto model = small_model();
  const auto batch = first_batch();
  const auto g0 = grads_for(model, batch, weights(0, 0, 0));
  const auto gp = grads_for(model, batch, weights(1, 0, 0));
  const auto gn = grads_for(model, batch, weights(0, 1, 0));
  const auto go = grads_for(model, batch, weights(0, 0, 1));
  const auto gt = grads_for(model, batch, RunConfig{});
  double worst = 0;
  for (std::size_t i = 0; i < gt.params.size(); ++i) {
    const ad::Matrix combo =
        g0.params[i] + 0.5 * (gp.params[i] - g0.params[i]) + 0.3 * (gn.params[i] - g0.params[i]) +
        0.5 * (go.params[i] - g0.params[i]);
    worst = std::max(worst, (combo - gt.params[i]).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("model gradient matches finite differences") {
  auto model = small_model();
  const auto batch = first_batch();
  RunConfig cfg;
  cfg.rho = 1.0;  // no retention cut to cross
  const auto grads = grads_for(model, batch, cfg);
  std::mt19937_64 g(5);
  for (const char* name : {"bridge.w", "head.w"}) {
    auto& p = model.param(name);
    const auto idx = static_cast<std::size_t>(&p - model.params().data());
    for (int k = 0; k < 4; ++k) {
      const auto i = static_cast<Eigen::Index>(g() % static_cast<std::uint64_t>(p.value.size()));
      const double orig = p.value(i), h = 1e-6;
      p.value(i) = orig + h;
      const double fp = joint_loss(batch, cfg, model).total;
      p.value(i) = orig - h;
      const double fm = joint_loss(batch, cfg, model).total;
      p.value(i) = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = grads.params[idx](i);
      CHECK(std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-3}) < 1e-4);
    }
  }
}

TEST_CASE("encoder receives no gradient and frozen parameters get zeros") {
  const auto model = small_model();
  const auto batch = first_batch();
  const auto enc_w = model.encoder_weight();
  ad::Tape tape;
  ObjectiveOptions opt;
  opt.trainable.assign(model.params().size(), false);
  opt.trainable[static_cast<std::size_t>(model.index().bridge_w)] = true;
  const auto pass = joint_loss(tape, batch, RunConfig{}, model, opt);
  const auto g = backward(tape, pass);
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    CHECK(g.params[i].allFinite());
    if (static_cast<int>(i) != model.index().bridge_w) CHECK(g.params[i].cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(g.params[static_cast<std::size_t>(model.index().bridge_w)].norm() > 0);
  CHECK(model.encoder_weight() == enc_w);
  CHECK_THROWS_AS(backward(tape, pass), DomainError);
}

TEST_CASE("stop-gradient weights change only the attention path") {
  const auto model = small_model();
  const auto batch = first_batch();
  ad::Tape t1, t2;
  ObjectiveOptions stop;
  stop.stop_grad_weights = true;
  const auto p1 = joint_loss(t1, batch, RunConfig{}, model);
  const auto p2 = joint_loss(t2, batch, RunConfig{}, model, stop);
  CHECK(p1.breakdown.total == p2.breakdown.total);
  const auto g1 = backward(t1, p1), g2 = backward(t2, p2);
  double diff = 0;
  for (std::size_t i = 0; i < g1.params.size(); ++i) diff += (g1.params[i] - g2.params[i]).norm();
  CHECK(diff > 0);
}

TEST_CASE("pooled descriptors agree with the tape") {
  const auto model = small_model();
  const auto batch = first_batch();
  ad::Tape tape;
  const auto pass = joint_loss(tape, batch, RunConfig{}, model);
  const auto [real, syn] = pooled_descriptors(model, batch, RunConfig{});
  CHECK((real - pass.pooled_real).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((syn - pass.pooled_syn).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(pooled_descriptors(model, first_batch(false), RunConfig{}), DomainError);
}

#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "safepred/error.hpp"
#include "safepred/nets.hpp"
#include "safepred/rng.hpp"

using namespace safepred;

namespace {

std::vector<Example> separable_toy(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> x{uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)};
    const double y = x[0] + 0.5 * x[1] > 0.0 ? 1.0 : 0.0;
    out.push_back({SparseVector::from_dense(x), {y}});
  }
  return out;
}

}  // namespace

TEST_SUITE("nets") {
  TEST_CASE("identity layer with identity weights passes input through") {
    DenseNet net({3, 3}, {Activation::identity}, 1);
    auto p = net.params();
    std::fill(p.begin(), p.end(), 0.0);
    for (int i = 0; i < 3; ++i) p[static_cast<std::size_t>(i * 3 + i)] = 1.0;
    const std::vector<double> x{0.5, -2.0, 3.0};
    CHECK(net.forward(std::span<const double>(x)) == x);
  }

  TEST_CASE("zero weights under a sigmoid give one half") {
    DenseNet net({4, 5, 3}, {Activation::tanh, Activation::sigmoid}, 2);
    std::fill(net.params().begin(), net.params().end(), 0.0);
    const std::vector<double> x{1.0, 2.0, 3.0, 4.0};
    for (double y : net.forward(std::span<const double>(x))) CHECK(y == 0.5);
  }

  TEST_CASE("fixed net on fixed input is reproducible and sparse-equivalent") {
    DenseNet net({6, 4, 2}, {Activation::relu, Activation::identity}, 3);
    const std::vector<double> x{0.0, 1.0, 0.0, -0.5, 0.0, 2.0};
    const auto dense = net.forward(std::span<const double>(x));
    const auto sparse = net.forward(SparseVector::from_dense(x));
    REQUIRE(dense.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) CHECK(dense[i] == doctest::Approx(sparse[i]).epsilon(1e-14));
    CHECK(DenseNet({6, 4, 2}, {Activation::relu, Activation::identity}, 3) == net);
  }

  TEST_CASE("glorot initialisation bounds") {
    DenseNet net({10, 20}, {Activation::identity}, 4);
    const double bound = glorot_bound(10, 20);
    CHECK(bound == doctest::Approx(std::sqrt(6.0 / 30.0)));
    for (std::size_t i = 0; i < 200; ++i) CHECK(std::abs(net.params()[i]) <= bound);
    for (std::size_t i = 200; i < 220; ++i) CHECK(net.params()[i] == 0.0);
  }

  TEST_CASE("input dimension mismatch is rejected") {
    DenseNet net({3, 2}, {Activation::identity}, 5);
    const std::vector<double> x{1.0, 2.0};
    try {
      (void)net.forward(std::span<const double>(x));
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::dimension_mismatch);
    }
  }

  TEST_CASE("loss values") {
    const std::vector<double> a{0.3, -1.0, 2.0};
    CHECK(loss(LossKind::mse, a, a) == 0.0);
    CHECK(loss(LossKind::bce, std::vector<double>{0.5}, std::vector<double>{1.0}) == doctest::Approx(std::log(2.0)));
    CHECK(loss(LossKind::ce, std::vector<double>{0.0, 0.0}, std::vector<double>{0.0, 1.0}) ==
          doctest::Approx(std::log(2.0)));
    CHECK(std::isfinite(loss(LossKind::bce, std::vector<double>{0.0}, std::vector<double>{1.0})));
  }

  TEST_CASE("softmax helpers") {
    CHECK(softmax_first(std::vector<double>{0.0, 0.0}) == 0.5);
    CHECK(softmax_first(std::vector<double>{std::log(3.0), 0.0}) == doctest::Approx(0.75));
    const auto p = softmax(std::vector<double>{1000.0, 0.0, -1000.0});
    CHECK(p[0] == doctest::Approx(1.0));
    CHECK(std::isfinite(p[2]));
  }

  TEST_CASE("bce gradient at one half with target one is -0.5") {
    const auto delta = output_delta(LossKind::bce, Activation::sigmoid, std::vector<double>{0.5},
                                    std::vector<double>{1.0});
    REQUIRE(delta.size() == 1);
    CHECK(delta[0] == doctest::Approx(-0.5));
  }

  TEST_CASE("gradient vanishes at an exact mse minimum") {
    DenseNet net({3, 2}, {Activation::identity}, 6);
    const std::vector<double> x{0.1, 0.2, 0.3};
    const auto y = net.forward(std::span<const double>(x));
    const auto g = loss_gradient(net, x, y, LossKind::mse);
    CHECK(g.loss == 0.0);
    for (double v : g.grad) CHECK(v == 0.0);
  }

  TEST_CASE("gradients match central finite differences") {
    Rng rng(7);
    for (int t = 0; t < 30; ++t) {
      const auto kind = static_cast<LossKind>(t % 3);
      const Activation hidden = t % 2 == 0 ? Activation::tanh : Activation::sigmoid;
      const Activation out = kind == LossKind::bce ? Activation::sigmoid : Activation::identity;
      DenseNet net({4, 5, 3, kind == LossKind::ce ? 2 : 3}, {hidden, Activation::relu, out}, rng());
      std::vector<double> x(4), target(static_cast<std::size_t>(net.output_dim()));
      for (auto& v : x) v = uniform(rng, -1.0, 1.0);
      if (kind == LossKind::ce) {
        target[t % 2] = 1.0;
      } else {
        for (auto& v : target) v = uniform01(rng);
      }
      const auto analytic = loss_gradient(net, x, target, kind).grad;
      double diff = 0.0, na = 0.0, nn = 0.0;
      for (std::size_t p = 0; p < net.param_count(); ++p) {
        const double orig = net.params()[p];
        net.params()[p] = orig + 1e-5;
        const double up = loss(kind, net.forward(std::span<const double>(x)), target);
        net.params()[p] = orig - 1e-5;
        const double down = loss(kind, net.forward(std::span<const double>(x)), target);
        net.params()[p] = orig;
        const double numeric = (up - down) / 2e-5;
        diff += (numeric - analytic[p]) * (numeric - analytic[p]);
        na += analytic[p] * analytic[p];
        nn += numeric * numeric;
      }
      CHECK(std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-12) < 1e-4);
    }
  }

  TEST_CASE("input gradient matches finite differences") {
    DenseNet net({3, 4, 2}, {Activation::tanh, Activation::identity}, 8);
    const std::vector<double> x{0.2, -0.4, 0.9};
    const std::vector<double> target{1.0, 0.0};
    DenseNet::Tape tape;
    const auto sx = SparseVector::from_dense(x);
    net.forward(sx, tape);
    const auto delta = output_delta(LossKind::ce, Activation::identity, tape.outputs.back(), target);
    std::vector<double> input_grad;
    net.backward(sx, tape, delta, {}, &input_grad);
    REQUIRE(input_grad.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      auto up = x, down = x;
      up[i] += 1e-6;
      down[i] -= 1e-6;
      const double numeric = (loss(LossKind::ce, net.forward(std::span<const double>(up)), target) -
                              loss(LossKind::ce, net.forward(std::span<const double>(down)), target)) /
                             2e-6;
      CHECK(input_grad[i] == doctest::Approx(numeric).epsilon(1e-6));
    }
  }

  TEST_CASE("chunked batch gradient equals the serial reference") {
    DenseNet net({2, 8, 1}, {Activation::tanh, Activation::sigmoid}, 9);
    const auto examples = separable_toy(300, 10);
    std::vector<std::size_t> batch(300);
    std::iota(batch.begin(), batch.end(), std::size_t{0});
    std::vector<double> g1(net.param_count()), g2(net.param_count());
    const double l1 = batch_gradient(net, examples, batch, LossKind::bce, g1);
    const double l2 = batch_gradient_serial(net, examples, batch, LossKind::bce, g2);
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == doctest::Approx(g2[i]).epsilon(1e-10));
  }

  TEST_CASE("sgd learns a separable toy task") {
    const auto examples = separable_toy(400, 11);
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.batch_size = 16;
    cfg.max_epochs = 200;
    cfg.patience_epochs = 1000;
    cfg.early_stop_patience = 1000;
    cfg.seed = 12;
    const auto result = sgd_train(DenseNet({2, 1}, {Activation::sigmoid}, 13), examples, LossKind::bce, cfg);
    REQUIRE(!result.loss_history.empty());
    for (double l : result.loss_history) {
      CHECK(std::isfinite(l));
      CHECK(l >= 0.0);
    }
    DenseNet init({2, 1}, {Activation::sigmoid}, 13);
    std::vector<double> g(init.param_count());
    std::vector<std::size_t> all(examples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const double initial = batch_gradient(init, examples, all, LossKind::bce, g);
    const double final_loss = batch_gradient(result.net, examples, all, LossKind::bce, g);
    CHECK(final_loss < 0.1 * initial);
  }

  TEST_CASE("zero epochs return the initial net") {
    const auto examples = separable_toy(20, 14);
    TrainConfig cfg;
    cfg.max_epochs = 0;
    const DenseNet init({2, 3, 1}, {Activation::relu, Activation::sigmoid}, 15);
    const auto result = sgd_train(init, examples, LossKind::bce, cfg);
    CHECK(result.net == init);
    CHECK(result.loss_history.empty());
  }

  TEST_CASE("training is seeded") {
    const auto examples = separable_toy(100, 16);
    TrainConfig cfg;
    cfg.max_epochs = 5;
    cfg.batch_size = 7;
    cfg.seed = 17;
    const DenseNet init({2, 4, 1}, {Activation::tanh, Activation::sigmoid}, 18);
    CHECK(sgd_train(init, examples, LossKind::bce, cfg).net == sgd_train(init, examples, LossKind::bce, cfg).net);
  }

  TEST_CASE("empty training set is rejected") {
    CHECK_THROWS_AS(sgd_train(DenseNet({2, 1}, {Activation::sigmoid}, 1), {}, LossKind::bce, TrainConfig{}), Error);
  }

  TEST_CASE("divergence is reported") {
    std::vector<Example> examples{{SparseVector::from_dense(std::vector<double>{1e200}), {1.0}}};
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.learning_rate = 1e10;
    try {
      (void)sgd_train(DenseNet({1, 1}, {Activation::identity}, 1), examples, LossKind::mse, cfg);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::divergence);
    }
  }

  TEST_CASE("plateau schedule reduces the rate and stops") {
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.patience_epochs = 2;
    cfg.early_stop_patience = 4;
    PlateauSchedule s(cfg);
    CHECK(s.record(1.0));
    CHECK(s.record(1.0));
    CHECK(s.record(1.0));
    CHECK(s.learning_rate() == doctest::Approx(0.1));
    CHECK(s.record(1.0));
    CHECK_FALSE(s.record(1.0));
  }

  TEST_CASE("json round-trip") {
    const DenseNet net({5, 3, 2}, {Activation::relu, Activation::identity}, 19);
    CHECK(DenseNet::from_json(net.to_json()) == net);
    const auto path = std::filesystem::temp_directory_path() / "safepred_test_net.json";
    net.save(path);
    CHECK(DenseNet::load(path) == net);
    std::filesystem::remove(path);
  }
}

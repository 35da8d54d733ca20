#include <cmath>

#include "../vendor/doctest.h"
#include "oracles.hpp"
#include "scorewatch/models.hpp"
#include "scorewatch/program.hpp"
#include "scorewatch/rng.hpp"
#include "scorewatch/tape.hpp"

using namespace scorewatch;

namespace {

// A throwaway program exercising every primitive in one scalar expression.
class KitchenSinkProgram final : public ModelProgram {
 public:
  int dim() const override { return 4; }
  std::string kind() const override { return "kitchen_sink"; }
  bool independent() const override { return true; }

  bool in_domain(const Eigen::VectorXd& theta) const override {
    return ModelProgram::in_domain(theta) && theta[0] > 0.1 && theta[1] > 0.1;
  }

  void record_terms(ad::TapeBuilder& b, std::span<const ad::Var> th,
                    const ObservationSequence& data, int s, int t) const override {
    for (int pos = s; pos <= t; ++pos) {
      b.begin_term();
      const double y = data.values[pos - 1];
      ad::Var u = exp(th[2] * b.constant(0.3)) + log(th[0]);
      ad::Var v = pow(th[1], 2.5) / (th[0] + th[1]);
      ad::Var w = tanh(th[3] * b.constant(0.7)) * b.constant(y);
      ad::Var m = max(th[2], th[3]);
      ad::Var sel = select(th[2] - th[3], u, v);
      b.end_term(u * v - w + m * b.constant(0.25) + sel - (u / (1.0 + pow(th[3], 2.0))));
    }
  }

  ObservationSequence simulate(const Eigen::VectorXd&, const Eigen::VectorXd&, int, int n,
                               Rng& rng) const override {
    ObservationSequence out;
    out.values = rng.normal_vector(n);
    return out;
  }

  nlohmann::json to_json() const override { return {{"kind", kind()}}; }
};

ObservationSequence toy_data(int n, Rng& rng) {
  ObservationSequence data;
  data.values = rng.normal_vector(n);
  return data;
}

}  // namespace

TEST_CASE("gradient matches finite differences across all primitives") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {1});
  for (int draw = 0; draw < 20; ++draw) {
    ObservationSequence data = toy_data(5, rng);
    Eigen::VectorXd theta(4);
    // Stay away from the max/select kinks so the derivative is classical.
    theta << rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), rng.uniform(0.2, 1.5),
        rng.uniform(1.6, 2.5);
    const Eigen::VectorXd g = gradient(program, theta, data, 1, 5);
    const Eigen::VectorXd fd = oracles::fd_gradient(program, theta, data, 1, 5);
    REQUIRE((g - fd).norm() <= 1e-5 * (1.0 + g.norm()));
  }
}

TEST_CASE("hvp agrees with the dense information to 1e-8") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {2});
  ObservationSequence data = toy_data(6, rng);
  Eigen::VectorXd theta(4);
  theta << 0.8, 1.2, 0.5, 1.9;
  const Eigen::MatrixXd info = full_hessian(program, theta, data, 1, 6);
  for (int k = 0; k < 20; ++k) {
    const Eigen::VectorXd v = rng.normal_vector(4);
    const Eigen::VectorXd hv = hvp(program, theta, data, 1, 6, v);
    const Eigen::VectorXd ref = info * v;
    REQUIRE((hv - ref).norm() <= 1e-8 * (1.0 + ref.norm()));
  }
}

TEST_CASE("hvp of the zero vector is zero") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {3});
  ObservationSequence data = toy_data(4, rng);
  Eigen::VectorXd theta(4);
  theta << 0.9, 0.7, 0.4, 2.0;
  const Eigen::VectorXd hv = hvp(program, theta, data, 1, 4, Eigen::VectorXd::Zero(4));
  REQUIRE(hv.norm() == 0.0);
}

TEST_CASE("full information is symmetric and matches per-column hvp") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {4});
  ObservationSequence data = toy_data(5, rng);
  Eigen::VectorXd theta(4);
  theta << 1.1, 0.6, 0.9, 1.7;
  const Eigen::MatrixXd info = full_hessian(program, theta, data, 1, 5);
  REQUIRE((info - info.transpose()).norm() <= 1e-8 * (1.0 + info.norm()));
  for (int j = 0; j < 4; ++j) {
    const Eigen::VectorXd col = hvp(program, theta, data, 1, 5, Eigen::VectorXd::Unit(4, j));
    REQUIRE((col - info.col(j)).norm() <= 1e-12 * (1.0 + info.norm()));
  }
}

TEST_CASE("full_hessian respects the dimension cap") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {5});
  ObservationSequence data = toy_data(3, rng);
  Eigen::VectorXd theta(4);
  theta << 1.0, 1.0, 0.5, 1.5;
  REQUIRE_THROWS_AS(full_hessian(program, theta, data, 1, 3, 2), SizeError);
}

TEST_CASE("segment additivity of evaluate and gradient") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {6});
  ObservationSequence data = toy_data(9, rng);
  Eigen::VectorXd theta(4);
  theta << 0.7, 1.4, 0.8, 2.1;
  const double whole = evaluate(program, theta, data, 1, 9);
  const double left = evaluate(program, theta, data, 1, 4);
  const double right = evaluate(program, theta, data, 5, 9);
  REQUIRE(whole == doctest::Approx(left + right).epsilon(1e-12));
  const Eigen::VectorXd gw = gradient(program, theta, data, 1, 9);
  const Eigen::VectorXd gl = gradient(program, theta, data, 1, 4);
  const Eigen::VectorXd gr = gradient(program, theta, data, 5, 9);
  REQUIRE((gw - gl - gr).norm() <= 1e-12 * (1.0 + gw.norm()));
}

TEST_CASE("tape replay is bit-for-bit deterministic") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {7});
  ObservationSequence data = toy_data(8, rng);
  Eigen::VectorXd theta(4);
  theta << 0.9, 1.1, 0.3, 1.8;
  const ad::Tape tape = program.record(data, 1, 8);
  ad::Workspace w1(tape);
  ad::Workspace w2(tape);
  w1.forward(theta);
  w2.forward(theta);
  REQUIRE(w1.value(tape.root()) == w2.value(tape.root()));
  Eigen::VectorXd g1(4);
  Eigen::VectorXd g2(4);
  w1.gradient(tape.root(), g1);
  w2.gradient(tape.root(), g2);
  for (int i = 0; i < 4; ++i) REQUIRE(g1[i] == g2[i]);
}

TEST_CASE("per-term sweeps match whole-tape sweeps on independent models") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {8});
  ObservationSequence data = toy_data(6, rng);
  Eigen::VectorXd theta(4);
  theta << 1.3, 0.8, 0.6, 1.9;
  const ad::Tape tape = program.record(data, 1, 6);
  REQUIRE(tape.terms_self_contained());
  ad::Workspace ws(tape);
  ws.forward(theta);
  Eigen::VectorXd total(4);
  ws.gradient(tape.root(), total);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(4);
  Eigen::VectorXd term(4);
  Eigen::MatrixXd info_sum = Eigen::MatrixXd::Zero(4, 4);
  Eigen::MatrixXd term_info(4, 4);
  for (int k = 1; k <= 6; ++k) {
    ws.term_gradient(k, term);
    sum += term;
    ws.term_information(k, term_info);
    info_sum += term_info;
  }
  REQUIRE((sum - total).norm() <= 1e-12 * (1.0 + total.norm()));
  const Eigen::MatrixXd dense = full_hessian(program, theta, data, 1, 6);
  REQUIRE((info_sum - dense).norm() <= 1e-10 * (1.0 + dense.norm()));
}

TEST_CASE("non-finite intermediates raise a numeric error with a node index") {
  KitchenSinkProgram program;
  Rng rng = Rng::stream(42, {9});
  ObservationSequence data = toy_data(3, rng);
  Eigen::VectorXd theta(4);
  theta << 0.15, 0.15, 3000.0, 0.2;  // exp(0.3 * 3000) overflows
  bool threw = false;
  try {
    evaluate(program, theta, data, 1, 3);
  } catch (const NumericError& e) {
    threw = true;
    REQUIRE(e.node() >= 0);
  }
  REQUIRE(threw);
}

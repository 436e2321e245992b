#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "enp/autodiff.hpp"
#include "enp/checkpoint.hpp"
#include "enp/rng.hpp"
#include "test_util.hpp"

using namespace enp;
using namespace enp::test;

TEST_CASE("matmul of ones matches the analytic value") {
  NodePtr a = leaf(Tensor(2, 3, 1.0));
  NodePtr b = leaf(Tensor(3, 1, 1.0));
  NodePtr c = matmul(a, b);
  REQUIRE(c->value.rows() == 2);
  REQUIRE(c->value.cols() == 1);
  for (double v : c->value.data) CHECK(v == 3.0);
}

TEST_CASE("logsumexp of identical logits") {
  Tensor x(5, 1);
  NodePtr r = logsumexp(leaf(x));
  CHECK(r->value.data[0] == Catch::Approx(std::log(5.0)).margin(1e-14));
}

TEST_CASE("3-layer MLP forward matches a straight-line re-implementation") {
  RngStream rng(42);
  auto rand_t = [&rng](std::size_t r, std::size_t c) {
    Tensor t(r, c);
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
  };
  Tensor x = rand_t(1, 6), w1 = rand_t(6, 8), b1 = rand_t(1, 8), w2 = rand_t(8, 5),
         b2 = rand_t(1, 5), w3 = rand_t(5, 3), b3 = rand_t(1, 3);

  NodePtr h1 = tanh_op(add(matmul(leaf(x), leaf(w1)), leaf(b1)));
  NodePtr h2 = relu(add(matmul(h1, leaf(w2)), leaf(b2)));
  NodePtr out = add(matmul(h2, leaf(w3)), leaf(b3));

  // straight-line: plain loops, no graph
  auto mv = [](const std::vector<double>& v, const Tensor& w, const Tensor& b) {
    std::vector<double> out(w.cols());
    for (std::size_t j = 0; j < w.cols(); ++j) {
      out[j] = b.data[j];
      for (std::size_t i = 0; i < w.rows(); ++i) out[j] += v[i] * w.at(i, j);
    }
    return out;
  };
  std::vector<double> v = mv(x.data, w1, b1);
  for (double& z : v) z = std::tanh(z);
  v = mv(v, w2, b2);
  for (double& z : v) z = std::max(0.0, z);
  v = mv(v, w3, b3);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(out->value.data[i] == Catch::Approx(v[i]).margin(1e-12));
}

TEST_CASE("backward of sum is all ones") {
  RngStream rng(1);
  Tensor x(3, 4);
  for (double& v : x.data) v = rng.uniform(-2.0, 2.0);
  NodePtr xl = leaf(x);
  backward(sum(xl));
  for (double v : xl->grad.data) CHECK(v == 1.0);
}

TEST_CASE("backward of logsumexp equals softmax") {
  RngStream rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x(6, 1);
    for (double& v : x.data) v = rng.uniform(-20.0, 20.0);
    NodePtr xl = leaf(x);
    backward(logsumexp(xl));
    NodePtr sm = softmax(leaf(x));
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(std::abs(xl->grad.data[i] - sm->value.data[i]) < 1e-12);
  }
}

TEST_CASE("random MLP gradients match central finite differences") {
  RngStream rng(2024);
  for (int g = 0; g < 30; ++g) {
    GraphPlan plan = random_graph_plan(rng);
    double err = max_fd_error(plan_builder(plan), plan.leaves);
    INFO("graph " << g);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gradients accumulate across fan-out") {
  Tensor x(2, 2, 0.5);
  NodePtr xl = leaf(x);
  NodePtr y = add(multiply(xl, xl), xl);  // d/dx = 2x + 1
  backward(sum(y));
  for (double v : xl->grad.data) CHECK(v == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("repeated forward/backward is bit-identical") {
  RngStream rng(5);
  GraphPlan plan = random_graph_plan(rng);
  auto build = plan_builder(plan);
  auto leaves1 = make_leaves(plan.leaves);
  NodePtr root1 = build(leaves1);
  backward(root1);
  std::vector<double> first = leaves1[0]->grad.data;
  double v1 = root1->value.data[0];
  backward(root1);  // again on the same graph
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(leaves1[0]->grad.data[i] == first[i]);
  auto leaves2 = make_leaves(plan.leaves);
  NodePtr root2 = build(leaves2);
  backward(root2);
  CHECK(root2->value.data[0] == v1);
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(leaves2[0]->grad.data[i] == first[i]);
}

TEST_CASE("shape mismatch names the op and shapes") {
  NodePtr a = leaf(Tensor(2, 3));
  NodePtr b = leaf(Tensor(2, 3));
  REQUIRE_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("matmul") &&
                                        Catch::Matchers::ContainsSubstring("[2x3]"));
  REQUIRE_THROWS_WITH(add(a, leaf(Tensor(3, 2))),
                      Catch::Matchers::ContainsSubstring("add"));
}

TEST_CASE("backward requires a scalar root") {
  NodePtr a = leaf(Tensor(2, 2, 1.0));
  REQUIRE_THROWS_AS(backward(tanh_op(a)), std::invalid_argument);
}

TEST_CASE("mean and sum respect the axis argument") {
  Tensor x(2, 3);
  for (std::size_t i = 0; i < 6; ++i) x.data[i] = static_cast<double>(i + 1);
  NodePtr xl = leaf(x);
  NodePtr rows = mean(xl, 0);
  REQUIRE(rows->value.rows() == 1);
  REQUIRE(rows->value.cols() == 3);
  CHECK(rows->value.data[0] == Catch::Approx(2.5));
  CHECK(sum(xl, 1)->value.at(1, 0) == Catch::Approx(15.0));
  CHECK(sum(xl)->value.data[0] == Catch::Approx(21.0));
}

TEST_CASE("index_select gathers rows and scatters gradients") {
  Tensor x(4, 2);
  for (std::size_t i = 0; i < 8; ++i) x.data[i] = static_cast<double>(i);
  NodePtr xl = leaf(x);
  NodePtr sel = index_select(xl, {3, 1, 3});
  REQUIRE(sel->value.rows() == 3);
  CHECK(sel->value.at(0, 0) == 6.0);
  backward(sum(sel));
  CHECK(xl->grad.at(3, 0) == 2.0);  // row 3 selected twice
  CHECK(xl->grad.at(1, 0) == 1.0);
  CHECK(xl->grad.at(0, 0) == 0.0);
  REQUIRE_THROWS_AS(index_select(xl, {4}), std::out_of_range);
}

TEST_CASE("checkpoint round-trip preserves bits and carries a version") {
  RngStream rng(9);
  ParamStore store;
  store.meta = "{\"note\":\"test\"}";
  for (int i = 0; i < 3; ++i) {
    Tensor t(2 + i, 3);
    for (double& v : t.data) v = rng.uniform(-5.0, 5.0);
    store.items.emplace_back("p" + std::to_string(i), t);
  }
  std::string path = "ckpt_roundtrip.bin";
  save_checkpoint(path, store);
  ParamStore loaded = load_checkpoint(path);
  REQUIRE(loaded.meta == store.meta);
  REQUIRE(loaded.items.size() == store.items.size());
  for (std::size_t i = 0; i < store.items.size(); ++i) {
    CHECK(loaded.items[i].first == store.items[i].first);
    CHECK(loaded.items[i].second.shape == store.items[i].second.shape);
    CHECK(loaded.items[i].second.data == store.items[i].second.data);
  }
  std::remove(path.c_str());
}

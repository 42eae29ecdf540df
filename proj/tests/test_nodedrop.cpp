#include <doctest.h>

#include <array>
#include <cmath>

#include "fixtures.hpp"
#include "nodedrop/presets.hpp"

using namespace nodedrop;
using testutil::random_tensor;

namespace {

template <typename T>
T margin_of(std::initializer_list<T> w, T b) {
  const std::vector<T> v(w);
  return node_margin<T>(v, b);
}

LayerState<double> dense_state(Shape shape, std::vector<double> w, std::vector<double> b) {
  LayerState<double> s;
  const std::size_t out = shape[0];
  s.W = Tensor<double>(std::move(shape), std::move(w));
  s.b = Tensor<double>({out}, std::move(b));
  return s;
}

LayerState<double> bn_state(std::vector<double> gamma, std::vector<double> shift) {
  LayerState<double> s;
  const std::size_t n = gamma.size();
  s.gamma = Tensor<double>({n}, std::move(gamma));
  s.beta_shift = Tensor<double>({n}, std::move(shift));
  return s;
}

NodeDropConfig with_lambda(double lambda) {
  NodeDropConfig c;
  c.lambda = lambda;
  return c;
}

template <typename T>
Tensor<T> dense_node_output(const std::vector<T>& w, T b, const Tensor<T>& x, ActivationKind act,
                            double beta) {
  LayerState<T> s;
  s.W = Tensor<T>({1, w.size()}, w);
  s.b = Tensor<T>({1}, {b});
  const Tensor<T> z = layer_forward<T>(DenseSpec{w.size(), 1}, s, x, Mode::eval);
  return layer_forward<T>(ActivationSpec{act, beta}, {}, z, Mode::eval);
}

}  // namespace

TEST_CASE("node margin examples") {
  CHECK(margin_of({0.5, -0.3, 0.2}, -0.8) == doctest::Approx(-0.1).epsilon(1e-12));
  CHECK(margin_of({0.5, -0.3, 0.2}, -0.6) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(margin_of({-0.5, -0.3, 0.0}, 0.0) == 0.0);
  CHECK(margin_of({0.5f, -0.3f, 0.2f}, -0.8f) < 0.0f);
  CHECK_THROWS_AS(node_margin<double>(std::span<const double>(), 1.0), ContractError);
}

TEST_CASE("batch-norm margin examples") {
  CHECK(bn_node_margin(0.1, -4.0, 1024) == doctest::Approx(-0.8).epsilon(1e-12));
  CHECK(bn_node_margin(0.0, -0.001, 1024) == doctest::Approx(-0.001).epsilon(1e-12));
  CHECK(bn_node_margin(1.0, 0.0, 4) == 2.0);
  CHECK(bn_node_margin(-1.0, 0.0, 4) == 2.0);
  CHECK_THROWS_AS(bn_node_margin(1.0, 0.0, 1), ContractError);
  CHECK_THROWS_AS(bn_node_margin(1.0, 0.0, 0), ContractError);
}

TEST_CASE("config validation") {
  NodeDropConfig c;
  CHECK_NOTHROW(c.validate());
  c.lambda = -1;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = NodeDropConfig{};
  c.C = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = NodeDropConfig{};
  c.mode = NodeDropMode::batch_norm;
  c.train_batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c.train_batch_size = 2;
  CHECK_NOTHROW(c.validate());
  CHECK(parse_mode("bn") == NodeDropMode::batch_norm);
  CHECK(parse_mode("vanilla") == NodeDropMode::vanilla);
  CHECK_THROWS_AS(parse_mode("l2"), ContractError);
}

TEST_CASE("regularizer examples") {
  const auto node = dense_state({1, 2}, {1.0, -1.0}, {0.0});
  CHECK(regularization_loss(node, with_lambda(1e-5)) == doctest::Approx(2e-5).epsilon(1e-12));
  CHECK(regularization_loss(node, with_lambda(0.0)) == 0.0);
  CHECK(bn_regularization_loss(bn_state({0.5}, {-1.0}), 4, with_lambda(1e-5)) ==
        doctest::Approx(1e-5).epsilon(1e-12));
  // Sum over nodes.
  const auto two = dense_state({2, 2}, {1.0, -1.0, 0.0, 3.0}, {0.0, -3.0});
  CHECK(regularization_loss(two, with_lambda(1.0)) == doctest::Approx(2.0 + 5.0));
}

TEST_CASE("regularizer subgradient examples") {
  const double lambda = 1e-3;
  const auto g = regularization_grad(dense_state({1, 2}, {2.0, -3.0}, {-1.0}), with_lambda(lambda));
  CHECK(g.W[0] == lambda);
  CHECK(g.W[1] == 0.0);
  CHECK(g.b[0] == 0.0);
  const auto g2 = regularization_grad(dense_state({1, 2}, {0.0, 1.0}, {-2.0}), with_lambda(lambda));
  CHECK(g2.W[0] == 0.0);
  CHECK(g2.b[0] == -lambda);

  const auto gb = bn_regularization_grad(bn_state({-0.5, 0.0, 2.0}, {-1.0, -2.0, 0.5}), 4,
                                         with_lambda(lambda));
  CHECK(gb.gamma[0] == doctest::Approx(-2 * lambda));
  CHECK(gb.gamma[1] == 0.0);
  CHECK(gb.gamma[2] == doctest::Approx(2 * lambda));
  CHECK(gb.beta_shift[0] == 0.0);
  CHECK(gb.beta_shift[1] == -lambda);
  CHECK(gb.beta_shift[2] == lambda);
}

TEST_CASE("regularizer gradients match finite differences away from kinks") {
  Rng rng(21);
  auto away = [&](double lo, double hi, double kink) {
    double v;
    do {
      v = rng.uniform(lo, hi);
    } while (std::abs(v - kink) < 1e-2);
    return v;
  };
  for (int trial = 0; trial < 50; ++trial) {
    NodeDropConfig cfg = with_lambda(rng.uniform(1e-6, 1e-2));
    cfg.C = rng.uniform(0.5, 2.0);
    const std::size_t out = 1 + rng.below(4), in = 1 + rng.below(6);
    LayerState<double> s;
    s.W = Tensor<double>({out, in});
    s.b = Tensor<double>({out});
    for (auto& w : s.W.storage()) w = away(-1, 1, 0.0);
    for (auto& b : s.b.storage()) b = away(-3, 1, -cfg.C);
    const auto g = regularization_grad(s, cfg);
    auto f = [&] { return regularization_loss(s, cfg); };
    CHECK(testutil::max_rel_err(g.W, testutil::numeric_grad(s.W, f), 1e-12) < 1e-5);
    CHECK(testutil::max_rel_err(g.b, testutil::numeric_grad(s.b, f), 1e-12) < 1e-5);

    const std::size_t m = 2 + rng.below(500);
    LayerState<double> bn;
    bn.gamma = Tensor<double>({out});
    bn.beta_shift = Tensor<double>({out});
    for (auto& v : bn.gamma.storage()) v = away(-2, 2, 0.0);
    for (auto& v : bn.beta_shift.storage()) v = away(-3, 1, -cfg.C);
    const auto gb = bn_regularization_grad(bn, m, cfg);
    auto fb = [&] { return bn_regularization_loss(bn, m, cfg); };
    CHECK(testutil::max_rel_err(gb.gamma, testutil::numeric_grad(bn.gamma, fb), 1e-12) < 1e-5);
    CHECK(testutil::max_rel_err(gb.beta_shift, testutil::numeric_grad(bn.beta_shift, fb), 1e-12) <
          1e-5);
  }
}

TEST_CASE("network regularizer sums the prunable layers and skips the head") {
  Rng rng(4);
  const auto preset = make_preset("dense160");
  const auto model = Model<double>::build(preset.input_shape, preset.layers, rng);
  const NodeDropConfig cfg = with_lambda(1e-4);
  double expect = 0.0;
  for (const auto& p : prunable_layers(model, cfg))
    expect += regularization_loss(model.layers()[p.weight_layer].state, cfg);
  CHECK(network_regularization_loss(model, cfg) == doctest::Approx(expect).epsilon(1e-12));

  std::vector<LayerGrads<double>> grads(model.size());
  add_regularization_grads(model, cfg, grads);
  CHECK(grads[model.output_layer()].W.empty());
  const auto direct = regularization_grad(model.layers()[0].state, cfg);
  CHECK(grads[0].W == direct.W);
  // Adding onto existing gradients accumulates.
  add_regularization_grads(model, cfg, grads);
  CHECK(grads[0].b[0] == doctest::Approx(2 * direct.b[0]));
}

TEST_CASE("structural validation") {
  Rng rng(1);
  const NodeDropConfig vanilla;
  SUBCASE("relu upstream of a vanilla prunable layer") {
    const auto m = Model<double>::build({4}, {DenseSpec{4, 3}, ActivationSpec{ActivationKind::relu},
                                              DenseSpec{3, 3}, ActivationSpec{ActivationKind::clamped_relu},
                                              DenseSpec{3, 2}},
                                        rng);
    CHECK_THROWS_AS(prunable_layers(m, vanilla), StructuralError);
    CHECK_THROWS_AS(scan_network(m, vanilla), StructuralError);
    try {
      scan_network(m, vanilla);
    } catch (const StructuralError& e) {
      CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
    }
  }
  SUBCASE("hidden layer without activation") {
    const auto m = Model<double>::build({4}, {DenseSpec{4, 3}, DenseSpec{3, 2}}, rng);
    CHECK_THROWS_AS(prunable_layers(m, vanilla), StructuralError);
    const auto m2 = Model<double>::build(
        {4}, {DenseSpec{4, 3}, DenseSpec{3, 3}, ActivationSpec{ActivationKind::clamped_relu}, DenseSpec{3, 2}},
        rng);
    CHECK_THROWS_AS(prunable_layers(m2, vanilla), StructuralError);
  }
  SUBCASE("batch norm in vanilla mode and missing batch norm in bn mode") {
    const auto bn = Model<double>::build(
        {4}, {DenseSpec{4, 3}, BatchNormSpec{3}, ActivationSpec{ActivationKind::relu}, DenseSpec{3, 2}},
        rng);
    CHECK_THROWS_AS(prunable_layers(bn, vanilla), StructuralError);
    NodeDropConfig cfg;
    cfg.mode = NodeDropMode::batch_norm;
    cfg.train_batch_size = 8;
    CHECK(prunable_layers(bn, cfg).size() == 1);
    CHECK(prunable_layers(bn, cfg)[0].bn_values == 8);
    const auto plain = Model<double>::build(
        {4}, {DenseSpec{4, 3}, ActivationSpec{ActivationKind::relu}, DenseSpec{3, 2}}, rng);
    // Without batch norm nothing is certifiable in this mode.
    CHECK(prunable_layers(plain, cfg).empty());
    cfg.train_batch_size = 0;
    CHECK_THROWS_AS(prunable_layers(bn, cfg), ContractError);
  }
  SUBCASE("conv batch-norm values count spatial positions") {
    NodeDropConfig cfg;
    cfg.mode = NodeDropMode::batch_norm;
    cfg.train_batch_size = 4;
    const auto preset = make_preset("dense160_bn");
    const auto m = Model<float>(preset.input_shape, preset.layers);
    const auto p = prunable_layers(m, cfg);
    REQUIRE(p.size() == 5);
    CHECK(p[0].bn_values == 4 * 28 * 28);
    CHECK(p[2].bn_values == 4 * 14 * 14);
    CHECK(p[4].bn_values == 4);
  }
}

TEST_CASE("scan of freshly initialized dense160") {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    Rng rng(seed);
    const auto preset = make_preset("dense160");
    const auto model = Model<float>::build(preset.input_shape, preset.layers, rng);
    const auto report = scan_network(model, NodeDropConfig{});
    CHECK(report.total_nodes == 160);
    CHECK(report.live_nodes == 160);
    REQUIRE(report.layers.size() == 5);
    const std::size_t widths[] = {16, 16, 32, 32, 64};
    for (std::size_t i = 0; i < 5; ++i) CHECK(report.layers[i].node_margins.size() == widths[i]);
    CHECK(report.live_params == report.total_params);
    CHECK(report.total_params == model.param_count());
    REQUIRE(report.reduction_factor);
    CHECK(*report.reduction_factor == 1.0);
  }
}

TEST_CASE("a forced dead node is the only dead node") {
  Rng rng(3);
  const auto preset = make_preset("dense160");
  auto model = Model<double>::build(preset.input_shape, preset.layers, rng);
  const NodeDropConfig cfg;
  // Second conv layer (index 2), channel 5.
  auto& s = model.layers()[2].state;
  for (auto& w : s.W.row(5)) w = 0.0;
  s.b[5] = -cfg.C;
  const auto report = scan_network(model, cfg);
  CHECK(report.live_nodes == 159);
  for (const auto& l : report.layers)
    for (std::size_t o = 0; o < l.dead_mask.size(); ++o) {
      CHECK(l.dead_mask[o] == (l.layer == 2 && o == 5));
      CHECK(l.dead_mask[o] == (l.node_margins[o] <= 0.0));
    }
  // Its filter (16*9 weights + bias) and its fan-in slot in the next conv (32*9) go.
  CHECK(report.total_params - report.live_params == 16 * 9 + 1 + 32 * 9);
  CHECK(report.layers[1].live_params == report.layers[1].params - (16 * 9 + 1));
  const std::string csv = report.to_csv();
  CHECK(csv.rfind("layer,name,nodes,live_nodes,dead_nodes,min_margin,max_margin,params,live_params\n", 0) == 0);
  CHECK(csv.find("2,Conv2d(16->16),16,15,1,") != std::string::npos);
  CHECK(report.margins_csv().find("\n2,5,-1,1\n") != std::string::npos);
  CHECK(report.summary().find("159/160") != std::string::npos);
}

TEST_CASE("compaction with no dead nodes is the identity") {
  Rng rng(5);
  auto net = testutil::random_net<double>(rng, false, 8);
  const auto report = scan_network(net.model, net.cfg);
  REQUIRE(report.live_nodes == report.total_nodes);
  const auto res = compact(net.model, report);
  CHECK(res.model == net.model);
  CHECK(res.params_before == res.params_after);
  const auto shapes = net.model.output_shapes();
  for (std::size_t i = 0; i < res.kept.size(); ++i)
    for (std::size_t k = 0; k < res.kept[i].size(); ++k) CHECK(res.kept[i][k] == k);
}

TEST_CASE("one dead conv channel shrinks the layer and the next fan-in") {
  Rng rng(6);
  const auto preset = make_preset("dense160");
  auto model = Model<float>::build(preset.input_shape, preset.layers, rng);
  auto& s = model.layers()[0].state;
  for (auto& w : s.W.row(3)) w = -std::abs(w);
  s.b[3] = -1.0f;
  const auto report = scan_network(model, NodeDropConfig{});
  const auto res = compact(model, report);
  const auto& L = res.model.layers();
  CHECK(std::get<Conv2dSpec>(L[0].spec).out_ch == 15);
  CHECK(std::get<Conv2dSpec>(L[2].spec).in_ch == 15);
  CHECK(L[0].state.W.shape() == Shape{15, 1, 3, 3});
  CHECK(L[2].state.W.shape() == Shape{16, 15, 3, 3});
  CHECK(res.kept[0].size() == 15);
  CHECK(std::find(res.kept[0].begin(), res.kept[0].end(), 3) == res.kept[0].end());
  CHECK(res.params_after == report.live_params);

  Rng xr(7);
  const auto x = testutil::unit_batch<float>(preset.input_shape, 3, xr);
  CHECK(testutil::bitwise_equal(model.forward(x, Mode::eval), res.model.forward(x, Mode::eval)));
}

TEST_CASE("dead dense node before flatten removes a block of inputs") {
  Rng rng(8);
  const auto preset = make_preset("dense160");
  auto model = Model<float>::build(preset.input_shape, preset.layers, rng);
  // Last conv (index 7) feeds pool, flatten, dense(32*49 -> 64).
  auto& s = model.layers()[7].state;
  for (auto& w : s.W.row(10)) w = 0.0f;
  s.b[10] = -0.5f;
  const auto res = compact(model, scan_network(model, NodeDropConfig{}));
  const std::size_t dense = 11;
  CHECK(std::get<DenseSpec>(res.model.layers()[dense].spec).in == 31 * 49);
  CHECK(res.kept[10].size() == 31 * 49);
  Rng xr(9);
  const auto x = testutil::unit_batch<float>(preset.input_shape, 2, xr);
  CHECK(testutil::bitwise_equal(model.forward(x, Mode::eval), res.model.forward(x, Mode::eval)));
}

TEST_CASE("compaction is output-invariant on random networks") {
  Rng rng(10);
  std::size_t killed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const bool bn = trial % 2 == 1;
    const std::size_t batch = 6;
    auto net = testutil::random_net<double>(rng, bn, batch);
    killed += testutil::kill_random_nodes(net, rng, 0.4);
    const auto report = scan_network(net.model, net.cfg);
    CHECK(report.total_nodes - report.live_nodes >= net.killed);
    const auto res = compact(net.model, report);
    CHECK(res.params_after == report.live_params);
    CHECK(res.params_before == report.total_params);
    // Removed fan-in can only lower downstream margins.
    const auto again = scan_network(res.model, net.cfg);
    CHECK(again.live_nodes <= report.live_nodes);
    for (int k = 0; k < 10; ++k) {
      const auto x = testutil::unit_batch<double>(net.sample_shape, batch, rng);
      const Mode mode = bn ? Mode::train : Mode::eval;
      CHECK(testutil::bitwise_equal(net.model.forward(x, mode), res.model.forward(x, mode)));
    }
    auto f = net.model.template cast<float>();
    const auto fres = compact(f, scan_network(f, net.cfg));
    const auto xf = testutil::unit_batch<float>(net.sample_shape, batch, rng);
    const Mode mode = bn ? Mode::train : Mode::eval;
    CHECK(testutil::bitwise_equal(f.forward(xf, mode), fres.model.forward(xf, mode)));
  }
  CHECK(killed > 20);
}

TEST_CASE("fully dead layer is degenerate") {
  Rng rng(11);
  const auto m0 = Model<double>::build(
      {5}, {DenseSpec{5, 3}, ActivationSpec{ActivationKind::clamped_relu}, DenseSpec{3, 4},
            ActivationSpec{ActivationKind::clamped_relu}, DenseSpec{4, 2}},
      rng);
  auto model = m0;
  auto& s = model.layers()[2].state;
  s.W.fill(-0.1);
  s.b.fill(-1.0);
  const auto report = scan_network(model, NodeDropConfig{});
  CHECK(report.layers[1].live_nodes == 0);
  try {
    compact(model, report);
    FAIL("expected a degenerate-layer error");
  } catch (const DegenerateLayerError& e) {
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
    CHECK(e.layers() == std::vector<std::size_t>{2});
  }
  const auto res = compact(model, report, DegeneratePolicy::keep_one);
  CHECK(std::get<DenseSpec>(res.model.layers()[2].spec).out == 1);
  Rng xr(12);
  const auto x = testutil::unit_batch<double>({5}, 7, xr);
  const auto y = model.forward(x, Mode::eval);
  CHECK(testutil::bitwise_equal(y, res.model.forward(x, Mode::eval)));
  // The network output no longer depends on the input.
  for (std::size_t n = 1; n < 7; ++n) CHECK(y.row(n)[0] == y.row(0)[0]);
}

TEST_CASE("compaction refuses a stale report") {
  Rng rng(13);
  auto net = testutil::random_net<double>(rng, false, 4);
  const auto report = scan_network(net.model, net.cfg);
  net.model.layers()[0].state.b[0] += 1e-3;
  CHECK_THROWS_AS(compact(net.model, report), ContractError);
}

TEST_CASE("vanilla soundness at random points and the adversarial vertex") {
  Rng rng(14);
  const ActivationKind kinds[] = {ActivationKind::clamped_relu, ActivationKind::soft_clamped_relu};
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> w(n);
    for (auto& v : w) v = rng.uniform(-1, 1);
    double pos = 0.0;
    for (double v : w) pos += std::max(v, 0.0);
    const double b = -pos - (trial % 3 == 0 ? 0.0 : rng.uniform(0, 0.2));
    REQUIRE(node_margin<double>(w, b) <= 0.0);
    Tensor<double> x = testutil::unit_batch<double>({n}, 51, rng);
    for (std::size_t i = 0; i < n; ++i) x.at(50, i) = w[i] > 0 ? 1.0 : 0.0;
    const ActivationKind kind = kinds[trial % 2];
    const auto y = dense_node_output(w, b, x, kind, rng.uniform(1, 50));
    for (double v : y.storage()) CHECK(v == 0.0);

    std::vector<float> wf(w.begin(), w.end());
    float pf = 0.0f;
    for (float v : wf) pf += std::max(v, 0.0f);
    const auto yf = dense_node_output(wf, -pf, x.cast<float>(), kind, 10.0);
    for (float v : yf.storage()) CHECK(v == 0.0f);
  }
}

TEST_CASE("batch-norm soundness over random and near-degenerate batches") {
  Rng rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = std::array<std::size_t, 3>{4, 16, 64}[trial % 3];
    const double g = rng.bernoulli(0.2) ? 0.0 : rng.uniform(-1, 1);
    const double shift = -std::abs(g) * std::sqrt(static_cast<double>(m)) - rng.uniform(0, 0.1);
    REQUIRE(bn_node_margin(g, shift, m) <= 0.0);
    LayerState<double> st = empty_state<double>(BatchNormSpec{1});
    st.gamma[0] = g;
    st.beta_shift[0] = shift;
    for (int k = 0; k < 10; ++k) {
      Tensor<double> x = random_tensor<double>({m, 1}, rng, -5, 5);
      if (k % 3 == 1)
        for (auto& v : x.storage()) v = 1.0 + 1e-9 * v;
      if (k % 3 == 2) {
        x.fill(0.25);
        x[rng.below(m)] = 7.0;
      }
      LayerCache<double> cache;
      const auto z = layer_forward<double>(BatchNormSpec{1}, st, x, Mode::train, &cache);
      double sq = 0.0;
      for (double v : cache.bn.xhat.storage()) sq += v * v;
      CHECK(sq <= static_cast<double>(m));
      const auto y = layer_forward<double>(ActivationSpec{ActivationKind::relu}, {}, z, Mode::train);
      for (double v : y.storage()) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("weaker condition implies the margin condition") {
  Rng rng(16);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<double> w(n);
    double l1 = 0.0;
    for (auto& v : w) {
      v = rng.uniform(-1, 1);
      l1 += std::abs(v);
    }
    const double b = -l1 - rng.uniform(0, 0.5);
    CHECK(node_margin<double>(w, b) <= 0.0);
  }
}

TEST_CASE("a regularizer step never raises the margin") {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    NodeDropConfig cfg = with_lambda(1.0);
    const std::size_t n = 1 + rng.below(10);
    LayerState<double> s;
    s.W = random_tensor<double>({1, n}, rng);
    s.b = Tensor<double>({1}, {rng.uniform(-0.99, 2.0)});
    const double before = node_margin<double>(s.W.row(0), s.b[0]);
    if (!(before > -cfg.C)) continue;
    const double step = rng.uniform(1e-6, 1e-3);
    const auto g = regularization_grad(s, cfg);
    for (std::size_t i = 0; i < n; ++i) s.W[i] -= step * g.W[i];
    s.b[0] -= step * g.b[0];
    CHECK(node_margin<double>(s.W.row(0), s.b[0]) <= before);
  }
}

TEST_CASE("plain weight decay alone never kills a node") {
  // Shrinking w and b by a common factor scales the margin; its sign never flips.
  Rng rng(18);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> w(5);
    for (auto& v : w) v = rng.uniform(-1, 1);
    double b = rng.uniform(-0.2, 1.0);
    if (node_margin<double>(w, b) <= 0.0) continue;
    for (int step = 0; step < 2000; ++step) {
      for (auto& v : w) v -= 0.01 * v;
      b -= 0.01 * b;
    }
    CHECK(node_margin<double>(w, b) > 0.0);
  }
}

TEST_CASE("dead nodes receive exactly zero loss gradient") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const bool bn = trial % 2 == 1;
    const std::size_t batch = 5;
    auto net = testutil::random_net<double>(rng, bn, batch);
    testutil::kill_random_nodes(net, rng, 0.5);
    const auto report = scan_network(net.model, net.cfg);
    const auto x = testutil::unit_batch<double>(net.sample_shape, batch, rng);
    std::vector<LayerCache<double>> caches;
    const auto y = net.model.forward(x, Mode::train, &caches);
    const auto r = random_tensor<double>(y.shape(), rng);
    std::vector<LayerGrads<double>> grads;
    net.model.backward(caches, r, grads);
    for (const auto& l : report.layers)
      for (std::size_t o = 0; o < l.dead_mask.size(); ++o) {
        if (!l.dead_mask[o]) continue;
        for (double g : grads[l.layer].W.row(o)) CHECK(g == 0.0);
        CHECK(grads[l.layer].b[o] == 0.0);
        if (l.bn_layer) {
          CHECK(grads[*l.bn_layer].gamma[o] == 0.0);
          CHECK(grads[*l.bn_layer].beta_shift[o] == 0.0);
        }
      }
  }
}

TEST_CASE("fingerprint tracks model state") {
  Rng rng(20);
  auto net = testutil::random_net<float>(rng, false, 4);
  const auto a = model_fingerprint(net.model);
  CHECK(a == model_fingerprint(net.model));
  net.model.layers()[0].state.W[0] = std::nextafter(net.model.layers()[0].state.W[0], 2.0f);
  CHECK(a != model_fingerprint(net.model));
}

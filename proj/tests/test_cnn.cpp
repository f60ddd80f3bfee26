#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "meshdensity/cnn.hpp"
#include "meshdensity/errors.hpp"
#include "meshdensity/rng.hpp"
#include "support.hpp"

using namespace meshdensity;
using namespace meshdensity::cnn;
using testing::Gen;

namespace {

// Direct loop over output pixels with zero padding; pad_top = (total - 1) / 2
// of total = max((out - 1) * stride + k - in, 0), the rest goes bottom/right.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride) {
  const int k = w.h();
  const auto out_size = [&](int in) { return (in + stride - 1) / stride; };
  const int ho = out_size(x.h()), wo = out_size(x.w());
  const int pad_y = std::max((ho - 1) * stride + k - x.h(), 0) / 2;
  const int pad_x = std::max((wo - 1) * stride + k - x.w(), 0) / 2;
  Tensor<double> y(x.n(), w.n(), ho, wo);
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < w.n(); ++o)
      for (int r = 0; r < ho; ++r)
        for (int c = 0; c < wo; ++c) {
          double s = b(0, o, 0, 0);
          for (int i = 0; i < x.c(); ++i)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int yy = r * stride + ky - pad_y, xx = c * stride + kx - pad_x;
                if (yy >= 0 && yy < x.h() && xx >= 0 && xx < x.w()) s += w(o, i, ky, kx) * x(n, i, yy, xx);
              }
          y(n, o, r, c) = s;
        }
  return y;
}

std::size_t conv_params(int cin, int cout, int k) {
  return static_cast<std::size_t>(cout) * cin * k * k + cout;
}

// Independent count of the trainable parameters of a configuration.
std::size_t expected_parameters(const NetworkConfig& c) {
  const bool bn = c.batchnorm == BatchNormMode::Middle;
  const int D = c.depth, K = c.convs_per_depth, k = c.kernel_size;
  const auto ch = [&](int d) { return std::min(c.base_channels << std::min(d - 1, 3), 8 * c.base_channels); };
  std::size_t n = 0;
  for (int d = 1; d <= D; ++d) {
    const int bn_here = bn && d != 1 ? 2 * ch(d) : 0;
    for (int i = 0; i < K; ++i) n += conv_params(i == 0 ? (d == 1 ? c.in_channels : ch(d - 1)) : ch(d), ch(d), k) + bn_here;
    n += conv_params(ch(d), ch(d), k) + bn_here;  // strided down conv
    n += conv_params(d == D ? ch(D) : ch(d + 1), ch(d), k) + bn_here;  // up conv
    for (int i = 0; i < K; ++i) n += conv_params(ch(d), ch(d), k) + bn_here;
    if (c.skip_depths.count(d)) {
      if (c.skip_type == SkipType::Scalar) n += 1;
      if (c.skip_type == SkipType::Tensor) n += conv_params(2 * ch(d), ch(d), 1);
    }
  }
  for (int i = 0; i < K; ++i) n += conv_params(ch(D), ch(D), k) + (bn ? 2 * ch(D) : 0);
  return n + conv_params(ch(1), 1, 1);
}

NetworkConfig plain_config(int depth) {
  NetworkConfig c;
  c.depth = depth;
  c.base_channels = 1;
  c.convs_per_depth = 1;
  c.kernel_size = 1;
  c.batchnorm = BatchNormMode::None;
  c.leaky_placement = LeakyPlacement::None;
  c.skip_type = SkipType::None;
  c.skip_depths = {};
  c.constrained_output = false;
  return c;
}

// Small on-disk catalog of synthetic 16x16 samples whose density depends
// smoothly on the geometry.
dataset::Catalog toy_catalog(const testing::ScratchDir& dir, int n, std::uint64_t seed) {
  Gen g(seed);
  dataset::Catalog cat{dir.path(), {}};
  for (int k = 0; k < n; ++k) {
    dataset::Sample s;
    s.width = s.height = 16;
    s.names = {"geo", "sdf", "mask_prism", "mask_dillute", "density"};
    const double cx = g.uniform(5.0, 11.0), cy = g.uniform(5.0, 11.0), rad = g.uniform(1.5, 3.5);
    dataset::FloatChannel geo(16, 16), sdf(16, 16), density(16, 16);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) {
        const double d = std::hypot(c + 0.5 - cx, r + 0.5 - cy) - rad;
        geo(r, c) = d < 0 ? 1.0f : 0.0f;
        sdf(r, c) = static_cast<float>(std::clamp(0.5 + d / 16.0, 0.0, 1.0));
        density(r, c) = static_cast<float>(std::clamp(0.2 + 0.1 * std::max(d, 0.0), 0.0, 1.0));
      }
    s.channels = {geo, sdf, geo, geo, density};
    s.metadata = {{"id", "toy" + std::to_string(k)}, {"iterations", 6}};
    const std::string rel = "samples/" + s.id() + ".mshd";
    dataset::write_sample(dir / rel, s);
    cat.samples.push_back({s.id(), rel, 6});
  }
  std::sort(cat.samples.begin(), cat.samples.end(), [](auto& a, auto& b) { return a.id < b.id; });
  return cat;
}

NetworkConfig small_net() {
  NetworkConfig c;
  c.depth = 2;
  c.base_channels = 4;
  c.skip_depths = {1, 2};
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Primitives

TEST_CASE("1x1 convolution with unit weight is the identity") {
  Gen g(1);
  Conv2d<double> conv("c", 1, 1, 1);
  conv.weight.value.values().setOnes();
  const auto x = g.tensor<double>({2, 1, 5, 7});
  CHECK(conv.forward(x, false).values().isApprox(x.values(), 0.0));
}

TEST_CASE("3x3 ones kernel spreads an impulse into a 3x3 block") {
  Conv2d<double> conv("c", 1, 1, 3);
  conv.weight.value.values().setOnes();
  Tensor<double> x(1, 1, 7, 7);
  x(0, 0, 3, 3) = 1.0;
  const auto y = conv.forward(x, false);
  REQUIRE(y.shape() == x.shape());
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 7; ++c) CHECK(y(0, 0, r, c) == ((std::abs(r - 3) <= 1 && std::abs(c - 3) <= 1) ? 1.0 : 0.0));
}

TEST_CASE("property: convolution matches the direct loop") {
  Gen g(2);
  for (int t = 0; t < 40; ++t) {
    const int k = g.integer(1, 5), stride = g.integer(1, 2);
    const int cin = g.integer(1, 3), cout = g.integer(1, 3);
    Conv2d<double> conv("c", cin, cout, k, stride);
    conv.weight.value = g.tensor<double>(conv.weight.value.shape());
    conv.bias.value = g.tensor<double>(conv.bias.value.shape());
    const auto x = g.tensor<double>({g.integer(1, 2), cin, g.integer(1, 9), g.integer(1, 9)});
    const auto y = conv.forward(x, false);
    const auto oracle = naive_conv(x, conv.weight.value, conv.bias.value, stride);
    CAPTURE(k);
    CAPTURE(stride);
    REQUIRE(y.shape() == oracle.shape());
    REQUIRE((y.values() - oracle.values()).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("concat and split are inverse") {
  Gen g(3);
  const auto a = g.tensor<double>({2, 3, 4, 4}), b = g.tensor<double>({2, 2, 4, 4});
  const auto [a2, b2] = split_channels(concat_channels(a, b), 3);
  CHECK(a2.values().isApprox(a.values(), 0.0));
  CHECK(b2.values().isApprox(b.values(), 0.0));
  CHECK_THROWS_AS(concat_channels(a, g.tensor<double>({2, 2, 4, 5})), ShapeError);
}

TEST_CASE("gradients of every primitive and of depth-3 networks") {
  for (const auto& r : testing::gradient_suite(11)) {
    CAPTURE(r.name);
    CAPTURE(r.worst_tensor);
    CHECK(r.worst < 1e-4);
  }
}

TEST_CASE("masked pixels never reach the gradients") {
  CHECK(testing::mask_invariant(21, LossKind::L1));
  CHECK(testing::mask_invariant(22, LossKind::L2));
}

TEST_CASE("sigmoid output stays strictly inside (0, 1) in float") {
  Sigmoid<float> s;
  Tensor<float> x(1, 1, 1, 6);
  x.values() << -1e4f, -100.0f, -20.0f, 20.0f, 100.0f, 1e4f;
  const auto y = s.forward(x, false);
  CHECK((y.values() > 0.0f).all());
  CHECK((y.values() < 1.0f).all());
}

// ---------------------------------------------------------------------------
// Network structure

TEST_CASE("depth-1 unit-weight network by hand") {
  // With 1x1 kernels and unit weights every conv is the identity, so the net
  // keeps the even pixels and repeats each into a 2x2 block.
  UNet<double> net(plain_config(1), 0);
  for (auto* p : net.parameters())
    if (p->name.find(".weight") != std::string::npos) p->value.values().setOnes();
  Gen g(4);
  const auto x = g.tensor<double>({1, 1, 6, 8});
  const auto y = net.forward(x, false);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 8; ++c) REQUIRE(y(0, 0, r, c) == x(0, 0, 2 * (r / 2), 2 * (c / 2)));
}

TEST_CASE("scalar skips start closed") {
  NetworkConfig with = plain_config(3);
  with.kernel_size = 3;
  with.base_channels = 2;
  with.leaky_placement = LeakyPlacement::All;
  NetworkConfig without = with;
  with.skip_type = SkipType::Scalar;
  with.skip_depths = {1, 2, 3};
  UNet<double> a(with, 9), b(without, 9);
  Gen g(5);
  const auto x = g.tensor<double>({1, 1, 16, 16});
  CHECK(a.forward(x, false).values().isApprox(b.forward(x, false).values(), 0.0));
  for (auto* p : a.parameters())
    if (p->name.find(".gate") != std::string::npos) p->value.values().setConstant(0.5);
  CHECK_FALSE(a.forward(x, false).values().isApprox(b.forward(x, false).values(), 0.0));
}

TEST_CASE("parameter count") {
  CHECK(UNet<double>(plain_config(1), 0).parameter_count() == 12);  // six 1x1 convs with bias
  Gen g(6);
  for (int t = 0; t < 30; ++t) {
    NetworkConfig c;
    c.depth = g.integer(1, 6);
    c.base_channels = g.integer(1, 4);
    c.convs_per_depth = g.integer(1, 3);
    c.kernel_size = g.integer(1, 4);
    c.batchnorm = g.coin() ? BatchNormMode::Middle : BatchNormMode::None;
    c.skip_type = std::array{SkipType::None, SkipType::Scalar, SkipType::Tensor}[g.integer(0, 2)];
    c.skip_depths.clear();
    for (int d = 1; d <= c.depth; ++d)
      if (g.coin()) c.skip_depths.insert(d);
    UNet<float> net(c, 0);
    std::size_t sum = 0;
    for (auto* p : net.parameters()) sum += static_cast<std::size_t>(p->value.size());
    REQUIRE(net.parameter_count() == expected_parameters(c));
    REQUIRE(sum == expected_parameters(c));
  }
}

TEST_CASE("depth-8 network with 4x4 kernels lands near 8.5e7 parameters") {
  NetworkConfig c;
  c.depth = 8;
  c.convs_per_depth = 2;
  c.kernel_size = 4;
  c.base_channels = 50;
  c.skip_type = SkipType::Tensor;
  c.skip_depths = {2, 3, 4, 5};
  UNet<float> net(c, 0);
  CHECK(net.parameter_count() == expected_parameters(c));
  CHECK(std::abs(static_cast<double>(net.parameter_count()) / 8.5e7 - 1.0) < 0.05);
}

TEST_CASE("initialisation is seeded and bounded by the fan-in") {
  UNet<float> a(small_net(), 3), b(small_net(), 3), c(small_net(), 4);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i]->value.values().isApprox(pb[i]->value.values(), 0.0f));
    if (!pa[i]->value.values().isApprox(pc[i]->value.values(), 0.0f)) differs = true;
    const auto& v = pa[i]->value;
    if (pa[i]->name.ends_with(".weight")) {
      const double bound = std::sqrt(6.0 / (v.c() * v.h() * v.w()));
      REQUIRE(v.values().abs().maxCoeff() <= bound);
    }
    if (pa[i]->name.ends_with(".bias")) REQUIRE(v.values().abs().maxCoeff() == 0.0f);
  }
  CHECK(differs);
}

TEST_CASE("inputs must be multiples of 2^depth") {
  UNet<float> net(small_net(), 0);
  CHECK_THROWS_AS(net.forward(Tensor<float>(1, 1, 10, 16), false), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor<float>(1, 2, 16, 16), false), ShapeError);
  CHECK_NOTHROW(net.forward(Tensor<float>(1, 1, 12, 8), false));
  NetworkConfig bad = small_net();
  bad.skip_depths = {3};
  CHECK_THROWS_AS(UNet<float>(bad, 0), ShapeError);
}

TEST_CASE("float and double copies of a network agree") {
  UNet<float> f(small_net(), 8);
  UNet<double> d(small_net(), 0);
  copy_state(f, d);
  Gen g(7);
  const auto x = g.tensor<float>({2, 1, 16, 16}, 0.0, 1.0);
  const auto yf = f.forward(x, false);
  const auto yd = d.forward(x.cast<double>(), false);
  CHECK((yf.values().cast<double>() - yd.values()).abs().maxCoeff() < 1e-5);
}

// ---------------------------------------------------------------------------
// Loss, metric, optimizer

TEST_CASE("loss values") {
  Tensor<double> pred(1, 1, 2, 2, 0.25), target(1, 1, 2, 2, 0.25), mask(1, 1, 2, 2);
  for (const auto kind : {LossKind::L1, LossKind::L2}) CHECK(masked_loss(pred, target, mask, kind).loss == 0.0);
  target.values().setConstant(0.75);
  CHECK(masked_loss(pred, target, mask, LossKind::L2).loss == doctest::Approx(0.25));
  CHECK(masked_loss(pred, target, mask, LossKind::L1).loss == doctest::Approx(0.5));
  mask.values().setOnes();
  const auto all_masked = masked_loss(pred, target, mask, LossKind::L2);
  CHECK(all_masked.loss == 0.0);
  CHECK(all_masked.count == 0);
  CHECK(all_masked.grad.values().abs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(masked_loss(pred, Tensor<double>(1, 1, 2, 3), mask, LossKind::L1), ShapeError);
}

TEST_CASE("accuracy") {
  Tensor<double> pred(1, 1, 4, 4, 0.3), target(1, 1, 4, 4, 0.3), mask(1, 1, 4, 4);
  CHECK(accuracy(pred, target, mask) == 100.0);
  target.values().setConstant(0.4);
  CHECK(accuracy(pred, target, mask) == doctest::Approx(90.0));
  mask.values().setOnes();
  CHECK(accuracy(pred, target, mask) == 100.0);

  Gen g(9);
  for (int t = 0; t < 20; ++t) {
    const Shape s{g.integer(1, 3), 1, g.integer(1, 8), g.integer(1, 8)};
    const auto p = g.tensor<double>(s, 0.0, 1.0), q = g.tensor<double>(s, 0.0, 1.0);
    Tensor<double> m(s);
    double sum = 0.0;
    int n = 0;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.values()[i] = g.coin(0.3) ? 1.0 : 0.0;
      if (m.values()[i] == 0.0) sum += std::abs(p.values()[i] - q.values()[i]), ++n;
    }
    const double expected = n == 0 ? 100.0 : 100.0 * (1.0 - sum / n);
    REQUIRE(accuracy(p, q, m) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("learning-rate schedule") {
  OptimizerConfig c;
  CHECK(learning_rate(c, 0) == 1e-4);
  CHECK(learning_rate(c, 649) == 1e-4);
  CHECK(learning_rate(c, 650) == doctest::Approx(0.89e-4));
  CHECK(learning_rate(c, 1300) == doctest::Approx(0.89 * 0.89e-4));
  c.decay_every = 0;
  CHECK_THROWS(validate(c));
}

TEST_CASE("adam: first step moves each weight by the learning rate against its gradient") {
  Gen g(10);
  Param<double> p{"p", g.tensor<double>({1, 1, 4, 4}), g.tensor<double>({1, 1, 4, 4}, 0.1, 1.0), true};
  for (Eigen::Index i = 0; i < 8; ++i) p.grad.values()[i] *= -1.0;
  const auto before = p.value;
  Adam<double> adam(OptimizerConfig{});
  adam.step({&p});
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    const double step = p.value.values()[i] - before.values()[i];
    REQUIRE(step == doctest::Approx(-1e-4 * (p.grad.values()[i] > 0 ? 1.0 : -1.0)).epsilon(1e-6));
  }
  CHECK(adam.steps_taken() == 1);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  Gen g(11);
  Param<float> p{"p", g.tensor<float>({1, 2, 3, 3}), Tensor<float>(1, 2, 3, 3), true};
  const auto before = p.value;
  Adam<float> adam(OptimizerConfig{});
  for (int k = 0; k < 5; ++k) adam.step({&p});
  CHECK(p.value.values().isApprox(before.values(), 0.0f));
}

// ---------------------------------------------------------------------------
// Training

TEST_CASE("zero epochs return the initial network") {
  testing::ScratchDir dir("train0");
  dataset::SampleStore store(toy_catalog(dir, 3, 1));
  TrainConfig tc;
  tc.epochs = 0;
  auto r = train(store, {{"toy0", "toy1"}, {"toy2"}}, small_net(), OptimizerConfig{}, tc);
  CHECK(r.history.empty());
  CHECK(r.steps == 0);
  UNet<float> fresh(small_net(), derive_seed(tc.seed, 1));
  const auto a = r.net.parameters();
  const auto b = fresh.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value.values().isApprox(b[i]->value.values(), 0.0f));
}

TEST_CASE("one sample is overfit tenfold in 200 steps") {
  testing::ScratchDir dir("overfit");
  dataset::SampleStore store(toy_catalog(dir, 1, 2));
  OptimizerConfig opt;
  opt.lr0 = 3e-3;
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 1;
  tc.input = dataset::InputChannel::Sdf;
  tc.mask = dataset::MaskChannel::Prism;
  auto r = train(store, {{"toy0"}, {}}, small_net(), opt, tc);
  CHECK(r.steps == 200);
  const auto final = evaluate(r.net, store, {"toy0"}, tc);
  CAPTURE(r.initial.loss);
  CAPTURE(final.loss);
  CHECK(final.loss * 10.0 <= r.initial.loss);
}

TEST_CASE("training is deterministic and writes history and checkpoints") {
  testing::ScratchDir dir("determinism");
  dataset::SampleStore store(toy_catalog(dir, 6, 3));
  const dataset::Split split{{"toy0", "toy1", "toy2", "toy3"}, {"toy4", "toy5"}};
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 2;
  tc.seed = 17;
  tc.out_dir = dir / "run";
  tc.checkpoint_extra = {{"note", "kept"}};
  auto a = train(store, split, small_net(), OptimizerConfig{}, tc);
  tc.out_dir.clear();
  auto b = train(store, split, small_net(), OptimizerConfig{}, tc);
  REQUIRE(a.history.size() == 3);
  CHECK(a.steps == 6);
  CHECK(history_csv(a.history) == history_csv(b.history));
  const auto pa = a.net.parameters(), pb = b.net.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i]->value.values().isApprox(pb[i]->value.values(), 0.0f));

  CHECK(fs::exists(dir / "run/history.csv"));
  Json meta;
  auto loaded = load_checkpoint(dir / "run/best.mshd", &meta);
  CHECK(meta.at("extra").at("note") == "kept");
  CHECK(meta.at("extra").at("input") == "geo");
  CHECK(meta.at("extra").at("seed") == 17);
}

TEST_CASE("checkpoint roundtrip reproduces predictions bit for bit") {
  testing::ScratchDir dir("ckpt");
  UNet<float> net(small_net(), 5);
  Gen g(12);
  // Give the batch-norm running statistics non-default values.
  for (int k = 0; k < 3; ++k) net.forward(g.tensor<float>({2, 1, 16, 16}, 0.0, 1.0), true);
  save_checkpoint(dir / "c.mshd", net, {{"tag", 1}});
  auto back = load_checkpoint(dir / "c.mshd");
  CHECK(to_json(back.config()) == to_json(net.config()));
  const auto x = g.tensor<float>({1, 1, 16, 16}, 0.0, 1.0);
  const auto y0 = net.forward(x, false), y1 = back.forward(x, false);
  CHECK(std::memcmp(y0.data(), y1.data(), sizeof(float) * static_cast<std::size_t>(y0.size())) == 0);
}

TEST_CASE("loading into a different architecture names the first bad tensor") {
  testing::ScratchDir dir("mismatch");
  UNet<float> net(small_net(), 5);
  save_checkpoint(dir / "c.mshd", net);
  NetworkConfig wider = small_net();
  wider.base_channels = 8;
  UNet<float> other(wider, 5);
  const auto c = dataset::decode(dataset::read_bytes(dir / "c.mshd"));
  try {
    load_state(c, other);
    FAIL("architecture mismatch accepted");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("enc1.conv0.weight") != std::string::npos);
  }
}

TEST_CASE("network config json roundtrip and rejection of unknown names") {
  NetworkConfig c = small_net();
  c.skip_type = SkipType::Scalar;
  c.leaky_placement = LeakyPlacement::DownOnly;
  c.loss = LossKind::L2;
  CHECK(to_json(network_config_from_json(to_json(c))) == to_json(c));
  Json j = to_json(c);
  j["skip_type"] = "bogus";
  CHECK_THROWS(network_config_from_json(j));
}

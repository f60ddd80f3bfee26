#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <limits>

#include "meshdensity/dataset.hpp"
#include "meshdensity/errors.hpp"
#include "meshdensity/pipeline.hpp"
#include "support.hpp"

using namespace meshdensity;
using namespace meshdensity::dataset;
using testing::Gen;

namespace {

const std::vector<std::string> kChannels{"geo", "sdf", "mask_prism", "mask_dillute", "density"};

Sample random_sample(Gen& g, const std::string& id, int iterations, int size = 64) {
  Sample s;
  s.width = s.height = size;
  s.names = kChannels;
  for (std::size_t k = 0; k < kChannels.size(); ++k) {
    FloatChannel c(size, size);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = static_cast<float>(g.uniform(-1.0, 1.0));
    s.channels.push_back(c);
  }
  // Values that survive only a bit-exact path.
  s.channels[0](0, 0) = -0.0f;
  s.channels[0](0, 1) = std::numeric_limits<float>::denorm_min();
  s.channels[0](0, 2) = std::nextafter(1.0f, 2.0f);
  s.metadata = {{"id", id}, {"iterations", iterations}, {"seed", g.integer(0, 1 << 30)}};
  return s;
}

bool same_bits(const Sample& a, const Sample& b) {
  if (a.width != b.width || a.height != b.height || a.names != b.names || a.metadata != b.metadata) return false;
  for (std::size_t k = 0; k < a.channels.size(); ++k)
    if (std::memcmp(a.channels[k].data(), b.channels[k].data(), sizeof(float) * a.channels[k].size()) != 0)
      return false;
  return true;
}

bool same(const Container& a, const Container& b) {
  return a.width == b.width && a.height == b.height && a.names == b.names && a.metadata == b.metadata &&
         a.arrays == b.arrays;
}

std::size_t header_size(const Container& c) {
  std::size_t n = 20 + 4 + c.metadata.dump().size();
  for (const auto& name : c.names) n += 2 + name.size();
  return n;
}

Catalog synthetic_catalog(int n, int max_iterations = 10) {
  Catalog cat{"unused", {}};
  for (int k = 0; k < n; ++k) {
    char id[32];
    std::snprintf(id, sizeof id, "s%06d", k);
    cat.samples.push_back({id, std::string("samples/") + id + ".mshd", 1 + k % max_iterations});
  }
  return cat;
}

}  // namespace

TEST_CASE("sample roundtrip through a file is bit exact") {
  Gen g(1);
  testing::ScratchDir dir("roundtrip");
  for (int k = 0; k < 5; ++k) {
    const auto s = random_sample(g, "r" + std::to_string(k), k, g.integer(1, 70));
    write_sample(dir / "s.mshd", s);
    REQUIRE(same_bits(read_sample(dir / "s.mshd"), s));
  }
}

TEST_CASE("five 64x64 channels take 81920 payload bytes") {
  Gen g(2);
  const auto c = to_container(random_sample(g, "p", 3));
  const auto bytes = encode(c);
  CHECK(bytes.size() - header_size(c) == 81920);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MSHD");
}

TEST_CASE("fuzz: one corrupted header byte is detected or visible, never a crash") {
  Gen g(3);
  const auto c = to_container(random_sample(g, "fuzz", 4, 16));
  const auto clean = encode(c);
  const std::size_t header = header_size(c);
  // Byte ranges that carry structure rather than text.
  const std::size_t names_end = 20 + [&] {
    std::size_t n = 0;
    for (const auto& s : c.names) n += 2 + s.size();
    return n;
  }();
  for (int k = 0; k < 100; ++k) {
    auto bytes = clean;
    const auto at = static_cast<std::size_t>(g.integer(0, static_cast<int>(header) - 1));
    bytes[at] ^= static_cast<std::uint8_t>(g.integer(1, 255));
    CAPTURE(at);
    const bool structural = at < 20 || (at >= names_end && at < names_end + 4);
    try {
      const auto back = decode(bytes);
      REQUIRE_FALSE(structural);
      REQUIRE_FALSE(same(back, c));
    } catch (const FormatError&) {
    }
  }
}

TEST_CASE("fuzz: random payload flips decode to different values") {
  Gen g(4);
  const auto c = to_container(random_sample(g, "flip", 4, 8));
  const auto clean = encode(c);
  const std::size_t header = header_size(c);
  for (int k = 0; k < 100; ++k) {
    auto bytes = clean;
    const auto at = header + static_cast<std::size_t>(g.integer(0, static_cast<int>(clean.size() - header) - 1));
    bytes[at] ^= static_cast<std::uint8_t>(1u << g.integer(0, 7));
    const auto back = decode(bytes);
    REQUIRE(back.arrays != c.arrays);
  }
}

TEST_CASE("fuzz: every truncation and random garbage raise format errors") {
  Gen g(5);
  const auto clean = encode(to_container(random_sample(g, "cut", 2, 4)));
  for (std::size_t n = 0; n < clean.size(); ++n) {
    CAPTURE(n);
    REQUIRE_THROWS_AS(decode(clean.data(), n), FormatError);
  }
  auto longer = clean;
  longer.push_back(0);
  CHECK_THROWS_AS(decode(longer), FormatError);
  for (int k = 0; k < 200; ++k) {
    std::vector<std::uint8_t> junk(static_cast<std::size_t>(g.integer(0, 200)));
    for (auto& b : junk) b = static_cast<std::uint8_t>(g.integer(0, 255));
    if (junk.size() >= 4 && g.coin()) std::memcpy(junk.data(), "MSHD", 4);
    REQUIRE_THROWS_AS(decode(junk), FormatError);
  }
}

TEST_CASE("format errors report the offending offset") {
  Gen g(6);
  auto bytes = encode(to_container(random_sample(g, "v", 1, 4)));
  bytes[4] = 7;  // version
  try {
    decode(bytes);
    FAIL("version 7 accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 4);
  }
}

TEST_CASE("containers without pixel dimensions use a shapes table") {
  Container c;
  c.names = {"w", "b"};
  c.metadata = {{"shapes", {{"w", {2, 3}}, {"b", {3}}}}};
  c.arrays = {{1, 2, 3, 4, 5, 6}, {7, 8, 9}};
  CHECK(same(decode(encode(c)), c));
  c.arrays[1].pop_back();
  CHECK_THROWS_AS(encode(c), Error);
}

// ---------------------------------------------------------------------------
// Catalog, filtering and batching

TEST_CASE("filter keeps samples with at least the minimum iteration count") {
  const auto cat = synthetic_catalog(10);
  const auto s = filter_and_split(cat, 5, 0.0, 0);
  CHECK(s.train.size() == 6);
  CHECK(s.val.empty());
  CHECK_THROWS_AS(filter_and_split(cat, 11, 0.1, 0), Error);
  CHECK_THROWS_AS(filter_and_split(cat, 5, 1.0, 0), Error);
}

TEST_CASE("split of 11059 samples puts 1105 in validation") {
  auto cat = synthetic_catalog(11059);
  for (auto& e : cat.samples) e.iterations = 8;
  const auto s = filter_and_split(cat, 5, 0.1, 42);
  CHECK(s.val.size() == 1105);
  CHECK(s.train.size() == 11059 - 1105);
}

TEST_CASE("property: splits are deterministic and partition the filtered set") {
  Gen g(7);
  for (int k = 0; k < 20; ++k) {
    auto cat = synthetic_catalog(g.integer(1, 400));
    std::shuffle(cat.samples.begin(), cat.samples.end(), g.engine());  // order must not matter
    const int min_iters = g.integer(1, 10);
    const double frac = g.uniform(0.0, 0.5);
    const auto seed = static_cast<std::uint64_t>(g.integer(0, 1000));
    std::size_t filtered = 0;
    for (const auto& e : cat.samples) filtered += e.iterations >= min_iters;
    if (filtered == 0) continue;
    const auto a = filter_and_split(cat, min_iters, frac, seed);
    auto sorted = cat;
    std::sort(sorted.samples.begin(), sorted.samples.end(), [](auto& x, auto& y) { return x.id < y.id; });
    const auto b = filter_and_split(sorted, min_iters, frac, seed);
    REQUIRE(a.train == b.train);
    REQUIRE(a.val == b.val);
    REQUIRE(a.train.size() + a.val.size() == filtered);
    std::set<std::string> all(a.train.begin(), a.train.end());
    for (const auto& id : a.val) REQUIRE(all.insert(id).second);
    for (const auto& id : all) REQUIRE(sorted.entry(id).iterations >= min_iters);
  }
}

TEST_CASE("different seeds give different splits") {
  const auto cat = synthetic_catalog(200);
  CHECK(filter_and_split(cat, 1, 0.2, 1).val != filter_and_split(cat, 1, 0.2, 2).val);
}

TEST_CASE("chunks of 300 ids at 128 are 128, 128 and 44") {
  std::vector<std::string> ids(300);
  for (std::size_t k = 0; k < ids.size(); ++k) ids[k] = std::to_string(k);
  const auto c = chunk(ids, 128);
  REQUIRE(c.size() == 3);
  CHECK(c[0].size() == 128);
  CHECK(c[1].size() == 128);
  CHECK(c[2].size() == 44);
  CHECK(c[2].back() == "299");
  CHECK_THROWS_AS(chunk(ids, 0), Error);
}

TEST_CASE("reindex rebuilds the saved index and skips broken files") {
  Gen g(8);
  testing::ScratchDir dir("catalog");
  Catalog cat{dir.path(), {}};
  for (int k = 0; k < 6; ++k) {
    const auto s = random_sample(g, "id" + std::to_string(5 - k), k + 1, 8);
    const std::string rel = "samples/" + s.id() + ".mshd";
    write_sample(dir / rel, s);
    cat.samples.push_back({s.id(), rel, s.iterations()});
  }
  std::sort(cat.samples.begin(), cat.samples.end(), [](auto& a, auto& b) { return a.id < b.id; });
  cat.save();
  CHECK(Catalog::load(dir.path()).samples == cat.samples);

  {
    std::ofstream broken(dir / "samples/zz.mshd", std::ios::binary);
    broken << "MSHDgarbage";
  }
  std::vector<std::string> rejected;
  CHECK(reindex(dir.path(), 0, &rejected).samples == cat.samples);
  CHECK(rejected == std::vector<std::string>{"samples/zz.mshd"});
  CHECK(reindex(dir.path(), 4).samples.size() == 3);
}

TEST_CASE("batches stack the chosen channels") {
  Gen g(9);
  const auto a = random_sample(g, "a", 5, 8), b = random_sample(g, "b", 5, 8);
  const auto batch = make_batch({&a, &b}, InputChannel::Geo, MaskChannel::DillutePrism);
  CHECK(batch.ids == std::vector<std::string>{"a", "b"});
  CHECK(batch.input.n() == 2);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      REQUIRE(batch.input.image(1)(0, r * 8 + c) == b.channel("geo")(r, c));
      REQUIRE(batch.mask.image(0)(0, r * 8 + c) == a.channel("mask_dillute")(r, c));
      REQUIRE(batch.target.image(1)(0, r * 8 + c) == b.channel("density")(r, c));
    }
  const auto small = random_sample(g, "small", 5, 4);
  CHECK_THROWS_AS(make_batch({&a, &small}, InputChannel::Sdf, MaskChannel::Prism), ShapeError);
}

TEST_CASE("geo input of a generated sample equals the rasterized geometry") {
  pipeline::GenConfig cfg;
  const auto gcfg = pipeline::geometry_for_seed(cfg, 17);
  const auto outline = geometry::generate_obstacle(gcfg);
  const auto field = pipeline::input_field(cfg, outline);
  const auto again = pipeline::input_field(cfg, outline);
  for (const char* name : {"geo", "sdf", "mask_prism", "mask_dillute"}) {
    CAPTURE(name);
    CHECK(field.channel(name) == again.channel(name));
  }
  const auto& geo = field.channel("geo");
  for (int r = 0; r < geo.rows(); ++r)
    for (int c = 0; c < geo.cols(); ++c)
      REQUIRE(geo(r, c) == (geometry::contains(outline, field.pixel_center(r, c)) ? 1.0 : 0.0));
}

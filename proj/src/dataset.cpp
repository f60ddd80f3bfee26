#include "meshdensity/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "meshdensity/rng.hpp"

namespace meshdensity::dataset {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr char kMagic[4] = {'M', 'S', 'H', 'D'};

class Writer {
 public:
  void u16(std::uint16_t v) {
    for (int k = 0; k < 2; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void raw(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return n_ - pos_; }

  void need(std::size_t k, const char* what) const {
    if (k > remaining()) throw FormatError(std::string("truncated ") + what, pos_);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(p_[pos_] | (p_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(p_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return v;
  }
  std::string raw(std::size_t k, const char* what) {
    need(k, what);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), k);
    pos_ += k;
    return s;
  }
  float f32() {
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(p_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return std::bit_cast<float>(v);
  }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.' || ch == '/';
  });
}

// Element count of each array, from the header or from metadata["shapes"].
std::vector<std::uint64_t> array_sizes(const Container& c, std::size_t json_offset) {
  std::vector<std::uint64_t> sizes;
  const std::uint64_t plane = std::uint64_t{c.width} * c.height;
  if (plane > 0) return std::vector<std::uint64_t>(c.names.size(), plane);
  const auto shapes = c.metadata.find("shapes");
  if (c.names.empty()) return sizes;
  if (shapes == c.metadata.end() || !shapes->is_object())
    throw FormatError("zero-sized header without a shapes table", json_offset);
  for (const auto& name : c.names) {
    const auto s = shapes->find(name);
    if (s == shapes->end() || !s->is_array()) throw FormatError("no shape for array '" + name + "'", json_offset);
    std::uint64_t count = 1;
    for (const auto& d : *s) {
      if (!d.is_number_integer() || d.get<std::int64_t>() < 0)
        throw FormatError("bad shape for array '" + name + "'", json_offset);
      const auto dim = d.get<std::uint64_t>();
      if (dim > (std::uint64_t{1} << 40)) throw FormatError("shape too large for '" + name + "'", json_offset);
      count *= dim;
      if (count > (std::uint64_t{1} << 40)) throw FormatError("shape too large for '" + name + "'", json_offset);
    }
    sizes.push_back(count);
  }
  return sizes;
}

}  // namespace

std::vector<std::uint8_t> encode(const Container& c) {
  if (c.names.size() != c.arrays.size()) throw Error("container has " + std::to_string(c.names.size()) +
                                                     " names but " + std::to_string(c.arrays.size()) + " arrays");
  const auto sizes = array_sizes(c, 0);
  for (std::size_t k = 0; k < c.names.size(); ++k) {
    if (!valid_name(c.names[k]) || c.names[k].size() > 0xFFFF) throw Error("invalid array name '" + c.names[k] + "'");
    if (c.arrays[k].size() != sizes[k])
      throw ShapeError("array '" + c.names[k] + "' holds " + std::to_string(c.arrays[k].size()) + " values, expected " +
                       std::to_string(sizes[k]));
  }
  Writer w;
  w.raw(std::string(kMagic, 4));
  w.u32(kVersion);
  w.u32(c.width);
  w.u32(c.height);
  w.u32(static_cast<std::uint32_t>(c.names.size()));
  for (const auto& name : c.names) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
  }
  const std::string meta = c.metadata.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.raw(meta);
  for (const auto& a : c.arrays)
    for (const float v : a) w.f32(v);
  return std::move(w.out);
}

Container decode(const std::uint8_t* bytes, std::size_t size) {
  Reader r(bytes, size);
  Container c;
  if (r.raw(4, "magic") != std::string(kMagic, 4)) throw FormatError("bad magic", 0);
  const std::size_t version_at = r.pos();
  if (const auto v = r.u32("version"); v != kVersion)
    throw FormatError("unsupported version " + std::to_string(v), version_at);
  c.width = r.u32("width");
  c.height = r.u32("height");
  if ((c.width == 0) != (c.height == 0)) throw FormatError("one of width/height is zero", 8);
  const std::size_t count_at = r.pos();
  const std::uint32_t count = r.u32("channel count");
  // Every channel needs at least a length prefix and one name byte.
  if (count > r.remaining() / 3) throw FormatError("channel count exceeds file size", count_at);
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t at = r.pos();
    const std::uint16_t len = r.u16("name length");
    std::string name = r.raw(len, "channel name");
    if (!valid_name(name)) throw FormatError("invalid channel name", at);
    if (!seen.insert(name).second) throw FormatError("duplicate channel name '" + name + "'", at);
    c.names.push_back(std::move(name));
  }
  const std::size_t json_at = r.pos();
  const std::uint32_t json_len = r.u32("metadata length");
  const std::string text = r.raw(json_len, "metadata");
  try {
    c.metadata = Json::parse(text);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("metadata is not valid JSON: ") + e.what(), json_at + 4);
  }
  if (!c.metadata.is_object()) throw FormatError("metadata is not a JSON object", json_at + 4);

  const auto sizes = array_sizes(c, json_at + 4);
  std::uint64_t total = 0;
  for (const auto s : sizes) total += s;
  if (total * 4 != r.remaining())
    throw FormatError("payload holds " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(total * 4),
                      r.pos());
  c.arrays.resize(sizes.size());
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    c.arrays[k].resize(sizes[k]);
    for (auto& v : c.arrays[k]) v = r.f32();
  }
  return c;
}

Container decode(const std::vector<std::uint8_t>& bytes) { return decode(bytes.data(), bytes.size()); }

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes_atomic(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------

bool Sample::has(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

const FloatChannel& Sample::channel(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw Error("sample '" + id() + "' has no channel '" + name + "'");
  return channels[static_cast<std::size_t>(it - names.begin())];
}

std::string Sample::id() const { return metadata.value("id", std::string("?")); }
int Sample::iterations() const { return metadata.value("iterations", 0); }

Container to_container(const Sample& s) {
  if (s.names.size() != s.channels.size()) throw Error("sample names and channels differ in count");
  Container c;
  c.width = static_cast<std::uint32_t>(s.width);
  c.height = static_cast<std::uint32_t>(s.height);
  c.names = s.names;
  c.metadata = s.metadata;
  for (const auto& ch : s.channels) {
    if (ch.rows() != s.height || ch.cols() != s.width)
      throw ShapeError("channel of " + std::to_string(ch.rows()) + "x" + std::to_string(ch.cols()) +
                       " in a " + std::to_string(s.height) + "x" + std::to_string(s.width) + " sample");
    c.arrays.emplace_back(ch.data(), ch.data() + ch.size());
  }
  return c;
}

Sample from_container(const Container& c) {
  if (c.width == 0 || c.height == 0) throw FormatError("sample without pixel dimensions", 8);
  Sample s;
  s.width = static_cast<int>(c.width);
  s.height = static_cast<int>(c.height);
  s.names = c.names;
  s.metadata = c.metadata;
  for (const auto& a : c.arrays)
    s.channels.push_back(Eigen::Map<const FloatChannel>(a.data(), s.height, s.width));
  return s;
}

void write_sample(const fs::path& path, const Sample& s) { write_bytes_atomic(path, encode(to_container(s))); }

Sample read_sample(const fs::path& path) { return from_container(decode(read_bytes(path))); }

// ---------------------------------------------------------------------------

Catalog Catalog::load(const fs::path& root) {
  const auto bytes = read_bytes(root / index_name);
  Json j;
  try {
    j = Json::parse(bytes.begin(), bytes.end());
  } catch (const Json::exception& e) {
    throw Error("catalog index " + (root / index_name).string() + " is not valid JSON: " + e.what());
  }
  Catalog cat{root, {}};
  for (const auto& e : j.at("samples"))
    cat.samples.push_back({e.at("id").get<std::string>(), e.at("path").get<std::string>(), e.at("iterations").get<int>()});
  std::sort(cat.samples.begin(), cat.samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return cat;
}

Json Catalog::to_json() const {
  Json list = Json::array();
  for (const auto& e : samples) list.push_back({{"id", e.id}, {"path", e.path}, {"iterations", e.iterations}});
  return {{"samples", list}};
}

void Catalog::save() const {
  const std::string text = to_json().dump(1);
  write_bytes_atomic(root / index_name, std::vector<std::uint8_t>(text.begin(), text.end()));
}

const CatalogEntry& Catalog::entry(const std::string& id) const {
  const auto it = std::lower_bound(samples.begin(), samples.end(), id,
                                   [](const CatalogEntry& e, const std::string& key) { return e.id < key; });
  if (it == samples.end() || it->id != id) throw Error("catalog has no sample '" + id + "'");
  return *it;
}

fs::path Catalog::path_of(const std::string& id) const { return root / entry(id).path; }

Catalog reindex(const fs::path& root, int min_iterations, std::vector<std::string>* rejected) {
  Catalog cat{root, {}};
  std::set<std::string> ids;
  std::vector<fs::path> files;
  for (const auto& de : fs::recursive_directory_iterator(root))
    if (de.is_regular_file() && de.path().extension() == ".mshd") files.push_back(de.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    const std::string rel = fs::relative(p, root).generic_string();
    try {
      const Sample s = read_sample(p);
      if (s.width == 0 || !s.metadata.contains("id")) throw Error("not a sample");
      if (s.iterations() < min_iterations) continue;
      if (!ids.insert(s.id()).second) throw Error("duplicate id " + s.id());
      cat.samples.push_back({s.id(), rel, s.iterations()});
    } catch (const Error&) {
      if (rejected) rejected->push_back(rel);
    }
  }
  std::sort(cat.samples.begin(), cat.samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return cat;
}

Split filter_and_split(const Catalog& catalog, int min_iterations, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw Error("val_fraction must be in [0, 1)");
  std::vector<std::string> kept;
  for (const auto& e : catalog.samples)
    if (e.iterations >= min_iterations) kept.push_back(e.id);
  if (kept.empty()) throw Error("no sample has at least " + std::to_string(min_iterations) + " refinement iterations");
  std::sort(kept.begin(), kept.end());
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::shuffle(kept.begin(), kept.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(kept.size()) + 1e-9));
  Split s;
  s.val.assign(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(kept.begin() + static_cast<std::ptrdiff_t>(n_val), kept.end());
  return s;
}

std::string channel_name(InputChannel c) { return c == InputChannel::Sdf ? "sdf" : "geo"; }
std::string channel_name(MaskChannel c) { return c == MaskChannel::Prism ? "mask_prism" : "mask_dillute"; }

std::vector<std::vector<std::string>> chunk(const std::vector<std::string>& ids, std::size_t batch_size) {
  if (batch_size == 0) throw Error("batch size must be positive");
  std::vector<std::vector<std::string>> out;
  for (std::size_t k = 0; k < ids.size(); k += batch_size)
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(k),
                     ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), k + batch_size)));
  return out;
}

const Sample& SampleStore::get(const std::string& id) {
  auto it = cache_.find(id);
  if (it == cache_.end()) it = cache_.emplace(id, read_sample(catalog_.path_of(id))).first;
  return it->second;
}

Batch make_batch(const std::vector<const Sample*>& samples, InputChannel input, MaskChannel mask) {
  if (samples.empty()) throw Error("empty batch");
  const int n = static_cast<int>(samples.size());
  const int h = samples.front()->height, w = samples.front()->width;
  Batch b;
  b.input = Tensor<float>(n, 1, h, w);
  b.mask = Tensor<float>(n, 1, h, w);
  b.target = Tensor<float>(n, 1, h, w);
  const std::string in_name = channel_name(input), mask_name = channel_name(mask);
  for (int k = 0; k < n; ++k) {
    const Sample& s = *samples[static_cast<std::size_t>(k)];
    if (s.height != h || s.width != w)
      throw ShapeError("sample '" + s.id() + "' is " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                       ", batch is " + std::to_string(h) + "x" + std::to_string(w));
    for (const auto& name : {in_name, mask_name, std::string("density")})
      if (!s.has(name)) throw Error("sample '" + s.id() + "' is missing channel '" + name + "'");
    b.ids.push_back(s.id());
    b.input.image(k).row(0) = s.channel(in_name).reshaped<Eigen::RowMajor>().transpose();
    b.mask.image(k).row(0) = s.channel(mask_name).reshaped<Eigen::RowMajor>().transpose();
    b.target.image(k).row(0) = s.channel("density").reshaped<Eigen::RowMajor>().transpose();
  }
  return b;
}

Batch make_batch(SampleStore& store, const std::vector<std::string>& ids, InputChannel input, MaskChannel mask) {
  std::vector<const Sample*> samples;
  for (const auto& id : ids) samples.push_back(&store.get(id));
  return make_batch(samples, input, mask);
}

}  // namespace meshdensity::dataset

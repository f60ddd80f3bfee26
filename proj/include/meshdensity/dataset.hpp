#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "meshdensity/tensor.hpp"

namespace meshdensity::dataset {

namespace fs = std::filesystem;
using Json = nlohmann::json;
using FloatChannel = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Generic MSHD container. With width*height > 0 every array holds
// width*height values; otherwise metadata["shapes"][name] gives each array's
// dimensions (used for checkpoints).
struct Container {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::string> names;
  Json metadata = Json::object();
  std::vector<std::vector<float>> arrays;
};

std::vector<std::uint8_t> encode(const Container& c);
// Throws FormatError (with byte offset) on any malformed input.
Container decode(const std::uint8_t* bytes, std::size_t size);
Container decode(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_bytes(const fs::path& path);
// Writes to a sibling temporary file and renames it into place.
void write_bytes_atomic(const fs::path& path, const std::vector<std::uint8_t>& bytes);

// One training example. Row 0 of every channel is the bottom of the domain.
struct Sample {
  int width = 0;
  int height = 0;
  std::vector<std::string> names;
  std::vector<FloatChannel> channels;
  Json metadata = Json::object();  // id, seed, iterations, configs

  bool has(const std::string& name) const;
  const FloatChannel& channel(const std::string& name) const;
  std::string id() const;
  int iterations() const;
};

Container to_container(const Sample& s);
Sample from_container(const Container& c);

void write_sample(const fs::path& path, const Sample& s);
Sample read_sample(const fs::path& path);

// ---------------------------------------------------------------------------
// Catalog: a directory of .mshd files plus index.json.

struct CatalogEntry {
  std::string id;
  std::string path;  // relative to the catalog root
  int iterations = 0;
  friend bool operator==(const CatalogEntry&, const CatalogEntry&) = default;
};

struct Catalog {
  fs::path root;
  std::vector<CatalogEntry> samples;  // sorted by id

  static constexpr const char* index_name = "index.json";

  static Catalog load(const fs::path& root);
  void save() const;
  Json to_json() const;
  const CatalogEntry& entry(const std::string& id) const;
  fs::path path_of(const std::string& id) const;
};

// Rebuilds the index from the sample files under root. Files that fail to
// parse are skipped and listed in `rejected`.
Catalog reindex(const fs::path& root, int min_iterations = 0, std::vector<std::string>* rejected = nullptr);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

// Keeps samples with at least min_iterations, shuffles them with the seed and
// moves floor(val_fraction * N) of them to validation.
Split filter_and_split(const Catalog& catalog, int min_iterations = 5, double val_fraction = 0.1,
                       std::uint64_t seed = 0);

enum class InputChannel { Sdf, Geo };
enum class MaskChannel { Prism, DillutePrism };

std::string channel_name(InputChannel c);
std::string channel_name(MaskChannel c);

// mask == 1 marks pixels excluded from the loss.
struct Batch {
  std::vector<std::string> ids;
  Tensor<float> input, mask, target;
};

// Consecutive chunks of ids; the last one may be short.
std::vector<std::vector<std::string>> chunk(const std::vector<std::string>& ids, std::size_t batch_size);

// In-memory cache of the samples of one catalog.
class SampleStore {
 public:
  explicit SampleStore(Catalog catalog) : catalog_(std::move(catalog)) {}
  const Sample& get(const std::string& id);
  const Catalog& catalog() const { return catalog_; }

 private:
  Catalog catalog_;
  std::map<std::string, Sample> cache_;
};

Batch make_batch(SampleStore& store, const std::vector<std::string>& ids, InputChannel input, MaskChannel mask);
Batch make_batch(const std::vector<const Sample*>& samples, InputChannel input, MaskChannel mask);

}  // namespace meshdensity::dataset

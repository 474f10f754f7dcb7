#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ibn/tensor.hpp"
#include "ibn/transforms.hpp"

namespace ibn {

struct DatasetBundle {
  Tensor images;  // [N,3,H,W], pixels in [0,1]
  std::vector<std::uint16_t> labels;
  std::size_t num_classes = 0;
  std::string domain_tag;
  std::optional<std::uint32_t> content_split;  // part id after content_split()

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> class_histogram() const;
};

enum class Texture { Grain, Stripes, Blotches };

// Appearance recipe of a synthetic domain. Content (layouts, jitter, label
// order) never depends on it.
struct DomainStyle {
  std::string name;
  std::array<double, 3> background{};
  std::array<double, 3> foreground{};  // brighter than background in every preset
  double palette_jitter = 0.0;         // per-image uniform jitter of both colors
  double contrast = 1.0;               // ContrastScale around the image mean
  Texture texture = Texture::Grain;
  double texture_amp = 0.0;
  double noise_sd = 0.0;
  std::optional<StyleProxy> style;
};

// "domA", "domB", "domMonetLike". Throws std::invalid_argument otherwise.
DomainStyle domain_preset(const std::string& name);
const std::vector<std::string>& domain_preset_names();

constexpr std::size_t kImageSize = 32;

// K classes x per_class images of 32x32. Label order is a seeded shuffle that,
// like every content parameter, depends only on (K, per_class, seed), so two
// domains generated with the same seed are content-matched pairs.
DatasetBundle gen_dataset(std::size_t num_classes, std::size_t per_class, const DomainStyle& domain,
                          std::uint64_t seed);

// Splits by class index: part p holds classes [p*K/parts, (p+1)*K/parts).
// Throws std::invalid_argument unless parts >= 1 and divides K.
std::vector<DatasetBundle> content_split(const DatasetBundle& b, std::size_t parts = 2);

DatasetBundle select(const DatasetBundle& b, const std::vector<std::size_t>& indices);

// floor(fraction * n_k) images of each class k, chosen by a seeded shuffle;
// original order is kept. Throws unless 0 < fraction <= 1.
DatasetBundle stratified_subset(const DatasetBundle& b, double fraction, std::uint64_t seed);

DatasetBundle transform_bundle(const DatasetBundle& b, const TransformSpec& spec);

// IBND format. Write/read failures throw IoError, malformed content SchemaError.
void write_ibnd(const DatasetBundle& b, const std::string& path);
DatasetBundle read_ibnd(const std::string& path);
std::vector<char> encode_ibnd(const DatasetBundle& b);

}  // namespace ibn

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "srki/errors.hpp"
#include "srki/tensor.hpp"

namespace srki {

struct ModelConfig {
  std::size_t layers = 4;       // L
  std::size_t width = 64;       // D
  std::size_t heads = 4;        // H
  std::size_t vocab = 0;        // V
  std::size_t encoder_dim = 32; // P
  std::size_t max_seq = 32;
  std::size_t ffn_mult = 4;

  void validate() const {
    if (layers == 0 || width == 0 || heads == 0 || vocab == 0 || encoder_dim == 0 ||
        max_seq == 0 || ffn_mult == 0) {
      throw ConfigError("ModelConfig: all dimensions must be >= 1");
    }
    if (width % heads != 0) {
      throw ConfigError("ModelConfig: width " + std::to_string(width) +
                        " not divisible by heads " + std::to_string(heads));
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Learnable projections of one layer: query adapter (D x D) applied to hidden
// states, key/value adapters (P x D) applied to encoder embeddings.
struct LayerAdapters {
  Tensor query;
  Tensor key;
  Tensor value;
};

// The only trainable parameters once the backbone is frozen.
struct AdapterSet {
  std::vector<LayerAdapters> layers;

  std::size_t layer_count() const { return layers.size(); }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers) {
      out.push_back(&l.query);
      out.push_back(&l.key);
      out.push_back(&l.value);
    }
    return out;
  }

  void validate(const ModelConfig& cfg) const {
    if (layers.size() != cfg.layers) {
      throw DimensionError("AdapterSet: expected " + std::to_string(cfg.layers) +
                           " layers, found " + std::to_string(layers.size()));
    }
    const Shape q{cfg.width, cfg.width}, kv{cfg.encoder_dim, cfg.width};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].query.shape() != q || layers[l].key.shape() != kv ||
          layers[l].value.shape() != kv) {
        throw DimensionError("AdapterSet: layer " + std::to_string(l) + " has shapes " +
                             shape_string(layers[l].query.shape()) + "/" +
                             shape_string(layers[l].key.shape()) + "/" +
                             shape_string(layers[l].value.shape()));
      }
    }
  }

  friend bool operator==(const AdapterSet& a, const AdapterSet& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      if (!(a.layers[i].query == b.layers[i].query) || !(a.layers[i].key == b.layers[i].key) ||
          !(a.layers[i].value == b.layers[i].value)) {
        return false;
      }
    }
    return true;
  }
};

}  // namespace srki

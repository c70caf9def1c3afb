#include "grunlab/intervention.hpp"

#include <algorithm>

namespace grunlab {

std::vector<size_t> select_layers(size_t n_layers) {
  if (n_layers < 1) throw ConfigError("select_layers: model has no layers");
  std::vector<size_t> layers;
  if (n_layers >= 13) {
    layers = {n_layers - 12, n_layers - 7, n_layers};
  } else {
    // Shallow fallback: steps of 2 down from the top, clipped at layer 1.
    for (size_t off : {4, 2, 0})
      if (n_layers > off) layers.push_back(n_layers - off);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

std::vector<size_t> select_layers(size_t n_layers,
                                  const std::vector<size_t>& explicit_layers) {
  if (explicit_layers.empty()) return select_layers(n_layers);
  std::vector<size_t> layers = explicit_layers;
  std::sort(layers.begin(), layers.end());
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 1 || layers[i] > n_layers)
      throw ConfigError("select_layers: layer " + std::to_string(layers[i]) +
                        " out of range for depth " + std::to_string(n_layers));
    if (i > 0 && layers[i] == layers[i - 1])
      throw ConfigError("select_layers: duplicate layer " +
                        std::to_string(layers[i]));
  }
  return layers;
}

}  // namespace grunlab

#pragma once

#include "openx/graph.hpp"

namespace openx {

// Everything an explainer may observe about the classifier: one forward pass
// on a whole graph. No gradients, no edge weights, no access to parameters.
struct Prediction {
  Vector class_probs;
  int label = 0;
  double loss = 0.0;  // -log class_probs[reference_label]
  Matrix node_embeddings;
  Vector graph_embedding;
};

class BlackBox {
 public:
  virtual ~BlackBox() = default;
  virtual Prediction predict(const Graph& g, int reference_label) const = 0;
  virtual int num_classes() const = 0;
  virtual int embedding_dim() const = 0;
};

// Argmax with ties resolved to the lowest index.
inline int argmax(const Vector& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace openx

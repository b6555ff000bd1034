#pragma once

// Holistic-gallery / partial-query evaluation on a held-out identity set.

#include <string>
#include <vector>

#include "vpm/datagen.hpp"
#include "vpm/retrieval.hpp"
#include "vpm/vpm_net.hpp"

namespace vpm {

struct EvalSplit {
  Dataset queries;  // holistic; cropped per evaluation
  Dataset gallery;
};

// Images from `query_camera` become queries; every image stays in the
// gallery, where the cross-camera rule hides each query's own shot.
inline EvalSplit make_eval_split(const Dataset& test, int query_camera = 0) {
  EvalSplit split{{test.height, test.width, {}}, test};
  for (const Sample& s : test.samples) {
    if (s.camera == query_camera) split.queries.samples.push_back(s);
  }
  return split;
}

template <class Model>
std::vector<Descriptor> embed_all(const Model& model, const Dataset& data) {
  std::vector<Descriptor> out;
  out.reserve(data.samples.size());
  for (const Sample& s : data.samples) {
    Descriptor d = model.embed(s.image);
    d.identity = s.identity;
    d.camera = s.camera;
    d.name = s.name;
    out.push_back(std::move(d));
  }
  return out;
}

inline Metrics match_and_score(std::span<const Descriptor> queries, const GalleryIndex& gallery, bool use_visibility) {
  std::vector<RankingResult> rankings;
  std::vector<Label> qlabels, glabels;
  for (const auto& q : queries) {
    rankings.push_back(rank_gallery(q, gallery, use_visibility));
    qlabels.push_back(label_of(q));
  }
  for (const auto& g : gallery.entries()) glabels.push_back(label_of(g));
  return evaluate_rankings(rankings, qlabels, glabels);
}

// Gallery descriptors are computed once; queries are cropped at each ratio.
template <class Model>
class Evaluator {
 public:
  Evaluator(const Model& model, const EvalSplit& split) : model_(model), split_(split), gallery_(embed_all(model, split.gallery)) {}

  Metrics run(double gamma, CropStrategy strategy, bool use_visibility, std::uint64_t seed = 0) const {
    const Dataset q = build_partial_queries(split_.queries, gamma, strategy, seed);
    return match_and_score(embed_all(model_, q), gallery_, use_visibility);
  }

  const GalleryIndex& gallery() const { return gallery_; }

 private:
  const Model& model_;
  const EvalSplit& split_;
  GalleryIndex gallery_;
};

}  // namespace vpm

#pragma once

#include "mgrasp/tensor.hpp"

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mgrasp {

/// How the language→vision cross-attention forms its queries.
///
/// TextQuery: the mean-pooled text row queries the proposals; the attended
/// 1×d vector is broadcast-added to every proposal row before normalisation.
/// RegionQuery: every proposal row queries the text tokens.
enum class QueryMode { TextQuery, RegionQuery };

std::string_view to_string(QueryMode mode);
/// Accepts "text-query" / "region-query". Throws ContractError otherwise.
QueryMode parse_query_mode(std::string_view name);

/// Projections and output normalisation of one attention stream.
struct StreamWeights {
  Tensor query;   // d×d
  Tensor key;     // d×d
  Tensor value;   // d×d
  Tensor output;  // d×d, used only when heads > 1
  Tensor ln_gain; // 1×d
  Tensor ln_bias; // 1×d
};

struct AttentionParams {
  Index dim = 0;
  Index heads = 1;
  StreamWeights text;
  StreamWeights vis;
  StreamWeights seg;

  Index head_dim() const { return dim / heads; }
  /// Every tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  /// Throws ShapeError / ContractError when shapes or head count are inconsistent.
  void validate() const;
};

/// Per-scene inputs of the attention block.
struct StreamFeatures {
  Tensor text;  // K×d token embeddings
  Tensor vis;   // m×d proposal features
  Tensor seg;   // m×d per-proposal segmentation features
};

struct AttentionOutput {
  Tensor z_text;  // K×d
  Tensor z_vis;   // m×d
  Tensor z_seg;   // m×d
  Tensor s_text;  // K×K
  Tensor s_vis;   // 1×m (TextQuery) or m×K (RegionQuery)
  Tensor s_seg;   // m×m
};

/// Attention weights plus the attended values (before any residual).
struct Attended {
  Tensor weights;
  Tensor values;
};

/// softmax(q Wq (k Wk)ᵀ / √d) · v Wv. Single-head scaled dot product.
Attended single_head(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const StreamWeights& w);

/// H-head attention: each head uses a contiguous column block of width d/H of
/// the stream's Q/K/V projections and scale 1/√(d/H); the heads are
/// concatenated and projected by W_O. Returned weights are the mean over heads.
Attended multi_head(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const StreamWeights& w,
                    Index heads);

/// Dispatches to single_head for heads == 1, multi_head otherwise.
Attended attend(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const StreamWeights& w, Index heads);

struct StreamResult {
  Tensor weights;
  Tensor z;
};

StreamResult text_self_attention(const Tensor& f_text, const AttentionParams& p);
StreamResult language_vision_cross_attention(const Tensor& f_text, const Tensor& f_vis, const AttentionParams& p,
                                             QueryMode mode);
/// Residual is taken on the segmentation stream itself.
StreamResult vision_segmentation_cross_attention(const Tensor& f_vis, const Tensor& f_seg, const AttentionParams& p);

/// The whole three-stream block.
AttentionOutput mask_guided_forward(const StreamFeatures& feats, const AttentionParams& p,
                                    QueryMode mode = QueryMode::TextQuery);

}  // namespace mgrasp

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "linedoc/document.hpp"
#include "linedoc/geometry.hpp"
#include "linedoc/ops.hpp"
#include "linedoc/optim.hpp"
#include "linedoc/rng.hpp"

namespace linedoc {

struct ModelConfig {
  int hidden_dim = 64;
  int text_layers = 2;
  int fusion_layers = 2;
  int heads = 4;
  int vocab_size = 0;  // set from the tokenizer
  std::vector<int> conv_channels = {8, 16, 32, 32};
  GridConfig grid;
  int max_lines = 64;
  int max_tokens = 512;
  int ff_mult = 4;
  int rel_buckets = 32;       // per axis, symmetric log-spaced
  bool trc_normalize = true;  // l2-normalize rho/tau before similarity

  int image_size() const { return 224; }
  int feature_map_size() const { return 14; }
  int visual_tokens() const { return 49; }

  void validate() const {
    if (hidden_dim < 1 || heads < 1 || hidden_dim % heads != 0)
      throw std::invalid_argument("config: hidden_dim must divide by heads");
    if (text_layers < 1 || fusion_layers < 0)
      throw std::invalid_argument("config: bad layer counts");
    if (vocab_size < 5) throw std::invalid_argument("config: vocab_size unset");
    if (conv_channels.size() != 4)
      throw std::invalid_argument("config: four conv stages required");
    if (grid.cell_count() < 2) throw std::invalid_argument("config: G >= 2");
    if (rel_buckets < 4 || rel_buckets % 2 != 0)
      throw std::invalid_argument("config: rel_buckets must be even, >= 4");
  }

  nlohmann::json to_json() const {
    return {{"hidden_dim", hidden_dim},       {"text_layers", text_layers},
            {"fusion_layers", fusion_layers}, {"heads", heads},
            {"vocab_size", vocab_size},       {"conv_channels", conv_channels},
            {"grid_rows", grid.rows},         {"grid_cols", grid.cols},
            {"max_lines", max_lines},         {"max_tokens", max_tokens},
            {"ff_mult", ff_mult},             {"rel_buckets", rel_buckets},
            {"trc_normalize", trc_normalize}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.text_layers = j.at("text_layers").get<int>();
    c.fusion_layers = j.at("fusion_layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.conv_channels = j.at("conv_channels").get<std::vector<int>>();
    c.grid.rows = j.at("grid_rows").get<int>();
    c.grid.cols = j.at("grid_cols").get<int>();
    c.max_lines = j.at("max_lines").get<int>();
    c.max_tokens = j.at("max_tokens").get<int>();
    c.ff_mult = j.at("ff_mult").get<int>();
    c.rel_buckets = j.at("rel_buckets").get<int>();
    c.trc_normalize = j.at("trc_normalize").get<bool>();
    return c;
  }
  bool operator==(const ModelConfig& o) const { return to_json() == o.to_json(); }
};

// symmetric log-spaced relative-position bucket (T5 style)
inline int relative_bucket(int delta, int n_buckets, int max_distance) {
  const int half = n_buckets / 2;
  const int exact = half / 2;
  int mag = delta < 0 ? -delta : delta;
  int idx;
  if (mag < exact) {
    idx = mag;
  } else {
    double v = exact + std::log(static_cast<double>(mag) / exact) /
                           std::log(static_cast<double>(max_distance) / exact) *
                           (half - exact);
    idx = std::min(half - 1, static_cast<int>(v));
  }
  return delta < 0 ? half - 1 - idx + half : idx;  // negatives mapped above half
}

class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(0x6d6f64656cULL, seed));
    const int d = cfg_.hidden_dim;
    auto weight = [&](const std::string& name, Shape shape, int fan_in) {
      store_.add(name, Tensor::randn(shape, rng, std::sqrt(2.0 / fan_in), true));
    };
    auto table = [&](const std::string& name, Shape shape, double std = 0.02) {
      store_.add(name, Tensor::randn(shape, rng, std, true));
    };
    auto bias = [&](const std::string& name, int n) {
      store_.add(name, Tensor::zeros({n}, true));
    };
    auto gain = [&](const std::string& name, int n) {
      store_.add(name, Tensor::full({n}, 1.0, true));
    };

    // coordinate and sequence tables start from a sinusoidal code instead of
    // iid noise: nearby coordinates then share representation, so anything
    // learned about one layout position transfers to unseen nearby values
    auto sinusoidal = [&](const std::string& name, int rows, double scale) {
      Tensor t = Tensor::zeros({rows, d}, true);
      for (int p = 0; p < rows; ++p)
        for (int j = 0; j < d; ++j) {
          double freq = std::pow(10000.0, -static_cast<double>(j / 2 * 2) / d);
          double angle = p * freq;
          t.data()[static_cast<size_t>(p) * d + j] =
              scale * (j % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
      store_.add(name, std::move(t));
    };

    // text input embeddings; token identity starts salient (large init) so
    // pooled line features differ by content from the first step, while the
    // coordinate tables start sinusoidal so nearby positions map to nearby
    // codes and unseen coordinates interpolate
    table("emb.token", {cfg_.vocab_size, d}, 0.4);
    sinusoidal("emb.pos1d", std::max(cfg_.max_tokens, cfg_.visual_tokens()), 0.02);
    for (const char* axis : {"x0", "y0", "x1", "y1", "w", "h"})
      sinusoidal(std::string("emb.box_") + axis, 1001, 0.02);
    table("emb.seg", {2, d});

    auto transformer_layer = [&](const std::string& prefix, bool spatial) {
      for (const char* m : {"q", "k", "v", "o"}) {
        weight(prefix + ".attn." + m + ".w", {d, d}, d);
        bias(prefix + ".attn." + m + ".bias", d);
      }
      if (spatial) {
        table(prefix + ".attn.emb_rel1d", {cfg_.rel_buckets}, 0.02);
        table(prefix + ".attn.emb_relx", {cfg_.rel_buckets}, 0.02);
        // vertical bias starts as a local-attention prior: tokens on the
        // same textline (identical y0, bucket 0) attend freely while other
        // lines start strongly down-weighted, so pooled line features stay
        // line-specific from the first step instead of being smoothed into
        // a shared document context; the prior is learned away if unhelpful
        Tensor rely = Tensor::zeros({cfg_.rel_buckets}, true);
        for (int b = 1; b < cfg_.rel_buckets; ++b) rely.data()[b] = -4.0;
        store_.add(prefix + ".attn.emb_rely", std::move(rely));
      }
      gain(prefix + ".ln1.gain", d);
      bias(prefix + ".ln1.bias", d);
      weight(prefix + ".mlp.fc1.w", {d, cfg_.ff_mult * d}, d);
      bias(prefix + ".mlp.fc1.bias", cfg_.ff_mult * d);
      weight(prefix + ".mlp.fc2.w", {cfg_.ff_mult * d, d}, cfg_.ff_mult * d);
      bias(prefix + ".mlp.fc2.bias", d);
      gain(prefix + ".ln2.gain", d);
      bias(prefix + ".ln2.bias", d);
    };
    for (int i = 0; i < cfg_.text_layers; ++i)
      transformer_layer("text.L" + std::to_string(i), true);
    gain("text.lnf.gain", d);
    bias("text.lnf.bias", d);
    for (int i = 0; i < cfg_.fusion_layers; ++i)
      transformer_layer("fusion.L" + std::to_string(i), false);

    // image encoder: four strided conv stages, 224 -> 14
    int cin = 1;
    for (int s = 0; s < 4; ++s) {
      int cout = cfg_.conv_channels[static_cast<size_t>(s)];
      // 2x2 stride-2 kernels keep the receptive field of one 16x16 output
      // cell inside a single textline (3x3 kernels would reach 31 pixels and
      // mix neighbouring lines into every pooled region feature); fan-in is
      // quartered to double the He gain, countering GELU's small-signal
      // attenuation (slope 1/2) across the four stages
      weight("img.conv" + std::to_string(s) + ".w", {cout, cin, 2, 2}, cin);
      bias("img.conv" + std::to_string(s) + ".bias", cout);
      cin = cout;
    }
    weight("img.proj.w", {cin, d}, cin);
    bias("img.proj.bias", d);

    // RoI head: two-layer perceptron to dimension d
    weight("roi.fc1.w", {cin, d}, cin);
    bias("roi.fc1.bias", d);
    weight("roi.fc2.w", {d, d}, d * 16);
    bias("roi.fc2.bias", d);

    // image decoder: exactly three transposed convolutions, 14 -> 224
    const int dc1 = 16, dc2 = 8;
    weight("dec.deconv0.w", {cin, dc1, 2, 2}, cin * 4);
    bias("dec.deconv0.bias", dc1);
    weight("dec.deconv1.w", {dc1, dc2, 2, 2}, dc1 * 4);
    bias("dec.deconv1.bias", dc2);
    weight("dec.deconv2.w", {dc2, 1, 4, 4}, dc2 * 16);
    bias("dec.deconv2.bias", 1);

    // objective heads
    weight("head.mlm.w", {d, cfg_.vocab_size}, d);
    bias("head.mlm.bias", cfg_.vocab_size);
    weight("head.tgm.w", {d, cfg_.grid.cell_count()}, d);
    bias("head.tgm.bias", cfg_.grid.cell_count());
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  // token + 1D position + six-table 2D position + segment embeddings
  Tensor embed_text_inputs(const DocInputs& in) const {
    std::vector<int> x0, y0, x1, y1, w, h;
    for (const BBox& b : in.boxes) {
      x0.push_back(b.x0);
      y0.push_back(b.y0);
      x1.push_back(b.x1);
      y1.push_back(b.y1);
      w.push_back(b.x1 - b.x0);
      h.push_back(b.y1 - b.y0);
    }
    Tensor out = ops::gather_rows(store_.at("emb.token"), in.token_ids);
    out = ops::add(out, ops::gather_rows(store_.at("emb.pos1d"), in.pos_1d));
    out = ops::add(out, ops::gather_rows(store_.at("emb.box_x0"), x0));
    out = ops::add(out, ops::gather_rows(store_.at("emb.box_y0"), y0));
    out = ops::add(out, ops::gather_rows(store_.at("emb.box_x1"), x1));
    out = ops::add(out, ops::gather_rows(store_.at("emb.box_y1"), y1));
    out = ops::add(out, ops::gather_rows(store_.at("emb.box_w"), w));
    out = ops::add(out, ops::gather_rows(store_.at("emb.box_h"), h));
    out = ops::add(out, ops::gather_rows(store_.at("emb.seg"), in.segment_ids));
    return out;
  }

  // content-only token features for textline pooling: a dedicated table so
  // the contrastive line anchors are not dragged around by the other
  // objectives' gradients through the shared input embedding
  // spatial-aware transformer stack over embedded tokens
  Tensor encode_text(Tensor x, const DocInputs& in) const {
    const int t = x.shape()[0];
    std::vector<int> idx1d(static_cast<size_t>(t) * t);
    std::vector<int> idxx(static_cast<size_t>(t) * t);
    std::vector<int> idxy(static_cast<size_t>(t) * t);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j) {
        size_t k = static_cast<size_t>(i) * t + j;
        idx1d[k] = relative_bucket(in.pos_1d[static_cast<size_t>(j)] -
                                       in.pos_1d[static_cast<size_t>(i)],
                                   cfg_.rel_buckets, cfg_.max_tokens);
        idxx[k] = relative_bucket(in.boxes[static_cast<size_t>(j)].x0 -
                                      in.boxes[static_cast<size_t>(i)].x0,
                                  cfg_.rel_buckets, 1000);
        idxy[k] = relative_bucket(in.boxes[static_cast<size_t>(j)].y0 -
                                      in.boxes[static_cast<size_t>(i)].y0,
                                  cfg_.rel_buckets, 1000);
      }
    for (int i = 0; i < cfg_.text_layers; ++i) {
      const std::string p = "text.L" + std::to_string(i);
      Tensor bias = ops::add(
          ops::gather_scalars(store_.at(p + ".attn.emb_rel1d"), idx1d, {t, t}),
          ops::add(
              ops::gather_scalars(store_.at(p + ".attn.emb_relx"), idxx, {t, t}),
              ops::gather_scalars(store_.at(p + ".attn.emb_rely"), idxy, {t, t})));
      x = transformer_block(x, p, bias);
    }
    return ops::layer_norm(x, store_.at("text.lnf.gain"), store_.at("text.lnf.bias"));
  }

  struct ImageEncoding {
    Tensor feature_map;    // [C, 14, 14]
    Tensor visual_tokens;  // [49, d]
  };

  ImageEncoding encode_image(const Tensor& image) const {
    if (image.shape() != Shape{1, cfg_.image_size(), cfg_.image_size()})
      throw std::invalid_argument("encode_image: expected [1, 224, 224]");
    // center the page on its own mean: document pages are mostly background,
    // and removing that DC level lets the convolutional stages respond to
    // stroke contrast from the very first step instead of a shared offset
    double mean = 0.0;
    for (double v : image.data()) mean += v;
    mean /= static_cast<double>(image.data().size());
    Tensor x = Tensor::zeros(image.shape(), false);
    for (size_t i = 0; i < image.data().size(); ++i)
      x.data()[i] = image.data()[i] - mean;
    for (int s = 0; s < 4; ++s) {
      const std::string p = "img.conv" + std::to_string(s);
      x = ops::gelu(ops::conv2d(x, store_.at(p + ".w"), store_.at(p + ".bias"), 2, 0));
    }
    const int c = cfg_.conv_channels[3];
    // center each output channel over the page: GELU channels carry a large
    // shared positive offset that otherwise dominates every pooled region
    // feature, making all textline regions look alike to the RoI head
    {
      const int hw = x.shape()[1] * x.shape()[2];
      Tensor flat = ops::transpose2d(ops::reshape(x, {c, hw}));
      flat = ops::add_rowvec(flat, ops::scale(ops::mean_rows(flat), -1.0));
      x = ops::reshape(ops::transpose2d(flat), {c, x.shape()[1], x.shape()[2]});
    }
    Tensor pooled = ops::adaptive_avg_pool(x, cfg_.grid.rows, cfg_.grid.cols);
    Tensor tokens = ops::transpose2d(
        ops::reshape(pooled, {c, cfg_.grid.cell_count()}));
    tokens = ops::linear(tokens, store_.at("img.proj.w"), store_.at("img.proj.bias"));
    return {x, tokens};
  }

  // map layout-unit line boxes onto the feature map, average-pool each
  // region (expanded to at least one cell), then the RoI perceptron head
  Tensor roi_pool_textlines(const Tensor& feature_map,
                            const std::vector<BBox>& line_boxes,
                            const std::vector<bool>& line_mask) const {
    const int fs = cfg_.feature_map_size();
    std::vector<ops::CellRect> cells(line_boxes.size());
    for (size_t i = 0; i < line_boxes.size(); ++i) {
      if (!line_mask[i]) continue;
      const BBox& b = line_boxes[i];
      ops::CellRect r;
      r.y0 = std::clamp(b.y0 * fs / 1000, 0, fs - 1);
      r.x0 = std::clamp(b.x0 * fs / 1000, 0, fs - 1);
      r.y1 = std::clamp((b.y1 * fs + 999) / 1000, r.y0 + 1, fs);
      r.x1 = std::clamp((b.x1 * fs + 999) / 1000, r.x0 + 1, fs);
      cells[i] = r;
    }
    Tensor pooled = ops::region_avg_pool(feature_map, cells, line_mask);
    Tensor h = ops::gelu(
        ops::linear(pooled, store_.at("roi.fc1.w"), store_.at("roi.fc1.bias")));
    Tensor out = ops::linear(h, store_.at("roi.fc2.w"), store_.at("roi.fc2.bias"));
    return ops::mask_rows(out, line_mask);  // padded lines stay exactly zero
  }

  Tensor pool_textline_text(const Tensor& token_features,
                            const std::vector<int>& membership, int lines) const {
    return ops::pool_rows_by_group(token_features, membership, lines);
  }

  Tensor decode_image_regions(const Tensor& feature_map) const {
    Tensor x = ops::gelu(ops::conv_transpose2d(
        feature_map, store_.at("dec.deconv0.w"), store_.at("dec.deconv0.bias"), 2));
    x = ops::gelu(ops::conv_transpose2d(x, store_.at("dec.deconv1.w"),
                                        store_.at("dec.deconv1.bias"), 2));
    return ops::conv_transpose2d(x, store_.at("dec.deconv2.w"),
                                 store_.at("dec.deconv2.bias"), 4);
  }

  // visual tokens get 1D positions and their grid cell boxes, then the
  // fusion stack runs over [visual; text]
  Tensor encode_multimodal(const Tensor& visual_tokens,
                           const Tensor& text_features) const {
    const int g = cfg_.visual_tokens();
    std::vector<int> vpos(static_cast<size_t>(g));
    std::vector<int> x0(static_cast<size_t>(g)), y0(static_cast<size_t>(g)),
        x1(static_cast<size_t>(g)), y1(static_cast<size_t>(g)),
        w(static_cast<size_t>(g)), h(static_cast<size_t>(g)),
        seg(static_cast<size_t>(g), 1);
    for (int i = 0; i < g; ++i) {
      vpos[static_cast<size_t>(i)] = i;
      BBox cell = grid_cell_bbox(i, cfg_.grid);
      x0[static_cast<size_t>(i)] = cell.x0;
      y0[static_cast<size_t>(i)] = cell.y0;
      x1[static_cast<size_t>(i)] = cell.x1;
      y1[static_cast<size_t>(i)] = cell.y1;
      w[static_cast<size_t>(i)] = cell.x1 - cell.x0;
      h[static_cast<size_t>(i)] = cell.y1 - cell.y0;
    }
    Tensor vis = ops::add(visual_tokens,
                          ops::gather_rows(store_.at("emb.pos1d"), vpos));
    vis = ops::add(vis, ops::gather_rows(store_.at("emb.box_x0"), x0));
    vis = ops::add(vis, ops::gather_rows(store_.at("emb.box_y0"), y0));
    vis = ops::add(vis, ops::gather_rows(store_.at("emb.box_x1"), x1));
    vis = ops::add(vis, ops::gather_rows(store_.at("emb.box_y1"), y1));
    vis = ops::add(vis, ops::gather_rows(store_.at("emb.box_w"), w));
    vis = ops::add(vis, ops::gather_rows(store_.at("emb.box_h"), h));
    vis = ops::add(vis, ops::gather_rows(store_.at("emb.seg"), seg));

    Tensor x = ops::concat_rows(vis, text_features);
    const int t = x.shape()[0];
    Tensor zero_bias = Tensor::zeros({t, t});
    for (int i = 0; i < cfg_.fusion_layers; ++i)
      x = transformer_block(x, "fusion.L" + std::to_string(i), zero_bias);
    return x;
  }

  Tensor mlm_logits(const Tensor& features) const {
    return ops::linear(features, store_.at("head.mlm.w"), store_.at("head.mlm.bias"));
  }
  Tensor tgm_logits(const Tensor& features) const {
    return ops::linear(features, store_.at("head.tgm.w"), store_.at("head.tgm.bias"));
  }

 private:
  // pre-norm block: x += attn(ln1(x)); x += mlp(ln2(x))
  Tensor transformer_block(Tensor x, const std::string& p,
                           const Tensor& attn_bias) const {
    Tensor n1 = ops::layer_norm(x, store_.at(p + ".ln1.gain"),
                                store_.at(p + ".ln1.bias"));
    Tensor q = ops::linear(n1, store_.at(p + ".attn.q.w"), store_.at(p + ".attn.q.bias"));
    Tensor k = ops::linear(n1, store_.at(p + ".attn.k.w"), store_.at(p + ".attn.k.bias"));
    Tensor v = ops::linear(n1, store_.at(p + ".attn.v.w"), store_.at(p + ".attn.v.bias"));
    Tensor a = ops::multihead_attention(q, k, v, attn_bias, cfg_.heads);
    a = ops::linear(a, store_.at(p + ".attn.o.w"), store_.at(p + ".attn.o.bias"));
    x = ops::add(x, a);
    Tensor n2 = ops::layer_norm(x, store_.at(p + ".ln2.gain"),
                                store_.at(p + ".ln2.bias"));
    Tensor f = ops::gelu(
        ops::linear(n2, store_.at(p + ".mlp.fc1.w"), store_.at(p + ".mlp.fc1.bias")));
    f = ops::linear(f, store_.at(p + ".mlp.fc2.w"), store_.at(p + ".mlp.fc2.bias"));
    return ops::add(x, f);
  }

  ModelConfig cfg_;
  ParamStore store_;
};

}  // namespace linedoc

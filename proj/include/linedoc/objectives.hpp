#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "linedoc/document.hpp"
#include "linedoc/model.hpp"
#include "linedoc/ops.hpp"
#include "linedoc/rng.hpp"

namespace linedoc {

struct MaskingConfig {
  double mlm_prob = 0.15;       // per-token selection probability
  double mask_action = 0.80;    // of selected: replace with [MASK]
  double random_action = 0.10;  // of selected: replace with random token
  // remaining fraction keeps the original token
  double line_fraction = 0.15;  // fraction of lines picked for each of
                                // region reconstruction and grid prediction
  double mrm_background = 0.15; // background pixels additionally masked
  double stroke_threshold = 0.525;  // below this a pixel counts as ink
};

// Everything the objectives need to corrupt one document, planned up front
// so the three mask sets can be checked for disjointness.
struct MaskPlan {
  // MLM: positions into DocInputs::token_ids
  std::vector<int> mlm_positions;
  std::vector<int> mlm_labels;       // original token ids
  std::vector<int> mlm_actions;      // 0 = [MASK], 1 = random, 2 = keep
  std::vector<int> mlm_random_ids;   // replacement id when action == 1
  // MRM: picked line indices plus a full-page pixel mask
  std::vector<int> mrm_lines;
  std::vector<uint8_t> pixel_mask;   // [H*W], 1 = reconstruct this pixel
  // TGM: picked line indices
  std::vector<int> tgm_lines;

  nlohmann::json to_json() const {
    size_t masked_pixels = 0;
    for (uint8_t v : pixel_mask) masked_pixels += v;
    return {{"mlm_positions", mlm_positions}, {"mlm_labels", mlm_labels},
            {"mlm_actions", mlm_actions},     {"mrm_lines", mrm_lines},
            {"tgm_lines", tgm_lines},         {"masked_pixels", masked_pixels}};
  }
};

// Plans all three corruption sets for one document:
//  - every token is independently selected for MLM with probability
//    mlm_prob, then assigned mask/random/keep with 0.80/0.10/0.10;
//  - ceil(line_fraction * L) lines are picked for region reconstruction,
//    masking all their ink pixels plus mrm_background of their background
//    pixels, excluding pixels belonging to MLM-selected words;
//  - ceil(line_fraction * E) lines are picked for grid prediction from the
//    E lines that are neither region-picked nor contain an MLM token.
inline MaskPlan plan_masks(const Document& doc, const DocInputs& in,
                           const MaskingConfig& cfg, int vocab_size,
                           uint64_t seed, uint64_t step, uint64_t index) {
  MaskPlan plan;
  if (doc.word_count() == 0)
    throw std::invalid_argument("plan_masks: document has no word tokens");
  Rng rng(mix_seed(mix_seed(seed, step), mix_seed(0x6d61736bULL, index)));

  const int t = static_cast<int>(in.token_ids.size());
  std::vector<bool> line_has_mlm(doc.textlines.size(), false);
  for (int i = 0; i < t; ++i) {
    if (in.membership[static_cast<size_t>(i)] < 0) continue;  // specials exempt
    double u = rng.next_double();
    double a = rng.next_double();  // drawn unconditionally for determinism
    int r = rng.next_int(4, vocab_size - 1);  // never a special token
    if (u >= cfg.mlm_prob) continue;
    plan.mlm_positions.push_back(i);
    plan.mlm_labels.push_back(in.token_ids[static_cast<size_t>(i)]);
    int action = a < cfg.mask_action ? 0
                 : a < cfg.mask_action + cfg.random_action ? 1
                                                           : 2;
    plan.mlm_actions.push_back(action);
    plan.mlm_random_ids.push_back(r);
    int line = in.source_line[static_cast<size_t>(i)];
    if (line >= 0) line_has_mlm[static_cast<size_t>(line)] = true;
  }

  const int lines = static_cast<int>(doc.textlines.size());
  const int mrm_count = std::min(
      lines, static_cast<int>(std::ceil(cfg.line_fraction * lines)));
  plan.mrm_lines = rng.sample_without_replacement(lines, mrm_count);

  std::vector<bool> is_mrm(static_cast<size_t>(lines), false);
  for (int l : plan.mrm_lines) is_mrm[static_cast<size_t>(l)] = true;
  std::vector<int> eligible;
  for (int l = 0; l < lines; ++l)
    if (!is_mrm[static_cast<size_t>(l)] && !line_has_mlm[static_cast<size_t>(l)])
      eligible.push_back(l);
  const int tgm_count = static_cast<int>(
      std::ceil(cfg.line_fraction * static_cast<double>(eligible.size())));
  std::vector<int> picked = rng.sample_without_replacement(
      static_cast<int>(eligible.size()), tgm_count);
  for (int p : picked) plan.tgm_lines.push_back(eligible[static_cast<size_t>(p)]);

  // pixel mask for the region objective; pixels of MLM-selected words are
  // excluded because those regions are blanked on the input side instead
  const int h = doc.image.height, w = doc.image.width;
  plan.pixel_mask.assign(static_cast<size_t>(h) * w, 0);
  std::vector<bool> word_is_mlm_by_token(in.token_ids.size(), false);
  std::vector<std::vector<bool>> mlm_word(doc.textlines.size());
  for (size_t l = 0; l < doc.textlines.size(); ++l)
    mlm_word[l].assign(doc.textlines[l].words.size(), false);
  for (size_t k = 0; k < plan.mlm_positions.size(); ++k) {
    int pos = plan.mlm_positions[k];
    int l = in.source_line[static_cast<size_t>(pos)];
    int word = in.source_word[static_cast<size_t>(pos)];
    if (l >= 0 && word >= 0) mlm_word[static_cast<size_t>(l)][static_cast<size_t>(word)] = true;
  }
  for (int l : plan.mrm_lines) {
    const Textline& line = doc.textlines[static_cast<size_t>(l)];
    const PixelBox& pb = line.pixel_box;
    for (int y = pb.y0; y < pb.y1; ++y)
      for (int x = pb.x0; x < pb.x1; ++x) {
        bool in_mlm_word = false;
        for (size_t wi = 0; wi < line.words.size(); ++wi) {
          if (!mlm_word[static_cast<size_t>(l)][wi]) continue;
          const PixelBox& wb = line.words[wi].pixel_box;
          if (y >= wb.y0 && y < wb.y1 && x >= wb.x0 && x < wb.x1) {
            in_mlm_word = true;
            break;
          }
        }
        double u = rng.next_double();  // unconditional draw for determinism
        if (in_mlm_word) continue;
        bool ink = doc.image.at(y, x) < cfg.stroke_threshold;
        if (ink || u < cfg.mrm_background)
          plan.pixel_mask[static_cast<size_t>(y) * w + x] = 1;
      }
  }
  return plan;
}

// Applies a plan to a document's inputs and pixels. Corrupted image regions
// are filled with the page background estimate (the brightest pixel).
struct CorruptedSample {
  DocInputs inputs;              // token ids and boxes after corruption
  Tensor image;                  // [1, H, W] corrupted page
  Tensor target_image;           // [1, H, W] original page
  std::vector<bool> pixel_mask;  // [H*W], true where reconstruction is scored
};

inline CorruptedSample apply_mask_plan(const Document& doc, const DocInputs& in,
                                       const MaskPlan& plan, const Tokenizer& tok) {
  CorruptedSample s;
  s.inputs = in;
  const int h = doc.image.height, w = doc.image.width;
  double background = 0.0;
  for (double v : doc.image.pixels) background = std::max(background, v);

  s.target_image = Tensor::zeros({1, h, w});
  s.target_image.data() = doc.image.pixels;
  s.image = Tensor::zeros({1, h, w});
  s.image.data() = doc.image.pixels;
  s.pixel_mask.assign(static_cast<size_t>(h) * w, false);
  for (size_t i = 0; i < plan.pixel_mask.size(); ++i) {
    if (!plan.pixel_mask[i]) continue;
    s.pixel_mask[i] = true;
    s.image.data()[i] = background;  // corrupt what the decoder must restore
  }

  // MLM: swap token ids, blank the word's image region, zero its box
  for (size_t k = 0; k < plan.mlm_positions.size(); ++k) {
    int pos = plan.mlm_positions[k];
    int action = plan.mlm_actions[k];
    if (action == 0)
      s.inputs.token_ids[static_cast<size_t>(pos)] = Tokenizer::kMask;
    else if (action == 1)
      s.inputs.token_ids[static_cast<size_t>(pos)] = plan.mlm_random_ids[k];
    int l = in.source_line[static_cast<size_t>(pos)];
    int word = in.source_word[static_cast<size_t>(pos)];
    if (l < 0 || word < 0) continue;
    const PixelBox& wb =
        doc.textlines[static_cast<size_t>(l)].words[static_cast<size_t>(word)].pixel_box;
    for (int y = wb.y0; y < wb.y1; ++y)
      for (int x = wb.x0; x < wb.x1; ++x)
        s.image.data()[static_cast<size_t>(y) * w + x] = background;
  }

  // TGM: tokens of picked lines lose their layout boxes
  std::vector<bool> is_tgm(doc.textlines.size(), false);
  for (int l : plan.tgm_lines) is_tgm[static_cast<size_t>(l)] = true;
  for (size_t i = 0; i < s.inputs.token_ids.size(); ++i) {
    int l = s.inputs.source_line[i];
    if (l >= 0 && is_tgm[static_cast<size_t>(l)])
      s.inputs.boxes[i] = BBox{0, 0, 0, 0};
  }
  (void)tok;
  return s;
}

// ---------------------------------------------------------------------------
// Losses. Each takes already-computed features so a training step can share
// one forward pass across objectives.

// cross entropy over vocab at masked positions of the fused text features
inline Tensor mlm_loss(const Model& model, const Tensor& fused_text,
                       const MaskPlan& plan) {
  if (plan.mlm_positions.empty())
    throw std::invalid_argument("mlm_loss: no masked positions");
  Tensor sel = ops::select_rows(fused_text, plan.mlm_positions);
  return ops::cross_entropy_mean(model.mlm_logits(sel), plan.mlm_labels);
}

// fine-grained contrastive loss over a batch of N documents, from the
// dual-stream (pre-fusion) textline features
struct TextlineFeatures {
  Tensor image_lines;          // [max_lines, d] region features
  Tensor text_lines;           // [max_lines, d] pooled token features
  std::vector<bool> line_mask; // real lines
};

// average textline maximum similarity between two line sets; rows are
// L2-normalized first so every score lands in [-1, 1]
inline Tensor textline_similarity(const Tensor& rho, const Tensor& tau,
                                  const std::vector<bool>& mask_rho,
                                  const std::vector<bool>& mask_tau,
                                  bool normalize = true) {
  Tensor a = normalize ? ops::l2_normalize_rows(rho) : rho;
  Tensor b = normalize ? ops::l2_normalize_rows(tau) : tau;
  return ops::line_max_similarity(a, b, mask_rho, mask_tau);
}

inline Tensor trc_loss(const std::vector<TextlineFeatures>& batch,
                       bool normalize = true) {
  const int n = static_cast<int>(batch.size());
  if (n < 1) throw std::invalid_argument("trc_loss: empty batch");
  std::vector<Tensor> img_norm(batch.size()), txt_norm(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    img_norm[i] = normalize ? ops::l2_normalize_rows(batch[i].image_lines)
                            : batch[i].image_lines;
    txt_norm[i] = normalize ? ops::l2_normalize_rows(batch[i].text_lines)
                            : batch[i].text_lines;
  }
  std::vector<Tensor> s_img2txt, s_txt2img;
  s_img2txt.reserve(static_cast<size_t>(n) * n);
  s_txt2img.reserve(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      s_img2txt.push_back(ops::line_max_similarity(
          img_norm[static_cast<size_t>(i)], txt_norm[static_cast<size_t>(j)],
          batch[static_cast<size_t>(i)].line_mask,
          batch[static_cast<size_t>(j)].line_mask));
      s_txt2img.push_back(ops::line_max_similarity(
          txt_norm[static_cast<size_t>(i)], img_norm[static_cast<size_t>(j)],
          batch[static_cast<size_t>(i)].line_mask,
          batch[static_cast<size_t>(j)].line_mask));
    }
  Tensor m1 = ops::stack_scalars(s_img2txt, {n, n});
  Tensor m2 = ops::stack_scalars(s_txt2img, {n, n});
  std::vector<int> diag(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = i;
  return ops::scale(ops::add(ops::cross_entropy_mean(m1, diag),
                             ops::cross_entropy_mean(m2, diag)),
                    0.5);
}

// mean absolute reconstruction error over masked pixels
inline Tensor mrm_loss(const Tensor& reconstruction, const Tensor& target,
                       const std::vector<bool>& pixel_mask) {
  return ops::l1_masked_mean(reconstruction, target, pixel_mask);
}

// per-document grid-prediction term: the SUM over tokens of the picked
// lines of cross-entropy between grid-cell logits and the token's true
// cell; the batch loss averages these sums over the N documents
inline Tensor tgm_loss_doc(const Model& model, const Tensor& fused_text,
                           const DocInputs& original, const MaskPlan& plan,
                           const GridConfig& grid) {
  std::vector<bool> is_tgm;
  std::vector<int> positions, labels;
  if (!plan.tgm_lines.empty()) {
    int max_line = *std::max_element(plan.tgm_lines.begin(), plan.tgm_lines.end());
    is_tgm.assign(static_cast<size_t>(max_line) + 1, false);
    for (int l : plan.tgm_lines) is_tgm[static_cast<size_t>(l)] = true;
  }
  for (size_t i = 0; i < original.token_ids.size(); ++i) {
    int l = original.source_line[i];
    if (l < 0 || static_cast<size_t>(l) >= is_tgm.size() ||
        !is_tgm[static_cast<size_t>(l)])
      continue;
    positions.push_back(static_cast<int>(i));
    labels.push_back(assign_grid(original.boxes[i], grid));
  }
  if (positions.empty())
    throw std::invalid_argument("tgm_loss: no grid-masked tokens");
  Tensor sel = ops::select_rows(fused_text, positions);
  return ops::scale(ops::cross_entropy_mean(model.tgm_logits(sel), labels),
                    static_cast<double>(positions.size()));
}

struct LossWeights {
  double lambda_trc = 0.2;
  double lambda_mrm = 1.0;
  double lambda_tgm = 1.0;
};

struct LossReport {
  double mlm = 0.0, trc = 0.0, mrm = 0.0, tgm = 0.0, total = 0.0;
  bool mlm_active = false, trc_active = false, mrm_active = false,
       tgm_active = false;
};

// total = mlm + lambda_trc * trc + lambda_mrm * mrm + lambda_tgm * tgm,
// with inactive terms contributing exactly zero
inline Tensor combine_losses(const Tensor* mlm, const Tensor* trc,
                             const Tensor* mrm, const Tensor* tgm,
                             const LossWeights& w, LossReport& report) {
  Tensor total = Tensor::scalar(0.0);
  if (mlm) {
    report.mlm = mlm->item();
    report.mlm_active = true;
    total = ops::add(total, *mlm);
  }
  if (trc) {
    report.trc = trc->item();
    report.trc_active = true;
    total = ops::add(total, ops::scale(*trc, w.lambda_trc));
  }
  if (mrm) {
    report.mrm = mrm->item();
    report.mrm_active = true;
    total = ops::add(total, ops::scale(*mrm, w.lambda_mrm));
  }
  if (tgm) {
    report.tgm = tgm->item();
    report.tgm_active = true;
    total = ops::add(total, ops::scale(*tgm, w.lambda_tgm));
  }
  report.total = total.item();
  return total;
}

}  // namespace linedoc

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "linedoc/docgen.hpp"
#include "linedoc/gradcheck.hpp"
#include "linedoc/objectives.hpp"

using namespace linedoc;

namespace {

// hand-built page: `lines` horizontal lines of `words_per_line` words each,
// used where docgen's page capacity is too small
Document make_grid_document(int lines, int words_per_line, int vocab) {
  Document doc;
  doc.doc_id = "grid";
  doc.orig_width = 224;
  doc.orig_height = 224;
  doc.image.height = 224;
  doc.image.width = 224;
  doc.image.pixels.assign(224 * 224, 0.95);
  const int line_h = 224 / lines;
  const int word_w = 224 / words_per_line;
  int next_token = 4;
  for (int l = 0; l < lines; ++l) {
    Textline line;
    line.line_index = l;
    line.pixel_box = {0, l * line_h, 224, l * line_h + line_h - 2};
    line.line_bbox = normalize_bbox(line.pixel_box, 224, 224);
    for (int w = 0; w < words_per_line; ++w) {
      Word word;
      word.text = "w";
      word.pixel_box = {w * word_w, l * line_h, w * word_w + word_w - 1,
                        l * line_h + line_h - 2};
      word.bbox = normalize_bbox(word.pixel_box, 224, 224);
      word.token_ids = {4 + (next_token++ % (vocab - 4))};
      // one ink pixel per word so every word region has a stroke
      doc.image.pixels[static_cast<size_t>(word.pixel_box.y0) * 224 +
                       word.pixel_box.x0] = 0.10;
      line.words.push_back(word);
    }
    doc.textlines.push_back(line);
  }
  return doc;
}

// independent contrastive-loss evaluator: explicit loops, no autodiff
double brute_force_trc(const std::vector<std::vector<std::vector<double>>>& img,
                       const std::vector<std::vector<std::vector<double>>>& txt,
                       bool normalize) {
  const int n = static_cast<int>(img.size());
  auto norm_rows = [&](std::vector<std::vector<double>> rows) {
    if (!normalize) return rows;
    for (auto& r : rows) {
      double s = 0;
      for (double v : r) s += v * v;
      s = std::sqrt(s);
      if (s > 0)
        for (double& v : r) v /= s;
    }
    return rows;
  };
  auto sim = [&](const std::vector<std::vector<double>>& a,
                 const std::vector<std::vector<double>>& b) {
    double total = 0;
    for (const auto& ra : a) {
      double best = -1e300;
      for (const auto& rb : b) {
        double dot = 0;
        for (size_t k = 0; k < ra.size(); ++k) dot += ra[k] * rb[k];
        best = std::max(best, dot);
      }
      total += best;
    }
    return total / static_cast<double>(a.size());
  };
  std::vector<std::vector<std::vector<double>>> in(img.size()), tn(txt.size());
  for (int i = 0; i < n; ++i) {
    in[static_cast<size_t>(i)] = norm_rows(img[static_cast<size_t>(i)]);
    tn[static_cast<size_t>(i)] = norm_rows(txt[static_cast<size_t>(i)]);
  }
  double loss = 0;
  for (int m = 0; m < n; ++m) {
    // image m against all texts
    double z1 = 0, z2 = 0;
    std::vector<double> s1(static_cast<size_t>(n)), s2(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
      s1[static_cast<size_t>(j)] = sim(in[static_cast<size_t>(m)], tn[static_cast<size_t>(j)]);
      s2[static_cast<size_t>(j)] = sim(tn[static_cast<size_t>(m)], in[static_cast<size_t>(j)]);
    }
    double mx1 = *std::max_element(s1.begin(), s1.end());
    double mx2 = *std::max_element(s2.begin(), s2.end());
    for (int j = 0; j < n; ++j) {
      z1 += std::exp(s1[static_cast<size_t>(j)] - mx1);
      z2 += std::exp(s2[static_cast<size_t>(j)] - mx2);
    }
    loss += 0.5 * (-(std::log(std::exp(s1[static_cast<size_t>(m)] - mx1) / z1)) / n +
                   -(std::log(std::exp(s2[static_cast<size_t>(m)] - mx2) / z2)) / n);
  }
  return loss;
}

TextlineFeatures features_from(const std::vector<std::vector<double>>& img,
                               const std::vector<std::vector<double>>& txt,
                               int pad_lines = 0) {
  const int l = static_cast<int>(img.size());
  const int d = static_cast<int>(img[0].size());
  TextlineFeatures f;
  f.image_lines = Tensor::zeros({l + pad_lines, d});
  f.text_lines = Tensor::zeros({l + pad_lines, d});
  f.line_mask.assign(static_cast<size_t>(l + pad_lines), false);
  for (int i = 0; i < l; ++i) {
    f.line_mask[static_cast<size_t>(i)] = true;
    for (int j = 0; j < d; ++j) {
      f.image_lines.data()[static_cast<size_t>(i) * d + j] = img[static_cast<size_t>(i)][static_cast<size_t>(j)];
      f.text_lines.data()[static_cast<size_t>(i) * d + j] = txt[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
  }
  return f;
}

ModelConfig tiny_config(int vocab) {
  ModelConfig cfg;
  cfg.hidden_dim = 16;
  cfg.heads = 2;
  cfg.text_layers = 1;
  cfg.fusion_layers = 1;
  cfg.ff_mult = 2;
  cfg.conv_channels = {2, 4, 4, 4};
  cfg.vocab_size = vocab;
  return cfg;
}

Tensor image_tensor(const Image& img) {
  Tensor t = Tensor::zeros({1, img.height, img.width});
  t.data() = img.pixels;
  return t;
}

}  // namespace

TEST_CASE("mask planning hits the configured rates") {
  Tokenizer tok = Tokenizer::synthetic(64);
  MaskingConfig cfg;
  Document doc = make_grid_document(16, 32, tok.size());
  DocInputs in = build_doc_inputs(doc, 64, 512);
  REQUIRE(in.token_ids.size() == 512);  // CLS + 511 word tokens

  // selection rate and action split over many independent plans
  size_t tokens = 0, selected = 0, act_mask = 0, act_rand = 0, act_keep = 0;
  double count_sum = 0;
  const int trials = 1000;
  for (int s = 0; s < trials; ++s) {
    MaskPlan plan = plan_masks(doc, in, cfg, tok.size(), 123, 0, static_cast<uint64_t>(s));
    tokens += in.token_ids.size() - 1;  // CLS is exempt
    selected += plan.mlm_positions.size();
    count_sum += static_cast<double>(plan.mlm_positions.size());
    for (int a : plan.mlm_actions) {
      if (a == 0) ++act_mask;
      else if (a == 1) ++act_rand;
      else ++act_keep;
    }
    for (size_t k = 0; k < plan.mlm_positions.size(); ++k) {
      CHECK(in.membership[static_cast<size_t>(plan.mlm_positions[k])] >= 0);
      CHECK(plan.mlm_labels[k] == in.token_ids[static_cast<size_t>(plan.mlm_positions[k])]);
      CHECK(plan.mlm_random_ids[k] >= 4);
      CHECK(plan.mlm_random_ids[k] < tok.size());
    }
  }
  double rate = static_cast<double>(selected) / static_cast<double>(tokens);
  CHECK(std::abs(rate - 0.15) < 0.01);
  double sel = static_cast<double>(selected);
  CHECK(std::abs(act_mask / sel - 0.80) < 0.01);
  CHECK(std::abs(act_rand / sel - 0.10) < 0.01);
  CHECK(std::abs(act_keep / sel - 0.10) < 0.01);
  // mean masked count per 511-token doc is close to 0.15 * 511 = 76.65
  CHECK(std::abs(count_sum / trials - 76.65) < 3.0);
}

TEST_CASE("mask plans keep the three objectives disjoint") {
  Tokenizer tok = Tokenizer::synthetic(128);
  GenParams gp;
  gp.vocab_words = 128;
  MaskingConfig cfg;
  for (int s = 0; s < 1000; ++s) {
    gp.seed = static_cast<uint64_t>(1000 + s);
    Document doc = generate_document(gp, s, tok);
    DocInputs in = build_doc_inputs(doc, 64, 512);
    MaskPlan plan = plan_masks(doc, in, cfg, tok.size(), 7, static_cast<uint64_t>(s), 0);

    const int lines = static_cast<int>(doc.textlines.size());
    CHECK(static_cast<int>(plan.mrm_lines.size()) ==
          static_cast<int>(std::ceil(0.15 * lines)));
    std::vector<bool> is_mrm(static_cast<size_t>(lines), false);
    std::vector<bool> has_mlm(static_cast<size_t>(lines), false);
    for (int l : plan.mrm_lines) {
      CHECK(l >= 0);
      CHECK(l < lines);
      CHECK(!is_mrm[static_cast<size_t>(l)]);  // no duplicates
      is_mrm[static_cast<size_t>(l)] = true;
    }
    for (int pos : plan.mlm_positions) {
      int l = in.source_line[static_cast<size_t>(pos)];
      if (l >= 0) has_mlm[static_cast<size_t>(l)] = true;
    }
    for (int l : plan.tgm_lines) {
      CHECK(!is_mrm[static_cast<size_t>(l)]);
      CHECK(!has_mlm[static_cast<size_t>(l)]);
    }
  }
}

TEST_CASE("region masking covers all ink and samples background at 15%") {
  Tokenizer tok = Tokenizer::synthetic(128);
  GenParams gp;
  gp.vocab_words = 128;
  MaskingConfig cfg;
  cfg.mlm_prob = 0.0;  // isolate the pixel mask from word-region exclusion
  size_t bg_total = 0, bg_masked = 0;
  int seed_i = 0;
  while (bg_total < 100000) {
    gp.seed = static_cast<uint64_t>(40 + seed_i);
    Document doc = generate_document(gp, seed_i, tok);
    DocInputs in = build_doc_inputs(doc, 64, 512);
    MaskPlan plan = plan_masks(doc, in, cfg, tok.size(), 5, 0, static_cast<uint64_t>(seed_i));
    ++seed_i;
    const int w = doc.image.width;
    std::vector<bool> in_picked(doc.image.pixels.size(), false);
    for (int l : plan.mrm_lines) {
      const PixelBox& pb = doc.textlines[static_cast<size_t>(l)].pixel_box;
      for (int y = pb.y0; y < pb.y1; ++y)
        for (int x = pb.x0; x < pb.x1; ++x)
          in_picked[static_cast<size_t>(y) * w + x] = true;
    }
    for (size_t i = 0; i < doc.image.pixels.size(); ++i) {
      bool ink = doc.image.pixels[i] < cfg.stroke_threshold;
      if (!in_picked[i]) {
        CHECK(plan.pixel_mask[i] == 0);  // mask never leaks outside lines
        continue;
      }
      if (ink) {
        CHECK(plan.pixel_mask[i] == 1);  // every stroke pixel is masked
      } else {
        ++bg_total;
        bg_masked += plan.pixel_mask[i];
      }
    }
  }
  double bg_rate = static_cast<double>(bg_masked) / static_cast<double>(bg_total);
  CHECK(std::abs(bg_rate - 0.15) < 0.01);
}

TEST_CASE("a document with MLM tokens on every line yields no grid lines") {
  Tokenizer tok = Tokenizer::synthetic(64);
  Document doc = make_grid_document(4, 8, tok.size());
  DocInputs in = build_doc_inputs(doc, 64, 512);
  MaskingConfig cfg;
  cfg.mlm_prob = 1.0;  // every token selected: every line has an MLM token
  MaskPlan plan = plan_masks(doc, in, cfg, tok.size(), 1, 0, 0);
  CHECK(plan.tgm_lines.empty());
  CHECK(plan.mlm_positions.size() == in.token_ids.size() - 1);

  Document empty = doc;
  empty.textlines.clear();
  CHECK_THROWS(plan_masks(empty, in, cfg, tok.size(), 1, 0, 0));
}

TEST_CASE("applying a plan corrupts tokens, boxes, and pixels") {
  Tokenizer tok = Tokenizer::synthetic(64);
  Document doc = make_grid_document(8, 8, tok.size());
  DocInputs in = build_doc_inputs(doc, 64, 512);
  MaskingConfig cfg;
  MaskPlan plan = plan_masks(doc, in, cfg, tok.size(), 99, 3, 1);
  REQUIRE(!plan.mlm_positions.empty());
  REQUIRE(!plan.mrm_lines.empty());
  CorruptedSample s = apply_mask_plan(doc, in, plan, tok);

  for (size_t k = 0; k < plan.mlm_positions.size(); ++k) {
    size_t pos = static_cast<size_t>(plan.mlm_positions[k]);
    int action = plan.mlm_actions[k];
    if (action == 0) CHECK(s.inputs.token_ids[pos] == Tokenizer::kMask);
    if (action == 1) CHECK(s.inputs.token_ids[pos] == plan.mlm_random_ids[k]);
    if (action == 2) CHECK(s.inputs.token_ids[pos] == in.token_ids[pos]);
  }
  std::vector<bool> is_tgm(doc.textlines.size(), false);
  for (int l : plan.tgm_lines) is_tgm[static_cast<size_t>(l)] = true;
  for (size_t i = 0; i < in.token_ids.size(); ++i) {
    int l = in.source_line[i];
    if (l >= 0 && is_tgm[static_cast<size_t>(l)])
      CHECK(s.inputs.boxes[i] == BBox{0, 0, 0, 0});
    else
      CHECK(s.inputs.boxes[i] == in.boxes[i]);
  }
  // every masked pixel was replaced by the page background level
  double background = 0.0;
  for (double v : doc.image.pixels) background = std::max(background, v);
  size_t masked = 0;
  for (size_t i = 0; i < s.pixel_mask.size(); ++i) {
    if (!s.pixel_mask[i]) continue;
    ++masked;
    CHECK(s.image.data()[i] == background);
  }
  CHECK(masked > 0);
  CHECK(s.target_image.data() == doc.image.pixels);
}

TEST_CASE("textline similarity worked examples") {
  // L=1: plain dot product of unit rows
  auto f1 = features_from({{1.0, 0.0}}, {{0.6, 0.8}});
  Tensor s = textline_similarity(f1.image_lines, f1.text_lines, f1.line_mask,
                                 f1.line_mask);
  CHECK(s.item() == doctest::Approx(0.6).epsilon(1e-12));

  // identical feature sets: every line's best match is itself
  auto f2 = features_from({{1.0, 0.0}, {0.0, 1.0}}, {{1.0, 0.0}, {0.0, 1.0}});
  Tensor s2 = textline_similarity(f2.image_lines, f2.text_lines, f2.line_mask,
                                  f2.line_mask);
  CHECK(s2.item() == doctest::Approx(1.0).epsilon(1e-12));

  //   e1,e2 against (0.8,0.6),(0.6,0.8): row maxima 0.8 and 0.8, mean 0.8
  auto f3 = features_from({{1.0, 0.0}, {0.0, 1.0}}, {{0.8, 0.6}, {0.6, 0.8}});
  Tensor s3 = textline_similarity(f3.image_lines, f3.text_lines, f3.line_mask,
                                  f3.line_mask);
  CHECK(s3.item() == doctest::Approx(0.8).epsilon(1e-12));

  // similarity is bounded by 1 in absolute value after normalization
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    Tensor a = Tensor::randn({3, 4}, rng, 5.0);
    Tensor b = Tensor::randn({2, 4}, rng, 0.3);
    std::vector<bool> ma(3, true), mb(2, true);
    double v = textline_similarity(a, b, ma, mb).item();
    CHECK(v <= 1.0 + 1e-12);
    CHECK(v >= -1.0 - 1e-12);
  }
}

TEST_CASE("contrastive loss matches the brute-force oracle") {
  // N=1: softmax over a single score is 1, so the loss is exactly 0
  auto single = features_from({{1.0, 0.0}}, {{1.0, 0.0}});
  CHECK(trc_loss({single}).item() == 0.0);

  // N=2 orthogonal worked example
  auto d0 = features_from({{1.0, 0.0}, {1.0, 0.0}}, {{1.0, 0.0}, {1.0, 0.0}});
  auto d1 = features_from({{0.0, 1.0}, {0.0, 1.0}}, {{0.0, 1.0}, {0.0, 1.0}});
  double expected = std::log(1.0 + std::exp(-1.0));  // 0.31326...
  CHECK(trc_loss({d0, d1}).item() == doctest::Approx(expected).epsilon(1e-10));
  CHECK(trc_loss({d0, d1}).item() == doctest::Approx(0.31326).epsilon(1e-4));

  // random batches against the independent evaluator
  Rng rng(9);
  for (int trial = 0; trial < 60; ++trial) {
    int n = 1 + rng.next_int(0, 3);
    int d = 2 + rng.next_int(0, 6);
    std::vector<TextlineFeatures> batch;
    std::vector<std::vector<std::vector<double>>> img, txt;
    for (int i = 0; i < n; ++i) {
      int l = 1 + rng.next_int(0, 3);
      std::vector<std::vector<double>> mi, mt;
      for (int r = 0; r < l; ++r) {
        std::vector<double> ri, rt;
        for (int c = 0; c < d; ++c) {
          ri.push_back(rng.next_normal());
          rt.push_back(rng.next_normal());
        }
        mi.push_back(ri);
        mt.push_back(rt);
      }
      img.push_back(mi);
      txt.push_back(mt);
      batch.push_back(features_from(mi, mt));
    }
    double ours = trc_loss(batch).item();
    double oracle = brute_force_trc(img, txt, true);
    CHECK(ours == doctest::Approx(oracle).epsilon(1e-10));
  }
}

TEST_CASE("contrastive loss ignores padded lines and feature scale") {
  Rng rng(31);
  std::vector<std::vector<std::vector<double>>> img, txt;
  std::vector<TextlineFeatures> plain, padded, scaled;
  for (int i = 0; i < 3; ++i) {
    std::vector<std::vector<double>> mi, mt, ms;
    for (int r = 0; r < 3; ++r) {
      std::vector<double> ri, rt, rs;
      for (int c = 0; c < 4; ++c) {
        ri.push_back(rng.next_normal());
        rt.push_back(rng.next_normal());
      }
      for (double v : ri) rs.push_back(7.5 * v);  // positive rescale
      mi.push_back(ri);
      mt.push_back(rt);
      ms.push_back(rs);
    }
    plain.push_back(features_from(mi, mt));
    padded.push_back(features_from(mi, mt, 10));
    scaled.push_back(features_from(ms, mt));
  }
  double base = trc_loss(plain).item();
  CHECK(trc_loss(padded).item() == doctest::Approx(base).epsilon(1e-12));
  CHECK(trc_loss(scaled).item() == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("region reconstruction loss follows the mask") {
  Tensor target = Tensor::zeros({1, 4, 4});
  Rng rng(5);
  for (double& v : target.data()) v = rng.next_double();
  std::vector<bool> mask(16, false);
  mask[1] = mask[5] = mask[9] = true;

  Tensor same = Tensor::zeros({1, 4, 4});
  same.data() = target.data();
  CHECK(mrm_loss(same, target, mask).item() == 0.0);

  Tensor offset = Tensor::zeros({1, 4, 4});
  offset.data() = target.data();
  for (size_t i = 0; i < 16; ++i)
    if (mask[i]) offset.data()[i] += 0.25;
  CHECK(mrm_loss(offset, target, mask).item() == doctest::Approx(0.25).epsilon(1e-12));

  // perturbing unmasked pixels changes nothing
  Tensor perturbed = offset;
  Tensor p2 = Tensor::zeros({1, 4, 4});
  p2.data() = offset.data();
  for (size_t i = 0; i < 16; ++i)
    if (!mask[i]) p2.data()[i] += 123.0;
  CHECK(mrm_loss(p2, target, mask).item() == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("grid loss sums per document and averages across documents") {
  // worked example: rows CE([2,0,0,0], label 0) + CE(uniform) summed
  Tensor logits = Tensor::from({2, 4}, {2, 0, 0, 0, 1, 1, 1, 1});
  std::vector<int> labels = {0, 2};
  double doc_sum = ops::scale(ops::cross_entropy_mean(logits, labels), 2.0).item();
  CHECK(doc_sum == doctest::Approx(1.72705).epsilon(1e-5));
  // N=2 with identical per-document sums S: batch loss = S
  double batch = 0.5 * (doc_sum + doc_sum);
  CHECK(batch == doctest::Approx(doc_sum).epsilon(1e-15));

  // through the model head: zero head weights make each token cost ln G
  Tokenizer tok = Tokenizer::synthetic(32);
  Document doc = make_grid_document(8, 4, tok.size());
  DocInputs in = build_doc_inputs(doc, 64, 512);
  ModelConfig cfg = tiny_config(tok.size());
  Model m(cfg, 3);
  for (double& v : m.params().at("head.tgm.w").data()) v = 0.0;
  for (double& v : m.params().at("head.tgm.bias").data()) v = 0.0;
  MaskingConfig mcfg;
  mcfg.mlm_prob = 0.0;  // keep all lines TGM-eligible
  MaskPlan plan = plan_masks(doc, in, mcfg, tok.size(), 2, 0, 0);
  REQUIRE(!plan.tgm_lines.empty());
  int expected_tokens = 0;
  for (int l : plan.tgm_lines)
    expected_tokens += static_cast<int>(doc.textlines[static_cast<size_t>(l)].words.size());
  const int t = static_cast<int>(in.token_ids.size());
  Rng frng(1);
  Tensor fused = Tensor::randn({t, cfg.hidden_dim}, frng, 1.0);
  Tensor loss = tgm_loss_doc(m, fused, in, plan, cfg.grid);
  CHECK(loss.item() ==
        doctest::Approx(expected_tokens * std::log(49.0)).epsilon(1e-10));
}

TEST_CASE("token prediction loss uses masked positions only") {
  Tokenizer tok = Tokenizer::synthetic(32);
  Document doc = make_grid_document(4, 4, tok.size());
  DocInputs in = build_doc_inputs(doc, 64, 512);
  ModelConfig cfg = tiny_config(tok.size());
  Model m(cfg, 8);
  for (double& v : m.params().at("head.mlm.w").data()) v = 0.0;
  for (double& v : m.params().at("head.mlm.bias").data()) v = 0.0;
  MaskingConfig mcfg;
  MaskPlan plan = plan_masks(doc, in, mcfg, tok.size(), 17, 0, 0);
  REQUIRE(!plan.mlm_positions.empty());
  const int t = static_cast<int>(in.token_ids.size());
  Rng rng(2);
  Tensor fused = Tensor::randn({t, cfg.hidden_dim}, rng, 1.0);
  // uniform logits: loss is exactly ln(vocab)
  CHECK(mlm_loss(m, fused, plan).item() ==
        doctest::Approx(std::log(static_cast<double>(tok.size()))).epsilon(1e-12));

  // labels at unmasked positions are irrelevant by construction: the loss
  // reads only plan.mlm_labels, which cover masked positions alone
  MaskPlan empty_plan;
  CHECK_THROWS(mlm_loss(m, fused, empty_plan));
}

TEST_CASE("loss combination follows the weighted identity") {
  LossWeights w;
  LossReport rep;
  Tensor mlm = Tensor::scalar(2.0), trc = Tensor::scalar(0.5),
         mrm = Tensor::scalar(0.3), tgm = Tensor::scalar(0.4);
  Tensor total = combine_losses(&mlm, &trc, &mrm, &tgm, w, rep);
  CHECK(total.item() == 2.0 + 0.2 * 0.5 + 0.3 + 0.4);
  CHECK(rep.total == rep.mlm + 0.2 * rep.trc + 1.0 * rep.mrm + 1.0 * rep.tgm);
  CHECK(rep.mlm_active);
  CHECK(rep.trc_active);

  LossReport rep0;
  Tensor z = Tensor::scalar(0.0);
  CHECK(combine_losses(&z, &z, &z, &z, w, rep0).item() == 0.0);

  // lambda_trc = 0 removes the contrastive term entirely
  LossWeights ablate = w;
  ablate.lambda_trc = 0.0;
  LossReport rep1, rep2;
  Tensor trc_big = Tensor::scalar(100.0);
  double t1 = combine_losses(&mlm, &trc, &mrm, &tgm, ablate, rep1).item();
  double t2 = combine_losses(&mlm, &trc_big, &mrm, &tgm, ablate, rep2).item();
  CHECK(t1 == t2);

  // skipped components contribute exactly zero
  LossReport rep3;
  Tensor only = combine_losses(&mlm, nullptr, nullptr, nullptr, w, rep3);
  CHECK(only.item() == 2.0);
  CHECK(!rep3.trc_active);
  CHECK(rep3.trc == 0.0);
}

TEST_CASE("contrastive loss gradients flow through both encoders") {
  Tokenizer tok = Tokenizer::synthetic(32);
  GenParams gp;
  gp.seed = 55;
  gp.vocab_words = 32;
  gp.lines_min = 3;
  gp.lines_max = 3;
  gp.words_min = 2;
  gp.words_max = 2;
  Document d0 = generate_document(gp, 0, tok);
  Document d1 = generate_document(gp, 1, tok);
  ModelConfig cfg = tiny_config(tok.size());
  Model m(cfg, 12);

  auto line_features = [&](const Document& doc) {
    DocInputs in = build_doc_inputs(doc, cfg.max_lines, cfg.max_tokens);
    auto enc = m.encode_image(image_tensor(doc.image));
    std::vector<BBox> boxes(static_cast<size_t>(cfg.max_lines), BBox{0, 0, 0, 0});
    for (const auto& line : doc.textlines)
      boxes[static_cast<size_t>(line.line_index)] = line.line_bbox;
    TextlineFeatures f;
    f.image_lines = m.roi_pool_textlines(enc.feature_map, boxes, in.line_mask);
    Tensor text = m.encode_text(m.embed_text_inputs(in), in);
    f.text_lines = m.pool_textline_text(text, in.membership, cfg.max_lines);
    f.line_mask = in.line_mask;
    return f;
  };
  auto loss_fn = [&]() { return trc_loss({line_features(d0), line_features(d1)}); };
  GradCheckReport rep = grad_check(loss_fn, m.params(), 1e-5, 2, 77);
  CHECK(rep.max_rel_err < 1e-4);
}

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "linedoc/image.hpp"
#include "linedoc/train.hpp"

namespace linedoc {

// ---------------------------------------------------------------------------
// Textline-region alignment (dual-stream encoders only, no fusion)

struct LineAlignment {
  int line = 0;
  int predicted_region = 0;  // text -> region argmax
  bool correct = false;
  int predicted_line = 0;    // region -> text argmax, reported for symmetry
  bool correct_reverse = false;
};

struct DocAlignment {
  std::string doc_id;
  std::vector<LineAlignment> lines;
  double accuracy = 0.0;          // text -> region
  double accuracy_reverse = 0.0;  // region -> text
  bool trivial = false;           // single-line documents are correct by convention
};

struct AlignmentReport {
  std::vector<DocAlignment> docs;
  double corpus_accuracy = 0.0;  // correct lines / real lines, both summed
  double corpus_accuracy_reverse = 0.0;
};

// dual-stream per-line features of one clean (uncorrupted) document
inline TextlineFeatures dual_stream_line_features(const Model& m,
                                                  const Document& doc) {
  DocInputs in = build_doc_inputs(doc, m.config().max_lines, m.config().max_tokens);
  auto enc = m.encode_image(image_to_tensor(doc.image));
  TextlineFeatures f;
  f.image_lines = m.roi_pool_textlines(
      enc.feature_map, padded_line_boxes(doc, m.config().max_lines), in.line_mask);
  // same pooling source as pre-training: text-encoder output per line
  f.text_lines = m.pool_textline_text(m.encode_text(m.embed_text_inputs(in), in),
                                      in.membership, m.config().max_lines);
  f.line_mask = in.line_mask;
  return f;
}

// argmax alignment between two normalized row sets; ties break to the
// lowest index
inline DocAlignment align_document(const Document& doc, const TextlineFeatures& f,
                                   bool normalize = true) {
  DocAlignment out;
  out.doc_id = doc.doc_id;
  Tensor rho = normalize ? ops::l2_normalize_rows(f.image_lines) : f.image_lines;
  Tensor tau = normalize ? ops::l2_normalize_rows(f.text_lines) : f.text_lines;
  const int d = rho.shape()[1];
  std::vector<int> real;
  for (size_t l = 0; l < f.line_mask.size(); ++l)
    if (f.line_mask[l]) real.push_back(static_cast<int>(l));
  auto dot = [&](const Tensor& a, int i, const Tensor& b, int j) {
    double s = 0;
    for (int k = 0; k < d; ++k)
      s += a.data()[static_cast<size_t>(i) * d + k] *
           b.data()[static_cast<size_t>(j) * d + k];
    return s;
  };
  int fwd_correct = 0, rev_correct = 0;
  for (int l : real) {
    LineAlignment la;
    la.line = l;
    double best_f = -1e300, best_r = -1e300;
    for (int k : real) {
      double sf = dot(tau, l, rho, k);  // textline text retrieves a region
      if (sf > best_f) {
        best_f = sf;
        la.predicted_region = k;
      }
      double sr = dot(rho, l, tau, k);
      if (sr > best_r) {
        best_r = sr;
        la.predicted_line = k;
      }
    }
    la.correct = la.predicted_region == l;
    la.correct_reverse = la.predicted_line == l;
    fwd_correct += la.correct;
    rev_correct += la.correct_reverse;
    out.lines.push_back(la);
  }
  out.trivial = real.size() <= 1;
  out.accuracy = real.empty() ? 0.0
                              : static_cast<double>(fwd_correct) /
                                    static_cast<double>(real.size());
  out.accuracy_reverse = real.empty() ? 0.0
                                      : static_cast<double>(rev_correct) /
                                            static_cast<double>(real.size());
  return out;
}

inline AlignmentReport alignment_accuracy(const Model& model,
                                          const std::vector<Document>& docs) {
  // score with the same similarity convention the model was trained with
  const bool normalize = model.config().trc_normalize;
  AlignmentReport report;
  size_t lines = 0, correct = 0, correct_rev = 0;
  for (const Document& doc : docs) {
    DocAlignment da =
        align_document(doc, dual_stream_line_features(model, doc), normalize);
    lines += da.lines.size();
    for (const LineAlignment& la : da.lines) {
      correct += la.correct;
      correct_rev += la.correct_reverse;
    }
    report.docs.push_back(std::move(da));
  }
  if (lines > 0) {
    report.corpus_accuracy = static_cast<double>(correct) / static_cast<double>(lines);
    report.corpus_accuracy_reverse =
        static_cast<double>(correct_rev) / static_cast<double>(lines);
  }
  return report;
}

// page image with line outlines: correct lines in green, wrong in red
inline void render_alignment(const Document& doc, const DocAlignment& entry,
                             const std::filesystem::path& out_path) {
  const int h = doc.image.height, w = doc.image.width;
  std::vector<uint8_t> rgb(static_cast<size_t>(h) * w * 3);
  for (int i = 0; i < h * w; ++i) {
    uint8_t v = static_cast<uint8_t>(std::lround(
        std::clamp(doc.image.pixels[static_cast<size_t>(i)], 0.0, 1.0) * 255.0));
    rgb[static_cast<size_t>(i) * 3] = v;
    rgb[static_cast<size_t>(i) * 3 + 1] = v;
    rgb[static_cast<size_t>(i) * 3 + 2] = v;
  }
  auto put = [&](int y, int x, bool correct) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;  // clip at page borders
    size_t p = (static_cast<size_t>(y) * w + x) * 3;
    rgb[p] = correct ? 0 : 220;
    rgb[p + 1] = correct ? 170 : 0;
    rgb[p + 2] = 0;
  };
  for (const LineAlignment& la : entry.lines) {
    if (static_cast<size_t>(la.line) >= doc.textlines.size()) continue;
    const PixelBox& b = doc.textlines[static_cast<size_t>(la.line)].pixel_box;
    for (int x = b.x0 - 1; x <= b.x1; ++x) {
      put(b.y0 - 1, x, la.correct);
      put(b.y1, x, la.correct);
    }
    for (int y = b.y0 - 1; y <= b.y1; ++y) {
      put(y, b.x0 - 1, la.correct);
      put(y, b.x1, la.correct);
    }
  }
  write_png_rgb(rgb, h, w, out_path.string());
}

// ---------------------------------------------------------------------------
// BIO token classification fine-tuning (linear head over frozen features)

struct BioTask {
  std::vector<std::string> tag_set;          // e.g. {"O", "B-X", "I-X"}
  std::vector<std::vector<int>> labels;      // per doc, per token, index into tag_set
};

// built-in toy task: every token of textline 0 is a single X entity
inline BioTask synthetic_bio_task(const std::vector<DocInputs>& inputs) {
  BioTask task;
  task.tag_set = {"O", "B-X", "I-X"};
  for (const DocInputs& in : inputs) {
    std::vector<int> labels(in.token_ids.size(), 0);
    bool first = true;
    for (size_t i = 0; i < in.token_ids.size(); ++i) {
      if (in.source_line[i] != 0) continue;
      labels[i] = first ? 1 : 2;
      first = false;
    }
    task.labels.push_back(std::move(labels));
  }
  return task;
}

// exact-span entities of one BIO sequence: (type, start, end)
inline std::set<std::tuple<std::string, int, int>> bio_spans(
    const std::vector<int>& labels, const std::vector<std::string>& tag_set) {
  std::set<std::tuple<std::string, int, int>> spans;
  int start = -1;
  std::string type;
  auto flush = [&](int end) {
    if (start >= 0) spans.insert({type, start, end});
    start = -1;
  };
  for (size_t i = 0; i < labels.size(); ++i) {
    const std::string& tag = tag_set.at(static_cast<size_t>(labels[i]));
    if (tag == "O") {
      flush(static_cast<int>(i));
    } else if (tag[0] == 'B') {
      flush(static_cast<int>(i));
      start = static_cast<int>(i);
      type = tag.substr(2);
    } else {  // I-*
      if (start < 0 || type != tag.substr(2)) {  // stray I starts a span
        flush(static_cast<int>(i));
        start = static_cast<int>(i);
        type = tag.substr(2);
      }
    }
  }
  flush(static_cast<int>(labels.size()));
  return spans;
}

struct F1Report {
  double f1 = 0.0;
  size_t tp = 0, fp = 0, fn = 0;
  bool degenerate = false;  // no gold entities at all: F1 undefined
};

// micro-averaged exact-span F1 over all documents and entity types
inline F1Report entity_f1(const std::vector<std::vector<int>>& gold,
                          const std::vector<std::vector<int>>& pred,
                          const std::vector<std::string>& tag_set) {
  F1Report r;
  for (size_t d = 0; d < gold.size(); ++d) {
    auto g = bio_spans(gold[d], tag_set);
    auto p = bio_spans(pred[d], tag_set);
    for (const auto& s : p)
      if (g.count(s)) ++r.tp;
      else ++r.fp;
    for (const auto& s : g)
      if (!p.count(s)) ++r.fn;
  }
  if (r.tp + r.fn == 0) {
    r.degenerate = true;
    return r;
  }
  double denom = 2.0 * r.tp + r.fp + r.fn;
  r.f1 = denom > 0 ? 2.0 * r.tp / denom : 0.0;
  return r;
}

struct FinetuneResult {
  ParamStore head;
  F1Report train_f1;
};

// fused text features of a clean document, cached for head training
inline Tensor fused_text_features(const Model& m, const Document& doc,
                                  const DocInputs& in) {
  DocForward f = forward_document(m, doc, in, image_to_tensor(doc.image));
  Tensor frozen = Tensor::zeros(f.fused_text.shape());
  frozen.data() = f.fused_text.data();
  return frozen;
}

inline FinetuneResult finetune_token_classifier(
    const Model& model, const std::vector<Document>& docs, const BioTask& task,
    int epochs = 30, double lr = 0.1, uint64_t seed = 0) {
  const int d = model.config().hidden_dim;
  const int n_tags = static_cast<int>(task.tag_set.size());
  if (task.labels.size() != docs.size())
    throw std::invalid_argument("finetune: label/document count mismatch");
  std::vector<Tensor> feats;
  std::vector<DocInputs> inputs;
  for (const Document& doc : docs) {
    inputs.push_back(build_doc_inputs(doc, model.config().max_lines,
                                      model.config().max_tokens));
    feats.push_back(fused_text_features(model, doc, inputs.back()));
    for (int label : task.labels[inputs.size() - 1])
      if (label < 0 || label >= n_tags)
        throw std::invalid_argument("finetune: tag outside the declared set");
  }

  FinetuneResult out;
  Rng rng(mix_seed(0x6e6572ULL, seed));
  out.head.add("head.ner.w", Tensor::randn({d, n_tags}, rng, 0.02, true));
  out.head.add("head.ner.bias", Tensor::zeros({n_tags}, true));
  AdamState adam;
  adam.init(out.head);
  for (int e = 0; e < epochs; ++e) {
    for (size_t i = 0; i < docs.size(); ++i) {
      out.head.zero_grads();
      Tensor logits = ops::linear(feats[i], out.head.at("head.ner.w"),
                                  out.head.at("head.ner.bias"));
      Tensor loss = ops::cross_entropy_mean(logits, task.labels[i]);
      loss.backward();
      adam_step(out.head, adam, lr, 0.0);
    }
  }

  // training-set predictions for the report
  std::vector<std::vector<int>> pred;
  for (size_t i = 0; i < docs.size(); ++i) {
    Tensor logits = ops::linear(feats[i], out.head.at("head.ner.w"),
                                out.head.at("head.ner.bias"));
    std::vector<int> p(task.labels[i].size(), 0);
    for (size_t t = 0; t < p.size(); ++t) {
      int best = 0;
      for (int c = 1; c < n_tags; ++c)
        if (logits.data()[t * static_cast<size_t>(n_tags) + static_cast<size_t>(c)] >
            logits.data()[t * static_cast<size_t>(n_tags) + static_cast<size_t>(best)])
          best = c;
      p[t] = best;
    }
    pred.push_back(std::move(p));
  }
  out.train_f1 = entity_f1(task.labels, pred, task.tag_set);
  return out;
}

// predictions of a given head on one document (for baselines and held-out eval)
inline std::vector<int> predict_bio(const Model& model, ParamStore& head,
                                    const Document& doc, int n_tags) {
  DocInputs in = build_doc_inputs(doc, model.config().max_lines,
                                  model.config().max_tokens);
  Tensor feats = fused_text_features(model, doc, in);
  Tensor logits =
      ops::linear(feats, head.at("head.ner.w"), head.at("head.ner.bias"));
  std::vector<int> p(in.token_ids.size(), 0);
  for (size_t t = 0; t < p.size(); ++t) {
    int best = 0;
    for (int c = 1; c < n_tags; ++c)
      if (logits.data()[t * static_cast<size_t>(n_tags) + static_cast<size_t>(c)] >
          logits.data()[t * static_cast<size_t>(n_tags) + static_cast<size_t>(best)])
        best = c;
    p[t] = best;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Document classification: head over (mean pre-fusion visual tokens,
// mean post-fusion visual outputs, fused begin-of-sequence text feature)

inline Tensor document_class_feature(const Model& m, const Document& doc) {
  DocInputs in = build_doc_inputs(doc, m.config().max_lines, m.config().max_tokens);
  DocForward f = forward_document(m, doc, in, image_to_tensor(doc.image));
  const int d = m.config().hidden_dim;
  const int g = m.config().visual_tokens();
  Tensor out = Tensor::zeros({3 * d});
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < d; ++j) {
      out.data()[static_cast<size_t>(j)] +=
          f.img.visual_tokens.data()[static_cast<size_t>(i) * d + j] / g;
      out.data()[static_cast<size_t>(d + j)] +=
          f.fused.data()[static_cast<size_t>(i) * d + j] / g;
    }
  for (int j = 0; j < d; ++j)  // fused row of the begin-of-sequence token
    out.data()[static_cast<size_t>(2 * d + j)] =
        f.fused_text.data()[static_cast<size_t>(j)];
  return out;
}

inline Tensor classify_document(const Model& model, const Document& doc,
                                ParamStore& head) {
  Tensor feat = document_class_feature(model, doc);
  Tensor row = ops::reshape(feat, {1, feat.shape()[0]});
  return ops::linear(row, head.at("head.cls.w"), head.at("head.cls.bias"));
}

struct ClassifyResult {
  ParamStore head;
  double train_accuracy = 0.0;
};

inline ClassifyResult finetune_document_classifier(
    const Model& model, const std::vector<Document>& docs,
    const std::vector<int>& labels, int n_classes, int epochs = 50,
    double lr = 0.05, uint64_t seed = 0) {
  if (n_classes < 2) throw std::invalid_argument("classify: n_classes >= 2");
  if (labels.size() != docs.size())
    throw std::invalid_argument("classify: label/document count mismatch");
  const int d = model.config().hidden_dim;
  std::vector<Tensor> feats;
  for (const Document& doc : docs) {
    Tensor f = document_class_feature(model, doc);
    feats.push_back(ops::reshape(f, {1, 3 * d}));
  }
  ClassifyResult out;
  Rng rng(mix_seed(0x636c73ULL, seed));
  out.head.add("head.cls.w", Tensor::randn({3 * d, n_classes}, rng, 0.02, true));
  out.head.add("head.cls.bias", Tensor::zeros({n_classes}, true));
  AdamState adam;
  adam.init(out.head);
  for (int e = 0; e < epochs; ++e)
    for (size_t i = 0; i < docs.size(); ++i) {
      out.head.zero_grads();
      Tensor logits = ops::linear(feats[i], out.head.at("head.cls.w"),
                                  out.head.at("head.cls.bias"));
      Tensor loss = ops::cross_entropy_mean(logits, {labels[i]});
      loss.backward();
      adam_step(out.head, adam, lr, 0.0);
    }
  size_t correct = 0;
  for (size_t i = 0; i < docs.size(); ++i) {
    Tensor logits = ops::linear(feats[i], out.head.at("head.cls.w"),
                                out.head.at("head.cls.bias"));
    int best = 0;
    for (int c = 1; c < n_classes; ++c)
      if (logits.data()[static_cast<size_t>(c)] > logits.data()[static_cast<size_t>(best)])
        best = c;
    correct += best == labels[i];
  }
  out.train_accuracy = docs.empty() ? 0.0
                                    : static_cast<double>(correct) /
                                          static_cast<double>(docs.size());
  return out;
}

// structured text form of an alignment report, one record per line
inline std::string alignment_report_text(const AlignmentReport& r) {
  std::string out;
  char buf[256];
  for (const DocAlignment& d : r.docs) {
    for (const LineAlignment& l : d.lines) {
      std::snprintf(buf, sizeof(buf), "%s\tline=%d\tpred=%d\tcorrect=%d\n",
                    d.doc_id.c_str(), l.line, l.predicted_region,
                    l.correct ? 1 : 0);
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%s\taccuracy=%.6f%s\n", d.doc_id.c_str(),
                  d.accuracy, d.trivial ? "\ttrivial" : "");
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "corpus\taccuracy=%.6f\treverse=%.6f\n",
                r.corpus_accuracy, r.corpus_accuracy_reverse);
  out += buf;
  return out;
}

}  // namespace linedoc

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "linedoc/checkpoint.hpp"
#include "linedoc/docgen.hpp"
#include "linedoc/model.hpp"
#include "linedoc/objectives.hpp"
#include "linedoc/optim.hpp"

namespace linedoc {

struct ObjectiveToggles {
  bool mlm = true, trc = true, mrm = true, tgm = true;
  bool any() const { return mlm || trc || mrm || tgm; }
};

struct TrainConfig {
  std::string corpus;
  std::string out_dir;
  int batch_size = 4;
  ScheduleConfig schedule;
  ModelConfig model;
  ObjectiveToggles objectives;
  LossWeights weights;
  MaskingConfig masking;
  uint64_t seed = 0;
  int checkpoint_interval = 100;
  int vocab_words = 256;  // synthetic tokenizer size, must match the corpus

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("config: batch_size >= 1");
    if (schedule.total_steps < 1)
      throw std::invalid_argument("config: total steps >= 1");
    if (!objectives.any())
      throw std::invalid_argument("config: at least one objective must be enabled");
    if (checkpoint_interval < 1)
      throw std::invalid_argument("config: checkpoint_interval >= 1");
  }

  nlohmann::json to_json() const {
    return {{"corpus", corpus},
            {"out_dir", out_dir},
            {"batch_size", batch_size},
            {"steps", schedule.total_steps},
            {"peak_lr", schedule.peak_lr},
            {"warmup_fraction", schedule.warmup_fraction},
            {"weight_decay", schedule.weight_decay},
            {"model", model.to_json()},
            {"objectives",
             {{"mlm", objectives.mlm},
              {"trc", objectives.trc},
              {"mrm", objectives.mrm},
              {"tgm", objectives.tgm}}},
            {"lambda_trc", weights.lambda_trc},
            {"lambda_mrm", weights.lambda_mrm},
            {"lambda_tgm", weights.lambda_tgm},
            {"seed", seed},
            {"checkpoint_interval", checkpoint_interval},
            {"vocab_words", vocab_words}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    // every field is optional so a partial config file overlays defaults
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("corpus", c.corpus);
    get("out_dir", c.out_dir);
    get("batch_size", c.batch_size);
    get("steps", c.schedule.total_steps);
    get("peak_lr", c.schedule.peak_lr);
    get("warmup_fraction", c.schedule.warmup_fraction);
    get("weight_decay", c.schedule.weight_decay);
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("objectives")) {
      const auto& o = j.at("objectives");
      if (o.contains("mlm")) c.objectives.mlm = o.at("mlm").get<bool>();
      if (o.contains("trc")) c.objectives.trc = o.at("trc").get<bool>();
      if (o.contains("mrm")) c.objectives.mrm = o.at("mrm").get<bool>();
      if (o.contains("tgm")) c.objectives.tgm = o.at("tgm").get<bool>();
    }
    get("lambda_trc", c.weights.lambda_trc);
    get("lambda_mrm", c.weights.lambda_mrm);
    get("lambda_tgm", c.weights.lambda_tgm);
    get("seed", c.seed);
    get("checkpoint_interval", c.checkpoint_interval);
    get("vocab_words", c.vocab_words);
    return c;
  }
};

inline Tensor image_to_tensor(const Image& img) {
  Tensor t = Tensor::zeros({1, img.height, img.width});
  t.data() = img.pixels;
  return t;
}

inline std::vector<BBox> padded_line_boxes(const Document& doc, int max_lines) {
  std::vector<BBox> boxes(static_cast<size_t>(max_lines), BBox{0, 0, 0, 0});
  for (const auto& line : doc.textlines)
    if (line.line_index < max_lines)
      boxes[static_cast<size_t>(line.line_index)] = line.line_bbox;
  return boxes;
}

// one document's full forward pass, shared across objectives
struct DocForward {
  Model::ImageEncoding img;
  Tensor text_pre;    // [T, d] dual-stream text features
  Tensor fused;       // [49 + T, d]
  Tensor fused_text;  // [T, d] text rows of the fused output
  TextlineFeatures lines;
};

inline DocForward forward_document(const Model& m, const Document& doc,
                                   const DocInputs& in, const Tensor& image) {
  DocForward f;
  f.img = m.encode_image(image);
  Tensor embedded = m.embed_text_inputs(in);
  f.text_pre = m.encode_text(embedded, in);
  f.fused = m.encode_multimodal(f.img.visual_tokens, f.text_pre);
  const int g = m.config().visual_tokens();
  std::vector<int> text_rows(in.token_ids.size());
  for (size_t i = 0; i < text_rows.size(); ++i)
    text_rows[i] = g + static_cast<int>(i);
  f.fused_text = ops::select_rows(f.fused, text_rows);
  f.lines.image_lines = m.roi_pool_textlines(
      f.img.feature_map, padded_line_boxes(doc, m.config().max_lines), in.line_mask);
  f.lines.text_lines =
      m.pool_textline_text(f.text_pre, in.membership, m.config().max_lines);
  f.lines.line_mask = in.line_mask;
  return f;
}

struct StepResult {
  LossReport report;
  double lr = 0.0;
};

// One optimization step over a batch of documents. The caller owns mask
// planning so training and tests share the identical path.
inline StepResult train_step(Model& model, AdamState& adam,
                             const TrainConfig& cfg,
                             const std::vector<const Document*>& batch_docs,
                             int step) {
  const int n = static_cast<int>(batch_docs.size());
  std::vector<DocInputs> inputs;
  std::vector<MaskPlan> plans;
  std::vector<CorruptedSample> samples;
  Tokenizer tok = Tokenizer::synthetic(cfg.vocab_words);
  for (int i = 0; i < n; ++i) {
    const Document& doc = *batch_docs[static_cast<size_t>(i)];
    DocInputs in = build_doc_inputs(doc, cfg.model.max_lines, cfg.model.max_tokens);
    MaskPlan plan = plan_masks(doc, in, cfg.masking, cfg.model.vocab_size,
                               cfg.seed, static_cast<uint64_t>(step),
                               static_cast<uint64_t>(i));
    samples.push_back(apply_mask_plan(doc, in, plan, tok));
    inputs.push_back(std::move(in));
    plans.push_back(std::move(plan));
  }

  std::vector<DocForward> fwd;
  for (int i = 0; i < n; ++i)
    fwd.push_back(forward_document(model, *batch_docs[static_cast<size_t>(i)],
                                   samples[static_cast<size_t>(i)].inputs,
                                   samples[static_cast<size_t>(i)].image));

  // MLM: one cross entropy over all masked positions in the batch
  Tensor mlm, trc, mrm, tgm;
  bool has_mlm = false, has_trc = false, has_mrm = false, has_tgm = false;
  if (cfg.objectives.mlm) {
    Tensor feats;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      const MaskPlan& p = plans[static_cast<size_t>(i)];
      if (p.mlm_positions.empty()) continue;
      Tensor sel = ops::select_rows(fwd[static_cast<size_t>(i)].fused_text,
                                    p.mlm_positions);
      feats = feats.defined() ? ops::concat_rows(feats, sel) : sel;
      labels.insert(labels.end(), p.mlm_labels.begin(), p.mlm_labels.end());
    }
    if (feats.defined()) {
      mlm = ops::cross_entropy_mean(model.mlm_logits(feats), labels);
      has_mlm = true;
    }
  }
  if (cfg.objectives.trc) {
    std::vector<TextlineFeatures> lines;
    for (int i = 0; i < n; ++i) lines.push_back(fwd[static_cast<size_t>(i)].lines);
    trc = trc_loss(lines, model.config().trc_normalize);
    has_trc = true;
  }
  if (cfg.objectives.mrm) {
    // mean of per-document masked-pixel l1 over contributing documents
    Tensor sum;
    int contributing = 0;
    for (int i = 0; i < n; ++i) {
      const CorruptedSample& s = samples[static_cast<size_t>(i)];
      bool any = false;
      for (bool b : s.pixel_mask)
        if (b) {
          any = true;
          break;
        }
      if (!any) continue;
      Tensor rec = model.decode_image_regions(fwd[static_cast<size_t>(i)].img.feature_map);
      Tensor doc_loss = mrm_loss(rec, s.target_image, s.pixel_mask);
      sum = sum.defined() ? ops::add(sum, doc_loss) : doc_loss;
      ++contributing;
    }
    if (contributing > 0) {
      mrm = ops::scale(sum, 1.0 / contributing);
      has_mrm = true;
    }
  }
  if (cfg.objectives.tgm) {
    // per-document sums averaged over the whole batch
    Tensor sum;
    bool any = false;
    for (int i = 0; i < n; ++i) {
      if (plans[static_cast<size_t>(i)].tgm_lines.empty()) continue;
      Tensor doc_sum = tgm_loss_doc(model, fwd[static_cast<size_t>(i)].fused_text,
                                    inputs[static_cast<size_t>(i)],
                                    plans[static_cast<size_t>(i)],
                                    model.config().grid);
      sum = sum.defined() ? ops::add(sum, doc_sum) : doc_sum;
      any = true;
    }
    if (any) {
      tgm = ops::scale(sum, 1.0 / n);
      has_tgm = true;
    }
  }

  StepResult out;
  Tensor total = combine_losses(has_mlm ? &mlm : nullptr, has_trc ? &trc : nullptr,
                                has_mrm ? &mrm : nullptr, has_tgm ? &tgm : nullptr,
                                cfg.weights, out.report);
  if (!std::isfinite(out.report.total))
    throw NumericError("non-finite total loss at step " + std::to_string(step));

  model.params().zero_grads();
  total.backward();
  out.lr = schedule_lr(step, cfg.schedule);
  adam_step(model.params(), adam, out.lr, cfg.schedule.weight_decay);
  return out;
}

// Deterministic batch order: document stream index s*N + slot maps to a
// per-pass Fisher-Yates permutation seeded by (seed, pass). Recomputable
// from the step alone, so resuming reproduces the straight run exactly.
class BatchSampler {
 public:
  BatchSampler(size_t corpus_size, uint64_t seed, int batch_size)
      : size_(corpus_size), seed_(seed), n_(batch_size) {
    if (corpus_size == 0) throw DataError("empty corpus");
  }

  std::vector<size_t> batch_for_step(int step) {
    std::vector<size_t> out;
    for (int slot = 0; slot < n_; ++slot) {
      uint64_t stream = static_cast<uint64_t>(step) * n_ + static_cast<uint64_t>(slot);
      uint64_t pass = stream / size_;
      size_t within = static_cast<size_t>(stream % size_);
      if (pass != cached_pass_ || perm_.empty()) {
        perm_.resize(size_);
        for (size_t i = 0; i < size_; ++i) perm_[i] = i;
        Rng rng(mix_seed(mix_seed(seed_, 0x70617373ULL), pass));
        rng.shuffle(perm_);
        cached_pass_ = pass;
      }
      out.push_back(perm_[within]);
    }
    return out;
  }

 private:
  size_t size_;
  uint64_t seed_;
  int n_;
  uint64_t cached_pass_ = ~0ULL;
  std::vector<size_t> perm_;
};

inline void append_curve_line(std::ostream& os, int step, const LossReport& r,
                              double lr) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%d\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\n", step, r.mlm,
                r.trc, r.mrm, r.tgm, r.total, lr);
  os << buf;
}

struct TrainResult {
  LossReport first, last;
  std::filesystem::path final_checkpoint;
};

namespace detail {

inline TrainResult run_training(const TrainConfig& cfg, Model& model,
                                AdamState& adam, int start_step,
                                bool append_curve,
                                std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  Tokenizer tok = Tokenizer::synthetic(cfg.vocab_words);
  std::vector<Document> corpus = load_corpus(cfg.corpus, tok);
  fs::create_directories(cfg.out_dir);
  fs::path curve_path = fs::path(cfg.out_dir) / "loss_curve.tsv";
  std::ofstream curve(curve_path, append_curve
                                      ? std::ios::app
                                      : std::ios::trunc | std::ios::out);
  if (!curve) throw DataError("cannot open " + curve_path.string());
  if (!append_curve) curve << "# step\tmlm\ttrc\tmrm\ttgm\ttotal\tlr\n";

  BatchSampler sampler(corpus.size(), cfg.seed, cfg.batch_size);
  TrainResult result;
  for (int step = start_step; step < cfg.schedule.total_steps; ++step) {
    std::vector<const Document*> batch;
    for (size_t idx : sampler.batch_for_step(step)) batch.push_back(&corpus[idx]);
    StepResult sr;
    try {
      sr = train_step(model, adam, cfg, batch, step);
    } catch (const NumericError&) {
      // persist what we know about the failing step, then re-raise
      std::ofstream fail(fs::path(cfg.out_dir) / "failure.json");
      nlohmann::json j = {{"step", step}, {"error", "non-finite total loss"}};
      fail << j.dump(2) << "\n";
      throw;
    }
    append_curve_line(curve, step, sr.report, sr.lr);
    curve.flush();
    if (step == start_step) result.first = sr.report;
    result.last = sr.report;
    if (log && (step % 25 == 0 || step + 1 == cfg.schedule.total_steps))
      *log << "step " << step << " total " << sr.report.total << " lr " << sr.lr
           << "\n";
    int done = step + 1;
    if (done % cfg.checkpoint_interval == 0 || done == cfg.schedule.total_steps) {
      fs::path ckpt = fs::path(cfg.out_dir) /
                      ("ckpt_" + std::to_string(done) + ".ckpt");
      save_checkpoint(ckpt, model, adam, static_cast<uint64_t>(done));
      result.final_checkpoint = ckpt;
    }
  }
  return result;
}

}  // namespace detail

// fills derived fields: an unset vocab_size comes from the tokenizer
inline TrainConfig normalized(TrainConfig cfg) {
  if (cfg.model.vocab_size == 0)
    cfg.model.vocab_size = Tokenizer::synthetic(cfg.vocab_words).size();
  cfg.validate();
  return cfg;
}

inline TrainResult pretrain(const TrainConfig& raw, std::ostream* log = nullptr) {
  TrainConfig cfg = normalized(raw);
  Model model(cfg.model, cfg.seed);
  AdamState adam;
  adam.init(model.params());
  return detail::run_training(cfg, model, adam, 0, /*append_curve=*/false, log);
}

// Continue a previous run. The stored model configuration must match;
// objective toggles may differ (ablation workflow) and are logged.
inline TrainResult resume(const std::filesystem::path& checkpoint,
                          const TrainConfig& raw, std::ostream* log = nullptr) {
  TrainConfig cfg = normalized(raw);
  Model model(cfg.model, cfg.seed);
  AdamState adam;
  adam.init(model.params());
  LoadedCheckpoint lc = load_checkpoint(checkpoint, model, adam);
  if (log)
    *log << "resuming from step " << lc.global_step << " of "
         << cfg.schedule.total_steps << "\n";
  if (static_cast<int>(lc.global_step) >= cfg.schedule.total_steps)
    throw std::invalid_argument("resume: checkpoint already at or past total steps");
  return detail::run_training(cfg, model, adam, static_cast<int>(lc.global_step),
                              /*append_curve=*/true, log);
}

}  // namespace linedoc

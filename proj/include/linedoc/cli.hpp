#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "linedoc/eval.hpp"
#include "linedoc/gradcheck.hpp"
#include "linedoc/train.hpp"

namespace linedoc::cli {

// exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure

namespace detail {

struct PretrainFlags {
  std::string config_file;
  TrainConfig cfg;
  bool print_config = false;
  std::string checkpoint;  // resume only

  // CLI11 only reports which flags the user passed; config-file values are
  // overlaid first, then explicit flags win
  void add_common(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON config file");
    cmd->add_option("--corpus", cfg.corpus, "corpus directory");
    cmd->add_option("--out", cfg.out_dir, "output directory");
    cmd->add_option("--steps", cfg.schedule.total_steps, "total training steps");
    cmd->add_option("--batch-size", cfg.batch_size, "documents per step");
    cmd->add_option("--peak-lr", cfg.schedule.peak_lr, "schedule peak learning rate");
    cmd->add_option("--warmup-fraction", cfg.schedule.warmup_fraction,
                    "fraction of steps spent warming up");
    cmd->add_option("--weight-decay", cfg.schedule.weight_decay,
                    "decoupled weight decay");
    cmd->add_option("--seed", cfg.seed, "global random seed");
    cmd->add_option("--checkpoint-interval", cfg.checkpoint_interval,
                    "steps between checkpoints");
    cmd->add_option("--vocab-words", cfg.vocab_words, "synthetic vocabulary size");
    cmd->add_option("--hidden-dim", cfg.model.hidden_dim, "model width");
    cmd->add_option("--text-layers", cfg.model.text_layers, "text encoder depth");
    cmd->add_option("--fusion-layers", cfg.model.fusion_layers, "fusion depth");
    cmd->add_option("--heads", cfg.model.heads, "attention heads");
    cmd->add_option("--lambda-trc", cfg.weights.lambda_trc, "contrastive weight");
    cmd->add_option("--lambda-mrm", cfg.weights.lambda_mrm, "reconstruction weight");
    cmd->add_option("--lambda-tgm", cfg.weights.lambda_tgm, "grid weight");
    cmd->add_flag("--no-mlm", "disable masked-token objective");
    cmd->add_flag("--no-trc", "disable contrastive objective");
    cmd->add_flag("--no-mrm", "disable reconstruction objective");
    cmd->add_flag("--no-tgm", "disable grid objective");
    cmd->add_flag("--print-config", print_config,
                  "print the merged config as JSON and exit");
  }

  TrainConfig merged(CLI::App* cmd) const {
    TrainConfig out = cfg;
    if (!config_file.empty()) {
      std::ifstream is(config_file);
      if (!is) throw DataError("cannot open config file " + config_file);
      out = TrainConfig::from_json(nlohmann::json::parse(is));
      // re-apply any explicit flags on top of the file values
      auto flag = [&](const char* name) { return cmd->count(name) > 0; };
      if (flag("--corpus")) out.corpus = cfg.corpus;
      if (flag("--out")) out.out_dir = cfg.out_dir;
      if (flag("--steps")) out.schedule.total_steps = cfg.schedule.total_steps;
      if (flag("--batch-size")) out.batch_size = cfg.batch_size;
      if (flag("--peak-lr")) out.schedule.peak_lr = cfg.schedule.peak_lr;
      if (flag("--warmup-fraction"))
        out.schedule.warmup_fraction = cfg.schedule.warmup_fraction;
      if (flag("--weight-decay"))
        out.schedule.weight_decay = cfg.schedule.weight_decay;
      if (flag("--seed")) out.seed = cfg.seed;
      if (flag("--checkpoint-interval"))
        out.checkpoint_interval = cfg.checkpoint_interval;
      if (flag("--vocab-words")) out.vocab_words = cfg.vocab_words;
      if (flag("--hidden-dim")) out.model.hidden_dim = cfg.model.hidden_dim;
      if (flag("--text-layers")) out.model.text_layers = cfg.model.text_layers;
      if (flag("--fusion-layers"))
        out.model.fusion_layers = cfg.model.fusion_layers;
      if (flag("--heads")) out.model.heads = cfg.model.heads;
      if (flag("--lambda-trc")) out.weights.lambda_trc = cfg.weights.lambda_trc;
      if (flag("--lambda-mrm")) out.weights.lambda_mrm = cfg.weights.lambda_mrm;
      if (flag("--lambda-tgm")) out.weights.lambda_tgm = cfg.weights.lambda_tgm;
    }
    if (cmd->count("--no-mlm")) out.objectives.mlm = false;
    if (cmd->count("--no-trc")) out.objectives.trc = false;
    if (cmd->count("--no-mrm")) out.objectives.mrm = false;
    if (cmd->count("--no-tgm")) out.objectives.tgm = false;
    return out;
  }
};

inline Model load_model(const std::string& checkpoint_path) {
  ModelConfig mc = peek_checkpoint_config(checkpoint_path);
  Model model(mc, 0);
  AdamState adam;
  adam.init(model.params());
  load_checkpoint(checkpoint_path, model, adam);
  return model;
}

inline int run_gradcheck(const std::string& loss_name, uint64_t seed) {
  Tokenizer tok = Tokenizer::synthetic(32);
  GenParams gp;
  gp.seed = seed;
  gp.vocab_words = 32;
  gp.lines_min = 3;
  gp.lines_max = 3;
  gp.words_min = 2;
  gp.words_max = 2;
  ModelConfig mc;
  mc.hidden_dim = 16;
  mc.heads = 2;
  mc.text_layers = 1;
  mc.fusion_layers = 1;
  mc.ff_mult = 2;
  mc.conv_channels = {2, 4, 4, 4};
  mc.vocab_size = tok.size();
  Model model(mc, seed);
  std::vector<Document> docs = {generate_document(gp, 0, tok),
                                generate_document(gp, 1, tok)};
  TrainConfig tc;
  tc.model = mc;
  tc.vocab_words = 32;
  tc.seed = seed;
  if (loss_name == "mlm")
    tc.objectives = {true, false, false, false};
  else if (loss_name == "trc")
    tc.objectives = {false, true, false, false};
  else if (loss_name == "mrm")
    tc.objectives = {false, false, true, false};
  else if (loss_name == "tgm")
    tc.objectives = {false, false, false, true};
  else if (loss_name == "total")
    tc.objectives = {true, true, true, true};
  else
    throw CLI::ValidationError("--loss", "unknown loss " + loss_name);

  auto loss_fn = [&]() {
    AdamState throwaway;  // train_step also optimizes; rebuild instead
    std::vector<DocInputs> inputs;
    std::vector<MaskPlan> plans;
    std::vector<CorruptedSample> samples;
    std::vector<DocForward> fwd;
    for (size_t i = 0; i < docs.size(); ++i) {
      DocInputs in = build_doc_inputs(docs[i], mc.max_lines, mc.max_tokens);
      MaskPlan plan = plan_masks(docs[i], in, tc.masking, mc.vocab_size, seed, 0,
                                 static_cast<uint64_t>(i));
      CorruptedSample s = apply_mask_plan(docs[i], in, plan, tok);
      fwd.push_back(forward_document(model, docs[i], s.inputs, s.image));
      inputs.push_back(std::move(in));
      plans.push_back(std::move(plan));
      samples.push_back(std::move(s));
    }
    Tensor total = Tensor::scalar(0.0);
    if (tc.objectives.mlm)
      for (size_t i = 0; i < docs.size(); ++i)
        if (!plans[i].mlm_positions.empty())
          total = ops::add(total, mlm_loss(model, fwd[i].fused_text, plans[i]));
    if (tc.objectives.trc) {
      std::vector<TextlineFeatures> lines;
      for (auto& f : fwd) lines.push_back(f.lines);
      total = ops::add(total, trc_loss(lines));
    }
    if (tc.objectives.mrm)
      for (size_t i = 0; i < docs.size(); ++i) {
        bool any = false;
        for (bool b : samples[i].pixel_mask) any = any || b;
        if (!any) continue;
        Tensor rec = model.decode_image_regions(fwd[i].img.feature_map);
        total = ops::add(total, mrm_loss(rec, samples[i].target_image,
                                         samples[i].pixel_mask));
      }
    if (tc.objectives.tgm)
      for (size_t i = 0; i < docs.size(); ++i)
        if (!plans[i].tgm_lines.empty())
          total = ops::add(total, tgm_loss_doc(model, fwd[i].fused_text,
                                               inputs[i], plans[i], mc.grid));
    return total;
  };
  GradCheckReport rep = grad_check(loss_fn, model.params(), 1e-5, 2, seed);
  std::cout << "loss=" << loss_name << " max_rel_err=" << rep.max_rel_err
            << " threshold=1e-4\n";
  return rep.max_rel_err < 1e-4 ? 0 : 3;
}

}  // namespace detail

inline int dispatch(std::vector<std::string> args) {
  CLI::App app{"document pre-training workbench"};
  app.require_subcommand(1);

  // ----- gen -----
  auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  GenParams gp;
  int gen_count = 100;
  std::string gen_out;
  gen->add_option("--seed", gp.seed, "corpus seed");
  gen->add_option("--count", gen_count, "number of documents")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--lines-min", gp.lines_min, "minimum textlines per page");
  gen->add_option("--lines-max", gp.lines_max, "maximum textlines per page");
  gen->add_option("--words-min", gp.words_min, "minimum words per line");
  gen->add_option("--words-max", gp.words_max, "maximum words per line");
  gen->add_option("--vocab-words", gp.vocab_words, "vocabulary size");

  // ----- pretrain / resume -----
  auto* pre = app.add_subcommand("pretrain", "run pre-training");
  detail::PretrainFlags pre_flags;
  pre_flags.add_common(pre);
  auto* res = app.add_subcommand("resume", "continue from a checkpoint");
  detail::PretrainFlags res_flags;
  res_flags.add_common(res);
  res->add_option("--checkpoint", res_flags.checkpoint, "checkpoint file")
      ->required();

  // ----- gradcheck -----
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  std::string gc_loss = "total";
  uint64_t gc_seed = 0;
  gc->add_option("--loss", gc_loss, "one of mlm|trc|mrm|tgm|total");
  gc->add_option("--seed", gc_seed, "fixture seed");

  // ----- eval-align / render -----
  auto* ea = app.add_subcommand("eval-align", "textline-region alignment report");
  std::string ea_ckpt, ea_corpus;
  ea->add_option("--checkpoint", ea_ckpt, "checkpoint file")->required();
  ea->add_option("--corpus", ea_corpus, "corpus directory")->required();
  int ea_vocab = 256;
  ea->add_option("--vocab-words", ea_vocab, "corpus vocabulary size");

  auto* rd = app.add_subcommand("render", "write alignment overlay images");
  std::string rd_ckpt, rd_corpus, rd_out;
  int rd_vocab = 256;
  rd->add_option("--checkpoint", rd_ckpt, "checkpoint file")->required();
  rd->add_option("--corpus", rd_corpus, "corpus directory")->required();
  rd->add_option("--out", rd_out, "output directory")->required();
  rd->add_option("--vocab-words", rd_vocab, "corpus vocabulary size");

  // ----- finetune-ner / classify -----
  auto* ner = app.add_subcommand("finetune-ner",
                                 "fine-tune the built-in BIO probe task");
  std::string ner_ckpt, ner_corpus;
  int ner_epochs = 100, ner_vocab = 256;
  double ner_lr = 0.1;
  uint64_t ner_seed = 0;
  ner->add_option("--checkpoint", ner_ckpt, "checkpoint file")->required();
  ner->add_option("--corpus", ner_corpus, "corpus directory")->required();
  ner->add_option("--epochs", ner_epochs, "head training epochs");
  ner->add_option("--lr", ner_lr, "head learning rate");
  ner->add_option("--seed", ner_seed, "head init seed");
  ner->add_option("--vocab-words", ner_vocab, "corpus vocabulary size");

  auto* cls = app.add_subcommand("classify",
                                 "fine-tune the 2-class page classifier");
  std::string cls_ckpt, cls_a, cls_b;
  int cls_epochs = 60, cls_vocab = 256;
  double cls_lr = 0.05;
  uint64_t cls_seed = 0;
  cls->add_option("--checkpoint", cls_ckpt, "checkpoint file")->required();
  cls->add_option("--corpus-a", cls_a, "class-0 corpus directory")->required();
  cls->add_option("--corpus-b", cls_b, "class-1 corpus directory")->required();
  cls->add_option("--epochs", cls_epochs, "head training epochs");
  cls->add_option("--lr", cls_lr, "head learning rate");
  cls->add_option("--seed", cls_seed, "head init seed");
  cls->add_option("--vocab-words", cls_vocab, "corpus vocabulary size");

  std::vector<const char*> argv = {"linedoc"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      Tokenizer tok = Tokenizer::synthetic(gp.vocab_words);
      generate_corpus(gp, gen_count, gen_out, tok);
      std::cout << "corpus_hash=" << std::hex << corpus_hash(gen_out) << std::dec
                << " count=" << gen_count << "\n";
      return 0;
    }
    if (pre->parsed() || res->parsed()) {
      detail::PretrainFlags& f = pre->parsed() ? pre_flags : res_flags;
      TrainConfig cfg = normalized(f.merged(pre->parsed() ? pre : res));
      if (f.print_config) {
        std::cout << cfg.to_json().dump(2) << "\n";
        return 0;
      }
      TrainResult r = pre->parsed() ? pretrain(cfg, &std::cerr)
                                    : resume(f.checkpoint, cfg, &std::cerr);
      std::cout << "final_total=" << r.last.total << " checkpoint="
                << r.final_checkpoint.string() << "\n";
      return 0;
    }
    if (gc->parsed()) return detail::run_gradcheck(gc_loss, gc_seed);
    if (ea->parsed()) {
      Model model = detail::load_model(ea_ckpt);
      Tokenizer tok = Tokenizer::synthetic(ea_vocab);
      AlignmentReport r = alignment_accuracy(model, load_corpus(ea_corpus, tok));
      std::cout << alignment_report_text(r);
      return 0;
    }
    if (rd->parsed()) {
      Model model = detail::load_model(rd_ckpt);
      Tokenizer tok = Tokenizer::synthetic(rd_vocab);
      std::vector<Document> docs = load_corpus(rd_corpus, tok);
      std::filesystem::create_directories(rd_out);
      for (const Document& doc : docs) {
        DocAlignment da =
            align_document(doc, dual_stream_line_features(model, doc));
        render_alignment(doc, da,
                         std::filesystem::path(rd_out) / (doc.doc_id + ".png"));
      }
      std::cout << "rendered=" << docs.size() << "\n";
      return 0;
    }
    if (ner->parsed()) {
      Model model = detail::load_model(ner_ckpt);
      Tokenizer tok = Tokenizer::synthetic(ner_vocab);
      std::vector<Document> docs = load_corpus(ner_corpus, tok);
      std::vector<DocInputs> inputs;
      for (const Document& d : docs)
        inputs.push_back(build_doc_inputs(d, model.config().max_lines,
                                          model.config().max_tokens));
      BioTask task = synthetic_bio_task(inputs);
      FinetuneResult r = finetune_token_classifier(model, docs, task, ner_epochs,
                                                   ner_lr, ner_seed);
      if (r.train_f1.degenerate)
        std::cout << "degenerate corpus: no gold entities, F1 undefined\n";
      else
        std::cout << "entity_f1=" << r.train_f1.f1 << "\n";
      return 0;
    }
    if (cls->parsed()) {
      Model model = detail::load_model(cls_ckpt);
      Tokenizer tok = Tokenizer::synthetic(cls_vocab);
      std::vector<Document> docs = load_corpus(cls_a, tok);
      std::vector<int> labels(docs.size(), 0);
      for (Document& d : load_corpus(cls_b, tok)) {
        docs.push_back(std::move(d));
        labels.push_back(1);
      }
      ClassifyResult r = finetune_document_classifier(model, docs, labels, 2,
                                                      cls_epochs, cls_lr, cls_seed);
      std::cout << "accuracy=" << r.train_accuracy << "\n";
      return 0;
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace linedoc::cli

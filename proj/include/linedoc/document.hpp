#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "linedoc/geometry.hpp"
#include "linedoc/image.hpp"
#include "linedoc/tokenizer.hpp"

namespace linedoc {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Word {
  std::string text;
  BBox bbox;            // normalized layout units
  PixelBox pixel_box;   // original page pixels
  std::vector<int> token_ids;
};

struct Textline {
  std::vector<Word> words;
  BBox line_bbox;
  PixelBox pixel_box;
  int line_index = 0;
};

struct Document {
  Image image;  // [224 x 224], values in [0, 1]
  std::vector<Textline> textlines;
  std::string doc_id;
  int orig_width = 0;
  int orig_height = 0;

  size_t word_count() const {
    size_t n = 0;
    for (const auto& l : textlines) n += l.words.size();
    return n;
  }
};

// ---- OCR record (JSON) ----
// {doc_id, width, height, image, lines:[{bbox:[4], words:[{text, bbox:[4]}]}]}
// Boxes are page pixels; unknown fields are ignored.

namespace detail {
inline PixelBox parse_pixel_box(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 4)
    throw DataError(std::string(what) + ": bbox must be [x0, y0, x1, y1]");
  return PixelBox{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(),
                  j[3].get<int>()};
}
}  // namespace detail

inline Document parse_ocr(const nlohmann::json& record, const Tokenizer& tokenizer,
                          Image image) {
  if (!record.contains("doc_id") || !record.contains("width") ||
      !record.contains("height") || !record.contains("lines"))
    throw DataError("ocr record: missing required field");
  Document doc;
  doc.doc_id = record["doc_id"].get<std::string>();
  doc.orig_width = record["width"].get<int>();
  doc.orig_height = record["height"].get<int>();
  if (doc.orig_width <= 0 || doc.orig_height <= 0)
    throw DataError("ocr record: non-positive page size");
  doc.image = std::move(image);
  if (record["lines"].empty()) throw DataError("ocr record: empty page");

  for (const auto& jline : record["lines"]) {
    Textline line;
    line.pixel_box = detail::parse_pixel_box(jline.at("bbox"), "line");
    for (const auto& jword : jline.at("words")) {
      Word w;
      w.text = jword.at("text").get<std::string>();
      w.pixel_box = detail::parse_pixel_box(jword.at("bbox"), "word");
      if (w.pixel_box.x0 < 0 || w.pixel_box.y0 < 0 ||
          w.pixel_box.x1 > doc.orig_width || w.pixel_box.y1 > doc.orig_height)
        throw DataError("ocr record: box out of range for word '" + w.text + "'");
      w.bbox = normalize_bbox(w.pixel_box, doc.orig_width, doc.orig_height);
      if (!w.text.empty()) w.token_ids = tokenizer.encode_word(w.text);
      line.words.push_back(std::move(w));
    }
    if (line.words.empty()) throw DataError("ocr record: line with no words");
    std::stable_sort(line.words.begin(), line.words.end(),
                     [](const Word& a, const Word& b) { return a.bbox.x0 < b.bbox.x0; });
    line.line_bbox = normalize_bbox(line.pixel_box, doc.orig_width, doc.orig_height);
    for (const Word& w : line.words)
      if (!line.line_bbox.contains(w.bbox))
        throw DataError("ocr record: line bbox does not contain word bbox");
    doc.textlines.push_back(std::move(line));
  }
  // top-to-bottom, then left-to-right; ties keep OCR order
  std::stable_sort(doc.textlines.begin(), doc.textlines.end(),
                   [](const Textline& a, const Textline& b) {
                     if (a.line_bbox.y0 != b.line_bbox.y0)
                       return a.line_bbox.y0 < b.line_bbox.y0;
                     return a.line_bbox.x0 < b.line_bbox.x0;
                   });
  for (size_t i = 0; i < doc.textlines.size(); ++i)
    doc.textlines[i].line_index = static_cast<int>(i);
  return doc;
}

inline nlohmann::json document_to_ocr_json(const Document& doc,
                                           const std::string& image_ref) {
  nlohmann::json record;
  record["doc_id"] = doc.doc_id;
  record["width"] = doc.orig_width;
  record["height"] = doc.orig_height;
  record["image"] = image_ref;
  record["lines"] = nlohmann::json::array();
  for (const Textline& line : doc.textlines) {
    nlohmann::json jline;
    jline["bbox"] = {line.pixel_box.x0, line.pixel_box.y0, line.pixel_box.x1,
                     line.pixel_box.y1};
    jline["words"] = nlohmann::json::array();
    for (const Word& w : line.words)
      jline["words"].push_back(
          {{"text", w.text},
           {"bbox", {w.pixel_box.x0, w.pixel_box.y0, w.pixel_box.x1, w.pixel_box.y1}}});
    record["lines"].push_back(std::move(jline));
  }
  return record;
}

inline Document load_document(const std::filesystem::path& ocr_path,
                              const Tokenizer& tokenizer) {
  std::ifstream f(ocr_path);
  if (!f) throw DataError("cannot read " + ocr_path.string());
  nlohmann::json record;
  try {
    f >> record;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed ocr record " + ocr_path.string() + ": " + e.what());
  }
  Image img;
  if (record.contains("image")) {
    auto image_path = ocr_path.parent_path() / record["image"].get<std::string>();
    img = read_pgm(image_path.string());
  }
  return parse_ocr(record, tokenizer, std::move(img));
}

// ---- batching ----

struct DocInputs {
  std::string doc_id;
  std::vector<int> token_ids;   // [T], begins with [CLS]
  std::vector<int> pos_1d;      // [T]
  std::vector<BBox> boxes;      // [T]
  std::vector<int> segment_ids; // [T], 0 = text
  std::vector<int> membership;  // [T], line index or -1 for specials
  // (line, word) source of each token; -1 for specials
  std::vector<int> source_line;
  std::vector<int> source_word;
  std::vector<bool> line_mask;  // [max_lines], true = real line with tokens
  int real_line_count = 0;
};

struct Batch {
  std::vector<DocInputs> docs;
  int max_lines = 64;
  int max_tokens = 512;
};

inline DocInputs build_doc_inputs(const Document& doc, int max_lines,
                                  int max_tokens) {
  if (doc.textlines.empty()) throw DataError("build_batch: empty document");
  DocInputs in;
  in.doc_id = doc.doc_id;
  in.line_mask.assign(static_cast<size_t>(max_lines), false);
  auto push = [&](int id, BBox box, int line, int word) {
    in.token_ids.push_back(id);
    in.pos_1d.push_back(static_cast<int>(in.token_ids.size()) - 1);
    in.boxes.push_back(box);
    in.segment_ids.push_back(0);
    in.membership.push_back(line);
    in.source_line.push_back(line);
    in.source_word.push_back(word);
  };
  push(Tokenizer::kCls, BBox{0, 0, 1000, 1000}, -1, -1);
  int budget = max_tokens - 1;
  for (const Textline& line : doc.textlines) {
    if (line.line_index >= max_lines || budget <= 0) break;
    bool any = false;
    for (size_t wi = 0; wi < line.words.size() && budget > 0; ++wi) {
      const Word& w = line.words[wi];
      for (int id : w.token_ids) {
        if (budget <= 0) break;
        push(id, w.bbox, line.line_index, static_cast<int>(wi));
        --budget;
        any = true;
      }
    }
    if (any) {
      in.line_mask[static_cast<size_t>(line.line_index)] = true;
      ++in.real_line_count;
    }
  }
  if (in.real_line_count == 0)
    throw DataError("build_batch: document has no word tokens");
  return in;
}

inline Batch build_batch(const std::vector<const Document*>& docs,
                         int max_lines = 64, int max_tokens = 512) {
  if (docs.empty()) throw DataError("build_batch: no documents");
  Batch batch;
  batch.max_lines = max_lines;
  batch.max_tokens = max_tokens;
  for (const Document* d : docs)
    batch.docs.push_back(build_doc_inputs(*d, max_lines, max_tokens));
  return batch;
}

}  // namespace linedoc

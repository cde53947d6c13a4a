#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "linedoc/document.hpp"
#include "linedoc/geometry.hpp"
#include "linedoc/tokenizer.hpp"

using namespace linedoc;
using nlohmann::json;

namespace {

json simple_record() {
  return json{{"doc_id", "d0"},
              {"width", 200},
              {"height", 100},
              {"lines",
               json::array({{{"bbox", {50, 20, 150, 40}},
                             {"words", json::array({{{"text", "total"},
                                                     {"bbox", {50, 20, 150, 40}}}})}}})}};
}

}  // namespace

TEST_CASE("normalize_bbox arithmetic and contracts") {
  CHECK(normalize_bbox({0, 0, 200, 100}, 200, 100) == BBox{0, 0, 1000, 1000});
  CHECK(normalize_bbox({112, 112, 224, 224}, 224, 224) == BBox{500, 500, 1000, 1000});
  // degenerate point box is valid with zero area
  BBox p = normalize_bbox({10, 10, 10, 10}, 100, 100);
  CHECK(p.x0 == p.x1);
  CHECK(p.valid());
  CHECK_THROWS(normalize_bbox({5, 5, 4, 9}, 100, 100));
  CHECK_THROWS(normalize_bbox({0, 0, 10, 10}, 0, 100));
  // idempotent when page dims are 1000
  PixelBox b{123, 456, 789, 1000};
  BBox once = normalize_bbox(b, 1000, 1000);
  CHECK(once == BBox{123, 456, 789, 1000});
  // monotone in each coordinate
  CHECK(normalize_bbox({11, 0, 20, 10}, 100, 100).x0 >=
        normalize_bbox({10, 0, 20, 10}, 100, 100).x0);
}

TEST_CASE("assign_grid partitions the layout square") {
  GridConfig g;
  CHECK(assign_grid(BBox{0, 0, 0, 0}, g) == 0);
  CHECK(assign_grid(BBox{500, 500, 500, 500}, g) == 24);  // row 3, col 3
  CHECK(assign_grid(BBox{999, 999, 999, 999}, g) == 48);
  CHECK(assign_grid(BBox{1000, 1000, 1000, 1000}, g) == 48);  // clamped
  // centers in strict cell interiors map to that cell
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 7; ++c) {
      int cx = c * 1000 / 7 + 60, cy = r * 1000 / 7 + 60;
      CHECK(assign_grid(BBox{cx, cy, cx, cy}, g) == r * 7 + c);
    }
  // every valid center maps to exactly one index
  for (int cx = 0; cx <= 1000; cx += 37)
    for (int cy = 0; cy <= 1000; cy += 41) {
      int idx = assign_grid(BBox{cx, cy, cx, cy}, g);
      CHECK(idx >= 0);
      CHECK(idx < 49);
    }
}

TEST_CASE("grid_cell_bbox covers its assigned centers") {
  GridConfig g;
  for (int i = 0; i < g.cell_count(); ++i) {
    BBox cell = grid_cell_bbox(i, g);
    int cx = (cell.x0 + cell.x1) / 2, cy = (cell.y0 + cell.y1) / 2;
    CHECK(assign_grid(BBox{cx, cy, cx, cy}, g) == i);
  }
}

TEST_CASE("parse_ocr: normalization, ordering, errors") {
  Tokenizer tk = Tokenizer::build({"total"});
  Document doc = parse_ocr(simple_record(), tk, Image(10, 10));
  REQUIRE(doc.textlines.size() == 1);
  CHECK(doc.textlines[0].line_bbox == BBox{250, 200, 750, 400});
  CHECK(doc.textlines[0].words[0].token_ids.size() == 1);

  // two lines with the same y-extent order by x0
  json rec = simple_record();
  rec["lines"] = json::array(
      {{{"bbox", {100, 20, 150, 40}},
        {"words", json::array({{{"text", "b"}, {"bbox", {100, 20, 150, 40}}}})}},
       {{"bbox", {10, 20, 60, 40}},
        {"words", json::array({{{"text", "a"}, {"bbox", {10, 20, 60, 40}}}})}}});
  Document two = parse_ocr(rec, tk, Image(10, 10));
  CHECK(two.textlines[0].words[0].text == "a");
  CHECK(two.textlines[1].words[0].text == "b");
  CHECK(two.textlines[0].line_index == 0);

  // word box exceeding page bounds
  json bad = simple_record();
  bad["lines"][0]["words"][0]["bbox"] = {50, 20, 250, 40};
  bad["lines"][0]["bbox"] = {50, 20, 250, 40};
  CHECK_THROWS_WITH_AS(parse_ocr(bad, tk, Image(10, 10)),
                       doctest::Contains("box out of range"), DataError);

  json empty = simple_record();
  empty["lines"] = json::array();
  CHECK_THROWS_AS(parse_ocr(empty, tk, Image(10, 10)), DataError);

  // unknown fields ignored
  json extra = simple_record();
  extra["scanner"] = "necroscan-9000";
  CHECK_NOTHROW(parse_ocr(extra, tk, Image(10, 10)));
}

TEST_CASE("ocr round-trip is the identity on the document model") {
  Tokenizer tk = Tokenizer::build({"alpha", "beta", "gamma"});
  json rec{{"doc_id", "rt"},
           {"width", 300},
           {"height", 200},
           {"lines",
            json::array({{{"bbox", {10, 10, 290, 30}},
                          {"words", json::array({{{"text", "alpha"}, {"bbox", {10, 10, 100, 30}}},
                                                 {{"text", "beta"}, {"bbox", {120, 10, 200, 30}}}})}},
                         {{"bbox", {10, 50, 150, 70}},
                          {"words", json::array({{{"text", "gamma"}, {"bbox", {10, 50, 150, 70}}}})}}})}};
  Document a = parse_ocr(rec, tk, Image(4, 4));
  Document b = parse_ocr(document_to_ocr_json(a, "img.pgm"), tk, Image(4, 4));
  REQUIRE(a.textlines.size() == b.textlines.size());
  for (size_t i = 0; i < a.textlines.size(); ++i) {
    CHECK(a.textlines[i].line_bbox == b.textlines[i].line_bbox);
    REQUIRE(a.textlines[i].words.size() == b.textlines[i].words.size());
    for (size_t j = 0; j < a.textlines[i].words.size(); ++j) {
      CHECK(a.textlines[i].words[j].text == b.textlines[i].words[j].text);
      CHECK(a.textlines[i].words[j].bbox == b.textlines[i].words[j].bbox);
      CHECK(a.textlines[i].words[j].token_ids == b.textlines[i].words[j].token_ids);
    }
  }
}

TEST_CASE("build_batch: padding mask, truncation, membership") {
  Tokenizer tk = Tokenizer::synthetic(64);
  // doc with 3 textlines
  json rec{{"doc_id", "b"}, {"width", 1000}, {"height", 1000}, {"lines", json::array()}};
  for (int i = 0; i < 3; ++i)
    rec["lines"].push_back(
        {{"bbox", {0, i * 100, 500, i * 100 + 50}},
         {"words", json::array({{{"text", Tokenizer::synthetic_word(i)},
                                 {"bbox", {0, i * 100, 200, i * 100 + 50}}}})}});
  Document doc = parse_ocr(rec, tk, Image(4, 4));
  Batch batch = build_batch({&doc});
  const DocInputs& in = batch.docs[0];
  int real = 0;
  for (bool m : in.line_mask) real += m;
  CHECK(real == 3);
  CHECK(in.line_mask.size() == 64);
  CHECK(in.token_ids[0] == Tokenizer::kCls);
  CHECK(in.membership[0] == -1);
  // every non-special token maps to a real line
  for (size_t t = 1; t < in.token_ids.size(); ++t) {
    CHECK(in.membership[t] >= 0);
    CHECK(in.line_mask[static_cast<size_t>(in.membership[t])]);
  }

  // 600-token doc truncates to exactly 512 with consistent membership
  json big{{"doc_id", "big"}, {"width", 1000}, {"height", 1000}, {"lines", json::array()}};
  for (int li = 0; li < 60; ++li) {
    json words = json::array();
    for (int wi = 0; wi < 10; ++wi)
      words.push_back({{"text", Tokenizer::synthetic_word((li * 10 + wi) % 64)},
                       {"bbox", {wi * 90, li * 16, wi * 90 + 80, li * 16 + 12}}});
    big["lines"].push_back({{"bbox", {0, li * 16, 980, li * 16 + 12}}, {"words", words}});
  }
  Document bigdoc = parse_ocr(big, tk, Image(4, 4));
  CHECK(bigdoc.word_count() == 600);
  Batch bb = build_batch({&bigdoc});
  CHECK(bb.docs[0].token_ids.size() == 512);
  for (size_t t = 0; t < 512; ++t) {
    int m = bb.docs[0].membership[t];
    if (m >= 0) CHECK(bb.docs[0].line_mask[static_cast<size_t>(m)]);
  }

  // two docs with different line counts share the padded line dimension
  Batch pair = build_batch({&doc, &bigdoc});
  CHECK(pair.docs[0].line_mask.size() == pair.docs[1].line_mask.size());
  CHECK(pair.docs[0].real_line_count == 3);
  CHECK(pair.docs[1].real_line_count > 3);

  Document empty;
  empty.doc_id = "empty";
  CHECK_THROWS_AS(build_batch({&empty}), DataError);
}

TEST_CASE("word grouping conserves the word count") {
  Tokenizer tk = Tokenizer::synthetic(32);
  json rec{{"doc_id", "c"}, {"width", 500}, {"height", 500}, {"lines", json::array()}};
  size_t total = 0;
  for (int li = 0; li < 5; ++li) {
    json words = json::array();
    for (int wi = 0; wi <= li; ++wi, ++total)
      words.push_back({{"text", Tokenizer::synthetic_word(wi)},
                       {"bbox", {wi * 60, li * 40, wi * 60 + 50, li * 40 + 20}}});
    rec["lines"].push_back({{"bbox", {0, li * 40, 480, li * 40 + 20}}, {"words", words}});
  }
  Document doc = parse_ocr(rec, tk, Image(4, 4));
  CHECK(doc.word_count() == total);
}

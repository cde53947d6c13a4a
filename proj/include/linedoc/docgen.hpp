#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "linedoc/document.hpp"
#include "linedoc/image.hpp"
#include "linedoc/rng.hpp"
#include "linedoc/tokenizer.hpp"

namespace linedoc {

// Synthetic page generator. Glyphs are procedural hash-derived pixel
// patterns keyed by token id, so a given vocabulary word always renders
// identically and the region <-> text correspondence is learnable.
struct GenParams {
  uint64_t seed = 0;
  int lines_min = 4, lines_max = 10;
  int words_min = 2, words_max = 5;
  int glyph_size_px = 2;        // scale of one pattern cell
  double ink_level = 0.10;      // stroke darkness
  double background_level = 0.95;
  int vocab_words = 256;
  int page = 224;
};

namespace glyph {
constexpr int kRows = 5;
constexpr int kMargin = 6;
constexpr int kWordGap = 4;
constexpr int kLineGap = 6;

inline int pattern_cols(int word_id) {
  uint64_t s = mix_seed(0x676c7970U, static_cast<uint64_t>(word_id));
  return 3 + static_cast<int>(splitmix64(s) % 4);  // 3..6
}

// per-id ink density, spread over [0.15, 0.90]: glyphs differ not only in
// their dot pattern but also in how much ink they carry, so word identity
// stays visible even under heavy downsampling
inline double pattern_density(int word_id) {
  uint64_t s = mix_seed(0x64656e73U, static_cast<uint64_t>(word_id));
  return 0.15 + 0.75 * static_cast<double>(splitmix64(s) % 997) / 996.0;
}

inline bool pattern_bit(int word_id, int row, int col) {
  if (row == 0 && col == 0) return true;  // every glyph has >= 1 ink pixel
  uint64_t s = mix_seed(0x62697473U, static_cast<uint64_t>(word_id));
  s = mix_seed(s, static_cast<uint64_t>(row * 97 + col));
  double u = static_cast<double>(splitmix64(s) % 9973) / 9972.0;
  return u < pattern_density(word_id);
}
}  // namespace glyph

inline void validate_gen_params(const GenParams& p) {
  if (p.lines_min < 1 || p.lines_min > p.lines_max)
    throw std::invalid_argument("gen: bad lines range");
  if (p.words_min < 1 || p.words_min > p.words_max)
    throw std::invalid_argument("gen: bad words range");
  if (p.glyph_size_px < 1) throw std::invalid_argument("gen: bad glyph size");
  if (p.ink_level < 0.0 || p.ink_level > 0.5 || p.background_level < 0.8 ||
      p.background_level > 1.0)
    throw std::invalid_argument("gen: ink/background out of range");
  if (p.background_level - p.ink_level < 0.3)
    throw std::invalid_argument("gen: ink indistinguishable from background");
  if (p.vocab_words < 2) throw std::invalid_argument("gen: vocab too small");
  const int word_h = glyph::kRows * p.glyph_size_px;
  const int max_word_w = 6 * p.glyph_size_px;
  const int worst_line_w = 2 * glyph::kMargin + p.words_max * max_word_w +
                           (p.words_max - 1) * glyph::kWordGap;
  const int worst_h = 2 * glyph::kMargin +
                      p.lines_max * (word_h + glyph::kLineGap) - glyph::kLineGap;
  if (worst_line_w > p.page || worst_h > p.page)
    throw std::invalid_argument("gen: layout overflow at chosen sizes");
}

inline Document generate_document(const GenParams& params, int index,
                                  const Tokenizer& tokenizer) {
  validate_gen_params(params);
  Rng rng(mix_seed(params.seed, static_cast<uint64_t>(index)));
  Document doc;
  {
    std::ostringstream id;
    id << "doc" << std::setw(6) << std::setfill('0') << index;
    doc.doc_id = id.str();
  }
  doc.orig_width = doc.orig_height = params.page;
  doc.image = Image(params.page, params.page, params.background_level);

  const int word_h = glyph::kRows * params.glyph_size_px;
  const int n_lines =
      static_cast<int>(rng.next_int(params.lines_min, params.lines_max));
  for (int li = 0; li < n_lines; ++li) {
    Textline line;
    line.line_index = li;
    const int y = glyph::kMargin + li * (word_h + glyph::kLineGap);
    int x = glyph::kMargin;
    const int n_words =
        static_cast<int>(rng.next_int(params.words_min, params.words_max));
    for (int wi = 0; wi < n_words; ++wi) {
      const int vocab_index =
          static_cast<int>(rng.next_int(0, params.vocab_words - 1));
      Word w;
      w.text = Tokenizer::synthetic_word(vocab_index);
      w.token_ids = tokenizer.encode_word(w.text);
      const int cols = glyph::pattern_cols(vocab_index);
      const int word_w = cols * params.glyph_size_px;
      w.pixel_box = PixelBox{x, y, x + word_w, y + word_h};
      for (int r = 0; r < glyph::kRows; ++r)
        for (int c = 0; c < cols; ++c) {
          if (!glyph::pattern_bit(vocab_index, r, c)) continue;
          for (int dy = 0; dy < params.glyph_size_px; ++dy)
            for (int dx = 0; dx < params.glyph_size_px; ++dx)
              doc.image.at(y + r * params.glyph_size_px + dy,
                           x + c * params.glyph_size_px + dx) = params.ink_level;
        }
      w.bbox = normalize_bbox(w.pixel_box, params.page, params.page);
      line.words.push_back(std::move(w));
      x += word_w + glyph::kWordGap;
    }
    line.pixel_box = PixelBox{line.words.front().pixel_box.x0, y,
                              line.words.back().pixel_box.x1, y + word_h};
    line.line_bbox = normalize_bbox(line.pixel_box, params.page, params.page);
    doc.textlines.push_back(std::move(line));
  }
  return doc;
}

// FNV-1a 64; manifest content hash
inline uint64_t fnv1a64(const std::string& bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string read_file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct ManifestEntry {
  std::string doc_id;
  std::string hash_hex;
};

// Corpus layout: <dir>/images/<id>.pgm, <dir>/ocr/<id>.json, <dir>/manifest.tsv
inline std::vector<ManifestEntry> generate_corpus(
    const GenParams& params, int count, const std::filesystem::path& out_dir,
    const Tokenizer& tokenizer) {
  if (count < 1) throw std::invalid_argument("generate_corpus: count >= 1");
  validate_gen_params(params);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "ocr", ec);
  if (!fs::is_directory(out_dir / "images") || !fs::is_directory(out_dir / "ocr"))
    throw std::runtime_error("generate_corpus: cannot create " + out_dir.string());

  std::vector<ManifestEntry> manifest;
  for (int i = 0; i < count; ++i) {
    Document doc = generate_document(params, i, tokenizer);
    const std::string img_rel = "images/" + doc.doc_id + ".pgm";
    write_pgm(doc.image, (out_dir / img_rel).string());
    nlohmann::json record = document_to_ocr_json(doc, "../" + img_rel);
    std::ofstream jf(out_dir / "ocr" / (doc.doc_id + ".json"));
    if (!jf) throw std::runtime_error("generate_corpus: cannot write ocr json");
    jf << record.dump(2) << "\n";
    jf.close();
    uint64_t h = fnv1a64(read_file_bytes(out_dir / img_rel));
    h = fnv1a64(read_file_bytes(out_dir / "ocr" / (doc.doc_id + ".json")), h);
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << h;
    manifest.push_back({doc.doc_id, hex.str()});
  }
  std::ofstream mf(out_dir / "manifest.tsv");
  for (const auto& e : manifest) mf << e.doc_id << "\t" << e.hash_hex << "\n";
  if (!mf) throw std::runtime_error("generate_corpus: cannot write manifest");
  return manifest;
}

inline std::vector<Document> load_corpus(const std::filesystem::path& dir,
                                         const Tokenizer& tokenizer) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "manifest.tsv");
  if (!mf) throw DataError("no manifest.tsv in " + dir.string());
  std::vector<Document> docs;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::string doc_id = line.substr(0, line.find('\t'));
    docs.push_back(load_document(dir / "ocr" / (doc_id + ".json"), tokenizer));
  }
  if (docs.empty()) throw DataError("empty corpus at " + dir.string());
  return docs;
}

// combined corpus content hash, for reproducibility stamping
inline uint64_t corpus_hash(const std::filesystem::path& dir) {
  return fnv1a64(read_file_bytes(dir / "manifest.tsv"));
}

}  // namespace linedoc

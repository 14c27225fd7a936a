#include "fireedit/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>

#include "fireedit/io.hpp"
#include "fireedit/rng.hpp"

namespace fireedit {

const float kBackground = 0.5f;

namespace {

const std::vector<std::string> kColorWords{"red", "green", "blue", "yellow", "cyan", "magenta", "white", "black"};

const std::vector<std::string> kWords = [] {
  std::vector<std::string> w{"add", "remove", "make", "a", "the", "box", "at", "left", "right", "top", "bottom"};
  w.insert(w.end(), kColorWords.begin(), kColorWords.end());
  return w;
}();

struct Shape2 {
  Box box;
  std::size_t color;
};

void fill(Image& im, const Box& b, Color c) {
  for (std::size_t y = b.y0; y < b.y1; ++y)
    for (std::size_t x = b.x0; x < b.x1; ++x) {
      im.at(y, x, 0) = c.r;
      im.at(y, x, 1) = c.g;
      im.at(y, x, 2) = c.b;
    }
}

bool apart(const Box& a, const Box& b, std::size_t gap) {
  return a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0;
}

bool place(std::vector<Shape2>& shapes, std::size_t color, std::size_t s, Rng& rng) {
  const std::size_t lo = std::max<std::size_t>(2, s / 5), hi = std::max<std::size_t>(3, 3 * s / 8);
  for (int attempt = 0; attempt < 200; ++attempt) {
    const std::size_t w = rng.between(lo, hi), h = rng.between(lo, hi);
    const std::size_t x0 = rng.between(0, s - w), y0 = rng.between(0, s - h);
    const Box b{x0, y0, x0 + w, y0 + h};
    if (std::all_of(shapes.begin(), shapes.end(), [&](const Shape2& o) { return apart(b, o.box, 1); })) {
      shapes.push_back({b, color});
      return true;
    }
  }
  return false;
}

std::vector<std::size_t> ids(std::initializer_list<std::string> words) {
  std::vector<std::size_t> out;
  for (const auto& w : words) out.push_back(word_id(w));
  return out;
}

// Returns false when the random layout could not be completed.
bool try_record(const DatasetParams& p, Rng& rng, DatasetRecord& rec) {
  const std::size_t s = p.image_size;
  std::vector<std::size_t> colors(p.palette_size);
  std::iota(colors.begin(), colors.end(), 0);
  std::shuffle(colors.begin(), colors.end(), rng.engine());
  const bool critical = rng.uniform() < p.region_critical_fraction;

  std::vector<Shape2> shapes;
  std::vector<std::size_t> words;
  Box edit;
  EditKind kind;
  Color new_color{kBackground, kBackground, kBackground};

  if (critical) {
    const std::size_t c = colors[0];
    if (!place(shapes, c, s, rng) || !place(shapes, c, s, rng)) return false;
    if (p.max_shapes >= 3 && rng.bernoulli(0.5) && !place(shapes, colors[1], s, rng)) return false;
    const std::size_t target = rng.between(0, 1);
    const Box& a = shapes[target].box;
    const Box& b = shapes[1 - target].box;
    std::string where;
    if (a.x1 <= b.x0) where = "left";
    else if (b.x1 <= a.x0) where = "right";
    else if (a.y1 <= b.y0) where = "top";
    else where = "bottom";
    edit = a;
    if (rng.bernoulli(0.5)) {
      kind = EditKind::change_color;
      const std::size_t to = colors[2];
      new_color = palette()[to];
      words = ids({"make", "the", where, kColorWords[c], "box", kColorWords[to]});
    } else {
      kind = EditKind::remove;
      words = ids({"remove", "the", where, kColorWords[c], "box"});
    }
  } else {
    const std::size_t n = rng.between(p.min_shapes, p.max_shapes);
    for (std::size_t i = 0; i < n; ++i)
      if (!place(shapes, colors[i], s, rng)) return false;
    kind = static_cast<EditKind>(rng.between(0, 2));
    const std::size_t fresh = colors[n];
    if (kind == EditKind::add) {
      std::vector<Box> free;
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t x0 = (q % 2) * s / 2 + s / 8, y0 = (q / 2) * s / 2 + s / 8;
        const Box b{x0, y0, x0 + s / 4, y0 + s / 4};
        if (std::all_of(shapes.begin(), shapes.end(), [&](const Shape2& o) { return apart(b, o.box, 0); }))
          free.push_back(b);
      }
      if (free.empty()) {
        kind = EditKind::change_color;
      } else {
        edit = free[rng.between(0, free.size() - 1)];
        new_color = palette()[fresh];
        words = ids({"add", "a", kColorWords[fresh], "box", "at", edit.y0 < s / 2 ? "top" : "bottom",
                     edit.x0 < s / 2 ? "left" : "right"});
      }
    }
    if (kind != EditKind::add) {
      const Shape2& target = shapes[rng.between(0, n - 1)];
      edit = target.box;
      if (kind == EditKind::remove) {
        words = ids({"remove", "the", kColorWords[target.color], "box"});
      } else {
        new_color = palette()[fresh];
        words = ids({"make", "the", kColorWords[target.color], "box", kColorWords[fresh]});
      }
    }
  }

  rec.source = Image::filled(s, s, kBackground, kBackground, kBackground);
  rec.boxes = RegionSet{{}, RegionSource::oracle};
  for (const Shape2& sh : shapes) {
    fill(rec.source, sh.box, palette()[sh.color]);
    rec.boxes.boxes.push_back(sh.box);
  }
  rec.target = rec.source;
  fill(rec.target, edit, new_color);
  rec.instruction = TokenSequence::text(std::move(words));
  rec.edit_kind = kind;
  rec.edit_box = edit;
  rec.region_critical = critical;
  return true;
}

constexpr std::uint32_t kDatasetMagic = 0x53444546;  // "FEDS"
constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace

void DatasetParams::validate() const {
  if (image_size < 8 || image_size % 8 != 0)
    throw ConfigError("dataset image_size must be a positive multiple of 8, got " + std::to_string(image_size));
  if (min_shapes == 0 || min_shapes > max_shapes || max_shapes > 3)
    throw ConfigError("dataset shape count range must satisfy 1 <= min <= max <= 3");
  if (palette_size < max_shapes + 1 || palette_size < 3 || palette_size > kColorWords.size())
    throw ConfigError("dataset palette_size must be in [max(3, max_shapes + 1), " +
                      std::to_string(kColorWords.size()) + "]");
  if (!(region_critical_fraction >= 0.0 && region_critical_fraction <= 1.0))
    throw ConfigError("dataset region_critical_fraction must lie in [0, 1]");
}

const std::vector<std::string>& vocabulary() { return kWords; }

std::size_t word_id(const std::string& word) {
  const auto it = std::find(kWords.begin(), kWords.end(), word);
  if (it == kWords.end()) throw ContractError("unknown word '" + word + "'");
  return static_cast<std::size_t>(it - kWords.begin());
}

std::string describe(const TokenSequence& instruction) {
  std::string out;
  for (std::size_t id : instruction.ids) {
    if (!out.empty()) out += ' ';
    out += id < kWords.size() ? kWords[id] : "<" + std::to_string(id) + ">";
  }
  return out;
}

const std::vector<Color>& palette() {
  static const std::vector<Color> colors{{0.9f, 0.1f, 0.1f},  {0.1f, 0.8f, 0.2f}, {0.15f, 0.25f, 0.9f},
                                         {0.95f, 0.85f, 0.1f}, {0.1f, 0.85f, 0.9f}, {0.85f, 0.15f, 0.8f},
                                         {1.0f, 1.0f, 1.0f},  {0.0f, 0.0f, 0.0f}};
  return colors;
}

std::vector<DatasetRecord> generate_dataset(const DatasetParams& params, std::size_t count, std::uint64_t seed) {
  params.validate();
  std::vector<DatasetRecord> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    while (!try_record(params, rng, out[i])) {
    }
  }
  return out;
}

void save_dataset(const std::string& path, const std::vector<DatasetRecord>& records) {
  ByteWriter w;
  w.put(kDatasetMagic);
  w.put(kDatasetVersion);
  w.put<std::uint64_t>(records.size());
  const std::size_t h = records.empty() ? 0 : records[0].source.height;
  const std::size_t wd = records.empty() ? 0 : records[0].source.width;
  w.put<std::uint64_t>(h);
  w.put<std::uint64_t>(wd);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(kWords.size()));
  for (const auto& word : kWords) w.put_string(word);
  for (const DatasetRecord& r : records) {
    if (r.source.height != h || r.source.width != wd || r.target.height != h || r.target.width != wd)
      throw ContractError("save_dataset: records have differing image extents");
    w.put_array(r.source.values.data(), r.source.values.size());
    w.put_array(r.target.values.data(), r.target.values.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.instruction.size()));
    for (std::size_t id : r.instruction.ids) w.put<std::uint32_t>(static_cast<std::uint32_t>(id));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.boxes.boxes.size()));
    for (const Box& b : r.boxes.boxes)
      for (std::size_t v : {b.x0, b.y0, b.x1, b.y1}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.edit_kind));
    for (std::size_t v : {r.edit_box.x0, r.edit_box.y0, r.edit_box.x1, r.edit_box.y1})
      w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    w.put<std::uint8_t>(r.region_critical ? 1 : 0);
  }
  write_file(path, w.bytes());
}

std::vector<DatasetRecord> load_dataset(const std::string& path) {
  ByteReader r(read_file(path), "dataset " + path);
  if (r.get<std::uint32_t>() != kDatasetMagic) throw ConfigError("dataset " + path + ": bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kDatasetVersion)
    throw ConfigError("dataset " + path + ": unsupported version " + std::to_string(v));
  const auto count = r.get<std::uint64_t>();
  const auto h = r.get<std::uint64_t>(), wd = r.get<std::uint64_t>();
  const auto nwords = r.get<std::uint32_t>();
  std::vector<std::string> words(nwords);
  for (auto& word : words) word = r.get_string();
  if (words != kWords) throw ConfigError("dataset " + path + ": vocabulary differs from this build");
  std::vector<DatasetRecord> out(count);
  for (DatasetRecord& rec : out) {
    rec.source = Image{h, wd, std::vector<float>(h * wd * 3)};
    rec.target = rec.source;
    r.get_array(rec.source.values.data(), rec.source.values.size());
    r.get_array(rec.target.values.data(), rec.target.values.size());
    std::vector<std::size_t> ids(r.get<std::uint32_t>());
    for (auto& id : ids) id = r.get<std::uint32_t>();
    rec.instruction = TokenSequence::text(std::move(ids));
    rec.boxes = RegionSet{std::vector<Box>(r.get<std::uint32_t>()), RegionSource::oracle};
    for (Box& b : rec.boxes.boxes) {
      b.x0 = r.get<std::uint32_t>();
      b.y0 = r.get<std::uint32_t>();
      b.x1 = r.get<std::uint32_t>();
      b.y1 = r.get<std::uint32_t>();
    }
    const auto kind = r.get<std::uint8_t>();
    if (kind > 2) throw ConfigError("dataset " + path + ": bad edit kind " + std::to_string(kind));
    rec.edit_kind = static_cast<EditKind>(kind);
    rec.edit_box.x0 = r.get<std::uint32_t>();
    rec.edit_box.y0 = r.get<std::uint32_t>();
    rec.edit_box.x1 = r.get<std::uint32_t>();
    rec.edit_box.y1 = r.get<std::uint32_t>();
    rec.region_critical = r.get<std::uint8_t>() != 0;
  }
  if (!r.done()) throw ConfigError("dataset " + path + ": trailing bytes");
  return out;
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write failed for " + path);
}

}  // namespace fireedit

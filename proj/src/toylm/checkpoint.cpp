#include "gradsae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "gradsae/error.hpp"

namespace gradsae::ckpt {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

constexpr char kMagic[8] = {'G', 'S', 'A', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kKindLM = 1;
constexpr std::uint32_t kKindSAE = 2;
// Guards against allocating absurd sizes from a corrupt header.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 28;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
  }
  template <class T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void u64(std::uint64_t v) { pod(v); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void matrix(const num::Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    out_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  void header(std::uint32_t kind) {
    out_.write(kMagic, sizeof kMagic);
    pod(kVersion);
    pod(kind);
  }
  void finish() {
    out_.flush();
    if (!out_) throw IoError("write to " + path_.string() + " failed");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open checkpoint " + path.string());
  }
  template <class T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) fail("truncated file");
    return v;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > 4096) fail("implausible string length");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) fail("truncated file");
    return s;
  }
  num::Matrix matrix() {
    const std::uint64_t r = u64(), c = u64();
    if (r != 0 && c > kMaxElements / r) fail("implausible tensor shape");
    num::Matrix m(r, c);
    in_.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in_) fail("truncated file");
    return m;
  }
  void header(std::uint32_t kind) {
    char magic[8];
    in_.read(magic, sizeof magic);
    if (!in_ || std::memcmp(magic, kMagic, sizeof magic) != 0) fail("not a checkpoint (bad magic)");
    const auto version = pod<std::uint32_t>();
    if (version != kVersion) fail("unsupported version " + std::to_string(version));
    const auto k = pod<std::uint32_t>();
    if (k != kind) fail(std::string("holds a ") + (k == kKindLM ? "language model" : "different kind of") + " checkpoint");
  }
  void finish() {
    if (in_.peek() != std::char_traits<char>::eof()) fail("trailing bytes");
  }
  [[noreturn]] void fail(const std::string& why) { throw IoError(path_.string() + ": " + why); }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

void expect_shape(Reader& r, const num::Matrix& got, const num::Matrix& want) {
  if (got.rows() != want.rows() || got.cols() != want.cols()) {
    r.fail("tensor " + got.shape_string() + " where the config implies " + want.shape_string());
  }
}

}  // namespace

void save_lm(const std::filesystem::path& path, const lm::LanguageModel& model) {
  model.config.validate();
  Writer w(path);
  w.header(kKindLM);
  const auto& c = model.config;
  for (std::size_t v : {c.vocab_size, c.dim, c.layers, c.heads, c.context_len, c.hook_layer, c.mlp_mult}) w.u64(v);
  w.u64(model.vocab.size());
  for (const auto& word : model.vocab.words()) w.str(word);
  const auto tensors = model.params.tensors();
  w.u64(tensors.size());
  for (const num::Matrix* t : tensors) w.matrix(*t);
  w.finish();
}

lm::LanguageModel load_lm(const std::filesystem::path& path) {
  Reader r(path);
  r.header(kKindLM);
  lm::LanguageModel m;
  auto& c = m.config;
  for (std::size_t* v : {&c.vocab_size, &c.dim, &c.layers, &c.heads, &c.context_len, &c.hook_layer, &c.mlp_mult}) {
    *v = r.u64();
  }
  try {
    c.validate();
  } catch (const Error& e) {
    r.fail(std::string("invalid config: ") + e.what());
  }
  const std::uint64_t nwords = r.u64();
  if (nwords != c.vocab_size) r.fail("vocabulary size disagrees with config");
  std::vector<std::string> words;
  for (std::uint64_t i = 0; i < nwords; ++i) words.push_back(r.str());
  if (words.size() < 3 || words[0] != "<pad>" || words[1] != "<unk>" || words[2] != "<eos>") {
    r.fail("vocabulary does not start with the special tokens");
  }
  m.vocab = lm::Vocab::from_words({words.begin() + 3, words.end()});
  // Shapes come from a freshly initialized model of the same config.
  m.params = lm::LMParams::init(c, 0);
  auto tensors = m.params.tensors();
  if (r.u64() != tensors.size()) r.fail("tensor count disagrees with config");
  for (num::Matrix* t : tensors) {
    num::Matrix loaded = r.matrix();
    expect_shape(r, loaded, *t);
    *t = std::move(loaded);
  }
  r.finish();
  return m;
}

void save_sae(const std::filesystem::path& path, const sae::SAEParams& s) {
  sae::validate(s);
  Writer w(path);
  w.header(kKindSAE);
  w.u64(s.layer);
  w.matrix(s.w_enc);
  w.matrix(s.w_dec);
  w.finish();
}

sae::SAEParams load_sae(const std::filesystem::path& path) {
  Reader r(path);
  r.header(kKindSAE);
  sae::SAEParams s;
  s.layer = r.u64();
  s.w_enc = r.matrix();
  s.w_dec = r.matrix();
  r.finish();
  try {
    sae::validate(s);
  } catch (const Error& e) {
    r.fail(e.what());
  }
  return s;
}

}  // namespace gradsae::ckpt

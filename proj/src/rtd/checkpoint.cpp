#include "rtdlab/rtd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rtdlab::rtd {

namespace {

constexpr char kMagic[8] = {'R', 'T', 'D', 'L', 'C', 'K', 'P', 'T'};
constexpr char kEnd[8] = {'R', 'T', 'D', 'L', 'E', 'N', 'D', '.'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void str(const std::string& s) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> data) : buf_(std::move(data)) {}

  bool can_read(std::size_t n) const { return pos_ + n <= buf_.size(); }
  void need(std::size_t n, const std::string& what) const {
    if (!can_read(n)) throw CheckpointError("checkpoint truncated while reading " + what);
  }
  void bytes(void* out, std::size_t n, const std::string& what) {
    need(n, what);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename U>
  U uint(const std::string& what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  std::string str(const std::string& what) {
    const auto n = uint<std::uint32_t>(what);
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

template <typename T>
void add_record(Checkpoint& c, const std::string& name, const ad::Shape& shape, std::span<const T> values) {
  CheckpointRecord r;
  r.name = name;
  r.dtype = sizeof(T) == 4 ? Dtype::kF32 : Dtype::kF64;
  r.shape = shape;
  r.values.assign(values.begin(), values.end());
  c.records.push_back(std::move(r));
}

template <typename T>
void fill(ad::Tensor<T>& t, const CheckpointRecord& r) {
  if (r.shape != t.shape()) {
    throw CheckpointError("record '" + r.name + "' has shape " + ad::shape_str(r.shape) + ", expected " +
                          ad::shape_str(t.shape()));
  }
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(r.values[i]);
}

template <typename T>
void fill_list(const model::ParamList<T>& params, const Checkpoint& c) {
  for (const auto& p : params) {
    auto t = p.tensor;
    fill(t, c.record(p.name));
  }
}

TrainConfig parse_header(const FlatConfig& header, std::size_t& vocab_size) {
  TrainConfig config;
  bool have_vocab = false;
  for (const auto& [k, v] : header) {
    if (k == "vocab_size") {
      vocab_size = static_cast<std::size_t>(parse_uint(k, v));
      have_vocab = true;
    } else {
      apply_flat(config, k, v);
    }
  }
  if (!have_vocab) throw CheckpointError("checkpoint header lacks vocab_size");
  return config;
}

}  // namespace

const CheckpointRecord& Checkpoint::record(std::string_view name) const {
  for (const auto& r : records) {
    if (r.name == name) return r;
  }
  throw CheckpointError("checkpoint has no record '" + std::string(name) + "'");
}

bool Checkpoint::has(std::string_view name) const {
  for (const auto& r : records) {
    if (r.name == name) return true;
  }
  return false;
}

template <typename T>
Checkpoint make_checkpoint(const ModelBundle<T>& bundle, const TrainConfig& config, std::uint64_t step) {
  Checkpoint c;
  c.step = step;
  c.config = config;
  c.config.mode = bundle.mode;
  c.config.generator = bundle.gen_config;
  c.config.discriminator = bundle.disc_config;
  c.vocab_size = bundle.vocab_size;
  c.header = to_flat(c.config);
  c.header.emplace_back("vocab_size", std::to_string(bundle.vocab_size));

  const auto exported = bundle.materialized_discriminator_table();
  for (const auto& p : bundle.generator_params()) add_record<T>(c, p.name, p.tensor.shape(), p.tensor.values());
  add_record<T>(c, "discriminator.embeddings", bundle.E_G.shape(), std::span<const T>(exported));
  for (const auto& p : bundle.discriminator_params()) {
    if (p.name == "discriminator.embeddings") continue;  // NES table, already stored above
    add_record<T>(c, p.name, p.tensor.shape(), p.tensor.values());
  }
  return c;
}

void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint<std::uint32_t>(c.version);
  w.uint<std::uint64_t>(c.step);
  std::string header;
  for (const auto& [k, v] : c.header) header += k + "=" + v + "\n";
  w.str(header);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    w.str(r.name);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(r.shape.size()));
    for (auto d : r.shape) w.uint<std::uint64_t>(d);
    for (double v : r.values) {
      if (r.dtype == Dtype::kF32) {
        w.uint<std::uint32_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        w.uint<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  w.bytes(kEnd, sizeof kEnd);

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot open " + path.string() + " for writing");
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  out.flush();
  if (!out) throw std::ios_base::failure("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open checkpoint " + path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data));

  char magic[8];
  r.bytes(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  Checkpoint c;
  c.version = r.uint<std::uint32_t>("version");
  if (c.version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version));
  }
  c.step = r.uint<std::uint64_t>("step");
  const std::string header = r.str("header");
  std::istringstream lines(header);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed header line '" + line + "'");
    c.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  try {
    c.config = parse_header(c.header, c.vocab_size);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }

  const auto n = r.uint<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string idx = "record " + std::to_string(i + 1) + " of " + std::to_string(n);
    if (r.remaining() == 0) throw CheckpointError("checkpoint truncated: missing " + idx);
    CheckpointRecord rec;
    rec.name = r.str(idx + " (name)");
    const std::string what = idx + " '" + rec.name + "'";
    const auto dtype = r.uint<std::uint8_t>(what);
    if (dtype > 1) throw CheckpointError("unknown dtype in " + what);
    rec.dtype = static_cast<Dtype>(dtype);
    const auto rank = r.uint<std::uint8_t>(what);
    for (std::uint8_t k = 0; k < rank; ++k) rec.shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>(what)));
    const std::size_t count = ad::numel(rec.shape);
    const std::size_t width = rec.dtype == Dtype::kF32 ? 4 : 8;
    r.need(count * width, what);
    rec.values.resize(count);
    for (auto& v : rec.values) {
      v = rec.dtype == Dtype::kF32 ? static_cast<double>(std::bit_cast<float>(r.uint<std::uint32_t>(what)))
                                   : std::bit_cast<double>(r.uint<std::uint64_t>(what));
    }
    c.records.push_back(std::move(rec));
  }
  char end[8];
  r.bytes(end, sizeof end, "end marker");
  if (std::memcmp(end, kEnd, sizeof end) != 0) throw CheckpointError("bad end marker");
  return c;
}

template <typename T>
ModelBundle<T> bundle_from_checkpoint(const Checkpoint& c) {
  auto b = init_bundle<T>(c.config, c.vocab_size);
  fill_list(b.generator_params(), c);
  if (b.mode == SharingMode::kNES) {
    fill(b.E_D, c.record("discriminator.embeddings"));
  }
  for (const auto& p : b.discriminator_params()) {
    if (p.name == "discriminator.embeddings") continue;
    auto t = p.tensor;
    fill(t, c.record(p.name));
  }
  return b;
}

template <typename T>
model::ParamList<T> Discriminator<T>::named() const {
  model::ParamList<T> out{{"discriminator.embeddings", embeddings}};
  auto more = body.named("discriminator.body");
  out.insert(out.end(), more.begin(), more.end());
  return out;
}

template <typename T>
Discriminator<T> load_discriminator(const Checkpoint& c) {
  Discriminator<T> d;
  d.config = c.config.discriminator;
  Rng unused = make_stream(0, "unused");
  d.embeddings = ad::Tensor<T>::zeros({c.vocab_size, d.config.hidden}, true);
  d.body = model::init_encoder<T>(d.config, unused);
  d.rtd = model::init_rtd_head<T>(d.config.hidden, unused);
  fill(d.embeddings, c.record("discriminator.embeddings"));
  fill_list(d.body.named("discriminator.body"), c);
  fill_list(d.rtd.named("discriminator.rtd"), c);
  return d;
}

Checkpoint discriminator_only(const Checkpoint& c) {
  Checkpoint out = c;
  out.records.clear();
  for (const auto& r : c.records) {
    if (r.name.starts_with("discriminator.") && r.name != "discriminator.embedding_delta") out.records.push_back(r);
  }
  c.record("discriminator.embeddings");  // throws when the source has none
  return out;
}

#define RTDLAB_INSTANTIATE(T)                                                                        \
  template Checkpoint make_checkpoint<T>(const ModelBundle<T>&, const TrainConfig&, std::uint64_t); \
  template ModelBundle<T> bundle_from_checkpoint<T>(const Checkpoint&);                             \
  template struct Discriminator<T>;                                                                 \
  template Discriminator<T> load_discriminator<T>(const Checkpoint&);
RTDLAB_INSTANTIATE(float)
RTDLAB_INSTANTIATE(double)
#undef RTDLAB_INSTANTIATE

}  // namespace rtdlab::rtd

#include "ptqlab/checkpoint_io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace ptqlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len},
          {"mode", to_string(c.mode)}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    if (j.contains("mode")) c.mode = parse_generation_mode(j.at("mode").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > in_.size()) throw FormatError("checkpoint is truncated");
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    bytes(&v, sizeof v);
    return v;
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const CheckpointFile& file) {
  const ModelCheckpoint& ckpt = file.checkpoint;
  nlohmann::json tensors = nlohmann::json::array();
  const auto names = parameter_names(ckpt.config);
  for (const auto& name : names) {
    tensors.push_back({{"name", name}, {"shape", ckpt.param(name).shape()}});
  }
  nlohmann::json quantized = nlohmann::json::array();
  for (const auto& [path, qw] : file.quantized) {
    if (qw.spec.passthrough()) continue;
    quantized.push_back({{"path", path},
                         {"bits", qw.spec.bits},
                         {"group_size", qw.spec.group_size},
                         {"shape", qw.shape}});
  }
  const nlohmann::json header = {
      {"config", config_to_json(ckpt.config)},
      {"meta",
       {{"seed", ckpt.meta.seed},
        {"steps", ckpt.meta.steps},
        {"corpus_hash", ckpt.meta.corpus_hash},
        {"config_hash", ckpt.meta.config_hash}}},
      {"tensors", tensors},
      {"quantized", quantized},
      {"annotations", file.annotations}};
  const std::string text = header.dump();

  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  for (const auto& name : names) {
    const Tensor& t = ckpt.param(name);
    w.bytes(t.data(), t.numel() * sizeof(float));
  }
  for (const auto& [path, qw] : file.quantized) {
    if (qw.spec.passthrough()) continue;
    w.bytes(qw.scales.data(), qw.scales.numel() * sizeof(float));
    w.bytes(qw.codes.data(), qw.codes.size());
  }
  return w.take();
}

CheckpointFile deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(r.u32(), '\0');
  r.bytes(text.data(), text.size());

  CheckpointFile file;
  try {
    const auto header = nlohmann::json::parse(text);
    ModelCheckpoint& ckpt = file.checkpoint;
    ckpt.config = config_from_json(header.at("config"));
    const auto& meta = header.at("meta");
    ckpt.meta.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.meta.steps = meta.at("steps").get<std::uint64_t>();
    ckpt.meta.corpus_hash = meta.at("corpus_hash").get<std::string>();
    ckpt.meta.config_hash = meta.at("config_hash").get<std::string>();
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      if (shape != parameter_shape(ckpt.config, name)) {
        throw FormatError("tensor '" + name + "' has unexpected shape " + shape_to_string(shape));
      }
      Tensor tensor(shape);
      r.bytes(tensor.data(), tensor.numel() * sizeof(float));
      ckpt.params.emplace(name, std::move(tensor));
    }
    for (const auto& name : parameter_names(ckpt.config)) {
      if (!ckpt.params.count(name)) throw FormatError("checkpoint lacks tensor '" + name + "'");
    }
    for (const auto& q : header.at("quantized")) {
      QuantizedWeight qw;
      qw.shape = q.at("shape").get<Shape>();
      qw.spec = {q.at("bits").get<int>(), q.at("group_size").get<std::size_t>()};
      qw.scales = Tensor({qw.rows(), qw.n_groups()});
      qw.codes.resize(qw.rows() * qw.cols());
      r.bytes(qw.scales.data(), qw.scales.numel() * sizeof(float));
      r.bytes(qw.codes.data(), qw.codes.size());
      qw.validate();
      file.quantized.emplace(q.at("path").get<std::string>(), std::move(qw));
    }
    file.annotations = header.value("annotations", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint payload");
  return file;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  // Atomic replace through a temp file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const CheckpointFile& file, const std::string& path) {
  write_file_bytes(path, serialize_checkpoint(file));
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  save_checkpoint(CheckpointFile{ckpt, {}, nlohmann::json::object()}, path);
}

CheckpointFile load_checkpoint_file(const std::string& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  return load_checkpoint_file(path).checkpoint;
}

}  // namespace ptqlab

#include "morphgen/pipeline/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "morphgen/core/errors.hpp"

namespace morphgen::pipeline {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'T', 'C', '1'};

template <typename T>
std::vector<unsigned char> to_le_bytes(const std::vector<T>& v) {
  std::vector<unsigned char> out(v.size() * sizeof(T));
  std::memcpy(out.data(), v.data(), out.size());  // x86-64 is little-endian
  return out;
}

template <typename T>
void from_le_bytes(const TensorEntry& e, std::vector<T>& out) {
  if (e.bytes.size() != out.size() * sizeof(T))
    throw CorruptCheckpointError("checkpoint tensor '" + e.name + "' has " +
                                 std::to_string(e.bytes.size()) + " bytes, expected " +
                                 std::to_string(out.size() * sizeof(T)));
  std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
}

const char* dtype_of_size(std::size_t s) { return s == 4 ? "f32" : "f64"; }

void check_hash(const Container& c, const std::string& expected, bool allow,
                const std::filesystem::path& path) {
  if (expected.empty() || allow) return;
  const std::string got = c.meta.value("config_hash", "");
  if (got != expected)
    throw ValidationError("checkpoint " + path.string() + " has config hash " + got +
                          " but the current config hashes to " + expected +
                          " (pass allow_hash_mismatch to load anyway)");
}

}  // namespace

void write_container(const std::filesystem::path& path, const json& meta,
                     const std::vector<TensorEntry>& tensors) {
  json index = json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    index.push_back({{"name", t.name},
                     {"dtype", t.dtype},
                     {"shape", t.shape},
                     {"offset", offset},
                     {"bytes", t.bytes.size()}});
    offset += t.bytes.size();
  }
  json header = meta;
  header["tensors"] = index;
  const std::string header_str = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_container: cannot open " + path.string());
  os.write(kMagic, 4);
  const std::uint32_t len = static_cast<std::uint32_t>(header_str.size());
  unsigned char lb[4] = {static_cast<unsigned char>(len & 0xff),
                         static_cast<unsigned char>((len >> 8) & 0xff),
                         static_cast<unsigned char>((len >> 16) & 0xff),
                         static_cast<unsigned char>((len >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(lb), 4);
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& t : tensors)
    os.write(reinterpret_cast<const char*>(t.bytes.data()),
             static_cast<std::streamsize>(t.bytes.size()));
  if (!os) throw IoError("write_container: write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_container: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw CorruptCheckpointError("read_container: magic mismatch in " + path.string());
  unsigned char lb[4];
  is.read(reinterpret_cast<char*>(lb), 4);
  if (!is) throw CorruptCheckpointError("read_container: truncated header length");
  const std::uint32_t len = static_cast<std::uint32_t>(lb[0]) | (static_cast<std::uint32_t>(lb[1]) << 8) |
                            (static_cast<std::uint32_t>(lb[2]) << 16) |
                            (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string header_str(len, '\0');
  is.read(header_str.data(), len);
  if (!is) throw CorruptCheckpointError("read_container: truncated header in " + path.string());

  Container c;
  try {
    c.meta = json::parse(header_str);
  } catch (const json::exception& e) {
    throw CorruptCheckpointError("read_container: bad header json: " + std::string(e.what()));
  }
  for (const auto& tj : c.meta.value("tensors", json::array())) {
    TensorEntry t;
    t.name = tj.at("name").get<std::string>();
    t.dtype = tj.at("dtype").get<std::string>();
    t.shape = tj.at("shape").get<std::vector<long>>();
    const std::size_t nbytes = tj.at("bytes").get<std::size_t>();
    t.bytes.resize(nbytes);
    is.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (static_cast<std::size_t>(is.gcount()) != nbytes)
      throw CorruptCheckpointError("read_container: truncated payload for tensor '" + t.name +
                                   "' in " + path.string());
    c.tensors[t.name] = std::move(t);
  }
  return c;
}

json checkpoint_meta(const std::filesystem::path& path) { return read_container(path).meta; }

namespace {

std::vector<TensorEntry> collect_param_tensors(std::vector<nn::ParamSlot<float>> slots) {
  std::vector<TensorEntry> out;
  for (const auto& slot : slots) {
    TensorEntry t;
    t.name = slot.name;
    t.dtype = dtype_of_size(sizeof(float));
    t.shape = std::vector<long>{static_cast<long>(slot.value->size())};
    t.bytes = to_le_bytes(*slot.value);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

void save_vqvae_checkpoint(vqvae::VqvaeModel<float>& model, const json& config_snapshot,
                           const std::string& config_hash, const std::filesystem::path& path) {
  std::vector<TensorEntry> tensors = collect_param_tensors(model.all_params());
  const vq::Codebook& cb = model.codebook();
  tensors.push_back({"codebook.vectors", "f64", {cb.K, cb.n_z}, to_le_bytes(cb.vectors)});
  tensors.push_back({"codebook.ema_counts", "f64", {cb.K}, to_le_bytes(cb.ema_counts)});
  tensors.push_back({"codebook.ema_sums", "f64", {cb.K, cb.n_z}, to_le_bytes(cb.ema_sums)});
  json meta = {{"kind", "vqvae"},
               {"config_hash", config_hash},
               {"config", config_snapshot},
               {"codebook", {{"K", cb.K}, {"n_z", cb.n_z}, {"gamma", cb.gamma}, {"beta", cb.beta}}}};
  write_container(path, meta, tensors);
}

void load_vqvae_checkpoint(vqvae::VqvaeModel<float>& model, const std::filesystem::path& path,
                           const std::string& expected_hash, bool allow_hash_mismatch) {
  Container c = read_container(path);
  check_hash(c, expected_hash, allow_hash_mismatch, path);
  for (auto& slot : model.all_params()) {
    auto it = c.tensors.find(slot.name);
    if (it == c.tensors.end())
      throw CorruptCheckpointError("vqvae checkpoint missing tensor '" + slot.name + "'");
    from_le_bytes(it->second, *slot.value);
  }
  vq::Codebook& cb = model.codebook();
  auto need = [&](const char* name) -> const TensorEntry& {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end())
      throw CorruptCheckpointError(std::string("vqvae checkpoint missing tensor '") + name + "'");
    return it->second;
  };
  from_le_bytes(need("codebook.vectors"), cb.vectors);
  from_le_bytes(need("codebook.ema_counts"), cb.ema_counts);
  from_le_bytes(need("codebook.ema_sums"), cb.ema_sums);
}

void save_prior_checkpoint(prior::PriorModel<float>& model, const json& config_snapshot,
                           const std::string& config_hash, const std::filesystem::path& path) {
  std::vector<TensorEntry> tensors = collect_param_tensors(model.params());
  for (const auto& [name, proj] : model.favor_projections())
    tensors.push_back({name, "f64", {static_cast<long>(proj->size())}, to_le_bytes(*proj)});
  const prior::PriorConfig& pc = model.config();
  json meta = {{"kind", "prior"},
               {"config_hash", config_hash},
               {"config", config_snapshot},
               {"prior",
                {{"layers", pc.layers},
                 {"embed_dim", pc.embed_dim},
                 {"heads", pc.heads},
                 {"local_heads", pc.local_heads},
                 {"local_window", pc.local_window},
                 {"vocab", pc.vocab},
                 {"grid", {pc.grid.x, pc.grid.y, pc.grid.z}},
                 {"feature_count", pc.feature_count},
                 {"ffn_mult", pc.ffn_mult}}}};
  write_container(path, meta, tensors);
}

void load_prior_checkpoint(prior::PriorModel<float>& model, const std::filesystem::path& path,
                           const std::string& expected_hash, bool allow_hash_mismatch) {
  Container c = read_container(path);
  check_hash(c, expected_hash, allow_hash_mismatch, path);
  for (auto& slot : model.params()) {
    auto it = c.tensors.find(slot.name);
    if (it == c.tensors.end())
      throw CorruptCheckpointError("prior checkpoint missing tensor '" + slot.name + "'");
    from_le_bytes(it->second, *slot.value);
  }
  for (auto& [name, proj] : model.favor_projections()) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end())
      throw CorruptCheckpointError("prior checkpoint missing tensor '" + name + "'");
    from_le_bytes(it->second, *proj);
  }
}

void save_codebook(const vq::Codebook& cb, const std::filesystem::path& path) {
  std::vector<TensorEntry> tensors;
  tensors.push_back({"vectors", "f64", {cb.K, cb.n_z}, to_le_bytes(cb.vectors)});
  tensors.push_back({"ema_counts", "f64", {cb.K}, to_le_bytes(cb.ema_counts)});
  tensors.push_back({"ema_sums", "f64", {cb.K, cb.n_z}, to_le_bytes(cb.ema_sums)});
  json meta = {{"kind", "codebook"},
               {"K", cb.K},
               {"n_z", cb.n_z},
               {"gamma", cb.gamma},
               {"beta", cb.beta}};
  write_container(path, meta, tensors);
}

vq::Codebook load_codebook(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.meta.value("kind", "") != "codebook")
    throw CorruptCheckpointError("load_codebook: not a codebook container: " + path.string());
  vq::Codebook cb;
  cb.K = c.meta.at("K").get<int>();
  cb.n_z = c.meta.at("n_z").get<int>();
  cb.gamma = c.meta.at("gamma").get<double>();
  cb.beta = c.meta.at("beta").get<double>();
  cb.vectors.resize(static_cast<std::size_t>(cb.K) * cb.n_z);
  cb.ema_counts.resize(static_cast<std::size_t>(cb.K));
  cb.ema_sums.resize(static_cast<std::size_t>(cb.K) * cb.n_z);
  from_le_bytes(c.tensors.at("vectors"), cb.vectors);
  from_le_bytes(c.tensors.at("ema_counts"), cb.ema_counts);
  from_le_bytes(c.tensors.at("ema_sums"), cb.ema_sums);
  cb.validate();
  return cb;
}

}  // namespace morphgen::pipeline

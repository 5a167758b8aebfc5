#include "sendvae/checkpoint.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include "sendvae/svtf.hpp"

namespace sendvae {
namespace fs = std::filesystem;

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

std::string sha256_tree(const fs::path& dir) {
  if (!fs::exists(dir)) throw ConfigError("missing artifact " + dir.string());
  if (fs::is_regular_file(dir)) return sha256_file(dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& p : files) acc += fs::relative(p, dir).generic_string() + ":" + sha256_file(p) + "\n";
  return sha256_hex(acc);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

template <typename T>
nlohmann::json save_params(const ParamStore<T>& ps, const fs::path& dir, const std::string& prefix) {
  fs::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& name : ps.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const std::string file = name + ".svtf";
    svtf::write(dir / file, ps.get(name).value());
    index.push_back({{"name", name}, {"file", file}, {"shape", ps.get(name).shape()}});
  }
  return index;
}

template <typename T>
void load_params(ParamStore<T>& ps, const fs::path& dir, const nlohmann::json& index) {
  for (const auto& entry : index) {
    const std::string name = entry.at("name");
    auto t = svtf::read_as<T>(dir / entry.at("file").get<std::string>());
    auto& dst = ps.get(name).mutable_value();
    if (t.shape != dst.shape)
      throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(t.shape) + ", expected " +
                        shape_str(dst.shape));
    dst.data = std::move(t.data);
  }
}

template <typename T>
void save_moments(const std::map<std::string, typename AdamW<T>::Moments>& state, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& [name, mom] : state) {
    svtf::write(dir / (name + ".m.svtf"), Tensor<T>(Shape{mom.m.size()}, mom.m));
    svtf::write(dir / (name + ".v.svtf"), Tensor<T>(Shape{mom.v.size()}, mom.v));
  }
}

template <typename T>
void load_moments(AdamW<T>& opt, const ParamStore<T>& ps, const fs::path& dir) {
  opt.state().clear();
  for (const auto& name : ps.names()) {
    const auto m = dir / (name + ".m.svtf");
    if (!fs::exists(m)) continue;
    auto& st = opt.state()[name];
    st.m = svtf::read_as<T>(m).data;
    st.v = svtf::read_as<T>(dir / (name + ".v.svtf")).data;
  }
}

template nlohmann::json save_params(const ParamStore<float>&, const fs::path&, const std::string&);
template nlohmann::json save_params(const ParamStore<double>&, const fs::path&, const std::string&);
template void load_params(ParamStore<float>&, const fs::path&, const nlohmann::json&);
template void load_params(ParamStore<double>&, const fs::path&, const nlohmann::json&);
template void save_moments<float>(const std::map<std::string, AdamW<float>::Moments>&, const fs::path&);
template void load_moments(AdamW<float>&, const ParamStore<float>&, const fs::path&);

}  // namespace sendvae

#include "diffmark/io/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

namespace diffmark::io {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md, &len);
        static const char* digits = "0123456789abcdef";
        std::string out;
        for (unsigned i = 0; i < len; ++i) {
            out += digits[md[i] >> 4];
            out += digits[md[i] & 15];
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

std::string array_hash(const Tensor<float>& t) {
    Sha256 h;
    h.update(t.ptr(), t.size() * sizeof(float));
    return h.hex();
}

void write_array(const fs::path& p, const Tensor<float>& t) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

void read_array(const fs::path& p, Tensor<float>& t) {
    std::ifstream f(p, std::ios::binary | std::ios::ate);
    if (!f) throw DependencyError("", "missing checkpoint array " + p.string());
    const auto bytes = static_cast<std::size_t>(f.tellg());
    if (bytes != t.size() * sizeof(float))
        throw ShapeError("checkpoint array " + p.string() + " has " + std::to_string(bytes) + " bytes, expected " +
                         std::to_string(t.size() * sizeof(float)));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(bytes));
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_file(const fs::path& p) {
    const std::string s = read_text(p);
    Sha256 h;
    h.update(s);
    return h.hex();
}

std::string state_hash(const nn::State<float>& state) {
    Sha256 h;
    auto add = [&](const std::string& name, const Tensor<float>& t) {
        h.update(name);
        h.update(shape_str(t.shape));
        h.update(t.ptr(), t.size() * sizeof(float));
    };
    for (const auto& [name, v] : state.params) add(name, v->value());
    for (const auto& [name, t] : state.buffers) add(name, *t);
    return h.hex();
}

void save_checkpoint(const fs::path& dir, const std::string& kind, const json& meta,
                     const nn::State<float>& state) {
    fs::create_directories(dir);
    json arrays = json::array();
    auto emit = [&](const std::string& name, const Tensor<float>& t, bool trainable) {
        write_array(dir / (name + ".bin"), t);
        arrays.push_back({{"name", name},
                          {"shape", t.shape},
                          {"dtype", "float32"},
                          {"trainable", trainable},
                          {"sha256", array_hash(t)}});
    };
    for (const auto& [name, v] : state.params) emit(name, v->value(), true);
    for (const auto& [name, t] : state.buffers) emit(name, *t, false);
    json manifest = {{"kind", kind},
                     {"format", "diffmark-checkpoint-1"},
                     {"hash", state_hash(state)},
                     {"param_count", state.param_count()},
                     {"meta", meta},
                     {"arrays", arrays}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

bool checkpoint_exists(const fs::path& dir) { return fs::exists(dir / "manifest.json"); }

json read_manifest(const fs::path& dir) {
    if (!checkpoint_exists(dir)) throw DependencyError("", "no checkpoint at " + dir.string());
    return json::parse(read_text(dir / "manifest.json"));
}

json load_checkpoint(const fs::path& dir, const std::string& kind, nn::State<float>& state) {
    json manifest = read_manifest(dir);
    if (manifest.value("kind", "") != kind)
        throw ConfigError("checkpoint at " + dir.string() + " is of kind '" + manifest.value("kind", "") +
                          "', expected '" + kind + "'");
    std::size_t i = 0;
    const auto& arrays = manifest.at("arrays");
    if (arrays.size() != state.params.size() + state.buffers.size())
        throw ShapeError("checkpoint at " + dir.string() + " has a different array count");
    auto load = [&](const std::string& name, Tensor<float>& t) {
        const auto& a = arrays.at(i++);
        if (a.at("name").get<std::string>() != name || a.at("shape").get<Shape>() != t.shape)
            throw ShapeError("checkpoint array mismatch at " + name + " in " + dir.string());
        read_array(dir / (name + ".bin"), t);
    };
    for (auto& [name, v] : state.params) load(name, v->mutable_value());
    for (auto& [name, t] : state.buffers) load(name, *t);
    return manifest;
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
}

std::string read_text(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw DependencyError("", "cannot read " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace diffmark::io

#include "ehrseq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace ehrseq {
namespace {

constexpr char kMagic[8] = {'E', 'H', 'R', 'S', 'E', 'Q', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("truncated checkpoint");
    return v;
}

std::filesystem::path sidecar(const std::filesystem::path& p) { return p.string() + ".json"; }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterList& params, const nlohmann::json& meta) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, params.size());
    for (const auto& p : params) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.shape().size()));
        for (auto d : p.value.shape()) put<std::int64_t>(os, d);
        os.write(reinterpret_cast<const char*>(p.value.data().data()),
                 static_cast<std::streamsize>(p.value.numel() * static_cast<Index>(sizeof(double))));
    }
    std::ofstream js(sidecar(path));
    js << meta.dump(2) << '\n';
}

nlohmann::json read_checkpoint_meta(const std::filesystem::path& path) {
    std::ifstream js(sidecar(path));
    if (!js) throw std::runtime_error("missing checkpoint sidecar for " + path.string());
    return nlohmann::json::parse(js);
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterList& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw std::runtime_error("not a checkpoint: " + path.string());
    }
    if (const auto v = get<std::uint32_t>(is); v != kVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(v));
    }
    std::map<std::string, std::pair<Shape, Eigen::VectorXd>> arrays;
    const auto count = get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name(get<std::uint32_t>(is), '\0');
        is.read(name.data(), static_cast<std::streamsize>(name.size()));
        Shape shape(get<std::uint32_t>(is));
        Index n = 1;
        for (auto& d : shape) n *= (d = get<std::int64_t>(is));
        Eigen::VectorXd data(n);
        if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * static_cast<Index>(sizeof(double))))) {
            throw std::runtime_error("truncated checkpoint");
        }
        arrays.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
    }
    for (auto& p : params) {
        auto it = arrays.find(p.name);
        if (it == arrays.end()) throw std::runtime_error("checkpoint lacks " + p.name);
        if (it->second.first != p.value.shape()) throw std::runtime_error("shape mismatch for " + p.name);
        p.value.mutable_data() = it->second.second;
    }
    return read_checkpoint_meta(path);
}

Snapshot snapshot(const ParameterList& params) {
    Snapshot s;
    s.reserve(params.size());
    for (const auto& p : params) s.push_back(p.value.data());
    return s;
}

void restore(ParameterList& params, const Snapshot& snap) {
    if (snap.size() != params.size()) throw std::logic_error("snapshot size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value.mutable_data() = snap[i];
}

}  // namespace ehrseq

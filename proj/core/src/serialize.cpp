#include "mlcl/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "mlcl/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor file writer assumes a little-endian host");

namespace mlcl {

namespace {

constexpr char kMagic[8] = {'M', 'L', 'C', 'L', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
    auto dir = path.parent_path();
    if (dir.empty()) dir = ".";
    return dir / (path.filename().string() + ".tmp");
}

} // namespace

void TensorFile::put(const std::string& name, Tensor t) {
    if (has(name)) throw IoError("duplicate tensor name: " + name);
    entries_.emplace_back(name, std::move(t));
}

const Tensor& TensorFile::get(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return t;
    }
    throw IoError("tensor not found: " + name);
}

bool TensorFile::has(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return true;
    }
    return false;
}

std::vector<std::string> TensorFile::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [n, t] : entries_) out.push_back(n);
    return out;
}

void TensorFile::save(const std::filesystem::path& path) const {
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : entries_) {
        dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel() * sizeof(double);
    }
    nlohmann::json header = {{"tensors", dir}, {"meta", meta_}};
    std::string header_str = header.dump();

    auto tmp = temp_sibling(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(kMagic, sizeof kMagic);
        write_u32(out, kVersion);
        write_u64(out, header_str.size());
        out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
        for (const auto& [name, t] : entries_) {
            out.write(reinterpret_cast<const char*>(t.data()),
                      static_cast<std::streamsize>(t.numel() * sizeof(double)));
        }
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

TensorFile TensorFile::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8] = {};
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw IoError("not a tensor file: " + path.string());
    }
    std::uint32_t version = read_u32(in);
    if (version != kVersion) {
        throw IoError("unsupported tensor file version " + std::to_string(version));
    }
    std::uint64_t header_len = read_u64(in);
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw IoError("truncated header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad tensor file header: " + std::string(e.what()));
    }

    TensorFile tf;
    tf.meta_ = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw IoError("truncated tensor data for " + name + " in " + path.string());
        tf.entries_.emplace_back(std::move(name), std::move(t));
    }
    return tf;
}

void atomic_write_text(const std::filesystem::path& path, const std::string& content) {
    auto tmp = temp_sibling(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

} // namespace mlcl

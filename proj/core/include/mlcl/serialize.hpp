#ifndef MLCL_SERIALIZE_HPP
#define MLCL_SERIALIZE_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcl/tensor.hpp"

namespace mlcl {

/// Named tensor container backed by a single binary file: an 8-byte magic,
/// a format version, a JSON directory, then raw little-endian float64 data.
/// Saves are atomic (temp file + rename), so readers never see partial files.
class TensorFile {
public:
    void put(const std::string& name, Tensor t);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
    /// Names in insertion order.
    std::vector<std::string> names() const;

    /// Arbitrary JSON metadata stored alongside the tensors.
    nlohmann::json& meta() { return meta_; }
    const nlohmann::json& meta() const { return meta_; }

    void save(const std::filesystem::path& path) const;
    static TensorFile load(const std::filesystem::path& path);

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    nlohmann::json meta_ = nlohmann::json::object();
};

/// Writes content to a temp file in the target directory, then renames over
/// the destination.
void atomic_write_text(const std::filesystem::path& path, const std::string& content);

} // namespace mlcl

#endif

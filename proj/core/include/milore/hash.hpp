#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "milore/tensor.hpp"

namespace milore {

// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);
// Hash of a tensor's shape and raw 64-bit values.
std::string tensor_hash(const Tensor& t);

}  // namespace milore

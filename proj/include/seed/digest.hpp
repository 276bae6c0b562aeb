#ifndef SEED_DIGEST_HPP_
#define SEED_DIGEST_HPP_

#include <filesystem>
#include <string>
#include <string_view>

namespace seed {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace seed

#endif  // SEED_DIGEST_HPP_

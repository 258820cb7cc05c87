#pragma once

#include <filesystem>

#include "gradsae/sae.hpp"
#include "gradsae/toylm.hpp"

// Binary checkpoints: an 8-byte magic, a format version and kind, then the
// configuration and raw little-endian doubles. Loading restores every weight
// bit for bit. Malformed or mismatched files raise IoError naming the path.
namespace gradsae::ckpt {

inline constexpr std::uint32_t kVersion = 1;

void save_lm(const std::filesystem::path& path, const lm::LanguageModel& model);
lm::LanguageModel load_lm(const std::filesystem::path& path);

void save_sae(const std::filesystem::path& path, const sae::SAEParams& sae);
sae::SAEParams load_sae(const std::filesystem::path& path);

}  // namespace gradsae::ckpt

#pragma once

#include <openssl/evp.h>

#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

#include "dcshield/dcmdp.hpp"
#include "dcshield/delay_model.hpp"
#include "dcshield/mdp_io.hpp"

namespace dcshield {

inline std::string sha256_hex(std::string_view data) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
    throw std::runtime_error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

/// Canonical text of a channel: the delay model, or the constant delay and its idle action.
inline std::string channel_text(const DcMdp& dc) {
  if (dc.kind() == DelayKind::random) return delay_model_text(dc.delays());
  return "constant " + std::to_string(dc.tau_max()) + " idle " + std::to_string(dc.safe_action()) + "\n";
}

inline std::string model_digest(const BasicMdp& base, const std::string& channel) {
  return sha256_hex(mdp_text(base) + "--\n" + channel);
}

/// Identity of a delayed product: its base MDP together with its channel.
inline std::string model_digest(const DcMdp& dc) { return model_digest(dc.base(), channel_text(dc)); }

}  // namespace dcshield

#pragma once

#include <string>
#include <string_view>

#include "ice/types.hpp"

namespace ice {

// Lowercased runs of ASCII letters and digits, in order. Every other byte
// separates tokens. Shared by the text index and every text feature so that
// both agree on token boundaries.
TokenList tokenize(std::string_view text);

template <typename Fn>
void for_each_token(std::string_view text, Fn&& fn) {
  std::string token;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    const bool alnum = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
    if (alnum) {
      token.push_back(static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c));
    } else if (!token.empty()) {
      fn(std::string_view(token));
      token.clear();
    }
  }
  if (!token.empty()) fn(std::string_view(token));
}

}  // namespace ice

#include "ice/tokenizer.hpp"

namespace ice {

TokenList tokenize(std::string_view text) {
  TokenList tokens;
  for_each_token(text, [&](std::string_view t) { tokens.emplace_back(t); });
  return tokens;
}

}  // namespace ice

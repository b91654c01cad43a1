#pragma once

// The frozen desk-scale fixture shared by the golden generator and the tests.

#include <cstdint>
#include <vector>

#include "modex/model_graph.hpp"

namespace fixture {

inline constexpr std::uint64_t model_seed = 2024;
inline constexpr double outlier_frac = 0.01;
inline constexpr double outlier_gain = 20.0;
inline constexpr std::uint64_t token_seed = 99;
inline constexpr std::size_t token_count = 512;
inline constexpr std::size_t token_seq_len = 128;
inline constexpr std::size_t golden_logit_tokens = 16;
inline constexpr std::size_t golden_ppl_seq_len = 128;

inline const modex::ModelGraph& model() {
  static const modex::ModelGraph m =
      modex::random_model(modex::fixture_config(), outlier_frac, outlier_gain, model_seed);
  return m;
}

inline const std::vector<std::uint32_t>& tokens() {
  static const std::vector<std::uint32_t> t =
      modex::sample_tokens(model(), token_count, token_seq_len, token_seed);
  return t;
}

}  // namespace fixture

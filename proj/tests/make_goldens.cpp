// Writes tests/data/fixture_golden.json. Run by hand after an intentional
// change to the forward pass; the tests compare against the frozen file.

#include <cstdio>
#include <filesystem>
#include <span>

#include "fixture.hpp"
#include "modex/container.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path out =
      argc > 1 ? std::filesystem::path(argv[1]) : std::filesystem::path("fixture_golden.json");
  const auto& m = fixture::model();
  const auto& toks = fixture::tokens();
  const std::span<const std::uint32_t> head(toks.data(), fixture::golden_logit_tokens);
  const modex::Tensor logits = modex::forward_logits(m, head);

  nlohmann::json j;
  j["tokens"] = toks;
  j["logit_rows"] = logits.rows();
  j["logit_cols"] = logits.cols();
  j["logits"] = logits.storage();
  j["perplexity_seq_len"] = fixture::golden_ppl_seq_len;
  j["perplexity"] = modex::perplexity(m, toks, fixture::golden_ppl_seq_len);
  modex::write_json(out, j);
  std::printf("wrote %s (perplexity %.6f)\n", out.string().c_str(), j["perplexity"].get<double>());
  return 0;
}

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "seed/config.hpp"
#include "seed/errors.hpp"
#include "seed/invariants.hpp"
#include "seed/recipe.hpp"

namespace {

using seed::recipe::RunLayout;

struct Common {
  std::string config_path;
  std::string run_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "key = value config file")->required();
  cmd->add_option("-r,--run", c.run_dir, "run directory")->required();
}

seed::RunConfig load(const Common& c) {
  seed::RunConfig config = seed::load_config(c.config_path);
  seed::validate(config);
  return config;
}

int verify(const std::string& config_path, const std::string& out) {
  seed::RunConfig config;
  if (!config_path.empty()) config = seed::load_config(config_path);
  seed::recipe::DirLock lock(out);
  const auto start = std::chrono::steady_clock::now();
  const auto results = seed::invariants::run_all();
  std::string lines;
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::printf("%-4s %-12s %-28s %7.2fs  %s\n", r.passed ? "ok" : "FAIL", r.suite.c_str(),
                r.name.c_str(), r.seconds, r.detail.c_str());
    nlohmann::ordered_json j;
    j["suite"] = r.suite;
    j["check"] = r.name;
    j["passed"] = r.passed;
    j["detail"] = r.detail;
    lines += j.dump() + "\n";
    failed += !r.passed;
  }
  {
    std::ofstream f(std::filesystem::path(out) / "verify.ndjson", std::ios::trunc);
    f << lines;
  }
  seed::recipe::Manifest m;
  m.command = "verify";
  m.config_digest = seed::config_digest(config);
  m.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  seed::recipe::write_manifest(out, m);
  std::printf("%zu/%zu checks passed\n", results.size() - failed, results.size());
  return failed == 0 ? 0 : static_cast<int>(seed::ExitCode::kContract);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy-scale causal visual tokenizer and multimodal language model"};
  app.require_subcommand(1);

  Common common;
  std::string stage;
  std::string image, out = "out", caption, mode = "free", codes_text;
  std::vector<std::size_t> codes;
  std::size_t count = 4;
  std::uint64_t seed_value = 1;
  std::string compare;

  auto* gen = app.add_subcommand("gen-corpus", "render the toy corpus and frozen embedders");
  add_common(gen, common);
  auto* tq = app.add_subcommand("train-qformer", "stage 1: causal Q-Former, contrastive");
  add_common(tq, common);
  auto* tt = app.add_subcommand("train-tokenizer", "stage 2: codebook and detokenizer");
  add_common(tt, common);
  auto* tl = app.add_subcommand("train-lm", "language model stages");
  add_common(tl, common);
  tl->add_option("--stage", stage, "lora | full | instruct")
      ->required()
      ->check(CLI::IsMember({"lora", "full", "instruct"}));
  auto* tok = app.add_subcommand("tokenize", "image raster to visual codes");
  add_common(tok, common);
  tok->add_option("--image", image, "raster file")->required();
  tok->add_option("-o,--out", out, "output directory");
  auto* detok = app.add_subcommand("detokenize", "visual codes to nearest corpus image");
  add_common(detok, common);
  detok->add_option("--codes", codes, "comma separated code indices")
      ->required()
      ->delimiter(',');
  detok->add_option("-o,--out", out, "output directory");
  auto* genr = app.add_subcommand("generate", "image generation from a caption");
  add_common(genr, common);
  genr->add_option("--caption", caption, "prompt caption")->required();
  genr->add_option("--mode", mode, "free | constrained")
      ->check(CLI::IsMember({"free", "constrained"}));
  genr->add_option("--count", count, "number of samples");
  genr->add_option("--seed", seed_value, "sampling seed");
  genr->add_option("-o,--out", out, "output directory");
  auto* er = app.add_subcommand("eval-retrieval", "R@K from embeddings and from codes");
  add_common(er, common);
  auto* ec = app.add_subcommand("eval-recon", "reference score of reconstructions");
  add_common(ec, common);
  auto* ea = app.add_subcommand("eval-ablation", "two-stage and well-formedness ablations");
  add_common(ea, common);
  ea->add_option("--compare", compare, "second run directory, other attention mode");
  std::string verify_config;
  auto* ver = app.add_subcommand("verify", "run the invariant suite");
  ver->add_option("-c,--config", verify_config, "config file recorded in the manifest");
  ver->add_option("-o,--out", out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(seed::ExitCode::kConfig);
  }

  try {
    if (ver->parsed()) return verify(verify_config, out);
    const seed::RunConfig config = load(common);
    const RunLayout layout{common.run_dir};
    namespace r = seed::recipe;
    std::string summary;
    if (gen->parsed()) summary = r::gen_corpus(layout, config);
    if (tq->parsed()) summary = r::train_qformer(layout, config);
    if (tt->parsed()) summary = r::train_tokenizer(layout, config);
    if (tl->parsed()) summary = r::train_lm(layout, config, r::parse_lm_stage(stage));
    if (tok->parsed()) summary = r::tokenize(layout, config, image, out);
    if (detok->parsed()) summary = r::detokenize(layout, config, codes, out);
    if (genr->parsed()) {
      summary = r::generate(layout, config, caption,
                            mode == "free" ? seed::lm::GenerationMode::free
                                           : seed::lm::GenerationMode::image_constrained,
                            count, seed_value, out);
    }
    if (er->parsed()) summary = r::eval_retrieval(layout, config);
    if (ec->parsed()) summary = r::eval_recon(layout, config);
    if (ea->parsed()) {
      summary = r::eval_ablation(layout, config,
                                 compare.empty() ? std::nullopt
                                                 : std::optional<std::filesystem::path>(compare));
    }
    std::cout << summary << (summary.ends_with('\n') ? "" : "\n");
    return 0;
  } catch (const seed::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    if (!e.snapshot_path().empty()) std::cerr << "diagnostic snapshot: " << e.snapshot_path() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const seed::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(seed::ExitCode::kConfig);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(seed::ExitCode::kContract);
  }
}

#include "seed/invariants.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>

#include "seed/checkpoint.hpp"
#include "seed/config.hpp"
#include "seed/digest.hpp"
#include "seed/errors.hpp"
#include "seed/fd_check.hpp"
#include "seed/lm.hpp"
#include "seed/ops.hpp"
#include "seed/qformer.hpp"
#include "seed/tokenizer.hpp"

namespace seed::invariants {
namespace {

using Verdict = std::pair<bool, std::string>;

constexpr double kFdTolerance = 1e-3;
constexpr std::size_t kCausalTrials = 200;
constexpr std::size_t kOracleTrials = 1000;

CheckResult timed(const std::string& suite, const std::string& name,
                  const std::function<Verdict()>& body) {
  const auto start = std::chrono::steady_clock::now();
  CheckResult r;
  r.suite = suite;
  r.name = name;
  try {
    std::tie(r.passed, r.detail) = body();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("threw: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

Verdict fd_verdict(const FdCheckResult& r) {
  std::string detail = "max rel err " + fmt(r.max_relative_error) + " over " +
                       std::to_string(r.coordinates) + " coords";
  if (!r.worst_param.empty()) detail += ", worst " + r.worst_param;
  return {r.max_relative_error < kFdTolerance, detail};
}

QFormer noisy_qformer(std::size_t Q, std::uint64_t seed) {
  Rng rng(seed);
  const QFormerShape shape{.num_queries = Q, .dim = 8, .layers = 2, .heads = 2,
                           .d_patch = 6, .d_ref = 4};
  QFormer m = QFormer::create(shape, 0.07, rng);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (auto& p : m.parameters()) {
    if (p.name.ends_with(".gain") || p.name.ends_with(".bias")) {
      for (auto& v : p.tensor.mutable_data()) v += noise(rng);
    }
  }
  return m;
}

RunConfig tiny_tokenizer_config() {
  RunConfig c;
  c.num_queries = 4;
  c.qformer_dim = 16;
  c.qformer_heads = 2;
  c.qformer_layers = 1;
  c.d_patch = 16;
  c.d_ref = 8;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.gen_hidden = 32;
  c.codebook_size = 16;
  return c;
}

constexpr std::size_t kLmQ = 4;
constexpr std::size_t kLmCodes = 12;

RunConfig tiny_lm_config() {
  RunConfig c;
  c.num_queries = kLmQ;
  c.codebook_size = kLmCodes;
  c.lm_dim = 16;
  c.lm_heads = 2;
  c.lm_layers = 2;
  c.max_len = 32;
  return c;
}

lm::LanguageModel adapted_lm(std::uint64_t seed) {
  Rng rng(seed);
  lm::LanguageModel m = lm::LanguageModel::create(
      tiny_lm_config(), {data::TextVocab::size(), kLmCodes}, rng);
  m.attach_lora(2, 4.0, rng);
  // Fresh adapters are a no-op; give them something to carry.
  for (const auto& p : m.lora_parameters()) {
    if (!p.name.ends_with(".lora_b")) continue;
    const Tensor r = randn(p.tensor.shape(), 0.3, rng);
    std::copy(r.data().begin(), r.data().end(), p.tensor.mutable_data().begin());
  }
  return m;
}

struct LmFixture {
  data::Corpus corpus;
  lm::CodeTable codes;
};

const LmFixture& lm_fixture() {
  static const LmFixture f = [] {
    LmFixture f;
    f.corpus = data::make_corpus(7, 96);
    Rng rng(3);
    std::uniform_int_distribution<std::size_t> code(0, kLmCodes - 1);
    for (std::size_t i = 0; i < f.corpus.samples.size(); ++i) {
      VisualCodes c(kLmQ);
      for (auto& x : c) x = code(rng);
      f.codes.push_back(c);
    }
    return f;
  }();
  return f;
}

std::vector<std::size_t> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, vocab - 1);
  std::vector<std::size_t> ids(n);
  for (auto& id : ids) id = pick(rng);
  return ids;
}

std::size_t brute_force_argmin(const Tensor& x, std::size_t row, const Tensor& codes) {
  std::size_t best = 0;
  long double best_d = -1;
  for (std::size_t k = 0; k < codes.rows(); ++k) {
    long double d = 0;
    for (std::size_t c = 0; c < codes.cols(); ++c) {
      const long double diff = static_cast<long double>(x.at(row, c)) - codes.at(k, c);
      d += diff * diff;
    }
    if (best_d < 0 || d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace

std::vector<CheckResult> gradient_checks() {
  std::vector<CheckResult> out;
  out.push_back(timed("gradients", "contrastive", [] {
    PrecisionScope f64(Precision::f64);
    QFormer m = noisy_qformer(3, 31);
    const std::size_t B = 4;
    Rng rng(33);
    const Tensor patches = randn({B * 5, 6}, 1.0, rng);
    const Tensor text = ops::l2_normalize(randn({B, 4}, 1.0, rng));
    m.temperature.mutable_data()[0] = 0.5;
    return fd_verdict(fd_check(
        [&] {
          return contrastive_loss(m.project(m.forward(patches, B, AttentionMode::causal), B),
                                  text, m.temperature);
        },
        m.parameters(), 1e-5, 7, 8));
  }));

  const auto detok_check = [](bool reconstruction) {
    return [reconstruction] {
      PrecisionScope f64(Precision::f64);
      bool ok = true;
      std::string detail;
      for (auto mode : {GenInput::flatten, GenInput::mean}) {
        RunConfig cfg = tiny_tokenizer_config();
        cfg.gen_input = mode;
        Rng rng(7);
        const Detokenizer det = Detokenizer::create(cfg, rng);
        const Tensor q = randn({2 * 4, 16}, 1.0, rng);
        const Tensor ce = randn({2 * 4, 16}, 1.0, rng);
        const Tensor ref = ops::l2_normalize(randn({2, 8}, 1.0, rng));
        const auto r = reconstruction
                           ? fd_check([&] { return recon_loss(det.reconstruct(q, 2), ce); },
                                      det.parameters(), 1e-5, 1, 8)
                           : fd_check([&] { return gen_loss(det.generation_embed(q, 2), ref); },
                                      det.parameters(), 1e-5, 2, 8);
        const auto [pass, text] = fd_verdict(r);
        ok = ok && pass;
        if (!detail.empty()) detail += "; ";
        detail += (mode == GenInput::flatten ? "flatten: " : "mean: ") + text;
      }
      return Verdict{ok, detail};
    };
  };
  out.push_back(timed("gradients", "reconstruction", detok_check(true)));
  out.push_back(timed("gradients", "generation_mse", detok_check(false)));

  const auto lm_check = [](bool instruction) {
    return [instruction] {
      PrecisionScope f64(Precision::f64);
      const auto& f = lm_fixture();
      const lm::LanguageModel m = adapted_lm(10);
      nn::ParamList sampled = m.lora_parameters();
      m.head.collect("lm.head", sampled);
      sampled.push_back({"lm.embed", m.embed});
      std::vector<lm::MultimodalSequence> seqs;
      if (instruction) {
        seqs = {lm::caption_instruction(f.corpus.samples[3], f.codes[3], m.vocab),
                lm::generation_instruction(f.corpus.samples[4], f.codes[4], m.vocab)};
      } else {
        seqs = lm::pack_all(data::make_interleaved_docs(f.corpus, 6, 3, 1, 2), f.corpus, f.codes,
                            m.vocab, 32);
      }
      return fd_verdict(fd_check([&] { return lm::lm_loss(m, seqs); }, sampled, 1e-5,
                                 instruction ? 4 : 3, 6));
    };
  };
  out.push_back(timed("gradients", "lm", lm_check(false)));
  out.push_back(timed("gradients", "instruction", lm_check(true)));
  return out;
}

std::vector<CheckResult> causality_checks() {
  std::vector<CheckResult> out;
  out.push_back(timed("causality", "qformer_query_suffix", [] {
    const std::size_t Q = 5, d = 8, B = 2;
    Rng trial_rng(11);
    for (std::size_t trial = 0; trial < kCausalTrials; ++trial) {
      QFormer m = noisy_qformer(Q, 100 + trial);
      Rng rng(200 + trial);
      const Tensor patches = randn({B * 7, 6}, 1.0, rng);
      const Tensor before = m.forward(patches, B, AttentionMode::causal);
      const std::size_t j = 1 + trial_rng() % (Q - 1);
      std::normal_distribution<double> noise(0.0, 0.5);
      for (std::size_t i = j; i < Q; ++i) {
        for (std::size_t c = 0; c < d; ++c) m.queries.mutable_data()[i * d + c] += noise(trial_rng);
      }
      const Tensor after = m.forward(patches, B, AttentionMode::causal);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t offset = b * Q * d;
        if (std::memcmp(before.data().data() + offset, after.data().data() + offset,
                        j * d * sizeof(double)) != 0) {
          return Verdict{false, "prefix changed in trial " + std::to_string(trial)};
        }
      }
    }
    return Verdict{true, std::to_string(kCausalTrials) + " trials bit-identical"};
  }));
  out.push_back(timed("causality", "lm_token_suffix", [] {
    const lm::LanguageModel m = adapted_lm(8);
    const std::size_t V = m.vocab.size();
    Rng rng(9);
    std::uniform_int_distribution<std::size_t> len(2, 32);
    for (std::size_t trial = 0; trial < kCausalTrials; ++trial) {
      const std::size_t n = len(rng);
      const auto ids = random_ids(n, V, rng);
      const std::size_t t = std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
      auto changed = ids;
      const auto fresh = random_ids(n - t, V, rng);
      std::copy(fresh.begin(), fresh.end(), changed.begin() + static_cast<std::ptrdiff_t>(t));
      const Tensor a = m.logits(ids, 1), b = m.logits(changed, 1);
      if (std::memcmp(a.data().data(), b.data().data(), t * V * sizeof(double)) != 0) {
        return Verdict{false, "prefix changed in trial " + std::to_string(trial)};
      }
    }
    return Verdict{true, std::to_string(kCausalTrials) + " trials bit-identical"};
  }));
  return out;
}

std::vector<CheckResult> quantizer_checks() {
  std::vector<CheckResult> out;
  out.push_back(timed("quantizer", "exhaustive_oracle", [] {
    Rng rng(3);
    std::uniform_int_distribution<std::size_t> k_dist(2, 40), d_dist(1, 12);
    for (std::size_t trial = 0; trial < kOracleTrials; ++trial) {
      const std::size_t K = k_dist(rng), d = d_dist(rng);
      const Tensor codes = randn({K, d}, 1.0, rng);
      const Tensor x = randn({3, d}, 1.0, rng);
      const auto got = nearest_codes(x, codes);
      for (std::size_t r = 0; r < 3; ++r) {
        if (got[r] != brute_force_argmin(x, r, codes)) {
          return Verdict{false, "mismatch in trial " + std::to_string(trial)};
        }
      }
    }
    return Verdict{true, std::to_string(kOracleTrials) + " instances exact"};
  }));
  out.push_back(timed("quantizer", "tie_break", [] {
    const Tensor codes = Tensor::matrix(4, 2, {-1, -1, 1, 1, -1, -1, 1, 1});
    const Tensor x = Tensor::matrix(3, 2, {0.9, 1.1, -0.8, -1.0, 0.0, 0.0});
    const auto got = nearest_codes(x, codes);
    const bool ok = got[0] == 1 && got[1] == 0 && got[2] == 0;
    return Verdict{ok, ok ? "duplicates resolve to lowest index" : "wrong tie-break"};
  }));
  return out;
}

std::vector<CheckResult> masking_checks() {
  std::vector<CheckResult> out;
  out.push_back(timed("masking", "non_answer_logit_gradient", [] {
    PrecisionScope f64(Precision::f64);
    const auto& f = lm_fixture();
    const lm::LanguageModel m = adapted_lm(4);
    std::vector<lm::MultimodalSequence> seqs;
    for (std::size_t i = 0; i < 8; ++i) {
      seqs.push_back(lm::caption_instruction(f.corpus.samples[i], f.codes[i], m.vocab));
      seqs.push_back(lm::generation_instruction(f.corpus.samples[i], f.codes[i], m.vocab));
    }
    const lm::Batch b = lm::collate(seqs, m.vocab);
    const lm::Targets t = lm::shift_targets(b);
    Tensor logits = m.logits(b.ids, b.batch).detach();
    logits.set_requires_grad(true);
    Tape tape(Precision::f64);
    {
      TapeScope scope(tape);
      tape.backward(ops::cross_entropy(logits, t.ids, t.weights));
    }
    const std::size_t V = m.vocab.size();
    std::size_t zero_rows = 0;
    for (std::size_t r = 0; r < t.ids.size(); ++r) {
      if (t.weights[r] != 0.0) continue;
      for (std::size_t j = 0; j < V; ++j) {
        if (logits.grad()[r * V + j] != 0.0) {
          return Verdict{false, "nonzero gradient at masked row " + std::to_string(r)};
        }
      }
      ++zero_rows;
    }
    return Verdict{zero_rows > 0, std::to_string(zero_rows) + " masked rows exactly zero"};
  }));
  return out;
}

std::vector<CheckResult> lora_checks() {
  std::vector<CheckResult> out;
  out.push_back(timed("lora", "merge_preserves_logits", [] {
    const lm::LanguageModel adapted = adapted_lm(11);
    lm::LanguageModel merged = adapted.clone();
    merged.merge_lora();
    Rng rng(12);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
      const auto ids = random_ids(1 + trial % 32, adapted.vocab.size(), rng);
      const Tensor a = adapted.logits(ids, 1), b = merged.logits(ids, 1);
      for (std::size_t i = 0; i < a.numel(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
      }
    }
    return Verdict{worst <= 1e-5 && !merged.has_lora(), "max |delta logit| " + fmt(worst)};
  }));
  return out;
}

std::vector<CheckResult> persistence_checks() {
  std::vector<CheckResult> out;
  out.push_back(timed("persistence", "checkpoint_round_trip", [] {
    const RunConfig c = tiny_tokenizer_config();
    Rng rng(5);
    Checkpoint ckpt = stage_checkpoint(c, "verify", "");
    data::ReferenceEmbedder::create(c.embedder_seed, c.d_ref).store(ckpt);
    PatchEmbedder::create(c.embedder_seed, c.image_size, c.patch_size, c.d_patch).store(ckpt);
    QFormer::create(QFormerShape::from(c), c.temperature_init, rng).store(ckpt);
    Codebook::create(c.codebook_size, c.qformer_dim, rng).store(ckpt);
    Detokenizer::create(c, rng).store(ckpt);
    adapted_lm(6).store(ckpt);
    const std::string bytes = serialize_checkpoint(ckpt);

    const Checkpoint loaded = deserialize_checkpoint(bytes);
    Checkpoint again;
    again.metadata = loaded.metadata;
    data::ReferenceEmbedder::load(loaded).store(again);
    PatchEmbedder::load(loaded).store(again);
    QFormer::load(loaded, QFormerShape::from(c)).store(again);
    Codebook::load(loaded).store(again);
    Detokenizer::load(loaded, c).store(again);
    lm::LanguageModel::load(loaded, tiny_lm_config()).store(again);
    if (serialize_checkpoint(again) != bytes) return Verdict{false, "in-memory bytes differ"};

    const auto dir = std::filesystem::temp_directory_path() /
                     ("seed_verify_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(dir);
    save_checkpoint(loaded, dir / "a.ckpt");
    save_checkpoint(load_checkpoint(dir / "a.ckpt"), dir / "b.ckpt");
    const bool same = sha256_file(dir / "a.ckpt") == sha256_file(dir / "b.ckpt") &&
                      sha256_file(dir / "a.ckpt") == sha256_hex(bytes);
    std::filesystem::remove_all(dir);
    return Verdict{same, same ? std::to_string(loaded.entries.size()) + " entries bit-exact"
                                : "file bytes differ"};
  }));
  out.push_back(timed("persistence", "config_round_trip", [] {
    RunConfig c;
    c.attention_mode = AttentionMode::bilateral;
    c.lora_alpha = 6.5;
    c.precision = Precision::f64;
    const RunConfig back = parse_config(serialize_config(c));
    bool rejected = false;
    try {
      parse_config("no_such_key = 1\n");
    } catch (const ConfigError&) {
      rejected = true;
    }
    const bool ok = config_digest(back) == config_digest(c) && rejected;
    return Verdict{ok, ok ? "digest stable, unknown keys rejected" : "round trip failed"};
  }));
  return out;
}

std::vector<CheckResult> run_all() {
  std::vector<CheckResult> all;
  for (auto suite : {gradient_checks, causality_checks, quantizer_checks, masking_checks,
                     lora_checks, persistence_checks}) {
    for (auto& r : suite()) all.push_back(std::move(r));
  }
  return all;
}

}  // namespace seed::invariants

#include "seed/tokenizer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "seed/errors.hpp"
#include "seed/ops.hpp"

namespace seed {

namespace {

constexpr std::uint64_t kStage2Tag = 0x5747e2;

Tensor rows_of(const Tensor& table, const VisualCodes& ids) {
  return ops::select_rows(table, ids);
}

}  // namespace

Codebook Codebook::create(std::size_t size, std::size_t dim, Rng& rng) {
  if (size < 1) throw ConfigError("codebook needs at least one code");
  Codebook cb;
  cb.codes = randn({size, dim}, 1.0, rng);
  cb.ema_counts.assign(size, 0.0);
  cb.ema_sums.assign(size * dim, 0.0);
  return cb;
}

void Codebook::accumulate(const Tensor& x, const VisualCodes& assignment) {
  const std::size_t d = dim();
  if (x.cols() != d || x.rows() != assignment.size()) {
    throw ConfigError("codebook accumulate: " + shape_string(x.shape()) + " vs " +
                      std::to_string(assignment.size()) + " assignments");
  }
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const std::size_t k = assignment[i];
    ema_counts[k] += 1.0;
    for (std::size_t c = 0; c < d; ++c) ema_sums[k * d + c] += x[i * d + c];
  }
}

void Codebook::decay(double rate) {
  const std::size_t d = dim();
  auto w = codes.mutable_data();
  for (std::size_t k = 0; k < size(); ++k) {
    ema_counts[k] *= rate;
    for (std::size_t c = 0; c < d; ++c) ema_sums[k * d + c] *= rate;
    if (ema_counts[k] <= 1e-12) continue;
    for (std::size_t c = 0; c < d; ++c) {
      w[k * d + c] = round_to_precision(ema_sums[k * d + c] / ema_counts[k]);
    }
  }
}

void Codebook::revive(std::size_t k, std::span<const double> value) {
  const std::size_t d = dim();
  auto w = codes.mutable_data();
  for (std::size_t c = 0; c < d; ++c) {
    w[k * d + c] = value[c];
    ema_sums[k * d + c] = 0.0;
  }
  ema_counts[k] = 0.0;
}

void Codebook::store(Checkpoint& ckpt) const {
  ckpt.add("codebook.codes", codes);
  ckpt.add("codebook.ema_counts", Tensor({size()}, ema_counts));
  ckpt.add("codebook.ema_sums", Tensor({size(), dim()}, ema_sums));
}

Codebook Codebook::load(const Checkpoint& ckpt) {
  Codebook cb;
  cb.codes = ckpt.get("codebook.codes").clone();
  const auto counts = ckpt.get("codebook.ema_counts").data();
  const auto sums = ckpt.get("codebook.ema_sums").data();
  cb.ema_counts.assign(counts.begin(), counts.end());
  cb.ema_sums.assign(sums.begin(), sums.end());
  if (cb.ema_counts.size() != cb.size() || cb.ema_sums.size() != cb.codes.numel()) {
    throw LoadError("codebook accumulators do not match the code table");
  }
  return cb;
}

VisualCodes nearest_codes(const Tensor& x, const Tensor& codes, CodebookDistance distance) {
  const std::size_t n = x.rows(), K = codes.rows(), d = codes.cols();
  if (x.cols() != d) {
    throw ConfigError("quantize: embeddings " + shape_string(x.shape()) + " vs codebook " +
                      shape_string(codes.shape()));
  }
  std::vector<double> code_norm(K, 1.0);
  if (distance == CodebookDistance::cosine) {
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += codes[k * d + c] * codes[k * d + c];
      code_norm[k] = std::sqrt(std::max(s, 1e-300));
    }
  }
  VisualCodes out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data().data() + i * d;
    std::size_t best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      const double* ck = codes.data().data() + k * d;
      double score = 0.0;
      if (distance == CodebookDistance::euclidean) {
        for (std::size_t c = 0; c < d; ++c) score += (xi[c] - ck[c]) * (xi[c] - ck[c]);
      } else {
        for (std::size_t c = 0; c < d; ++c) score -= xi[c] * ck[c];
        score /= code_norm[k];
      }
      if (score < best_score) {
        best_score = score;
        best = k;
      }
    }
    out[i] = best;
  }
  return out;
}

Quantized quantize(const Tensor& x, const Codebook& codebook, CodebookDistance distance) {
  Quantized q;
  q.codes = nearest_codes(x, codebook.codes, distance);
  q.values = ops::straight_through(x, rows_of(codebook.codes.detach(), q.codes));
  return q;
}

Detokenizer Detokenizer::create(const RunConfig& config, Rng& rng) {
  const std::size_t Q = config.num_queries, d = config.qformer_dim;
  Detokenizer t;
  t.num_queries = Q;
  t.gen_input = config.gen_input;
  t.positions = randn({Q, d}, 0.5, rng, true);
  for (std::size_t l = 0; l < config.decoder_layers; ++l) {
    t.blocks.push_back(nn::SelfBlock::create(d, config.decoder_heads, 4 * d, rng));
  }
  t.ln_out = nn::LayerNorm::create(d);
  t.out = nn::Linear::create(d, d, rng);
  const std::size_t gen_in = config.gen_input == GenInput::flatten ? Q * d : d;
  t.gen_up = nn::Linear::create(gen_in, config.gen_hidden, rng);
  t.gen_down = nn::Linear::create(config.gen_hidden, config.d_ref, rng);
  return t;
}

Tensor Detokenizer::reconstruct(const Tensor& quantized, std::size_t batch) const {
  const std::size_t Q = num_queries;
  if (quantized.rows() != batch * Q) {
    throw ConfigError("reconstruct: expected " + std::to_string(batch * Q) + " rows, got " +
                      std::to_string(quantized.rows()));
  }
  std::vector<std::size_t> pos(batch * Q);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % Q;
  Tensor h = ops::add(quantized, ops::select_rows(positions, pos));
  for (const auto& b : blocks) h = b(h, {}, batch, Q);
  return out(ln_out(h));
}

Tensor Detokenizer::generation_embed(const Tensor& quantized, std::size_t batch) const {
  const std::size_t Q = num_queries, d = quantized.cols();
  if (quantized.rows() != batch * Q) {
    throw ConfigError("generation_embed: expected " + std::to_string(batch * Q) + " rows");
  }
  Tensor in;
  if (gen_input == GenInput::flatten) {
    in = ops::reshape(quantized, {batch, Q * d});
  } else {
    std::vector<double> avg(batch * batch * Q, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < Q; ++i) avg[b * batch * Q + b * Q + i] = 1.0 / static_cast<double>(Q);
    }
    in = ops::matmul(Tensor::matrix(batch, batch * Q, std::move(avg)), quantized);
  }
  return ops::l2_normalize(gen_down(ops::gelu(gen_up(in))));
}

nn::ParamList Detokenizer::parameters() const {
  nn::ParamList p;
  p.push_back({"detok.positions", positions});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].collect("detok.block" + std::to_string(l), p);
  }
  ln_out.collect("detok.ln_out", p);
  out.collect("detok.out", p);
  gen_up.collect("detok.gen_up", p);
  gen_down.collect("detok.gen_down", p);
  return p;
}

void Detokenizer::store(Checkpoint& ckpt) const { store_parameters(ckpt, parameters()); }

Detokenizer Detokenizer::load(const Checkpoint& ckpt, const RunConfig& config) {
  Rng rng(0);
  Detokenizer t = create(config, rng);
  restore_parameters(ckpt, t.parameters());
  return t;
}

Tensor recon_loss(const Tensor& output, const Tensor& target) {
  return ops::sub(Tensor::scalar(1.0), ops::mean(ops::cosine_similarity(output, target)));
}

Tensor gen_loss(const Tensor& generated, const Tensor& target) {
  return ops::mse_loss(generated, target);
}

double perplexity(std::span<const std::size_t> usage) {
  double total = 0.0;
  for (auto u : usage) total += static_cast<double>(u);
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto u : usage) {
    if (u == 0) continue;
    const double p = static_cast<double>(u) / total;
    h -= p * std::log(p);
  }
  return std::exp(h);
}

std::string stage2_metrics_line(const Stage2Epoch& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["loss"] = m.loss;
  j["recon"] = m.recon;
  j["gen"] = m.gen;
  j["commit"] = m.commit;
  j["perplexity"] = m.perplexity;
  j["revived"] = m.revived;
  j["val_recon_cosine"] = m.val_recon_cosine;
  j["val_reference_score"] = m.val_reference_score;
  j["collapse_warning"] = m.collapse_warning;
  return j.dump();
}

namespace {

Tensor stack_rows(const std::vector<Tensor>& per_item, std::span<const std::size_t> items) {
  return stack_grids(per_item, items);
}

struct ValScores {
  double recon_cosine = 0.0;
  double reference_score = 0.0;
};

ValScores score(const std::vector<Tensor>& ce, const std::vector<std::vector<double>>& ref,
                std::span<const std::size_t> items, const Codebook& cb,
                const Detokenizer& detok, CodebookDistance distance) {
  ValScores s;
  if (items.empty()) return s;
  const Tensor x = stack_rows(ce, items);
  const Quantized q = quantize(x, cb, distance);
  const Tensor rec = detok.reconstruct(q.values, items.size());
  s.recon_cosine = ops::mean(ops::cosine_similarity(rec, x)).item();
  const Tensor gen = detok.generation_embed(q.values, items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    double dot = 0.0;
    for (std::size_t c = 0; c < gen.cols(); ++c) dot += gen.at(i, c) * ref[items[i]][c];
    s.reference_score += dot;
  }
  s.reference_score /= static_cast<double>(items.size());
  return s;
}

void store_stage2(Checkpoint& ckpt, const Stage2Result& r, bool tuned) {
  r.codebook.store(ckpt);
  r.detokenizer.store(ckpt);
  if (tuned) r.qformer.store(ckpt);
}

}  // namespace

Stage2Result train_stage2(const data::Corpus& corpus, const data::ReferenceEmbedder& embedder,
                          const PatchEmbedder& patches, const QFormer& qformer,
                          const RunConfig& config, const StageOutput& output,
                          const Stage2Options& options) {
  const auto train = corpus.indices(data::Split::train);
  const auto val = corpus.indices(data::Split::val);
  if (train.empty()) throw ContractViolation("stage 2 needs training images");
  PrecisionScope precision(config.precision);
  const std::size_t Q = config.num_queries, d = config.qformer_dim;
  const std::size_t n_items = corpus.samples.size();

  std::vector<Tensor> grids;
  std::vector<std::vector<double>> ref;
  for (const auto& s : corpus.samples) {
    grids.push_back(patches.encode(s.image));
    ref.push_back(embedder.embed_image(s.image));
  }

  Stage2Result result;
  result.qformer = qformer;
  if (config.tune_qformer) {
    // Own copy of the weights so the caller's model stays untouched.
    Rng unused(0);
    result.qformer = QFormer::create(qformer.shape, config.temperature_init, unused);
    const auto src = qformer.parameters();
    const auto dst = result.qformer.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(),
                dst[i].tensor.mutable_data().begin());
    }
  }
  const QFormer& encoder = result.qformer;

  // Causal embeddings of every image under the (initial) encoder.
  std::vector<Tensor> ce(n_items);
  {
    std::vector<std::size_t> all(n_items);
    std::iota(all.begin(), all.end(), 0);
    const Tensor block = embed_items(encoder, grids, all, config.attention_mode);
    for (std::size_t i = 0; i < n_items; ++i) ce[i] = ops::slice_rows(block, i * Q, Q).detach();
  }

  Rng rng(mix_seed(config.seed, kStage2Tag));
  result.codebook = options.initial_codebook ? *options.initial_codebook
                                             : Codebook::create(config.codebook_size, d, rng);
  if (options.initial_codebook) result.codebook.codes = options.initial_codebook->codes.clone();
  result.detokenizer = Detokenizer::create(config, rng);
  Codebook& cb = result.codebook;
  const Detokenizer& detok = result.detokenizer;
  {
    std::vector<std::size_t> usage(cb.size(), 0);
    for (auto c : nearest_codes(stack_rows(ce, train), cb.codes, config.codebook_distance)) ++usage[c];
    result.initial_perplexity = perplexity(usage);
  }

  const bool loss_update = config.codebook_update == CodebookUpdate::loss;
  auto params = detok.parameters();
  if (config.tune_qformer) {
    for (auto& p : encoder.parameters()) {
      if (p.name != "qformer.temperature" && !p.name.starts_with("qformer.projection")) {
        params.push_back(p);
      }
    }
  }
  if (loss_update) {
    cb.codes.set_requires_grad(true);
    params.push_back({"codebook.codes", cb.codes});
  }
  AdamW opt(optimizer_slots(params), adam_options(config));

  const std::size_t B = std::max<std::size_t>(1, config.stage2_batch);
  const std::size_t total = ((train.size() + B - 1) / B) * config.stage2_epochs;
  if (!output.dir.empty()) {
    std::filesystem::create_directories(output.dir);
    std::filesystem::remove(output.dir / "stage2_metrics.ndjson");
  }

  std::size_t step = 0, low_epochs = 0;
  for (std::size_t epoch = 1; epoch <= config.stage2_epochs; ++epoch) {
    const auto order = epoch_order(train, config.seed, kStage2Tag, epoch);
    std::vector<std::size_t> usage(cb.size(), 0);
    Tensor last_batch;
    Stage2Epoch m;
    m.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += B) {
      const std::size_t n = std::min(B, order.size() - s);
      const std::span<const std::size_t> batch(order.data() + s, n);
      Tape tape(config.precision);
      TapeScope scope(tape);
      const Tensor x = config.tune_qformer
                           ? encoder.forward(stack_grids(grids, batch), n, config.attention_mode)
                           : stack_rows(ce, batch);
      const VisualCodes codes = nearest_codes(x, cb.codes, config.codebook_distance);
      const Tensor selected = loss_update ? ops::embedding(cb.codes, codes)
                                          : rows_of(cb.codes.detach(), codes);
      const Tensor values = ops::straight_through(x, selected.detach());
      const Tensor target = x.detach();
      std::vector<double> ref_rows;
      for (auto i : batch) ref_rows.insert(ref_rows.end(), ref[i].begin(), ref[i].end());
      const Tensor ref_batch({n, ref[0].size()}, std::move(ref_rows));

      const Tensor l_recon = recon_loss(detok.reconstruct(values, n), target);
      const Tensor l_gen = gen_loss(detok.generation_embed(values, n), ref_batch);
      const Tensor l_commit = ops::mse_loss(x, selected.detach());
      Tensor loss = ops::add(ops::add(l_recon, ops::scale(l_gen, config.lambda_gen)),
                             ops::scale(l_commit, config.beta));
      if (loss_update) loss = ops::add(loss, ops::mse_loss(target, selected));
      if (!std::isfinite(loss.item())) raise_nonfinite(output, "stage2", epoch, step, batch, loss.item());
      opt.zero_grad();
      tape.backward(loss);
      opt.step(cosine_lr(step, total, config.stage2_lr, config.warmup_ratio));
      if (!loss_update) {
        cb.accumulate(target, codes);
        cb.decay(config.ema_decay);
      }
      for (auto c : codes) ++usage[c];
      last_batch = target;
      m.loss += loss.item();
      m.recon += l_recon.item();
      m.gen += l_gen.item();
      m.commit += l_commit.item();
      ++batches;
      ++step;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
    m.loss /= nb;
    m.recon /= nb;
    m.gen /= nb;
    m.commit /= nb;
    m.perplexity = perplexity(usage);

    if (config.tune_qformer) {
      std::vector<std::size_t> all(n_items);
      std::iota(all.begin(), all.end(), 0);
      const Tensor block = embed_items(encoder, grids, all, config.attention_mode);
      for (std::size_t i = 0; i < n_items; ++i) ce[i] = ops::slice_rows(block, i * Q, Q).detach();
    }
    if (last_batch.defined()) {
      std::uniform_int_distribution<std::size_t> pick(0, last_batch.rows() - 1);
      for (std::size_t k = 0; k < cb.size(); ++k) {
        if (usage[k] >= config.dead_code_threshold) continue;
        const std::size_t r = pick(rng);
        cb.revive(k, last_batch.data().subspan(r * d, d));
        ++m.revived;
      }
    }

    low_epochs = m.perplexity < 2.0 ? low_epochs + 1 : 0;
    if (low_epochs >= 3) {
      m.collapse_warning = true;
      if (config.strict) {
        throw NumericError("codebook collapse: perplexity " + std::to_string(m.perplexity) +
                           " below 2 for 3 consecutive epochs");
      }
      std::cerr << "warning: codebook perplexity " << m.perplexity
                << " below 2 for 3 consecutive epochs\n";
    }

    const auto v = score(ce, ref, val, cb, detok, config.codebook_distance);
    m.val_recon_cosine = v.recon_cosine;
    m.val_reference_score = v.reference_score;
    result.metrics.push_back(m);
    if (!output.dir.empty()) {
      append_line(output.dir / "stage2_metrics.ndjson", stage2_metrics_line(m));
      Checkpoint ckpt = stage_checkpoint(config, "stage2", output.parent_digest);
      ckpt.metadata["epoch"] = std::to_string(epoch);
      store_stage2(ckpt, result, config.tune_qformer);
      save_checkpoint(ckpt, output.dir / epoch_checkpoint_name("tokenizer", epoch));
    }
  }
  cb.codes.set_requires_grad(false);
  return result;
}

Gallery Gallery::build(const data::ReferenceEmbedder& embedder, const data::Corpus& corpus,
                       std::span<const std::size_t> items) {
  Gallery g;
  for (auto i : items) {
    g.ids.push_back(i);
    g.embeddings.push_back(embedder.embed_image(corpus.samples.at(i).image));
  }
  return g;
}

VisualCodes Pipeline::tokenize(const data::ToyImage& image) const {
  PrecisionScope precision(config.precision);
  const Tensor ce = qformer.forward(patches.encode(image), 1, config.attention_mode);
  return nearest_codes(ce, codebook.codes, config.codebook_distance);
}

std::vector<VisualCodes> Pipeline::tokenize_all(const data::Corpus& corpus,
                                                std::span<const std::size_t> items) const {
  PrecisionScope precision(config.precision);
  std::vector<Tensor> grids(corpus.samples.size());
  for (auto i : items) grids[i] = patches.encode(corpus.samples.at(i).image);
  const Tensor ce = embed_items(qformer, grids, items, config.attention_mode);
  const VisualCodes flat = nearest_codes(ce, codebook.codes, config.codebook_distance);
  const std::size_t Q = config.num_queries;
  std::vector<VisualCodes> out(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    out[i].assign(flat.begin() + static_cast<std::ptrdiff_t>(i * Q),
                  flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * Q));
  }
  return out;
}

Tensor Pipeline::code_values(const VisualCodes& codes) const {
  for (auto c : codes) {
    if (c >= codebook.size()) {
      throw ContractViolation("code " + std::to_string(c) + " outside codebook of " +
                              std::to_string(codebook.size()));
    }
  }
  return rows_of(codebook.codes.detach(), codes);
}

Detokenized Pipeline::detokenize(const VisualCodes& codes, const Gallery& gallery) const {
  if (gallery.ids.empty()) throw ContractViolation("detokenize: empty gallery");
  if (codes.size() != config.num_queries) {
    throw ContractViolation("detokenize: expected " + std::to_string(config.num_queries) +
                            " codes, got " + std::to_string(codes.size()));
  }
  PrecisionScope precision(config.precision);
  const Tensor gen = detokenizer.generation_embed(code_values(codes), 1);
  Detokenized out;
  out.generation.assign(gen.data().begin(), gen.data().end());
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < gallery.ids.size(); ++g) {
    const double s = data::cosine(out.generation, gallery.embeddings[g]);
    if (s > best || (s == best && gallery.ids[g] < out.image_id)) {
      best = s;
      out.image_id = gallery.ids[g];
    }
  }
  return out;
}

void write_code_stream(const std::filesystem::path& path, std::span<const std::size_t> items,
                       const std::vector<VisualCodes>& codes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (std::size_t i = 0; i < items.size(); ++i) {
    nlohmann::ordered_json j;
    j["sample"] = items[i];
    j["codes"] = codes.at(i);
    out << j.dump() << '\n';
  }
}

}  // namespace seed

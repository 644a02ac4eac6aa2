#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "brltm/hash.hpp"
#include "brltm/model.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace brltm;
using namespace brltm::test;

namespace {

ModelConfig tiny_config(std::size_t vocab = 20) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.hidden_size = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.intermediate_size = 16;
  c.max_len = 32;
  return c;
}

std::vector<double> as_vector(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

void fill(const Tensor<double>& t, double v) {
  auto copy = t;
  for (auto& x : copy.mutable_values()) x = v;
}

const ForwardMode kEval{};

}  // namespace

TEST(ModelConfig, Validation) {
  auto c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(init_params<double>(c, 1), ConfigError);
  c = tiny_config(5);
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(preset_config("huge", 100), ConfigError);
  EXPECT_THROW(model_config_from_json(nlohmann::json::parse(R"({"hidden": 8})")), ConfigError);
}

TEST(ModelConfig, Presets) {
  const auto all = preset_config("paper-all", 100);
  EXPECT_EQ(all.hidden_size, 216u);
  EXPECT_EQ(all.n_layers, 9u);
  EXPECT_EQ(all.n_heads, 12u);
  EXPECT_EQ(all.intermediate_size, 512u);
  EXPECT_EQ(preset_config("paper-no-topic", 100).hidden_size, 240u);
  EXPECT_EQ(preset_config("paper-no-cpt", 100).n_layers, 6u);
  EXPECT_EQ(preset_config("paper-no-topic-cpt", 100).hidden_size, 264u);
  EXPECT_EQ(preset_config("desk", 100).intermediate_size, 64u);
  for (const auto& p : kPresets) EXPECT_NO_THROW(preset_config(p.name, 100).validate()) << p.name;
  const auto c = preset_config("desk", 77);
  EXPECT_EQ(model_config_from_json(nlohmann::json::parse(to_json(c).dump())), c);
}

TEST(InitParams, PositionalRowZero) {
  const auto p = init_params<double>(tiny_config(), 1);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(p.position_table[j], j % 2 == 0 ? 0.0 : 1.0);
  // Row 1, dims 2/3: sin and cos of 1 / 10000^(2/8).
  EXPECT_NEAR(p.position_table[8 + 2], std::sin(0.1), 1e-15);
  EXPECT_NEAR(p.position_table[8 + 3], std::cos(0.1), 1e-15);
  EXPECT_FALSE(p.position_table.requires_grad());
}

TEST(InitParams, DeterministicPerSeed) {
  const auto cfg = tiny_config();
  const auto a = serialize_checkpoint(init_params<float>(cfg, 7, true), "h");
  EXPECT_EQ(a, serialize_checkpoint(init_params<float>(cfg, 7, true), "h"));
  EXPECT_NE(a, serialize_checkpoint(init_params<float>(cfg, 8, true), "h"));
}

TEST(InitParams, BiasesGainsAndTruncatedNormalMoments) {
  auto cfg = tiny_config(5000);
  cfg.hidden_size = 32;
  cfg.n_heads = 4;
  const auto p = init_params<double>(cfg, 3);
  const auto w = p.code_table.values();
  ASSERT_GE(w.size(), 100000u);
  double m = 0, v = 0;
  for (double x : w) {
    m += x;
    EXPECT_LE(std::abs(x), 0.04);
  }
  m /= static_cast<double>(w.size());
  for (double x : w) v += (x - m) * (x - m);
  const double sd = std::sqrt(v / static_cast<double>(w.size() - 1));
  // Standard normal truncated to [-2, 2]: variance 1 - 2*2*phi(2)/(2*Phi(2)-1).
  const double phi2 = std::exp(-2.0) / std::sqrt(2.0 * M_PI);
  const double mass = std::erf(2.0 / std::sqrt(2.0));
  const double expected = 0.02 * std::sqrt(1.0 - 4.0 * phi2 / mass);
  EXPECT_NEAR(expected, 0.02 * 0.8796, 1e-4);
  EXPECT_NEAR(sd, expected, 0.02 * expected);
  EXPECT_NEAR(m, 0.0, 1e-3);
  for (double x : p.layers[0].bq.values()) EXPECT_EQ(x, 0.0);
  for (double x : p.layers[1].ln2_gain.values()) EXPECT_EQ(x, 1.0);
  for (double x : p.mlm_bias.values()) EXPECT_EQ(x, 0.0);
  EXPECT_FALSE(p.has_classifier());
}

TEST(Embed, AdditiveDecomposition) {
  const auto p = init_params<double>(tiny_config(), 4);
  const auto seq = make_sequence({{5, 6}, {7}});
  fill(p.code_table, 0.0);
  fill(p.position_table, 0.0);
  fill(p.segment_table, 0.0);
  fill(p.age_table, 0.0);
  fill(p.gender_table, 0.0);
  const auto zero = embedding_sum(seq, p);
  for (double x : zero.values()) EXPECT_EQ(x, 0.0);

  const auto q = init_params<double>(tiny_config(), 4);
  fill(q.position_table, 0.0);
  fill(q.segment_table, 0.0);
  fill(q.age_table, 0.0);
  fill(q.gender_table, 0.0);
  const auto only_code = embedding_sum(seq, q);
  for (std::size_t pos = 0; pos < seq.size(); ++pos)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_EQ(only_code[pos * 8 + j], q.code_table[static_cast<std::size_t>(seq.tokens[pos]) * 8 + j]);

  const auto r = init_params<double>(tiny_config(), 5);
  auto male = seq;
  male.gender = 1;
  const auto f = embedding_sum(seq, r), m = embedding_sum(male, r);
  for (std::size_t pos = 0; pos < seq.size(); ++pos)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(m[pos * 8 + j] - f[pos * 8 + j], r.gender_table[8 + j] - r.gender_table[j], 1e-15);
}

TEST(Embed, ClampsAgesAndRejectsLongSequences) {
  const auto p = init_params<double>(tiny_config(), 4);
  auto seq = make_sequence({{5}});
  auto old = seq;
  for (auto& a : old.ages) a = 500;
  auto at_max = seq;
  for (auto& a : at_max.ages) a = 120;
  EXPECT_EQ(as_vector(embedding_sum(old, p)), as_vector(embedding_sum(at_max, p)));
  std::vector<TokenId> many(40, 5);
  EXPECT_THROW(embedding_sum(make_sequence({many}), p), ShapeError);
}

TEST(Encoder, AttentionRowsAreDistributionsAndIgnorePadding) {
  const auto p = init_params<double>(tiny_config(), 6);
  perturb(p, 0.3, 1);
  const auto seq = pad_to(make_sequence({{5, 6, 7}, {8, 9}}), 12);
  const auto out = forward(seq, p, ForwardMode{false, nullptr, true});
  const auto& a = out.attention;
  ASSERT_EQ(a.n_layers, 2u);
  ASSERT_EQ(a.n_heads, 2u);
  ASSERT_EQ(a.length, 12u);
  const auto real = seq.real_length();
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t q = 0; q < 12; ++q) {
        double s = 0;
        for (std::size_t k = 0; k < 12; ++k) {
          EXPECT_GE(a.at(l, h, q, k), 0.0);
          if (k >= real) EXPECT_EQ(a.at(l, h, q, k), 0.0);
          s += a.at(l, h, q, k);
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
      }
  EXPECT_EQ(a.token_ids, seq.tokens);
  const std::vector<std::uint8_t> short_mask(3, 1);
  EXPECT_THROW(encode(embed(seq, p), std::span<const std::uint8_t>(short_mask), p), ShapeError);
}

TEST(Encoder, PaddingDoesNotChangeRealPositions) {
  const auto p = init_params<double>(tiny_config(), 6);
  perturb(p, 0.3, 2);
  const auto seq = make_sequence({{5, 6, 7}, {8, 9}});
  const auto a = forward(seq, p).hidden, b = forward(pad_to(seq, 16), p).hidden;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Encoder, EvalModeIsDeterministicAndTrainModeNeedsRng) {
  const auto p = init_params<double>(tiny_config(), 6);
  const auto seq = make_sequence({{5, 6}, {7}});
  EXPECT_EQ(as_vector(forward(seq, p).hidden), as_vector(forward(seq, p).hidden));
  EXPECT_THROW(forward(seq, p, ForwardMode{true, nullptr, false}), ContractError);
  Rng a(1), b(1), c(2);
  const auto ta = forward(seq, p, ForwardMode{true, &a, false}).hidden;
  EXPECT_EQ(as_vector(ta), as_vector(forward(seq, p, ForwardMode{true, &b, false}).hidden));
  EXPECT_NE(as_vector(ta), as_vector(forward(seq, p, ForwardMode{true, &c, false}).hidden));
  EXPECT_NE(as_vector(ta), as_vector(forward(seq, p).hidden));
}

TEST(Encoder, Bidirectional) {
  const auto p = init_params<double>(tiny_config(), 7);
  perturb(p, 0.3, 3);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto seq = make_sequence({{5, 6}, {7, 8}, {9, 10}});
    const std::size_t last = seq.size() - 2;  // last content token
    const auto before = mlm_logits(forward(seq, p).hidden, p);
    seq.tokens[last] = static_cast<TokenId>(11 + rng.uniform_int(9));
    const auto after = mlm_logits(forward(seq, p).hidden, p);
    double change = 0;
    for (std::size_t v = 0; v < 20; ++v) change = std::max(change, std::abs(after[20 + v] - before[20 + v]));
    EXPECT_GT(change, 0.0);
  }
}

TEST(Encoder, OrderEntersOnlyThroughPositionalChannels) {
  const auto p = init_params<double>(tiny_config(), 8);
  perturb(p, 0.3, 5);
  const auto seq = make_sequence({{5, 6, 7, 8, 9}});
  std::vector<std::size_t> perm = {0, 3, 1, 5, 4, 2, 6};  // permutes content positions 1..5
  auto permuted = seq;
  for (std::size_t i = 0; i < perm.size(); ++i) permuted.tokens[i] = seq.tokens[perm[i]];

  auto check = [&](bool expect_invariant) {
    const auto a = forward(seq, p).hidden, b = forward(permuted, p).hidden;
    double diff = 0;
    for (std::size_t i = 0; i < perm.size(); ++i)
      for (std::size_t j = 0; j < 8; ++j) diff = std::max(diff, std::abs(b[i * 8 + j] - a[perm[i] * 8 + j]));
    if (expect_invariant) EXPECT_LT(diff, 1e-5);
    else EXPECT_GT(diff, 1e-3);
  };
  check(false);
  const auto saved_pos = p.position_table.detach(), saved_seg = p.segment_table.detach();
  fill(p.position_table, 0.0);
  fill(p.segment_table, 0.0);
  check(true);
  auto pos = p.position_table;
  std::copy(saved_pos.values().begin(), saved_pos.values().end(), pos.mutable_values().begin());
  check(false);
}

TEST(Heads, MlmLogitsShapeAndZeroCase) {
  const auto p = init_params<double>(tiny_config(), 9);
  const auto z = mlm_logits(Tensor<double>::zeros({4, 8}), p);
  EXPECT_EQ(z.shape(), (Shape{4, 20}));
  for (double x : z.values()) EXPECT_EQ(x, 0.0);
  const std::vector<std::int32_t> at = {1, 3};
  EXPECT_EQ(mlm_logits_at(Tensor<double>::zeros({4, 8}), p, std::span<const std::int32_t>(at)).shape(),
            (Shape{2, 20}));
}

TEST(Heads, ClassifierProbability) {
  auto p = init_params<double>(tiny_config(), 10, true);
  const auto seq = make_sequence({{5, 6}, {7}});
  const auto h = forward(seq, p).hidden;
  const double base = classify(h, p);
  EXPECT_GT(base, 0.0);
  EXPECT_LT(base, 1.0);
  double prev = base;
  for (int i = 0; i < 5; ++i) {
    auto b = p.cls_bias;
    b.mutable_values()[0] += 0.5;
    const double next = classify(h, p);
    EXPECT_GT(next, prev);
    prev = next;
  }
  fill(p.cls_weight, 0.0);
  fill(p.cls_bias, 0.0);
  EXPECT_EQ(classify(h, p), 0.5);
  EXPECT_THROW(classify(h, init_params<double>(tiny_config(), 10)), ContractError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  const auto p = init_params<float>(tiny_config(), 11, true);
  save_checkpoint(p, "abc", dir.file("a.ckpt"));
  const auto ck = load_checkpoint<float>(dir.file("a.ckpt"), std::string_view("abc"));
  EXPECT_EQ(ck.vocab_hash, "abc");
  EXPECT_EQ(ck.params.config, p.config);
  save_checkpoint(ck.params, "abc", dir.file("b.ckpt"));
  EXPECT_EQ(read_file(dir.file("a.ckpt")), read_file(dir.file("b.ckpt")));
  const auto named_a = p.named(false), named_b = ck.params.named(false);
  ASSERT_EQ(named_a.size(), named_b.size());
  for (std::size_t i = 0; i < named_a.size(); ++i)
    EXPECT_TRUE(std::equal(named_a[i].tensor.values().begin(), named_a[i].tensor.values().end(),
                           named_b[i].tensor.values().begin()));

  const auto d = init_params<double>(tiny_config(), 11);
  save_checkpoint(d, "abc", dir.file("d1.ckpt"));
  save_checkpoint(load_checkpoint<double>(dir.file("d1.ckpt")).params, "abc", dir.file("d2.ckpt"));
  EXPECT_EQ(read_file(dir.file("d1.ckpt")), read_file(dir.file("d2.ckpt")));
}

TEST(Checkpoint, Errors) {
  TempDir dir("ckpt_err");
  const auto p = init_params<float>(tiny_config(), 12);
  save_checkpoint(p, "abc", dir.file("a.ckpt"));
  EXPECT_THROW(load_checkpoint<float>(dir.file("a.ckpt"), std::string_view("xyz")), IncompatibleError);
  const auto bytes = read_file(dir.file("a.ckpt"));
  for (std::size_t cut : {std::size_t{4}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
    write_file(dir.file("t.ckpt"), bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint<float>(dir.file("t.ckpt")), FormatError) << cut;
  }
  write_file(dir.file("x.ckpt"), bytes + "x");
  EXPECT_THROW(load_checkpoint<float>(dir.file("x.ckpt")), FormatError);
  write_file(dir.file("m.ckpt"), "NOTACKPT" + bytes.substr(8));
  EXPECT_THROW(load_checkpoint<float>(dir.file("m.ckpt")), FormatError);
  EXPECT_THROW(load_checkpoint<float>(dir.file("missing.ckpt")), IoError);
}

TEST(Checkpoint, FreshClassifierHead) {
  TempDir dir("ckpt_head");
  const auto p = init_params<float>(tiny_config(), 13);
  save_checkpoint(p, "h", dir.file("pre.ckpt"));
  EXPECT_FALSE(load_checkpoint<float>(dir.file("pre.ckpt")).params.has_classifier());
  const auto a = load_checkpoint<float>(dir.file("pre.ckpt"), {}, 99).params;
  const auto b = load_checkpoint<float>(dir.file("pre.ckpt"), {}, 99).params;
  ASSERT_TRUE(a.has_classifier());
  EXPECT_TRUE(std::equal(a.cls_weight.values().begin(), a.cls_weight.values().end(), b.cls_weight.values().begin()));
  EXPECT_EQ(a.cls_bias[0], 0.0f);
  EXPECT_EQ(serialize_checkpoint(a, "h"), serialize_checkpoint(b, "h"));
  // The encoder weights are untouched by attaching the head.
  EXPECT_TRUE(std::equal(a.code_table.values().begin(), a.code_table.values().end(), p.code_table.values().begin()));
}

TEST(Params, CloneIsIndependentAndCastPreservesValues) {
  const auto p = init_params<double>(tiny_config(), 14, true);
  const auto c = p.clone();
  auto t = c.code_table;
  t.mutable_values()[0] += 1.0;
  EXPECT_NE(p.code_table[0], c.code_table[0]);
  const auto f = p.cast<float>();
  EXPECT_EQ(f.code_table[5], static_cast<float>(p.code_table[5]));
  EXPECT_TRUE(f.has_classifier());
  EXPECT_EQ(p.named(true).size(), p.named(false).size() + 1);
}

TEST(FullModel, GradientsMatchFiniteDifferences) {
  for (bool tied : {true, false}) {
    auto cfg = tiny_config();
    cfg.tie_mlm = tied;
    const auto p = init_params<double>(cfg, 15, true);
    perturb(p, 0.3, 6);
    const auto seq = pad_to(make_sequence({{5, 6, 7}, {8, 9}, {10}}), 11);
    std::vector<std::int32_t> targets(seq.size(), kIgnore);
    targets[2] = 12;
    targets[5] = 9;
    targets[7] = 10;
    const auto mlm = oracle::finite_difference_check(p, [&] {
      return cross_entropy(mlm_logits(forward(seq, p).hidden, p), std::span<const std::int32_t>(targets), kIgnore);
    });
    EXPECT_LT(mlm.max_rel_error, 1e-4) << "tied=" << tied << " worst " << mlm.worst;
    EXPECT_GT(mlm.probes, 1000u);
    const std::vector<int> label = {1};
    const auto cls = oracle::finite_difference_check(p, [&] {
      return bce_with_logits(classify_logit(forward(seq, p).hidden, p), std::span<const int>(label));
    });
    EXPECT_LT(cls.max_rel_error, 1e-4) << "worst " << cls.worst;
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "transhp/checkpoint.hpp"
#include "transhp/gradcheck.hpp"
#include "transhp/model.hpp"
#include "transhp/presets.hpp"

using namespace transhp;
using T64 = Tensor<double>;

namespace {

std::mt19937_64 rng(777);

LabelHierarchy one_level(int M, int K) {
  HierarchyLevel lv;
  lv.name = "syn";
  lv.coarse_count = M;
  for (int f = 0; f < M * K; ++f) lv.parent_of.push_back(f / K);
  return LabelHierarchy(M * K, {lv});
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.depth = 3;
  c.heads = 2;
  c.mlp_ratio = 4.0;
  c.fine_count = 6;
  c.prompting_specs = {PromptingSpec{2, 0, 3, 1.0}};
  return c;
}

ImageRecord random_image(int H, uint64_t seed) {
  ImageRecord r;
  r.image_id = static_cast<int>(seed);
  r.fine_label = 0;
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  r.pixels.resize(static_cast<size_t>(H) * H * 3);
  for (auto& v : r.pixels) v = d(g);
  return r;
}

// Step-by-step fp64 recomputation of one pre-norm block with plain loops.
struct BlockOracle {
  std::vector<double> out;
  std::vector<double> attention;  // [h,T,T]
};

BlockOracle block_oracle(const TransHPModel<double>& m, int layer, const std::vector<double>& x,
                         int T) {
  const int C = m.config.embed_dim, h = m.config.heads, d = C / h;
  const std::string p = "block" + std::to_string(layer) + ".";
  auto get = [&](const std::string& n) -> const std::vector<double>& { return m.param(n).data(); };

  auto layernorm = [&](const std::vector<double>& in, const std::vector<double>& g,
                       const std::vector<double>& b) {
    std::vector<double> o(in.size());
    for (int t = 0; t < T; ++t) {
      double mean = 0;
      for (int j = 0; j < C; ++j) mean += in[t * C + j];
      mean /= C;
      double var = 0;
      for (int j = 0; j < C; ++j) var += (in[t * C + j] - mean) * (in[t * C + j] - mean);
      var /= C;
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      for (int j = 0; j < C; ++j) o[t * C + j] = (in[t * C + j] - mean) * inv * g[j] + b[j];
    }
    return o;
  };
  auto project = [&](const std::vector<double>& in, const std::vector<double>& W,
                     const std::vector<double>& b, int outw) {
    std::vector<double> o(static_cast<size_t>(T) * outw, 0.0);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < outw; ++j) {
        double acc = 0;
        for (int c = 0; c < C; ++c) acc += in[t * C + c] * W[c * outw + j];
        o[t * outw + j] = acc + b[j];
      }
    return o;
  };

  auto h1 = layernorm(x, get(p + "ln1.gain"), get(p + "ln1.bias"));
  auto q = project(h1, get(p + "q.weight"), get(p + "q.bias"), C);
  auto k = project(h1, get(p + "k.weight"), get(p + "k.bias"), C);
  auto v = project(h1, get(p + "v.weight"), get(p + "v.bias"), C);

  std::vector<double> attn(static_cast<size_t>(h) * T * T);
  std::vector<double> mixed(static_cast<size_t>(T) * C, 0.0);
  for (int hh = 0; hh < h; ++hh) {
    for (int t = 0; t < T; ++t) {
      std::vector<double> row(T);
      for (int u = 0; u < T; ++u) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += q[t * C + hh * d + j] * k[u * C + hh * d + j];
        row[u] = s / std::sqrt(static_cast<double>(d));
      }
      double mx = row[0];
      for (int u = 1; u < T; ++u) mx = std::max(mx, row[u]);
      double sum = 0;
      for (int u = 0; u < T; ++u) {
        row[u] = std::exp(row[u] - mx);
        sum += row[u];
      }
      for (int u = 0; u < T; ++u) {
        row[u] /= sum;
        attn[(static_cast<size_t>(hh) * T + t) * T + u] = row[u];
      }
      for (int j = 0; j < d; ++j) {
        double acc = 0;
        for (int u = 0; u < T; ++u) acc += row[u] * v[u * C + hh * d + j];
        mixed[t * C + hh * d + j] = acc;
      }
    }
  }
  auto attnout = project(mixed, get(p + "attn_out.weight"), get(p + "attn_out.bias"), C);
  std::vector<double> x2(x.size());
  for (size_t i = 0; i < x.size(); ++i) x2[i] = x[i] + attnout[i];

  auto h2 = layernorm(x2, get(p + "ln2.gain"), get(p + "ln2.bias"));
  const int hidden = m.config.mlp_hidden();
  std::vector<double> m1(static_cast<size_t>(T) * hidden, 0.0);
  const auto& W1 = get(p + "mlp1.weight");
  const auto& b1 = get(p + "mlp1.bias");
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < hidden; ++j) {
      double acc = 0;
      for (int c = 0; c < C; ++c) acc += h2[t * C + c] * W1[c * hidden + j];
      m1[t * hidden + j] = ref::gelu(acc + b1[j]);
    }
  const auto& W2 = get(p + "mlp2.weight");
  const auto& b2 = get(p + "mlp2.bias");
  BlockOracle o;
  o.out.assign(x.size(), 0.0);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < C; ++j) {
      double acc = 0;
      for (int c = 0; c < hidden; ++c) acc += m1[t * hidden + c] * W2[c * C + j];
      o.out[t * C + j] = x2[t * C + j] + acc + b2[j];
    }
  o.attention = std::move(attn);
  return o;
}

}  // namespace

TEST_CASE("patch embedding") {
  auto h = one_level(3, 2);
  auto m = assemble<double>(tiny_config(), h, 5);
  const int N = m.config.patch_tokens();
  CHECK(N == 16);

  SUBCASE("shape is (1+N) x C") {
    auto x = patch_embed(m, random_image(16, 1));
    CHECK(x.shape() == std::vector<int>{17, 16});
  }
  SUBCASE("zero image with zero position embeddings gives bias rows") {
    std::fill(m.param("pos_embed").data().begin(), m.param("pos_embed").data().end(), 0.0);
    for (auto& v : m.param("embed.bias").data()) v = 0.25;
    ImageRecord img;
    img.pixels.assign(16 * 16 * 3, 0.0f);
    auto x = patch_embed(m, img);
    for (int t = 1; t <= N; ++t)
      for (int c = 0; c < 16; ++c) CHECK(x.data()[t * 16 + c] == 0.25);
    // row 0 is the class token
    for (int c = 0; c < 16; ++c) CHECK(x.data()[c] == m.param("cls_token").data()[c]);
  }
  SUBCASE("one-hot pixel picks out one embedding row") {
    std::fill(m.param("pos_embed").data().begin(), m.param("pos_embed").data().end(), 0.0);
    ImageRecord img;
    img.pixels.assign(16 * 16 * 3, 0.0f);
    // patch (1,2), in-patch position (3,1), channel 2
    const int y = 1 * 4 + 3, x_ = 2 * 4 + 1;
    img.pixels[(y * 16 + x_) * 3 + 2] = 1.0f;
    const int patch_index = 1 * 4 + 2;
    const int within = (3 * 4 + 1) * 3 + 2;
    auto out = patch_embed(m, img);
    const auto& W = m.param("embed.weight").data();
    const auto& b = m.param("embed.bias").data();
    for (int c = 0; c < 16; ++c)
      CHECK(out.data()[(1 + patch_index) * 16 + c] ==
            doctest::Approx(W[within * 16 + c] + b[c]).epsilon(1e-14));
  }
  SUBCASE("wrong image size is rejected") {
    CHECK_THROWS_AS(patch_embed(m, random_image(32, 1)), ConfigError);
  }
}

TEST_CASE("block forward") {
  auto h = one_level(3, 2);
  auto m = assemble<double>(tiny_config(), h, 9);

  SUBCASE("single token attends only to itself") {
    auto x = make_uniform<double>({1, 1, 16}, rng);
    auto blk = block_forward_batch(m, 1, x);
    REQUIRE(blk.attention.shape() == std::vector<int>{1, 2, 1, 1});
    for (double v : blk.attention.data()) CHECK(v == 1.0);
  }
  SUBCASE("zero attention-out and mlp-out weights give the pure residual path") {
    auto& ow = m.param("block1.attn_out.weight").data();
    std::fill(ow.begin(), ow.end(), 0.0);
    auto& mw = m.param("block1.mlp2.weight").data();
    std::fill(mw.begin(), mw.end(), 0.0);
    auto x = make_uniform<double>({2, 5, 16}, rng);
    auto blk = block_forward_batch(m, 1, x);
    CHECK(blk.tokens.data() == x.data());
  }
  SUBCASE("random T=5 input matches the step-by-step fp64 oracle") {
    auto x = make_uniform<double>({1, 5, 16}, rng);
    auto blk = block_forward_batch(m, 2, x);
    auto oracle = block_oracle(m, 2, x.data(), 5);
    for (size_t i = 0; i < oracle.out.size(); ++i)
      CHECK(std::abs(blk.tokens.data()[i] - oracle.out[i]) <= 1e-10);
    for (size_t i = 0; i < oracle.attention.size(); ++i)
      CHECK(std::abs(blk.attention.data()[i] - oracle.attention[i]) <= 1e-10);
  }
  SUBCASE("attention rows sum to one per head") {
    auto x = make_uniform<double>({2, 7, 16}, rng);
    auto blk = block_forward_batch(m, 3, x);
    const auto& a = blk.attention.data();
    for (size_t row = 0; row < a.size() / 7; ++row) {
      double s = 0;
      for (int u = 0; u < 7; ++u) s += a[row * 7 + u];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("prompting block") {
  auto h = one_level(3, 2);
  auto m = assemble<double>(tiny_config(), h, 21);
  auto x = make_uniform<double>({2, 17, 16}, rng);

  SUBCASE("empty pool reduces to the plain block") {
    auto plain = block_forward_batch(m, 2, x);
    auto prompted = prompting_block_forward(m, 2, x, Tensor<double>::zeros({0, 16}));
    CHECK(prompted.features.data() == plain.tokens.data());
    CHECK(prompted.prompt_states.numel() == 0);
  }
  SUBCASE("shapes: N=16, M=3") {
    auto out = prompting_block_forward(m, 2, x, m.param("prompt2.pool"));
    CHECK(out.features.shape() == std::vector<int>{2, 17, 16});
    CHECK(out.prompt_states.shape() == std::vector<int>{2, 3, 16});
    CHECK(out.attention.shape() == std::vector<int>{2, 2, 20, 20});
  }
  SUBCASE("masking prompt keys reproduces the plain block features") {
    auto plain = block_forward_batch(m, 2, x);
    auto masked = prompting_block_forward(m, 2, x, m.param("prompt2.pool"), true);
    for (long i = 0; i < plain.tokens.numel(); ++i)
      CHECK(std::abs(masked.features.data()[static_cast<size_t>(i)] -
                     plain.tokens.data()[static_cast<size_t>(i)]) <= 1e-8);
  }
}

TEST_CASE("assemble") {
  SUBCASE("same seed gives bitwise-identical parameters") {
    auto h = one_level(3, 2);
    auto a = assemble<double>(tiny_config(), h, 123);
    auto b = assemble<double>(tiny_config(), h, 123);
    REQUIRE(a.param_order == b.param_order);
    for (const auto& n : a.param_order) CHECK(a.param(n).data() == b.param(n).data());
    auto c = assemble<double>(tiny_config(), h, 124);
    CHECK(c.param("cls_token").data() != a.param("cls_token").data());
  }
  SUBCASE("cifar-100 preset: one prompting block at layer 9 of 12, M=20, lambda 1") {
    ModelConfig c;
    c.image_size = 32;
    c.patch_size = 4;
    c.embed_dim = 48;
    c.depth = 12;
    c.heads = 4;
    c.fine_count = 100;
    const auto& preset = lambda_preset("cifar-100");
    for (const auto& e : preset.entries)
      c.prompting_specs.push_back(PromptingSpec{e.layer, 0, 20, e.lambda});
    auto m = assemble<float>(c, cifar100_taxonomy(), 1);
    CHECK(m.config.prompting_specs.size() == 1);
    CHECK(m.config.prompting_specs[0].layer_index == 9);
    CHECK(m.config.prompting_specs[0].lambda == 1.0);
    CHECK(m.param("prompt9.pool").shape() == std::vector<int>{20, 48});
    CHECK(m.warnings.empty());
  }
  SUBCASE("deepfashion preset: coarser level at layer 7, finer at 9") {
    HierarchyLevel top{"gender", 2, {}};
    HierarchyLevel mid{"category", 17, {}};
    const int fine = 34;
    for (int f = 0; f < fine; ++f) {
      mid.parent_of.push_back(f / 2);
      top.parent_of.push_back((f / 2) < 9 ? 0 : 1);
    }
    LabelHierarchy h(fine, {top, mid});
    ModelConfig c;
    c.image_size = 32;
    c.patch_size = 4;
    c.embed_dim = 32;
    c.depth = 12;
    c.heads = 4;
    c.fine_count = fine;
    const auto& preset = lambda_preset("deepfashion");
    c.prompting_specs = {PromptingSpec{preset.entries[0].layer, 0, 2, preset.entries[0].lambda},
                         PromptingSpec{preset.entries[1].layer, 1, 17, preset.entries[1].lambda}};
    auto m = assemble<float>(c, h, 2);
    CHECK(m.warnings.empty());
    CHECK(m.param("prompt7.pool").shape() == std::vector<int>{2, 32});
    CHECK(m.param("prompt9.pool").shape() == std::vector<int>{17, 32});
    CHECK(m.config.prompting_specs[0].lambda == 0.5);
  }
  SUBCASE("placement principle violations warn, not fail") {
    HierarchyLevel top{"t", 2, {0, 0, 1, 1}};
    HierarchyLevel mid{"m", 4, {0, 1, 2, 3}};
    LabelHierarchy h(4, {top, mid});
    ModelConfig c = tiny_config();
    c.fine_count = 4;
    c.prompting_specs = {PromptingSpec{1, 1, 4, 1.0}, PromptingSpec{2, 0, 2, 1.0}};
    auto m = assemble<double>(c, h, 3);
    CHECK_FALSE(m.warnings.empty());
  }
  SUBCASE("config errors") {
    auto h = one_level(3, 2);
    ModelConfig c = tiny_config();
    c.prompting_specs[0].layer_index = 4;  // depth is 3
    CHECK_THROWS_AS(assemble<double>(c, h, 0), ConfigError);
    c = tiny_config();
    c.prompting_specs[0].coarse_count = 5;  // hierarchy level has 3
    CHECK_THROWS_AS(assemble<double>(c, h, 0), ConfigError);
    c = tiny_config();
    c.fine_count = 7;  // hierarchy has 6
    CHECK_THROWS_AS(assemble<double>(c, h, 0), ConfigError);
    c = tiny_config();
    c.prompting_specs = {PromptingSpec{2, 0, 3, 1.0}, PromptingSpec{2, 0, 3, 1.0}};
    CHECK_THROWS_AS(assemble<double>(c, h, 0), ConfigError);  // one pool per block
  }
}

TEST_CASE("forward pass") {
  auto h = one_level(3, 2);
  auto img = random_image(16, 31);

  SUBCASE("plain ViT has no coarse outputs") {
    ModelConfig c = tiny_config();
    c.prompting_specs.clear();
    auto m = assemble<double>(c, h, 4);
    auto out = forward(m, img);
    CHECK(out.fine_logits.shape() == std::vector<int>{6});
    CHECK(out.coarse_logits.empty());
    CHECK(out.prompt_states.empty());
    for (int t : out.block_input_tokens) CHECK(t == 17);
  }
  SUBCASE("sequence length trace: prompts appear only at their own block") {
    auto m = assemble<double>(tiny_config(), h, 4);
    auto out = forward(m, img);
    CHECK(out.block_input_tokens == std::vector<int>{17, 20, 17});
    CHECK(out.coarse_logits.size() == 1);
    CHECK(out.coarse_logits[0].shape() == std::vector<int>{3});
    CHECK(out.prompt_states[0].shape() == std::vector<int>{3, 16});
  }
  SUBCASE("attention retention") {
    auto m = assemble<double>(tiny_config(), h, 4);
    auto out = forward(m, img, true);
    REQUIRE(out.attention.size() == 3);
    CHECK(out.attention[0].shape() == std::vector<int>{2, 17, 17});
    CHECK(out.attention[1].shape() == std::vector<int>{2, 20, 20});
    // without retention only the prompting block keeps its map
    auto lean = forward(m, img, false);
    CHECK_FALSE(lean.attention[0].defined());
    CHECK(lean.attention[1].defined());
  }
  SUBCASE("baseline reduction is bitwise") {
    auto mt = assemble<double>(tiny_config(), h, 4);
    auto mb = make_baseline(mt);
    ModelConfig cb = tiny_config();
    cb.prompting_specs.clear();
    auto direct = assemble<double>(cb, h, 4);
    REQUIRE(mb.param_order == direct.param_order);
    for (const auto& n : mb.param_order) CHECK(mb.param(n).data() == direct.param(n).data());
    auto o1 = forward(mb, img);
    auto o2 = forward(direct, img);
    CHECK(o1.fine_logits.data() == o2.fine_logits.data());
  }
}

TEST_CASE("variants") {
  auto h = one_level(3, 2);
  auto m = assemble<double>(tiny_config(), h, 11);
  auto img = random_image(16, 32);

  SUBCASE("no-coarse-labels keeps pools, drops prototypes") {
    auto v = make_variant(m, Variant::no_coarse_labels);
    const long expect = count_params(m).total - 3 * 16;  // one level: M*C prototype scalars
    CHECK(count_params(v).total == expect);
    auto out = forward(v, img);
    CHECK(out.fine_logits.shape() == std::vector<int>{6});
    CHECK(out.coarse_logits.empty());
    CHECK(out.prompt_states.size() == 1);          // pools still enter the block
    CHECK(out.block_input_tokens[1] == 20);        // and the sequence still grows
    for (const auto& s : v.config.prompting_specs) CHECK(s.lambda == 0.0);
  }
  SUBCASE("no-prompts supervises the class token instead") {
    auto v = make_variant(m, Variant::no_prompts);
    auto out = forward(v, img);
    for (int t : out.block_input_tokens) CHECK(t <= 17);
    CHECK(out.coarse_logits.size() == 1);
    CHECK(out.coarse_logits[0].shape() == std::vector<int>{3});
    CHECK(out.prompt_states.empty());
    CHECK(v.has_param("prompt2.head.weight"));
    CHECK_FALSE(v.has_param("prompt2.pool"));
  }
  SUBCASE("variants of a promptless model are rejected") {
    auto b = make_baseline(m);
    CHECK_THROWS_AS(make_variant(b, Variant::no_prompts), ContractError);
  }
}

TEST_CASE("count_params") {
  SUBCASE("M=20, C=384 adds 2*20*384") {
    HierarchyLevel lv{"l", 20, {}};
    for (int f = 0; f < 40; ++f) lv.parent_of.push_back(f / 2);
    LabelHierarchy h(40, {lv});
    ModelConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.embed_dim = 384;
    c.depth = 1;
    c.heads = 4;
    c.fine_count = 40;
    c.prompting_specs = {PromptingSpec{1, 0, 20, 1.0}};
    auto m = assemble<float>(c, h, 0);
    CHECK(count_params(m).added_by_prompting == 2 * 20 * 384);
  }
  SUBCASE("no prompting specs add nothing") {
    auto h = one_level(3, 2);
    ModelConfig c = tiny_config();
    c.prompting_specs.clear();
    auto m = assemble<float>(c, h, 0);
    CHECK(count_params(m).added_by_prompting == 0);
    CHECK(count_params(m).total > 0);
  }
  SUBCASE("difference of totals equals the formula") {
    auto h = one_level(3, 2);
    auto m = assemble<float>(tiny_config(), h, 0);
    auto b = make_baseline(m);
    CHECK(count_params(m).total - count_params(b).total == 2 * 3 * 16);
    CHECK(count_params(m).added_by_prompting == 2 * 3 * 16);
  }
}

TEST_CASE("checkpoint round-trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "transhp_ckpt_test";
  fs::create_directories(dir);
  auto h = one_level(3, 2);
  auto m = assemble<float>(tiny_config(), h, 55);
  const auto path = (dir / "model.ckpt").string();
  save_checkpoint(m, path);

  auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.seed == 55);
  CHECK(loaded.variant == Variant::transhp);
  REQUIRE(loaded.param_order == m.param_order);
  for (const auto& n : m.param_order) CHECK(loaded.param(n).data() == m.param(n).data());
  CHECK(loaded.config.prompting_specs.size() == 1);
  CHECK(loaded.config.prompting_specs[0].lambda == 1.0);
  validate_checkpoint_structure(loaded, h);

  // forward agreement
  auto img = random_image(16, 8);
  auto o1 = forward(m, img);
  auto o2 = forward(loaded, img);
  CHECK(o1.fine_logits.data() == o2.fine_logits.data());

  // saving twice gives identical bytes
  const auto path2 = (dir / "model2.ckpt").string();
  save_checkpoint(m, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  // corrupted magic
  s1[0] = 'X';
  std::ofstream bad((dir / "bad.ckpt").string(), std::ios::binary);
  bad << s1;
  bad.close();
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "bad.ckpt").string()), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("gradients flow through the full prompted model") {
  auto h = one_level(3, 2);
  auto m = assemble<double>(tiny_config(), h, 17);
  auto img = random_image(16, 90);
  const std::vector<int> fine{4};

  auto loss_fn = [&] {
    auto fwd = forward_batch<double>(m, {&img}, false);
    return batch_loss(m, fwd, fine, h).total;
  };
  // spot-check a few parameters, pools and prototypes included
  for (const char* name : {"prompt2.pool", "prompt2.prototypes", "block2.q.weight", "cls_token"}) {
    auto res = gradient_check([&](const T64&) { return loss_fn(); }, m.param(name), 1e-5, 1e-6);
    INFO(name, " max rel err ", res.max_relative_error);
    CHECK(res.passed);
  }
}

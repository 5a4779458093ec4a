#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "fgl/conditioning.hpp"

using namespace fgl;

TEST_CASE("align_tokens places sentences and rejects bad layouts") {
  CHECK(align_tokens({{{5, 6, 7}, 0}}, 5) == std::vector<int>{5, 6, 7, 0, 0});
  CHECK(align_tokens({{{1, 2}, 0}, {{3}, 4}}, 6) == std::vector<int>{1, 2, 0, 0, 3, 0});
  CHECK(align_tokens({}, 3) == std::vector<int>{0, 0, 0});
  CHECK_THROWS_AS(align_tokens({{{1, 2, 3}, 0}, {{9}, 2}}, 8), std::invalid_argument);
  CHECK_THROWS_AS(align_tokens({{{1, 2, 3}, 6}}, 8), std::invalid_argument);
  CHECK_THROWS_AS(align_tokens({{{}, 0}}, 8), std::invalid_argument);
  CHECK_THROWS_AS(align_tokens({{{1}, 9}}, 8), std::invalid_argument);
}

TEST_CASE("align_tokens round-trips gap-separated sentences") {
  Rng rng(55);
  for (int trial = 0; trial < 200; trial++) {
    const int T = 20 + int(rng.uniform_int(40));
    std::vector<TokenSentence> sents;
    int pos = int(rng.uniform_int(3));
    while (pos + 2 < T) {
      int len = 1 + int(rng.uniform_int(5));
      len = std::min(len, T - pos);
      TokenSentence s;
      s.onset = pos;
      for (int i = 0; i < len; i++) s.tokens.push_back(1 + int(rng.uniform_int(32)));
      sents.push_back(s);
      pos += len + 1 + int(rng.uniform_int(4));  // >= 1 frame gap
    }
    if (sents.empty()) continue;
    std::vector<int> grid = align_tokens(sents, T);
    // extract contiguous nonzero runs back out of the grid
    std::vector<TokenSentence> back;
    for (int f = 0; f < T; f++) {
      if (grid[size_t(f)] == 0) continue;
      if (back.empty() || back.back().onset + int(back.back().tokens.size()) != f)
        back.push_back({{}, f});
      back.back().tokens.push_back(grid[size_t(f)]);
    }
    REQUIRE(back.size() == sents.size());
    for (size_t k = 0; k < sents.size(); k++) {
      CHECK(back[k].onset == sents[k].onset);
      CHECK(back[k].tokens == sents[k].tokens);
    }
  }
}

TEST_CASE("interp_melody is exact on identity grids and midpoints") {
  Rng rng(7);
  Tensor h = Tensor::randn(Shape{6, 3}, rng);
  CHECK(interp_melody(h, 6).data == h.data);  // L == T, bit-exact

  Tensor two = Tensor::randn(Shape{2, 4}, rng);
  Tensor mid = interp_melody(two, 3);
  for (int j = 0; j < 4; j++) {
    CHECK(mid.at(0, j) == two.at(0, j));
    CHECK(mid.at(1, j) == doctest::Approx((two.at(0, j) + two.at(1, j)) / 2).epsilon(1e-15));
    CHECK(mid.at(2, j) == two.at(1, j));
  }

  Tensor c = Tensor::full(Shape{4, 2}, 3.25);
  Tensor ci = interp_melody(c, 11);
  for (double v : ci.data) CHECK(v == 3.25);

  Tensor one = Tensor::randn(Shape{1, 3}, rng);
  Tensor rep = interp_melody(one, 5);
  for (int f = 0; f < 5; f++)
    for (int j = 0; j < 3; j++) CHECK(rep.at(f, j) == one.at(0, j));

  CHECK_THROWS_AS(interp_melody(Tensor(Shape{3}), 4), std::invalid_argument);
}

TEST_CASE("interp_melody endpoints and linearity") {
  Rng rng(8);
  for (int trial = 0; trial < 50; trial++) {
    const int L = 2 + int(rng.uniform_int(10)), T = 2 + int(rng.uniform_int(30)), d = 3;
    Tensor A = Tensor::randn(Shape{L, d}, rng), B = Tensor::randn(Shape{L, d}, rng);
    const double alpha = rng.uniform();
    Tensor mixed(Shape{L, d});
    for (int64_t i = 0; i < mixed.numel(); i++)
      mixed.data[size_t(i)] = alpha * A.data[size_t(i)] + (1 - alpha) * B.data[size_t(i)];
    Tensor ia = interp_melody(A, T), ib = interp_melody(B, T), im = interp_melody(mixed, T);
    for (int64_t i = 0; i < im.numel(); i++)
      CHECK(im.data[size_t(i)] ==
            doctest::Approx(alpha * ia.data[size_t(i)] + (1 - alpha) * ib.data[size_t(i)])
                .epsilon(1e-12));
    for (int j = 0; j < d; j++) {
      CHECK(ia.at(0, j) == A.at(0, j));
      CHECK(ia.at(T - 1, j) == A.at(L - 1, j));
    }
  }
}

TEST_CASE("temporal_dropout endpoints, rate, and determinism") {
  Rng rng(9);
  Tensor h = Tensor::randn(Shape{50, 4}, rng);
  CHECK(temporal_dropout(h, 0.0, 1).data == h.data);
  Tensor all = temporal_dropout(h, 1.0, 1);
  for (double v : all.data) CHECK(v == 0.0);

  Tensor big = Tensor::full(Shape{10000, 2}, 1.0);
  Tensor dropped = temporal_dropout(big, 0.1, 0);
  int zeroed = 0;
  for (int f = 0; f < 10000; f++) {
    const bool z0 = dropped.at(f, 0) == 0.0, z1 = dropped.at(f, 1) == 0.0;
    CHECK(z0 == z1);  // whole frames drop together
    zeroed += z0;
  }
  const double frac = zeroed / 10000.0;
  CHECK(frac >= 0.09);
  CHECK(frac <= 0.11);

  CHECK(temporal_dropout(h, 0.3, 42).data == temporal_dropout(h, 0.3, 42).data);
  CHECK(temporal_dropout(h, 0.3, 42).data != temporal_dropout(h, 0.3, 43).data);
  CHECK_THROWS_AS(temporal_dropout(h, 1.5, 0), std::invalid_argument);
}

TEST_CASE("make_mask spans obey the gamma range") {
  MaskSpec full = make_mask(48, 1.0, 1.0, 3);
  CHECK(full.start == 0);
  CHECK(full.length == 48);

  double mean_frac = 0;
  for (uint64_t seed = 0; seed < 10000; seed++) {
    MaskSpec m = make_mask(100, 0.7, 1.0, seed);
    CHECK(m.start >= 0);
    CHECK(m.start + m.length <= 100);
    CHECK(m.length >= 69);  // round(0.7*100) minus rounding slack
    mean_frac += m.length / 100.0 / 10000.0;
  }
  CHECK(mean_frac >= 0.83);  // E[U(0.7,1)] = 0.85
  CHECK(mean_frac <= 0.87);

  MaskSpec a = make_mask(64, 0.7, 1.0, 77), b = make_mask(64, 0.7, 1.0, 77);
  CHECK(a.start == b.start);
  CHECK(a.length == b.length);
  CHECK_THROWS_AS(make_mask(10, 0.0, 0.5, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_mask(10, 0.8, 0.5, 0), std::invalid_argument);
}

TEST_CASE("build_bundle zero-fills masked context frames") {
  Rng rng(11);
  for (int trial = 0; trial < 1000; trial++) {
    const int T = 8 + int(rng.uniform_int(56));
    Tensor latent = Tensor::randn(Shape{T, 5}, rng);
    const int L = 2 + int(rng.uniform_int(8));
    Tensor mel = Tensor::randn(Shape{L, 3}, rng);
    MaskSpec m = make_mask(T, 0.3, 1.0, rng.next_u64());
    std::vector<TokenSentence> sents;
    const int slen = std::min(T, 1 + int(rng.uniform_int(4)));
    TokenSentence s;
    s.onset = int(rng.uniform_int(uint64_t(T - slen + 1)));
    for (int i = 0; i < slen; i++) s.tokens.push_back(1 + int(rng.uniform_int(32)));
    sents.push_back(s);
    ConditionBundle b = build_bundle(latent, mel, sents, m, trial % 2 ? 0.1 : 0.0, trial);
    REQUIRE(b.frames() == T);
    REQUIRE(b.mask_count() == m.length);
    for (int f = 0; f < T; f++) {
      const bool masked = f >= m.start && f < m.start + m.length;
      CHECK(bool(b.mask[size_t(f)]) == masked);
      for (int j = 0; j < 5; j++)
        CHECK(b.z_ctx.at(f, j) == (masked ? 0.0 : latent.at(f, j)));
    }
  }
}

TEST_CASE("build_bundle full mask and validation") {
  Rng rng(12);
  Tensor latent = Tensor::randn(Shape{10, 4}, rng);
  Tensor mel = Tensor::randn(Shape{4, 2}, rng);
  ConditionBundle b = build_bundle(latent, mel, {}, MaskSpec{0, 10});
  for (double v : b.z_ctx.data) CHECK(v == 0.0);
  CHECK(b.melody.shape == Shape{10, 2});
  CHECK_THROWS_AS(build_bundle(latent, mel, {}, MaskSpec{0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(build_bundle(latent, mel, {}, MaskSpec{5, 6}), std::invalid_argument);
}

TEST_CASE("edit_sentences places prompt at zero and target at mask start") {
  auto sents = edit_sentences({1, 2, 3}, {4, 5}, 12);
  REQUIRE(sents.size() == 2);
  CHECK(sents[0].onset == 0);
  CHECK(sents[0].tokens == std::vector<int>{1, 2, 3});
  CHECK(sents[1].onset == 12);
  CHECK(sents[1].tokens == std::vector<int>{4, 5});
  CHECK(edit_sentences({}, {7}, 3).size() == 1);
}

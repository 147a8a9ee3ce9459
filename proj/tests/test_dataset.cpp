#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "vop/dataset.hpp"

using namespace vop;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "vop_test_dataset";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("batch layout") {
  const TransitionBatch b = generate_batch(2, 3, 5);
  REQUIRE(b.transitions.size() == 6);
  std::set<int> episodes, steps;
  for (const auto& t : b.transitions) {
    episodes.insert(t.episode_id);
    steps.insert(t.step_index);
  }
  CHECK(episodes == std::set<int>{0, 1});
  CHECK(steps == std::set<int>{0, 1, 2});
  for (std::size_t i = 0; i + 1 < b.transitions.size(); ++i) {
    const auto& t = b.transitions[i];
    const auto& n = b.transitions[i + 1];
    if (n.episode_id == t.episode_id) CHECK(n.s == t.s_next);
    CHECK(env_step(t.s, t.a, PhysicsParams{}) == t.s_next);
  }
  CHECK_NOTHROW(b.validate());
}

TEST_CASE("generation is deterministic and independent of the worker count") {
  CHECK(generate_batch(20, 30, 7, {}, 1) == generate_batch(20, 30, 7, {}, 3));
  CHECK(!(generate_batch(5, 5, 7) == generate_batch(5, 5, 8)));
}

TEST_CASE("actions are uniform on the action interval") {
  const TransitionBatch b = generate_batch(400, 250, 1);
  const int bins = 20;
  std::vector<int> counts(bins, 0);
  for (const auto& t : b.transitions) {
    CHECK(std::abs(t.a) <= 2.0);
    counts[std::min(bins - 1, static_cast<int>((t.a + 2.0) / 4.0 * bins))]++;
  }
  const double expected = static_cast<double>(b.transitions.size()) / bins;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 19 degrees of freedom, 0.999 quantile.
  CHECK(chi2 < 43.8);
}

TEST_CASE("normalization statistics") {
  TransitionBatch same;
  for (int i = 0; i < 3; ++i) {
    same.transitions.push_back({{0.5, 0.1, 0, 0}, 0.0, {0.5, 0.1, 0, 0}, 0, i});
  }
  NormStats s = compute_norm_stats(same);
  CHECK(s.mu_s(0) == doctest::Approx(0.5));
  CHECK(s.sigma_s(0) == kSigmaFloor);
  CHECK(s.sigma_ds(1) == kSigmaFloor);

  TransitionBatch two;
  two.transitions.push_back({{0, 0, 0, 0}, 0.0, {0, 0, 0, 0}, 0, 0});
  two.transitions.push_back({{2, 0, 0, 0}, 0.0, {2, 0, 0, 0}, 0, 1});
  s = compute_norm_stats(two);
  CHECK(s.mu_s(0) == doctest::Approx(1.0));
  CHECK(s.sigma_s(0) == doctest::Approx(1.0));

  const Eigen::Vector4d d = state_delta({0, -3.1, 0, 0}, {0, 3.1, 0, 0});
  CHECK(d(1) == doctest::Approx(2 * kPi - 6.2));
  const EnvState back = apply_delta({0, 3.1, 0, 0}, d);
  CHECK(back.theta == doctest::Approx(-3.1));

  const TransitionBatch b = generate_batch(50, 100, 3);
  s = compute_norm_stats(b);
  Eigen::Vector4d mean = Eigen::Vector4d::Zero(), sq = Eigen::Vector4d::Zero();
  for (const auto& t : b.transitions) {
    const Eigen::Vector4d z = (t.s.vec() - s.mu_s).cwiseQuotient(s.sigma_s);
    mean += z;
    sq += z.cwiseProduct(z);
  }
  const double n = static_cast<double>(b.transitions.size());
  mean /= n;
  sq /= n;
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(mean(i)) < 1e-9);
    CHECK(std::abs(std::sqrt(sq(i) - mean(i) * mean(i)) - 1.0) < 1e-9);
  }
}

TEST_CASE("jsonl round trip and corruption") {
  const TransitionBatch b = generate_batch(3, 4, 2);
  const fs::path p = temp_path("batch.jsonl");
  save_batch(b, p.string());
  CHECK(load_batch(p.string()) == b);

  const fs::path again = temp_path("batch2.jsonl");
  save_batch(load_batch(p.string()), again.string());
  CHECK(read_all(p) == read_all(again));

  const std::string text = read_all(p);
  const fs::path cut = temp_path("cut.jsonl");
  std::ofstream(cut, std::ios::binary) << text.substr(0, text.size() - 40);
  CHECK_THROWS_AS(load_batch(cut.string()), ParseError);

  TransitionBatch bad = b;
  bad.transitions[5].a = 3.0;
  CHECK_THROWS(bad.validate());
  const fs::path badp = temp_path("bad.jsonl");
  save_batch(b, badp.string());
  std::string t = read_all(badp);
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < t.size()) {
    const std::size_t nl = t.find('\n', pos);
    lines.push_back(t.substr(pos, nl - pos));
    pos = nl + 1;
  }
  nlohmann::ordered_json rec = nlohmann::ordered_json::parse(lines.back());
  rec["a"] = 3.0;
  lines.back() = rec.dump();
  {
    std::ofstream out(badp, std::ios::binary);
    for (const auto& l : lines) out << l << "\n";
  }
  try {
    load_batch(badp.string());
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == lines.size());
  }

  CHECK_THROWS(load_batch(temp_path("does_not_exist.jsonl").string()));
}

TEST_CASE("norm stats persistence") {
  const NormStats s = compute_norm_stats(generate_batch(5, 20, 1));
  const fs::path p = temp_path("norm.json");
  save_norm_stats(s, p.string());
  CHECK(load_norm_stats(p.string()) == s);
}

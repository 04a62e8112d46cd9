#include <algorithm>

#include "doctest.h"
#include "fixtures.hpp"
#include "poisonforge/data.hpp"
#include "poisonforge/errors.hpp"
#include "poisonforge/random.hpp"

namespace pf = poisonforge;

TEST_CASE("IDX parser reads big-endian headers and scales pixels") {
  const auto dir = pftest::scratch_dir("idx");
  std::vector<std::vector<unsigned char>> px{{0, 255, 128, 1}, {10, 20, 30, 40}, {255, 255, 0, 0}};
  pftest::write_idx(dir / "img", dir / "lab", px, {3, 9, 0}, 2, 2);
  const auto d = pf::load_idx(dir / "img", dir / "lab");
  CHECK(d.size() == 3);
  CHECK(d.images.shape() == pf::Shape{3, 1, 2, 2});
  CHECK(d.labels == std::vector<int>{3, 9, 0});
  CHECK(d.image(0)[1] == 1.0f);
  CHECK(d.image(0)[2] == doctest::Approx(128.0 / 255.0));
  CHECK(d.class_counts()[9] == 1);
}

TEST_CASE("IDX parser rejects malformed files") {
  const auto dir = pftest::scratch_dir("idx-bad");
  std::vector<std::vector<unsigned char>> px{{0, 1, 2, 3}};
  SUBCASE("count mismatch") {
    pftest::write_idx(dir / "img", dir / "lab", px, {1, 2}, 2, 2);
    CHECK_THROWS_AS(pf::load_idx(dir / "img", dir / "lab"), pf::DataError);
  }
  SUBCASE("truncated pixels") {
    pftest::write_idx(dir / "img", dir / "lab", px, {1}, 2, 2);
    std::filesystem::resize_file(dir / "img", 16 + 2);
    CHECK_THROWS_AS(pf::load_idx(dir / "img", dir / "lab"), pf::DataError);
  }
  SUBCASE("files swapped") {
    pftest::write_idx(dir / "img", dir / "lab", px, {1}, 2, 2);
    CHECK_THROWS_AS(pf::load_idx(dir / "lab", dir / "img"), pf::DataError);
  }
  SUBCASE("labels above 9 widen the class count") {
    pftest::write_idx(dir / "img", dir / "lab", px, {12}, 2, 2);
    CHECK(pf::load_idx(dir / "img", dir / "lab").num_classes == 13);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(pf::load_idx(dir / "nope", dir / "nope2"), pf::DataError);
  }
}

TEST_CASE("data directory resolution") {
  CHECK(pf::resolve_data_dir("/some/dir") == std::filesystem::path("/some/dir"));
  const char* saved = std::getenv("POISONFORGE_DATA");
  std::string keep = saved ? saved : "";
  unsetenv("POISONFORGE_DATA");
  CHECK_THROWS_AS(pf::resolve_data_dir(""), pf::ConfigError);
  setenv("POISONFORGE_DATA", "/env/dir", 1);
  CHECK(pf::resolve_data_dir("") == std::filesystem::path("/env/dir"));
  if (saved) setenv("POISONFORGE_DATA", keep.c_str(), 1);
  else unsetenv("POISONFORGE_DATA");
}

TEST_CASE("poison plan sizes, membership and determinism") {
  const auto data = pftest::toy_digits(100, 2);  // 100 per class
  auto plan = pf::make_poison_plan(data, 4, 9, 0.07, pf::RatioBasis::target_class_subset, 5);
  CHECK(plan.selected_indices.size() == 7);
  CHECK(std::is_sorted(plan.selected_indices.begin(), plan.selected_indices.end()));
  for (auto i : plan.selected_indices) CHECK(data.labels[i] == 4);
  auto again = pf::make_poison_plan(data, 4, 9, 0.07, pf::RatioBasis::target_class_subset, 5);
  CHECK(plan.selected_indices == again.selected_indices);

  CHECK(pf::make_poison_plan(data, 4, 9, 0.0, pf::RatioBasis::target_class_subset, 5)
            .selected_indices.empty());
  CHECK(pf::make_poison_plan(data, 4, 9, 1.0, pf::RatioBasis::target_class_subset, 5)
            .selected_indices.size() == 100);
  // whole_set: 5% of 1000 = 50 target-class rows
  CHECK(pf::make_poison_plan(data, 4, 9, 0.05, pf::RatioBasis::whole_set, 5)
            .selected_indices.size() == 50);
  CHECK_THROWS_AS(pf::make_poison_plan(data, 4, 9, 0.2, pf::RatioBasis::whole_set, 5),
                  pf::ConfigError);
  CHECK_THROWS_AS(pf::make_poison_plan(data, 4, 9, -0.1, pf::RatioBasis::whole_set, 5),
                  pf::ConfigError);

  auto relabel = pf::make_poison_plan(data, 4, 9, 0.1, pf::RatioBasis::target_class_subset, 5,
                                      pf::LabelMode::relabel);
  CHECK(relabel.selected_indices.size() == 10);
  for (auto i : relabel.selected_indices) CHECK(data.labels[i] == 9);
}

TEST_CASE("apply_poison replaces rows positionally") {
  const auto data = pftest::toy_digits(20, 3);
  auto plan = pf::make_poison_plan(data, 4, 9, 0.25, pf::RatioBasis::target_class_subset, 1);
  pf::Tensor crafted({plan.selected_indices.size(), 1, 28, 28},
                     std::vector<float>(plan.selected_indices.size() * 784, 0.5f));
  auto poisoned = pf::apply_poison(data, plan, crafted);
  CHECK(poisoned.data.size() == data.size());
  CHECK(poisoned.poison_indices() == plan.selected_indices);
  CHECK(poisoned.data.labels == data.labels);
  for (auto i : plan.selected_indices) CHECK(poisoned.data.image(i)[0] == 0.5f);
  CHECK(data.image(plan.selected_indices[0])[0] != 0.5f);  // source untouched

  auto rp = pf::make_poison_plan(data, 4, 9, 0.25, pf::RatioBasis::target_class_subset, 1,
                                 pf::LabelMode::relabel);
  auto relabeled = pf::apply_poison(data, rp, crafted);
  for (auto i : rp.selected_indices) CHECK(relabeled.data.labels[i] == 4);

  pf::Tensor wrong({1, 1, 28, 28}, std::vector<float>(784, 0.5f));
  CHECK_THROWS_AS(pf::apply_poison(data, plan, wrong), pf::DataError);

  std::vector<bool> flagged(data.size(), false);
  flagged[plan.selected_indices[0]] = true;
  flagged[0] = true;
  auto kept = pf::remove_flagged(poisoned, flagged);
  CHECK(kept.data.size() == data.size() - 2);
  CHECK(kept.poison_indices().size() == plan.selected_indices.size() - 1);
}

TEST_CASE("named seed streams are stable and distinct") {
  CHECK(pf::derive_seed(0, "craft") == pf::derive_seed(0, "craft"));
  CHECK(pf::derive_seed(0, "craft") != pf::derive_seed(0, "train"));
  CHECK(pf::derive_seed(0, "craft") != pf::derive_seed(1, "craft"));
  pf::Rng a(3, "x"), b(3, "x");
  CHECK(a.permutation(50) == b.permutation(50));
  auto s = pf::Rng(4).sample_without_replacement(30, 30);
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < 30; ++i) CHECK(s[i] == i);
}

TEST_CASE("random_subset keeps ascending order and size") {
  const auto data = pftest::toy_digits(10, 4);
  auto sub = pf::random_subset(data, 37, 9);
  CHECK(sub.size() == 37);
  CHECK(pf::random_subset(data, 37, 9).labels == sub.labels);
}

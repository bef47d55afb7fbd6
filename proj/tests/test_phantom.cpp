#include <doctest.h>

#include <algorithm>
#include <set>

#include "petsr/phantom.hpp"
#include "petsr/psrg_io.hpp"
#include "test_util.hpp"

using namespace petsr;

namespace {

PhantomSpec spec_with_seed(std::uint64_t seed) {
  PhantomSpec s;
  s.seed = seed;
  return s;
}

// Every neighboring pixel pair (right and down) whose values differ.
std::set<std::pair<std::size_t, std::size_t>> boundary_pairs(const GridImage& img) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  const std::size_t n = img.width();
  for (std::size_t r = 0; r < img.height(); ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t i = r * n + c;
      if (c + 1 < n && img[i] != img[i + 1]) out.insert({i, i + 1});
      if (r + 1 < img.height() && img[i] != img[i + n]) out.insert({i, i + n});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("phantom without lesions is piecewise constant") {
  PhantomSpec s = spec_with_seed(5);
  s.n_lesions = 0;
  const Phantom ph = generate_phantom(s);
  CHECK(ph.lesions.empty());
  std::set<double> levels(ph.activity.values().begin(), ph.activity.values().end());
  CHECK(levels.size() <= s.n_organs + 1);
}

TEST_CASE("phantom generation is deterministic") {
  const Phantom a = generate_phantom(spec_with_seed(42));
  const Phantom b = generate_phantom(spec_with_seed(42));
  CHECK(std::equal(a.activity.values().begin(), a.activity.values().end(), b.activity.values().begin()));
  CHECK(std::equal(a.anatomy.values().begin(), a.anatomy.values().end(), b.anatomy.values().begin()));
  REQUIRE(a.lesions.size() == b.lesions.size());
  for (std::size_t i = 0; i < a.lesions.size(); ++i) CHECK(a.lesions[i].mask == b.lesions[i].mask);
  const Phantom c = generate_phantom(spec_with_seed(43));
  CHECK_FALSE(std::equal(a.activity.values().begin(), a.activity.values().end(), c.activity.values().begin()));
}

TEST_CASE("anatomy boundaries are activity boundaries and lesions are functional only") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const Phantom ph = generate_phantom(spec_with_seed(seed));
    CHECK(*std::min_element(ph.activity.values().begin(), ph.activity.values().end()) >= 0.0);
    const auto anat = boundary_pairs(ph.anatomy);
    const auto act = boundary_pairs(ph.activity);
    CHECK(std::includes(act.begin(), act.end(), anat.begin(), anat.end()));

    REQUIRE(ph.lesions.size() == 2);
    for (const auto& m : ph.lesions) {
      CHECK(m.count() > 0);
      for (std::size_t i = 0; i < m.mask.size(); ++i) {
        if (!m.mask[i]) continue;
        // The anatomy under a lesion is the tissue value of its organ label.
        const std::uint8_t label = ph.labels[i];
        CHECK(label > 0);
        for (std::size_t j = 0; j < ph.labels.size(); ++j) {
          if (ph.labels[j] == label) {
            CHECK(ph.anatomy[i] == ph.anatomy[j]);
            break;
          }
        }
      }
    }
  }
}

TEST_CASE("lesions raise activity over the host organ") {
  const Phantom ph = generate_phantom(spec_with_seed(9));
  for (const auto& m : ph.lesions) {
    for (std::size_t i = 0; i < m.mask.size(); ++i) {
      if (!m.mask[i]) continue;
      // Find an unlesioned pixel of the same organ.
      for (std::size_t j = 0; j < ph.labels.size(); ++j) {
        bool in_lesion = false;
        for (const auto& o : ph.lesions) in_lesion = in_lesion || o.mask[j];
        if (ph.labels[j] == ph.labels[i] && !in_lesion) {
          const double ratio = ph.activity[i] / ph.activity[j];
          CHECK(ratio >= 2.0);
          CHECK(ratio <= 4.0);
          break;
        }
      }
      break;
    }
  }
}

TEST_CASE("lesion-in-anatomy flag marks lesions in the anatomy") {
  PhantomSpec s = spec_with_seed(3);
  s.lesion_in_anatomy = true;
  const Phantom ph = generate_phantom(s);
  for (const auto& m : ph.lesions) {
    for (std::size_t i = 0; i < m.mask.size(); ++i) {
      if (m.mask[i]) CHECK(ph.anatomy[i] == 1.1);
    }
  }
}

TEST_CASE("impossible lesion placement raises a generation error naming the seed") {
  PhantomSpec s = spec_with_seed(77);
  s.lesion_radius_mm = {150.0, 160.0};
  try {
    generate_phantom(s);
    FAIL("expected GenerationError");
  } catch (const GenerationError& e) {
    CHECK(std::string(e.what()).find("77") != std::string::npos);
  }
  s.n_organs = 7;
  CHECK_THROWS_AS(generate_phantom(s), ConfigError);
}

TEST_CASE("dataset split counts and manifest") {
  const SplitCounts c = split_counts(50, {0.8, 0.1, 0.1});
  CHECK(c.train == 40);
  CHECK(c.val == 5);
  CHECK(c.test == 5);
  CHECK_THROWS_AS(split_counts(10, {0.8, 0.1, 0.2}), ConfigError);

  const auto dir = testutil::scratch_dir("dataset");
  PhantomSpec base = spec_with_seed(100);
  base.grid_size = 32;
  base.lesion_radius_mm = {3.0, 4.0};
  const auto manifest = generate_dataset(base, 10, {0.8, 0.1, 0.1}, dir / "a");
  const auto entries = read_manifest(manifest);
  REQUIRE(entries.size() == 10);
  CHECK(entries[0].case_id == "case_0000");
  CHECK(entries[7].split == "train");
  CHECK(entries[8].split == "val");
  CHECK(entries[9].split == "test");
  CHECK(entries[3].seed == 103);
  CHECK(std::filesystem::exists(dir / "a" / entries[3].activity));

  generate_dataset(base, 10, {0.8, 0.1, 0.1}, dir / "b");
  CHECK(testutil::slurp(dir / "a" / "manifest.csv") == testutil::slurp(dir / "b" / "manifest.csv"));
  CHECK(testutil::slurp(dir / "a" / entries[5].activity) == testutil::slurp(dir / "b" / entries[5].activity));

  const auto empty = generate_dataset(base, 0, {0.8, 0.1, 0.1}, dir / "c");
  CHECK(read_manifest(empty).empty());
}

TEST_CASE("manifest lines round-trip") {
  ManifestEntry e{"case_0003", "test", "case_0003/activity.psrg", "case_0003/anatomy.psrg",
                  {"case_0003/lesion_0.psrg", "case_0003/lesion_1.psrg"}, 1234};
  const std::string line = format_manifest_line(e);
  CHECK(line ==
        "case_0003,test,case_0003/activity.psrg,case_0003/anatomy.psrg,"
        "case_0003/lesion_0.psrg;case_0003/lesion_1.psrg,1234");
  const ManifestEntry b = parse_manifest_line(line);
  CHECK(b.case_id == e.case_id);
  CHECK(b.masks == e.masks);
  CHECK(b.seed == 1234);
  CHECK_THROWS_AS(parse_manifest_line("a,b,c"), IoError);
}

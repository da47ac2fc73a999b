#include "fastmoco/config.hpp"
#include "fastmoco/util.hpp"

#include <doctest.h>

#include <filesystem>
#include <set>

using namespace fastmoco;

TEST_CASE("config parsing and validation") {
  SUBCASE("defaults validate") {
    RunConfig cfg;
    CHECK_NOTHROW(validate_config(cfg));
    CHECK(resolved_pairs_used(cfg) == 6);  // all C(4,2) at m=2, n=2
  }
  SUBCASE("text parsing with comments") {
    auto cfg = parse_config_text("divide_m = 2  # grid\n\ncombine_n=2\ntau = 0.5\n");
    CHECK(cfg.divide_m == 2);
    CHECK(cfg.tau == 0.5);
  }
  SUBCASE("unknown keys rejected") {
    CHECK_THROWS_WITH_AS(parse_config_text("no_such_key = 1\n"), doctest::Contains("no_such_key"),
                         config_error);
  }
  SUBCASE("combine_n larger than the grid rejected with the field name") {
    RunConfig cfg;
    config_set(cfg, "combine_n", "5");
    config_set(cfg, "divide_m", "2");
    CHECK_THROWS_WITH_AS(validate_config(cfg), doctest::Contains("combine_n"), config_error);
  }
  SUBCASE("range checks cover representative fields") {
    RunConfig cfg;
    cfg.tau = 0.0;
    CHECK_THROWS_AS(validate_config(cfg), config_error);
    cfg = RunConfig{};
    cfg.ema_alpha = 1.5;
    CHECK_THROWS_AS(validate_config(cfg), config_error);
    cfg.ema_alpha = 1.0;  // frozen-target expression is legal
    CHECK_NOTHROW(validate_config(cfg));
    cfg = RunConfig{};
    cfg.weighted_gamma = 0.3;
    CHECK_THROWS_AS(validate_config(cfg), config_error);
    cfg = RunConfig{};
    cfg.pipeline = "bogus";
    CHECK_THROWS_AS(validate_config(cfg), config_error);
    cfg = RunConfig{};
    cfg.pairs_used = 3;  // unequal patch usage at m=2, n=2
    CHECK_THROWS_AS(validate_config(cfg), config_error);
    cfg = RunConfig{};
    cfg.combine_op = "weighted";
    cfg.combine_n = 1;
    CHECK_THROWS_AS(validate_config(cfg), config_error);
    cfg = RunConfig{};
    cfg.combine_stage = "stage2";
    cfg.divide_m = 4;
    CHECK_THROWS_AS(validate_config(cfg), config_error);
  }
  SUBCASE("round trip parse(serialize(cfg)) is identity") {
    RunConfig cfg;
    cfg.pipeline = "sec";
    cfg.lr0 = 0.0375;
    cfg.seed = 987654321;
    cfg.same_view_positive = true;
    auto back = parse_config_text(serialize_config(cfg));
    CHECK(serialize_config(back) == serialize_config(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
  }
  SUBCASE("hash distinguishes configs") {
    RunConfig a, b;
    b.combine_n = 1;
    CHECK(config_hash(a) != config_hash(b));
    CHECK(config_hash(a).size() == 16);
  }
  SUBCASE("every key appears in the help listing") {
    auto infos = config_key_infos();
    std::set<std::string> keys;
    for (const auto& i : infos) {
      CHECK_FALSE(i.legal.empty());
      keys.insert(i.key);
    }
    for (const char* k : {"pipeline", "divide_m", "combine_n", "combine_op", "combine_stage",
                          "pairs_used", "weighted_gamma", "beta_alpha", "same_view_positive",
                          "multicrop_mode", "tau", "ema_alpha", "lr0", "warmup_epochs", "batch",
                          "epochs", "seed", "deterministic", "dtype", "dataset", "out_dir"})
      CHECK(keys.count(k) == 1);
  }
}

TEST_CASE("ablation matrices") {
  const auto dir = std::filesystem::temp_directory_path() / "fastmoco_matrix_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "matrix.txt").string();

  SUBCASE("pipeline comparison matrix has six cells") {
    write_text_atomic(path,
                      "set epochs = 1\n"
                      "axis pipeline = fastmoco, sec, encode_only, divide_combine_encode, "
                      "sample_combine_encode, montage\n");
    auto cells = expand_matrix(parse_matrix_file(path));
    CHECK(cells.size() == 6);
    std::set<std::string> ids;
    for (const auto& c : cells) ids.insert(c.cell_id);
    CHECK(ids.size() == 6);  // duplicate-free
  }
  SUBCASE("divide/combine grid keeps only feasible cells: 1+4+9") {
    write_text_atomic(path,
                      "set image_size = 36\n"  // divisible by every m in the sweep
                      "axis divide_m = 1, 2, 3\n"
                      "axis combine_n = 1, 2, 3, 4, 5, 6, 7, 8, 9\n");
    auto cells = expand_matrix(parse_matrix_file(path));
    CHECK(cells.size() == 14);
  }
  SUBCASE("derived seeds differ per cell unless pinned") {
    write_text_atomic(path, "axis combine_n = 1, 2\n");
    auto cells = expand_matrix(parse_matrix_file(path));
    REQUIRE(cells.size() == 2);
    CHECK(cells[0].config.seed != cells[1].config.seed);

    write_text_atomic(path, "axis combine_n = 1, 2\naxis seed = 5, 6\n");
    auto pinned = expand_matrix(parse_matrix_file(path));
    REQUIRE(pinned.size() == 4);
    std::set<std::uint64_t> seeds;
    for (const auto& c : pinned) seeds.insert(c.config.seed);
    CHECK(seeds == std::set<std::uint64_t>{5, 6});
  }
  SUBCASE("malformed lines surface with file and line") {
    write_text_atomic(path, "frobnicate = 1\n");
    CHECK_THROWS_WITH_AS(parse_matrix_file(path), doctest::Contains("matrix.txt:1"), config_error);
  }
  std::filesystem::remove_all(dir);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ctmle/scenario.hpp"

using namespace ctmle;

namespace {

namespace fs = std::filesystem;

std::string temp_dir(const std::string& tag) {
  const auto dir = fs::temp_directory_path() / ("ctmle_scn_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ScenarioSpec tiny_spec(const std::string& out_tag) {
  ScenarioSpec spec;
  spec.id = "4";
  spec.triplets = {{90, 40, 0.0}};
  spec.b = 4;
  spec.seed = 77;
  spec.threads = 2;
  spec.oracle_draws = 20000;
  spec.oracle_cache_file = (fs::temp_directory_path() / ("ctmle_oc_" + out_tag + ".json")).string();
  fs::remove(spec.oracle_cache_file);
  return spec;
}

}  // namespace

TEST_CASE("published (n, p) schedules") {
  const auto t1 = make_triplets("1", {}, {}, {});
  REQUIRE(t1.size() == 10);
  CHECK(t1.front().n == 200);
  CHECK(t1.front().p == 40);
  CHECK(t1.back().n == 2000);
  CHECK(t1.back().p == 400);

  const std::vector<int> p2 = {40, 56, 69, 80, 89, 98, 105, 113, 120, 126};
  const std::vector<int> p3 = {40, 45, 48, 50, 52, 53, 55, 56, 56, 57};
  const auto t2 = make_triplets("2", {}, {}, {});
  const auto t3 = make_triplets("3", {}, {}, {});
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(t2[i].p == p2[i]);
    CHECK(t3[i].p == p3[i]);
  }

  const auto t5 = make_triplets("5", {}, {}, {});
  REQUIRE(t5.size() == 5);
  for (const auto& t : t5) CHECK(t.n == 1000);
  CHECK(t5[1].p == 75);

  const auto t6 = make_triplets("6", {}, {}, {});
  REQUIRE(t6.size() == 16);
  CHECK(t6.front().delta == doctest::Approx(0.5));
  CHECK(t6.back().delta == doctest::Approx(2.0));
  for (const auto& t : t6) {
    CHECK(t.n == 500);
    CHECK(t.p == 50);
  }

  const auto tt = make_triplets("transfer", {}, {}, {});
  REQUIRE(tt.size() == 2);
  CHECK(tt[0].p == 100);
  CHECK(tt[1].p == 200);

  const auto custom = make_triplets("4", {100, 200}, {12, 20}, {0.0, 1.0});
  CHECK(custom.size() == 8);  // cross product

  CHECK_THROWS_AS(make_triplets("9", {}, {}, {}), std::invalid_argument);
}

TEST_CASE("aggregation arithmetic") {
  const CellStats cell = aggregate_values("x", {0.1, 0.2, 0.3}, {}, 0.2, 0.0);
  CHECK(cell.bias == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cell.se == doctest::Approx(0.081649658092772603).epsilon(1e-12));
  CHECK(cell.mse == doctest::Approx(0.0066666666666666671).epsilon(1e-10));
  CHECK(cell.completed == 3);
  CHECK(!cell.ratio.has_value());
  CHECK(!cell.coverage.has_value());

  // coverage / ratio / width bookkeeping: each interval is psi_b +/- 0.0196,
  // so only the middle one contains 0.2
  std::vector<EstimateWithCI> cis = {wald_ci(0.1, 0.01, 100), wald_ci(0.2, 0.01, 100),
                                     wald_ci(0.3, 0.01, 100)};
  const CellStats with_ci = aggregate_values("x", {0.1, 0.2, 0.3}, cis, 0.2, 0.0392 * 2);
  REQUIRE(with_ci.coverage.has_value());
  CHECK(*with_ci.coverage == doctest::Approx(1.0 / 3.0));
  CHECK(*with_ci.ratio == doctest::Approx(0.01 / 0.081649658092772603).epsilon(1e-9));
  CHECK(*with_ci.ci_width_rel == doctest::Approx(0.5).epsilon(1e-9));

  const CellStats empty = aggregate_values("x", {}, {}, 0.2, 0.0);
  CHECK(empty.completed == 0);
}

TEST_CASE("tiny scenario run: identities, determinism, worker independence") {
  const ScenarioSpec spec = tiny_spec("a");
  const ScenarioReport report = run_scenario(spec);
  REQUIRE(report.triplets.size() == 1);
  CHECK(report.triplets[0].psi0_se < 5e-4);

  for (const auto& cell : report.triplets[0].cells) {
    CHECK(cell.mse ==
          doctest::Approx(cell.bias * cell.bias + cell.se * cell.se).epsilon(1e-12));
    if (cell.coverage) {
      CHECK(*cell.coverage >= 0.0);
      CHECK(*cell.coverage <= 1.0);
    }
  }
  const CellStats* tmle = report.find_cell(0, "tmle");
  REQUIRE(tmle != nullptr);
  if (tmle->ci_width_rel) CHECK(*tmle->ci_width_rel == doctest::Approx(1.0));

  const std::string dir1 = temp_dir("d1");
  emit_report(report, dir1);

  // identical spec, fresh run: byte-identical summary
  const ScenarioReport again = run_scenario(spec);
  const std::string dir2 = temp_dir("d2");
  emit_report(again, dir2);
  CHECK(file_bytes(dir1 + "/summary.csv") == file_bytes(dir2 + "/summary.csv"));
  CHECK(file_bytes(dir1 + "/figure_data.csv") == file_bytes(dir2 + "/figure_data.csv"));

  // single-threaded run gives the same report
  ScenarioSpec serial = spec;
  serial.threads = 1;
  const ScenarioReport serial_report = run_scenario(serial);
  const std::string dir3 = temp_dir("d3");
  emit_report(serial_report, dir3);
  CHECK(file_bytes(dir1 + "/summary.csv") == file_bytes(dir3 + "/summary.csv"));

  fs::remove_all(dir1);
  fs::remove_all(dir2);
  fs::remove_all(dir3);
  fs::remove(spec.oracle_cache_file);
}

TEST_CASE("summary csv round trip reproduces the aggregates") {
  const ScenarioSpec spec = tiny_spec("b");
  const ScenarioReport report = run_scenario(spec);
  const std::string dir = temp_dir("rt");
  emit_report(report, dir);
  const auto rows = read_summary_csv(dir + "/summary.csv");
  REQUIRE(rows.size() == report.triplets[0].cells.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const CellStats& cell = report.triplets[0].cells[i];
    CHECK(rows[i].estimator == cell.estimator);
    CHECK(rows[i].n == 90);
    CHECK(rows[i].p == 40);
    CHECK(rows[i].bias_x10 == cell.bias * 10.0);    // exact through %.17g
    CHECK(rows[i].se_x10 == cell.se * 10.0);
    CHECK(rows[i].mse_x100 == cell.mse * 100.0);
    CHECK(rows[i].completed_reps == cell.completed);
    CHECK(rows[i].ratio.has_value() == cell.ratio.has_value());
    if (cell.ratio) CHECK(*rows[i].ratio == *cell.ratio);
  }
  fs::remove_all(dir);
  fs::remove(spec.oracle_cache_file);
}

TEST_CASE("empty report writes header-only files") {
  ScenarioReport report;
  report.id = "1";
  const std::string dir = temp_dir("empty");
  emit_report(report, dir);
  CHECK(file_bytes(dir + "/summary.csv") ==
        "scenario,n,p,delta,estimator,bias_x10,se_x10,mse_x100,ratio,coverage,"
        "ci_width_rel,completed_reps\n");
  CHECK(file_bytes(dir + "/figure_data.csv") == "scenario,n,p,delta,estimator,metric,value\n");
  fs::remove_all(dir);
}

TEST_CASE("failed repetitions are excluded and counted") {
  ScenarioSpec spec;
  spec.id = "6";
  spec.triplets = {{30, 10, 8.0}};  // nearly every draw is single-arm
  spec.b = 6;
  spec.seed = 3;
  spec.threads = 2;
  spec.oracle_draws = 20000;
  spec.estimators = {"unadj", "gcomp"};
  spec.oracle_cache_file = (fs::temp_directory_path() / "ctmle_oc_fail.json").string();
  fs::remove(spec.oracle_cache_file);

  const ScenarioReport report = run_scenario(spec);
  CHECK(report.any_failures());
  const CellStats* unadj = report.find_cell(0, "unadj");
  REQUIRE(unadj != nullptr);
  CHECK(unadj->completed < spec.b);
  CHECK(!report.triplets[0].failures.empty());
  fs::remove(spec.oracle_cache_file);
}

TEST_CASE("transfer run shares the collaborative penalty across primed estimators") {
  ScenarioSpec spec;
  spec.id = "transfer";
  spec.triplets = {{130, 15, 0.0}};
  spec.b = 3;
  spec.seed = 5;
  spec.threads = 2;
  spec.v_folds = 5;
  spec.oracle_draws = 20000;
  spec.oracle_cache_file = (fs::temp_directory_path() / "ctmle_oc_tr.json").string();
  fs::remove(spec.oracle_cache_file);

  const ScenarioReport report = run_transfer(spec);
  REQUIRE(report.triplets.size() == 1);
  for (const char* name : {"iptw", "iptw_p", "aiptw", "aiptw_p", "tmle", "tmle_p", "lctmle",
                           "lpctmle", "lpctmle_p"}) {
    const CellStats* cell = report.find_cell(0, name);
    REQUIRE(cell != nullptr);
    CHECK(cell->completed == spec.b);
  }
  CHECK_THROWS_AS(run_transfer(tiny_spec("x")), std::invalid_argument);
  ScenarioSpec wrong = spec;
  CHECK_THROWS_AS(run_scenario(wrong), std::invalid_argument);
  fs::remove(spec.oracle_cache_file);
}

TEST_CASE("oracle precision is enforced before coverage scoring") {
  ScenarioSpec spec = tiny_spec("prec");
  // a cached truth that is too noisy for coverage scoring must be rejected
  {
    OracleCache cache(spec.oracle_cache_file);
    cache.store(SyntheticConfig{spec.triplets[0].p, spec.triplets[0].delta}, spec.oracle_draws,
                spec.oracle_seed, OracleEstimate{0.08, 1e-2});
  }
  CHECK_THROWS_AS(run_scenario(spec), std::invalid_argument);
  fs::remove(spec.oracle_cache_file);
}

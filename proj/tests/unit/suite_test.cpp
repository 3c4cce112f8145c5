#include "bm2/suite.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

#include <chrono>
#include <cstring>
#include <set>

using namespace bm2::suite;

namespace {

const std::vector<CheckResult>& fast_results() {
  static const std::vector<CheckResult> results = run_suite(Tier::fast, Options{});
  return results;
}

}  // namespace

TEST(Suite, FastTierAllPass) {
  const auto& results = fast_results();
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) EXPECT_TRUE(passed(r)) << summary_line(r);
}

TEST(Suite, FastTierCoversItsCriteria) {
  std::set<int> criteria;
  for (const auto& r : fast_results()) criteria.insert(r.criterion);
  EXPECT_EQ(criteria, (std::set<int>{0, 1, 2, 3, 4, 8}));
}

TEST(Suite, CheckNamesAreUnique) {
  std::set<std::string> names;
  for (const auto& r : fast_results()) EXPECT_TRUE(names.insert(r.name).second) << r.name;
}

TEST(Suite, FixedSeedReproducesMeasuredValues) {
  const auto again = run_suite(Tier::fast, Options{});
  const auto& first = fast_results();
  ASSERT_EQ(again.size(), first.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_EQ(first[i].name, again[i].name);
    EXPECT_EQ(0, std::memcmp(&first[i].measured, &again[i].measured, sizeof(double))) << first[i].name;
  }
}

TEST(Suite, JsonLineFields) {
  const CheckResult& r = fast_results().front();
  const auto j = nlohmann::json::parse(to_json_line(r));
  EXPECT_EQ(j.at("name"), r.name);
  EXPECT_EQ(j.at("status"), status_name(r.status));
  EXPECT_EQ(j.at("measured").get<double>(), r.measured);
  EXPECT_EQ(j.at("threshold").get<double>(), r.threshold);
  EXPECT_TRUE(j.contains("runtime_s"));
  EXPECT_EQ(to_json_line(r).find('\n'), std::string::npos);
}

TEST(Suite, FailuresAreResultsNotErrors) {
  CheckResult r;
  r.status = Status::fail;
  EXPECT_FALSE(passed(r));
  r.status = Status::skip;
  EXPECT_FALSE(passed(r));
  r.status = Status::pass;
  EXPECT_TRUE(passed(r));
}

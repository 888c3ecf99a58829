#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "tau/loss.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

using tau::ConfusionCounts;
using tau::LossConfig;
using tau::Rng;
using tau::Shape;
using tau::Tensor;

namespace {

using D = Tensor<double>;

void check_grad(const char* what, const std::function<D(const D&)>& f, const D& x, double tol,
                double eps = 1e-5) {
  auto rep = tau::gradcheck<double>(f, x, eps, tol);
  INFO(what << ": max relative error " << rep.max_rel_err << " (" << rep.worst << ")");
  CHECK(rep.pass);
}

D random_binary(const Shape& s, Rng& rng) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform() < 0.5 ? 0.0 : 1.0;
  return D::from_data(s, std::move(v));
}

ConfusionCounts counts(int64_t tp, int64_t tn, int64_t fp, int64_t fn) {
  ConfusionCounts c;
  c.tp = tp;
  c.tn = tn;
  c.fp = fp;
  c.fn = fn;
  return c;
}

}  // namespace

TEST_CASE("bce_loss: closed-form anchors") {
  SUBCASE("maximally unsure prediction scores ln 2") {
    D y = D::from_data({2}, {1.0, 0.0});
    D p = D::from_data({2}, {0.5, 0.5});
    CHECK(tau::bce_loss(p, y).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("perfect prediction is bounded by the clamp") {
    D y = D::from_data({4}, {1.0, 0.0, 1.0, 0.0});
    double bound = -std::log(1.0 - 1e-7);
    CHECK(tau::bce_loss(y, y).item() <= bound * (1.0 + 1e-9));
    CHECK(tau::bce_loss(y, y).item() > 0.0);
  }
  SUBCASE("shape mismatch is rejected") {
    D y = D::zeros({2, 2});
    D p = D::zeros({4});
    CHECK_THROWS_AS(tau::bce_loss(p, y), std::invalid_argument);
  }
  SUBCASE("non-binary target rejected in checked mode") {
    tau::set_checked_mode(true);
    D y = D::from_data({2}, {1.0, 0.5});
    D p = D::from_data({2}, {0.5, 0.5});
    CHECK_THROWS_AS(tau::bce_loss(p, y), std::invalid_argument);
  }
}

TEST_CASE("bce_loss: gradcheck against interior predictions") {
  Rng rng(41);
  D p = D::uniform({2, 1, 4, 4}, rng, 0.1, 0.9);
  D y = random_binary({2, 1, 4, 4}, rng);
  check_grad("bce", [&](const D& v) { return tau::bce_loss(v, y); }, p, 1e-6);
}

TEST_CASE("dice_loss: closed-form anchors") {
  SUBCASE("perfect binary overlap is within epsilon of zero") {
    Rng rng(42);
    D y = random_binary({1, 1, 4, 4}, rng);
    y.data()[0] = 1.0;  // nonempty foreground
    CHECK(tau::dice_loss(y, y).item() <= 1e-6);
    CHECK(tau::dice_loss(y, y).item() >= 0.0);
  }
  SUBCASE("half-credit hand value") {
    D y = D::from_data({2}, {1.0, 0.0});
    D p = D::from_data({2}, {0.5, 0.5});
    // 1 - (2*0.5 + 1e-6) / (1 + 1 + 1e-6)
    CHECK(tau::dice_loss(p, y).item() == doctest::Approx(0.5).epsilon(1e-5));
  }
  SUBCASE("empty mask against empty prediction resolves to zero") {
    D y = D::zeros({8});
    D p = D::zeros({8});
    CHECK(tau::dice_loss(p, y).item() == 0.0);
  }
  SUBCASE("numerator factor 1 bottoms out at one half") {
    LossConfig cfg;
    cfg.dice_numerator_factor = 1.0;
    Rng rng(43);
    D y = random_binary({1, 1, 4, 4}, rng);
    y.data()[0] = 1.0;
    CHECK(tau::dice_loss(y, y, cfg).item() == doctest::Approx(0.5).epsilon(1e-3));
  }
  SUBCASE("gradcheck") {
    Rng rng(44);
    D p = D::uniform({1, 1, 4, 4}, rng, 0.1, 0.9);
    D y = random_binary({1, 1, 4, 4}, rng);
    check_grad("dice", [&](const D& v) { return tau::dice_loss(v, y); }, p, 1e-6);
  }
}

TEST_CASE("combined_loss: weighting and anchors") {
  D y = D::from_data({2}, {1.0, 0.0});
  D p = D::from_data({2}, {0.5, 0.5});
  SUBCASE("equal-weight hand value") {
    CHECK(tau::combined_loss(p, y).item() == doctest::Approx(0.596574).epsilon(1e-5));
  }
  SUBCASE("alpha=1, beta=0 degenerates to bce exactly") {
    LossConfig cfg;
    cfg.alpha = 1.0;
    cfg.beta = 0.0;
    CHECK(tau::combined_loss(p, y, cfg).item() == tau::bce_loss(p, y, cfg).item());
  }
  SUBCASE("perfect prediction is within 1e-6 of zero") {
    Rng rng(45);
    D t = random_binary({1, 1, 4, 4}, rng);
    t.data()[0] = 1.0;
    CHECK(tau::combined_loss(t, t).item() <= 1e-6);
  }
  SUBCASE("nonnegative on random valid inputs") {
    Rng rng(46);
    for (int i = 0; i < 20; ++i) {
      D q = D::uniform({3, 3}, rng, 0.001, 0.999);
      D t = random_binary({3, 3}, rng);
      CHECK(tau::combined_loss(q, t).item() >= 0.0);
    }
  }
  SUBCASE("gradcheck") {
    Rng rng(47);
    D q = D::uniform({2, 2, 3}, rng, 0.1, 0.9);
    D t = random_binary({2, 2, 3}, rng);
    check_grad("combined", [&](const D& v) { return tau::combined_loss(v, t); }, q, 1e-6);
  }
  SUBCASE("invalid config rejected") {
    LossConfig cfg;
    cfg.alpha = -0.1;
    CHECK_THROWS_AS(tau::combined_loss(p, y, cfg), std::invalid_argument);
    cfg = LossConfig{};
    cfg.epsilon = 0.0;
    CHECK_THROWS_AS(tau::dice_loss(p, y, cfg), std::invalid_argument);
  }
}

TEST_CASE("binarize: threshold with ties counting as foreground") {
  D p = D::from_data({4}, {0.2, 0.8, 0.5, 0.4999});
  D m = tau::binarize(p);
  CHECK(m.data() == std::vector<double>{0.0, 1.0, 1.0, 0.0});
  SUBCASE("idempotent") {
    D mm = tau::binarize(m);
    CHECK(mm.data() == m.data());
  }
  SUBCASE("custom threshold") {
    CHECK(tau::binarize(p, 0.25).data() == std::vector<double>{0.0, 1.0, 1.0, 1.0});
  }
}

TEST_CASE("confusion: exact counts") {
  SUBCASE("perfect mask: 4 foreground / 12 background") {
    std::vector<double> v(16, 0.0);
    for (int i = 0; i < 4; ++i) v[static_cast<size_t>(i)] = 1.0;
    D y = D::from_data({1, 1, 4, 4}, v);
    auto c = tau::confusion(y, y);
    CHECK(c.tp == 4);
    CHECK(c.tn == 12);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    CHECK(c.total() == 16);
  }
  SUBCASE("hand-counted mixed mask on a 4x4 image") {
    std::vector<double> yv(16, 0.0), mv(16, 0.0);
    for (int i = 0; i < 4; ++i) yv[static_cast<size_t>(i)] = 1.0;  // truth: pixels 0..3
    for (int i = 0; i < 3; ++i) mv[static_cast<size_t>(i)] = 1.0;  // hit 3 of them
    mv[5] = 1.0;                                                   // plus one background pixel
    auto c = tau::confusion(D::from_data({1, 1, 4, 4}, mv), D::from_data({1, 1, 4, 4}, yv));
    CHECK(c.tp == 3);
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
    CHECK(c.tn == 11);
    CHECK(c.total() == 16);
  }
  SUBCASE("non-binary input rejected") {
    D y = D::from_data({2}, {1.0, 0.0});
    D m = D::from_data({2}, {0.7, 0.0});
    CHECK_THROWS_AS(tau::confusion(m, y), std::invalid_argument);
    CHECK_THROWS_AS(tau::confusion(y, m), std::invalid_argument);
  }
  SUBCASE("counts always partition the pixels") {
    Rng rng(48);
    for (int i = 0; i < 10; ++i) {
      D a = random_binary({5, 7}, rng);
      D b = random_binary({5, 7}, rng);
      CHECK(tau::confusion(a, b).total() == 35);
    }
  }
}

TEST_CASE("metrics: hand arithmetic and conventions") {
  SUBCASE("tp=3 fp=1 fn=1 tn=11") {
    auto m = tau::metrics(counts(3, 11, 1, 1));
    CHECK(m.dice == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(m.iou == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(m.acc == doctest::Approx(0.875).epsilon(1e-12));
    CHECK(m.rec == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(m.pre == doctest::Approx(0.75).epsilon(1e-12));
  }
  SUBCASE("perfect mask scores 1.0 everywhere") {
    auto m = tau::metrics(counts(5, 11, 0, 0));
    CHECK(m.dice == 1.0);
    CHECK(m.iou == 1.0);
    CHECK(m.acc == 1.0);
    CHECK(m.rec == 1.0);
    CHECK(m.pre == 1.0);
  }
  SUBCASE("empty prediction vs empty truth scores 1.0") {
    auto m = tau::metrics(counts(0, 16, 0, 0));
    CHECK(m.dice == 1.0);
    CHECK(m.iou == 1.0);
    CHECK(m.rec == 1.0);
    CHECK(m.pre == 1.0);
  }
  SUBCASE("false positives against an empty truth zero the recall rule") {
    auto m = tau::metrics(counts(0, 14, 2, 0));
    CHECK(m.rec == 0.0);       // denominator 0 but the prediction is nonempty
    CHECK(m.pre == 0.0);       // plain 0 / (0 + 2)
    CHECK(m.dice == 0.0);
    CHECK(m.iou == 0.0);
  }
  SUBCASE("empty prediction vs nonempty truth") {
    auto m = tau::metrics(counts(0, 13, 0, 3));
    CHECK(m.pre == 0.0);  // denominator 0 but there was something to find
    CHECK(m.rec == 0.0);
  }
  SUBCASE("dice equals 2*iou/(1+iou) on fuzzed counts") {
    Rng rng(49);
    for (int i = 0; i < 200; ++i) {
      auto c = counts(static_cast<int64_t>(rng.below(6)), static_cast<int64_t>(rng.below(20)),
                      static_cast<int64_t>(rng.below(6)), static_cast<int64_t>(rng.below(6)));
      auto m = tau::metrics(c);
      CHECK(std::abs(m.dice - 2.0 * m.iou / (1.0 + m.iou)) <= 1e-9);
    }
  }
  SUBCASE("flipping a false positive to a true negative never hurts") {
    Rng rng(50);
    for (int i = 0; i < 200; ++i) {
      auto c = counts(static_cast<int64_t>(rng.below(6)), static_cast<int64_t>(rng.below(20)),
                      1 + static_cast<int64_t>(rng.below(6)),
                      static_cast<int64_t>(rng.below(6)));
      auto before = tau::metrics(c);
      c.fp -= 1;
      c.tn += 1;
      auto after = tau::metrics(c);
      CHECK(after.pre >= before.pre);
      CHECK(after.acc >= before.acc);
      CHECK(after.iou >= before.iou);
      CHECK(after.dice >= before.dice);
    }
  }
}

TEST_CASE("metrics reports: CSV and JSON emission") {
  std::vector<tau::SampleMetrics> rows;
  for (int i = 0; i < 3; ++i) {
    tau::SampleMetrics s;
    s.id = "img_" + std::to_string(i);
    s.counts = counts(3 + i, 11 - i, 1, 1);
    s.report = tau::metrics(s.counts);
    rows.push_back(s);
  }
  const std::string csv = "tau_test_metrics.csv";
  const std::string js = "tau_test_metrics.json";

  SUBCASE("CSV has one row per image plus the aggregate") {
    tau::write_metrics_csv(csv, rows);
    std::ifstream in(csv);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(lines.size() == 5);
    CHECK(lines[0] == "id,tp,tn,fp,fn,dice,iou,acc,rec,pre");
    CHECK(lines[1].rfind("img_0,3,11,1,1,", 0) == 0);
    CHECK(lines[4].rfind("aggregate,12,30,3,3,", 0) == 0);
    // repeated writes are byte-identical
    std::ostringstream first;
    first << std::ifstream(csv).rdbuf();
    tau::write_metrics_csv(csv, rows);
    std::ostringstream second;
    second << std::ifstream(csv).rdbuf();
    CHECK(first.str() == second.str());
    std::remove(csv.c_str());
  }
  SUBCASE("JSON mirrors the rows and labels macro averaging") {
    tau::write_metrics_json(js, rows);
    std::ifstream in(js);
    nlohmann::json j = nlohmann::json::parse(in);
    CHECK(j["averaging"] == "macro");
    REQUIRE(j["samples"].size() == 3);
    CHECK(j["samples"][0]["id"] == "img_0");
    CHECK(j["samples"][0]["tp"] == 3);
    double mean_dice =
        (rows[0].report.dice + rows[1].report.dice + rows[2].report.dice) / 3.0;
    CHECK(j["aggregate"]["dice"].get<double>() == doctest::Approx(mean_dice).epsilon(1e-12));
    std::remove(js.c_str());
  }
  SUBCASE("aggregate of an empty set is rejected") {
    CHECK_THROWS_AS(tau::aggregate_metrics({}), std::invalid_argument);
  }
}

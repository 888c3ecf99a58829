#include "tau/gradsuite.hpp"

#include <functional>
#include <iomanip>
#include <ostream>

#include "tau/attention.hpp"
#include "tau/loss.hpp"
#include "tau/model.hpp"
#include "tau/nn.hpp"
#include "tau/rng.hpp"
#include "tau/tensor.hpp"

namespace tau {
namespace {

using D = Tensor<double>;
using F = std::function<D(const D&)>;

constexpr double kPrimTol = 1e-5;
constexpr double kCompTol = 1e-3;

// Fixed random weights turn a tensor-valued op into a scalar objective that
// exercises every output element.
D make_pool_weights(const Shape& s, uint64_t seed) {
  Rng rng(seed);
  return D::uniform(s, rng, -1.0, 1.0);
}

// Values with a guaranteed margin from zero (ReLU) or from clamp bounds.
D away_from(const Shape& s, uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) {
    x = rng.uniform(lo, hi);
    if (rng.uniform() < 0.5) x = -x;
  }
  return D::from_data(s, v);
}

struct Suite {
  std::vector<GradCase> cases;

  void run(const std::string& name, const F& f, const D& x, double tol, double eps = 1e-4,
           int64_t max_probes = 0) {
    const GradCheckReport r = gradcheck<double>(f, x, eps, tol, max_probes, 0x5eed);
    cases.push_back({name, r.max_rel_err, tol, r.pass});
  }
};

void elementwise_cases(Suite& s) {
  Rng rng(100);
  const D x = D::uniform({3, 5}, rng, -1.0, 1.0);
  const D c = D::uniform({3, 5}, rng, 0.5, 1.5);
  const D w = make_pool_weights({3, 5}, 7);
  auto pool = [w](const D& t) { return sum(mul(w, t)); };

  s.run("add", [&](const D& v) { return pool(add(v, c)); }, x, kPrimTol);
  s.run("sub", [&](const D& v) { return pool(sub(v, c)); }, x, kPrimTol);
  s.run("mul", [&](const D& v) { return pool(mul(v, c)); }, x, kPrimTol);
  s.run("div.numerator", [&](const D& v) { return pool(div(v, c)); }, x, kPrimTol);
  s.run("div.denominator", [&](const D& v) { return pool(div(c, v)); },
        D::uniform({3, 5}, rng, 0.5, 1.5), kPrimTol);
  s.run("scale", [&](const D& v) { return pool(scale(v, 1.7)); }, x, kPrimTol);
  s.run("affine", [&](const D& v) { return pool(affine(v, -2.0, 0.3)); }, x, kPrimTol);
  s.run("relu", [&](const D& v) { return pool(relu(v)); }, away_from({3, 5}, 8, 0.1, 1.0),
        kPrimTol);
  s.run("sigmoid", [&](const D& v) { return pool(sigmoid(v)); }, x, kPrimTol);
  s.run("log", [&](const D& v) { return pool(log(v)); }, D::uniform({3, 5}, rng, 0.5, 2.0),
        kPrimTol);
  s.run("exp", [&](const D& v) { return pool(exp(v)); }, x, kPrimTol);
  // Margin 0.2 from the clamp bounds keeps finite differences one-sided.
  s.run("clamp", [&](const D& v) { return pool(clamp(v, -0.5, 0.5)); },
        away_from({3, 5}, 9, 0.7, 1.3), kPrimTol);
  s.run("softmax", [&](const D& v) { return pool(softmax(v, 1)); }, x, kPrimTol);
}

void shape_and_reduce_cases(Suite& s) {
  Rng rng(200);
  const D x = D::uniform({2, 3, 4}, rng, -1.0, 1.0);
  const D c = D::uniform({2, 2, 4}, rng, -1.0, 1.0);
  const D w24 = make_pool_weights({24}, 11);
  const D wperm = make_pool_weights({3, 2, 4}, 12);
  const D wcat = make_pool_weights({2, 5, 4}, 13);
  const D wax = make_pool_weights({3}, 14);

  s.run("reshape", [&](const D& v) { return sum(mul(w24, reshape(v, {24}))); }, x, kPrimTol);
  s.run("permute", [&](const D& v) { return sum(mul(wperm, permute(v, {1, 0, 2}))); }, x,
        kPrimTol);
  s.run("concat", [&](const D& v) { return sum(mul(wcat, concat(std::vector<D>{v, c}, 1))); }, x, kPrimTol);
  s.run("sum", [&](const D& v) { return sum(v); }, x, kPrimTol);
  s.run("mean", [&](const D& v) { return mean(v); }, x, kPrimTol);
  s.run("sum_axes", [&](const D& v) { return sum(mul(wax, sum_axes(v, {0, 2}))); }, x, kPrimTol);
  s.run("mean_axes", [&](const D& v) { return sum(mul(wax, mean_axes(v, {0, 2}))); }, x,
        kPrimTol);
}

void matmul_cases(Suite& s) {
  Rng rng(300);
  const D a = D::uniform({3, 4}, rng, -1.0, 1.0);
  const D b = D::uniform({4, 5}, rng, -1.0, 1.0);
  const D wm = make_pool_weights({3, 5}, 15);
  s.run("matmul.lhs", [&](const D& v) { return sum(mul(wm, matmul(v, b))); }, a, kPrimTol);
  s.run("matmul.rhs", [&](const D& v) { return sum(mul(wm, matmul(a, v))); }, b, kPrimTol);

  const D ba = D::uniform({2, 3, 4}, rng, -1.0, 1.0);
  const D bb = D::uniform({2, 4, 5}, rng, -1.0, 1.0);
  const D wb = make_pool_weights({2, 3, 5}, 16);
  s.run("bmm.lhs", [&](const D& v) { return sum(mul(wb, bmm(v, bb))); }, ba, kPrimTol);
  s.run("bmm.rhs", [&](const D& v) { return sum(mul(wb, bmm(ba, v))); }, bb, kPrimTol);

  const D ga = D::uniform({4, 3, 4}, rng, -1.0, 1.0);
  const D gw = D::uniform({2, 4, 5}, rng, -1.0, 1.0);
  const D wg = make_pool_weights({4, 3, 5}, 17);
  s.run("bmm_grouped.lhs", [&](const D& v) { return sum(mul(wg, bmm_grouped(v, gw))); }, ga,
        kPrimTol);
  s.run("bmm_grouped.weight", [&](const D& v) { return sum(mul(wg, bmm_grouped(ga, v))); }, gw,
        kPrimTol);
}

void nn_cases(Suite& s) {
  Rng rng(400);
  const D x = D::uniform({2, 3, 6, 6}, rng, -1.0, 1.0);
  auto conv = make_conv2d<double>(3, 4, 3, rng, 1, 1);
  const D wc = make_pool_weights({2, 4, 6, 6}, 18);
  auto poolc = [wc](const D& t) { return sum(mul(wc, t)); };
  s.run("conv2d.x", [&](const D& v) { return poolc(conv2d(v, conv)); }, x, kPrimTol);
  s.run("conv2d.weight",
        [&](const D& v) {
          auto q = conv;
          q.weight = v;
          return poolc(conv2d(x, q));
        },
        conv.weight.detach(), kPrimTol);
  s.run("conv2d.bias",
        [&](const D& v) {
          auto q = conv;
          q.bias = v;
          return poolc(conv2d(x, q));
        },
        conv.bias.detach(), kPrimTol);

  // Distinct grid values keep every pooling window free of eps-scale ties.
  {
    std::vector<double> v(72);
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i) / 72.0;
    Rng shuf(19);
    shuf.shuffle(v);
    const D mx = D::from_data({1, 2, 6, 6}, v);
    const D wp = make_pool_weights({1, 2, 3, 3}, 20);
    s.run("maxpool2d", [&](const D& t) { return sum(mul(wp, maxpool2d(t))); }, mx, kPrimTol);
  }

  const D ux = D::uniform({1, 2, 4, 4}, rng, -1.0, 1.0);
  const D wu = make_pool_weights({1, 2, 7, 6}, 21);
  s.run("upsample_bilinear",
        [&](const D& v) { return sum(mul(wu, upsample_bilinear(v, 7, 6))); }, ux, kPrimTol);

  const D nx = D::uniform({3, 2, 4, 4}, rng, -1.0, 1.0);
  auto norm = make_norm<double>(2);
  const D wn = make_pool_weights({3, 2, 4, 4}, 22);
  auto pooln = [wn](const D& t) { return sum(mul(wn, t)); };
  s.run("norm2d.x",
        [&](const D& v) {
          auto q = norm;
          return pooln(norm2d(v, q));
        },
        nx, kPrimTol);
  s.run("norm2d.gamma",
        [&](const D& v) {
          auto q = norm;
          q.gamma = v;
          return pooln(norm2d(nx, q));
        },
        norm.gamma.detach(), kPrimTol);
  s.run("norm2d.beta",
        [&](const D& v) {
          auto q = norm;
          q.beta = v;
          return pooln(norm2d(nx, q));
        },
        norm.beta.detach(), kPrimTol);
}

void attention_cases(Suite& s) {
  Rng rng(500);
  const D x = D::uniform({1, 8, 3, 3}, rng, -1.0, 1.0);
  auto tsa = make_tsa<double>(8, 3, 3, 2, false, true, rng);
  const D wt = make_pool_weights({1, 8, 3, 3}, 23);
  auto poolt = [wt](const D& t) { return sum(mul(wt, t)); };
  s.run("tsa.x", [&](const D& v) { return poolt(tsa_forward(v, tsa).out); }, x, kPrimTol);
  s.run("tsa.w_q",
        [&](const D& v) {
          auto q = tsa;
          q.w_q = v;
          return poolt(tsa_forward(x, q).out);
        },
        tsa.w_q.detach(), kPrimTol);
  s.run("tsa.pos_enc",
        [&](const D& v) {
          auto q = tsa;
          q.pos_enc = v;
          return poolt(tsa_forward(x, q).out);
        },
        tsa.pos_enc.detach(), kPrimTol);

  const D gx = D::uniform({1, 8, 4, 4}, rng, -1.0, 1.0);
  auto gsa = make_gsa<double>(8, rng);
  const D wgs = make_pool_weights({1, 8, 4, 4}, 24);
  auto poolg = [wgs](const D& t) { return sum(mul(wgs, t)); };
  s.run("gsa.x", [&](const D& v) { return poolg(gsa_forward(v, gsa).out); }, gx, kPrimTol);
  s.run("gsa.reduce.weight",
        [&](const D& v) {
          auto q = gsa;
          q.proj_reduce.weight = v;
          return poolg(gsa_forward(gx, q).out);
        },
        gsa.proj_reduce.weight.detach(), kPrimTol);

  auto saa = make_saa<double>(8, 3, 3, 2, true, true, false, true, rng);
  // Nonzero fusion weights so both attention branches shape the output.
  saa.fuse.lambda1 = D::full({1}, 0.35).set_requires_grad(true);
  saa.fuse.lambda2 = D::full({1}, -0.2).set_requires_grad(true);
  s.run("saa.x", [&](const D& v) { return poolt(saa_forward(v, saa).out); }, x, kPrimTol);
  s.run("saa.lambda1",
        [&](const D& v) {
          auto q = saa;
          q.fuse.lambda1 = v;
          return poolt(saa_forward(x, q).out);
        },
        saa.fuse.lambda1.detach(), kPrimTol);
  s.run("saa.lambda2",
        [&](const D& v) {
          auto q = saa;
          q.fuse.lambda2 = v;
          return poolt(saa_forward(x, q).out);
        },
        saa.fuse.lambda2.detach(), kPrimTol);
}

void loss_cases(Suite& s) {
  Rng rng(600);
  const D p = D::uniform({2, 1, 4, 4}, rng, 0.1, 0.9);
  std::vector<double> yv(32);
  for (double& v : yv) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  const D y = D::from_data({2, 1, 4, 4}, yv);
  s.run("bce_loss", [&](const D& v) { return bce_loss(v, y); }, p, kPrimTol);
  s.run("dice_loss", [&](const D& v) { return dice_loss(v, y); }, p, kPrimTol);
  s.run("combined_loss", [&](const D& v) { return combined_loss(v, y); }, p, kPrimTol);
}

void composite_cases(Suite& s) {
  Rng rng(700);
  {
    const D x = D::uniform({2, 3, 8, 8}, rng, -1.0, 1.0);
    auto blk = make_conv_block<double>(3, 4, true, rng);
    const D w = make_pool_weights({2, 4, 8, 8}, 25);
    s.run("conv_block",
          [&](const D& v) {
            auto q = blk;
            return sum(mul(w, conv_block(v, q, NormMode::train)));
          },
          x, kCompTol, 1e-5);
  }

  // Full model on the acceptance geometry. A smaller step keeps kink
  // straddling (ReLU/maxpool) an order below the composite tolerance.
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.seed = 42;
  auto p = build_unet<double>(cfg, 16, 16);
  // Zero-initialized fusion weights would gate the attention branches out of
  // the gradient entirely; open them so those paths are actually checked.
  p.saa.fuse.lambda1 = D::full({1}, 0.3).set_requires_grad(true);
  p.saa.fuse.lambda2 = D::full({1}, 0.2).set_requires_grad(true);
  Rng drng(701);
  const D x = D::uniform({1, 1, 16, 16}, drng, 0.0, 1.0);
  std::vector<double> yv(256);
  for (double& v : yv) v = drng.uniform() < 0.5 ? 1.0 : 0.0;
  const D y = D::from_data({1, 1, 16, 16}, yv);
  auto loss_of = [&y](const D& v, UNetParams<double>& q) {
    return combined_loss(model_forward(v, q, NormMode::train), y);
  };

  s.run("model.x", [&](const D& v) { return loss_of(v, p); }, x, kCompTol, 1e-5, 48);
  s.run("model.enc1.conv1.weight",
        [&](const D& v) {
          auto q = p;
          q.enc[0].conv1.weight = v;
          return loss_of(x, q);
        },
        p.enc[0].conv1.weight.detach(), kCompTol, 1e-6, 24);
  s.run("model.tsa.pos_enc",
        [&](const D& v) {
          auto q = p;
          q.saa.tsa.pos_enc = v;
          return loss_of(x, q);
        },
        p.saa.tsa.pos_enc.detach(), kCompTol, 1e-5, 24);
  s.run("model.saa.lambda1",
        [&](const D& v) {
          auto q = p;
          q.saa.fuse.lambda1 = v;
          return loss_of(x, q);
        },
        p.saa.fuse.lambda1.detach(), kCompTol, 1e-5);
  s.run("model.head.weight",
        [&](const D& v) {
          auto q = p;
          q.head.weight = v;
          return loss_of(x, q);
        },
        p.head.weight.detach(), kCompTol, 1e-5);
}

}  // namespace

std::vector<GradCase> run_gradient_suite() {
  Suite s;
  elementwise_cases(s);
  shape_and_reduce_cases(s);
  matmul_cases(s);
  nn_cases(s);
  attention_cases(s);
  loss_cases(s);
  composite_cases(s);
  return s.cases;
}

bool report_gradient_suite(const std::vector<GradCase>& cases, std::ostream& os) {
  bool all = true;
  for (const GradCase& c : cases) {
    os << (c.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(28) << c.name
       << "  max_rel_err " << std::scientific << std::setprecision(3) << c.max_rel_err
       << "  tol " << c.tol << std::defaultfloat << '\n';
    all = all && c.pass;
  }
  os << (all ? "gradient suite: all " : "gradient suite: FAILURES among ") << cases.size()
     << " checks" << (all ? " passed" : "") << '\n';
  return all;
}

}  // namespace tau

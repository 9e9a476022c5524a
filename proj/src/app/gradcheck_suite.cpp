#include "morphpool/app/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <memory>

#include "morphpool/gradcheck.hpp"
#include "morphpool/morph.hpp"
#include "morphpool/nn.hpp"

namespace mp::suite {

namespace {

using DilateFn = std::function<ag::Var(ag::Var, ag::Var, morph::Window)>;

// Same forward as ag::dilate2d; the backward sends every gradient one window
// offset too far.
ag::Var corrupted_dilate(ag::Var f, ag::Var weights, morph::Window window) {
  morph::MorphResult r = morph::dilate2d(f.value(), weights.value(), window);
  auto prov = std::make_shared<morph::ProvenanceMap>(std::move(r.provenance));
  const Shape in = f.shape();
  const Shape ws = weights.shape();
  return f.tape->record("dilate2d", std::move(r.values), {f, weights},
                        [prov, in, ws](const Tensor& g, ag::GradSink& sink) {
                          Tensor* gf = sink.grad(0);
                          Tensor* gw = sink.grad(1);
                          const Shape& os = prov->shape;
                          const int K = prov->window;
                          std::size_t i = 0;
                          for (int n = 0; n < os.n; ++n) {
                            for (int c = 0; c < os.c; ++c) {
                              for (int oy = 0; oy < os.h; ++oy) {
                                for (int ox = 0; ox < os.w; ++ox, ++i) {
                                  const auto e = static_cast<std::uint8_t>((prov->index[i] + 1) % (K * K));
                                  const auto [y, x] = prov->source(oy, ox, e);
                                  if (gf && y >= 0 && y < in.h && x >= 0 && x < in.w) (*gf)(n, c, y, x) += g[i];
                                  if (gw) (*gw)(ws.n == 1 ? 0 : c, 0, e / K, e % K) += g[i];
                                }
                              }
                            }
                          }
                        });
}

struct Ops {
  DilateFn dilate = ag::dilate2d;
};

struct Prepared {
  Tensor x;
  ag::ScalarFn f;
};

struct Case {
  std::string name;
  std::function<Prepared(std::mt19937_64&, const Ops&)> prepare;
};

Tensor uniform(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return random_uniform(s, rng, lo, hi);
}

// Scalarises an op output with fixed random weights so every element of the
// output contributes a distinct amount.
ag::Var project(ag::Var out, std::mt19937_64& rng) {
  return ag::weighted_sum(out, random_normal(out.shape(), rng, 0, 1));
}

// The checked leaf is input `slot`; the other inputs are held constant.
using Build = std::function<ag::Var(ag::Tape&, const std::vector<ag::Var>&)>;

Prepared slot_case(std::vector<Tensor> inputs, std::size_t slot, Build build, std::mt19937_64& rng) {
  Tensor x = inputs[slot];
  auto captured = std::make_shared<std::vector<Tensor>>(std::move(inputs));
  const std::uint64_t weight_seed = rng();
  return Prepared{std::move(x), [captured, slot, build, weight_seed](ag::Tape& tape, ag::Var leaf) {
                    std::vector<ag::Var> vars;
                    for (std::size_t i = 0; i < captured->size(); ++i) {
                      vars.push_back(i == slot ? leaf : tape.constant((*captured)[i]));
                    }
                    std::mt19937_64 local(weight_seed);
                    return project(build(tape, vars), local);
                  }};
}

std::vector<Case> make_cases() {
  std::vector<Case> cases;
  const Shape f_shape{2, 2, 6, 6};

  auto dilate_case = [&](std::string name, int K, int s, int p, bool erode, std::size_t slot, bool flat) {
    cases.push_back({std::move(name), [=](std::mt19937_64& rng, const Ops& ops) {
                       Tensor f = uniform(f_shape, rng);
                       Tensor w = flat ? Tensor::zeros(Shape{1, 1, K, K}) : uniform(Shape{2, 1, K, K}, rng, -1, 0);
                       const morph::Window window{K, s, p};
                       DilateFn dilate = ops.dilate;
                       return slot_case({f, w}, slot,
                                        [=](ag::Tape&, const std::vector<ag::Var>& v) {
                                          return erode ? ag::erode2d(v[0], v[1], window) : dilate(v[0], v[1], window);
                                        },
                                        rng);
                     }});
  };
  dilate_case("dilate2d.input.flat", 3, 1, 1, false, 0, true);
  dilate_case("dilate2d.input.general", 3, 2, 1, false, 0, false);
  dilate_case("dilate2d.se.general", 3, 1, 1, false, 1, false);
  dilate_case("erode2d.input.general", 3, 1, 1, true, 0, false);
  dilate_case("erode2d.se.general", 2, 2, 0, true, 1, false);

  cases.push_back({"dilate2d.sigma.parabolic", [=](std::mt19937_64& rng, const Ops& ops) {
                     Tensor f = uniform(f_shape, rng);
                     Tensor sigma = uniform(Shape{2, 1, 1, 1}, rng, 0.5, 2.0);
                     DilateFn dilate = ops.dilate;
                     return slot_case({f, sigma}, 1,
                                      [=](ag::Tape&, const std::vector<ag::Var>& v) {
                                        return dilate(v[0], ag::parabolic_weights(v[1], 3, 1), morph::Window{3, 1, 1});
                                      },
                                      rng);
                   }});

  auto pool_case = [&](std::string name, int K, std::size_t slot, bool parabolic) {
    cases.push_back({std::move(name), [=](std::mt19937_64& rng, const Ops&) {
                       Tensor f = uniform(f_shape, rng);
                       Tensor p = parabolic ? uniform(Shape{2, 1, 1, 1}, rng, 0.5, 2.0)
                                            : uniform(Shape{2, 1, K, K}, rng, -1, 0);
                       const int origin = morph::pool_padding(K, 2);
                       return slot_case({f, p}, slot,
                                        [=](ag::Tape&, const std::vector<ag::Var>& v) {
                                          ag::Var w = parabolic ? ag::parabolic_weights(v[1], K, origin) : v[1];
                                          return ag::morph_pool(v[0], w, K, 2).values;
                                        },
                                        rng);
                     }});
  };
  pool_case("morph_pool.input.general", 2, 0, false);
  pool_case("morph_pool.se.general", 3, 1, false);
  pool_case("morph_pool.sigma.parabolic", 2, 1, true);

  auto unpool_case = [&](std::string name, std::size_t slot) {
    cases.push_back({std::move(name), [=](std::mt19937_64& rng, const Ops&) {
                       Tensor f = uniform(f_shape, rng);
                       Tensor down = uniform(Shape{2, 1, 2, 2}, rng, -1, 0);
                       Tensor up = uniform(Shape{2, 1, 3, 3}, rng, -1, 0);
                       return slot_case({f, down, up}, slot,
                                        [](ag::Tape&, const std::vector<ag::Var>& v) {
                                          ag::PoolOutput pooled = ag::morph_pool(v[0], v[1], 2, 2);
                                          return ag::morph_unpool(pooled.values, pooled.provenance, v[2]);
                                        },
                                        rng);
                     }});
  };
  unpool_case("morph_unpool.chain.input", 0);
  unpool_case("morph_unpool.chain.pool_se", 1);
  unpool_case("morph_unpool.chain.unpool_se", 2);

  auto conv_case = [&](std::string name, int kind, std::size_t slot) {
    cases.push_back({std::move(name), [=](std::mt19937_64& rng, const Ops&) {
                       // kind 0: conv, 1: transposed, 2: depthwise
                       Tensor f = uniform(kind == 1 ? Shape{2, 3, 3, 3} : Shape{2, 3, 6, 6}, rng);
                       const Shape w_shape = kind == 0 ? Shape{2, 3, 3, 3} : kind == 1 ? Shape{3, 2, 3, 3} : Shape{3, 1, 3, 3};
                       Tensor w = uniform(w_shape, rng);
                       Tensor b = uniform(Shape{kind == 2 ? 3 : 2, 1, 1, 1}, rng);
                       return slot_case({f, w, b}, slot,
                                        [kind](ag::Tape&, const std::vector<ag::Var>& v) {
                                          if (kind == 0) return ag::conv2d(v[0], v[1], v[2], 2, 1);
                                          if (kind == 1) return ag::transposed_conv2d(v[0], v[1], v[2], 2, 1, 1);
                                          return ag::depthwise_conv2d(v[0], v[1], v[2], 1, 1);
                                        },
                                        rng);
                     }});
  };
  const char* conv_names[] = {"conv2d", "transposed_conv2d", "depthwise_conv2d"};
  const char* slot_names[] = {"input", "weight", "bias"};
  for (int kind = 0; kind < 3; ++kind) {
    for (std::size_t slot = 0; slot < 3; ++slot) {
      conv_case(std::string(conv_names[kind]) + "." + slot_names[slot], kind, slot);
    }
  }

  auto unary_case = [&](std::string name, Shape shape, std::function<ag::Var(ag::Var)> op) {
    cases.push_back({std::move(name), [=](std::mt19937_64& rng, const Ops&) {
                       return slot_case({uniform(shape, rng)}, 0,
                                        [op](ag::Tape&, const std::vector<ag::Var>& v) { return op(v[0]); }, rng);
                     }});
  };
  unary_case("max_pool_classic.input", f_shape, [](ag::Var x) { return ag::max_pool_classic(x).values; });
  unary_case("zero_unpool.input", f_shape, [](ag::Var x) {
    ag::PoolOutput pooled = ag::max_pool_classic(x);
    return ag::zero_unpool(pooled.values, pooled.provenance);
  });
  unary_case("bilinear_upsample.input", Shape{2, 2, 4, 5}, [](ag::Var x) { return ag::bilinear_upsample(x, 2); });
  unary_case("relu.input", f_shape, [](ag::Var x) { return ag::relu(x); });
  unary_case("max_reduce.input", f_shape, [](ag::Var x) { return ag::max_reduce(x); });
  unary_case("mul.input", f_shape, [](ag::Var x) { return ag::mul(x, ag::add(x, x)); });
  unary_case("mean.input", f_shape, [](ag::Var x) { return ag::mean(ag::mul(x, x)); });

  auto bn_case = [&](std::string name, nn::Mode mode, std::size_t slot) {
    cases.push_back({std::move(name), [=](std::mt19937_64& rng, const Ops&) {
                       Tensor f = uniform(Shape{3, 2, 4, 4}, rng);
                       Tensor gamma = uniform(Shape{2, 1, 1, 1}, rng, 0.5, 1.5);
                       Tensor beta = uniform(Shape{2, 1, 1, 1}, rng);
                       auto state = std::make_shared<nn::BatchNormState>(2);
                       state->running_mean = uniform(Shape{2, 1, 1, 1}, rng);
                       state->running_var = uniform(Shape{2, 1, 1, 1}, rng, 0.5, 2.0);
                       return slot_case({f, gamma, beta}, slot,
                                        [state, mode](ag::Tape&, const std::vector<ag::Var>& v) {
                                          nn::BatchNormState local = *state;
                                          return ag::batchnorm(v[0], v[1], v[2], local, mode);
                                        },
                                        rng);
                     }});
  };
  bn_case("batchnorm.train.input", nn::Mode::train, 0);
  bn_case("batchnorm.train.gamma", nn::Mode::train, 1);
  bn_case("batchnorm.train.beta", nn::Mode::train, 2);
  bn_case("batchnorm.eval.input", nn::Mode::eval, 0);

  cases.push_back({"cross_entropy.logits", [](std::mt19937_64& rng, const Ops&) {
                     Tensor logits = uniform(Shape{2, 4, 3, 3}, rng, -2, 2);
                     Tensor labels(Shape{2, 1, 3, 3});
                     std::uniform_int_distribution<int> pick(0, 4);
                     for (Scalar& l : labels.data()) {
                       const int v = pick(rng);
                       l = static_cast<Scalar>(v == 4 ? nn::kIgnoreIndex : v);
                     }
                     labels[0] = 0;
                     return Prepared{logits, [labels](ag::Tape&, ag::Var x) { return ag::cross_entropy(x, labels); }};
                   }});
  cases.push_back({"masked_l2.pred", [](std::mt19937_64& rng, const Ops&) {
                     Tensor pred = uniform(Shape{2, 1, 4, 4}, rng, 0, 3);
                     Tensor target = uniform(Shape{2, 1, 4, 4}, rng, 0.5, 3);
                     for (std::size_t i = 0; i < target.size(); i += 5) target[i] = 0;
                     return Prepared{pred, [target](ag::Tape&, ag::Var x) { return ag::masked_l2(x, target); }};
                   }});
  return cases;
}

}  // namespace

std::vector<std::string> case_names() {
  std::vector<std::string> names;
  for (const Case& c : make_cases()) names.push_back(c.name);
  return names;
}

std::vector<Row> run(const Options& options) {
  Ops ops;
  if (options.corrupt_dilate_backward) ops.dilate = corrupted_dilate;
  ag::GradCheckOptions check;
  check.step = options.step;
  check.tolerance = options.tolerance;

  std::vector<Row> rows;
  for (const Case& c : make_cases()) {
    if (!options.filter.empty() && c.name.rfind(options.filter, 0) != 0) continue;
    Row row{c.name, 0, 0, 0, true};
    for (int seed = 0; seed < options.seeds; ++seed) {
      std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 7919 + 17);
      Prepared prepared = c.prepare(rng, ops);
      const ag::GradCheckReport report = ag::grad_check(prepared.f, prepared.x, check);
      row.max_rel_error = std::max(row.max_rel_error, report.max_rel_error);
      row.checked += report.checked;
      row.tie_skips += report.tie_warnings.size();
      row.passed = row.passed && report.passed;
    }
    row.passed = row.passed && row.checked > 0;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mp::suite

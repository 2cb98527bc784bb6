// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "davpt/checkpoint.hpp"
#include "davpt/data.hpp"
#include "davpt/grad_suite.hpp"
#include "davpt/mapping.hpp"
#include "davpt/metric.hpp"
#include "davpt/rng.hpp"
#include "davpt/theorem.hpp"
#include "davpt/trainer.hpp"
#include "fuzz_support.hpp"

using namespace davpt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double cosine(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    ab += a.at(i, k) * b.at(j, k);
    aa += a.at(i, k) * a.at(i, k);
    bb += b.at(j, k) * b.at(j, k);
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

double naive_proxy_anchor(const Tensor& p, const Tensor& x, const std::vector<std::size_t>& y, double delta,
                          double tau) {
  double pos = 0.0, neg = 0.0;
  std::size_t positives = 0;
  for (std::size_t k = 0; k < p.rows(); ++k) {
    double sp = 0.0, sn = 0.0;
    bool any = false;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const double s = cosine(p, k, x, i);
      if (y[i] == k) {
        sp += std::exp(-(s - delta) / tau);
        any = true;
      } else {
        sn += std::exp((s + delta) / tau);
      }
    }
    if (any) {
      pos += std::log(1.0 + sp);
      ++positives;
    }
    neg += std::log(1.0 + sn);
  }
  return (positives ? pos / static_cast<double>(positives) : 0.0) + neg / static_cast<double>(p.rows());
}

double naive_nca(const Tensor& x, const std::vector<std::size_t>& y, double tau) {
  double loss = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < x.rows(); ++j) {
      if (j == i) continue;
      const double e = std::exp(-cosine(x, i, x, j) / tau);
      den += e;
      if (y[j] == y[i]) num += e;
    }
    loss -= std::log(num / den);
  }
  return loss;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t({r, c});
  for (double& v : t.values()) v = rng.normal();
  return t;
}

// 1 ------------------------------------------------------------------------
Outcome gradient_checks() {
  const auto t0 = Clock::now();
  const auto entries = run_grad_checks("all");
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  bool all = !entries.empty();
  for (const auto& e : entries) {
    if (!(e.result.max_rel_error < kGradCheckTolerance)) all = false;
    if (e.result.max_rel_error > worst || std::isnan(e.result.max_rel_error)) {
      worst = e.result.max_rel_error;
      worst_name = e.module + "/" + e.name;
    }
  }
  return {all && secs < 120.0,
          fmt("%zu checks, worst rel err %.2e (%s), %.1f s", entries.size(), worst, worst_name.c_str(), secs)};
}

// 2 ------------------------------------------------------------------------
Outcome loss_oracles() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst_pa = 0.0, worst_nca = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(12), d = 2 + rng.below(8);
    const Tensor p = random_matrix(m, d, rng), x = random_matrix(n, d, rng);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.below(m);
    const double delta = rng.uniform() - 0.5, tau = 0.1 + 1.9 * rng.uniform();
    Tape t;
    const double got = t.value(proxy_anchor_loss(t.input(p), t.input(x), y, delta, tau))[0];
    const double want = naive_proxy_anchor(p, x, y, delta, tau);
    worst_pa = std::max(worst_pa, std::abs(got - want) / std::max(1.0, std::abs(want)));
  }
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + 2 * rng.below(6), d = 2 + rng.below(8), classes = 1 + rng.below(3);
    const Tensor x = random_matrix(n, d, rng);
    std::vector<std::size_t> y(n);
    // Every point needs at least one same-class neighbour.
    for (std::size_t i = 0; i < n; ++i) y[i] = (i / 2) % classes;
    const double tau = 0.1 + 1.9 * rng.uniform();
    const double got = nca_loss(x, y, tau), want = naive_nca(x, y, tau);
    worst_nca = std::max(worst_nca, std::abs(got - want) / std::max(1.0, std::abs(want)));
  }
  const double secs = seconds_since(t0);
  return {worst_pa <= 1e-10 && worst_nca <= 1e-10 && secs < 30.0,
          fmt("Proxy-Anchor worst %.2e, NCA worst %.2e over 100 instances each, %.2f s", worst_pa, worst_nca, secs)};
}

// 3 ------------------------------------------------------------------------
Outcome prompt_arity() {
  std::string problems;
  for (std::size_t m : {0u, 1u, 8u, 20u}) {
    ViTConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.channels = 3;
    c.embed_dim = 16;
    c.num_layers = 2;
    c.num_heads = 4;
    c.num_classes = 5;
    c.prompts_per_layer = m;
    const ModelParams model = init_model(c, 5, m == 0 ? Policy::Linear : Policy::DaVpt);
    Rng rng(m + 1);
    std::vector<std::vector<std::uint8_t>> imgs(3, std::vector<std::uint8_t>(c.image_bytes()));
    for (auto& img : imgs)
      for (auto& px : img) px = static_cast<std::uint8_t>(rng.below(256));
    std::vector<std::span<const std::uint8_t>> views(imgs.begin(), imgs.end());
    const std::size_t layers[] = {0, 1};
    const std::size_t n = c.num_patches(), b = imgs.size(), seq = 1 + m + n;
    Tape t;
    const BoundModel bm = bind_frozen(t, model);
    const ForwardResult fr = forward_model(t, bm, views, layers);
    for (const auto& tr : fr.traces) {
      const bool ok = tr.seq_len == seq && tr.prompt_count == m &&
                      tr.attention.size() == b * c.num_heads * seq * seq &&
                      t.value(tr.tokens).rows() == b * n && t.value(tr.tokens).cols() == c.embed_dim &&
                      (m == 0 || (t.value(tr.query_prompts).rows() == m && t.value(tr.prompts).rows() == m));
      if (!ok) problems += fmt(" M=%zu layer %zu shape;", m, tr.layer);
    }
    if (fr.traces.size() != 2) problems += fmt(" M=%zu trace count;", m);
    if (m == 0) {
      Tape t2;
      const BoundModel bm2 = bind_frozen(t2, model);
      ForwardOptions plain;
      plain.insert_prompts = false;
      const ForwardResult fr2 = forward_model(t2, bm2, views, {}, plain);
      const auto a = t.value(fr.logits).values(), z = t2.value(fr2.logits).values();
      const auto ca = t.value(fr.cls).values(), cz = t2.value(fr2.cls).values();
      if (a.size() != z.size() || std::memcmp(a.data(), z.data(), a.size() * sizeof(double)) != 0 ||
          std::memcmp(ca.data(), cz.data(), ca.size() * sizeof(double)) != 0)
        problems += " M=0 differs from the promptless path;";
    }
  }
  return {problems.empty(), problems.empty() ? "M in {0,1,8,20}: shapes ok, M=0 bit-identical to promptless" : problems};
}

// 4 ------------------------------------------------------------------------
Outcome theorem_check() {
  const auto t0 = Clock::now();
  const double scales[] = {1e-2, 5e-3, 2.5e-3, 1.25e-3};
  std::size_t ortho = 0, resid = 0;
  double rmin = 1e300, rmax = -1e300, omin = 1e300, omax = -1e300;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const TheoremDraw d = random_theorem_draw(4, 8, s);
    const auto r = verify_attention_response(d.keys, d.prompt, d.direction, scales, least_attended(d.keys, d.prompt));
    ortho += orthogonal_ratios_ok(r);
    resid += residual_orders_ok(r);
    for (double v : r.orthogonal.error_ratios) rmin = std::min(rmin, v), rmax = std::max(rmax, v);
    for (double v : r.general.residual_orders) omin = std::min(omin, v), omax = std::max(omax, v);
  }
  const double secs = seconds_since(t0);
  return {ortho == 20 && resid == 20 && secs < 10.0,
          fmt("ratios in [%.3f, %.3f] on %zu/20 draws, residual orders in [%.3f, %.3f] on %zu/20, %.3f s", rmin,
              rmax, ortho, omin, omax, resid, secs)};
}

// 5 ------------------------------------------------------------------------
Outcome kmeans_recovery() {
  struct Setup {
    std::size_t k, per, dim;
  };
  const Setup setups[] = {{2, 6, 2}, {3, 5, 4}, {5, 4, 16}, {8, 5, 64}};
  std::size_t recovered = 0, monotone = 0, total = 0;
  for (const auto& s : setups)
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      ++total;
      Rng rng(1000 * s.k + seed);
      Tensor pts({s.k * s.per, s.dim});
      std::vector<std::size_t> truth;
      const double coord_std = 1.0 / std::sqrt(static_cast<double>(s.dim));
      for (std::size_t g = 0; g < s.k; ++g)
        for (std::size_t i = 0; i < s.per; ++i) {
          const std::size_t r = g * s.per + i;
          pts.at(r, 0) = 10.0 * static_cast<double>(g % 3);
          pts.at(r, 1) = 10.0 * static_cast<double>(g / 3);
          for (std::size_t j = 0; j < s.dim; ++j) pts.at(r, j) += coord_std * rng.normal();
          truth.push_back(g);
        }
      KMeansResult res;
      try {
        res = kmeans(pts, s.k, KMeansInit::plus_plus(seed));
      } catch (const Error&) {
        continue;
      }
      bool mono = true;
      for (std::size_t i = 1; i < res.objective.size(); ++i) mono = mono && res.objective[i] <= res.objective[i - 1];
      monotone += mono;
      // Bijection between found clusters and groups.
      std::vector<std::size_t> map_to(s.k, s.k), map_from(s.k, s.k);
      bool same = true;
      for (std::size_t i = 0; i < truth.size() && same; ++i) {
        const std::size_t a = res.assignments[i], g = truth[i];
        if (map_to[a] == s.k && map_from[g] == s.k) {
          map_to[a] = g;
          map_from[g] = a;
        }
        same = map_to[a] == g && map_from[g] == a;
      }
      recovered += same;
    }
  return {recovered == total && monotone == total,
          fmt("%zu/%zu partitions recovered, %zu/%zu objective traces monotone", recovered, total, monotone, total)};
}

// Shared training setup ------------------------------------------------------

TrainConfig desk_config(const Dataset& ds, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.model.image_size = ds.height;
  cfg.model.channels = ds.channels;
  cfg.model.num_classes = ds.num_classes;
  apply_metric_preset(cfg.metric, "proxy_anchor_classic");
  cfg.metric.beta = 0.5;
  cfg.metric.lambda = 0.5;
  cfg.seed = seed;
  return cfg;
}

struct RunResult {
  TrainReport report;
  ModelParams initial, final;
};

RunResult run(const Dataset& ds, const TrainConfig& cfg) {
  RunResult r;
  r.final = build_model(cfg, ds);
  r.initial = r.final;
  r.report = fit(r.final, ds, cfg);
  return r;
}

TrainConfig baseline_of(TrainConfig cfg) {
  cfg.metric.beta = 0.0;
  cfg.metric.lambda = 0.0;
  cfg.metric_terms = false;
  return cfg;
}

// 6 and 7 ------------------------------------------------------------------
void guidance_and_accuracy(const Dataset& ds, Outcome& six, Outcome& seven) {
  const auto t0 = Clock::now();
  double acc_da = 0.0, acc_base = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const TrainConfig cfg = desk_config(ds, seed);
    const RunResult da = run(ds, cfg);
    const RunResult base = run(ds, baseline_of(cfg));
    acc_da += da.report.test_accuracy / 3.0;
    acc_base += base.report.test_accuracy / 3.0;
    std::printf("  seed %llu: DA-VPT test acc %.4f, baseline %.4f\n", static_cast<unsigned long long>(seed),
                da.report.test_accuracy, base.report.test_accuracy);
    if (seed != 0) continue;
    const auto& ep = da.report.epochs;
    if (ep.empty() || da.report.diverged) {
      six = {false, "seed-0 run produced no epochs or diverged: " + da.report.divergence};
      continue;
    }
    const auto& first = ep.front();
    const auto& last = ep.back();
    const double rise = last.margin_sat - first.margin_sat;
    const bool ok = rise >= 0.2 && last.l_xp < first.l_xp && last.l_pc < first.l_pc;
    six = {ok, fmt("margin satisfaction %.4f -> %.4f (+%.4f), l_xp %.4f -> %.4f, l_pc %.4f -> %.4f",
                   first.margin_sat, last.margin_sat, rise, first.l_xp, last.l_xp, first.l_pc, last.l_pc)};
  }
  const double secs = seconds_since(t0);
  const double gap_pp = 100.0 * (acc_da - acc_base);
  const char* direction = gap_pp > 0 ? "above" : (gap_pp < 0 ? "below" : "equal to");
  seven = {gap_pp >= -0.5 && secs < 1200.0,
           fmt("mean test acc DA-VPT %.4f vs baseline %.4f (%+.2f pp, %s baseline), %.0f s for 6 runs", acc_da,
               acc_base, gap_pp, direction, secs)};
}

// 8 ------------------------------------------------------------------------
Outcome determinism(const Dataset& ds) {
  TrainConfig cfg = desk_config(ds, 7);
  cfg.total_epochs = 3;
  cfg.warmup_epochs = 1;
  const RunResult a = run(ds, cfg), b = run(ds, cfg);
  const bool csv = format_report(a.report, "x") == format_report(b.report, "x");
  const bool ckpt = encode_checkpoint(a.final) == encode_checkpoint(b.final);
  const bool map = format_mapping(a.report.mapping) == format_mapping(b.report.mapping);
  return {csv && ckpt && map, fmt("report %s, checkpoint %s, mapping %s", csv ? "identical" : "DIFFERS",
                                  ckpt ? "identical" : "DIFFERS", map ? "identical" : "DIFFERS")};
}

// 9 ------------------------------------------------------------------------
Outcome frozen_backbone(const Dataset& ds) {
  std::string problems;
  std::size_t count_da = 0, count_plus = 0, L = 0, D = 0;
  for (Policy p : {Policy::VptDeep, Policy::DaVpt, Policy::DaVptPlus}) {
    TrainConfig cfg = desk_config(ds, 3);
    cfg.policy = p;
    cfg.total_epochs = 2;
    cfg.warmup_epochs = 1;
    RunResult r = run(ds, cfg);
    // Checkpoint round trip on both ends, then compare tensor bytes.
    ModelParams init = decode_checkpoint(encode_checkpoint(r.initial));
    ModelParams fin = decode_checkpoint(encode_checkpoint(r.final));
    set_trainability(init, p);
    auto pi = init.parameters();
    auto pf = fin.parameters();
    std::size_t frozen = 0, moved = 0;
    for (std::size_t i = 0; i < pi.size(); ++i) {
      const auto a = std::as_const(*pi[i].tensor).values(), b = std::as_const(*pf[i].tensor).values();
      const bool same = a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
      if (!pi[i].tensor->requires_grad()) {
        ++frozen;
        if (!same) problems += " " + to_string(p) + ":" + pi[i].name + " changed;";
      } else {
        moved += !same;
      }
    }
    if (moved == 0) problems += " " + to_string(p) + ": no trainable tensor moved;";
    if (p == Policy::DaVpt) count_da = trainable_count(r.final);
    if (p == Policy::DaVptPlus) count_plus = trainable_count(r.final);
    L = cfg.model.num_layers;
    D = cfg.model.embed_dim;
    (void)frozen;
  }
  if (count_plus - count_da != 2 * L * D)
    problems += fmt(" trainable difference %zu, expected %zu;", count_plus - count_da, 2 * L * D);
  return {problems.empty(),
          problems.empty() ? fmt("frozen tensors byte-identical for 3 policies; da_vpt_plus adds %zu = 2*%zu*%zu",
                                 count_plus - count_da, L, D)
                           : problems};
}

// 10 -----------------------------------------------------------------------
Outcome formats(const Dataset& ds) {
  std::string problems;
  const auto bytes = encode_dataset(ds);
  if (encode_dataset(decode_dataset(bytes)) != bytes) problems += " dataset round trip;";
  TrainConfig cfg = desk_config(ds, 0);
  const ModelParams model = build_model(cfg, ds);
  const auto ck = encode_checkpoint(model);
  if (encode_checkpoint(decode_checkpoint(ck)) != ck) problems += " checkpoint round trip;";
  SynthSpec small;
  small.num_classes = 3;
  small.samples_per_class = 3;
  small.image_size = 4;
  small.channels = 2;
  const auto fd = fuzz::fuzz_datasets(generate(small), 1000, 11);
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 1;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.num_classes = 3;
  c.prompts_per_layer = 2;
  const auto fc = fuzz::fuzz_checkpoints(init_model(c, 0), 1000, 12);
  for (const auto* f : {&fd, &fc}) {
    if (f->cases != 1000 || f->crashes != 0 || f->mismatches != 0 || f->accepted != f->valid_cases)
      problems += " fuzz: " + f->first_problem + ";";
  }
  return {problems.empty(), fmt("round trips %s; fuzz datasets %zu malformed (%zu crashes, %zu mismatches), "
                                "checkpoints %zu malformed (%zu crashes, %zu mismatches)%s",
                                problems.empty() ? "ok" : "FAILED", fd.cases, fd.crashes, fd.mismatches, fc.cases,
                                fc.crashes, fc.mismatches, problems.c_str())};
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, Outcome>> results;
  auto record = [&](int id, const std::string& name, Outcome o) {
    std::printf("criterion %2d %s: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(name, std::move(o));
  };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    try {
      record(id, name, fn());
    } catch (const std::exception& e) {
      record(id, name, {false, std::string("threw: ") + e.what()});
    }
  };

  guarded(1, "gradient checks below 1e-5", gradient_checks);
  guarded(2, "loss values match brute-force oracles", loss_oracles);
  guarded(3, "prompt arity and promptless equivalence", prompt_arity);
  guarded(4, "first-order attention response", theorem_check);
  guarded(5, "k-means recovers planted clusters", kmeans_recovery);

  const Dataset ds = generate(SynthSpec{});
  Outcome six{false, "not run"}, seven{false, "not run"};
  try {
    guidance_and_accuracy(ds, six, seven);
  } catch (const std::exception& e) {
    six = seven = {false, std::string("threw: ") + e.what()};
  }
  record(6, "metric guidance tightens the geometry", six);
  record(7, "accuracy no worse than the unguided baseline", seven);
  guarded(8, "identical runs are byte-identical", [&] { return determinism(ds); });
  guarded(9, "frozen tensors stay frozen", [&] { return frozen_backbone(ds); });
  guarded(10, "file formats round trip and reject malformed input", [&] { return formats(ds); });

  std::size_t passed = 0;
  for (const auto& r : results) passed += r.second.pass;
  std::printf("%zu/%zu criteria passed\n", passed, results.size());
  return passed == results.size() ? 0 : 1;
}

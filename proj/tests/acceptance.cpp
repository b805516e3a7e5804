// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any line fails.
//   comvit_acceptance [criterion...]   (no arguments runs all of them)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "comvit/config.hpp"
#include "comvit/data.hpp"
#include "comvit/errors.hpp"
#include "comvit/explain.hpp"
#include "comvit/gradcheck_suite.hpp"
#include "comvit/model.hpp"
#include "comvit/ops.hpp"
#include "comvit/train.hpp"

using namespace comvit;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s %-28s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* pattern, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void params() {
  const ModelConfig c;
  const std::uint64_t closed = count_params(c);
  Rng rng(0);
  const std::uint64_t allocated = init_params<float>(c, rng).scalar_count();
  report(closed == 4555330, "params.exact",
         "count_params = " + std::to_string(closed) + ", stated 4555330, difference " +
             std::to_string(static_cast<long long>(closed) - 4555330));
  report(closed == allocated, "params.allocated", "allocated = " + std::to_string(allocated));
  const double rel = std::abs(double(closed) - 4.5e6) / 4.5e6;
  report(rel <= 0.02, "params.within-2pct", fmt("|%.0f - 4.5e6| / 4.5e6 = %.4f (<= 0.02)", double(closed), rel));
}

void macs() {
  const std::uint64_t m = count_macs(ModelConfig{});
  report(m >= 1.52e9 && m <= 1.69e9, "macs.range", fmt("count_macs = %.0f in [1.52e9, 1.69e9]", double(m)));
}

void gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  bool all = true;
  std::size_t min_cases = 1000;
  for (const auto& r : primitive_gradchecks(0, 10)) {
    worst = std::max(worst, r.max_error);
    all = all && r.passed();
    min_cases = std::min(min_cases, r.cases);
    if (!r.passed()) std::printf("     %s max error %.3e\n", r.name.c_str(), r.max_error);
  }
  report(all && min_cases >= 10, "gradients.primitives",
         fmt("worst %.3e (< 1e-6), >= %.0f cases per op, f64", worst, double(min_cases)));
  const auto model = model_gradcheck(0);
  report(model.passed(), "gradients.model",
         fmt("max error %.3e (< 1e-4) over %.0f tensors; %.1f s total", model.max_error, double(model.cases),
             seconds_since(t0)));
}

ModelConfig random_attention_config(Rng& rng) {
  ModelConfig c;
  c.heads = 1 + rng.below(3);
  c.hidden = c.heads * (1 + rng.below(4));
  return c;
}

LayerParams<double> random_layer(const ModelConfig& c, Rng& rng) {
  auto u = [&](Shape s, double scale) {
    std::vector<double> v(shape_numel(s));
    for (double& x : v) x = rng.uniform(-scale, scale);
    return Tensor<double>(s, v);
  };
  const std::size_t h = c.hidden;
  LayerParams<double> l;
  l.q_weight = u({h, h}, 1.0);
  l.q_bias = u({h}, 0.5);
  l.k_weight = u({h, h}, 1.0);
  l.k_bias = u({h}, 0.5);
  l.v_weight = u({h, h}, 1.0);
  l.v_bias = u({h}, 0.5);
  l.out_weight = u({h, h}, 1.0);
  l.out_bias = u({h}, 0.5);
  l.temperature = u({c.heads}, 2.0);
  return l;
}

void attention() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst_row = 0, worst_oracle = 0;
  bool diagonal_zero = true, argmax_stable = true;
  for (int instance = 0; instance < 1000; ++instance) {
    const ModelConfig c = random_attention_config(rng);
    const std::size_t n = 2 + rng.below(6), batch = 1 + rng.below(2), h = c.hidden, dk = c.head_dim();
    LayerParams<double> l = random_layer(c, rng);
    std::vector<double> zv(batch * n * h);
    for (double& x : zv) x = rng.uniform(-1.5, 1.5);
    const Tensor<double> z(Shape{batch, n, h}, zv);
    Tensor<double> probs;
    const Tensor<double> out = masked_attention(z, l, c, &probs);

    // doubled temperature
    LayerParams<double> l2 = l;
    l2.temperature = Tensor<double>(Shape{c.heads});
    for (std::size_t k = 0; k < c.heads; ++k) {
      const double tau = std::log1p(std::exp(l.temperature.data()[k])) + kTemperatureFloor;
      l2.temperature.mutable_data()[k] = std::log(std::expm1(2 * tau - kTemperatureFloor));
    }
    Tensor<double> probs2;
    (void)masked_attention(z, l2, c, &probs2);

    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<double> concat(n * h, 0.0);
      for (std::size_t hd = 0; hd < c.heads; ++hd) {
        const double tau = std::log1p(std::exp(l.temperature.data()[hd])) + kTemperatureFloor;
        auto proj = [&](const Tensor<double>& w, const Tensor<double>& bias, std::size_t i, std::size_t j) {
          double acc = bias.data()[j];
          for (std::size_t t = 0; t < h; ++t) acc += z.at({b, i, t}) * w.at({t, j});
          return acc;
        };
        for (std::size_t i = 0; i < n; ++i) {
          double row = 0;
          std::size_t arg1 = 0, arg2 = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const double p1 = probs.at({b, hd, i, j}), p2 = probs2.at({b, hd, i, j});
            row += p1;
            if (p1 > probs.at({b, hd, i, arg1})) arg1 = j;
            if (p2 > probs2.at({b, hd, i, arg2})) arg2 = j;
          }
          worst_row = std::max(worst_row, std::abs(row - 1.0));
          diagonal_zero = diagonal_zero && probs.at({b, hd, i, i}) == 0.0;
          argmax_stable = argmax_stable && arg1 == arg2;

          // brute force for this row
          std::vector<double> logit(n, -INFINITY);
          double mx = -INFINITY;
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double dot = 0;
            for (std::size_t d = 0; d < dk; ++d)
              dot += proj(l.q_weight, l.q_bias, i, hd * dk + d) * proj(l.k_weight, l.k_bias, j, hd * dk + d);
            logit[j] = dot / (tau * std::sqrt(double(dk)));
            mx = std::max(mx, logit[j]);
          }
          double zs = 0;
          for (std::size_t j = 0; j < n; ++j) zs += j == i ? 0.0 : std::exp(logit[j] - mx);
          for (std::size_t j = 0; j < n; ++j) {
            const double a = j == i ? 0.0 : std::exp(logit[j] - mx) / zs;
            worst_oracle = std::max(worst_oracle, std::abs(a - probs.at({b, hd, i, j})));
            for (std::size_t d = 0; d < dk; ++d) concat[i * h + hd * dk + d] += a * proj(l.v_weight, l.v_bias, j, hd * dk + d);
          }
        }
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) {
          double acc = l.out_bias.data()[j];
          for (std::size_t t = 0; t < h; ++t) acc += concat[i * h + t] * l.out_weight.at({t, j});
          worst_oracle = std::max(worst_oracle, std::abs(acc - out.at({b, i, j})));
        }
    }
  }
  report(worst_row <= 1e-6, "attention.rows-sum-to-1", fmt("max |row sum - 1| = %.3e over 1000 instances", worst_row));
  report(diagonal_zero, "attention.diagonal-zero", "every diagonal entry exactly 0");
  report(argmax_stable, "attention.argmax-under-2tau", "per-row argmax unchanged when tau doubles");
  report(worst_oracle < 1e-6, "attention.brute-force",
         fmt("max |difference| = %.3e (< 1e-6); %.1f s", worst_oracle, seconds_since(t0)));
}

void pooling() {
  Rng rng(7);
  double worst_sum = 0, worst_oracle = 0, worst_hull = 0;
  for (int instance = 0; instance < 1000; ++instance) {
    const std::size_t batch = 1 + rng.below(3), n = 1 + rng.below(9), h = 1 + rng.below(8);
    std::vector<double> ov(batch * n * h), wv(h);
    for (double& x : ov) x = rng.uniform(-3, 3);
    for (double& x : wv) x = rng.uniform(-2, 2);
    const Tensor<double> o(Shape{batch, n, h}, ov), w(Shape{h, 1}, wv), bias(Shape{1}, rng.uniform(-1, 1));
    Tensor<double> weights;
    const Tensor<double> s = seq_pool(o, w, bias, &weights);
    for (std::size_t b = 0; b < batch; ++b) {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i) total += weights.at({b, i});
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
      std::vector<double> score(n);
      double mx = -INFINITY, zs = 0;
      for (std::size_t i = 0; i < n; ++i) {
        score[i] = bias.data()[0];
        for (std::size_t j = 0; j < h; ++j) score[i] += o.at({b, i, j}) * w.at({j, 0});
        mx = std::max(mx, score[i]);
      }
      for (double& v : score) zs += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < h; ++j) {
        double acc = 0, lo = INFINITY, hi = -INFINITY;
        for (std::size_t i = 0; i < n; ++i) {
          acc += score[i] / zs * o.at({b, i, j});
          lo = std::min(lo, o.at({b, i, j}));
          hi = std::max(hi, o.at({b, i, j}));
        }
        const double v = s.at({b, j});
        worst_oracle = std::max(worst_oracle, std::abs(v - acc));
        worst_hull = std::max({worst_hull, lo - v, v - hi});
      }
    }
  }
  report(worst_sum <= 1e-6, "pooling.weights-sum-to-1", fmt("max |sum - 1| = %.3e", worst_sum));
  report(worst_hull <= 1e-12, "pooling.within-token-range", fmt("max excursion outside [min, max] = %.3e", std::max(0.0, worst_hull)));
  report(worst_oracle < 1e-6, "pooling.loop-oracle", fmt("max |difference| = %.3e (< 1e-6)", worst_oracle));
}

struct DeskRun {
  std::vector<double> losses;
  std::vector<EpochRecord> history;
  TrainState state;
  double seconds = 0;
};

DeskRun desk_run(const RunConfig& rc, const Dataset& train, const Dataset& eval) {
  DeskRun run;
  const auto t0 = Clock::now();
  run.state = TrainState::fresh(rc.model, rc.train.seed);
  FitCallbacks cb;
  cb.on_step = [&](std::size_t, std::size_t, double loss) { run.losses.push_back(loss); };
  run.history = fit(run.state, rc.model, train, &eval, rc.train, cb);
  run.seconds = seconds_since(t0);
  return run;
}

const RunConfig& desk() {
  static const RunConfig rc = desk_preset();
  return rc;
}

const SynthShapes& desk_eval() {
  static const SynthShapes s = synth_shapes(500, 64, 2);
  return s;
}

const DeskRun& first_desk_run() {
  static const DeskRun run = desk_run(desk(), synth_shapes(2000, 64, 1).dataset, desk_eval().dataset);
  return run;
}

void training() {
  const DeskRun& a = first_desk_run();
  const double top1 = a.history.back().eval_top1;
  report(top1 >= 0.98, "training.eval-top1",
         fmt("eval top-1 %.4f after %.0f epochs (>= 0.98); %.1f s", top1, double(a.history.size()), a.seconds));
  report(a.seconds <= 600, "training.runtime", fmt("%.1f s (<= 600)", a.seconds));

  const DeskRun b = desk_run(desk(), synth_shapes(2000, 64, 1).dataset, desk_eval().dataset);
  const bool identical = a.losses == b.losses;
  report(identical, "training.same-seed-identical",
         fmt("%.0f step losses compared bitwise across two runs", double(a.losses.size())));

  std::vector<double> windows;
  for (std::size_t start = 0; start + 5 <= a.history.size(); start += 5) {
    double s = 0;
    for (std::size_t e = start; e < start + 5; ++e) s += a.history[e].train_loss;
    windows.push_back(s / 5);
  }
  bool falling = true;
  for (std::size_t i = 1; i < windows.size(); ++i) falling = falling && windows[i] < windows[i - 1];
  std::string detail = "5-epoch mean train loss:";
  for (double w : windows) detail += fmt(" %.4f", w);
  report(falling, "training.loss-windows-fall", detail);
}

void gradcam() {
  const DeskRun& run = first_desk_run();
  const auto t0 = Clock::now();
  const SynthShapes& test = desk_eval();
  const ModelConfig& c = desk().model;
  std::size_t correct = 0, localized = 0;
  for (std::size_t i = 0; i < test.dataset.count; ++i) {
    const std::size_t idx[] = {i};
    const Tensor<float> image = image_batch(test.dataset, idx);
    const Tensor<float> logits = forward(image, run.state.params, c, false);
    const std::size_t pred = logits.data()[1] > logits.data()[0] ? 1 : 0;
    if (pred != test.dataset.labels[i]) continue;
    ++correct;
    const Localization loc = localization(grad_cam(run.state.params, c, image, pred), c.image_size, test.boxes[i]);
    localized += loc.inside > loc.outside;
  }
  const double frac = correct ? double(localized) / double(correct) : 0.0;
  report(frac >= 0.90, "gradcam.localization",
         fmt("in-box heat > out-box heat on %.0f of %.0f correctly classified (", double(localized), double(correct)) +
             fmt("%.4f >= 0.90); %.1f s", frac, seconds_since(t0)));
}

void formats() {
  const std::filesystem::path fixtures = COMVIT_FIXTURES;
  // golden bytes, written by an independent script
  Dataset ds;
  ds.count = 3;
  ds.height = ds.width = 8;
  ds.channels = 1;
  ds.num_classes = 3;
  for (std::size_t i = 0; i < 192; ++i) ds.pixels.push_back(static_cast<std::uint8_t>((i * 37 + 11) % 256));
  ds.labels = {2, 0, 1};
  const auto golden_cmvd = read_file(fixtures / "golden.cmvd");
  report(write_dataset(ds) == golden_cmvd && write_dataset(read_dataset(golden_cmvd)) == golden_cmvd,
         "formats.cmvd-golden", std::to_string(golden_cmvd.size()) + " bytes, write and read-write byte-exact");

  const auto golden_cmvw = read_file(fixtures / "golden.cmvw");
  Checkpoint ck;
  ck.config.image_size = 8;
  ck.config.in_channels = 1;
  ck.config.layers = 1;
  ck.config.hidden = 4;
  ck.config.heads = 2;
  ck.config.mlp_size = 8;
  ck.config.num_classes = 2;
  ck.config.stem_channels = 2;
  ck.config.conv_kernel = 3;
  ck.config.conv_stride = 1;
  ck.config.conv_padding = 1;
  std::size_t k = 0;
  for (const auto& [name, shape] : param_shapes(ck.config)) {
    std::vector<float> v(shape_numel(shape));
    for (float& x : v) x = static_cast<float>(static_cast<int>((k++ * 13) % 29) - 14) / 16.0f;
    ck.tensors.push_back({name, Tensor<float>(shape, v)});
  }
  ck.epoch = 3;
  ck.rng = {42, 1234};
  ck.optimizer_step = 7;
  report(save_checkpoint(ck) == golden_cmvw && save_checkpoint(load_checkpoint(golden_cmvw)) == golden_cmvw,
         "formats.cmvw-golden", std::to_string(golden_cmvw.size()) + " bytes, write and read-write byte-exact");

  // header fuzzing: every single-bit flip, plus random multi-byte corruption and truncation
  std::size_t trials = 0, rejected = 0, untyped = 0;
  auto attempt = [&](auto&& parse) {
    ++trials;
    try {
      parse();
    } catch (const Error&) {
      ++rejected;
    } catch (...) {
      ++untyped;
    }
  };
  for (const auto* bytes : {&golden_cmvd, &golden_cmvw}) {
    const bool is_ds = bytes == &golden_cmvd;
    const std::size_t region = is_ds ? kDatasetHeaderBytes : std::size_t{8 + 56 + 18 + 4};
    for (std::size_t byte = 0; byte < region; ++byte)
      for (int bit = 0; bit < 8; ++bit) {
        auto f = *bytes;
        f[byte] ^= static_cast<std::uint8_t>(1u << bit);
        attempt([&] { is_ds ? (void)read_dataset(f) : (void)load_checkpoint(f); });
      }
    Rng rng(99);
    for (int t = 0; t < 2000; ++t) {
      auto f = *bytes;
      const std::size_t hits = 1 + rng.below(6);
      for (std::size_t h = 0; h < hits; ++h) f[rng.below(region)] = static_cast<std::uint8_t>(rng.below(256));
      if (rng.bernoulli(0.3)) f.resize(rng.below(f.size()));
      attempt([&] { is_ds ? (void)read_dataset(f) : (void)load_checkpoint(f); });
    }
  }
  report(untyped == 0, "formats.fuzz-no-crash",
         fmt("%.0f corrupted inputs, %.0f rejected with typed errors, %.0f untyped", double(trials), double(rejected),
             double(untyped)));

  // resume equivalence on the desk recipe, shortened to 4 epochs of a 256-sample set
  RunConfig rc = desk();
  rc.train.epochs = 4;
  rc.train.mixup_off_epoch = 3;
  const Dataset train = synth_shapes(256, 64, 5).dataset;
  std::vector<double> straight, resumed;
  TrainState a = TrainState::fresh(rc.model, 3);
  FitCallbacks ca;
  ca.on_step = [&](std::size_t, std::size_t, double l) { straight.push_back(l); };
  fit(a, rc.model, train, nullptr, rc.train, ca);
  TrainState b = TrainState::fresh(rc.model, 3);
  FitCallbacks cb;
  cb.on_step = [&](std::size_t, std::size_t, double l) { resumed.push_back(l); };
  fit(b, rc.model, train, nullptr, rc.train, cb, nullptr, 2);
  TrainState restored = TrainState::from_checkpoint(load_checkpoint(save_checkpoint(b.to_checkpoint(rc.model))));
  fit(restored, rc.model, train, nullptr, rc.train, cb);
  const bool same = straight == resumed &&
                    save_checkpoint(a.to_checkpoint(rc.model)) == save_checkpoint(restored.to_checkpoint(rc.model));
  report(same, "formats.resume-equivalence",
         fmt("stop at epoch 2 of 4, save, load, finish: %.0f step losses and final checkpoint bit-identical",
             double(straight.size())));
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<void()>>> criteria{
      {"params", params},   {"macs", macs},         {"gradients", gradients}, {"attention", attention},
      {"pooling", pooling}, {"training", training}, {"gradcam", gradcam},     {"formats", formats}};
  std::vector<std::string> wanted(argv + 1, argv + argc);
  for (const auto& w : wanted) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const auto& c) { return c.first == w; })) {
      std::fprintf(stderr, "unknown criterion '%s'\n", w.c_str());
      return 2;
    }
  }
  for (const auto& [name, run] : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
    try {
      run();
    } catch (const std::exception& e) {
      report(false, name, std::string("threw: ") + e.what());
    }
  }
  return failures == 0 ? 0 : 1;
}

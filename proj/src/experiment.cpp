#include "epid/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/version.hpp>

#include "epid/error.hpp"
#include "epid/random.hpp"

namespace epid {

using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

// Read-only view of a JSON node that knows its own path, so that every
// error names the field it is about.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  [[nodiscard]] const json& raw() const noexcept { return j_; }
  [[nodiscard]] const std::string& path() const noexcept { return path_; }
  [[nodiscard]] bool has(const char* key) const { return j_.is_object() && j_.contains(key); }

  [[nodiscard]] Node at(const char* key) const {
    if (!has(key)) fail(child(key), "is required");
    return {j_.at(key), child(key)};
  }

  [[nodiscard]] Node at(std::size_t i) const { return {j_.at(i), path_ + "[" + std::to_string(i) + "]"}; }

  void expect_object(std::initializer_list<const char*> allowed) const {
    if (!j_.is_object()) fail(path_, "must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!ok.count(it.key())) fail(child(it.key().c_str()), "is not a known field");
  }

  [[nodiscard]] double number() const {
    if (!j_.is_number()) fail(path_, "must be a number");
    const double v = j_.get<double>();
    if (!std::isfinite(v)) fail(path_, "must be finite");
    return v;
  }

  [[nodiscard]] double positive() const {
    const double v = number();
    if (!(v > 0.0)) fail(path_, "must be positive");
    return v;
  }

  [[nodiscard]] long long integer(long long lo) const {
    if (!j_.is_number_integer()) fail(path_, "must be an integer");
    const long long v = j_.get<long long>();
    if (v < lo) fail(path_, "must be at least " + std::to_string(lo));
    return v;
  }

  [[nodiscard]] std::uint64_t seed() const {
    if (!j_.is_number_unsigned() && !(j_.is_number_integer() && j_.get<long long>() >= 0))
      fail(path_, "must be a nonnegative integer");
    return j_.get<std::uint64_t>();
  }

  [[nodiscard]] bool boolean() const {
    if (!j_.is_boolean()) fail(path_, "must be true or false");
    return j_.get<bool>();
  }

  [[nodiscard]] std::string string() const {
    if (!j_.is_string()) fail(path_, "must be a string");
    return j_.get<std::string>();
  }

  [[nodiscard]] std::vector<double> numbers(std::size_t min_len = 1) const {
    if (!j_.is_array()) fail(path_, "must be an array of numbers");
    if (j_.size() < min_len) fail(path_, "must have at least " + std::to_string(min_len) + " entries");
    std::vector<double> out;
    for (std::size_t i = 0; i < j_.size(); ++i) out.push_back(at(i).number());
    return out;
  }

  [[nodiscard]] Vec vec(std::size_t min_len = 1) const {
    const auto v = numbers(min_len);
    return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& what) {
    throw Error(Errc::config, path + " " + what);
  }

 private:
  [[nodiscard]] std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
};

PresetParams parse_plant(const Node& p) {
  p.expect_object({"preset", "n", "a_sin", "a_cos", "b_mean", "b_amp", "f1_amp", "f2_amp", "f1_a", "f1_b", "g_mean",
                   "g_amp", "eta", "epsilon"});
  PresetParams out;
  const Node kind = p.at("preset");
  try {
    out.kind = parse_preset_kind(kind.string());
  } catch (const Error& e) {
    Node::fail(kind.path(), e.what());
  }
  if (p.has("n")) out.n = static_cast<int>(p.at("n").integer(1));
  const std::pair<const char*, double*> fields[] = {
      {"a_sin", &out.a_sin},   {"a_cos", &out.a_cos},   {"b_mean", &out.b_mean}, {"b_amp", &out.b_amp},
      {"f1_amp", &out.f1_amp}, {"f2_amp", &out.f2_amp}, {"f1_a", &out.f1_a},     {"f1_b", &out.f1_b},
      {"g_mean", &out.g_mean}, {"g_amp", &out.g_amp},   {"eta", &out.eta},       {"epsilon", &out.epsilon}};
  for (const auto& [key, dst] : fields)
    if (p.has(key)) *dst = p.at(key).number();
  if (out.kind != PresetKind::normal_form && p.has("n") && out.n != 2) Node::fail(p.path() + ".n", "must be 2 for this preset");
  if (out.kind != PresetKind::normal_form) out.n = 2;
  return out;
}

GainSource parse_gains(const Node& g) {
  g.expect_object({"k", "lambda", "b_low", "sample"});
  GainSource out;
  const int given = int(g.has("k")) + int(g.has("lambda")) + int(g.has("sample"));
  if (given != 1) Node::fail(g.path(), "needs exactly one of k, lambda, sample");
  if (g.has("b_low")) out.b_low = g.at("b_low").positive();
  if (g.has("k")) {
    out.kind = GainSource::Kind::explicit_k;
    out.k = g.at("k").numbers(2);
  } else if (g.has("lambda")) {
    out.kind = GainSource::Kind::lambda;
    out.lambda = g.at("lambda").numbers(2);
  } else {
    out.kind = GainSource::Kind::sample;
    const Node s = g.at("sample");
    s.expect_object({"count", "seed", "upper_factor"});
    if (s.has("count")) out.count = static_cast<std::size_t>(s.at("count").integer(1));
    if (s.has("seed")) out.seed = s.at("seed").seed();
    if (s.has("upper_factor")) out.upper_factor = s.at("upper_factor").positive();
  }
  return out;
}

ObserverSpec parse_observer(const Node& o) {
  ObserverSpec out;
  if (o.raw().is_string()) {
    if (o.string() != "auto") Node::fail(o.path(), "must be \"auto\" or an object");
    return out;
  }
  o.expect_object({"beta", "epsilon", "epsilon_fraction", "zhat0"});
  if (o.has("beta")) out.beta = o.at("beta").vec();
  if (o.has("epsilon")) {
    const Node e = o.at("epsilon");
    if (!(e.raw().is_string() && e.string() == "auto")) out.epsilon = e.positive();
  }
  if (o.has("epsilon_fraction")) {
    out.epsilon_fraction = o.at("epsilon_fraction").positive();
    if (out.epsilon_fraction >= 1.0) Node::fail(o.path() + ".epsilon_fraction", "must be below 1");
  }
  if (o.has("zhat0")) out.zhat0 = o.at("zhat0").vec();
  return out;
}

void parse_integrator(const Node& i, ExperimentConfig& cfg) {
  i.expect_object({"kind", "dt", "abs_tol", "rel_tol", "samples", "escape_norm", "dt_min", "max_steps"});
  IntegratorPolicy& p = cfg.policy;
  if (i.has("kind")) {
    const Node k = i.at("kind");
    try {
      p.kind = parse_integrator_kind(k.string());
    } catch (const Error& e) {
      Node::fail(k.path(), e.what());
    }
  }
  if (i.has("dt")) p.dt = i.at("dt").positive();
  if (i.has("abs_tol")) p.abs_tol = i.at("abs_tol").positive();
  if (i.has("rel_tol")) p.rel_tol = i.at("rel_tol").positive();
  if (i.has("samples")) p.samples = static_cast<int>(i.at("samples").integer(2));
  if (i.has("escape_norm")) p.escape_norm = i.at("escape_norm").positive();
  if (i.has("max_steps")) p.max_steps = i.at("max_steps").integer(1);
  if (i.has("dt_min")) {
    const Node d = i.at("dt_min");
    if (d.raw().is_string()) {
      if (d.string() != "auto") Node::fail(d.path(), "must be a number or \"auto\"");
      cfg.dt_min_auto = true;
    } else {
      p.dt_min = d.positive();
    }
  }
}

InitialStates parse_initial(const Node& s, int n) {
  s.expect_object({"list", "radius", "count", "seed"});
  InitialStates out;
  if (s.has("list") == s.has("radius")) Node::fail(s.path(), "needs exactly one of list, radius");
  if (s.has("list")) {
    const Node l = s.at("list");
    if (!l.raw().is_array() || l.raw().empty()) Node::fail(l.path(), "must be a nonempty array");
    for (std::size_t i = 0; i < l.raw().size(); ++i) {
      const Node x = l.at(i);
      Vec v = x.vec();
      if (v.size() != n) Node::fail(x.path(), "must have " + std::to_string(n) + " entries");
      out.list.push_back(std::move(v));
    }
  } else {
    out.radius = s.at("radius").number();
    if (*out.radius < 0.0) Node::fail(s.path() + ".radius", "must be nonnegative");
    if (s.has("count")) out.count = static_cast<std::size_t>(s.at("count").integer(1));
    if (s.has("seed")) out.seed = s.at("seed").seed();
  }
  return out;
}

CheckSelection parse_checks(const Node& c) {
  c.expect_object({"no_escape", "convergence", "lyapunov", "bound", "rate", "xi", "grid", "escape_before",
                   "escape_profile"});
  CheckSelection out;
  if (c.has("no_escape")) out.no_escape = c.at("no_escape").boolean();
  if (c.has("convergence")) out.convergence = c.at("convergence").positive();
  if (c.has("lyapunov")) out.lyapunov = c.at("lyapunov").boolean();
  if (c.has("bound")) out.bound = c.at("bound").boolean();
  if (c.has("rate")) out.rate = c.at("rate").boolean();
  if (c.has("xi")) out.xi = c.at("xi").boolean();
  if (c.has("grid")) out.grid = c.at("grid").boolean();
  if (c.has("escape_before")) out.escape_before = c.at("escape_before").positive();
  if (c.has("escape_profile")) out.escape_profile = c.at("escape_profile").boolean();
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

template <class Range>
json to_json_range(const Range& r) {
  return std::vector<double>(r.begin(), r.end());
}

std::vector<Vec> initial_states(const InitialStates& spec, int n, std::uint64_t seed) {
  if (!spec.radius) return spec.list;
  Rng rng(seed);
  std::vector<Vec> out;
  for (std::size_t i = 0; i < spec.count; ++i) {
    Vec d(n);
    for (int j = 0; j < n; ++j) d(j) = rng.normal();
    const double r = *spec.radius * std::pow(rng.uniform(), 1.0 / n);
    out.push_back(d * (r / d.norm()));
  }
  return out;
}

// Runs body(i) for i < count on a small pool; the first exception wins.
template <class Body>
void parallel_for(std::size_t count, unsigned threads, Body body) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

template <class Fn>
CheckRecord guarded(const std::string& name, Fn fn) {
  try {
    return fn();
  } catch (const Error& e) {
    CheckRecord r;
    r.name = name;
    r.passed = false;
    r.detail = e.what();
    return r;
  }
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  const Node root(j, "");
  root.expect_object({"name", "plant", "setpoint", "mode", "gains", "bounds", "c", "observer", "horizon",
                      "integrator", "initial_states", "checks", "seed", "threads", "sweep"});
  ExperimentConfig cfg;
  cfg.source = j;
  if (root.has("name")) cfg.name = root.at("name").string();
  cfg.plant = parse_plant(root.at("plant"));
  if (root.has("setpoint")) cfg.y_star = root.at("setpoint").number();
  if (root.has("mode")) {
    const Node m = root.at("mode");
    const std::string s = m.string();
    if (s == "state_feedback") {
      cfg.mode = ControllerMode::state_derivative_feedback;
    } else if (s == "observer") {
      cfg.mode = ControllerMode::observer_based;
    } else {
      Node::fail(m.path(), "must be \"state_feedback\" or \"observer\"");
    }
  }
  cfg.gains = parse_gains(root.at("gains"));
  const int n = cfg.plant.n;
  if (cfg.gains.kind == GainSource::Kind::explicit_k && static_cast<int>(cfg.gains.k.size()) != n + 1)
    Node::fail("gains.k", "must have n + 1 = " + std::to_string(n + 1) + " entries");
  if (cfg.gains.kind == GainSource::Kind::lambda && static_cast<int>(cfg.gains.lambda.size()) != n + 1)
    Node::fail("gains.lambda", "must have n + 1 = " + std::to_string(n + 1) + " entries");
  if (root.has("bounds")) {
    const Node b = root.at("bounds");
    b.expect_object({"L", "b_low", "b_high"});
    if (b.has("L")) cfg.bounds.L = b.at("L").number();
    if (b.has("b_low")) cfg.bounds.b_low = b.at("b_low").positive();
    if (b.has("b_high")) cfg.bounds.b_high = b.at("b_high").positive();
  }
  if (root.has("c")) cfg.c = root.at("c").positive();
  if (root.has("observer")) {
    if (cfg.mode != ControllerMode::observer_based) Node::fail("observer", "is only allowed in observer mode");
    cfg.observer = parse_observer(root.at("observer"));
  } else if (cfg.mode == ControllerMode::observer_based) {
    cfg.observer = ObserverSpec{};
  }
  if (cfg.observer) {
    if (cfg.observer->beta && cfg.observer->beta->size() != n) Node::fail("observer.beta", "must have n entries");
    if (cfg.observer->zhat0 && cfg.observer->zhat0->size() != n) Node::fail("observer.zhat0", "must have n entries");
  }
  if (root.has("horizon")) cfg.t_end = root.at("horizon").positive();
  if (root.has("integrator")) parse_integrator(root.at("integrator"), cfg);
  cfg.initial = parse_initial(root.at("initial_states"), n);
  if (root.has("checks")) cfg.checks = parse_checks(root.at("checks"));
  if (cfg.checks.xi && cfg.mode != ControllerMode::observer_based) Node::fail("checks.xi", "needs observer mode");
  if (cfg.checks.escape_profile && cfg.plant.kind != PresetKind::escape_counterexample)
    Node::fail("checks.escape_profile", "needs the escape_counterexample preset");
  if (root.has("seed")) cfg.seed = root.at("seed").seed();
  if (root.has("threads")) cfg.threads = static_cast<unsigned>(root.at("threads").integer(0));
  return cfg;
}

json load_config_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(Errc::config, "cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw Error(Errc::config, path.string() + ": " + e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(load_config_json(path)); }

std::vector<SweepVariant> expand_sweep(const json& j) {
  if (!j.is_object() || !j.contains("sweep")) return {{"base", j}};
  const json& sweep = j.at("sweep");
  if (!sweep.is_object() || sweep.empty()) throw Error(Errc::config, "sweep must be a nonempty object");
  json base = j;
  base.erase("sweep");
  std::vector<SweepVariant> out{{"", base}};
  for (auto it = sweep.begin(); it != sweep.end(); ++it) {
    if (!it.value().is_array() || it.value().empty())
      throw Error(Errc::config, "sweep." + it.key() + " must be a nonempty array");
    json::json_pointer ptr;
    std::istringstream parts(it.key());
    for (std::string part; std::getline(parts, part, '.');) {
      if (part.empty()) throw Error(Errc::config, "sweep." + it.key() + " is not a valid field path");
      ptr /= part;
    }
    std::vector<SweepVariant> next;
    for (const auto& variant : out) {
      for (std::size_t i = 0; i < it.value().size(); ++i) {
        SweepVariant v = variant;
        v.config[ptr] = it.value()[i];
        v.label += (v.label.empty() ? "" : "_") + it.key() + "=" + it.value()[i].dump();
        next.push_back(std::move(v));
      }
    }
    out = std::move(next);
  }
  for (auto& v : out) {
    std::string safe;
    for (char ch : v.label) safe += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' || ch == '=' || ch == '_') ? ch : '_';
    v.label = safe;
  }
  return out;
}

bool RunResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckRecord& r) { return r.passed; });
}

bool ExperimentResult::passed() const {
  auto ok = [](const CheckRecord& r) { return r.passed; };
  return std::all_of(global_checks.begin(), global_checks.end(), ok) &&
         std::all_of(runs.begin(), runs.end(), [](const RunResult& r) { return r.passed(); });
}

UncertaintyBounds resolve_bounds(const ExperimentConfig& config, const PlantModel& plant) {
  UncertaintyBounds b = derived_bounds(plant, config.y_star);
  if (config.bounds.L) b.L = *config.bounds.L;
  if (config.bounds.b_low) b.b_low = *config.bounds.b_low;
  if (config.bounds.b_high) b.b_high = *config.bounds.b_high;
  b.validate();
  return b;
}

json gains_report(const GainVector& gains, const std::optional<LambdaVector>& lam, const UncertaintyBounds& bounds,
                  double c) {
  json j;
  j["k"] = to_json_range(gains.values());
  j["b_low"] = gains.b_low();
  j["c"] = c;
  const int n = gains.order();
  j["threshold"] = omega_lambda_threshold(bounds, n, c);
  j["bounds"] = {{"L", bounds.L}, {"b_low", bounds.b_low}, {"b_high", bounds.b_high}};
  if (!lam) {
    j["lambda"] = nullptr;
    j["in_omega"] = false;
    return j;
  }
  j["lambda"] = to_json_range(lam->values());
  j["in_omega1"] = in_omega1(*lam);
  const bool inside = in_omega(*lam, bounds, c);
  j["in_omega"] = inside;
  if (inside) j["alpha"] = compute_alpha(*lam, bounds, c);
  const CharpolyReport cp = charpoly_residuals(gains, gains.b_low(), *lam);
  j["charpoly_residual"] = cp.max_residual;
  j["eigenvector_residual"] = cp.eigenvector_residual;
  return j;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  ExperimentResult res;
  res.config = config;
  const PlantModel plant = make_preset(config.plant);
  const int n = plant.order();
  res.bounds = resolve_bounds(config, plant);
  res.c = config.c.value_or(c0_upper_bound(n));
  const double b_low = config.gains.b_low.value_or(res.bounds.b_low);

  switch (config.gains.kind) {
    case GainSource::Kind::explicit_k: {
      GainVector g(config.gains.k, b_low);
      std::optional<LambdaVector> lam;
      try {
        lam = gains_to_lambda(g);
      } catch (const Error&) {
        // Gains off the manifold: simulation still runs, certificates do not.
      }
      res.gain_sets.push_back({g, lam, {}});
      break;
    }
    case GainSource::Kind::lambda: {
      LambdaVector lam(config.gains.lambda);
      res.gain_sets.push_back({lambda_to_gains(lam, b_low), lam, {}});
      break;
    }
    case GainSource::Kind::sample: {
      UncertaintyBounds sb = res.bounds;
      sb.b_low = b_low;
      for (auto& s : sample_omega(n, sb, res.c, config.gains.seed.value_or(config.seed), config.gains.count,
                                  config.gains.upper_factor))
        res.gain_sets.push_back({s.gains, s.lambda, {}});
      break;
    }
  }

  // Per gain set: certificate constants and the observer settings.
  std::vector<std::optional<ObserverConfig>> observers;
  std::vector<std::optional<ObserverCertificate>> certs;
  for (auto& gs : res.gain_sets) {
    gs.constants = gains_report(gs.gains, gs.lambda, res.bounds, res.c);
    std::optional<ObserverConfig> oc;
    std::optional<ObserverCertificate> cert;
    if (config.observer) {
      const Vec beta = config.observer->beta.value_or(hurwitz_beta(n));
      if (gs.lambda && gs.constants.value("in_omega", false))
        cert = epsilon_star(*gs.lambda, gs.gains, res.bounds, res.c, beta);
      double eps = 0.0;
      if (config.observer->epsilon) {
        eps = *config.observer->epsilon;
      } else {
        if (!cert) throw Error(Errc::config, "observer.epsilon auto needs gains inside the certified manifold");
        eps = config.observer->epsilon_fraction * cert->epsilon_star;
      }
      oc = ObserverConfig{beta, eps, config.observer->zhat0};
      oc->validate();
      gs.constants["observer"] = {{"beta", to_json(beta)}, {"epsilon", eps}};
      if (cert) {
        gs.constants["observer"]["epsilon_star"] = cert->epsilon_star;
        gs.constants["observer"]["c1"] = cert->c1;
        gs.constants["observer"]["c2"] = cert->c2;
        gs.constants["observer"]["beta_rate"] = observer_decay_rate(*cert, eps);
      }
    }
    observers.push_back(oc);
    certs.push_back(cert);
  }

  const std::vector<Vec> states =
      initial_states(config.initial, n, config.initial.seed.value_or(config.seed + 1));
  for (const Vec& x : states)
    if (x.size() != n) throw Error(Errc::arity, "initial state length must equal the plant order");

  if (config.checks.grid) {
    res.global_checks.push_back(guarded("assumption_grid", [&] {
      const GridReport g = assumption_grid_check(plant, res.bounds, config.y_star);
      CheckRecord r{"assumption_grid", g.ok, g.max_effective_ratio - 1.0, {}, {}};
      r.constants = {{"min_G", g.min_G},
                     {"max_G", g.max_G},
                     {"lipschitz_ratio", g.max_lipschitz_ratio},
                     {"effective_ratio", g.max_effective_ratio},
                     {"points", static_cast<double>(g.points)}};
      if (res.bounds.has_tau()) {
        r.constants["tau1_ratio"] = g.max_tau1_ratio;
        r.constants["tau2_ratio"] = g.max_tau2_ratio;
      }
      for (const auto& f : g.failures) r.detail += (r.detail.empty() ? "" : "; ") + f;
      return r;
    }));
  }

  const std::size_t total = res.gain_sets.size() * states.size();
  res.runs.resize(total);
  parallel_for(total, config.threads, [&](std::size_t idx) {
    const std::size_t gi = idx / states.size();
    const std::size_t si = idx % states.size();
    const GainSet& gs = res.gain_sets[gi];
    const auto& oc = observers[gi];
    RunResult& run = res.runs[idx];
    char id[64];
    std::snprintf(id, sizeof id, "run_g%03zu_s%03zu", gi, si);
    run.id = id;
    run.gain_index = gi;
    run.state_index = si;
    run.x0 = states[si];

    IntegratorPolicy pol = config.policy;
    if (config.dt_min_auto) {
      double scale = 1.0;
      if (gs.lambda) scale = std::min(scale, 1.0 / gs.lambda->back());
      if (oc) scale = std::min(scale, oc->epsilon);
      pol.dt_min = 1e-6 * scale;
    }
    const ControllerState ctrl{gs.gains, config.mode, 0.0};
    const VectorField field = assemble_closed_loop(plant, ctrl, config.y_star, oc);
    run.trace = integrate(field, initial_augmented_state(plant, config.y_star, run.x0, oc), config.t_end, pol);
    const Trace& tr = run.trace;

    const bool in_omega = gs.constants.value("in_omega", false);
    std::optional<double> alpha;
    if (in_omega) alpha = gs.constants.at("alpha").get<double>();
    auto need_alpha = [&](const char* name) {
      if (!alpha) throw Error(Errc::certificate_unavailable, std::string(name) + " needs gains inside the certified manifold");
    };
    const double e_end = std::abs(tr.e.back());

    if (config.checks.no_escape) {
      CheckRecord r{"no_escape", !tr.escape.detected, tr.escape.detected ? 1.0 : 0.0, {}, {}};
      r.constants["t_final"] = tr.t.back();
      if (tr.escape.detected) r.detail = "escape reason=" + tr.escape.reason + " at t=" + fmt(tr.escape.last_accepted);
      run.checks.push_back(std::move(r));
    }
    if (config.checks.convergence) {
      const double tol = *config.checks.convergence;
      CheckRecord r{"convergence", !tr.escape.detected && e_end <= tol, e_end - tol, {}, {}};
      r.constants = {{"abs_error_final", e_end}, {"tol", tol}, {"t_final", tr.t.back()}};
      run.checks.push_back(std::move(r));
    }
    if (config.checks.lyapunov) {
      run.checks.push_back(guarded("lyapunov_decrease", [&] {
        need_alpha("lyapunov_decrease");
        const WCoordinates w = to_w_coordinates(tr, *gs.lambda, gs.gains, plant, config.y_star);
        const LyapunovReport lr = lyapunov_check(w, *alpha);
        CheckRecord r{"lyapunov_decrease", lr.ok && !tr.escape.detected, lr.worst_margin, {}, {}};
        r.constants = {{"alpha", *alpha},
                       {"violations", static_cast<double>(lr.violations)},
                       {"worst_time", lr.worst_time},
                       {"reconstruction_residual", w.max_residual}};
        return r;
      }));
    }
    if (config.checks.bound) {
      run.checks.push_back(guarded("error_bound", [&] {
        need_alpha("error_bound");
        const BoundReport br = check_error_bound(tr, res.c, *alpha, plant, gs.gains, res.bounds, config.y_star);
        CheckRecord r{"error_bound", br.ok && !tr.escape.detected, br.worst_margin, {}, {}};
        r.constants = {{"c", res.c},
                       {"alpha", *alpha},
                       {"initial_bound", br.initial_bound},
                       {"worst_ratio", br.worst_ratio},
                       {"violations", static_cast<double>(br.violations)}};
        return r;
      }));
    }
    if (config.checks.rate) {
      const auto rate = fit_rate(tr);
      CheckRecord r{"fitted_rate", rate.has_value() && *rate > 0.0, rate ? -*rate : 0.0, {}, {}};
      if (rate) r.constants["alpha_hat"] = *rate;
      if (alpha) r.constants["alpha"] = *alpha;
      if (!rate) r.detail = "fit unavailable";
      run.checks.push_back(std::move(r));
    }
    if (config.checks.xi) {
      run.checks.push_back(guarded("observer_xi", [&] {
        if (!certs[gi]) throw Error(Errc::certificate_unavailable, "observer_xi needs gains inside the certified manifold");
        const XiReport xr = observer_xi_check(tr, *gs.lambda, gs.gains, plant, config.y_star, *certs[gi], oc->epsilon, res.c);
        CheckRecord r{"observer_xi", xr.ok && !tr.escape.detected, xr.worst_ratio - 1.0, {}, {}};
        r.constants = {{"epsilon", oc->epsilon},
                       {"beta_rate", xr.beta},
                       {"xi0", xr.xi0},
                       {"xi_final", xr.xi_final},
                       {"worst_ratio", xr.worst_ratio},
                       {"violations", static_cast<double>(xr.violations)}};
        return r;
      }));
    }
    if (config.checks.escape_before) {
      const double limit = *config.checks.escape_before;
      const EscapeInfo& esc = tr.escape;
      CheckRecord r{"escape_time", esc.detected && esc.bracket_high <= limit, esc.bracket_high - limit, {}, {}};
      r.constants = {{"bracket_low", esc.bracket_low}, {"bracket_high", esc.bracket_high}, {"limit", limit}};
      if (config.plant.kind == PresetKind::escape_counterexample) r.constants["four_epsilon"] = 4.0 * config.plant.epsilon;
      r.detail = esc.detected ? "reason=" + esc.reason : "no escape detected";
      run.checks.push_back(std::move(r));
    }
    if (config.checks.escape_profile) {
      // f(x₂(t)) ≥ t/(2ε) along the recorded samples, up to the tolerance.
      double worst = -std::numeric_limits<double>::infinity();
      std::size_t bad = 0;
      const double eps = config.plant.epsilon;
      for (std::size_t i = 0; i < tr.size(); ++i) {
        const double gap = tr.t[i] / (2.0 * eps) - escape_profile(tr.states[i](2), config.plant.eta);
        worst = std::max(worst, gap);
        if (gap > 1e-6) ++bad;
      }
      CheckRecord r{"escape_profile", bad == 0, worst, {}, {}};
      r.constants = {{"violations", static_cast<double>(bad)}, {"samples", static_cast<double>(tr.size())}};
      run.checks.push_back(std::move(r));
    }
  });
  return res;
}

void write_bundle(const ExperimentResult& result, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "traces");
  fs::create_directories(out_dir / "reports");
  auto write = [](const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error(Errc::config, "cannot write " + p.string());
    f << text;
  };

  std::ostringstream report, plot;
  plot << "series,t,value\n";
  json runs = json::array();
  if (!result.global_checks.empty()) report << "# global\n" << format_report(result.global_checks);
  for (const RunResult& run : result.runs) {
    write_trace_csv(run.trace, (out_dir / "traces" / (run.id + ".csv")).string());
    json summary = trace_summary(run.trace);
    summary["id"] = run.id;
    summary["x0"] = to_json(run.x0);
    summary["gain_index"] = run.gain_index;
    write(out_dir / "traces" / (run.id + ".summary.json"), summary.dump(2) + "\n");
    const std::string text = format_report(run.checks);
    write(out_dir / "reports" / (run.id + ".txt"), text);
    report << "# " << run.id << "\n" << text;
    for (const char* series : {"y", "e", "u"}) {
      const auto& v = series[0] == 'y' ? run.trace.y : series[0] == 'e' ? run.trace.e : run.trace.u;
      for (std::size_t i = 0; i < run.trace.size(); ++i)
        plot << run.id << '/' << series << ',' << fmt(run.trace.t[i]) << ',' << fmt(v[i]) << '\n';
    }
    runs.push_back({{"id", run.id},
                    {"trace", "traces/" + run.id + ".csv"},
                    {"report", "reports/" + run.id + ".txt"},
                    {"passed", run.passed()},
                    {"escape", run.trace.escape.detected}});
  }
  report << "overall: " << (result.passed() ? "pass" : "FAIL") << '\n';
  write(out_dir / "report.txt", report.str());
  write(out_dir / "plot.csv", plot.str());

  const ExperimentConfig& cfg = result.config;
  json gain_sets = json::array();
  for (const auto& gs : result.gain_sets) gain_sets.push_back(gs.constants);
  json manifest;
  manifest["name"] = cfg.name;
  manifest["version"] = kVersion;
  manifest["toolchain"] = {{"compiler", __VERSION__},
                           {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                         "." + std::to_string(EIGEN_MINOR_VERSION)},
                           {"boost", BOOST_LIB_VERSION}};
  manifest["config"] = cfg.source;
  manifest["seeds"] = {{"seed", cfg.seed},
                       {"gains", cfg.gains.seed.value_or(cfg.seed)},
                       {"initial_states", cfg.initial.seed.value_or(cfg.seed + 1)}};
  manifest["constants"] = {{"c", result.c},
                           {"c0_upper_bound", c0_upper_bound(cfg.plant.n)},
                           {"bounds",
                            {{"L", result.bounds.L}, {"b_low", result.bounds.b_low}, {"b_high", result.bounds.b_high}}},
                           {"threshold", omega_lambda_threshold(result.bounds, cfg.plant.n, result.c)},
                           {"gain_sets", gain_sets}};
  manifest["runs"] = runs;
  manifest["passed"] = result.passed();
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  manifest["created"] = stamp;
  write(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace epid

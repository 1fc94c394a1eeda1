#include "ptqlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "ptqlab/checkpoint_io.hpp"

namespace ptqlab {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  for (auto& l : split(text, '\n')) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

std::string opt3(const std::optional<double>& v) { return v ? fmt3(*v) : std::string(); }

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("bad number '" + s + "' in " + what);
  }
}

std::optional<double> parse_opt(const std::string& s, const std::string& what) {
  if (s.empty()) return std::nullopt;
  return parse_double(s, what);
}

void check_field(const std::string& s) {
  if (s.find_first_of(",\n\r") != std::string::npos) {
    throw FormatError("CSV field contains a separator: '" + s + "'");
  }
}

}  // namespace

std::string fmt3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  std::string s = buf;
  if (s == "-0.000") s = "0.000";
  return s;
}

std::string format_cell(std::optional<double> diffusion, std::optional<double> ar) {
  return (diffusion ? fmt3(*diffusion) : "-") + " (" + (ar ? fmt3(*ar) : "-") + ")";
}

std::vector<ResultRow> rows_from_results(const std::vector<EvalResult>& results) {
  std::vector<ResultRow> rows;
  for (const auto& r : results) {
    ResultRow base;
    base.model = r.model;
    base.mode = to_string(r.mode);
    base.method = r.method;
    base.bits_or_plan = r.bits_or_plan;
    if (r.latency) {
      base.lat_mean_ms = r.latency->mean_ms;
      base.lat_std_ms = r.latency->std_ms;
    }
    base.raw_bits = r.raw_bits;
    base.eff_bits = r.eff_bits;
    base.seed = r.seed;
    base.config_hash = r.config_hash;
    if (r.failed) {
      base.task = "failed";
      rows.push_back(base);
      continue;
    }
    for (const auto& s : r.scores) {
      ResultRow row = base;
      row.task = to_string(s.kind);
      row.score = s.score;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out = std::string(kResultsCsvHeader) + "\n";
  for (const auto& r : rows) {
    for (const auto* f : {&r.model, &r.mode, &r.method, &r.bits_or_plan, &r.task, &r.config_hash}) {
      check_field(*f);
    }
    out += r.model + "," + r.mode + "," + r.method + "," + r.bits_or_plan + "," + r.task + "," +
           opt3(r.score) + "," + opt3(r.lat_mean_ms) + "," + opt3(r.lat_std_ms) + "," +
           fmt3(r.raw_bits) + "," + fmt3(r.eff_bits) + "," + std::to_string(r.seed) + "," +
           r.config_hash + "\n";
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines.front() != kResultsCsvHeader) {
    throw FormatError("results CSV must start with the header line");
  }
  std::vector<ResultRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    const std::string where = "results CSV line " + std::to_string(i + 1);
    if (f.size() != 12) throw FormatError(where + " has " + std::to_string(f.size()) + " fields");
    ResultRow r;
    r.model = f[0];
    r.mode = f[1];
    r.method = f[2];
    r.bits_or_plan = f[3];
    r.task = f[4];
    r.score = parse_opt(f[5], where);
    r.lat_mean_ms = parse_opt(f[6], where);
    r.lat_std_ms = parse_opt(f[7], where);
    r.raw_bits = parse_double(f[8], where);
    r.eff_bits = parse_double(f[9], where);
    try {
      r.seed = std::stoull(f[10]);
    } catch (const std::exception&) {
      throw FormatError("bad seed in " + where);
    }
    r.config_hash = f[11];
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string results_jsonl(const std::vector<EvalResult>& results) {
  std::string out;
  for (const auto& r : results) out += eval_result_to_json(r).dump() + "\n";
  return out;
}

std::vector<EvalResult> parse_results_jsonl(const std::string& text) {
  std::vector<EvalResult> out;
  for (const auto& l : lines_of(text)) {
    try {
      out.push_back(eval_result_from_json(nlohmann::json::parse(l)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed results JSONL: ") + e.what());
    }
  }
  return out;
}

static constexpr const char* kLatencyHeader =
    "model,mode,method,bits_or_plan,raw_bits,unit_of_work,seq_len,warmup_runs,timed_runs,lat_mean_ms,"
    "lat_std_ms,coarse_timer";

std::string latency_csv(const std::vector<LatencyRow>& rows) {
  std::string out = std::string(kLatencyHeader) + "\n";
  for (const auto& r : rows) {
    const auto& s = r.stats;
    out += r.model + "," + r.mode + "," + r.method + "," + r.bits_or_plan + "," + fmt3(r.raw_bits) +
           "," + to_string(s.unit) + "," + std::to_string(s.seq_len) + "," +
           std::to_string(s.warmup_runs) + "," + std::to_string(s.timed_runs) + "," +
           fmt3(s.mean_ms) + "," + fmt3(s.std_ms) + "," + (s.coarse_timer ? "1" : "0") + "\n";
  }
  return out;
}

std::vector<LatencyRow> parse_latency_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines.front() != kLatencyHeader) {
    throw FormatError("latency CSV must start with the header line");
  }
  std::vector<LatencyRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    const std::string where = "latency CSV line " + std::to_string(i + 1);
    if (f.size() != 12) throw FormatError(where + " has " + std::to_string(f.size()) + " fields");
    LatencyRow r;
    r.model = f[0];
    r.mode = f[1];
    r.method = f[2];
    r.bits_or_plan = f[3];
    r.raw_bits = parse_double(f[4], where);
    r.stats.unit = parse_unit_of_work(f[5]);
    r.stats.seq_len = static_cast<std::size_t>(parse_double(f[6], where));
    r.stats.warmup_runs = static_cast<std::size_t>(parse_double(f[7], where));
    r.stats.timed_runs = static_cast<std::size_t>(parse_double(f[8], where));
    r.stats.mean_ms = parse_double(f[9], where);
    r.stats.std_ms = parse_double(f[10], where);
    r.stats.coarse_timer = f[11] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

const EvalResult* find_result(const std::vector<EvalResult>& results, GenerationMode mode,
                              const std::string& method, const std::string& bits) {
  for (const auto& r : results) {
    if (!r.failed && r.mode == mode && r.method == method && r.bits_or_plan == bits) return &r;
  }
  return nullptr;
}

std::vector<int> widths_for(const std::vector<EvalResult>& results, const std::string& method) {
  std::vector<int> bits;
  for (const auto& r : results) {
    if (r.method != method) continue;
    const int b = std::stoi(r.bits_or_plan);
    if (std::find(bits.begin(), bits.end(), b) == bits.end()) bits.push_back(b);
  }
  std::sort(bits.rbegin(), bits.rend());
  return bits;
}

std::vector<std::string> hawq_plans_in(const std::vector<EvalResult>& results) {
  std::vector<std::string> plans;
  for (const auto& r : results) {
    if (r.method == "hawq" &&
        std::find(plans.begin(), plans.end(), r.bits_or_plan) == plans.end()) {
      plans.push_back(r.bits_or_plan);
    }
  }
  return plans;
}

}  // namespace

DegradationTable build_degradation_table(const std::vector<EvalResult>& results,
                                         const std::string& method) {
  const EvalResult* base_d = find_result(results, GenerationMode::Diffusion, "baseline", "16");
  const EvalResult* base_a = find_result(results, GenerationMode::AR, "baseline", "16");
  bool has_d = false, has_a = false;
  for (const auto& r : results) {
    (r.mode == GenerationMode::Diffusion ? has_d : has_a) = true;
  }
  if ((!has_d && !has_a) || (has_d && !base_d) || (has_a && !base_a)) {
    throw ContractError("degradation table needs a 16-bit baseline for every model");
  }
  DegradationTable t;
  t.method = method;
  for (const auto& s : (base_d ? base_d : base_a)->scores) t.tasks.push_back(s.kind);

  const auto make_row = [&](const std::string& level, const std::string& m, const std::string& b) {
    DegradationRow row;
    row.level = level;
    const EvalResult* d = find_result(results, GenerationMode::Diffusion, m, b);
    const EvalResult* a = find_result(results, GenerationMode::AR, m, b);
    for (const auto k : t.tasks) {
      DegradationCell c;
      if (d) c.diffusion = d->score_for(k);
      if (a) c.ar = a->score_for(k);
      if (c.diffusion && base_d) c.diffusion_delta = *c.diffusion - *base_d->score_for(k);
      if (c.ar && base_a) c.ar_delta = *c.ar - *base_a->score_for(k);
      row.cells.push_back(c);
    }
    t.rows.push_back(std::move(row));
  };
  make_row("16", "baseline", "16");
  for (const int b : widths_for(results, method)) {
    make_row(std::to_string(b), method, std::to_string(b));
  }
  for (const auto& p : hawq_plans_in(results)) make_row("HAWQ " + p, "hawq", p);
  return t;
}

std::string render_markdown(const DegradationTable& t) {
  std::ostringstream os;
  os << "| Bits |";
  for (const auto k : t.tasks) os << " " << to_string(k) << " | Δ " << to_string(k) << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < t.tasks.size(); ++i) os << "---|---|";
  os << "\n";
  for (const auto& row : t.rows) {
    os << "| " << row.level << " |";
    for (const auto& c : row.cells) {
      os << " " << format_cell(c.diffusion, c.ar) << " | " << format_cell(c.diffusion_delta, c.ar_delta)
         << " |";
    }
    os << "\n";
  }
  return os.str();
}

ParetoResult pareto_frontier(const std::vector<ParetoPoint>& points) {
  ParetoResult out;
  out.points = points;
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& p = points[a];
    const auto& q = points[b];
    if (p.bits != q.bits) return p.bits < q.bits;
    if (p.score != q.score) return p.score > q.score;
    if (p.label != q.label) return p.label < q.label;
    return a < b;
  });
  double best = -INFINITY;
  for (const std::size_t i : order) {
    auto& p = out.points[i];
    p.dominated = !(p.score > best);
    if (!p.dominated) {
      best = p.score;
      out.frontier.push_back(p);
    }
  }
  return out;
}

std::vector<TrendFlag> trend_flags(const std::vector<EvalResult>& results) {
  std::vector<TrendFlag> flags;
  std::vector<std::string> models;
  for (const auto& r : results) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
  }
  for (const auto& model : models) {
    const EvalResult* base = nullptr;
    for (const auto& r : results) {
      if (r.model == model && r.method == "baseline" && !r.failed) base = &r;
    }
    if (!base) continue;
    for (const std::string method : {"rtn", "gptq"}) {
      std::vector<std::pair<int, double>> seq = {{16, base->task_score()}};
      for (const auto& r : results) {
        if (r.model == model && r.method == method && !r.failed) {
          seq.push_back({std::stoi(r.bits_or_plan), r.task_score()});
        }
      }
      if (seq.size() < 2) continue;
      std::sort(seq.begin(), seq.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      TrendFlag f;
      f.name = "monotone_degradation/" + model + "/" + method;
      f.holds = true;
      for (std::size_t i = 1; i < seq.size(); ++i) {
        if (seq[i].second > seq[i - 1].second + 0.03) {
          f.holds = false;
          f.detail += std::to_string(seq[i].first) + "-bit beats " + std::to_string(seq[i - 1].first) +
                      "-bit by " + fmt3(seq[i].second - seq[i - 1].second) + "; ";
        }
      }
      if (f.holds) f.detail = "no violation above 0.030";
      flags.push_back(f);
    }
  }
  const EvalResult* bd = find_result(results, GenerationMode::Diffusion, "baseline", "16");
  const EvalResult* ba = find_result(results, GenerationMode::AR, "baseline", "16");
  if (bd && ba) {
    for (const std::string method : {"gptq", "rtn"}) {
      for (const std::string bits : {"4", "3"}) {
        const EvalResult* d = find_result(results, GenerationMode::Diffusion, method, bits);
        const EvalResult* a = find_result(results, GenerationMode::AR, method, bits);
        if (!d || !a) continue;
        const double dd = bd->task_score() - d->task_score();
        const double da = ba->task_score() - a->task_score();
        TrendFlag f;
        f.name = "diffusion_more_robust/" + method + "/" + bits;
        f.holds = dd < da;
        f.detail = "score drop diffusion " + fmt3(dd) + " vs AR " + fmt3(da);
        flags.push_back(f);
      }
    }
  }
  return flags;
}

namespace {

std::map<std::string, std::vector<const EvalResult*>> by_model(const std::vector<EvalResult>& results) {
  std::map<std::string, std::vector<const EvalResult*>> m;
  for (const auto& r : results) {
    if (!r.failed) m[r.model].push_back(&r);
  }
  return m;
}

std::string point_label(const EvalResult& r) { return r.method + " " + r.bits_or_plan; }

ParetoResult model_frontier(const std::vector<const EvalResult*>& rs) {
  std::vector<ParetoPoint> pts;
  for (const auto* r : rs) pts.push_back({point_label(*r), r->eff_bits, r->task_score(), false});
  return pareto_frontier(pts);
}

}  // namespace

std::string render_table_md(const Report& report) {
  std::ostringstream os;
  os << "# Quantization results\n\n";
  os << "Each cell shows the diffusion model score with the AR model score in parentheses. "
        "Δ columns are differences from the 16-bit baseline.\n";
  std::vector<std::string> methods;
  for (const auto& r : report.results) {
    if ((r.method == "rtn" || r.method == "gptq") &&
        std::find(methods.begin(), methods.end(), r.method) == methods.end()) {
      methods.push_back(r.method);
    }
  }
  std::sort(methods.rbegin(), methods.rend());  // gptq first
  for (const auto& m : methods) {
    os << "\n## " << m << "\n\n" << render_markdown(build_degradation_table(report.results, m));
  }
  os << "\n## Memory and task score\n\n| Model | Config | Raw bits | Effective bits | Task score | Pareto |\n"
        "|---|---|---|---|---|---|\n";
  for (const auto& [model, rs] : by_model(report.results)) {
    const ParetoResult pr = model_frontier(rs);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      os << "| " << model << " | " << point_label(*rs[i]) << " | " << fmt3(rs[i]->raw_bits) << " | "
         << fmt3(rs[i]->eff_bits) << " | " << fmt3(rs[i]->task_score()) << " | "
         << (pr.points[i].dominated ? "dominated" : "frontier") << " |\n";
    }
  }
  bool any_failed = false;
  for (const auto& r : report.results) any_failed |= r.failed;
  if (any_failed) {
    os << "\n## Failed cells\n\n";
    for (const auto& r : report.results) {
      if (r.failed) os << "- " << r.model << " " << point_label(r) << ": " << r.error << "\n";
    }
  }
  if (!report.sweep.empty()) {
    os << "\n## Three-way split sweep\n\n| Model | Split | Effective bits | Task score |\n|---|---|---|---|\n";
    for (const auto& r : report.sweep) {
      os << "| " << r.model << " | " << r.bits_or_plan << " | " << fmt3(r.eff_bits) << " | "
         << (r.failed ? std::string("failed") : fmt3(r.task_score())) << " |\n";
    }
  }
  if (!report.latency.empty()) {
    os << "\n## Latency\n\n| Model | Config | Unit | Mean ms | Std ms | Runs |\n|---|---|---|---|---|---|\n";
    for (const auto& l : report.latency) {
      os << "| " << l.model << " | " << l.method << " " << l.bits_or_plan << " | " << to_string(l.stats.unit)
         << " | " << fmt3(l.stats.mean_ms) << " | " << fmt3(l.stats.std_ms) << " | "
         << l.stats.warmup_runs << "+" << l.stats.timed_runs << (l.stats.coarse_timer ? " (coarse timer)" : "")
         << " |\n";
    }
  }
  os << "\n## Trend checks (reported, not asserted)\n\n";
  for (const auto& f : trend_flags(report.results)) {
    os << "- " << f.name << ": " << (f.holds ? "holds" : "FLAGGED") << " (" << f.detail << ")\n";
  }
  return os.str();
}

nlohmann::json report_json(const Report& report) {
  nlohmann::json j;
  j["results"] = nlohmann::json::array();
  for (const auto& r : report.results) j["results"].push_back(eval_result_to_json(r));
  j["sweep"] = nlohmann::json::array();
  for (const auto& r : report.sweep) j["sweep"].push_back(eval_result_to_json(r));
  j["pareto"] = nlohmann::json::object();
  for (const auto& [model, rs] : by_model(report.results)) {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& p : model_frontier(rs).frontier) {
      f.push_back({{"label", p.label}, {"eff_bits", p.bits}, {"score", p.score}});
    }
    j["pareto"][model] = f;
  }
  j["trends"] = nlohmann::json::array();
  for (const auto& f : trend_flags(report.results)) {
    j["trends"].push_back({{"name", f.name}, {"holds", f.holds}, {"detail", f.detail}});
  }
  j["latency"] = nlohmann::json::array();
  for (const auto& l : report.latency) {
    j["latency"].push_back({{"model", l.model},
                            {"method", l.method},
                            {"bits_or_plan", l.bits_or_plan},
                            {"unit_of_work", to_string(l.stats.unit)},
                            {"mean_ms", l.stats.mean_ms},
                            {"std_ms", l.stats.std_ms},
                            {"warmup_runs", l.stats.warmup_runs},
                            {"timed_runs", l.stats.timed_runs}});
  }
  return j;
}

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

struct Chart {
  double w = 720, h = 440, left = 60, right = 200, top = 40, bottom = 50;
  double x0, x1, y0, y1;
  std::ostringstream os;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (w - left - right); }
  double py(double y) const { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); }

  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
  }

  void begin(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w) << "\" height=\"" << num(h)
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << num(w / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
       << "</text>\n";
    os << "<line x1=\"" << num(px(x0)) << "\" y1=\"" << num(py(y0)) << "\" x2=\"" << num(px(x1))
       << "\" y2=\"" << num(py(y0)) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << num(px(x0)) << "\" y1=\"" << num(py(y0)) << "\" x2=\"" << num(px(x0))
       << "\" y2=\"" << num(py(y1)) << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = x0 + (x1 - x0) * i / 4.0;
      const double yv = y0 + (y1 - y0) * i / 4.0;
      os << "<text x=\"" << num(px(xv)) << "\" y=\"" << num(py(y0) + 15)
         << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
      os << "<text x=\"" << num(px(x0) - 5) << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">"
         << num(yv) << "</text>\n";
    }
    os << "<text x=\"" << num((left + w - right) / 2) << "\" y=\"" << num(h - 10)
       << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
    os << "<text x=\"15\" y=\"" << num(h / 2) << "\" transform=\"rotate(-90 15 " << num(h / 2)
       << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  }

  void legend(std::size_t i, const std::string& name, const std::string& color) {
    const double y = top + 10 + 16.0 * static_cast<double>(i);
    os << "<g class=\"legend\"><circle cx=\"" << num(w - right + 15) << "\" cy=\"" << num(y)
       << "\" r=\"4\" fill=\"" << color << "\"/><text x=\"" << num(w - right + 25) << "\" y=\""
       << num(y + 4) << "\">" << name << "</text></g>\n";
  }

  std::string end() {
    os << "</svg>\n";
    return os.str();
  }
};

using SeriesKey = std::pair<std::string, std::string>;  // (model, method)

}  // namespace

std::string latency_svg(const Report& report) {
  Chart c;
  c.x0 = 0;
  c.x1 = 16;
  c.y0 = 0;
  double ymax = 0.0;
  for (const auto& l : report.latency) ymax = std::max(ymax, l.stats.mean_ms + l.stats.std_ms);
  c.y1 = ymax > 0 ? ymax * 1.1 : 1.0;
  c.begin("Per-step latency vs precision", "average bits per weight", "latency (ms)");
  if (report.latency.empty()) {
    c.os << "<text x=\"" << Chart::num(c.px(8)) << "\" y=\"" << Chart::num(c.py(0.5))
         << "\" text-anchor=\"middle\">no latency measurements</text>\n";
    return c.end();
  }
  std::map<SeriesKey, std::vector<const LatencyRow*>> series;
  for (const auto& l : report.latency) series[{l.model, l.method}].push_back(&l);
  std::size_t idx = 0;
  for (auto& [key, rows] : series) {
    const std::string color = kPalette[idx % 8];
    std::stable_sort(rows.begin(), rows.end(),
                     [](const LatencyRow* a, const LatencyRow* b) { return a->raw_bits < b->raw_bits; });
    c.os << "<g class=\"series\" data-model=\"" << key.first << "\" data-method=\"" << key.second << "\">\n";
    if (rows.size() > 1) {
      c.os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
      for (const auto* r : rows) c.os << Chart::num(c.px(r->raw_bits)) << "," << Chart::num(c.py(r->stats.mean_ms)) << " ";
      c.os << "\"/>\n";
    }
    for (const auto* r : rows) {
      const double x = c.px(r->raw_bits);
      c.os << "<line x1=\"" << Chart::num(x) << "\" y1=\"" << Chart::num(c.py(r->stats.mean_ms - r->stats.std_ms))
           << "\" x2=\"" << Chart::num(x) << "\" y2=\"" << Chart::num(c.py(r->stats.mean_ms + r->stats.std_ms))
           << "\" stroke=\"" << color << "\"/>\n";
      c.os << "<circle cx=\"" << Chart::num(x) << "\" cy=\"" << Chart::num(c.py(r->stats.mean_ms))
           << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    c.os << "</g>\n";
    c.legend(idx, key.first + " " + key.second, color);
    ++idx;
  }
  return c.end();
}

std::string pareto_svg(const Report& report) {
  Chart c;
  c.x0 = 0;
  c.x1 = 17;
  c.y0 = 0;
  c.y1 = 1;
  c.begin("Task score vs memory (HAWQ labeled)", "effective bits per weight", "task score");
  std::map<SeriesKey, std::vector<const EvalResult*>> series;
  for (const auto& r : report.results) {
    if (!r.failed) series[{r.model, r.method}].push_back(&r);
  }
  std::size_t idx = 0;
  for (const auto& [key, rows] : series) {
    const std::string color = kPalette[idx % 8];
    c.os << "<g class=\"series\" data-model=\"" << key.first << "\" data-method=\"" << key.second << "\">\n";
    for (const auto* r : rows) {
      const double x = c.px(r->eff_bits);
      const double y = c.py(r->task_score());
      c.os << "<circle cx=\"" << Chart::num(x) << "\" cy=\"" << Chart::num(y) << "\" r=\"4\" fill=\"" << color
           << "\"/>\n";
      if (r->method == "hawq") {
        c.os << "<text x=\"" << Chart::num(x + 6) << "\" y=\"" << Chart::num(y - 6) << "\">HAWQ "
             << r->bits_or_plan << "</text>\n";
      }
    }
    c.os << "</g>\n";
    c.legend(idx, key.first + " " + key.second, color);
    ++idx;
  }
  std::size_t m = 0;
  for (const auto& [model, rs] : by_model(report.results)) {
    const ParetoResult pr = model_frontier(rs);
    c.os << "<polyline class=\"frontier\" data-model=\"" << model << "\" fill=\"none\" stroke=\"#555\" "
         << "stroke-dasharray=\"" << (m == 0 ? "4,3" : "1,3") << "\" points=\"";
    for (const auto& p : pr.frontier) c.os << Chart::num(c.px(p.bits)) << "," << Chart::num(c.py(p.score)) << " ";
    c.os << "\"/>\n";
    ++m;
  }
  return c.end();
}

void emit(const Report& report, const std::set<std::string>& formats, const std::string& out_dir) {
  namespace fs = std::filesystem;
  for (const auto& f : formats) {
    if (f != "csv" && f != "json" && f != "markdown" && f != "svg") {
      throw ParameterError("unknown report format '" + f + "'");
    }
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create report directory " + out_dir + ": " + ec.message());
  const auto put = [&](const std::string& name, const std::string& content) {
    write_file_bytes((fs::path(out_dir) / name).string(),
                     std::vector<std::uint8_t>(content.begin(), content.end()));
  };
  if (formats.count("csv")) {
    put("results.csv", results_csv(rows_from_results(report.results)));
    put("results.jsonl", results_jsonl(report.results));
    if (!report.sweep.empty()) put("sweep.csv", results_csv(rows_from_results(report.sweep)));
    if (!report.latency.empty()) put("latency.csv", latency_csv(report.latency));
  }
  if (formats.count("json")) put("report.json", report_json(report).dump(1) + "\n");
  if (formats.count("markdown")) put("table.md", render_table_md(report));
  if (formats.count("svg")) {
    put("latency.svg", latency_svg(report));
    put("pareto.svg", pareto_svg(report));
  }
}

}  // namespace ptqlab

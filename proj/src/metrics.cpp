#include "ulsa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "ulsa/error.hpp"
#include "ulsa/ops.hpp"
#include "ulsa/parallel.hpp"

namespace ulsa {

DiceResult dice(std::span<const int> pred, std::span<const int> truth, std::size_t num_classes) {
  if (pred.size() != truth.size())
    throw ShapeMismatch("dice: prediction has " + std::to_string(pred.size()) + " labels, truth has " +
                        std::to_string(truth.size()));
  std::vector<std::size_t> p(num_classes, 0), t(num_classes, 0), both(num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int a = pred[i], b = truth[i];
    if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= num_classes || static_cast<std::size_t>(b) >= num_classes)
      throw Error("dice: label outside [0, " + std::to_string(num_classes) + ")");
    ++p[a];
    ++t[b];
    if (a == b) ++both[a];
  }
  DiceResult r;
  r.per_class.assign(num_classes, 0.0);
  r.included.assign(num_classes, false);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (p[c] + t[c] == 0) continue;
    r.included[c] = true;
    r.per_class[c] = 2.0 * static_cast<double>(both[c]) / static_cast<double>(p[c] + t[c]);
    sum += r.per_class[c];
    ++n;
  }
  r.macro = n == 0 ? 1.0 : sum / static_cast<double>(n);
  return r;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeMismatch("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks of tied groups, then the Mann-Whitney U of the positives.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 1);  // mean of 1-based ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      const int l = labels[order[k]];
      if (l != 0 && l != 1) throw Error("auroc: labels must be 0 or 1");
      if (l == 1) {
        rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw SingleClass("auroc needs both positive and negative samples");
  const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::vector<SampleResult> predict_samples(const Model& model, const Manifest& manifest, const StainSet& stains,
                                          std::size_t image_size, std::size_t run) {
  const Task task = model.head().kind;
  const std::size_t k = model.head().num_classes;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.split == Split::test && stains.contains(r.stain)) {
      if (!r.labeled()) throw Error(r.image_path + ": test record of stain " + r.stain + " has no ground truth");
      idx.push_back(i);
    }
  }
  std::vector<SampleResult> out(idx.size());
  constexpr std::size_t kChunk = 16;
  const std::size_t chunks = (idx.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * kChunk, hi = std::min(idx.size(), lo + kChunk);
    std::vector<Image> imgs;
    for (std::size_t j = lo; j < hi; ++j) {
      Image img = read_png(manifest.resolve(manifest.records[idx[j]].image_path));
      imgs.push_back(resize_bilinear(img, image_size, image_size));
    }
    Tape tape;
    BoundModel bm(model, tape, false);
    const Tensor logits = bm.predict(tape.constant(images_to_batch(imgs))).value();
    const std::size_t hw = image_size * image_size;
    for (std::size_t j = lo; j < hi; ++j) {
      const auto& rec = manifest.records[idx[j]];
      SampleResult& s = out[j];
      s.run = run;
      s.image_path = rec.image_path;
      s.stain = rec.stain;
      const std::size_t b = j - lo;
      if (task == Task::segmentation) {
        if (!rec.mask_path) throw Error(rec.image_path + ": segmentation test record without mask");
        const Gray8 m = resize_nearest(read_png_gray(manifest.resolve(*rec.mask_path)), image_size, image_size);
        std::vector<int> truth(m.values.begin(), m.values.end()), pred(hw);
        for (std::size_t p = 0; p < hw; ++p) {
          std::size_t best = 0;
          for (std::size_t c = 1; c < k; ++c)
            if (logits[(b * k + c) * hw + p] > logits[(b * k + best) * hw + p]) best = c;
          pred[p] = static_cast<int>(best);
        }
        const DiceResult d = dice(pred, truth, k);
        s.score = d.macro;
        s.class_dice = d.per_class;
        s.class_included = d.included;
      } else {
        if (!rec.label) throw Error(rec.image_path + ": classification test record without label");
        const double z0 = logits[b * k], z1 = logits[b * k + 1];
        s.score = 1.0 / (1.0 + std::exp(z0 - z1));
        s.label = *rec.label;
      }
    }
  });
  return out;
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

double EvalReport::row_mean(const std::string& stain) const {
  for (const auto& r : rows)
    if (r.stain == stain) return r.mean;
  throw Error("report has no row for stain '" + stain + "'");
}

double EvalReport::source_mean() const {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.role == StainRole::source) v.push_back(r.mean);
  return mean_of(v);
}

EvalReport build_report(const std::vector<SampleResult>& samples, const StainSet& stains, Task task,
                        std::size_t num_classes) {
  EvalReport rep;
  rep.task = task;
  std::size_t runs = 0;
  for (const auto& s : samples) runs = std::max(runs, s.run + 1);
  if (runs == 0) throw Error("no test samples to evaluate");
  rep.runs = runs;
  rep.per_run.assign(runs, {});

  std::vector<std::string> missing;
  for (const auto& id : stains.all()) {
    StainRow row;
    row.stain = id.name;
    row.role = id.role;
    std::vector<std::vector<double>> class_means(num_classes);
    std::vector<double> per_run;
    for (std::size_t run = 0; run < runs; ++run) {
      std::vector<double> scores;
      std::vector<int> labels;
      std::vector<double> csum(num_classes, 0.0);
      std::vector<std::size_t> cn(num_classes, 0);
      for (const auto& s : samples) {
        if (s.run != run || s.stain != id.name) continue;
        scores.push_back(s.score);
        labels.push_back(s.label);
        for (std::size_t c = 0; c < s.class_dice.size() && c < num_classes; ++c)
          if (s.class_included[c]) {
            csum[c] += s.class_dice[c];
            ++cn[c];
          }
      }
      if (scores.empty()) break;
      row.n = scores.size();
      per_run.push_back(task == Task::segmentation ? mean_of(scores) : auroc(scores, labels));
      for (std::size_t c = 0; c < num_classes; ++c)
        if (cn[c] > 0) class_means[c].push_back(csum[c] / static_cast<double>(cn[c]));
    }
    if (per_run.size() != runs) {
      missing.push_back(id.name);
      continue;
    }
    row.mean = mean_of(per_run);
    row.std = sample_std(per_run);
    if (task == Task::segmentation)
      for (std::size_t c = 0; c < num_classes; ++c) row.class_mean.push_back(mean_of(class_means[c]));
    for (std::size_t run = 0; run < runs; ++run) rep.per_run[run].push_back(per_run[run]);
    rep.rows.push_back(std::move(row));
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    throw Error("no test ground truth for stain(s): " + names);
  }
  for (std::size_t run = 0; run < runs; ++run) {
    std::vector<double> t;
    for (std::size_t k = 0; k < rep.rows.size(); ++k)
      if (rep.rows[k].role == StainRole::target) t.push_back(rep.per_run[run][k]);
    rep.overall_per_run.push_back(mean_of(t));
  }
  rep.overall_mean = mean_of(rep.overall_per_run);
  rep.overall_std = sample_std(rep.overall_per_run);
  return rep;
}

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_points(double v, int prec = 1) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, 100.0 * v);
  return buf;
}

}  // namespace

void write_report_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "stain,role,n,runs,mean,std";
  const std::size_t k = r.rows.empty() ? 0 : r.rows[0].class_mean.size();
  for (std::size_t c = 0; c < k; ++c) f << ",class_" << c;
  f << '\n';
  for (const auto& row : r.rows) {
    f << row.stain << ',' << (row.role == StainRole::source ? "source" : "target") << ',' << row.n << ',' << r.runs
      << ',' << fmt17(row.mean) << ',' << fmt17(row.std);
    for (double c : row.class_mean) f << ',' << fmt17(c);
    f << '\n';
  }
  f << "Overall,target,," << r.runs << ',' << fmt17(r.overall_mean) << ',' << fmt17(r.overall_std);
  for (std::size_t c = 0; c < k; ++c) f << ',';
  f << '\n';
}

std::string render_report_table(const EvalReport& r, const std::string& title) {
  std::vector<std::string> head, cells;
  auto cell = [&](double m, double s) { return fmt_points(m) + " (" + fmt_points(s, 2) + ")"; };
  for (StainRole role : {StainRole::source, StainRole::target})
    for (const auto& row : r.rows)
      if (row.role == role) {
        head.push_back(row.stain + (role == StainRole::source ? " [intra]" : " [inter]"));
        cells.push_back(cell(row.mean, row.std));
      }
  head.push_back("Overall");
  cells.push_back(cell(r.overall_mean, r.overall_std));
  std::size_t first = std::max<std::size_t>(title.size(), 6);
  std::ostringstream out;
  std::vector<std::size_t> w;
  for (std::size_t i = 0; i < head.size(); ++i) w.push_back(std::max(head[i].size(), cells[i].size()));
  auto pad = [](const std::string& s, std::size_t n) { return s + std::string(n - s.size(), ' '); };
  out << pad(r.task == Task::segmentation ? "Dice" : "AUROC", first);
  for (std::size_t i = 0; i < head.size(); ++i) out << "  " << pad(head[i], w[i]);
  out << '\n' << pad(title, first);
  for (std::size_t i = 0; i < cells.size(); ++i) out << "  " << pad(cells[i], w[i]);
  out << '\n';
  return out.str();
}

void write_per_sample_csv(const std::filesystem::path& path, const std::vector<SampleResult>& samples) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  const std::size_t k = samples.empty() ? 0 : samples[0].class_dice.size();
  f << "run,image_path,stain,score,label";
  for (std::size_t c = 0; c < k; ++c) f << ",dice_" << c;
  f << '\n';
  for (const auto& s : samples) {
    f << s.run << ',' << s.image_path << ',' << s.stain << ',' << fmt17(s.score) << ',' << s.label;
    for (std::size_t c = 0; c < k; ++c) {
      f << ',';
      if (s.class_included[c]) f << fmt17(s.class_dice[c]);
    }
    f << '\n';
  }
}

namespace {

constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 160, kTop = 40, kBottom = 60;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<')
      o += "&lt;";
    else if (c == '>')
      o += "&gt;";
    else if (c == '&')
      o += "&amp;";
    else
      o += c;
  }
  return o;
}

void svg_open(std::ostream& o, const std::string& title) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
}

void y_axis(std::ostream& o, double lo, double hi, const std::string& label) {
  const double h = kH - kTop - kBottom;
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0, y = kH - kBottom - h * i / 4.0;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    o << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << buf << "</text>\n";
    o << "<line x1=\"" << kLeft << "\" y1=\"" << y << "\" x2=\"" << kW - kRight << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/>\n";
  }
  o << "<text transform=\"translate(18," << kTop + h / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << esc(label)
    << "</text>\n";
}

std::pair<double, double> value_range(const std::vector<double>& v) {
  double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  lo = std::floor(std::max(0.0, lo - 5.0) / 5.0) * 5.0;
  hi = std::ceil(std::min(100.0, hi + 5.0) / 5.0) * 5.0;
  if (hi <= lo) hi = lo + 5.0;
  return {lo, hi};
}

}  // namespace

void write_line_chart_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<ChartSeries>& series) {
  std::vector<double> xs, ys;
  for (const auto& s : series) {
    xs.insert(xs.end(), s.x.begin(), s.x.end());
    ys.insert(ys.end(), s.y.begin(), s.y.end());
  }
  if (xs.empty()) throw Error("line chart without data");
  const double xlo = *std::min_element(xs.begin(), xs.end()), xhi = *std::max_element(xs.begin(), xs.end());
  const auto [ylo, yhi] = value_range(ys);
  const double w = kW - kLeft - kRight, h = kH - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (xhi > xlo ? (x - xlo) / (xhi - xlo) : 0.5) * w; };
  auto py = [&, ylo = ylo, yhi = yhi](double y) { return kH - kBottom - (y - ylo) / (yhi - ylo) * h; };
  std::ofstream o(path, std::ios::trunc);
  if (!o) throw IoError("cannot write " + path.string());
  svg_open(o, title);
  y_axis(o, ylo, yhi, y_label);
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  std::vector<double> ticks = xs;
  std::sort(ticks.begin(), ticks.end());
  ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
  for (double t : ticks) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", t);
    o << "<text x=\"" << px(t) << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">" << buf << "</text>\n";
  }
  o << "<text x=\"" << kLeft + w / 2 << "\" y=\"" << kH - 18 << "\" text-anchor=\"middle\">" << esc(x_label)
    << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* col = kPalette[i % 7];
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t j = 0; j < s.x.size(); ++j) o << px(s.x[j]) << ',' << py(s.y[j]) << ' ';
    o << "\"/>\n";
    for (std::size_t j = 0; j < s.x.size(); ++j)
      o << "<circle cx=\"" << px(s.x[j]) << "\" cy=\"" << py(s.y[j]) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    o << "<text x=\"" << kW - kRight + 10 << "\" y=\"" << kTop + 16 * (i + 1) << "\" fill=\"" << col << "\">"
      << esc(s.name) << "</text>\n";
  }
  o << "</svg>\n";
}

void write_bar_chart_svg(const std::filesystem::path& path, const std::string& title, const std::string& y_label,
                         const std::vector<std::pair<std::string, double>>& bars) {
  if (bars.empty()) throw Error("bar chart without data");
  std::vector<double> ys;
  for (const auto& b : bars) ys.push_back(b.second);
  auto [ylo, yhi] = value_range(ys);
  const double w = kW - kLeft - kRight, h = kH - kTop - kBottom, slot = w / static_cast<double>(bars.size());
  std::ofstream o(path, std::ios::trunc);
  if (!o) throw IoError("cannot write " + path.string());
  svg_open(o, title);
  y_axis(o, ylo, yhi, y_label);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double top = kH - kBottom - (bars[i].second - ylo) / (yhi - ylo) * h;
    const double x = kLeft + slot * i + slot * 0.15;
    o << "<rect x=\"" << x << "\" y=\"" << top << "\" width=\"" << slot * 0.7 << "\" height=\"" << kH - kBottom - top
      << "\" fill=\"" << kPalette[i % 7] << "\"/>\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", bars[i].second);
    o << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << top - 4 << "\" text-anchor=\"middle\">" << buf << "</text>\n";
    o << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">"
      << esc(bars[i].first) << "</text>\n";
  }
  o << "</svg>\n";
}

}  // namespace ulsa

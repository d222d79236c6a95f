#pragma once

// Greedy CTC decoding, WER scoring and the matched-pairs sentence-segment
// word error (MAPSSWE) significance test, with whole utterances as the
// matched segments.

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "qct/tensor.hpp"

namespace qct {

/// Collapses repeats, then removes blanks.
inline std::vector<int> ctc_collapse(const std::vector<int>& frame_labels, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int l : frame_labels) {
    if (l != prev && l != blank) out.push_back(l);
    prev = l;
  }
  return out;
}

/// Argmax per frame of a [T x (V+1)] logit matrix, then collapse.
inline std::vector<int> greedy_ctc_decode(const Tensor& logits, std::size_t blank) {
  if (logits.dim() != 2 || blank >= logits.cols()) throw DimensionError("greedy_ctc_decode: bad logits shape");
  const std::size_t t_max = logits.rows(), c = logits.cols();
  std::vector<int> best(t_max);
  auto v = logits.values();
  for (std::size_t t = 0; t < t_max; ++t) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (v[t * c + k] > v[t * c + arg]) arg = k;
    best[t] = static_cast<int>(arg);
  }
  return ctc_collapse(best, static_cast<int>(blank));
}

struct WerCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_tokens = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
  double wer() const {
    return reference_tokens == 0 ? 0.0 : 100.0 * static_cast<double>(errors()) / static_cast<double>(reference_tokens);
  }
  WerCounts& operator+=(const WerCounts& o) {
    substitutions += o.substitutions;
    deletions += o.deletions;
    insertions += o.insertions;
    reference_tokens += o.reference_tokens;
    return *this;
  }
};

/// Unit-cost Levenshtein alignment. The backtrace prefers substitution
/// (or match), then deletion, then insertion.
inline WerCounts edit_distance_wer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  if (ref.empty()) throw UndefinedWerError("WER undefined for an empty reference");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), at(i - 1, j) + 1, at(i, j - 1) + 1});
  WerCounts c;
  c.reference_tokens = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1])) {
      c.substitutions += ref[i - 1] != hyp[j - 1];
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

struct DecodeResult {
  std::string id;
  std::vector<int> hypothesis;
  std::vector<int> reference;
};

struct UtteranceScore {
  std::string id;
  WerCounts counts;
};

struct WerReport {
  std::vector<UtteranceScore> utterances;
  WerCounts total;

  double wer() const { return total.wer(); }
};

inline WerReport score(const std::vector<DecodeResult>& results) {
  WerReport r;
  std::map<std::string, int> seen;
  for (const auto& d : results) {
    if (seen[d.id]++) throw ContractError("duplicate utterance id " + d.id);
    UtteranceScore s{d.id, edit_distance_wer(d.reference, d.hypothesis)};
    r.total += s.counts;
    r.utterances.push_back(std::move(s));
  }
  return r;
}

/// Machine-readable lines: "utt_id TAB S TAB D TAB I TAB N".
inline void write_report_lines(std::ostream& os, const WerReport& r) {
  for (const auto& u : r.utterances) {
    os << u.id << '\t' << u.counts.substitutions << '\t' << u.counts.deletions << '\t' << u.counts.insertions << '\t'
       << u.counts.reference_tokens << '\n';
  }
}

inline WerReport read_report_lines(std::istream& is) {
  WerReport r;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    UtteranceScore s;
    if (!std::getline(fields, s.id, '\t') ||
        !(fields >> s.counts.substitutions >> s.counts.deletions >> s.counts.insertions >> s.counts.reference_tokens)) {
      throw FormatError("malformed report line: " + line);
    }
    r.total += s.counts;
    r.utterances.push_back(std::move(s));
  }
  return r;
}

inline void print_wer_table(std::ostream& os, const WerReport& r, const std::string& label) {
  os << std::left << std::setw(14) << "system" << std::right << std::setw(8) << "N" << std::setw(7) << "S"
     << std::setw(7) << "D" << std::setw(7) << "I" << std::setw(9) << "WER%" << '\n';
  os << std::left << std::setw(14) << label << std::right << std::setw(8) << r.total.reference_tokens << std::setw(7)
     << r.total.substitutions << std::setw(7) << r.total.deletions << std::setw(7) << r.total.insertions
     << std::setw(9) << std::fixed << std::setprecision(2) << r.wer() << '\n';
  os.unsetf(std::ios::fixed);
}

struct SignificanceResult {
  double z = 0.0;
  double p_value = 1.0;
  bool significant = false;
};

/// Matched-pairs test on per-segment error differences d_i = errA - errB:
/// Z = mean(d) / sqrt(var(d) / n) with the sample variance, two-sided
/// normal p-value.
inline SignificanceResult mapsswe_test(const std::vector<double>& diffs, double alpha = 0.05) {
  if (diffs.size() < 2) throw ContractError("mapsswe_test: need at least two segments");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("mapsswe_test: alpha must lie in (0, 1)");
  const double n = static_cast<double>(diffs.size());
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= n;
  double var = 0.0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  var /= (n - 1.0);
  SignificanceResult r;
  if (var == 0.0) {
    if (mean == 0.0) return r;
    r.z = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p_value = 0.0;
  } else {
    r.z = mean / std::sqrt(var / n);
    r.p_value = std::erfc(std::abs(r.z) / std::sqrt(2.0));
  }
  r.significant = r.p_value < alpha;
  return r;
}

/// Pairs two reports by utterance id; the id sets must match exactly.
inline SignificanceResult compare_reports(const WerReport& a, const WerReport& b, double alpha = 0.05) {
  std::map<std::string, double> errors_b;
  for (const auto& u : b.utterances) errors_b[u.id] = static_cast<double>(u.counts.errors());
  if (errors_b.size() != b.utterances.size() || a.utterances.size() != b.utterances.size()) {
    throw ContractError("compare: reports cover different utterance sets");
  }
  std::vector<double> diffs;
  for (const auto& u : a.utterances) {
    auto it = errors_b.find(u.id);
    if (it == errors_b.end()) throw ContractError("compare: utterance " + u.id + " missing from second report");
    diffs.push_back(static_cast<double>(u.counts.errors()) - it->second);
  }
  return mapsswe_test(diffs, alpha);
}

}  // namespace qct

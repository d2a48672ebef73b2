#pragma once

// Deliberately naive reference implementations used as test oracles.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>
#include <vector>

#include "rvt/random.hpp"

namespace rvt::oracle {

using Words = std::vector<std::string>;
using Gram = std::vector<std::string>;

inline Words split_words(const std::string& s) {
  Words out;
  std::string cur;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::vector<Gram> grams(const Words& w, std::size_t n) {
  std::vector<Gram> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) out.emplace_back(w.begin() + static_cast<long>(i), w.begin() + static_cast<long>(i + n));
  return out;
}

inline double count_of(const std::vector<Gram>& list, const Gram& g) {
  double c = 0;
  for (const auto& x : list) c += x == g ? 1 : 0;
  return c;
}

inline std::vector<Gram> distinct(const std::vector<Gram>& list) {
  std::vector<Gram> out;
  for (const auto& g : list)
    if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
  return out;
}

inline std::vector<double> bleu(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs,
                                std::size_t max_n) {
  std::vector<double> match(max_n, 0), total(max_n, 0);
  double c_len = 0, r_len = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto c = split_words(cands[i]);
    std::vector<Words> rs;
    for (const auto& r : refs[i]) rs.push_back(split_words(r));
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto cg = grams(c, n);
      for (const auto& g : distinct(cg)) {
        double best = 0;
        for (const auto& r : rs) best = std::max(best, count_of(grams(r, n), g));
        match[n - 1] += std::min(count_of(cg, g), best);
      }
      total[n - 1] += static_cast<double>(cg.size());
    }
    c_len += static_cast<double>(c.size());
    double best_len = -1, best_diff = 1e18;
    for (const auto& r : rs) {
      const double d = std::abs(static_cast<double>(r.size()) - static_cast<double>(c.size()));
      if (d < best_diff || (d == best_diff && static_cast<double>(r.size()) < best_len)) {
        best_diff = d;
        best_len = static_cast<double>(r.size());
      }
    }
    r_len += best_len;
  }
  std::vector<double> out(max_n, 0);
  if (c_len == 0) return out;
  const double bp = c_len > r_len ? 1.0 : std::exp(1.0 - r_len / c_len);
  for (std::size_t n = 1; n <= max_n; ++n) {
    double prod = 1;
    bool zero = false;
    for (std::size_t k = 0; k < n; ++k) {
      if (match[k] == 0) zero = true;
      else prod *= match[k] / total[k];
    }
    out[n - 1] = zero ? 0.0 : 100.0 * bp * std::pow(prod, 1.0 / static_cast<double>(n));
  }
  return out;
}

/// LCS by exhaustive recursion over the full table.
inline std::size_t lcs(const Words& a, const Words& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
  return t[a.size()][b.size()];
}

inline double rouge_l(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs) {
  double sum = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto c = split_words(cands[i]);
    double p = 0, r = 0;
    for (const auto& ref : refs[i]) {
      const auto w = split_words(ref);
      if (w.empty() || c.empty()) continue;
      const double l = static_cast<double>(lcs(c, w));
      p = std::max(p, l / static_cast<double>(c.size()));
      r = std::max(r, l / static_cast<double>(w.size()));
    }
    if (p > 0 && r > 0) sum += (1 + 1.44) * p * r / (r + 1.44 * p);
  }
  return 100.0 * sum / static_cast<double>(cands.size());
}

inline double cider(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs) {
  const double N = static_cast<double>(cands.size());
  auto df = [&](const Gram& g, std::size_t n) {
    double d = 0;
    for (const auto& rs : refs) {
      bool hit = false;
      for (const auto& r : rs) hit = hit || count_of(grams(split_words(r), n), g) > 0;
      d += hit ? 1 : 0;
    }
    return std::max(1.0, d);
  };
  auto vec = [&](const Words& w, std::size_t n) {
    std::vector<std::pair<Gram, double>> v;
    const auto g = grams(w, n);
    for (const auto& x : distinct(g)) v.push_back({x, count_of(g, x) * (std::log(N) - std::log(df(x, n)))});
    return v;
  };
  auto cos = [](const std::vector<std::pair<Gram, double>>& a, const std::vector<std::pair<Gram, double>>& b) {
    double dot = 0, na = 0, nb = 0;
    for (const auto& [g, v] : a) {
      na += v * v;
      for (const auto& [h, u] : b)
        if (g == h) dot += v * u;
    }
    for (const auto& [h, u] : b) nb += u * u;
    return na == 0 || nb == 0 ? 0.0 : dot / std::sqrt(na * nb);
  };
  double total = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto c = split_words(cands[i]);
    double s = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
      double m = 0;
      for (const auto& r : refs[i]) m += cos(vec(c, n), vec(split_words(r), n));
      s += m / static_cast<double>(refs[i].size());
    }
    total += 10.0 * s / 4.0;
  }
  return 100.0 * total / N;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxy += x[i] * y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

/// Random short sentences over a small vocabulary so n-grams collide.
inline std::string random_sentence(Rng& rng, std::size_t min_len, std::size_t max_len) {
  static const std::vector<std::string> words{"the", "a", "man", "woman", "dog", "is", "running", "park",
                                              "ball", "red", "sits", "on", "bench", "eating", "food"};
  const std::size_t len = min_len + rng.index(max_len - min_len + 1);
  std::string out;
  for (std::size_t i = 0; i < len; ++i) {
    if (i) out += ' ';
    out += words[rng.index(words.size())];
  }
  return out;
}

}  // namespace rvt::oracle

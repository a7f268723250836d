#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "coupalign/data_synth.hpp"
#include "coupalign/model.hpp"

namespace coupalign {

/// Binary 8-bit PGM, min-max normalized; a constant map is written as zeros.
inline void write_pgm(const std::filesystem::path& path, std::size_t h, std::size_t w, const std::vector<double>& v) {
  if (v.size() != h * w) throw ContractError("write_pgm: " + std::to_string(v.size()) + " values for " +
                                             std::to_string(h) + "x" + std::to_string(w));
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << "P5\n" << w << " " << h << "\n255\n";
  for (double x : v) {
    const double t = range > 0 ? (x - *lo) / range : 0.0;
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
}

/// Writes, for one sample: the per-word attention map of every active WPA
/// stage, Q_w (csv + a 1×N strip), the predicted and ground-truth masks.
/// Returns the written file names.
template <class T>
std::vector<std::string> export_attention(const CoupAlign<T>& model, const Sample& s,
                                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const Prediction<T> p = model.predict(s.image_tensor<T>(), s.tokens);
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, std::size_t h, std::size_t w, const std::vector<double>& v) {
    write_pgm(dir / name, h, w, v);
    written.push_back(name);
  };
  const auto& words = Vocabulary::words();
  std::ofstream index(dir / "attention.csv");
  index << "stage,token,word,file\n";
  for (std::size_t i = 0; i < 4; ++i) {
    const Tensor<T>& a = p.word_attn[i];
    if (!a.defined()) continue;
    const std::size_t g = model.config().grid(i + 1), tokens = a.dim(1);
    for (std::size_t t = 0; t < tokens; ++t) {
      if (!p.valid[t]) continue;
      std::vector<double> map(g * g);
      for (std::size_t q = 0; q < g * g; ++q) map[q] = static_cast<double>(a[q * tokens + t]);
      const std::string word = words[static_cast<std::size_t>(s.tokens[t])];
      const std::string label = word.front() == '<' ? word.substr(1, word.size() - 2) : word;
      const std::string name = "stage" + std::to_string(i + 1) + "_tok" + std::to_string(t) + "_" + label + ".pgm";
      emit(name, g, g, map);
      index << i + 1 << ',' << t << ',' << label << ',' << name << '\n';
    }
  }
  if (p.q_w.defined()) {
    std::ofstream q(dir / "q_w.csv");
    q << "query,weight\n";
    std::vector<double> strip;
    for (std::size_t n = 0; n < p.q_w.numel(); ++n) {
      q << n << ',' << detail::fmt_double(static_cast<double>(p.q_w[n])) << '\n';
      strip.push_back(static_cast<double>(p.q_w[n]));
    }
    written.push_back("q_w.csv");
    emit("q_w.pgm", 1, strip.size(), strip);
  }
  std::vector<double> pred(p.logits.numel()), gt(s.mask.begin(), s.mask.end());
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = p.logits[i] >= T(0) ? 1.0 : 0.0;
  emit("pred.pgm", s.height, s.width, pred);
  emit("gt.pgm", s.height, s.width, gt);
  return written;
}

}  // namespace coupalign

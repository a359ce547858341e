#include "vap/kernels.hpp"

#include <cmath>
#include <limits>

#include "vap/error.hpp"

namespace vap::kernels {

namespace {

template <typename T>
using Column = Eigen::Array<T, Eigen::Dynamic, 1>;

int block_count(int rows) { return (rows + kAttentionBlock - 1) / kAttentionBlock; }

template <typename T>
void check_streams(const Matrix<T>& queries, std::span<const KeyValue<T>> streams, int heads, int offset) {
  if (streams.empty()) throw ConfigError("attention needs at least one key/value stream");
  if (heads <= 0 || queries.cols() % heads != 0) throw ConfigError("model width must be divisible by heads");
  const Eigen::Index needed = offset + queries.rows();
  for (const auto& s : streams) {
    if (s.keys->rows() < needed || s.values->rows() < needed)
      throw RangeError("key/value stream shorter than the attended range");
    if (s.keys->cols() != queries.cols() || s.values->cols() != queries.cols())
      throw ConfigError("key/value width differs from query width");
  }
}

}  // namespace

template <typename T>
void causal_attention(const Matrix<T>& queries, std::span<const KeyValue<T>> streams, int heads, int offset,
                      Matrix<T>& out, AttentionTape<T>* tape, Exec exec) {
  check_streams(queries, streams, heads, offset);
  const int n = static_cast<int>(queries.rows());
  const int width = static_cast<int>(queries.cols());
  const int dh = width / heads;
  const int n_streams = static_cast<int>(streams.size());
  const int blocks = block_count(n);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  out.resize(n, width);
  if (tape) {
    tape->heads = heads;
    tape->streams = n_streams;
    tape->blocks = blocks;
    tape->probs.resize(static_cast<std::size_t>(heads) * n_streams * blocks);
  }

#pragma omp parallel for schedule(static) if (exec == Exec::parallel && heads > 1)
  for (int h = 0; h < heads; ++h) {
    std::vector<Matrix<T>> scratch(n_streams);
    std::vector<Matrix<T>> partial(n_streams);
    std::vector<Column<T>> denominators(n_streams);
    for (int rb = 0; rb < blocks; ++rb) {
      const int i0 = rb * kAttentionBlock;
      const int rows = std::min(kAttentionBlock, n - i0);
      const int visible = offset + i0 + rows;
      const auto q = queries.block(i0, h * dh, rows, dh);

      // Row-wise loops: broadcasting across a row-major block defeats vectorization.
      Column<T> row_max = Column<T>::Constant(rows, -std::numeric_limits<T>::infinity());
      for (int j = 0; j < n_streams; ++j) {
        Matrix<T>& s = tape ? tape->at(h, j, rb) : scratch[j];
        s.resize(rows, visible);
        s.noalias() = scale * (q * streams[j].keys->block(0, h * dh, visible, dh).transpose());
        for (int r = 0; r < rows; ++r)
          row_max(r) = std::max(row_max(r), s.row(r).head(offset + i0 + r + 1).maxCoeff());
      }
      for (int j = 0; j < n_streams; ++j) {
        Matrix<T>& s = tape ? tape->at(h, j, rb) : scratch[j];
        denominators[j].resize(rows);
        for (int r = 0; r < rows; ++r) {
          const int seen = offset + i0 + r + 1;
          auto row = s.row(r);
          row.head(seen) = (row.head(seen).array() - row_max(r)).exp().matrix();
          row.tail(visible - seen).setZero();
          denominators[j](r) = row.head(seen).sum();
        }
        partial[j].noalias() = s * streams[j].values->block(0, h * dh, visible, dh);
      }
      Column<T> denominator = denominators[0];
      Matrix<T> numerator = partial[0];
      for (int j = 1; j < n_streams; ++j) {
        denominator = denominator + denominators[j];
        numerator = numerator + partial[j];
      }
      for (int r = 0; r < rows; ++r) out.row(i0 + r).segment(h * dh, dh) = numerator.row(r) / denominator(r);
      if (tape)
        for (int j = 0; j < n_streams; ++j) {
          Matrix<T>& p = tape->at(h, j, rb);
          for (int r = 0; r < rows; ++r) p.row(r) /= denominator(r);
        }
    }
  }
}

template <typename T>
void causal_attention_backward(const Matrix<T>& queries, std::span<const KeyValue<T>> streams, int heads,
                               const Matrix<T>& out, const Matrix<T>& dout, const AttentionTape<T>& tape,
                               Matrix<T>& dq, std::span<Matrix<T>* const> dkeys, std::span<Matrix<T>* const> dvalues,
                               Exec exec) {
  check_streams(queries, streams, heads, 0);
  const int n = static_cast<int>(queries.rows());
  const int width = static_cast<int>(queries.cols());
  const int dh = width / heads;
  const int n_streams = static_cast<int>(streams.size());
  const int blocks = block_count(n);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  if (tape.blocks != blocks || tape.streams != n_streams || tape.heads != heads)
    throw ConfigError("attention tape does not match the backward call");
  dq.setZero(n, width);

#pragma omp parallel for schedule(static) if (exec == Exec::parallel && heads > 1)
  for (int h = 0; h < heads; ++h) {
    Matrix<T> dp;
    for (int rb = 0; rb < blocks; ++rb) {
      const int i0 = rb * kAttentionBlock;
      const int rows = std::min(kAttentionBlock, n - i0);
      const int visible = i0 + rows;
      const auto q = queries.block(i0, h * dh, rows, dh);
      const auto d_o = dout.block(i0, h * dh, rows, dh);
      const Column<T> r = (d_o.array() * out.block(i0, h * dh, rows, dh).array()).rowwise().sum();
      for (int j = 0; j < n_streams; ++j) {
        const Matrix<T>& p = tape.at(h, j, rb);
        dp.noalias() = d_o * streams[j].values->block(0, h * dh, visible, dh).transpose();
        for (int k = 0; k < rows; ++k)
          dp.row(k) = (scale * p.row(k).array() * (dp.row(k).array() - r(k))).matrix();
        dq.block(i0, h * dh, rows, dh).noalias() += dp * streams[j].keys->block(0, h * dh, visible, dh);
        dkeys[j]->block(0, h * dh, visible, dh).noalias() += dp.transpose() * q;
        dvalues[j]->block(0, h * dh, visible, dh).noalias() += p.transpose() * d_o;
      }
    }
  }
}

template void causal_attention<float>(const Matrix<float>&, std::span<const KeyValue<float>>, int, int,
                                      Matrix<float>&, AttentionTape<float>*, Exec);
template void causal_attention<double>(const Matrix<double>&, std::span<const KeyValue<double>>, int, int,
                                       Matrix<double>&, AttentionTape<double>*, Exec);
template void causal_attention_backward<float>(const Matrix<float>&, std::span<const KeyValue<float>>, int,
                                               const Matrix<float>&, const Matrix<float>&,
                                               const AttentionTape<float>&, Matrix<float>&,
                                               std::span<Matrix<float>* const>, std::span<Matrix<float>* const>,
                                               Exec);
template void causal_attention_backward<double>(const Matrix<double>&, std::span<const KeyValue<double>>, int,
                                                const Matrix<double>&, const Matrix<double>&,
                                                const AttentionTape<double>&, Matrix<double>&,
                                                std::span<Matrix<double>* const>, std::span<Matrix<double>* const>,
                                                Exec);

}  // namespace vap::kernels

namespace vap::reference {

Matrix<double> causal_attention(const Matrix<double>& queries, const std::vector<Matrix<double>>& keys,
                                const std::vector<Matrix<double>>& values, int heads, int offset) {
  const int n = static_cast<int>(queries.rows());
  const int width = static_cast<int>(queries.cols());
  const int dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix<double> out = Matrix<double>::Zero(n, width);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      const int last = offset + i;
      std::vector<double> scores;
      double max_score = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < keys.size(); ++j)
        for (int t = 0; t <= last; ++t) {
          double dot = 0.0;
          for (int d = 0; d < dh; ++d) dot += queries(i, h * dh + d) * keys[j](t, h * dh + d);
          scores.push_back(dot * scale);
          max_score = std::max(max_score, dot * scale);
        }
      double total = 0.0;
      for (double& s : scores) total += (s = std::exp(s - max_score));
      std::size_t idx = 0;
      for (std::size_t j = 0; j < keys.size(); ++j)
        for (int t = 0; t <= last; ++t, ++idx)
          for (int d = 0; d < dh; ++d) out(i, h * dh + d) += scores[idx] / total * values[j](t, h * dh + d);
    }
  return out;
}

std::vector<double> log_mel_frame(std::span<const float> window_samples, int mel_bins, int sample_rate,
                                  double log_floor) {
  const int w = static_cast<int>(window_samples.size());
  int n = 1;
  while (n < w) n <<= 1;
  const double pi = 3.14159265358979323846;
  std::vector<double> magnitude(n / 2 + 1);
  for (int k = 0; k <= n / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (int i = 0; i < w; ++i) {
      const double hann = 0.5 - 0.5 * std::cos(2.0 * pi * i / w);
      const double x = window_samples[i] * hann;
      re += x * std::cos(2.0 * pi * k * i / n);
      im -= x * std::sin(2.0 * pi * k * i / n);
    }
    magnitude[k] = std::sqrt(re * re + im * im);
  }
  auto to_mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto to_hz = [](double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); };
  const double mel_max = to_mel(sample_rate / 2.0);
  std::vector<double> out(mel_bins);
  for (int m = 0; m < mel_bins; ++m) {
    const double lo = to_hz(mel_max * m / (mel_bins + 1));
    const double mid = to_hz(mel_max * (m + 1) / (mel_bins + 1));
    const double hi = to_hz(mel_max * (m + 2) / (mel_bins + 1));
    double acc = 0.0;
    bool any = false;
    for (int k = 0; k <= n / 2; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n;
      double wgt = 0.0;
      if (f > lo && f < mid) wgt = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi) wgt = (hi - f) / (hi - mid);
      if (wgt > 0.0) any = true;
      acc += wgt * magnitude[k];
    }
    if (!any) acc = magnitude[std::min(n / 2, static_cast<int>(std::lround(mid * n / sample_rate)))];
    out[m] = std::log(acc + log_floor);
  }
  return out;
}

}  // namespace vap::reference

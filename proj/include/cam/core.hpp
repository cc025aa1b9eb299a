#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cam {

// Dense types. Everything in the library is 64-bit and row-major so that a
// matrix row is one token / one document and maps onto contiguous memory.
template <typename Scalar>
using MatrixT =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorT = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixT<double>;
using RowVector = RowVectorT<double>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

std::string shape_string(const Matrix& m);

// Seeded generator with platform-independent derived distributions.
// std::uniform_real_distribution and friends are implementation-defined, so
// every draw here is built directly from the raw mt19937_64 stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  std::uint64_t uniform_int(std::uint64_t n);  // [0, n)
  int uniform_int(int lo, int hi);             // [lo, hi]
  double normal();
  double normal(double mean, double stddev);
  bool bernoulli(double p);
  int categorical(std::span<const double> weights);
  Rng split(std::uint64_t stream);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

std::vector<std::size_t> iota_indices(std::size_t n);

}  // namespace cam

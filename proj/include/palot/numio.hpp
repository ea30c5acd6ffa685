#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "palot/error.hpp"

namespace palot {

// ---------------------------------------------------------------------------
// Tensor container
//
// On-disk layout, all integers little-endian:
//   bytes 0..7   magic "PALOTTNS"
//   u32          rank
//   u64 * rank   shape
//   u32          dtype tag (0 = float64, 1 = float32, 2 = int64)
//   payload      product(shape) elements, row-major, little-endian
// A rank-0 tensor holds exactly one element.
// ---------------------------------------------------------------------------

enum class DType : std::uint32_t { Float64 = 0, Float32 = 1, Int64 = 2 };

const char* dtype_name(DType d);

class Tensor {
 public:
  using Payload = std::variant<std::vector<double>, std::vector<float>, std::vector<std::int64_t>>;

  Tensor() : payload_(std::vector<double>{0.0}) {}
  // Throws ShapeError when product(shape) != payload length or a dimension is 0.
  Tensor(std::vector<std::uint64_t> shape, Payload payload);

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }

  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m);
  template <typename Derived>
  static Tensor from_vector(const Eigen::MatrixBase<Derived>& v);

  const std::vector<std::uint64_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept;
  DType dtype() const noexcept { return static_cast<DType>(payload_.index()); }
  const Payload& payload() const noexcept { return payload_; }

  // Element i (row-major) converted to double.
  double at(std::size_t i) const;

  // Bit-exact comparison: same shape, same dtype, identical payload bytes.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  std::vector<std::uint64_t> shape_;
  Payload payload_;
};

template <typename Derived>
Tensor Tensor::from_matrix(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  std::vector<Scalar> data(static_cast<std::size_t>(m.rows() * m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data[i * m.cols() + j] = m(i, j);
  std::vector<std::uint64_t> shape{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  if constexpr (std::is_same_v<Scalar, double> || std::is_same_v<Scalar, float> ||
                std::is_same_v<Scalar, std::int64_t>) {
    return Tensor(std::move(shape), std::move(data));
  } else {
    static_assert(sizeof(Scalar) == 0, "unsupported tensor scalar");
  }
}

template <typename Derived>
Tensor Tensor::from_vector(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  std::vector<Scalar> data(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) data[i] = v(i);
  return Tensor({static_cast<std::uint64_t>(v.size())}, std::move(data));
}

// Converts a rank-2 tensor (any numeric dtype) to a dense matrix.
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> as_matrix(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("expected rank-2 tensor, got rank " + std::to_string(t.rank()));
  const auto rows = static_cast<Eigen::Index>(t.shape()[0]);
  const auto cols = static_cast<Eigen::Index>(t.shape()[1]);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<Scalar>(t.at(i * cols + j));
  return m;
}

// Converts a rank-1 tensor to a vector.
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> as_vector(const Tensor& t) {
  if (t.rank() != 1) throw ShapeError("expected rank-1 tensor, got rank " + std::to_string(t.rank()));
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(static_cast<Eigen::Index>(t.numel()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = static_cast<Scalar>(t.at(i));
  return v;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

// ---------------------------------------------------------------------------
// Caption pair records
// ---------------------------------------------------------------------------

struct CaptionPairRecord {
  std::int64_t caption_id = 0;
  std::int64_t image_id = 0;
  std::string text_en;
  std::string text_bn;
  std::optional<double> similarity;
  std::optional<bool> valid;

  friend bool operator==(const CaptionPairRecord&, const CaptionPairRecord&) = default;
};

enum class RecordFormat { Csv, Jsonl };

RecordFormat record_format_from_path(const std::filesystem::path& path);

std::vector<CaptionPairRecord> read_records(const std::filesystem::path& path, RecordFormat format);
std::vector<CaptionPairRecord> parse_records(std::istream& in, RecordFormat format);

void write_records(const std::filesystem::path& path, const std::vector<CaptionPairRecord>& records,
                   RecordFormat format);
void write_records(std::ostream& out, const std::vector<CaptionPairRecord>& records, RecordFormat format);

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

enum class RetentionMode { Mass, Count };

struct RunConfig {
  double lambda_pal = 0.5;
  double alpha = 0.3;
  double beta = 0.5;
  double tau_attn = 1.0;
  double rho = 0.5;
  int last_k = 2;
  double nce_temp = 0.07;
  double ot_eps = 0.05;
  int ot_iters = 30;
  std::int64_t seed = 42;
  RetentionMode retention = RetentionMode::Mass;

  // Throws DomainError naming the offending field.
  void validate() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json to_json(const RunConfig& cfg);
// Overlays keys present in `j` onto `base`. Unknown keys are rejected.
RunConfig merge_config(RunConfig base, const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace palot
